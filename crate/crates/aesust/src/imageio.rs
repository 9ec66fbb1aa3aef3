//! PNG/JPEG decoding to `1×3×H×W` tensors in [0, 1] and PNG encoding.

use std::io::Cursor;

use aesust_core::controls::Mask;
use aesust_core::Tensor;
use image::{ImageFormat, RgbImage};

const PNG_SIG: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];
const JPEG_SOI: [u8; 3] = [0xff, 0xd8, 0xff];

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("unsupported image format (byte {offset} is {found:#04x}; expected PNG or JPEG)")]
    Unsupported { offset: usize, found: u8 },
    #[error("image data is empty")]
    Empty,
    #[error("corrupt {format} header at byte {offset}: {detail}")]
    CorruptHeader {
        format: &'static str,
        offset: usize,
        detail: String,
    },
    #[error("corrupt {format} stream: {source}")]
    Corrupt {
        format: &'static str,
        #[source]
        source: image::ImageError,
    },
    #[error("image is {width}x{height}; both sides must be at least {min}")]
    TooSmall { width: u32, height: u32, min: u32 },
    #[error("mask is {found_w}x{found_h}, content is {width}x{height}")]
    MaskSize {
        width: u32,
        height: u32,
        found_w: u32,
        found_h: u32,
    },
}

/// Identifies the format from the leading bytes and sanity-checks the first
/// header structure, naming the offset of the first bad byte.
pub fn sniff(bytes: &[u8]) -> Result<ImageFormat, ImageError> {
    if bytes.is_empty() {
        return Err(ImageError::Empty);
    }
    if bytes[0] == PNG_SIG[0] {
        if let Some(i) = (0..PNG_SIG.len()).find(|&i| bytes.get(i) != Some(&PNG_SIG[i])) {
            return Err(corrupt_or_short("PNG", bytes, i, "bad signature"));
        }
        // First chunk must be IHDR with a 13-byte body.
        if bytes.len() < 16 {
            return Err(corrupt_or_short("PNG", bytes, bytes.len(), "truncated before IHDR"));
        }
        if bytes[8..12] != [0, 0, 0, 13] {
            return Err(corrupt_or_short("PNG", bytes, 8, "IHDR length is not 13"));
        }
        if &bytes[12..16] != b"IHDR" {
            return Err(corrupt_or_short("PNG", bytes, 12, "first chunk is not IHDR"));
        }
        return Ok(ImageFormat::Png);
    }
    if bytes[0] == JPEG_SOI[0] {
        if let Some(i) = (0..JPEG_SOI.len()).find(|&i| bytes.get(i) != Some(&JPEG_SOI[i])) {
            return Err(corrupt_or_short("JPEG", bytes, i, "bad start-of-image marker"));
        }
        return Ok(ImageFormat::Jpeg);
    }
    Err(ImageError::Unsupported {
        offset: 0,
        found: bytes[0],
    })
}

fn corrupt_or_short(format: &'static str, bytes: &[u8], offset: usize, detail: &str) -> ImageError {
    let detail = if offset >= bytes.len() {
        format!("{detail} (file ends after {} bytes)", bytes.len())
    } else {
        detail.to_string()
    };
    ImageError::CorruptHeader { format, offset, detail }
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage, ImageError> {
    let format = sniff(bytes)?;
    let name = if format == ImageFormat::Png { "PNG" } else { "JPEG" };
    let img = image::load(Cursor::new(bytes), format).map_err(|source| ImageError::Corrupt { format: name, source })?;
    Ok(img.to_rgb8())
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// Decodes to a `1×3×H×W` tensor with values `v/255`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>, ImageError> {
    Ok(rgb_to_tensor(&decode_rgb(bytes)?))
}

pub fn tensor_to_rgb(t: &Tensor<f32>) -> RgbImage {
    let (_, _, h, w) = t.dims4();
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let px = |c: usize| (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// PNG bytes of the first image in the batch, clamped to [0, 1].
pub fn encode_image(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    tensor_to_rgb(t)
        .write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    out
}

/// Binary mask from a grayscale rendering of the image (`≥128` is inside).
pub fn decode_mask(bytes: &[u8], width: u32, height: u32) -> Result<Mask, ImageError> {
    let format = sniff(bytes)?;
    let name = if format == ImageFormat::Png { "PNG" } else { "JPEG" };
    let img = image::load(Cursor::new(bytes), format)
        .map_err(|source| ImageError::Corrupt { format: name, source })?
        .to_luma8();
    if img.dimensions() != (width, height) {
        return Err(ImageError::MaskSize {
            width,
            height,
            found_w: img.width(),
            found_h: img.height(),
        });
    }
    let data = img.as_raw().iter().map(|&v| v >= 128).collect();
    Ok(Mask::new(height as usize, width as usize, data).expect("dimensions match"))
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let img = image::GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        image::Luma([if mask.data[y as usize * mask.width + x as usize] { 255 } else { 0 }])
    });
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png).expect("in-memory PNG");
    out
}

/// Window `(top, left, height, width)` that trims each side to a multiple of
/// `m`, keeping the center.
pub fn center_window(h: usize, w: usize, m: usize) -> (usize, usize, usize, usize) {
    let (ch, cw) = (h / m * m, w / m * m);
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

pub fn crop(t: &Tensor<f32>, top: usize, left: usize, ch: usize, cw: usize) -> Tensor<f32> {
    let (b, c, h, w) = t.dims4();
    assert!(top + ch <= h && left + cw <= w);
    let d = t.data();
    Tensor::from_fn(&[b, c, ch, cw], |i| {
        let x = i % cw;
        let y = (i / cw) % ch;
        let plane = i / (ch * cw);
        d[plane * h * w + (top + y) * w + left + x]
    })
}

pub fn crop_mask(m: &Mask, top: usize, left: usize, ch: usize, cw: usize) -> Mask {
    Mask::from_fn(ch, cw, |y, x| m.data[(top + y) * m.width + left + x])
}

/// Trims to multiples of 16 (what the encoder needs), rejecting images that
/// would end up smaller than `min` on a side.
pub fn fit_to_grid(t: &Tensor<f32>, min: usize) -> Result<Tensor<f32>, ImageError> {
    let (_, _, h, w) = t.dims4();
    let (top, left, ch, cw) = center_window(h, w, 16);
    if ch < min.max(16) || cw < min.max(16) {
        return Err(ImageError::TooSmall {
            width: w as u32,
            height: h as u32,
            min: min.max(16) as u32,
        });
    }
    if (ch, cw) == (h, w) {
        return Ok(t.clone());
    }
    Ok(crop(t, top, left, ch, cw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solid_red_png_decodes_to_unit_red() {
        let img = RgbImage::from_pixel(4, 3, image::Rgb([255, 0, 0]));
        let mut bytes = Vec::new();
        img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png).unwrap();
        let t = decode_image(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 3, 3, 4]);
        assert!(t.data()[..12].iter().all(|&v| v == 1.0));
        assert!(t.data()[12..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_within_one_lsb() {
        let t = Tensor::from_fn(&[1, 3, 5, 7], |i| ((i * 37) % 101) as f32 / 100.0);
        let back = decode_image(&encode_image(&t)).unwrap();
        assert!(back.max_abs_diff(&t) <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn corrupt_headers_name_the_offset() {
        let t = Tensor::full(&[1, 3, 2, 2], 0.5f32);
        let mut png = encode_image(&t);
        png[13] = b'X';
        let msg = decode_image(&png).unwrap_err().to_string();
        assert!(msg.contains("byte 12"), "{msg}");
        let mut sig = encode_image(&t);
        sig[3] = b'Q';
        assert!(decode_image(&sig).unwrap_err().to_string().contains("byte 3"));
        let bad = decode_image(b"GIF89a").unwrap_err().to_string();
        assert!(bad.contains("byte 0"), "{bad}");
        let jpeg = decode_image(&[0xff, 0xd8, 0x00]).unwrap_err().to_string();
        assert!(jpeg.contains("byte 2"), "{jpeg}");
    }

    #[test]
    fn grid_fit_keeps_center() {
        let t = Tensor::from_fn(&[1, 3, 40, 35], |i| i as f32);
        let f = fit_to_grid(&t, 16).unwrap();
        assert_eq!(f.shape(), &[1, 3, 32, 32]);
        assert_eq!(f.data()[0], t.data()[4 * 35 + 1]);
        assert!(fit_to_grid(&Tensor::full(&[1, 3, 15, 64], 0.0f32), 16).is_err());
    }
}
