//! The stylization request shared by the CLI and the HTTP service. Both build
//! a [`StylizeRequest`] and call [`run_request`], so equal parameters give
//! equal PNG bytes.

use aesust_core::controls::{self, Controls, RegionMaskSet};
use aesust_core::discriminator::MIN_SIDE;
use aesust_core::losses::Stage;
use aesust_core::{AesUst, Tensor};
use serde::Serialize;

use crate::imageio::{self, ImageError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Limits {
    pub max_image_edge: usize,
    pub max_styles: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_image_edge: 1024,
            max_styles: 4,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct StylizeRequest {
    pub content: Vec<u8>,
    pub styles: Vec<Vec<u8>>,
    pub weights: Option<Vec<f64>>,
    pub alpha: Option<f64>,
    pub preserve_color: bool,
    /// Grayscale PNGs at the content's size, one per style.
    pub masks: Vec<Vec<u8>>,
}

#[derive(Debug, thiserror::Error)]
pub enum RequestError {
    #[error("{what}: {source}")]
    Image {
        what: String,
        #[source]
        source: ImageError,
    },
    #[error("{what} is {width}x{height}; the limit is {max} pixels per side")]
    TooLarge {
        what: String,
        width: usize,
        height: usize,
        max: usize,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] aesust_core::Error),
}

impl RequestError {
    /// True when the caller sent something unacceptable (as opposed to an
    /// internal failure).
    pub fn is_client_error(&self) -> bool {
        match self {
            RequestError::Model(e) => !matches!(e, aesust_core::Error::NonFinite(_)),
            _ => true,
        }
    }
}

/// Parses `"0.5,0.25,0.25"`.
pub fn parse_weights(text: &str) -> Result<Vec<f64>, RequestError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| RequestError::Invalid(format!("weight {:?} is not a number", s.trim())))
        })
        .collect()
}

fn load(bytes: &[u8], what: &str, limits: &Limits) -> Result<Tensor<f32>, RequestError> {
    let img = imageio::decode_image(bytes).map_err(|source| RequestError::Image {
        what: what.into(),
        source,
    })?;
    let (_, _, h, w) = img.dims4();
    if h.max(w) > limits.max_image_edge {
        return Err(RequestError::TooLarge {
            what: what.into(),
            width: w,
            height: h,
            max: limits.max_image_edge,
        });
    }
    Ok(img)
}

/// Smallest side an input may have: stage-II checkpoints run the
/// discriminator on styles (and on the content when α < 1).
pub fn min_side(stage: Stage) -> usize {
    match stage {
        Stage::Pretrain => 16,
        Stage::Finetune => MIN_SIDE,
    }
}

/// Decodes and validates everything, then runs the controls pipeline.
/// Returns the raw output tensor.
pub fn stylize_tensor(model: &AesUst<f32>, req: &StylizeRequest, limits: &Limits) -> Result<Tensor<f32>, RequestError> {
    if req.styles.is_empty() {
        return Err(RequestError::Invalid("at least one style image is required".into()));
    }
    if req.styles.len() > limits.max_styles {
        return Err(RequestError::Invalid(format!(
            "{} styles given; at most {} are allowed",
            req.styles.len(),
            limits.max_styles
        )));
    }
    let min = min_side(model.stage);
    let raw = load(&req.content, "content image", limits)?;
    let (_, _, h, w) = raw.dims4();
    let (top, left, ch, cw) = imageio::center_window(h, w, 16);
    let content = imageio::fit_to_grid(&raw, min).map_err(|source| RequestError::Image {
        what: "content image".into(),
        source,
    })?;
    let styles = req
        .styles
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let what = format!("style image {}", i + 1);
            let t = load(b, &what, limits)?;
            imageio::fit_to_grid(&t, min).map_err(|source| RequestError::Image { what, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let masks = if req.masks.is_empty() {
        None
    } else {
        let masks = req
            .masks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let m = imageio::decode_mask(b, w as u32, h as u32).map_err(|source| RequestError::Image {
                    what: format!("mask {}", i + 1),
                    source,
                })?;
                Ok(imageio::crop_mask(&m, top, left, ch, cw))
            })
            .collect::<Result<Vec<_>, RequestError>>()?;
        Some(RegionMaskSet::new(masks)?)
    };
    let ctl = Controls {
        alpha: req.alpha.unwrap_or(1.0),
        weights: req.weights.clone(),
        preserve_color: req.preserve_color,
        masks,
    };
    ctl.validate(styles.len())?;
    Ok(controls::run(model, &content, &styles, &ctl)?)
}

/// [`stylize_tensor`] followed by PNG encoding.
pub fn run_request(model: &AesUst<f32>, req: &StylizeRequest, limits: &Limits) -> Result<Vec<u8>, RequestError> {
    stylize_tensor(model, req, limits).map(|t| imageio::encode_image(&t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_parse_and_reject_junk() {
        assert_eq!(parse_weights("0.5, 0.5").unwrap(), vec![0.5, 0.5]);
        assert!(parse_weights("0.5,x").unwrap_err().to_string().contains("\"x\""));
    }
}
