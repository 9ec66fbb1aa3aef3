//! Frozen VGG-layout encoder and the trainable mirrored decoder.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::ArchiveEntry;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Bound, Graph, Var};
use crate::kernels::{ConvGeom, PadMode};
use crate::nn::{ChannelScale, Conv, Init};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const TAP_NAMES: [&str; 5] = ["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"];
const TAP_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
/// Convolutions per stage up to relu5_1.
const STAGE_DEPTHS: [usize; 5] = [2, 2, 4, 4, 1];

/// Index of a tap in a [`Pyramid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tap {
    Relu1_1 = 0,
    Relu2_1 = 1,
    Relu3_1 = 2,
    Relu4_1 = 3,
    Relu5_1 = 4,
}

/// Feature pyramid of graph vars, one per tap.
#[derive(Debug, Clone, Copy)]
pub struct Pyramid {
    pub taps: [Var; 5],
}

impl Pyramid {
    pub fn tap(&self, t: Tap) -> Var {
        self.taps[t as usize]
    }

    pub fn to_tensors<T: Real>(&self, g: &Graph<T>) -> FeaturePyramid<T> {
        FeaturePyramid {
            taps: self.taps.map(|v| g.value(v).clone()),
        }
    }
}

/// Materialized feature pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    pub taps: [Tensor<T>; 5],
}

impl<T: Real> FeaturePyramid<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        TAP_NAMES.iter().position(|&n| n == name).map(|i| &self.taps[i])
    }

    pub fn tap(&self, t: Tap) -> &Tensor<T> {
        &self.taps[t as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderSpec {
    pub scale: ChannelScale,
}

impl EncoderSpec {
    pub fn tap_channels(&self) -> [usize; 5] {
        TAP_WIDTHS.map(|w| self.scale.ch(w))
    }

    /// `(name, cin, cout)` of each convolution, in order.
    pub fn layers(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut cin = 3;
        for (stage, (&depth, &width)) in STAGE_DEPTHS.iter().zip(&TAP_WIDTHS).enumerate() {
            let cout = self.scale.ch(width);
            for i in 0..depth {
                out.push((format!("enc.conv{}_{}", stage + 1, i + 1), cin, cout));
                cin = cout;
            }
        }
        out
    }
}

/// Validates an image batch for the encoder: rank 4, 3 channels, sides a
/// multiple of 16, finite values.
pub fn check_image<T: Real>(image: &Tensor<T>, what: &str) -> Result<()> {
    let (_, c, h, w) = image.expect_rank4(what)?;
    if c != 3 {
        return Err(shape_err!("{what}: expected 3 channels, got {c}"));
    }
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(shape_err!("{what}: {h}×{w} is not a multiple of 16"));
    }
    if !image.is_finite() {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub spec: EncoderSpec,
    convs: Vec<Conv>,
    params: ParamStore<T>,
}

const ENC_GEOM: ConvGeom = ConvGeom::new(1, 1, PadMode::Zero);

impl<T: Real> Encoder<T> {
    /// Seeded orthogonal initialization (ReLU gain).
    pub fn random(scale: ChannelScale, seed: u64) -> Self {
        let spec = EncoderSpec { scale };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let convs = spec
            .layers()
            .into_iter()
            .map(|(name, cin, cout)| {
                Conv::new(&mut params, &mut rng, &name, cin, cout, 3, ENC_GEOM, Init::Orthogonal(core::f64::consts::SQRT_2))
            })
            .collect();
        Encoder { spec, convs, params }
    }

    /// Builds an encoder whose weights come from archive entries; every conv
    /// weight/bias must be present with matching shape and dtype.
    pub fn from_entries(scale: ChannelScale, entries: &[ArchiveEntry]) -> Result<Self> {
        let mut enc = Self::random(scale, 0);
        enc.params.load_entries(entries)?;
        Ok(enc)
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        g.bind(&self.params, false)
    }

    /// Runs the encoder on a bound graph var; the caller validates the shape.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Pyramid {
        let mut taps = Vec::with_capacity(5);
        let mut h = x;
        let mut layer = 0;
        for (stage, &depth) in STAGE_DEPTHS.iter().enumerate() {
            if stage > 0 {
                h = g.max_pool2(h);
            }
            for i in 0..depth {
                h = self.convs[layer].forward(g, p, h);
                h = g.relu(h);
                if i == 0 {
                    taps.push(h);
                }
                layer += 1;
            }
        }
        Pyramid {
            taps: taps.try_into().expect("five taps"),
        }
    }

    pub fn encode(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        check_image(image, "encoder input")?;
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let x = g.constant(image.clone());
        Ok(self.forward(&mut g, &p, x).to_tensors(&g))
    }
}

pub const DEC_GEOM: ConvGeom = ConvGeom::new(1, 1, PadMode::Reflect);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderSpec {
    pub scale: ChannelScale,
}

impl DecoderSpec {
    pub fn in_channels(&self) -> usize {
        self.scale.ch(512)
    }

    /// `(cin, cout, upsample_after)` per conv, from the relu4_1 level to RGB.
    pub fn layers(&self) -> Vec<(usize, usize, bool)> {
        let c = |b| self.scale.ch(b);
        alloc::vec![
            (c(512), c(256), true),
            (c(256), c(256), false),
            (c(256), c(256), false),
            (c(256), c(256), false),
            (c(256), c(128), true),
            (c(128), c(128), false),
            (c(128), c(64), true),
            (c(64), c(64), false),
            (c(64), 3, false),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<T> {
    pub spec: DecoderSpec,
    convs: Vec<Conv>,
    ups: Vec<bool>,
    pub params: ParamStore<T>,
}

impl<T: Real> Decoder<T> {
    pub fn new(scale: ChannelScale, seed: u64) -> Self {
        let spec = DecoderSpec { scale };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut ups = Vec::new();
        for (i, (cin, cout, up)) in spec.layers().into_iter().enumerate() {
            convs.push(Conv::new(&mut params, &mut rng, &format!("dec.conv{i}"), cin, cout, 3, DEC_GEOM, Init::FanIn));
            ups.push(up);
        }
        Decoder {
            spec,
            convs,
            ups,
            params,
        }
    }

    /// Final conv, whose bias sets the output level of an all-zero feature.
    pub fn output_conv(&self) -> &Conv {
        self.convs.last().expect("decoder has layers")
    }

    /// Raw (unclamped) decoder output.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let mut h = x;
        let last = self.convs.len() - 1;
        for (i, (conv, &up)) in self.convs.iter().zip(&self.ups).enumerate() {
            h = conv.forward(g, p, h);
            if i != last {
                h = g.relu(h);
            }
            if up {
                let (_, _, hh, ww) = g.value(h).dims4();
                h = g.resize_nearest(h, 2 * hh, 2 * ww);
            }
        }
        h
    }

    pub fn check_feature(&self, feature: &Tensor<T>) -> Result<()> {
        let (_, c, _, _) = feature.expect_rank4("decoder input")?;
        if c != self.spec.in_channels() {
            return Err(shape_err!(
                "decoder expects {} channels, got {c}",
                self.spec.in_channels()
            ));
        }
        if !feature.is_finite() {
            return Err(Error::NonFinite("decoder input".into()));
        }
        Ok(())
    }

    /// Decodes a relu4_1-level feature to an image of 8× its spatial size.
    pub fn decode(&self, feature: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_feature(feature)?;
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let x = g.constant(feature.clone());
        let y = self.forward(&mut g, &p, x);
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_table_matches_vgg19_prefix() {
        let spec = EncoderSpec { scale: ChannelScale::FULL };
        let layers = spec.layers();
        assert_eq!(layers.len(), 13);
        assert_eq!(layers[0], ("enc.conv1_1".into(), 3, 64));
        assert_eq!(layers[12], ("enc.conv5_1".into(), 512, 512));
        assert_eq!(spec.tap_channels(), [64, 128, 256, 512, 512]);
    }

    #[test]
    fn tap_shapes_follow_stride_arithmetic() {
        let enc = Encoder::<f32>::random(ChannelScale(0.125), 1);
        let img = Tensor::full(&[1, 3, 48, 32], 0.5);
        let pyr = enc.encode(&img).unwrap();
        let chans = enc.spec.tap_channels();
        for (k, t) in pyr.taps.iter().enumerate() {
            assert_eq!(t.shape(), &[1, chans[k], 48 >> k, 32 >> k]);
        }
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let enc = Encoder::<f32>::random(ChannelScale(0.125), 1);
        assert!(matches!(enc.encode(&Tensor::zeros(&[1, 3, 20, 16])), Err(Error::Shape(_))));
        let mut img = Tensor::<f32>::zeros(&[1, 3, 16, 16]);
        img.data_mut()[5] = f32::NAN;
        assert!(matches!(enc.encode(&img), Err(Error::NonFinite(_))));
    }

    #[test]
    fn decode_shape_and_channel_check() {
        let dec = Decoder::<f32>::new(ChannelScale(0.125), 2);
        let out = dec.decode(&Tensor::full(&[1, 64, 4, 5], 0.1)).unwrap();
        assert_eq!(out.shape(), &[1, 3, 32, 40]);
        assert!(out.is_finite());
        assert!(dec.decode(&Tensor::zeros(&[1, 63, 4, 4])).is_err());
    }

    #[test]
    fn zero_feature_decodes_to_constant_image() {
        let mut dec = Decoder::<f64>::new(ChannelScale(0.125), 2);
        let b = dec.output_conv().bias;
        *dec.params.get_mut(b) = Tensor::zeros(&[3]);
        let out = dec.decode(&Tensor::zeros(&[1, 64, 4, 4])).unwrap();
        let plane = 32 * 32;
        for c in 0..3 {
            let p = &out.data()[c * plane..(c + 1) * plane];
            assert!(p.iter().all(|&v| v == p[0]));
        }
    }
}
