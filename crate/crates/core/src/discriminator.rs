//! Three-scale patch discriminator that doubles as the aesthetic feature
//! extractor.
//!
//! Each scale owns an encoder `E_k` (four stride-2 4×4 convolutions, instance
//! norm on all but the first, LeakyReLU 0.2) and a 3×3 patch classifier
//! `C_k`. The image pyramid is built by repeated 3×3/stride-2 average
//! pooling. Aesthetic features are `E_1(x) + up(E_2(x↓2)) + up(E_3(x↓4))`
//! with nearest upsampling onto the `E_1` grid.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Bound, Graph, Var};
use crate::kernels::{self, ConvGeom, PadMode};
use crate::nn::{ChannelScale, Conv, Init};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const IN_EPS: f64 = 1e-5;
pub const SCALES: usize = 3;
/// Smallest side accepted: the coarsest scale must still reach a 1×1 encoding.
pub const MIN_SIDE: usize = 64;

const DOWN: ConvGeom = ConvGeom::new(2, 1, PadMode::Zero);
const CLASSIFY: ConvGeom = ConvGeom::new(1, 1, PadMode::Zero);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorSpec {
    pub scale: ChannelScale,
}

impl DiscriminatorSpec {
    pub fn widths(&self) -> [usize; 4] {
        [64, 128, 256, 512].map(|w| self.scale.ch(w))
    }

    pub fn feature_channels(&self) -> usize {
        self.widths()[3]
    }
}

#[derive(Debug, Clone)]
pub struct ScaleEncoder {
    pub convs: [Conv; 4],
}

/// Graph outputs of one discriminator pass.
#[derive(Debug, Clone, Copy)]
pub struct DiscOut {
    pub logits: [Var; SCALES],
    pub features: Var,
}

#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    pub spec: DiscriminatorSpec,
    pub encoders: [ScaleEncoder; SCALES],
    pub classifiers: [Conv; SCALES],
    pub params: ParamStore<T>,
}

pub fn check_disc_image<T: Real>(image: &Tensor<T>) -> Result<()> {
    let (_, c, h, w) = image.expect_rank4("discriminator input")?;
    if c != 3 {
        return Err(shape_err!("discriminator input: expected 3 channels, got {c}"));
    }
    if h % 16 != 0 || w % 16 != 0 || h < MIN_SIDE || w < MIN_SIDE {
        return Err(shape_err!(
            "discriminator input: {h}×{w} must be a multiple of 16 and at least {MIN_SIDE}"
        ));
    }
    if !image.is_finite() {
        return Err(Error::NonFinite("discriminator input".into()));
    }
    Ok(())
}

impl<T: Real> Discriminator<T> {
    pub fn new(scale: ChannelScale, seed: u64) -> Self {
        let spec = DiscriminatorSpec { scale };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let widths = spec.widths();
        let mut encoders = Vec::with_capacity(SCALES);
        let mut classifiers = Vec::with_capacity(SCALES);
        for k in 1..=SCALES {
            let mut cin = 3;
            let convs: Vec<Conv> = widths
                .iter()
                .enumerate()
                .map(|(i, &cout)| {
                    let conv = Conv::new(&mut params, &mut rng, &format!("disc.E{k}.conv{i}"), cin, cout, 4, DOWN, Init::Normal(0.02));
                    cin = cout;
                    conv
                })
                .collect();
            encoders.push(ScaleEncoder {
                convs: convs.try_into().expect("four convs"),
            });
            classifiers.push(Conv::new(&mut params, &mut rng, &format!("disc.C{k}"), cin, 1, 3, CLASSIFY, Init::Normal(0.02)));
        }
        Discriminator {
            spec,
            encoders: encoders.try_into().expect("three scales"),
            classifiers: classifiers.try_into().expect("three scales"),
            params,
        }
    }

    pub fn pyramid(g: &mut Graph<T>, x: Var) -> [Var; SCALES] {
        let half = g.avg_pool3(x);
        let quarter = g.avg_pool3(half);
        [x, half, quarter]
    }

    /// `E_k` for `k ∈ 0..3` (zero-based).
    pub fn encode_scale(&self, g: &mut Graph<T>, p: &Bound, k: usize, x: Var) -> Var {
        let slope = T::from_f64(LEAKY_SLOPE);
        let eps = T::from_f64(IN_EPS);
        let mut h = x;
        for (i, conv) in self.encoders[k].convs.iter().enumerate() {
            h = conv.forward(g, p, h);
            if i > 0 {
                h = g.channel_norm(h, eps);
            }
            h = g.leaky_relu(h, slope);
        }
        h
    }

    /// Logits at every scale plus the summed aesthetic features, sharing the
    /// per-scale encodings.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> DiscOut {
        let levels = Self::pyramid(g, x);
        let enc: Vec<Var> = (0..SCALES).map(|k| self.encode_scale(g, p, k, levels[k])).collect();
        let logits = [0, 1, 2].map(|k| self.classifiers[k].forward(g, p, enc[k]));
        let features = self.sum_encodings(g, &enc);
        DiscOut { logits, features }
    }

    /// Aesthetic features only (skips the classifiers).
    pub fn features(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let levels = Self::pyramid(g, x);
        let enc: Vec<Var> = (0..SCALES).map(|k| self.encode_scale(g, p, k, levels[k])).collect();
        self.sum_encodings(g, &enc)
    }

    fn sum_encodings(&self, g: &mut Graph<T>, enc: &[Var]) -> Var {
        let (_, _, h, w) = g.value(enc[0]).dims4();
        let mut acc = enc[0];
        for &e in &enc[1..] {
            let up = g.resize_nearest(e, h, w);
            acc = g.add(acc, up);
        }
        acc
    }

    pub fn build_pyramid(&self, image: &Tensor<T>) -> Result<[Tensor<T>; SCALES]> {
        check_disc_image(image)?;
        let half = kernels::avg_pool3(image);
        let quarter = kernels::avg_pool3(&half);
        Ok([image.clone(), half, quarter])
    }

    pub fn discriminate(&self, image: &Tensor<T>) -> Result<[Tensor<T>; SCALES]> {
        check_disc_image(image)?;
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, &p, x);
        Ok(out.logits.map(|v| g.value(v).clone()))
    }

    pub fn aesthetic_features(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        check_disc_image(image)?;
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let x = g.constant(image.clone());
        let f = self.features(&mut g, &p, x);
        Ok(g.value(f).clone())
    }

    /// `E_k` applied to an already-downsampled image.
    pub fn encode_scale_tensor(&self, k: usize, image: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let x = g.constant(image.clone());
        let e = self.encode_scale(&mut g, &p, k, x);
        g.value(e).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_and_feature_shapes() {
        let d = Discriminator::<f32>::new(ChannelScale(0.125), 1);
        let img = Tensor::full(&[1, 3, 128, 64], 0.5);
        let logits = d.discriminate(&img).unwrap();
        assert_eq!(logits[0].shape(), &[1, 1, 8, 4]);
        assert_eq!(logits[1].shape(), &[1, 1, 4, 2]);
        assert_eq!(logits[2].shape(), &[1, 1, 2, 1]);
        assert_eq!(d.aesthetic_features(&img).unwrap().shape(), &[1, 64, 8, 4]);
    }

    #[test]
    fn pyramid_shapes_and_composition() {
        let d = Discriminator::<f64>::new(ChannelScale(0.125), 1);
        let img = Tensor::from_fn(&[1, 3, 128, 128], |i| ((i * 37) % 101) as f64 / 101.0);
        let pyr = d.build_pyramid(&img).unwrap();
        assert_eq!(pyr[1].shape(), &[1, 3, 64, 64]);
        assert_eq!(pyr[2].shape(), &[1, 3, 32, 32]);
        let again = d.build_pyramid(&pyr[1]).unwrap();
        assert_eq!(again[1], pyr[2]);
    }

    #[test]
    fn rejects_small_or_misaligned() {
        let d = Discriminator::<f32>::new(ChannelScale(0.125), 1);
        assert!(d.discriminate(&Tensor::zeros(&[1, 3, 48, 64])).is_err());
        assert!(d.discriminate(&Tensor::zeros(&[1, 3, 72, 64])).is_err());
    }

    #[test]
    fn leaky_slope_on_negative_inputs() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[3], alloc::vec![-2.0, -0.5, 3.0]).unwrap());
        let y = g.leaky_relu(x, LEAKY_SLOPE);
        assert_eq!(g.value(y).data(), &[-0.4, -0.1, 3.0]);
    }
}
