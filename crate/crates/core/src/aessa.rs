//! Aesthetic-aware style attention.
//!
//! Each level runs two attention steps:
//!
//! 1. *aesthetic enhancement*: a `C×C` channel attention between the
//!    aesthetic feature and the style feature re-weights style channels,
//!    `F_sa = f_out1(A_a · f_s2(F_s)) + F_s` with
//!    `A_a = softmax(f_a(F_a) · f_s1(F_s)ᵀ)`;
//! 2. *style integration*: a `HcWc×HsWs` spatial attention from normalized
//!    content positions to normalized enhanced-style positions,
//!    `F_cs = f_out2(f_sa2(F_sa) · A_sᵀ) + F_c` with
//!    `A_s = softmax(f_c(norm F_c)ᵀ · f_sa1(norm F_sa))`.
//!
//! Softmax always runs over the second (key) index, so every attention row is
//! a probability distribution. The relu4_1 and relu5_1 outputs are fused by
//! a 3×3 convolution at the relu4_1 grid.

use alloc::format;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Bound, Graph, MatT, Var};
use crate::kernels::{self, ConvGeom, PadMode};
use crate::nn::{ChannelScale, Conv, Init};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Variance floor of the mean–variance channel normalization.
pub const NORM_EPS: f64 = 1e-5;

const POINTWISE: ConvGeom = ConvGeom::new(1, 0, PadMode::Zero);
const FUSE_GEOM: ConvGeom = ConvGeom::new(1, 1, PadMode::Reflect);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    R41,
    R51,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::R41 => "r41",
            Level::R51 => "r51",
        }
    }
}

/// The eight 1×1 convolutions of one attention level.
#[derive(Debug, Clone)]
pub struct LevelParams {
    pub f_a: Conv,
    pub f_s1: Conv,
    pub f_s2: Conv,
    pub f_out1: Conv,
    pub f_c: Conv,
    pub f_sa1: Conv,
    pub f_sa2: Conv,
    pub f_out2: Conv,
}

impl LevelParams {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, level: Level, c: usize, c_aes: usize) -> Self {
        let mut conv = |name: &str, cin: usize| {
            Conv::new(store, rng, &format!("aessa.{}.{name}", level.name()), cin, c, 1, POINTWISE, Init::FanIn)
        };
        LevelParams {
            f_a: conv("f_a", c_aes),
            f_s1: conv("f_s1", c),
            f_s2: conv("f_s2", c),
            f_out1: conv("f_out1", c),
            f_c: conv("f_c", c),
            f_sa1: conv("f_sa1", c),
            f_sa2: conv("f_sa2", c),
            f_out2: conv("f_out2", c),
        }
    }

    pub fn convs(&self) -> [&Conv; 8] {
        [
            &self.f_a,
            &self.f_s1,
            &self.f_s2,
            &self.f_out1,
            &self.f_c,
            &self.f_sa1,
            &self.f_sa2,
            &self.f_out2,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.param_count()).sum()
    }
}

/// `B×C×H×W → B×C×HW` on the graph.
fn flatten<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let (b, c, h, w) = g.value(x).dims4();
    g.reshape(x, &[b, c, h * w])
}

/// Graph-level step I. Returns `(F_sa, A_a)`.
pub fn aesthetic_enhance<T: Real>(g: &mut Graph<T>, p: &Bound, lp: &LevelParams, fs: Var, fa: Var) -> (Var, Var) {
    let (b, c, h, w) = g.value(fs).dims4();
    let a = lp.f_a.forward(g, p, fa);
    let a = flatten(g, a);
    let s1 = lp.f_s1.forward(g, p, fs);
    let s1 = flatten(g, s1);
    let s2 = lp.f_s2.forward(g, p, fs);
    let s2 = flatten(g, s2);
    let logits = g.bmm(a, MatT::N, s1, MatT::T);
    let attn = g.softmax_rows(logits);
    let mixed = g.bmm(attn, MatT::N, s2, MatT::N);
    let mixed = g.reshape(mixed, &[b, c, h, w]);
    let out = lp.f_out1.forward(g, p, mixed);
    (g.add(out, fs), attn)
}

/// Graph-level step II. Returns `(F_cs, A_s)`.
pub fn style_integrate<T: Real>(g: &mut Graph<T>, p: &Bound, lp: &LevelParams, fc: Var, fsa: Var) -> (Var, Var) {
    let (b, c, h, w) = g.value(fc).dims4();
    let eps = T::from_f64(NORM_EPS);
    let nc = g.channel_norm(fc, eps);
    let q = lp.f_c.forward(g, p, nc);
    let q = flatten(g, q);
    let nsa = g.channel_norm(fsa, eps);
    let k = lp.f_sa1.forward(g, p, nsa);
    let k = flatten(g, k);
    let v = lp.f_sa2.forward(g, p, fsa);
    let v = flatten(g, v);
    let logits = g.bmm(q, MatT::T, k, MatT::N);
    let attn = g.softmax_rows(logits);
    let mixed = g.bmm(v, MatT::N, attn, MatT::T);
    let mixed = g.reshape(mixed, &[b, c, h, w]);
    let out = lp.f_out2.forward(g, p, mixed);
    (g.add(out, fc), attn)
}

/// Both steps at one level; `fa` must already be on `fs`'s grid.
pub fn level_forward<T: Real>(g: &mut Graph<T>, p: &Bound, lp: &LevelParams, fc: Var, fs: Var, fa: Var) -> Var {
    let (fsa, _) = aesthetic_enhance(g, p, lp, fs, fa);
    style_integrate(g, p, lp, fc, fsa).0
}

/// Attention parameters for both levels plus the fusion convolution.
#[derive(Debug, Clone)]
pub struct AesSaNet<T> {
    pub r41: LevelParams,
    pub r51: LevelParams,
    pub fuse: Conv,
    pub channels: usize,
    pub aesthetic_channels: usize,
    pub params: ParamStore<T>,
}

impl<T: Real> AesSaNet<T> {
    pub fn new(scale: ChannelScale, seed: u64) -> Self {
        let c = scale.ch(512);
        Self::with_channels(c, c, seed)
    }

    /// `channels` is the relu4_1/relu5_1 width; `aesthetic_channels` the
    /// width of the discriminator features absorbed by `f_a`.
    pub fn with_channels(channels: usize, aesthetic_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let r41 = LevelParams::new(&mut params, &mut rng, Level::R41, channels, aesthetic_channels);
        let r51 = LevelParams::new(&mut params, &mut rng, Level::R51, channels, aesthetic_channels);
        let fuse = Conv::new(&mut params, &mut rng, "aessa.fuse", channels, channels, 3, FUSE_GEOM, Init::FanIn);
        AesSaNet {
            r41,
            r51,
            fuse,
            channels,
            aesthetic_channels,
            params,
        }
    }

    pub fn level(&self, level: Level) -> &LevelParams {
        match level {
            Level::R41 => &self.r41,
            Level::R51 => &self.r51,
        }
    }

    /// Sets weight and bias of `f_out1` (`which = 1`) or `f_out2` (`which = 2`)
    /// of a level to zero.
    pub fn zero_output_conv(&mut self, level: Level, which: u8) {
        let lp = self.level(level);
        let conv = if which == 1 { lp.f_out1.clone() } else { lp.f_out2.clone() };
        for id in [conv.weight, conv.bias] {
            self.params.get_mut(id).data_mut().fill(T::zero());
        }
    }

    pub fn fuse_forward(&self, g: &mut Graph<T>, p: &Bound, r41: Var, r51: Var) -> Var {
        let (_, _, h, w) = g.value(r41).dims4();
        let up = g.resize_nearest(r51, h, w);
        let sum = g.add(r41, up);
        self.fuse.forward(g, p, sum)
    }

    fn check_pair(&self, a: &Tensor<T>, b: &Tensor<T>, what: &str, same_grid: bool, b_channels: usize) -> Result<()> {
        let (ba, ca, ha, wa) = a.expect_rank4(what)?;
        let (bb, cb, hb, wb) = b.expect_rank4(what)?;
        if ca != self.channels || cb != b_channels || ba != bb {
            return Err(shape_err!("{what}: incompatible shapes {:?} and {:?}", a.shape(), b.shape()));
        }
        if same_grid && (ha, wa) != (hb, wb) {
            return Err(shape_err!("{what}: spatial grids differ, {:?} vs {:?}", a.shape(), b.shape()));
        }
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite(what.into()));
        }
        Ok(())
    }

    /// Step I on tensors: `F_s` and `F_a` must share shape.
    pub fn aesthetic_enhance(&self, level: Level, fs: &Tensor<T>, fa: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_pair(fs, fa, "aesthetic_enhance", true, self.aesthetic_channels)?;
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let (fs, fa) = (g.constant(fs.clone()), g.constant(fa.clone()));
        let (out, _) = aesthetic_enhance(&mut g, &p, self.level(level), fs, fa);
        Ok(g.value(out).clone())
    }

    /// Step II on tensors.
    pub fn style_integrate(&self, level: Level, fc: &Tensor<T>, fsa: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_pair(fc, fsa, "style_integrate", false, self.channels)?;
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let (fc, fsa) = (g.constant(fc.clone()), g.constant(fsa.clone()));
        let (out, _) = style_integrate(&mut g, &p, self.level(level), fc, fsa);
        Ok(g.value(out).clone())
    }

    /// Full level on tensors; `fa` is resized (nearest) onto `fs`'s grid.
    pub fn forward(&self, level: Level, fc: &Tensor<T>, fs: &Tensor<T>, fa: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, _, _) = self.forward_with_attention(level, fc, fs, fa)?;
        Ok(out)
    }

    /// Full level on tensors, also returning `(A_a, A_s)`.
    pub fn forward_with_attention(
        &self,
        level: Level,
        fc: &Tensor<T>,
        fs: &Tensor<T>,
        fa: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        self.check_pair(fc, fs, "aessa", false, self.channels)?;
        self.check_pair(fs, fa, "aessa", false, self.aesthetic_channels)?;
        let (_, _, hs, ws) = fs.dims4();
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let (fc, fs, fa) = (g.constant(fc.clone()), g.constant(fs.clone()), g.constant(fa.clone()));
        let fa = g.resize_nearest(fa, hs, ws);
        let lp = self.level(level);
        let (fsa, a_a) = aesthetic_enhance(&mut g, &p, lp, fs, fa);
        let (out, a_s) = style_integrate(&mut g, &p, lp, fc, fsa);
        Ok((g.value(out).clone(), g.value(a_a).clone(), g.value(a_s).clone()))
    }

    /// `conv3×3(F_r41 + up2(F_r51))`; `r51` must be exactly half of `r41`'s grid.
    pub fn multi_level_fuse(&self, r41: &Tensor<T>, r51: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_pair(r41, r51, "multi_level_fuse", false, self.channels)?;
        let (_, _, h4, w4) = r41.dims4();
        let (_, _, h5, w5) = r51.dims4();
        if (2 * h5, 2 * w5) != (h4, w4) {
            return Err(shape_err!("multi_level_fuse: relu5_1 grid {h5}×{w5} is not half of {h4}×{w4}"));
        }
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let (a, b) = (g.constant(r41.clone()), g.constant(r51.clone()));
        let out = self.fuse_forward(&mut g, &p, a, b);
        Ok(g.value(out).clone())
    }
}

/// Per-channel mean–variance normalization of a `B×C×H×W` tensor.
pub fn channel_norm<T: Real>(f: &Tensor<T>) -> Tensor<T> {
    kernels::channel_norm(f, T::from_f64(NORM_EPS)).0
}

/// Flattens the spatial axes row-major: `C×H×W → C×HW` or `B×C×H×W → B×C×HW`.
pub fn vectorize<T: Real>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let s = f.shape();
    let shape = match s.len() {
        3 => alloc::vec![s[0], s[1] * s[2]],
        4 => alloc::vec![s[0], s[1], s[2] * s[3]],
        _ => return Err(shape_err!("vectorize: expected rank 3 or 4, got {s:?}")),
    };
    f.clone().reshape(&shape)
}

/// Inverse of [`vectorize`].
pub fn devectorize<T: Real>(m: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = m.shape();
    let hw = *s.last().unwrap_or(&0);
    if hw != h * w || !(2..=3).contains(&s.len()) {
        return Err(shape_err!("devectorize: {s:?} cannot become {h}×{w} maps"));
    }
    let mut shape = s[..s.len() - 1].to_vec();
    shape.extend([h, w]);
    m.clone().reshape(&shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use alloc::vec;

    fn rand_tensor(shape: &[usize], seed: u64, mag: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::params::uniform(&mut rng, shape, mag)
    }

    #[test]
    fn vectorize_round_trip_and_errors() {
        let f = Tensor::<f32>::from_fn(&[2, 2, 2], |i| i as f32 * 1.5 - 2.0);
        let v = vectorize(&f).unwrap();
        assert_eq!(v.shape(), &[2, 4]);
        assert_eq!(devectorize(&v, 2, 2).unwrap(), f);
        assert!(devectorize(&v, 3, 1).is_err());
        let big = Tensor::<f32>::zeros(&[512, 32, 32]);
        assert_eq!(vectorize(&big).unwrap().shape(), &[512, 1024]);
    }

    #[test]
    fn channel_norm_properties() {
        let constant = Tensor::<f64>::full(&[1, 1, 3, 3], 4.0);
        assert!(channel_norm(&constant).data().iter().all(|&v| v == 0.0));
        let f = rand_tensor(&[2, 3, 4, 5], 9, 3.0);
        let once = channel_norm(&f);
        assert!(channel_norm(&once).max_abs_diff(&once) < 1e-5);
        for plane in once.data().chunks(20) {
            let mean = plane.iter().sum::<f64>() / 20.0;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 20.0;
            assert!(mean.abs() < 1e-12 && (var.sqrt() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn enhance_matches_loop_oracle() {
        let net = AesSaNet::<f64>::with_channels(3, 3, 4);
        let fs = rand_tensor(&[1, 3, 2, 2], 1, 1.0);
        let fa = rand_tensor(&[1, 3, 2, 2], 2, 1.0);
        let fast = net.aesthetic_enhance(Level::R41, &fs, &fa).unwrap();
        let slow = oracle::aesthetic_enhance_loops(&oracle::LevelWeights::from_net(&net, Level::R41), &fs, &fa);
        assert!(fast.max_abs_diff(&slow) < 1e-6);
    }

    #[test]
    fn integrate_matches_loop_oracle() {
        let net = AesSaNet::<f64>::with_channels(2, 2, 5);
        let fc = rand_tensor(&[1, 2, 2, 2], 1, 1.0);
        let fsa = rand_tensor(&[1, 2, 2, 2], 2, 1.0);
        let fast = net.style_integrate(Level::R51, &fc, &fsa).unwrap();
        let slow = oracle::style_integrate_loops(&oracle::LevelWeights::from_net(&net, Level::R51), &fc, &fsa);
        assert!(fast.max_abs_diff(&slow) < 1e-6);
    }

    #[test]
    fn zeroed_output_convs_pass_through() {
        let mut net = AesSaNet::<f32>::with_channels(4, 4, 6);
        net.zero_output_conv(Level::R41, 1);
        let fs = rand_tensor(&[1, 4, 3, 2], 1, 2.0).cast::<f32>();
        let fa = rand_tensor(&[1, 4, 3, 2], 2, 2.0).cast::<f32>();
        assert_eq!(net.aesthetic_enhance(Level::R41, &fs, &fa).unwrap(), fs);
        net.zero_output_conv(Level::R41, 2);
        let fc = rand_tensor(&[1, 4, 2, 3], 3, 2.0).cast::<f32>();
        assert_eq!(net.style_integrate(Level::R41, &fc, &fs).unwrap(), fc);
        assert_eq!(net.forward(Level::R41, &fc, &fs, &fa).unwrap(), fc);
    }

    #[test]
    fn attention_shapes() {
        let net = AesSaNet::<f32>::with_channels(8, 8, 1);
        let fc = Tensor::full(&[1, 8, 8, 8], 0.3);
        let fs = rand_tensor(&[1, 8, 6, 6], 2, 1.0).cast::<f32>();
        let (out, a_a, a_s) = net.forward_with_attention(Level::R41, &fc, &fs, &fs).unwrap();
        assert_eq!(out.shape(), &[1, 8, 8, 8]);
        assert_eq!(a_a.shape(), &[1, 8, 8]);
        assert_eq!(a_s.shape(), &[1, 64, 36]);
    }

    #[test]
    fn fuse_shapes_and_zero_branch() {
        let net = AesSaNet::<f64>::with_channels(4, 4, 2);
        let r41 = rand_tensor(&[1, 4, 4, 4], 1, 1.0);
        let zero = Tensor::zeros(&[1, 4, 2, 2]);
        let fused = net.multi_level_fuse(&r41, &zero).unwrap();
        assert_eq!(fused.shape(), &[1, 4, 4, 4]);
        let mut g = Graph::new();
        let p = g.bind(&net.params, false);
        let x = g.constant(r41.clone());
        let direct = net.fuse.forward(&mut g, &p, x);
        assert_eq!(g.value(direct), &fused);
        assert!(net.multi_level_fuse(&r41, &Tensor::zeros(&[1, 4, 3, 3])).is_err());
    }

    #[test]
    fn nearest_upsample_of_single_value() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 1], vec![7.5]).unwrap();
        assert_eq!(kernels::resize_nearest(&x, 2, 2).data(), &[7.5; 4]);
    }

    #[test]
    fn level_param_count() {
        let net = AesSaNet::<f32>::with_channels(6, 6, 1);
        let c = 6;
        assert_eq!(net.r41.param_count(), 8 * (c * c + c));
        assert_eq!(net.fuse.param_count(), 9 * c * c + c);
        assert_eq!(net.params.numel(), 2 * 8 * (c * c + c) + 9 * c * c + c);
    }
}
