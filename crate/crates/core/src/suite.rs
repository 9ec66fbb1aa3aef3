//! Self-verification suite: attention properties, loop oracles, gradient
//! checks, loss fixed points, stage gating, controls algebra and
//! persistence. Each check returns a [`Check`] instead of panicking so a
//! binary can print a table.

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

// f64 math under no_std; redundant when std is linked.
#[allow(unused_imports)]
use num_traits::Float as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::aessa::{self, AesSaNet, Level};
use crate::archive::{load_archive, save_archive, ArchiveEntry, TensorData};
use crate::backbone::{Decoder, FeaturePyramid, Pyramid};
use crate::controls::{self, Controls, Mask, RegionMaskSet, StyleBlend};
use crate::discriminator::{Discriminator, IN_EPS, LEAKY_SLOPE, SCALES};
use crate::error::Result;
use crate::gradcheck::{self, GradReport};
use crate::graph::{Bound, Graph, Var};
use crate::losses::{self, LossWeights, Stage, Term, TermValues};
use crate::model::AesUst;
use crate::nn::ChannelScale;
use crate::oracle::{self, LevelWeights};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{Ablation, Batch, TrainConfig, Trainer};

pub const GRAD_TOL: f64 = 1e-3;
pub const ROW_TOL: f64 = 1e-5;
pub const ORACLE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn from(name: &'static str, r: core::result::Result<String, String>) -> Self {
        match r {
            Ok(detail) => Check { name, passed: true, detail },
            Err(detail) => Check { name, passed: false, detail },
        }
    }
}

type Outcome = core::result::Result<String, String>;

fn ok_or<T>(r: Result<T>, what: &str) -> core::result::Result<T, String> {
    r.map_err(|e| format!("{what}: {e}"))
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn rand_unit(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
}

// Attention ------------------------------------------------------------------

/// Produces `(F_cs, A_a, A_s)` for one level.
pub type AttentionFn =
    fn(&AesSaNet<f64>, Level, &Tensor<f64>, &Tensor<f64>, &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>)>;

fn net_attention(
    net: &AesSaNet<f64>,
    level: Level,
    fc: &Tensor<f64>,
    fs: &Tensor<f64>,
    fa: &Tensor<f64>,
) -> Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
    net.forward_with_attention(level, fc, fs, fa)
}

/// Every row along the last axis is nonnegative and sums to one.
pub fn rows_stochastic(a: &Tensor<f64>, tol: f64) -> core::result::Result<(), String> {
    let cols = *a.shape().last().ok_or("attention has rank 0")?;
    for (r, row) in a.data().chunks(cols).enumerate() {
        if let Some(v) = row.iter().find(|v| v.is_nan() || **v < 0.0) {
            return Err(format!("row {r} has entry {v}"));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > tol {
            return Err(format!("row {r} sums to {s}"));
        }
    }
    Ok(())
}

/// Random triples over varied shapes, checked with the supplied attention.
pub fn attention_stochasticity_with(attention: AttentionFn, cases: usize, seed: u64) -> Check {
    let run = || -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = 0usize;
        for case in 0..cases {
            let c = rng.gen_range(1..=8);
            let ca = rng.gen_range(1..=8);
            let b = rng.gen_range(1..=2);
            let dims = |rng: &mut ChaCha8Rng| (rng.gen_range(1..=6), rng.gen_range(1..=6));
            let ((hc, wc), (hs, ws), (ha, wa)) = (dims(&mut rng), dims(&mut rng), dims(&mut rng));
            let scale = [0.1, 1.0, 5.0][case % 3];
            let net = AesSaNet::<f64>::with_channels(c, ca, seed ^ case as u64);
            let fc = randn(&mut rng, &[b, c, hc, wc]).map(|v| v * scale);
            let fs = randn(&mut rng, &[b, c, hs, ws]).map(|v| v * scale);
            let fa = randn(&mut rng, &[b, ca, ha, wa]).map(|v| v * scale);
            let level = if case % 2 == 0 { Level::R41 } else { Level::R51 };
            let (_, a_a, a_s) = ok_or(attention(&net, level, &fc, &fs, &fa), "attention")?;
            rows_stochastic(&a_a, ROW_TOL).map_err(|e| format!("case {case}, A_a: {e}"))?;
            rows_stochastic(&a_s, ROW_TOL).map_err(|e| format!("case {case}, A_s: {e}"))?;
            rows += b * (c + hc * wc);
        }
        Ok(format!("{cases} cases, {rows} rows"))
    };
    Check::from("attention rows are distributions", run())
}

pub fn attention_stochasticity() -> Check {
    attention_stochasticity_with(net_attention, 100, 11)
}

/// Graph forward against explicit loops for every `C ≤ 4`, `H, W ≤ 3`.
pub fn oracle_equivalence() -> Check {
    let run = || -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut worst = 0.0f64;
        let mut cases = 0;
        for c in 1..=4 {
            for h in 1..=3 {
                for w in 1..=3 {
                    let ca = rng.gen_range(1..=4);
                    let net = AesSaNet::<f64>::with_channels(c, ca, (c * 100 + h * 10 + w) as u64);
                    let (hs, ws) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
                    let fc = randn(&mut rng, &[1, c, h, w]);
                    let fs = randn(&mut rng, &[1, c, hs, ws]);
                    let fa = randn(&mut rng, &[1, ca, hs, ws]);
                    for level in [Level::R41, Level::R51] {
                        let got = ok_or(net.forward(level, &fc, &fs, &fa), "forward")?;
                        let want = oracle::aessa_loops(&LevelWeights::from_net(&net, level), &fc, &fs, &fa);
                        worst = worst.max(got.max_abs_diff(&want));
                        cases += 1;
                    }
                }
            }
        }
        if worst > ORACLE_TOL {
            return Err(format!("max deviation {worst:.3e} over {cases} cases"));
        }
        Ok(format!("{cases} cases, max deviation {worst:.1e}"))
    };
    Check::from("attention matches loop oracle", run())
}

/// Zeroed output convolutions pass `F_s` (step I) or `F_c` (step II) through.
pub fn residual_identities() -> Check {
    let run = || -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let fc = randn(&mut rng, &[2, 6, 3, 4]);
        let fs = randn(&mut rng, &[2, 6, 5, 2]);
        let fa = randn(&mut rng, &[2, 3, 5, 2]);
        for level in [Level::R41, Level::R51] {
            let mut net = AesSaNet::<f64>::with_channels(6, 3, 14);
            net.zero_output_conv(level, 1);
            if ok_or(net.aesthetic_enhance(level, &fs, &fa), "step I")? != fs {
                return Err(format!("{}: zero f_out1 does not pass F_s through", level.name()));
            }
            let mut net = AesSaNet::<f64>::with_channels(6, 3, 15);
            net.zero_output_conv(level, 2);
            if ok_or(net.forward(level, &fc, &fs, &fa), "step II")? != fc {
                return Err(format!("{}: zero f_out2 does not pass F_c through", level.name()));
            }
        }
        Ok("exact passthrough at both levels".into())
    };
    Check::from("residual identities", run())
}

// Gradients ------------------------------------------------------------------

fn worst_report(reports: &[GradReport], names: &[String]) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for r in reports {
        if r.rel_err.is_nan() || r.rel_err > worst.0 {
            worst = (r.rel_err, format!("{} (|a| {:.2e}, |n| {:.2e}, max abs {:.2e})", names[r.input], r.analytic_norm, r.numeric_norm, r.max_abs_err));
        }
    }
    worst
}

fn judge(label: &str, reports: &[GradReport], names: &[String]) -> Outcome {
    let (err, name) = worst_report(reports, names);
    let checked: usize = reports.iter().map(|r| r.checked).sum();
    if err.is_nan() || err >= GRAD_TOL {
        return Err(format!("{label}: `{name}` relative error {err:.3e}"));
    }
    Ok(format!("{} tensors, {checked} elements, worst {err:.1e}", reports.len()))
}

fn store_inputs(store: &ParamStore<f64>) -> (Vec<Tensor<f64>>, Vec<String>) {
    store.iter().map(|(n, t)| (t.clone(), n.to_string())).unzip()
}

/// Parameters of the store plus extra named inputs; the closure receives the
/// parameter binding and the remaining input variables.
fn param_check<F>(store: &ParamStore<f64>, extra: Vec<(&str, Tensor<f64>)>, budget: usize, f: F) -> (Vec<GradReport>, Vec<String>)
where
    F: Fn(&mut Graph<f64>, &Bound, &[Var]) -> Var,
{
    let (mut inputs, mut names) = store_inputs(store);
    let n = inputs.len();
    for (name, t) in extra {
        inputs.push(t);
        names.push(name.to_string());
    }
    let reports = gradcheck::check(&inputs, budget, |g, v| {
        let bound = Bound { vars: v[..n].to_vec() };
        f(g, &bound, &v[n..])
    });
    (reports, names)
}

fn projected_sum(g: &mut Graph<f64>, x: Var, proj: &Tensor<f64>) -> Var {
    let p = g.constant(proj.clone());
    let m = g.mul(x, p);
    g.sum_all(m)
}

pub fn gradient_aessa() -> Check {
    let run = || -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = AesSaNet::<f64>::with_channels(6, 5, 22);
        let fc4 = randn(&mut rng, &[1, 6, 4, 4]);
        let fs4 = randn(&mut rng, &[1, 6, 3, 5]);
        let fc5 = randn(&mut rng, &[1, 6, 2, 2]);
        let fs5 = randn(&mut rng, &[1, 6, 2, 3]);
        let fa = randn(&mut rng, &[1, 5, 2, 4]);
        let proj = randn(&mut rng, &[1, 6, 4, 4]);
        let extra = vec![("F_c relu4_1", fc4), ("F_s relu4_1", fs4), ("F_c relu5_1", fc5), ("F_s relu5_1", fs5), ("F_a", fa)];
        let (reports, names) = param_check(&net.params, extra, 40, |g, p, v| {
            let (_, _, h4, w4) = g.value(v[1]).dims4();
            let (_, _, h5, w5) = g.value(v[3]).dims4();
            let fa4 = g.resize_nearest(v[4], h4, w4);
            let fa5 = g.resize_nearest(v[4], h5, w5);
            let o4 = aessa::level_forward(g, p, net.level(Level::R41), v[0], v[1], fa4);
            let o5 = aessa::level_forward(g, p, net.level(Level::R51), v[2], v[3], fa5);
            let fused = net.fuse_forward(g, p, o4, o5);
            projected_sum(g, fused, &proj)
        });
        judge("aessa", &reports, &names)
    };
    Check::from("gradients: attention module", run())
}

pub fn gradient_decoder() -> Check {
    let run = || -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let dec = Decoder::<f64>::new(ChannelScale(1.0 / 64.0), 24);
        let c = dec.spec.in_channels();
        let x = randn(&mut rng, &[1, c, 4, 4]);
        let (reports, names) = param_check(&dec.params, vec![("feature", x)], 40, |g, p, v| {
            let out = dec.forward(g, p, v[0]);
            g.sum_all(out)
        });
        judge("decoder", &reports, &names)
    };
    Check::from("gradients: decoder", run())
}

pub fn gradient_discriminator() -> Check {
    let run = || -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let disc = Discriminator::<f64>::new(ChannelScale(0.125), 26);
        let x = rand_unit(&mut rng, &[1, 3, 64, 64]);
        let proj = randn(&mut rng, &[1, disc.spec.feature_channels(), 4, 4]);
        let (reports, names) = param_check(&disc.params, vec![("image", x)], 12, |g, p, v| {
            let out = disc.forward(g, p, v[0]);
            let mut acc = projected_sum(g, out.features, &proj);
            for l in out.logits {
                let m = g.mean_all(l);
                acc = g.add(acc, m);
            }
            acc
        });
        judge("discriminator", &reports, &names)
    };
    Check::from("gradients: discriminator", run())
}

fn pyramid_inputs(rng: &mut ChaCha8Rng, count: usize) -> Vec<Tensor<f64>> {
    let grids = [(8, 8), (4, 4), (4, 2), (2, 2), (1, 1)];
    let chans = [3, 4, 5, 6, 6];
    (0..count)
        .map(|i| {
            let k = i % 5;
            randn(rng, &[2, chans[k], grids[k].0, grids[k].1])
        })
        .collect()
}

fn as_pyramid(v: &[Var]) -> Pyramid {
    Pyramid {
        taps: [v[0], v[1], v[2], v[3], v[4]],
    }
}

pub fn gradient_losses() -> Check {
    let run = || -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let mut details = Vec::new();
        type LossFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;
        let img = |rng: &mut ChaCha8Rng| rand_unit(rng, &[2, 3, 4, 4]);
        let logits = |rng: &mut ChaCha8Rng| [[2, 1, 4, 4], [2, 1, 2, 2], [2, 1, 1, 1]].map(|s| randn(rng, &s).map(|v| 3.0 * v));
        let cases: Vec<(&str, Vec<Tensor<f64>>, LossFn)> = vec![
            ("content", pyramid_inputs(&mut rng, 10), Box::new(|g, v| losses::content_loss(g, &as_pyramid(&v[..5]), &as_pyramid(&v[5..])))),
            ("style", pyramid_inputs(&mut rng, 10), Box::new(|g, v| losses::style_loss(g, &as_pyramid(&v[..5]), &as_pyramid(&v[5..])))),
            (
                "identity",
                (0..4).map(|_| img(&mut rng)).collect(),
                Box::new(|g, v| losses::identity_loss(g, v[0], v[1], v[2], v[3])),
            ),
            (
                "adversarial (critic)",
                logits(&mut rng).into_iter().chain(logits(&mut rng)).collect(),
                Box::new(|g, v| losses::adv_loss_discriminator(g, &[v[0], v[1], v[2]], &[v[3], v[4], v[5]])),
            ),
            (
                "adversarial (generator)",
                logits(&mut rng).into(),
                Box::new(|g, v| losses::adv_loss_generator(g, &[v[0], v[1], v[2]])),
            ),
            ("ar1", (0..2).map(|_| img(&mut rng)).collect(), Box::new(|g, v| losses::ar1_loss(g, v[0], v[1]))),
            (
                "ar2",
                (0..2).map(|_| randn(&mut rng, &[2, 5, 3, 3])).collect(),
                Box::new(|g, v| losses::ar2_loss(g, v[0], v[1])),
            ),
        ];
        for (name, inputs, f) in cases {
            let names: Vec<String> = (0..inputs.len()).map(|i| format!("{name} input {i}")).collect();
            let reports = gradcheck::check(&inputs, 64, |g, v| f(g, v));
            details.push(judge(name, &reports, &names)?);
        }
        Ok(format!("{} losses", details.len()))
    };
    Check::from("gradients: losses", run())
}

// Discriminator features --------------------------------------------------------

fn pool_loops(x: &Tensor<f64>) -> Tensor<f64> {
    let (b, c, h, w) = x.dims4();
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(b * c * ho * wo);
    for p in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let (mut acc, mut n) = (0.0, 0.0);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (y, xx) = (2 * oy as i64 + dy, 2 * ox as i64 + dx);
                        if (0..h as i64).contains(&y) && (0..w as i64).contains(&xx) {
                            acc += x.data()[(p * h + y as usize) * w + xx as usize];
                            n += 1.0;
                        }
                    }
                }
                out.push(acc / n);
            }
        }
    }
    Tensor::from_vec(&[b, c, ho, wo], out).expect("sized")
}

fn instance_norm_loops(x: &Tensor<f64>) -> Tensor<f64> {
    let (_, _, h, w) = x.dims4();
    let n = h * w;
    let mut out = x.clone();
    for plane in out.data_mut().chunks_mut(n) {
        let mean = plane.iter().sum::<f64>() / n as f64;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + IN_EPS).sqrt();
        plane.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    out
}

fn scale_encoder_loops(disc: &Discriminator<f64>, k: usize, x: &Tensor<f64>) -> Tensor<f64> {
    let mut h = x.clone();
    for (i, conv) in disc.encoders[k].convs.iter().enumerate() {
        h = oracle::conv2d_direct(&h, disc.params.get(conv.weight), Some(disc.params.get(conv.bias)), conv.geom);
        if i > 0 {
            h = instance_norm_loops(&h);
        }
        h = h.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
    }
    h
}

/// Independent per-scale composition of the summed aesthetic features.
pub fn aesthetic_features_loops(disc: &Discriminator<f64>, image: &Tensor<f64>) -> Tensor<f64> {
    let mut level = image.clone();
    let mut acc: Option<Tensor<f64>> = None;
    for k in 0..SCALES {
        if k > 0 {
            level = pool_loops(&level);
        }
        let e = scale_encoder_loops(disc, k, &level);
        acc = Some(match acc {
            None => e,
            Some(mut a) => {
                let factor = a.shape()[2] / e.shape()[2];
                a.add_assign(&oracle::upsample_replicate(&e, factor));
                a
            }
        });
    }
    acc.expect("three scales")
}

pub fn multiscale_features() -> Check {
    let run = || -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let disc = Discriminator::<f64>::new(ChannelScale(0.125), 32);
        let mut worst = 0.0f64;
        for (h, w) in [(64, 64), (128, 64)] {
            let x = rand_unit(&mut rng, &[1, 3, h, w]);
            let got = ok_or(disc.aesthetic_features(&x), "aesthetic features")?;
            worst = worst.max(got.max_abs_diff(&aesthetic_features_loops(&disc, &x)));
        }
        if worst > ORACLE_TOL {
            return Err(format!("max deviation {worst:.3e}"));
        }
        let full = Discriminator::<f32>::new(ChannelScale::FULL, 33);
        let x = Tensor::from_fn(&[1, 3, 64, 96], |i| ((i * 31) % 97) as f32 / 97.0);
        let shape = ok_or(full.aesthetic_features(&x), "full width")?.shape().to_vec();
        if shape != [1, 512, 4, 6] {
            return Err(format!("full-width features have shape {shape:?}"));
        }
        Ok(format!("max deviation {worst:.1e}; full width 64x96 -> {shape:?}"))
    };
    Check::from("multi-scale aesthetic features", run())
}

// Losses ------------------------------------------------------------------------

fn close(what: &str, got: f64, want: f64, tol: f64) -> core::result::Result<(), String> {
    if (got - want).abs() > tol {
        return Err(format!("{what}: got {got}, expected {want}"));
    }
    Ok(())
}

fn pyramid_from(taps: Vec<Tensor<f64>>) -> FeaturePyramid<f64> {
    FeaturePyramid {
        taps: taps.try_into().expect("five taps"),
    }
}

pub fn loss_sanity() -> Check {
    let run = || -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let p = pyramid_from(pyramid_inputs(&mut rng, 5));
        close("content at fixed point", ok_or(losses::content_loss_tensors(&p, &p), "content")?, 0.0, 0.0)?;
        close("style at fixed point", ok_or(losses::style_loss_tensors(&p, &p), "style")?, 0.0, 0.0)?;
        let im = rand_unit(&mut rng, &[2, 3, 4, 4]);
        close("identity at fixed point", ok_or(losses::identity_loss_tensors(&im, &im, &im, &im), "identity")?, 0.0, 0.0)?;
        close("ar1 at fixed point", ok_or(losses::ar1_loss_tensors(&im, &im), "ar1")?, 0.0, 0.0)?;
        close("ar2 at fixed point", ok_or(losses::ar2_loss_tensors(&im, &im), "ar2")?, 0.0, 0.0)?;

        // Norm removes a per-channel affine map: [0, 2] and [0, 4] agree.
        let mut a = pyramid_from(pyramid_inputs(&mut rng, 5));
        let mut b = a.clone();
        a.taps[3] = Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 2.0]).expect("sized");
        b.taps[3] = Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 4.0]).expect("sized");
        a.taps[4] = a.taps[3].clone();
        b.taps[4] = a.taps[3].clone();
        // Equal up to the normalization epsilon.
        close("content under channel rescaling", ok_or(losses::content_loss_tensors(&a, &b), "content")?, 0.0, 1e-4)?;

        // One layer, one channel: mean shifted by 1, std unchanged.
        let base = Tensor::from_vec(&[1, 1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]).expect("sized");
        let shifted = base.map(|v| v + 1.0);
        let mut a = pyramid_from(vec![base.clone(); 5]);
        let mut b = a.clone();
        a.taps[2] = shifted;
        b.taps[2] = base;
        close("style with unit mean shift", ok_or(losses::style_loss_tensors(&a, &b), "style")?, 1.0, 1e-9)?;

        let zeros = [[1, 1, 4, 4], [1, 1, 2, 2], [1, 1, 1, 1]].map(|s| Tensor::<f64>::zeros(&s));
        close("critic at zero logits", losses::adv_loss_discriminator_tensors(&zeros, &zeros), 2.0 * core::f64::consts::LN_2, 1e-12)?;
        close("generator at zero logits", losses::adv_loss_generator_tensors(&zeros), core::f64::consts::LN_2, 1e-12)?;
        let big = [[1, 1, 4, 4], [1, 1, 2, 2], [1, 1, 1, 1]].map(|s| Tensor::<f64>::full(&s, 40.0));
        let small = big.clone().map(|t| t.map(|v| -v));
        close("perfect critic", losses::adv_loss_discriminator_tensors(&big, &small), 0.0, 1e-6)?;

        let w = LossWeights::default();
        let ones = |stage| -> TermValues { Term::ALL.iter().filter(|t| losses::stage_allows(stage, **t)).map(|t| (*t, 1.0)).collect() };
        close("stage I total", ok_or(losses::stage1_generator_objective(&ones(Stage::Pretrain), &w), "stage I")?, 57.0, 1e-12)?;
        close("stage II total", ok_or(losses::stage2_generator_objective(&ones(Stage::Finetune), &w), "stage II")?, 507.5, 1e-12)?;
        let zero = LossWeights { lambda: [0.0; 9] };
        close("zero weights", ok_or(losses::stage1_generator_objective(&ones(Stage::Pretrain), &zero), "zero")?, 0.0, 0.0)?;
        Ok("fixed points, 2 ln 2, ln 2, 57, 507.5".into())
    };
    Check::from("loss sanity values", run())
}

// Training ----------------------------------------------------------------------

fn tiny_config(stage: Stage) -> TrainConfig {
    TrainConfig {
        stage,
        batch_size: 1,
        crop: 64,
        resize_smaller_edge: 64,
        channel_multiplier: 1.0 / 16.0,
        seed: 5,
        ..TrainConfig::desk()
    }
}

fn synthetic_batch(seed: u64, batch: usize) -> Batch<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = |smooth: bool| {
        let (fx, fy, ph): (f32, f32, f32) = (rng.gen_range(1.0..6.0), rng.gen_range(1.0..6.0), rng.gen_range(0.0..6.0));
        Tensor::from_fn(&[batch, 3, 64, 64], move |i| {
            let x = (i % 64) as f32 / 64.0;
            let y = ((i / 64) % 64) as f32 / 64.0;
            let c = ((i / 4096) % 3) as f32;
            let k = if smooth { 1.0 } else { 3.0 };
            0.5 + 0.45 * (k * fx * x + c + ph).sin() * (k * fy * y - c).cos()
        })
    };
    Batch {
        content: img(true),
        style: img(false),
    }
}

fn stage_terms(report: &losses::LossReport) -> BTreeSet<Term> {
    report.terms.keys().copied().collect()
}

/// Stage I reports exactly adv/content/style/identity; stage II exactly
/// adv/content/style/ar1/ar2.
pub fn stage_gating() -> Check {
    let run = || -> Outcome {
        let batch = synthetic_batch(51, 1);
        let mut t1 = ok_or(Trainer::<f32>::new(tiny_config(Stage::Pretrain)), "stage I trainer")?;
        let r1 = ok_or(t1.train_step(&batch), "stage I step")?;
        let want1: BTreeSet<Term> = [Term::Adv, Term::Content, Term::Style, Term::Identity].into();
        if stage_terms(&r1) != want1 {
            return Err(format!("stage I evaluated {:?}", r1.evaluated()));
        }
        let mut t2 = Trainer::from_model(tiny_config(Stage::Finetune), t1.model.clone(), 0);
        let r2 = ok_or(t2.train_step(&batch), "stage II step")?;
        let want2: BTreeSet<Term> = [Term::Adv, Term::Content, Term::Style, Term::Ar1, Term::Ar2].into();
        if stage_terms(&r2) != want2 {
            return Err(format!("stage II evaluated {:?}", r2.evaluated()));
        }
        for r in [&r1, &r2] {
            let recomputed = ok_or(losses::stage_objective(r.stage, &r.terms, &LossWeights::default()), "objective")?;
            close("reported total", r.total, recomputed, 1e-9 * recomputed.abs().max(1.0))?;
        }
        Ok("stage I {adv, content, style, identity}; stage II {adv, content, style, ar1, ar2}".into())
    };
    Check::from("stage gating", run())
}

fn store_bits(store: &ParamStore<f32>) -> Vec<u32> {
    store.tensors().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

/// Frozen encoder, untouched critic when the adversarial term is off, and
/// finite losses over a few steps of each stage.
pub fn trainer_invariants() -> Check {
    let run = || -> Outcome {
        let mut t = ok_or(Trainer::<f32>::new(tiny_config(Stage::Pretrain)), "trainer")?;
        let enc0 = store_bits(t.model.encoder.params());
        for s in 0..3 {
            let r = ok_or(t.train_step(&synthetic_batch(60 + s, 1)), "stage I step")?;
            if let Some(term) = r.first_non_finite() {
                return Err(format!("non-finite {term}"));
            }
        }
        let mut t2 = Trainer::from_model(tiny_config(Stage::Finetune), t.model.clone(), 0);
        for s in 0..3 {
            let r = ok_or(t2.train_step(&synthetic_batch(70 + s, 1)), "stage II step")?;
            if let Some(term) = r.first_non_finite() {
                return Err(format!("non-finite {term}"));
            }
        }
        if store_bits(t2.model.encoder.params()) != enc0 {
            return Err("encoder weights changed".into());
        }
        let mut cfg = tiny_config(Stage::Finetune);
        cfg.ablation = Ablation { adv: false, ..Ablation::default() };
        let mut t3 = Trainer::from_model(cfg, t2.model.clone(), 0);
        let d0 = store_bits(&t3.model.discriminator.params);
        let g0 = store_bits(&t3.model.decoder.params);
        let r = ok_or(t3.train_step(&synthetic_batch(80, 1)), "ablated step")?;
        if store_bits(&t3.model.discriminator.params) != d0 {
            return Err("critic changed with the adversarial term off".into());
        }
        if store_bits(&t3.model.decoder.params) == g0 {
            return Err("decoder did not change".into());
        }
        if r.terms.contains_key(&Term::Adv) || r.discriminator.is_some() {
            return Err("adversarial term evaluated while ablated".into());
        }
        Ok("frozen encoder over 6 steps; critic untouched without adversarial term".into())
    };
    Check::from("trainer invariants", run())
}

// Controls ----------------------------------------------------------------------

fn controls_model() -> AesUst<f32> {
    let mut m = AesUst::<f32>::new(ChannelScale(1.0 / 16.0), 90);
    m.stage = Stage::Finetune;
    m
}

fn test_image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b): (f32, f32) = (rng.gen_range(0.5..5.0), rng.gen_range(0.5..5.0));
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let x = (i % w) as f32 / w as f32;
        let y = ((i / w) % h) as f32 / h as f32;
        let c = (i / (h * w)) as f32;
        (0.5 + 0.5 * (a * x * 6.0 + c).sin() * (b * y * 6.0).cos()).clamp(0.0, 1.0)
    })
}

pub fn controls_algebra() -> Check {
    let run = || -> Outcome {
        let model = controls_model();
        let c = test_image(1, 64, 80);
        let s1 = test_image(2, 64, 64);
        let s2 = test_image(3, 80, 64);
        let s3 = test_image(4, 64, 96);
        let plain = ok_or(model.generator_forward(&c, &s1), "forward")?;
        if ok_or(controls::stylize(&model, &c, &s1, 1.0), "alpha 1")? != plain {
            return Err("stylize(alpha = 1) differs from the plain forward".into());
        }
        let blend = ok_or(StyleBlend::new(vec![s1.clone(), s2.clone(), s3.clone()], vec![1.0, 0.0, 0.0]), "blend")?;
        if ok_or(controls::interpolate_styles(&model, &c, &blend), "interpolate")? != plain {
            return Err("weights [1, 0, 0] differ from the single style".into());
        }
        let full = ok_or(RegionMaskSet::new(vec![Mask::full(64, 80)]), "mask")?;
        if ok_or(controls::spatial_stylize(&model, &c, core::slice::from_ref(&s1), &full), "mask")? != plain {
            return Err("single full mask differs from the plain forward".into());
        }

        let pc = ok_or(model.encode(&c), "encode")?;
        let fcc = ok_or(model.fuse(&pc, &pc, ok_or(model.aesthetic(&c), "aesthetic")?.as_ref()), "F_cc")?;
        if ok_or(controls::stylize(&model, &c, &s1, 0.0), "alpha 0")? != ok_or(model.decode(&fcc), "decode")? {
            return Err("alpha = 0 is not the reconstruction branch".into());
        }
        let fcs = ok_or(model.stylized_feature(&c, &s1), "F_cs")?;
        let half = Controls { alpha: 0.5, ..Controls::default() };
        let mid = ok_or(controls::controlled_feature(&model, &c, core::slice::from_ref(&s1), &half), "alpha 0.5")?;
        let mean = fcs.zip_map(&fcc, |a, b| 0.5 * (a + b));
        if mid.max_abs_diff(&mean) > 1e-5 {
            return Err(format!("alpha 0.5 feature is off the midpoint by {:.2e}", mid.max_abs_diff(&mean)));
        }

        let w = vec![0.2, 0.5, 0.3];
        let fwd = ok_or(StyleBlend::new(vec![s1.clone(), s2.clone(), s3.clone()], w.clone()), "blend")?;
        let rev = ok_or(StyleBlend::new(vec![s3.clone(), s1.clone(), s2.clone()], vec![w[2], w[0], w[1]]), "blend")?;
        let a = ok_or(controls::interpolate_styles(&model, &c, &fwd), "blend")?;
        let b = ok_or(controls::interpolate_styles(&model, &c, &rev), "blend")?;
        if a.max_abs_diff(&b) > 1e-4 {
            return Err(format!("permuted blend differs by {:.2e}", a.max_abs_diff(&b)));
        }

        let left = Mask::from_fn(64, 80, |_, x| x < 40);
        let right = Mask::from_fn(64, 80, |_, x| x >= 40);
        let masks = ok_or(RegionMaskSet::new(vec![left, right]), "masks")?;
        let spatial = Controls { masks: Some(masks), ..Controls::default() };
        let f = ok_or(controls::controlled_feature(&model, &c, &[s1.clone(), s2.clone()], &spatial), "spatial")?;
        let f2 = ok_or(model.stylized_feature(&c, &s2), "F_cs 2")?;
        let (_, ch, h, wd) = f.dims4();
        for p in 0..ch * h * wd {
            let x = p % wd;
            let want = if x < wd / 2 { fcs.data()[p] } else { f2.data()[p] };
            if f.data()[p] != want {
                return Err(format!("masked feature at column {x} does not come from its region's style"));
            }
        }

        let s64 = s1.cast::<f64>();
        let c64 = c.cast::<f64>();
        let matched = ok_or(controls::color_match(&s64, &c64), "color")?;
        let hw = 64 * 64;
        let chw = 64 * 80;
        for ch in 0..3 {
            let m_s = matched.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64;
            let m_c = c64.data()[ch * chw..(ch + 1) * chw].iter().sum::<f64>() / chw as f64;
            close("color-matched channel mean", m_s, m_c, 1e-4)?;
        }
        Ok("alpha 1, one-hot weights and full mask are bit-exact; blends, masks and color matching hold".into())
    };
    Check::from("controls algebra", run())
}

// Persistence -------------------------------------------------------------------

fn random_name(rng: &mut ChaCha8Rng) -> String {
    const ALPHABET: &[char] = &['a', 'z', 'Q', '0', '.', '_', '-', 'é', 'ß', '語', '🦀', ' '];
    let n = rng.gen_range(1..=24);
    (0..n).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())]).collect()
}

/// Random entries with arbitrary bit patterns (NaNs included).
pub fn random_entries(rng: &mut ChaCha8Rng) -> Vec<ArchiveEntry> {
    let count = rng.gen_range(0..6);
    let mut names = BTreeSet::new();
    let mut out = Vec::new();
    while out.len() < count {
        let name = random_name(rng);
        if !names.insert(name.clone()) {
            continue;
        }
        let rank = rng.gen_range(0..=4);
        let dims: Vec<usize> = (0..rank).map(|_| rng.gen_range(0..=4)).collect();
        let n: usize = dims.iter().product();
        let data = if rng.gen_bool(0.5) {
            TensorData::F32((0..n).map(|_| f32::from_bits(rng.gen())).collect())
        } else {
            TensorData::F64((0..n).map(|_| f64::from_bits(rng.gen())).collect())
        };
        out.push(ArchiveEntry { name, dims, data });
    }
    out
}

fn same_bits(a: &[ArchiveEntry], b: &[ArchiveEntry]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.name == y.name
                && x.dims == y.dims
                && match (&x.data, &y.data) {
                    (TensorData::F32(p), TensorData::F32(q)) => p.iter().map(|v| v.to_bits()).eq(q.iter().map(|v| v.to_bits())),
                    (TensorData::F64(p), TensorData::F64(q)) => p.iter().map(|v| v.to_bits()).eq(q.iter().map(|v| v.to_bits())),
                    _ => false,
                }
        })
}

pub fn archive_fuzz(cases: usize) -> Check {
    let run = || -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for case in 0..cases {
            let entries = random_entries(&mut rng);
            let bytes = save_archive(&entries).map_err(|e| format!("case {case}: save: {e}"))?;
            let back = load_archive(&bytes).map_err(|e| format!("case {case}: load: {e}"))?;
            if !same_bits(&entries, &back) {
                return Err(format!("case {case}: entries differ after round trip"));
            }
            if save_archive(&back).map_err(|e| format!("case {case}: {e}"))? != bytes {
                return Err(format!("case {case}: re-saved bytes differ"));
            }
        }
        Ok(format!("{cases} random archives bit-exact"))
    };
    Check::from("archive round trip", run())
}

/// A stage-I checkpoint restores every tensor by name into a stage-II model.
pub fn resume_by_name() -> Check {
    let run = || -> Outcome {
        let mut t = ok_or(Trainer::<f32>::new(tiny_config(Stage::Pretrain)), "trainer")?;
        ok_or(t.train_step(&synthetic_batch(110, 1)), "step")?;
        let saved = t.checkpoint_entries();
        let bytes = save_archive(&saved).map_err(|e| e.to_string())?;
        let loaded = load_archive(&bytes).map_err(|e| e.to_string())?;
        let (model, step) = ok_or(AesUst::<f32>::from_entries(&loaded), "load")?;
        let t2 = Trainer::from_model(tiny_config(Stage::Finetune), model, step);
        let restored = t2.model.to_entries(step);
        let mut n = 0;
        for e in saved.iter().filter(|e| !e.name.starts_with("meta.")) {
            let r = restored.iter().find(|r| r.name == e.name).ok_or_else(|| format!("`{}` not restored", e.name))?;
            if !same_bits(core::slice::from_ref(e), core::slice::from_ref(r)) {
                return Err(format!("`{}` changed on load", e.name));
            }
            n += 1;
        }
        if restored.len() != saved.len() {
            return Err(format!("{} tensors saved, {} in the stage-II model", saved.len(), restored.len()));
        }
        Ok(format!("{n} tensors restored by name"))
    };
    Check::from("stage-II resume loads stage-I tensors", run())
}

/// Everything that fits in the interactive time budget.
pub fn fast_suite() -> Vec<Check> {
    vec![
        attention_stochasticity(),
        oracle_equivalence(),
        residual_identities(),
        gradient_aessa(),
        gradient_decoder(),
        gradient_discriminator(),
        gradient_losses(),
        multiscale_features(),
        loss_sanity(),
        stage_gating(),
        trainer_invariants(),
        controls_algebra(),
        archive_fuzz(1000),
        resume_by_name(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped(
        net: &AesSaNet<f64>,
        level: Level,
        fc: &Tensor<f64>,
        fs: &Tensor<f64>,
        fa: &Tensor<f64>,
    ) -> Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
        let (o, a, s) = net.forward_with_attention(level, fc, fs, fa)?;
        Ok((o, a.map(|v| -v), s.map(|v| -v)))
    }

    #[test]
    fn sign_error_in_softmax_is_caught() {
        assert!(attention_stochasticity_with(net_attention, 5, 1).passed);
        assert!(!attention_stochasticity_with(flipped, 5, 1).passed);
    }

    #[test]
    fn row_check_rejects_bad_rows() {
        let good = Tensor::from_vec(&[1, 2, 2], vec![0.25, 0.75, 1.0, 0.0]).unwrap();
        assert!(rows_stochastic(&good, 1e-9).is_ok());
        let neg = Tensor::from_vec(&[1, 1, 2], vec![1.5, -0.5]).unwrap();
        assert!(rows_stochastic(&neg, 1e-9).is_err());
        let nan = Tensor::from_vec(&[1, 1, 2], vec![f64::NAN, 1.0]).unwrap();
        assert!(rows_stochastic(&nan, 1e-9).is_err());
    }
}
