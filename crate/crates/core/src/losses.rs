//! Training objectives.
//!
//! Norms are plain Euclidean norms over each sample's whole tensor (no
//! per-element averaging); batch items are averaged. Adversarial terms take
//! raw patch logits, apply the sigmoid internally with a `1e-7` log floor, and
//! average over patches and then over the three scales.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::aessa::NORM_EPS;
use crate::backbone::{FeaturePyramid, Pyramid, Tap};
use crate::discriminator::SCALES;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

pub const CONTENT_TAPS: [Tap; 2] = [Tap::Relu4_1, Tap::Relu5_1];
pub const STYLE_TAPS: [Tap; 5] = [Tap::Relu1_1, Tap::Relu2_1, Tap::Relu3_1, Tap::Relu4_1, Tap::Relu5_1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Pretrain = 1,
    Finetune = 2,
}

impl Stage {
    pub fn from_number(n: u32) -> Option<Self> {
        match n {
            1 => Some(Stage::Pretrain),
            2 => Some(Stage::Finetune),
            _ => None,
        }
    }

    pub fn number(self) -> u32 {
        self as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Adv,
    Content,
    Style,
    Identity,
    Ar1,
    Ar2,
}

impl Term {
    pub const ALL: [Term; 6] = [Term::Adv, Term::Content, Term::Style, Term::Identity, Term::Ar1, Term::Ar2];

    pub fn name(self) -> &'static str {
        match self {
            Term::Adv => "adv",
            Term::Content => "content",
            Term::Style => "style",
            Term::Identity => "identity",
            Term::Ar1 => "ar1",
            Term::Ar2 => "ar2",
        }
    }
}

/// λ1–λ4 weight the pre-training objective, λ5–λ9 the fine-tuning one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: [f64; 9],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: [5.0, 1.0, 1.0, 50.0, 5.0, 1.0, 1.0, 0.5, 500.0],
        }
    }
}

impl LossWeights {
    /// `(term, λ)` pairs that make up a stage's generator objective.
    pub fn stage_terms(&self, stage: Stage) -> [(Term, f64); 5] {
        let l = &self.lambda;
        match stage {
            Stage::Pretrain => [
                (Term::Adv, l[0]),
                (Term::Content, l[1]),
                (Term::Style, l[2]),
                (Term::Identity, l[3]),
                // Not part of the pre-training objective.
                (Term::Ar1, 0.0),
            ],
            Stage::Finetune => [
                (Term::Adv, l[4]),
                (Term::Content, l[5]),
                (Term::Style, l[6]),
                (Term::Ar1, l[7]),
                (Term::Ar2, l[8]),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidArgument("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Terms a stage's objective may reference.
pub fn stage_allows(stage: Stage, term: Term) -> bool {
    match stage {
        Stage::Pretrain => !matches!(term, Term::Ar1 | Term::Ar2),
        Stage::Finetune => term != Term::Identity,
    }
}

pub type TermValues = BTreeMap<Term, f64>;

/// Weighted generator objective. Terms with a zero weight may be absent.
pub fn stage_objective(stage: Stage, values: &TermValues, weights: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for (term, lambda) in weights.stage_terms(stage) {
        if lambda == 0.0 || !stage_allows(stage, term) {
            continue;
        }
        let v = values.get(&term).ok_or(Error::MissingTerm(term.name()))?;
        total += lambda * v;
    }
    Ok(total)
}

pub fn stage1_generator_objective(values: &TermValues, weights: &LossWeights) -> Result<f64> {
    stage_objective(Stage::Pretrain, values, weights)
}

pub fn stage2_generator_objective(values: &TermValues, weights: &LossWeights) -> Result<f64> {
    stage_objective(Stage::Finetune, values, weights)
}

/// Per-step loss record.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub stage: Stage,
    pub terms: TermValues,
    pub total: f64,
    pub discriminator: Option<f64>,
    /// Mean squared pixel error of the content self-reconstruction (stage I).
    pub identity_mse: Option<f64>,
}

impl LossReport {
    pub fn evaluated(&self) -> Vec<Term> {
        self.terms.keys().copied().collect()
    }

    /// `(name, value)` rows for the metrics log, weighted total last.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        let mut rows: Vec<(&'static str, f64)> = self.terms.iter().map(|(t, &v)| (t.name(), v)).collect();
        if let Some(d) = self.discriminator {
            rows.push(("disc", d));
        }
        if let Some(m) = self.identity_mse {
            rows.push(("identity_mse", m));
        }
        rows.push(("total", self.total));
        rows
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.rows().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

// Graph-level losses ---------------------------------------------------------

fn batch_mean<T: Real>(g: &mut Graph<T>, per_sample: Var) -> Var {
    g.mean_all(per_sample)
}

fn sum_scalars<T: Real>(g: &mut Graph<T>, parts: &[Var]) -> Var {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p);
    }
    acc
}

/// `‖a − b‖` per sample, averaged over the batch.
pub fn distance<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let n = g.sample_norm(d);
    batch_mean(g, n)
}

/// `‖μ(a) − μ(b)‖ + ‖σ(a) − σ(b)‖` over channels, averaged over the batch.
pub fn stat_distance<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let eps = T::from_f64(NORM_EPS);
    let (ma, mb) = (g.channel_mean(a), g.channel_mean(b));
    let (sa, sb) = (g.channel_std(a, eps), g.channel_std(b, eps));
    let dm = distance(g, ma, mb);
    let ds = distance(g, sa, sb);
    g.add(dm, ds)
}

pub fn content_loss<T: Real>(g: &mut Graph<T>, cs: &Pyramid, c: &Pyramid) -> Var {
    let eps = T::from_f64(NORM_EPS);
    let parts: Vec<Var> = CONTENT_TAPS
        .iter()
        .map(|&t| {
            let a = g.channel_norm(cs.tap(t), eps);
            let b = g.channel_norm(c.tap(t), eps);
            distance(g, a, b)
        })
        .collect();
    sum_scalars(g, &parts)
}

pub fn style_loss<T: Real>(g: &mut Graph<T>, cs: &Pyramid, s: &Pyramid) -> Var {
    let parts: Vec<Var> = STYLE_TAPS.iter().map(|&t| stat_distance(g, cs.tap(t), s.tap(t))).collect();
    sum_scalars(g, &parts)
}

pub fn identity_loss<T: Real>(g: &mut Graph<T>, icc: Var, ic: Var, iss: Var, is: Var) -> Var {
    let a = distance(g, icc, ic);
    let b = distance(g, iss, is);
    g.add(a, b)
}

fn mean_over_scales<T: Real>(g: &mut Graph<T>, per_scale: &[Var]) -> Var {
    let total = sum_scalars(g, per_scale);
    g.scale(total, T::from_f64(1.0 / per_scale.len() as f64))
}

/// Critic loss: mean over scales of patch-mean `−log σ(real) − log(1 − σ(fake))`.
pub fn adv_loss_discriminator<T: Real>(g: &mut Graph<T>, real: &[Var; SCALES], fake: &[Var; SCALES]) -> Var {
    let per_scale: Vec<Var> = real
        .iter()
        .zip(fake)
        .map(|(&r, &f)| {
            let lr = g.neg_log_sigmoid(r);
            let lr = g.mean_all(lr);
            let nf = g.scale(f, -T::one());
            let lf = g.neg_log_sigmoid(nf);
            let lf = g.mean_all(lf);
            g.add(lr, lf)
        })
        .collect();
    mean_over_scales(g, &per_scale)
}

/// Non-saturating generator loss: mean over scales of patch-mean `−log σ(fake)`.
pub fn adv_loss_generator<T: Real>(g: &mut Graph<T>, fake: &[Var; SCALES]) -> Var {
    let per_scale: Vec<Var> = fake
        .iter()
        .map(|&f| {
            let l = g.neg_log_sigmoid(f);
            g.mean_all(l)
        })
        .collect();
    mean_over_scales(g, &per_scale)
}

pub fn ar1_loss<T: Real>(g: &mut Graph<T>, ics_s: Var, icscs_cs: Var) -> Var {
    distance(g, ics_s, icscs_cs)
}

pub fn ar2_loss<T: Real>(g: &mut Graph<T>, fa_style: Var, fa_result: Var) -> Var {
    stat_distance(g, fa_style, fa_result)
}

// Tensor-level entry points -----------------------------------------------------

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    if a.shape().is_empty() || a.shape()[0] == 0 {
        return Err(shape_err!("{what}: empty batch"));
    }
    Ok(())
}

fn with_graph<T: Real>(f: impl FnOnce(&mut Graph<T>) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.scalar(v).as_f64()
}

fn pyramid_consts<T: Real>(g: &mut Graph<T>, p: &FeaturePyramid<T>) -> Pyramid {
    Pyramid {
        taps: p.taps.clone().map(|t| g.constant(t)),
    }
}

fn check_pyramids<T: Real>(a: &FeaturePyramid<T>, b: &FeaturePyramid<T>, taps: &[Tap], what: &str) -> Result<()> {
    for &t in taps {
        same_shape(a.tap(t), b.tap(t), what)?;
        a.tap(t).expect_rank4(what)?;
    }
    Ok(())
}

pub fn content_loss_tensors<T: Real>(cs: &FeaturePyramid<T>, c: &FeaturePyramid<T>) -> Result<f64> {
    check_pyramids(cs, c, &CONTENT_TAPS, "content_loss")?;
    Ok(with_graph(|g| {
        let (a, b) = (pyramid_consts(g, cs), pyramid_consts(g, c));
        content_loss(g, &a, &b)
    }))
}

pub fn style_loss_tensors<T: Real>(cs: &FeaturePyramid<T>, s: &FeaturePyramid<T>) -> Result<f64> {
    check_pyramids(cs, s, &STYLE_TAPS, "style_loss")?;
    Ok(with_graph(|g| {
        let (a, b) = (pyramid_consts(g, cs), pyramid_consts(g, s));
        style_loss(g, &a, &b)
    }))
}

pub fn identity_loss_tensors<T: Real>(icc: &Tensor<T>, ic: &Tensor<T>, iss: &Tensor<T>, is: &Tensor<T>) -> Result<f64> {
    same_shape(icc, ic, "identity_loss")?;
    same_shape(iss, is, "identity_loss")?;
    Ok(with_graph(|g| {
        let vs = [icc, ic, iss, is].map(|t| g.constant(t.clone()));
        identity_loss(g, vs[0], vs[1], vs[2], vs[3])
    }))
}

pub fn adv_loss_discriminator_tensors<T: Real>(real: &[Tensor<T>; SCALES], fake: &[Tensor<T>; SCALES]) -> f64 {
    with_graph(|g| {
        let r = real.clone().map(|t| g.constant(t));
        let f = fake.clone().map(|t| g.constant(t));
        adv_loss_discriminator(g, &r, &f)
    })
}

pub fn adv_loss_generator_tensors<T: Real>(fake: &[Tensor<T>; SCALES]) -> f64 {
    with_graph(|g| {
        let f = fake.clone().map(|t| g.constant(t));
        adv_loss_generator(g, &f)
    })
}

pub fn ar1_loss_tensors<T: Real>(ics_s: &Tensor<T>, icscs_cs: &Tensor<T>) -> Result<f64> {
    same_shape(ics_s, icscs_cs, "ar1_loss")?;
    Ok(with_graph(|g| {
        let (a, b) = (g.constant(ics_s.clone()), g.constant(icscs_cs.clone()));
        ar1_loss(g, a, b)
    }))
}

pub fn ar2_loss_tensors<T: Real>(fa_style: &Tensor<T>, fa_result: &Tensor<T>) -> Result<f64> {
    same_shape(fa_style, fa_result, "ar2_loss")?;
    fa_style.expect_rank4("ar2_loss")?;
    Ok(with_graph(|g| {
        let (a, b) = (g.constant(fa_style.clone()), g.constant(fa_result.clone()));
        ar2_loss(g, a, b)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    fn single_layer_pyramid(layer: Tensor<f64>) -> FeaturePyramid<f64> {
        FeaturePyramid {
            taps: [0, 1, 2, 3, 4].map(|i| if i == 3 { layer.clone() } else { Tensor::zeros(&[1, 1, 1, 2]) }),
        }
    }

    #[test]
    fn content_loss_removes_channel_scale() {
        let a = single_layer_pyramid(t(&[1, 1, 1, 2], vec![0.0, 2.0]));
        let b = single_layer_pyramid(t(&[1, 1, 1, 2], vec![0.0, 4.0]));
        assert!(content_loss_tensors(&a, &b).unwrap() < 1e-5);
        assert_eq!(content_loss_tensors(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn style_loss_mean_shift() {
        let a = single_layer_pyramid(t(&[1, 1, 1, 2], vec![0.0, 2.0]));
        let b = single_layer_pyramid(t(&[1, 1, 1, 2], vec![1.0, 3.0]));
        assert!((style_loss_tensors(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(style_loss_tensors(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn identity_loss_values() {
        let x = t(&[1, 3, 1, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(identity_loss_tensors(&x, &x, &x, &x).unwrap(), 0.0);
        let mut y = x.clone();
        y.data_mut()[0] += 0.6;
        y.data_mut()[3] -= 0.8;
        assert!((identity_loss_tensors(&y, &x, &x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            identity_loss_tensors(&y, &x, &x, &x).unwrap(),
            identity_loss_tensors(&x, &x, &y, &x).unwrap()
        );
        assert!(identity_loss_tensors(&y, &Tensor::zeros(&[1, 3, 2, 1]), &x, &x).is_err());
    }

    #[test]
    fn adversarial_reference_values() {
        let zeros = [4, 2, 1].map(|n| Tensor::<f64>::zeros(&[1, 1, n, n]));
        let d = adv_loss_discriminator_tensors(&zeros, &zeros);
        assert!((d - 2.0 * core::f64::consts::LN_2).abs() < 1e-12);
        assert!((adv_loss_generator_tensors(&zeros) - core::f64::consts::LN_2).abs() < 1e-12);
        let real = [4, 2, 1].map(|n| Tensor::<f64>::full(&[1, 1, n, n], 60.0));
        let fake = [4, 2, 1].map(|n| Tensor::<f64>::full(&[1, 1, n, n], -60.0));
        assert!(adv_loss_discriminator_tensors(&real, &fake) < 1e-12);
        // log floor keeps the saturated side finite
        assert!(adv_loss_discriminator_tensors(&fake, &real).is_finite());
    }

    #[test]
    fn ar_losses() {
        let x = t(&[1, 1, 1, 2], vec![3.0, 4.0]);
        let z = Tensor::zeros(&[1, 1, 1, 2]);
        assert_eq!(ar1_loss_tensors(&x, &x).unwrap(), 0.0);
        assert!((ar1_loss_tensors(&x.map(|v| v / 5.0), &z).unwrap() - 1.0).abs() < 1e-12);
        let shifted = x.map(|v| v + 2.0);
        assert!((ar2_loss_tensors(&x, &shifted).unwrap() - 2.0).abs() < 1e-12);
        let swapped = t(&[1, 1, 1, 2], vec![4.0, 3.0]);
        assert_eq!(ar2_loss_tensors(&x, &swapped).unwrap(), 0.0);
    }

    #[test]
    fn stage_totals_with_unit_terms() {
        let w = LossWeights::default();
        let ones: TermValues = Term::ALL.iter().map(|&t| (t, 1.0)).collect();
        assert!((stage1_generator_objective(&ones, &w).unwrap() - 57.0).abs() < 1e-12);
        assert!((stage2_generator_objective(&ones, &w).unwrap() - 507.5).abs() < 1e-12);
        let zero = LossWeights { lambda: [0.0; 9] };
        assert_eq!(stage1_generator_objective(&ones, &zero).unwrap(), 0.0);
        let mut partial = ones.clone();
        partial.remove(&Term::Identity);
        assert_eq!(stage1_generator_objective(&partial, &w), Err(Error::MissingTerm("identity")));
        // stage II never reads the identity term
        assert!((stage2_generator_objective(&partial, &w).unwrap() - 507.5).abs() < 1e-12);
    }
}
