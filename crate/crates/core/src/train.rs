//! One optimization step for either training stage.

// f64 math under no_std; redundant when std is linked.
#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::ArchiveEntry;
use crate::backbone::{check_image, Pyramid};
use crate::discriminator::check_disc_image;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, LossReport, LossWeights, Stage, Term, TermValues};
use crate::model::AesUst;
use crate::nn::ChannelScale;
use crate::optim::{Adam, AdamConfig};
use crate::real::Real;
use crate::tensor::Tensor;

/// Terms that can be switched off for ablations. A disabled term is neither
/// evaluated nor reported; disabling `adv` also skips the discriminator step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub adv: bool,
    pub ar1: bool,
    pub ar2: bool,
    pub identity: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            adv: true,
            ar1: true,
            ar2: true,
            identity: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub weights: LossWeights,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub resize_smaller_edge: u32,
    pub crop: u32,
    pub seed: u64,
    pub ablation: Ablation,
    pub channel_multiplier: f64,
    pub checkpoint_every: u64,
    pub save_optimizer_state: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            weights: LossWeights::default(),
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 4,
            iterations: 80_000,
            resize_smaller_edge: 512,
            crop: 256,
            seed: 0,
            ablation: Ablation::default(),
            channel_multiplier: 1.0,
            checkpoint_every: 1000,
            save_optimizer_state: false,
        }
    }
}

impl TrainConfig {
    /// Small profile that trains on a single CPU core in minutes.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 5e-4,
            batch_size: 2,
            iterations: 500,
            resize_smaller_edge: 80,
            crop: 64,
            channel_multiplier: 0.125,
            ..TrainConfig::default()
        }
    }

    pub fn scale(&self) -> ChannelScale {
        ChannelScale(self.channel_multiplier)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }

    /// Weight of `term` after ablations; zero for switched-off terms.
    pub fn effective_weight(&self, term: Term) -> f64 {
        let on = match term {
            Term::Adv => self.ablation.adv,
            Term::Ar1 => self.ablation.ar1,
            Term::Ar2 => self.ablation.ar2,
            Term::Identity => self.ablation.identity,
            Term::Content | Term::Style => true,
        };
        let w = self.weights.stage_terms(self.stage).iter().find(|(t, _)| *t == term).map(|p| p.1);
        match (on, w) {
            (true, Some(w)) => w,
            _ => 0.0,
        }
    }

    fn active(&self, term: Term) -> bool {
        losses::stage_allows(self.stage, term) && self.effective_weight(term) != 0.0
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |what: &str| Err(Error::InvalidArgument(what.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.crop == 0 || !self.crop.is_multiple_of(16) {
            return bad("crop must be a positive multiple of 16");
        }
        if self.stage == Stage::Finetune && (self.crop as usize) < crate::discriminator::MIN_SIDE {
            return bad("crop is too small for the discriminator");
        }
        if self.stage == Stage::Pretrain && self.ablation.adv && (self.crop as usize) < crate::discriminator::MIN_SIDE {
            return bad("crop is too small for the discriminator");
        }
        if self.resize_smaller_edge < self.crop {
            return bad("resize_smaller_edge must be at least crop");
        }
        if !(self.channel_multiplier > 0.0 && self.channel_multiplier <= 1.0) {
            return bad("channel_multiplier must lie in (0, 1]");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        Ok(())
    }
}

/// A content batch and a style batch of equal size.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub content: Tensor<T>,
    pub style: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn validate(&self) -> Result<()> {
        check_image(&self.content, "content batch")?;
        check_image(&self.style, "style batch")?;
        if self.content.shape() != self.style.shape() {
            return Err(Error::Shape(format!(
                "content batch {:?} and style batch {:?} differ",
                self.content.shape(),
                self.style.shape()
            )));
        }
        Ok(())
    }
}

/// Seed for everything random at a given step, so a resumed run draws the
/// same numbers as an uninterrupted one.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub model: AesUst<T>,
    pub step: u64,
    opt_aessa: Adam<T>,
    opt_decoder: Adam<T>,
    opt_disc: Adam<T>,
}

fn split(g: &mut Graph<impl Real>, p: &Pyramid, start: usize, len: usize) -> Pyramid {
    Pyramid {
        taps: p.taps.map(|t| g.slice_batch(t, start, len)),
    }
}

fn concat(g: &mut Graph<impl Real>, parts: &[&Pyramid]) -> Pyramid {
    let mut taps = parts[0].taps;
    for (i, t) in taps.iter_mut().enumerate() {
        let vs: Vec<Var> = parts.iter().map(|p| p.taps[i]).collect();
        *t = g.concat_batch(&vs);
    }
    Pyramid { taps }
}

fn constant_pyramid<T: Real>(dst: &mut Graph<T>, src: &Graph<T>, p: &Pyramid) -> Pyramid {
    Pyramid {
        taps: p.taps.map(|t| dst.constant(src.value(t).clone())),
    }
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut model = AesUst::new(cfg.scale(), cfg.seed);
        model.stage = cfg.stage;
        Ok(Self::from_model(cfg, model, 0))
    }

    /// Continues from an existing model. Optimizer moments start fresh.
    pub fn from_model(cfg: TrainConfig, mut model: AesUst<T>, step: u64) -> Self {
        model.stage = cfg.stage;
        let adam = cfg.adam();
        Trainer {
            opt_aessa: Adam::new(adam, &model.aessa.params),
            opt_decoder: Adam::new(adam, &model.decoder.params),
            opt_disc: Adam::new(adam, &model.discriminator.params),
            cfg,
            model,
            step,
        }
    }

    pub fn checkpoint_entries(&self) -> Vec<ArchiveEntry> {
        let mut out = self.model.to_entries(self.step);
        if self.cfg.save_optimizer_state {
            out.extend(self.opt_aessa.to_entries("adam.aessa", &self.model.aessa.params));
            out.extend(self.opt_decoder.to_entries("adam.decoder", &self.model.decoder.params));
            out.extend(self.opt_disc.to_entries("adam.disc", &self.model.discriminator.params));
        }
        out
    }

    /// Restores optimizer moments if the entries carry them for this stage's
    /// parameter layout. Returns whether anything was restored.
    pub fn restore_optimizer(&mut self, entries: &[ArchiveEntry]) -> Result<bool> {
        if !entries.iter().any(|e| e.name == "adam.aessa.step") {
            return Ok(false);
        }
        self.opt_aessa.load_entries("adam.aessa", &self.model.aessa.params, entries)?;
        self.opt_decoder.load_entries("adam.decoder", &self.model.decoder.params, entries)?;
        self.opt_disc.load_entries("adam.disc", &self.model.discriminator.params, entries)?;
        Ok(true)
    }

    /// One generator update, preceded by a discriminator update when the
    /// adversarial term is active. Nothing is updated if a loss is non-finite.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<LossReport> {
        batch.validate()?;
        if self.cfg.active(Term::Adv) {
            check_disc_image(&batch.style)?;
        }
        let report = match self.cfg.stage {
            Stage::Pretrain => self.stage1_step(batch)?,
            Stage::Finetune => self.stage2_step(batch)?,
        };
        self.step += 1;
        Ok(report)
    }

    fn discriminator_step(&mut self, real: &Tensor<T>, fake: Tensor<T>) -> Result<f64> {
        let model = &self.model;
        let mut g = Graph::new();
        let p = g.bind(&model.discriminator.params, true);
        let r = g.constant(real.clone());
        let f = g.constant(fake);
        let r_out = model.discriminator.forward(&mut g, &p, r);
        let f_out = model.discriminator.forward(&mut g, &p, f);
        let loss = losses::adv_loss_discriminator(&mut g, &r_out.logits, &f_out.logits);
        let value = g.scalar(loss).as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("disc loss at step {} (value {value})", self.step + 1)));
        }
        let grads = g.backward(loss);
        self.opt_disc.step(&mut self.model.discriminator.params, &p, &grads);
        Ok(value)
    }

    fn finish(&mut self, mut g: Graph<T>, gb: &crate::model::GenBinding, terms: Vec<(Term, Var)>, disc: Option<f64>, identity_mse: Option<f64>) -> Result<LossReport> {
        let mut values = TermValues::new();
        let mut weighted = Vec::new();
        for (term, v) in &terms {
            let x = g.scalar(*v).as_f64();
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("{} loss at step {} (value {x})", term.name(), self.step + 1)));
            }
            values.insert(*term, x);
            weighted.push((term, T::from_f64(self.cfg.effective_weight(*term)), *v));
        }
        let total = terms
            .iter()
            .map(|(t, _)| self.cfg.effective_weight(*t) * values[t])
            .sum::<f64>();
        let pairs: Vec<(T, Var)> = weighted.iter().map(|(_, w, v)| (*w, *v)).collect();
        let root = g.weighted_sum(&pairs).ok_or(Error::MissingTerm("content"))?;
        let grads = g.backward(root);
        self.opt_aessa.step(&mut self.model.aessa.params, &gb.aessa, &grads);
        self.opt_decoder.step(&mut self.model.decoder.params, &gb.decoder, &grads);
        Ok(LossReport {
            step: self.step + 1,
            stage: self.cfg.stage,
            terms: values,
            total,
            discriminator: disc,
            identity_mse,
        })
    }

    fn stage1_step(&mut self, batch: &Batch<T>) -> Result<LossReport> {
        let b = batch.content.dims4().0;
        let use_identity = self.cfg.active(Term::Identity);
        let use_adv = self.cfg.active(Term::Adv);
        let mut g = Graph::new();
        let enc = self.model.encoder.bind(&mut g);
        let ic = g.constant(batch.content.clone());
        let is = g.constant(batch.style.clone());
        let both = g.concat_batch(&[ic, is]);
        let pyr = self.model.encoder.forward(&mut g, &enc, both);
        let pc = split(&mut g, &pyr, 0, b);
        let ps = split(&mut g, &pyr, b, b);
        let gb = self.model.bind_generator(&mut g, true);
        // Content, identity-content and identity-style passes share one decode.
        let (contents, styles) = if use_identity {
            (concat(&mut g, &[&pc, &pc, &ps]), concat(&mut g, &[&ps, &pc, &ps]))
        } else {
            (pc, ps)
        };
        let fused = self.model.fused_feature(&mut g, &gb, &contents, &styles, None);
        let out = self.model.decode_var(&mut g, &gb, fused);
        let i_cs = if use_identity { g.slice_batch(out, 0, b) } else { out };

        let mut disc = None;
        let mut terms = Vec::new();
        if use_adv {
            // I_cs does not depend on the discriminator, so it doubles as the fake.
            let fake = g.value(i_cs).clone();
            disc = Some(self.discriminator_step(&batch.style, fake)?);
            let dp = g.bind(&self.model.discriminator.params, false);
            let d = self.model.discriminator.forward(&mut g, &dp, i_cs);
            terms.push((Term::Adv, losses::adv_loss_generator(&mut g, &d.logits)));
        }
        let pcs = self.model.encoder.forward(&mut g, &enc, i_cs);
        terms.push((Term::Content, losses::content_loss(&mut g, &pcs, &pc)));
        terms.push((Term::Style, losses::style_loss(&mut g, &pcs, &ps)));
        let mut identity_mse = None;
        if use_identity {
            let i_cc = g.slice_batch(out, b, b);
            let i_ss = g.slice_batch(out, 2 * b, b);
            terms.push((Term::Identity, losses::identity_loss(&mut g, i_cc, ic, i_ss, is)));
            let n = batch.content.numel() as f64;
            let sq: f64 = g
                .value(i_cc)
                .data()
                .iter()
                .zip(batch.content.data())
                .map(|(a, c)| (a.as_f64() - c.as_f64()).powi(2))
                .sum();
            identity_mse = Some(sq / n);
        }
        self.finish(g, &gb, terms, disc, identity_mse)
    }

    fn stage2_step(&mut self, batch: &Batch<T>) -> Result<LossReport> {
        let b = batch.content.dims4().0;
        let use_adv = self.cfg.active(Term::Adv);
        let use_ar1 = self.cfg.active(Term::Ar1);
        let use_ar2 = self.cfg.active(Term::Ar2);
        let mut g = Graph::new();
        let enc = self.model.encoder.bind(&mut g);
        let ic = g.constant(batch.content.clone());
        let is = g.constant(batch.style.clone());
        let both = g.concat_batch(&[ic, is]);
        let pyr = self.model.encoder.forward(&mut g, &enc, both);
        let pc = split(&mut g, &pyr, 0, b);
        let ps = split(&mut g, &pyr, b, b);

        let mut disc = None;
        if use_adv {
            // Fake for the discriminator update, guided by the pre-update D.
            let fake = {
                let mut fg = Graph::new();
                let gb = self.model.bind_generator(&mut fg, false);
                let dp = fg.bind(&self.model.discriminator.params, false);
                let x = fg.constant(batch.style.clone());
                let fa = self.model.discriminator.features(&mut fg, &dp, x);
                let fpc = constant_pyramid(&mut fg, &g, &pc);
                let fps = constant_pyramid(&mut fg, &g, &ps);
                let fused = self.model.fused_feature(&mut fg, &gb, &fpc, &fps, Some(fa));
                let out = self.model.decode_var(&mut fg, &gb, fused);
                fg.value(out).clone()
            };
            disc = Some(self.discriminator_step(&batch.style, fake)?);
        }

        let gb = self.model.bind_generator(&mut g, true);
        let dp = g.bind(&self.model.discriminator.params, false);
        let fa_s = self.model.discriminator.features(&mut g, &dp, is);
        let fused = self.model.fused_feature(&mut g, &gb, &pc, &ps, Some(fa_s));
        let i_cs = self.model.decode_var(&mut g, &gb, fused);

        let mut terms = Vec::new();
        let fa_cs = if use_adv || use_ar1 || use_ar2 {
            let d = self.model.discriminator.forward(&mut g, &dp, i_cs);
            if use_adv {
                terms.push((Term::Adv, losses::adv_loss_generator(&mut g, &d.logits)));
            }
            Some(d.features)
        } else {
            None
        };
        let pcs = self.model.encoder.forward(&mut g, &enc, i_cs);
        terms.push((Term::Content, losses::content_loss(&mut g, &pcs, &pc)));
        terms.push((Term::Style, losses::style_loss(&mut g, &pcs, &ps)));
        if let (true, Some(fa_cs)) = (use_ar1, fa_cs) {
            let fused2 = self.model.fused_feature(&mut g, &gb, &pcs, &pcs, Some(fa_cs));
            let i_cscs = self.model.decode_var(&mut g, &gb, fused2);
            terms.push((Term::Ar1, losses::ar1_loss(&mut g, i_cs, i_cscs)));
        }
        if let (true, Some(fa_cs)) = (use_ar2, fa_cs) {
            terms.push((Term::Ar2, losses::ar2_loss(&mut g, fa_s, fa_cs)));
        }
        self.finish(g, &gb, terms, disc, None)
    }
}
