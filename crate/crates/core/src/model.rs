//! The full stylization network: frozen encoder, attention fusion, decoder
//! and the aesthetic discriminator.

use alloc::vec::Vec;

use crate::aessa::{self, AesSaNet, Level};
use crate::archive::ArchiveEntry;
use crate::backbone::{check_image, Decoder, Encoder, FeaturePyramid, Pyramid, Tap};
use crate::discriminator::{check_disc_image, Discriminator};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Bound, Graph, Var};
use crate::losses::Stage;
use crate::nn::ChannelScale;
use crate::real::Real;
use crate::tensor::Tensor;

pub const META_SCALE: &str = "meta.channel_scale";
pub const META_STAGE: &str = "meta.stage";
pub const META_STEP: &str = "meta.step";

/// Generator parameters bound into one graph.
#[derive(Debug, Clone)]
pub struct GenBinding {
    pub aessa: Bound,
    pub decoder: Bound,
}

#[derive(Debug, Clone)]
pub struct AesUst<T> {
    pub scale: ChannelScale,
    pub stage: Stage,
    pub encoder: Encoder<T>,
    pub aessa: AesSaNet<T>,
    pub decoder: Decoder<T>,
    pub discriminator: Discriminator<T>,
}

impl<T: Real> AesUst<T> {
    /// Seeded model; each sub-network draws from its own stream.
    pub fn new(scale: ChannelScale, seed: u64) -> Self {
        let discriminator = Discriminator::new(scale, seed.wrapping_add(3));
        let aessa = AesSaNet::with_channels(scale.ch(512), discriminator.spec.feature_channels(), seed.wrapping_add(1));
        AesUst {
            scale,
            stage: Stage::Pretrain,
            encoder: Encoder::random(scale, seed),
            aessa,
            decoder: Decoder::new(scale, seed.wrapping_add(2)),
            discriminator,
        }
    }

    pub fn bind_generator(&self, g: &mut Graph<T>, trainable: bool) -> GenBinding {
        GenBinding {
            aessa: g.bind(&self.aessa.params, trainable),
            decoder: g.bind(&self.decoder.params, trainable),
        }
    }

    /// Multi-level fused feature at the relu4_1 grid. With `aesthetic = None`
    /// the style feature of each level stands in for the aesthetic feature.
    pub fn fused_feature(&self, g: &mut Graph<T>, b: &GenBinding, content: &Pyramid, style: &Pyramid, aesthetic: Option<Var>) -> Var {
        let mut outs = [content.tap(Tap::Relu4_1); 2];
        for (i, (level, tap)) in [(Level::R41, Tap::Relu4_1), (Level::R51, Tap::Relu5_1)].into_iter().enumerate() {
            let fc = content.tap(tap);
            let fs = style.tap(tap);
            let fa = match aesthetic {
                None => fs,
                Some(f) => {
                    let (_, _, h, w) = g.value(fs).dims4();
                    g.resize_nearest(f, h, w)
                }
            };
            outs[i] = aessa::level_forward(g, &b.aessa, self.aessa.level(level), fc, fs, fa);
        }
        self.aessa.fuse_forward(g, &b.aessa, outs[0], outs[1])
    }

    pub fn decode_var(&self, g: &mut Graph<T>, b: &GenBinding, feature: Var) -> Var {
        self.decoder.forward(g, &b.decoder, feature)
    }

    // Tensor-level pipeline pieces. Controls and generator_forward compose
    // exactly these, so equal inputs give equal bits.

    pub fn encode(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        self.encoder.encode(image)
    }

    /// Aesthetic guidance for an image: discriminator features at stage II,
    /// `None` (use the style feature) at stage I.
    pub fn aesthetic(&self, image: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        match self.stage {
            Stage::Pretrain => Ok(None),
            Stage::Finetune => {
                check_disc_image(image)?;
                self.discriminator.aesthetic_features(image).map(Some)
            }
        }
    }

    pub fn fuse(&self, content: &FeaturePyramid<T>, style: &FeaturePyramid<T>, aesthetic: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (bc, ..) = content.tap(Tap::Relu4_1).dims4();
        let (bs, ..) = style.tap(Tap::Relu4_1).dims4();
        if bc != bs {
            return Err(shape_err!("content batch {bc} vs style batch {bs}"));
        }
        let mut g = Graph::new();
        let b = self.bind_generator(&mut g, false);
        let pc = Pyramid {
            taps: content.taps.clone().map(|t| g.constant(t)),
        };
        let ps = Pyramid {
            taps: style.taps.clone().map(|t| g.constant(t)),
        };
        let fa = aesthetic.map(|t| g.constant(t.clone()));
        let f = self.fused_feature(&mut g, &b, &pc, &ps, fa);
        Ok(g.value(f).clone())
    }

    pub fn decode(&self, feature: &Tensor<T>) -> Result<Tensor<T>> {
        self.decoder.decode(feature)
    }

    /// Fused feature for a content/style image pair.
    pub fn stylized_feature(&self, content: &Tensor<T>, style: &Tensor<T>) -> Result<Tensor<T>> {
        let pc = self.encode(content)?;
        let ps = self.encode(style)?;
        let fa = self.aesthetic(style)?;
        self.fuse(&pc, &ps, fa.as_ref())
    }

    /// `I_cs` (unclamped decoder output) at the model's current stage.
    pub fn generator_forward(&self, content: &Tensor<T>, style: &Tensor<T>) -> Result<Tensor<T>> {
        check_image(content, "content image")?;
        check_image(style, "style image")?;
        let f = self.stylized_feature(content, style)?;
        self.decode(&f)
    }

    pub fn to_entries(&self, step: u64) -> Vec<ArchiveEntry> {
        let mut out = Vec::new();
        out.push(ArchiveEntry::scalar_f64(META_SCALE, self.scale.0));
        out.push(ArchiveEntry::scalar_f64(META_STAGE, self.stage.number() as f64));
        out.push(ArchiveEntry::scalar_f64(META_STEP, step as f64));
        out.extend(self.encoder.params().to_entries());
        out.extend(self.aessa.params.to_entries());
        out.extend(self.decoder.params.to_entries());
        out.extend(self.discriminator.params.to_entries());
        out
    }

    /// Rebuilds a model from checkpoint entries; returns it with the saved step.
    pub fn from_entries(entries: &[ArchiveEntry]) -> Result<(Self, u64)> {
        let meta = |name: &str| {
            entries
                .iter()
                .find(|e| e.name == name)
                .and_then(ArchiveEntry::first_f64)
                .ok_or_else(|| Error::MissingKey(name.into()))
        };
        let scale = ChannelScale(meta(META_SCALE)?);
        if !(scale.0 > 0.0 && scale.0.is_finite()) {
            return Err(Error::InvalidArgument("checkpoint channel scale must be positive".into()));
        }
        let stage = Stage::from_number(meta(META_STAGE)? as u32)
            .ok_or_else(|| Error::InvalidArgument("checkpoint stage must be 1 or 2".into()))?;
        let step = meta(META_STEP)? as u64;
        let mut model = AesUst::new(scale, 0);
        model.stage = stage;
        model.encoder = Encoder::from_entries(scale, entries)?;
        model.aessa.params.load_entries(entries)?;
        model.decoder.params.load_entries(entries)?;
        model.discriminator.params.load_entries(entries)?;
        Ok((model, step))
    }

    pub fn cast<U: Real>(&self) -> AesUst<U> {
        let mut m = AesUst::<U>::new(self.scale, 0);
        m.stage = self.stage;
        let entries: Vec<ArchiveEntry> = self.to_entries(0);
        let converted: Vec<ArchiveEntry> = entries
            .iter()
            .map(|e| match e.to_tensor::<U>() {
                Ok(t) if !e.name.starts_with("meta.") => ArchiveEntry::from_tensor(&e.name, &t),
                _ => e.clone(),
            })
            .collect();
        m.encoder = Encoder::from_entries(self.scale, &converted).expect("same layout");
        m.aessa.params.load_entries(&converted).expect("same layout");
        m.decoder.params.load_entries(&converted).expect("same layout");
        m.discriminator.params.load_entries(&converted).expect("same layout");
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let mut model = AesUst::<f32>::new(ChannelScale(0.0625), 5);
        model.stage = Stage::Finetune;
        let entries = model.to_entries(42);
        let (back, step) = AesUst::<f32>::from_entries(&entries).unwrap();
        assert_eq!(step, 42);
        assert_eq!(back.stage, Stage::Finetune);
        let c = Tensor::from_fn(&[1, 3, 64, 64], |i| (i % 7) as f32 / 7.0);
        let s = Tensor::from_fn(&[1, 3, 64, 64], |i| (i % 5) as f32 / 5.0);
        assert_eq!(model.generator_forward(&c, &s).unwrap(), back.generator_forward(&c, &s).unwrap());
    }

    #[test]
    fn output_matches_content_shape() {
        let model = AesUst::<f32>::new(ChannelScale(0.0625), 1);
        let c = Tensor::full(&[1, 3, 32, 48], 0.5);
        let s = Tensor::full(&[1, 3, 64, 16], 0.2);
        assert_eq!(model.generator_forward(&c, &s).unwrap().shape(), &[1, 3, 32, 48]);
    }
}
