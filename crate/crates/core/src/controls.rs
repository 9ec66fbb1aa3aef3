//! Runtime controls over a trained model: content/style trade-off, style
//! interpolation, color preservation and per-region styles. All of them
//! blend the fused feature that feeds the decoder and decode once.

// f64 math under no_std; redundant when std is linked.
#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{check_image, Tap};
use crate::error::{shape_err, Error, Result};
use crate::kernels::nearest_src;
use crate::model::AesUst;
use crate::real::Real;
use crate::tensor::Tensor;

pub const WEIGHT_TOL: f64 = 1e-6;
pub const COLOR_EPS: f64 = 1e-5;

/// Style images with simplex weights.
#[derive(Debug, Clone)]
pub struct StyleBlend<T> {
    styles: Vec<Tensor<T>>,
    weights: Vec<f64>,
}

pub fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.is_empty() || weights.len() != n {
        return Err(Error::InvalidArgument(format!("{} weights given for {n} styles", weights.len())));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::InvalidArgument(format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

impl<T: Real> StyleBlend<T> {
    pub fn new(styles: Vec<Tensor<T>>, weights: Vec<f64>) -> Result<Self> {
        check_weights(&weights, styles.len())?;
        Ok(StyleBlend { styles, weights })
    }

    pub fn styles(&self) -> &[Tensor<T>] {
        &self.styles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Binary map, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width || data.is_empty() {
            return Err(shape_err!("mask of {}x{} has {} values", height, width, data.len()));
        }
        Ok(Mask { height, width, data })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Mask { height, width, data }
    }

    pub fn downsample(&self, h: usize, w: usize) -> Mask {
        Mask::from_fn(h, w, |y, x| {
            let sy = nearest_src(y, self.height, h);
            let sx = nearest_src(x, self.width, w);
            self.data[sy * self.width + sx]
        })
    }
}

/// Masks that partition the content grid, one per style.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMaskSet {
    masks: Vec<Mask>,
}

impl RegionMaskSet {
    pub fn new(masks: Vec<Mask>) -> Result<Self> {
        let first = masks.first().ok_or_else(|| Error::InvalidArgument("at least one mask is required".into()))?;
        let (h, w) = (first.height, first.width);
        if let Some(m) = masks.iter().find(|m| (m.height, m.width) != (h, w)) {
            return Err(shape_err!("masks differ in size: {}x{} vs {}x{}", h, w, m.height, m.width));
        }
        for i in 0..h * w {
            let n = masks.iter().filter(|m| m.data[i]).count();
            if n > 1 {
                return Err(Error::InvalidArgument(format!("masks overlap at row {}, column {}", i / w, i % w)));
            }
            if n == 0 {
                return Err(Error::InvalidArgument(format!("masks leave row {}, column {} uncovered", i / w, i % w)));
            }
        }
        Ok(RegionMaskSet { masks })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn size(&self) -> (usize, usize) {
        (self.masks[0].height, self.masks[0].width)
    }

    pub fn downsample(&self, h: usize, w: usize) -> Vec<Mask> {
        self.masks.iter().map(|m| m.downsample(h, w)).collect()
    }
}

/// Everything a stylization request can ask for.
#[derive(Debug, Clone, PartialEq)]
pub struct Controls {
    pub alpha: f64,
    /// Interpolation weights; `None` means uniform.
    pub weights: Option<Vec<f64>>,
    pub preserve_color: bool,
    pub masks: Option<RegionMaskSet>,
}

impl Default for Controls {
    fn default() -> Self {
        Controls {
            alpha: 1.0,
            weights: None,
            preserve_color: false,
            masks: None,
        }
    }
}

impl Controls {
    pub fn validate(&self, n_styles: usize) -> Result<()> {
        if n_styles == 0 {
            return Err(Error::InvalidArgument("at least one style image is required".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha {} is outside [0, 1]", self.alpha)));
        }
        if let Some(w) = &self.weights {
            check_weights(w, n_styles)?;
        }
        if let Some(m) = &self.masks {
            if self.weights.is_some() {
                return Err(Error::InvalidArgument("weights and masks cannot be combined".into()));
            }
            if m.len() != n_styles {
                return Err(Error::InvalidArgument(format!("{} masks given for {n_styles} styles", m.len())));
            }
        }
        Ok(())
    }
}

fn channel_stats<T: Real>(x: &Tensor<T>) -> Vec<(f64, f64)> {
    let (b, c, h, w) = x.dims4();
    let hw = h * w;
    (0..c)
        .map(|ch| {
            let vals = (0..b).flat_map(|n| x.data()[(n * c + ch) * hw..(n * c + ch + 1) * hw].iter());
            let cnt = (b * hw) as f64;
            let mean = vals.clone().map(|v| v.as_f64()).sum::<f64>() / cnt;
            let var = vals.map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / cnt;
            (mean, var.sqrt())
        })
        .collect()
}

/// Per-channel affine map of `style` onto the mean and std of `content`,
/// before clamping.
pub fn color_match<T: Real>(style: &Tensor<T>, content: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, cs, h, w) = style.expect_rank4("style image")?;
    let (_, cc, ..) = content.expect_rank4("content image")?;
    if cs != 3 || cc != 3 {
        return Err(shape_err!("color matching needs RGB images"));
    }
    let s = channel_stats(style);
    let c = channel_stats(content);
    let hw = h * w;
    let mut out = style.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = (i / hw) % 3;
        let ((ms, ss), (mc, sc)) = (s[ch], c[ch]);
        *v = T::from_f64((v.as_f64() - ms) * sc / ss.max(COLOR_EPS) + mc);
    }
    Ok(out)
}

/// Style image recolored to the content's channel statistics, in [0, 1].
pub fn color_preserve<T: Real>(style: &Tensor<T>, content: &Tensor<T>) -> Result<Tensor<T>> {
    let m = color_match(style, content)?;
    Ok(m.map(|v| v.max(T::zero()).min(T::one())))
}

/// Combines per-style fused features with masks at the feature grid.
pub fn compose_masked<T: Real>(features: &[Tensor<T>], masks: &RegionMaskSet) -> Result<Tensor<T>> {
    let (b, c, h, w) = features[0].dims4();
    let small = masks.downsample(h, w);
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for (f, m) in features.iter().zip(&small) {
        if f.shape() != out.shape() {
            return Err(shape_err!("feature shapes differ: {:?} vs {:?}", f.shape(), out.shape()));
        }
        for (i, (o, &v)) in out.data_mut().iter_mut().zip(f.data()).enumerate() {
            if m.data[i % (h * w)] {
                *o += v;
            }
        }
    }
    Ok(out)
}

/// `Σ w_i F_i`.
pub fn blend_features<T: Real>(features: &[Tensor<T>], weights: &[f64]) -> Result<Tensor<T>> {
    let mut out = Tensor::zeros(features[0].shape());
    for (f, &wgt) in features.iter().zip(weights) {
        if f.shape() != out.shape() {
            return Err(shape_err!("feature shapes differ: {:?} vs {:?}", f.shape(), out.shape()));
        }
        let wt = T::from_f64(wgt);
        for (o, &v) in out.data_mut().iter_mut().zip(f.data()) {
            *o += wt * v;
        }
    }
    Ok(out)
}

/// The feature the decoder sees for a request. Single-style, unblended
/// requests use the fused feature untouched.
pub fn controlled_feature<T: Real>(model: &AesUst<T>, content: &Tensor<T>, styles: &[Tensor<T>], controls: &Controls) -> Result<Tensor<T>> {
    controls.validate(styles.len())?;
    check_image(content, "content image")?;
    let (_, _, h, w) = content.dims4();
    if let Some(m) = &controls.masks {
        if m.size() != (h, w) {
            return Err(shape_err!("masks are {:?}, content is {h}x{w}", m.size()));
        }
    }
    let pc = model.encode(content)?;
    let mut features = Vec::with_capacity(styles.len());
    for s in styles {
        check_image(s, "style image")?;
        let s = if controls.preserve_color { color_preserve(s, content)? } else { s.clone() };
        let ps = model.encode(&s)?;
        let fa = model.aesthetic(&s)?;
        features.push(model.fuse(&pc, &ps, fa.as_ref())?);
    }
    let weights = match &controls.weights {
        Some(w) => w.clone(),
        None => vec![1.0 / styles.len() as f64; styles.len()],
    };
    let single = weights.iter().position(|&w| w == 1.0).filter(|_| weights.iter().filter(|&&w| w != 0.0).count() == 1);
    let mut feature = match (&controls.masks, single) {
        (Some(m), _) if m.len() == 1 => features.swap_remove(0),
        (Some(m), _) => compose_masked(&features, m)?,
        (None, Some(i)) => features.swap_remove(i),
        (None, None) => blend_features(&features, &weights)?,
    };
    if controls.alpha < 1.0 {
        let fa = model.aesthetic(content)?;
        let fcc = model.fuse(&pc, &pc, fa.as_ref())?;
        let a = T::from_f64(controls.alpha);
        let b = T::from_f64(1.0 - controls.alpha);
        feature = feature.zip_map(&fcc, |x, y| a * x + b * y);
    }
    debug_assert_eq!(feature.shape()[2], pc.tap(Tap::Relu4_1).shape()[2]);
    Ok(feature)
}

/// Runs a full request and returns the decoder output (unclamped).
pub fn run<T: Real>(model: &AesUst<T>, content: &Tensor<T>, styles: &[Tensor<T>], controls: &Controls) -> Result<Tensor<T>> {
    let f = controlled_feature(model, content, styles, controls)?;
    model.decode(&f)
}

pub fn stylize<T: Real>(model: &AesUst<T>, content: &Tensor<T>, style: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    let controls = Controls { alpha, ..Controls::default() };
    run(model, content, core::slice::from_ref(style), &controls)
}

pub fn interpolate_styles<T: Real>(model: &AesUst<T>, content: &Tensor<T>, blend: &StyleBlend<T>) -> Result<Tensor<T>> {
    let controls = Controls {
        weights: Some(blend.weights.clone()),
        ..Controls::default()
    };
    run(model, content, &blend.styles, &controls)
}

pub fn spatial_stylize<T: Real>(model: &AesUst<T>, content: &Tensor<T>, styles: &[Tensor<T>], masks: &RegionMaskSet) -> Result<Tensor<T>> {
    let controls = Controls {
        masks: Some(masks.clone()),
        ..Controls::default()
    };
    run(model, content, styles, &controls)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_set_rejects_overlap_and_gaps() {
        let left = Mask::from_fn(4, 4, |_, x| x < 2);
        let right = Mask::from_fn(4, 4, |_, x| x >= 2);
        assert!(RegionMaskSet::new(vec![left.clone(), right.clone()]).is_ok());
        assert!(RegionMaskSet::new(vec![left.clone(), Mask::full(4, 4)]).is_err());
        assert!(RegionMaskSet::new(vec![left]).is_err());
    }

    #[test]
    fn downsampled_masks_still_partition() {
        let a = Mask::from_fn(32, 48, |y, x| (x * 3 + y) % 7 < 3);
        let b = Mask::from_fn(32, 48, |y, x| (x * 3 + y) % 7 >= 3);
        let set = RegionMaskSet::new(vec![a, b]).unwrap();
        for (h, w) in [(4, 6), (2, 3), (32, 48)] {
            let small = set.downsample(h, w);
            for i in 0..h * w {
                assert_eq!(small.iter().filter(|m| m.data[i]).count(), 1);
            }
        }
    }

    #[test]
    fn weights_must_form_a_simplex() {
        assert!(check_weights(&[0.25; 4], 4).is_ok());
        assert!(check_weights(&[0.5, 0.4], 2).is_err());
        assert!(check_weights(&[1.5, -0.5], 2).is_err());
        assert!(check_weights(&[1.0], 2).is_err());
    }

    #[test]
    fn color_match_hits_content_statistics() {
        let s = Tensor::<f64>::from_fn(&[1, 3, 8, 8], |i| ((i * 37) % 11) as f64 / 11.0);
        let c = Tensor::<f64>::from_fn(&[1, 3, 8, 8], |i| 0.3 + ((i * 13) % 5) as f64 / 20.0);
        let m = color_match(&s, &c).unwrap();
        for (a, b) in channel_stats(&m).iter().zip(channel_stats(&c)) {
            assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        }
        let same = color_preserve(&c, &c).unwrap();
        assert!(same.max_abs_diff(&c) < 1e-12);
    }
}
