//! Reference implementations written as plain loops.
//!
//! Nothing here calls into [`crate::kernels`] or [`crate::graph`]; these
//! functions exist to cross-check the fast paths in tests and `selfcheck`.
//! They work in `f64` and are only meant for tiny shapes.

// f64 math under no_std; redundant when std is linked.
#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::vec;
use alloc::vec::Vec;

use crate::aessa::{AesSaNet, Level, NORM_EPS};
use crate::kernels::{ConvGeom, PadMode};
use crate::nn::Conv;
use crate::real::Real;
use crate::tensor::Tensor;

fn at(t: &Tensor<f64>, b: usize, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[((b * s[1] + c) * s[2] + y) * s[3] + x]
}

/// Direct convolution with one multiply-add per tap.
pub fn conv2d_direct(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, geom: ConvGeom) -> Tensor<f64> {
    let (bn, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let (s, p) = (geom.stride as i64, geom.pad as i64);
    let ho = ((h as i64 + 2 * p - k as i64) / s + 1) as usize;
    let wo = ((wd as i64 + 2 * p - k as i64) / s + 1) as usize;
    let fetch = |bi: usize, ci: usize, iy: i64, ix: i64| -> f64 {
        let mirror = |i: i64, n: i64| -> Option<i64> {
            if i >= 0 && i < n {
                Some(i)
            } else if geom.pad_mode == PadMode::Zero {
                None
            } else if n == 1 {
                Some(0)
            } else if i < 0 {
                Some(-i)
            } else {
                Some(2 * n - 2 - i)
            }
        };
        match (mirror(iy, h as i64), mirror(ix, wd as i64)) {
            (Some(yy), Some(xx)) => at(x, bi, ci, yy as usize, xx as usize),
            _ => 0.0,
        }
    };
    let mut out = vec![0.0; bn * cout * ho * wo];
    for bi in 0..bn {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map(|b| b.data()[co]).unwrap_or(0.0);
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let wv = w.data()[((co * cin + ci) * k + ky) * k + kx];
                                acc += wv * fetch(bi, ci, oy as i64 * s + ky as i64 - p, ox as i64 * s + kx as i64 - p);
                            }
                        }
                    }
                    out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[bn, cout, ho, wo], out).unwrap()
}

/// Dense `cout × cin` weights and bias of a 1×1 convolution.
#[derive(Debug, Clone)]
pub struct Pointwise {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Pointwise {
    fn from_conv<T: Real>(net: &AesSaNet<T>, conv: &Conv) -> Self {
        let w = net.params.get(conv.weight);
        let b = net.params.get(conv.bias);
        Pointwise {
            w: (0..conv.cout)
                .map(|o| (0..conv.cin).map(|i| w.data()[o * conv.cin + i].as_f64()).collect())
                .collect(),
            b: b.data().iter().map(|v| v.as_f64()).collect(),
        }
    }

    /// Applies to a `C×N` matrix given as rows.
    fn apply(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = x[0].len();
        self.w
            .iter()
            .zip(&self.b)
            .map(|(row, &bias)| {
                (0..n)
                    .map(|j| bias + row.iter().zip(x).map(|(wv, xr)| wv * xr[j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LevelWeights {
    pub f_a: Pointwise,
    pub f_s1: Pointwise,
    pub f_s2: Pointwise,
    pub f_out1: Pointwise,
    pub f_c: Pointwise,
    pub f_sa1: Pointwise,
    pub f_sa2: Pointwise,
    pub f_out2: Pointwise,
}

impl LevelWeights {
    pub fn from_net<T: Real>(net: &AesSaNet<T>, level: Level) -> Self {
        let lp = net.level(level);
        let pw = |c: &Conv| Pointwise::from_conv(net, c);
        LevelWeights {
            f_a: pw(&lp.f_a),
            f_s1: pw(&lp.f_s1),
            f_s2: pw(&lp.f_s2),
            f_out1: pw(&lp.f_out1),
            f_c: pw(&lp.f_c),
            f_sa1: pw(&lp.f_sa1),
            f_sa2: pw(&lp.f_sa2),
            f_out2: pw(&lp.f_out2),
        }
    }
}

/// Batch item `b` as `C` rows of `HW` values.
fn rows(t: &Tensor<f64>, b: usize) -> Vec<Vec<f64>> {
    let s = t.shape();
    let n = s[2] * s[3];
    (0..s[1])
        .map(|c| (0..n).map(|j| t.data()[(b * s[1] + c) * n + j]).collect())
        .collect()
}

fn normalize_rows(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter().map(|v| (v - mean) / (var + NORM_EPS).sqrt()).collect()
        })
        .collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn pack(per_batch: Vec<Vec<Vec<f64>>>, shape: [usize; 4]) -> Tensor<f64> {
    let data = per_batch.into_iter().flatten().flatten().collect();
    Tensor::from_vec(&shape, data).unwrap()
}

/// `A_a[i][j] = softmax_j(Σ_n a[i][n] s1[j][n])` for batch item `b`.
pub fn aesthetic_attention_loops(lw: &LevelWeights, fs: &Tensor<f64>, fa: &Tensor<f64>, b: usize) -> Vec<Vec<f64>> {
    let a = lw.f_a.apply(&rows(fa, b));
    let s1 = lw.f_s1.apply(&rows(fs, b));
    let c = a.len();
    (0..c)
        .map(|i| {
            let logits: Vec<f64> = (0..c)
                .map(|j| a[i].iter().zip(&s1[j]).map(|(x, y)| x * y).sum())
                .collect();
            softmax(&logits)
        })
        .collect()
}

pub fn aesthetic_enhance_loops(lw: &LevelWeights, fs: &Tensor<f64>, fa: &Tensor<f64>) -> Tensor<f64> {
    let s = fs.shape();
    let shape = [s[0], s[1], s[2], s[3]];
    let out = (0..s[0])
        .map(|b| {
            let attn = aesthetic_attention_loops(lw, fs, fa, b);
            let s2 = lw.f_s2.apply(&rows(fs, b));
            let n = s2[0].len();
            let mixed: Vec<Vec<f64>> = attn
                .iter()
                .map(|arow| (0..n).map(|p| arow.iter().zip(&s2).map(|(w, r)| w * r[p]).sum()).collect())
                .collect();
            let proj = lw.f_out1.apply(&mixed);
            let base = rows(fs, b);
            proj.iter()
                .zip(&base)
                .map(|(pr, br)| pr.iter().zip(br).map(|(x, y)| x + y).collect())
                .collect()
        })
        .collect();
    pack(out, shape)
}

/// `A_s[p][q] = softmax_q(Σ_c q̂[c][p] k̂[c][q])` for batch item `b`.
pub fn style_attention_loops(lw: &LevelWeights, fc: &Tensor<f64>, fsa: &Tensor<f64>, b: usize) -> Vec<Vec<f64>> {
    let q = lw.f_c.apply(&normalize_rows(&rows(fc, b)));
    let k = lw.f_sa1.apply(&normalize_rows(&rows(fsa, b)));
    let (nc, ns) = (q[0].len(), k[0].len());
    (0..nc)
        .map(|p| {
            let logits: Vec<f64> = (0..ns)
                .map(|j| (0..q.len()).map(|c| q[c][p] * k[c][j]).sum())
                .collect();
            softmax(&logits)
        })
        .collect()
}

pub fn style_integrate_loops(lw: &LevelWeights, fc: &Tensor<f64>, fsa: &Tensor<f64>) -> Tensor<f64> {
    let s = fc.shape();
    let shape = [s[0], s[1], s[2], s[3]];
    let out = (0..s[0])
        .map(|b| {
            let attn = style_attention_loops(lw, fc, fsa, b);
            let v = lw.f_sa2.apply(&rows(fsa, b));
            let mixed: Vec<Vec<f64>> = v
                .iter()
                .map(|vr| attn.iter().map(|arow| arow.iter().zip(vr).map(|(a, x)| a * x).sum()).collect())
                .collect();
            let proj = lw.f_out2.apply(&mixed);
            let base = rows(fc, b);
            proj.iter()
                .zip(&base)
                .map(|(pr, br)| pr.iter().zip(br).map(|(x, y)| x + y).collect())
                .collect()
        })
        .collect();
    pack(out, shape)
}

/// Both attention steps; `fa` must share `fs`'s grid.
pub fn aessa_loops(lw: &LevelWeights, fc: &Tensor<f64>, fs: &Tensor<f64>, fa: &Tensor<f64>) -> Tensor<f64> {
    let fsa = aesthetic_enhance_loops(lw, fs, fa);
    style_integrate_loops(lw, fc, &fsa)
}

/// Nearest-neighbour upsampling by an integer factor, by replication.
pub fn upsample_replicate(x: &Tensor<f64>, factor: usize) -> Tensor<f64> {
    let s = x.shape();
    let (ho, wo) = (s[2] * factor, s[3] * factor);
    let mut out = Vec::with_capacity(s[0] * s[1] * ho * wo);
    for b in 0..s[0] {
        for c in 0..s[1] {
            for y in 0..ho {
                for xx in 0..wo {
                    out.push(at(x, b, c, y / factor, xx / factor));
                }
            }
        }
    }
    Tensor::from_vec(&[s[0], s[1], ho, wo], out).unwrap()
}
