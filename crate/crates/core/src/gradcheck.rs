//! Central finite-difference checks of reverse-mode gradients.

// f64 math under no_std; redundant when std is linked.
#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Gradients with both norms below `NORM_FLOOR·max(1, |f|)` are compared
/// against that floor instead, since central differences carry noise of
/// roughly `1e-10·|f|`.
pub const NORM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Index of the input tensor.
    pub input: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)` over the
    /// checked elements.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub checked: usize,
}

fn elements(n: usize, budget: usize) -> Vec<usize> {
    if n <= budget {
        return (0..n).collect();
    }
    // Evenly spread, with an odd stride so channels and rows both vary.
    let stride = (n / budget) | 1;
    (0..budget).map(|i| (i * stride) % n).collect()
}

/// Compares the gradient of the scalar `f(inputs)` against central finite
/// differences for every input, checking at most `budget` elements of each.
pub fn check<F>(inputs: &[Tensor<f64>], budget: usize, f: F) -> Vec<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = f(&mut g, &vars);
    let grads = g.backward(root);
    let floor = NORM_FLOOR * g.scalar(root).abs().max(1.0);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let r = f(&mut g, &vars);
        g.scalar(r)
    };

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        let idx = elements(inputs[i].numel(), budget);
        let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
        for &j in &idx {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i].data()[j];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let denom = num_traits::Float::sqrt(a2).max(num_traits::Float::sqrt(n2)).max(floor);
        reports.push(GradReport {
            input: i,
            rel_err: num_traits::Float::sqrt(diff2) / denom,
            max_abs_err: max_abs,
            analytic_norm: num_traits::Float::sqrt(a2),
            numeric_norm: num_traits::Float::sqrt(n2),
            checked: idx.len(),
        });
    }
    reports
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_function_passes() {
        let x = Tensor::from_fn(&[1, 2, 3, 3], |i| 0.1 * i as f64 - 0.7);
        let r = check(&[x], 100, |g, v| {
            let s = g.mul(v[0], v[0]);
            let n = g.neg_log_sigmoid(s);
            g.sum_all(n)
        });
        assert!(r[0].rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn sampling_visits_distinct_elements() {
        let idx = elements(1000, 64);
        let mut s = idx.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 64);
    }
}
