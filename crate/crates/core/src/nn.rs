// f64 math under no_std; redundant when std is linked.
#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::format;

use rand::Rng;

use crate::graph::{Bound, Graph, Var};
use crate::kernels::ConvGeom;
use crate::params::{self, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Scales the reference channel widths (64…512) for desk-sized models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelScale(pub f64);

impl ChannelScale {
    pub const FULL: ChannelScale = ChannelScale(1.0);

    pub fn ch(self, base: usize) -> usize {
        ((base as f64 * self.0).round() as usize).max(1)
    }
}

impl Default for ChannelScale {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// PyTorch's default: U(±1/sqrt(fan_in)) for weight and bias.
    FanIn,
    /// N(0, std) weights, zero bias.
    Normal(f64),
    Orthogonal(f64),
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
        init: Init,
    ) -> Self {
        let shape = [cout, cin, k, k];
        let fan_in = (cin * k * k) as f64;
        let (w, b) = match init {
            Init::FanIn => {
                let bound = 1.0 / fan_in.sqrt();
                (params::uniform(rng, &shape, bound), params::uniform(rng, &[cout], bound))
            }
            Init::Normal(std) => (params::normal(rng, &shape, std), Tensor::zeros(&[cout])),
            Init::Orthogonal(gain) => (params::orthogonal(rng, &shape, gain), Tensor::zeros(&[cout])),
        };
        Conv {
            weight: store.insert(format!("{name}.weight"), w),
            bias: store.insert(format!("{name}.bias"), b),
            geom,
            cin,
            cout,
            k,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.get(self.weight), Some(p.get(self.bias)), self.geom)
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k + self.cout
    }
}
