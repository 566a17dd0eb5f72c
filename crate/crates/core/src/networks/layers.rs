use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::Normal;

use crate::error::TensorError;
use crate::tensor::{BatchStats, Tape, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Whether a forward pass uses batch statistics (training) or running
/// averages (inference) in normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Binds bundle parameters onto a tape, memoized by name so a parameter
/// used twice in one graph gets a single node (gradients then accumulate
/// instead of splitting).
#[derive(Default)]
pub struct Binder {
    cache: BTreeMap<String, (Tensor, bool)>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str, t: &Tensor, leaf: bool) -> Tensor {
        if let Some((bound, _)) = self.cache.get(name) {
            return bound.clone();
        }
        let bound = if leaf { tape.leaf(t) } else { t.detached() };
        self.cache.insert(name.to_string(), (bound.clone(), leaf));
        bound
    }

    /// Parameters bound as differentiable leaves, in name order.
    pub fn leaves(&self) -> Vec<(String, Tensor)> {
        self.cache
            .iter()
            .filter(|(_, (_, leaf))| *leaf)
            .map(|(n, (t, _))| (n.clone(), t.clone()))
            .collect()
    }
}

/// Forward-pass context: the tape, parameter binder, phase flag and the
/// batch-normalization statistics produced along the way.
pub struct FwdCtx<'t> {
    pub tape: &'t mut Tape,
    pub binder: Binder,
    pub phase: Phase,
    pub bn_updates: Vec<(String, BatchStats)>,
}

impl<'t> FwdCtx<'t> {
    pub fn new(tape: &'t mut Tape, phase: Phase) -> Self {
        FwdCtx { tape, binder: Binder::new(), phase, bn_updates: Vec::new() }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("std > 0");
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.sample(dist)).collect();
        Linear {
            w: Tensor::new(vec![fan_in, fan_out], w).expect("finite init"),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn forward(
        &self,
        ctx: &mut FwdCtx,
        prefix: &str,
        leaf: bool,
        x: &Tensor,
    ) -> Result<Tensor, TensorError> {
        let w = ctx.binder.bind(ctx.tape, &format!("{}/w", prefix), &self.w, leaf);
        let b = ctx.binder.bind(ctx.tape, &format!("{}/b", prefix), &self.b, leaf);
        let lin = ctx.tape.matmul(x, &w)?;
        ctx.tape.add(&lin, &b)
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, bool)) {
        f(format!("{}/w", prefix), &self.w, true);
        f(format!("{}/b", prefix), &self.b, true);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, bool)) {
        f(format!("{}/w", prefix), &mut self.w, true);
        f(format!("{}/b", prefix), &mut self.b, true);
    }
}

/// Running-average state for per-feature standardization.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub mean: Tensor,
    pub var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            mean: Tensor::zeros(&[features]),
            var: Tensor::full(&[features], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(
        &self,
        ctx: &mut FwdCtx,
        prefix: &str,
        x: &Tensor,
    ) -> Result<Tensor, TensorError> {
        let training = ctx.phase == Phase::Train;
        let (y, stats) =
            ctx.tape.normalize_batch(x, self.mean.data(), self.var.data(), training, self.eps)?;
        if let Some(stats) = stats {
            ctx.bn_updates.push((prefix.to_string(), stats));
        }
        Ok(y)
    }

    /// Exponential-moving-average update from one batch's statistics.
    pub fn absorb(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// A (transposed) convolution layer with optional normalization.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub bn: Option<BatchNorm>,
    pub transpose: bool,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvLayer {
    pub fn conv<R: Rng>(cin: usize, cout: usize, k: usize, std: f64, bn: bool, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("std > 0");
        let w: Vec<f64> = (0..cout * cin * k * k).map(|_| rng.sample(dist)).collect();
        ConvLayer {
            w: Tensor::new(vec![cout, cin, k, k], w).expect("finite init"),
            b: Tensor::zeros(&[cout]),
            bn: bn.then(|| BatchNorm::new(cout)),
            transpose: false,
            stride: 2,
            pad: 1,
            out_pad: 0,
        }
    }

    pub fn tconv<R: Rng>(cin: usize, cout: usize, k: usize, std: f64, bn: bool, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("std > 0");
        let w: Vec<f64> = (0..cin * cout * k * k).map(|_| rng.sample(dist)).collect();
        ConvLayer {
            w: Tensor::new(vec![cin, cout, k, k], w).expect("finite init"),
            b: Tensor::zeros(&[cout]),
            bn: bn.then(|| BatchNorm::new(cout)),
            transpose: true,
            stride: 2,
            pad: 1,
            out_pad: 1,
        }
    }

    /// Convolution, normalization (when present); the caller applies the
    /// activation.
    pub fn forward(
        &self,
        ctx: &mut FwdCtx,
        prefix: &str,
        leaf: bool,
        x: &Tensor,
    ) -> Result<Tensor, TensorError> {
        let w = ctx.binder.bind(ctx.tape, &format!("{}/w", prefix), &self.w, leaf);
        let b = ctx.binder.bind(ctx.tape, &format!("{}/b", prefix), &self.b, leaf);
        let y = if self.transpose {
            ctx.tape.conv_transpose2d(x, &w, &b, self.stride, self.pad, self.out_pad)?
        } else {
            ctx.tape.conv2d(x, &w, &b, self.stride, self.pad)?
        };
        match &self.bn {
            Some(bn) => bn.forward(ctx, prefix, &y),
            None => Ok(y),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, bool)) {
        f(format!("{}/w", prefix), &self.w, true);
        f(format!("{}/b", prefix), &self.b, true);
        if let Some(bn) = &self.bn {
            f(format!("{}/bn_mean", prefix), &bn.mean, false);
            f(format!("{}/bn_var", prefix), &bn.var, false);
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, bool)) {
        f(format!("{}/w", prefix), &mut self.w, true);
        f(format!("{}/b", prefix), &mut self.b, true);
        if let Some(bn) = &mut self.bn {
            f(format!("{}/bn_mean", prefix), &mut bn.mean, false);
            f(format!("{}/bn_var", prefix), &mut bn.var, false);
        }
    }
}
