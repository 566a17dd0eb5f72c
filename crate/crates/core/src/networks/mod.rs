//! The three parametric blocks: encoder, generator, and the latent
//! dynamics network that predicts the expected next latent together with
//! its momentum magnitude.
//!
//! Two architectures are provided: a three-layer MLP stack for the toy
//! regression task and a 32x32 convolutional encoder/decoder with skip
//! connections for images. The latent vector joins the generator at the
//! bottleneck by concatenation.

mod layers;

pub use layers::{BatchNorm, Binder, ConvLayer, FwdCtx, Linear, Phase, LEAKY_SLOPE};

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::error::{CheckpointError, TensorError};
use crate::latent::UNIT_NORM_TOL;
use crate::tensor::{Tape, Tensor};

pub const TOY_HIDDEN: usize = 32;
pub const TOY_BOTTLENECK: usize = 8;
pub const TOY_OUTPUT_DIM: usize = 3;
pub const TOY_OUTPUT_SCALE: f64 = 5.0;
pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_BOTTLENECK: usize = 128;
pub const IMAGE_Z_HIDDEN: usize = 64;
const IMAGE_WIDTHS: [usize; 4] = [32, 64, 128, 128];
const IMAGE_FLAT: usize = 128 * 2 * 2;

/// Architecture selector; fully determines every parameter shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Toy,
    Image32,
}

impl ArchKind {
    pub fn code(self) -> f64 {
        match self {
            ArchKind::Toy => 0.0,
            ArchKind::Image32 => 1.0,
        }
    }

    pub fn from_code(c: f64) -> Result<Self, CheckpointError> {
        match c as i64 {
            0 => Ok(ArchKind::Toy),
            1 => Ok(ArchKind::Image32),
            other => Err(CheckpointError::Malformed(format!("unknown arch code {}", other))),
        }
    }

    pub fn bottleneck(self) -> usize {
        match self {
            ArchKind::Toy => TOY_BOTTLENECK,
            ArchKind::Image32 => IMAGE_BOTTLENECK,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Encoder {
    Toy { layers: Vec<Linear> },
    Image { convs: Vec<ConvLayer>, fc: Linear },
}

#[derive(Debug, Clone)]
pub enum Generator {
    Toy { layers: Vec<Linear>, output_scale: f64 },
    Image { fc: Linear, deconvs: Vec<ConvLayer> },
}

/// The latent dynamics network: an MLP on concat(z, h) with a linear head
/// for the raw next latent and a softplus head for the momentum magnitude.
#[derive(Debug, Clone)]
pub struct Dynamics {
    pub layers: Vec<Linear>,
    pub zdim: usize,
}

/// Bottleneck representation of one input, plus the skip activations the
/// image generator consumes.
#[derive(Debug, Clone)]
pub struct Encoding {
    pub h: Tensor,
    pub skips: Vec<Tensor>,
}

impl Encoding {
    /// Same skips with the bottleneck replaced by zeros.
    pub fn with_zeroed_h(&self) -> Encoding {
        Encoding { h: Tensor::zeros(self.h.shape()), skips: self.skips.clone() }
    }
}

/// Output of the dynamics network.
#[derive(Debug, Clone)]
pub struct ZNetOutput {
    pub next_raw: Tensor,
    pub rho: Tensor,
}

/// Parameter sets for the encoder, generator and latent dynamics network.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub arch: ArchKind,
    pub zdim: usize,
    pub encoder: Encoder,
    pub generator: Generator,
    pub dynamics: Dynamics,
}

impl ModelBundle {
    pub fn init<R: Rng>(arch: ArchKind, zdim: usize, init_std: f64, rng: &mut R) -> Self {
        let h = arch.bottleneck();
        let encoder = match arch {
            ArchKind::Toy => Encoder::Toy {
                layers: vec![
                    Linear::init(1, TOY_HIDDEN, init_std, rng),
                    Linear::init(TOY_HIDDEN, TOY_HIDDEN, init_std, rng),
                    Linear::init(TOY_HIDDEN, TOY_BOTTLENECK, init_std, rng),
                ],
            },
            ArchKind::Image32 => Encoder::Image {
                convs: vec![
                    ConvLayer::conv(1, IMAGE_WIDTHS[0], 3, init_std, true, rng),
                    ConvLayer::conv(IMAGE_WIDTHS[0], IMAGE_WIDTHS[1], 3, init_std, true, rng),
                    ConvLayer::conv(IMAGE_WIDTHS[1], IMAGE_WIDTHS[2], 3, init_std, true, rng),
                    ConvLayer::conv(IMAGE_WIDTHS[2], IMAGE_WIDTHS[3], 3, init_std, true, rng),
                ],
                fc: Linear::init(IMAGE_FLAT, IMAGE_BOTTLENECK, init_std, rng),
            },
        };
        let generator = match arch {
            ArchKind::Toy => Generator::Toy {
                layers: vec![
                    Linear::init(h + zdim, TOY_HIDDEN, init_std, rng),
                    Linear::init(TOY_HIDDEN, TOY_HIDDEN, init_std, rng),
                    Linear::init(TOY_HIDDEN, TOY_OUTPUT_DIM, init_std, rng),
                ],
                output_scale: TOY_OUTPUT_SCALE,
            },
            ArchKind::Image32 => Generator::Image {
                fc: Linear::init(h + zdim, IMAGE_FLAT, init_std, rng),
                deconvs: vec![
                    ConvLayer::tconv(IMAGE_WIDTHS[3], IMAGE_WIDTHS[2], 3, init_std, true, rng),
                    // skip concatenations double the input channels below
                    ConvLayer::tconv(IMAGE_WIDTHS[2] * 2, IMAGE_WIDTHS[1], 3, init_std, true, rng),
                    ConvLayer::tconv(IMAGE_WIDTHS[1] * 2, IMAGE_WIDTHS[0], 3, init_std, true, rng),
                    ConvLayer::tconv(IMAGE_WIDTHS[0] * 2, 1, 3, init_std, false, rng),
                ],
            },
        };
        let zhidden = match arch {
            ArchKind::Toy => TOY_HIDDEN,
            ArchKind::Image32 => IMAGE_Z_HIDDEN,
        };
        let dynamics = Dynamics {
            layers: vec![
                Linear::init(zdim + h, zhidden, init_std, rng),
                Linear::init(zhidden, zhidden, init_std, rng),
                Linear::init(zhidden, zdim + 1, init_std, rng),
            ],
            zdim,
        };
        ModelBundle { arch, zdim, encoder, generator, dynamics }
    }

    /// Encoder forward: input to bottleneck (plus skip activations for the
    /// image architecture). `leaf` registers encoder parameters as
    /// differentiable.
    pub fn encode(&self, ctx: &mut FwdCtx, x: &Tensor, leaf: bool) -> Result<Encoding, TensorError> {
        match &self.encoder {
            Encoder::Toy { layers } => {
                expect_toy_input(x)?;
                let mut cur = x.clone();
                for (i, lin) in layers.iter().enumerate() {
                    cur = lin.forward(ctx, &format!("H/{}", i), leaf, &cur)?;
                    if i + 1 < layers.len() {
                        cur = ctx.tape.leaky_relu(&cur, LEAKY_SLOPE)?;
                    }
                }
                Ok(Encoding { h: cur, skips: vec![] })
            }
            Encoder::Image { convs, fc } => {
                let b = expect_image_input(x)?;
                let mut cur = x.clone();
                let mut skips = Vec::new();
                for (i, conv) in convs.iter().enumerate() {
                    cur = conv.forward(ctx, &format!("H/{}", i), leaf, &cur)?;
                    cur = ctx.tape.leaky_relu(&cur, LEAKY_SLOPE)?;
                    if i + 1 < convs.len() {
                        skips.push(cur.clone());
                    }
                }
                let flat = ctx.tape.reshape(&cur, &[b, IMAGE_FLAT])?;
                let h = fc.forward(ctx, "H/fc", leaf, &flat)?;
                Ok(Encoding { h, skips })
            }
        }
    }

    /// Generator forward from a bottleneck encoding and a unit-norm latent.
    pub fn generate(&self, ctx: &mut FwdCtx, enc: &Encoding, z: &Tensor, leaf: bool) -> Result<Tensor, TensorError> {
        check_unit_rows(z)?;
        self.generate_unchecked(ctx, enc, z, leaf)
    }

    /// Generator forward without the unit-norm gate; used by diagnostics
    /// that probe straight chords through the interior of the ball.
    pub fn generate_unchecked(
        &self,
        ctx: &mut FwdCtx,
        enc: &Encoding,
        z: &Tensor,
        leaf: bool,
    ) -> Result<Tensor, TensorError> {
        let joined = concat_features(ctx.tape, &enc.h, z)?;
        match &self.generator {
            Generator::Toy { layers, output_scale } => {
                let mut cur = joined;
                for (i, lin) in layers.iter().enumerate() {
                    cur = lin.forward(ctx, &format!("G/{}", i), leaf, &cur)?;
                    if i + 1 < layers.len() {
                        cur = ctx.tape.leaky_relu(&cur, LEAKY_SLOPE)?;
                    }
                }
                let t = ctx.tape.tanh(&cur)?;
                ctx.tape.scale(&t, *output_scale)
            }
            Generator::Image { fc, deconvs } => {
                let rows = match joined.shape() {
                    [b, _] => *b,
                    [_] => 1,
                    s => {
                        return Err(TensorError::ShapeMismatch {
                            op: "generate",
                            detail: format!("bottleneck shape {:?}", s),
                        })
                    }
                };
                let mut cur = fc.forward(ctx, "G/fc", leaf, &joined)?;
                cur = ctx.tape.leaky_relu(&cur, LEAKY_SLOPE)?;
                cur = ctx.tape.reshape(&cur, &[rows, IMAGE_WIDTHS[3], 2, 2])?;
                for (i, deconv) in deconvs.iter().enumerate() {
                    cur = deconv.forward(ctx, &format!("G/{}", i), leaf, &cur)?;
                    if i + 1 < deconvs.len() {
                        cur = ctx.tape.leaky_relu(&cur, LEAKY_SLOPE)?;
                        let skip = &enc.skips[deconvs.len() - 2 - i];
                        cur = ctx.tape.concat(&cur, skip, 1)?;
                    } else {
                        cur = ctx.tape.tanh(&cur)?;
                    }
                }
                Ok(cur)
            }
        }
    }

    /// Dynamics forward: predicts the raw next latent and a nonnegative
    /// momentum magnitude from (z_t, h).
    pub fn znet(&self, ctx: &mut FwdCtx, z: &Tensor, h: &Tensor, leaf: bool) -> Result<ZNetOutput, TensorError> {
        check_unit_rows(z)?;
        let joined = concat_features(ctx.tape, z, h)?;
        let mut cur = joined;
        let n = self.dynamics.layers.len();
        for (i, lin) in self.dynamics.layers.iter().enumerate() {
            cur = lin.forward(ctx, &format!("Z/{}", i), leaf, &cur)?;
            if i + 1 < n {
                cur = ctx.tape.leaky_relu(&cur, LEAKY_SLOPE)?;
            }
        }
        split_heads(ctx.tape, &cur, self.dynamics.zdim)
    }

    /// All tensors of the bundle, keyed for the checkpoint; `trainable`
    /// distinguishes optimizer parameters from normalization state.
    pub fn for_each_param(&self, f: &mut dyn FnMut(String, &Tensor, bool)) {
        match &self.encoder {
            Encoder::Toy { layers } => {
                for (i, l) in layers.iter().enumerate() {
                    l.for_each(&format!("H/{}", i), f);
                }
            }
            Encoder::Image { convs, fc } => {
                for (i, c) in convs.iter().enumerate() {
                    c.for_each(&format!("H/{}", i), f);
                }
                fc.for_each("H/fc", f);
            }
        }
        match &self.generator {
            Generator::Toy { layers, .. } => {
                for (i, l) in layers.iter().enumerate() {
                    l.for_each(&format!("G/{}", i), f);
                }
            }
            Generator::Image { fc, deconvs } => {
                fc.for_each("G/fc", f);
                for (i, c) in deconvs.iter().enumerate() {
                    c.for_each(&format!("G/{}", i), f);
                }
            }
        }
        for (i, l) in self.dynamics.layers.iter().enumerate() {
            l.for_each(&format!("Z/{}", i), f);
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor, bool)) {
        match &mut self.encoder {
            Encoder::Toy { layers } => {
                for (i, l) in layers.iter_mut().enumerate() {
                    l.for_each_mut(&format!("H/{}", i), f);
                }
            }
            Encoder::Image { convs, fc } => {
                for (i, c) in convs.iter_mut().enumerate() {
                    c.for_each_mut(&format!("H/{}", i), f);
                }
                fc.for_each_mut("H/fc", f);
            }
        }
        match &mut self.generator {
            Generator::Toy { layers, .. } => {
                for (i, l) in layers.iter_mut().enumerate() {
                    l.for_each_mut(&format!("G/{}", i), f);
                }
            }
            Generator::Image { fc, deconvs } => {
                fc.for_each_mut("G/fc", f);
                for (i, c) in deconvs.iter_mut().enumerate() {
                    c.for_each_mut(&format!("G/{}", i), f);
                }
            }
        }
        for (i, l) in self.dynamics.layers.iter_mut().enumerate() {
            l.for_each_mut(&format!("Z/{}", i), f);
        }
    }

    /// Applies collected batch-normalization statistics to the running
    /// averages.
    pub fn apply_bn_updates(&mut self, updates: &[(String, crate::tensor::BatchStats)]) {
        for (prefix, stats) in updates {
            let mut found = false;
            self.visit_bn_mut(&mut |name, bn| {
                if name == prefix {
                    bn.absorb(stats);
                    found = true;
                }
            });
            debug_assert!(found, "unknown normalization layer {}", prefix);
        }
    }

    fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&str, &mut BatchNorm)) {
        if let Encoder::Image { convs, .. } = &mut self.encoder {
            for (i, c) in convs.iter_mut().enumerate() {
                if let Some(bn) = &mut c.bn {
                    f(&format!("H/{}", i), bn);
                }
            }
        }
        if let Generator::Image { deconvs, .. } = &mut self.generator {
            for (i, c) in deconvs.iter_mut().enumerate() {
                if let Some(bn) = &mut c.bn {
                    f(&format!("G/{}", i), bn);
                }
            }
        }
    }

    /// Serializes parameters, normalization state and architecture
    /// metadata into checkpoint tensors.
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut map = BTreeMap::new();
        self.for_each_param(&mut |name, t, _| {
            map.insert(name, t.detached());
        });
        map.insert("meta/arch".to_string(), Tensor::scalar(self.arch.code()).expect("finite"));
        map.insert("meta/zdim".to_string(), Tensor::scalar(self.zdim as f64).expect("finite"));
        map
    }

    /// Rebuilds a bundle from checkpoint tensors, validating every shape
    /// against the architecture descriptor.
    pub fn from_tensors(map: &BTreeMap<String, Tensor>) -> Result<Self, CheckpointError> {
        let arch_t = map.get("meta/arch").ok_or_else(|| CheckpointError::MissingTensor("meta/arch".into()))?;
        let zdim_t = map.get("meta/zdim").ok_or_else(|| CheckpointError::MissingTensor("meta/zdim".into()))?;
        let arch = ArchKind::from_code(arch_t.item())?;
        let zdim = zdim_t.item() as usize;
        if zdim == 0 {
            return Err(CheckpointError::Malformed("zdim must be positive".into()));
        }
        // shapes come from the descriptor; contents from the checkpoint
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut bundle = ModelBundle::init(arch, zdim, 0.1, &mut rng);
        let mut err = None;
        bundle.for_each_param_mut(&mut |name, t, _| {
            if err.is_some() {
                return;
            }
            match map.get(&name) {
                Some(saved) if saved.shape() == t.shape() => *t = saved.detached(),
                Some(saved) => {
                    err = Some(CheckpointError::Malformed(format!(
                        "tensor {} has shape {:?}, expected {:?}",
                        name,
                        saved.shape(),
                        t.shape()
                    )))
                }
                None => err = Some(CheckpointError::MissingTensor(name)),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(bundle),
        }
    }
}

fn expect_toy_input(x: &Tensor) -> Result<(), TensorError> {
    match x.shape() {
        [1] => Ok(()),
        [_, 1] => Ok(()),
        s => Err(TensorError::ShapeMismatch {
            op: "encode",
            detail: format!("toy input must be [1] or [B,1], got {:?}", s),
        }),
    }
}

fn expect_image_input(x: &Tensor) -> Result<usize, TensorError> {
    match x.shape() {
        [b, 1, h, w] if *h == IMAGE_SIDE && *w == IMAGE_SIDE => Ok(*b),
        s => Err(TensorError::ShapeMismatch {
            op: "encode",
            detail: format!("image input must be [B,1,32,32], got {:?}", s),
        }),
    }
}

/// Concatenates along the feature axis: axis 0 for vectors, axis 1 for
/// row-batched matrices.
pub fn concat_features(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    match (a.shape().len(), b.shape().len()) {
        (1, 1) => tape.concat(a, b, 0),
        (2, 2) => tape.concat(a, b, 1),
        _ => Err(TensorError::ShapeMismatch {
            op: "concat",
            detail: format!("feature concat of {:?} and {:?}", a.shape(), b.shape()),
        }),
    }
}

fn split_heads(tape: &mut Tape, out: &Tensor, zdim: usize) -> Result<ZNetOutput, TensorError> {
    // Select the first zdim columns (raw next latent) and the last column
    // (momentum, through softplus) with constant masks.
    let (rows, cols) = match out.shape() {
        [c] => (1usize, *c),
        [r, c] => (*r, *c),
        s => {
            return Err(TensorError::ShapeMismatch {
                op: "znet",
                detail: format!("head shape {:?}", s),
            })
        }
    };
    if cols != zdim + 1 {
        return Err(TensorError::ShapeMismatch {
            op: "znet",
            detail: format!("{} columns vs zdim {}", cols, zdim),
        });
    }
    let _ = rows;
    // [cols, zdim] and [cols, 1] selection matrices
    let mut sel_raw = vec![0.0; cols * zdim];
    for i in 0..zdim {
        sel_raw[i * zdim + i] = 1.0;
    }
    let sel_raw = Tensor::new(vec![cols, zdim], sel_raw).expect("finite");
    let mut sel_rho = vec![0.0; cols];
    sel_rho[cols - 1] = 1.0;
    let sel_rho = Tensor::new(vec![cols, 1], sel_rho).expect("finite");
    let next_raw = tape.matmul(out, &sel_raw)?;
    let rho_lin = tape.matmul(out, &sel_rho)?;
    let rho = tape.softplus(&rho_lin)?;
    Ok(ZNetOutput { next_raw, rho })
}

fn check_unit_rows(z: &Tensor) -> Result<(), TensorError> {
    let rows: Box<dyn Iterator<Item = &[f64]>> = match z.shape() {
        [_] => Box::new(std::iter::once(z.data())),
        [_, d] => Box::new(z.data().chunks(*d)),
        s => {
            return Err(TensorError::ShapeMismatch {
                op: "generate",
                detail: format!("latent shape {:?}", s),
            })
        }
    };
    for row in rows {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(TensorError::Degenerate {
                op: "generate",
                detail: format!("latent norm {} is not 1", norm),
            });
        }
    }
    Ok(())
}
