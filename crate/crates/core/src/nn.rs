//! Neural building blocks: linear and 5×5 convolution layers, spatial
//! resize, single-head scaled dot-product attention, and a toy frozen
//! backbone standing in for a pretrained feature extractor.
//!
//! Layers own their parameter tensors between steps. `bind` clones the
//! parameters onto a tape for one forward/backward pass; gradients are then
//! read back off the tape in the same order `collect_params` yields them.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Value};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    Nearest,
    Bilinear,
}

/// Resizes a `[b,c,H,W]` map to exactly `th × tw`. Nearest is exact value
/// replication; bilinear is differentiable.
pub fn resize_to(tape: &mut Tape, x: Value, th: usize, tw: usize, mode: ResizeMode) -> Result<Value> {
    tape.resize(x, th, tw, mode == ResizeMode::Bilinear)
}

fn init_uniform<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, bound, rng).with_requires_grad(true)
}

// ── linear ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Tensor, // [out × in]
    pub bias: Tensor,   // [out]
    frozen: bool,
}

pub struct BoundLinear {
    pub weight: Value,
    pub bias: Value,
}

impl LinearLayer {
    pub fn seeded<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        LinearLayer {
            weight: init_uniform(vec![out_dim, in_dim], in_dim, rng),
            bias: init_uniform(vec![out_dim], in_dim, rng),
            frozen: false,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.weight.set_requires_grad(!frozen);
        self.bias.set_requires_grad(!frozen);
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }

    /// One-shot forward for eval paths that do not need the bound handles.
    pub fn forward(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        self.bind(tape).forward(tape, x)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

impl BoundLinear {
    /// `x·Wᵀ + b` for `x: [batch × in]`.
    pub fn forward(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != tape.shape(self.weight)[1] {
            return Err(Error::dimension("linear_forward", tape.shape(x), tape.shape(self.weight)));
        }
        let wt = tape.transpose2(self.weight)?;
        let xw = tape.matmul(x, wt)?;
        tape.add_row_bias(xw, self.bias)
    }

    pub fn collect_values(&self, out: &mut Vec<Value>) {
        out.push(self.weight);
        out.push(self.bias);
    }
}

// ── 5×5 convolution ────────────────────────────────────────────────────

/// 5×5 kernel, stride 1, padding 2: spatial size is preserved,
/// `(H + 4 − 5) + 1 = H`.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub kernel: Tensor, // [outC × inC × 5 × 5]
    pub bias: Tensor,   // [outC]
    frozen: bool,
}

pub struct BoundConv2d {
    pub kernel: Value,
    pub bias: Value,
}

impl Conv2dLayer {
    pub fn seeded<R: Rng>(in_c: usize, out_c: usize, rng: &mut R) -> Self {
        let fan_in = in_c * 25;
        Conv2dLayer {
            kernel: init_uniform(vec![out_c, in_c, 5, 5], fan_in, rng),
            bias: init_uniform(vec![out_c], fan_in, rng),
            frozen: false,
        }
    }

    /// Single-channel identity: centre tap 1, all other taps and bias 0.
    pub fn delta_identity() -> Self {
        let mut kernel = vec![0.0; 25];
        kernel[2 * 5 + 2] = 1.0;
        Conv2dLayer {
            kernel: Tensor::new(vec![1, 1, 5, 5], kernel).unwrap().with_requires_grad(true),
            bias: Tensor::new(vec![1], vec![0.0]).unwrap().with_requires_grad(true),
            frozen: false,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.kernel.set_requires_grad(!frozen);
        self.bias.set_requires_grad(!frozen);
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundConv2d {
        BoundConv2d {
            kernel: tape.leaf(self.kernel.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        self.bind(tape).forward(tape, x)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.kernel);
        out.push(&mut self.bias);
    }
}

impl BoundConv2d {
    pub fn forward(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        tape.conv5x5(x, self.kernel, self.bias)
    }

    pub fn collect_values(&self, out: &mut Vec<Value>) {
        out.push(self.kernel);
        out.push(self.bias);
    }
}

// ── attention ──────────────────────────────────────────────────────────

/// Single-head scaled dot-product attention with learned q/k/v projections:
/// `softmax(QKᵀ/√d)·V` over tokens `[batch × T × d]`.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub proj_q: LinearLayer,
    pub proj_k: LinearLayer,
    pub proj_v: LinearLayer,
}

pub struct BoundAttention {
    q: BoundLinear,
    k: BoundLinear,
    v: BoundLinear,
    dim: usize,
}

impl AttentionLayer {
    pub fn seeded<R: Rng>(dim: usize, rng: &mut R) -> Self {
        AttentionLayer {
            proj_q: LinearLayer::seeded(dim, dim, rng),
            proj_k: LinearLayer::seeded(dim, dim, rng),
            proj_v: LinearLayer::seeded(dim, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.proj_q.in_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAttention {
        BoundAttention {
            q: self.proj_q.bind(tape),
            k: self.proj_k.bind(tape),
            v: self.proj_v.bind(tape),
            dim: self.dim(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        self.bind(tape).forward(tape, x)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.proj_q.collect_params(out);
        self.proj_k.collect_params(out);
        self.proj_v.collect_params(out);
    }
}

impl BoundAttention {
    pub fn forward(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        Ok(self.forward_with_weights(tape, x)?.0)
    }

    /// Also returns the `[batch × T × T]` attention weights, which tests use
    /// to verify the uniform-weight symmetry case.
    pub fn forward_with_weights(&self, tape: &mut Tape, x: Value) -> Result<(Value, Value)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::dimension("attention_forward", &s, self.dim));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let flat = tape.reshape(x, vec![b * t, d])?;
        let q = self.q.forward(tape, flat)?;
        let k = self.k.forward(tape, flat)?;
        let v = self.v.forward(tape, flat)?;
        let q = tape.reshape(q, vec![b, t, d])?;
        let k = tape.reshape(k, vec![b, t, d])?;
        let v = tape.reshape(v, vec![b, t, d])?;
        let kt = tape.transpose_last2(k)?;
        let scores = tape.bmm(q, kt)?;
        let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = tape.softmax(scaled, 2, 1.0)?;
        let out = tape.bmm(weights, v)?;
        Ok((out, weights))
    }

    pub fn collect_values(&self, out: &mut Vec<Value>) {
        self.q.collect_values(out);
        self.k.collect_values(out);
        self.v.collect_values(out);
    }
}

// ── toy backbone ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
enum Stages {
    /// Multi-scale random Fourier lift over flat feature vectors: cosine of
    /// random projections whose rows span a geometric range of frequencies.
    /// Fine-grained structure in the inputs stays linearly separable after
    /// the frozen lift.
    Dense { l1: LinearLayer },
    /// 5×5 conv stages, each followed by relu and 2×2 average pooling.
    Conv { convs: Vec<Conv2dLayer>, sizes: Vec<usize> },
}

/// Small deterministic feature extractor emitting a flat embedding plus
/// (on the conv path) one feature map per stage. Stands in for a pretrained
/// backbone: it is usually constructed frozen, so only heads train.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    stages: Stages,
    proj: LinearLayer,
    frozen: bool,
}

pub struct BoundBackbone {
    stages: BoundStages,
    proj: BoundLinear,
}

enum BoundStages {
    Dense { l1: BoundLinear },
    Conv { convs: Vec<BoundConv2d>, sizes: Vec<usize> },
}

impl ToyBackbone {
    /// Dense variant for flat `[batch × in_dim]` features.
    pub fn dense<R: Rng>(in_dim: usize, hidden: usize, embed_dim: usize, rng: &mut R) -> Self {
        let mut l1 = LinearLayer::seeded(in_dim, hidden, rng);
        // Spread the projection rows over frequencies 2^0..2^6 and give each
        // unit a random phase, so the cosine lift carries both coarse and
        // fine structure.
        for (row, chunk) in l1.weight.data_mut().chunks_mut(in_dim).enumerate() {
            let scale = (1u64 << (row % 7)) as f64;
            for w in chunk {
                *w *= scale;
            }
        }
        for b in l1.bias.data_mut() {
            *b = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        }
        ToyBackbone {
            stages: Stages::Dense { l1 },
            proj: LinearLayer::seeded(hidden, embed_dim, rng),
            frozen: false,
        }
    }

    /// Conv variant for `[batch × in_c × H × W]` images with `H = W` drawn
    /// from `sizes`; three conv stages, each halving the spatial size.
    pub fn conv<R: Rng>(
        in_c: usize,
        stage_c: usize,
        embed_dim: usize,
        sizes: Vec<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.is_empty() || sizes.iter().any(|&s| s == 0 || s % 8 != 0) {
            return Err(Error::Config(format!(
                "backbone input sizes must be positive multiples of 8, got {sizes:?}"
            )));
        }
        let convs = vec![
            Conv2dLayer::seeded(in_c, stage_c, rng),
            Conv2dLayer::seeded(stage_c, stage_c, rng),
            Conv2dLayer::seeded(stage_c, stage_c, rng),
        ];
        Ok(ToyBackbone {
            stages: Stages::Conv { convs, sizes },
            proj: LinearLayer::seeded(stage_c, embed_dim, rng),
            frozen: false,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.out_dim()
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        match &mut self.stages {
            Stages::Dense { l1 } => l1.set_frozen(frozen),
            Stages::Conv { convs, .. } => {
                for c in convs {
                    c.set_frozen(frozen);
                }
            }
        }
        self.proj.set_frozen(frozen);
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundBackbone {
        BoundBackbone {
            stages: match &self.stages {
                Stages::Dense { l1 } => BoundStages::Dense { l1: l1.bind(tape) },
                Stages::Conv { convs, sizes } => BoundStages::Conv {
                    convs: convs.iter().map(|c| c.bind(tape)).collect(),
                    sizes: sizes.clone(),
                },
            },
            proj: self.proj.bind(tape),
        }
    }

    pub fn forward(&self, tape: &mut Tape, input: Value) -> Result<(Value, Vec<Value>)> {
        self.bind(tape).forward(tape, input)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        match &mut self.stages {
            Stages::Dense { l1 } => l1.collect_params(out),
            Stages::Conv { convs, .. } => {
                for c in convs {
                    c.collect_params(out);
                }
            }
        }
        self.proj.collect_params(out);
    }
}

impl BoundBackbone {
    /// Returns the flat embedding and the per-stage feature maps (empty on
    /// the dense path).
    pub fn forward(&self, tape: &mut Tape, input: Value) -> Result<(Value, Vec<Value>)> {
        match &self.stages {
            BoundStages::Dense { l1 } => {
                let h = l1.forward(tape, input)?;
                let h = tape.cos(h);
                let emb = self.proj.forward(tape, h)?;
                Ok((emb, Vec::new()))
            }
            BoundStages::Conv { convs, sizes } => {
                let s = tape.shape(input).to_vec();
                if s.len() != 4 || s[2] != s[3] || !sizes.contains(&s[2]) {
                    return Err(Error::Config(format!(
                        "unsupported backbone input size {s:?}, expected square {sizes:?}"
                    )));
                }
                let mut levels = Vec::new();
                let mut x = input;
                for conv in convs {
                    let c = conv.forward(tape, x)?;
                    let r = tape.relu(c);
                    x = tape.avg_pool2(r)?;
                    levels.push(x);
                }
                // Global spatial mean of the last map, then projection.
                let pooled_w = tape.mean(x, Some(3))?;
                let pooled = tape.mean(pooled_w, Some(2))?;
                let emb = self.proj.forward(tape, pooled)?;
                Ok((emb, levels))
            }
        }
    }

    pub fn collect_values(&self, out: &mut Vec<Value>) {
        match &self.stages {
            BoundStages::Dense { l1 } => l1.collect_values(out),
            BoundStages::Conv { convs, .. } => {
                for c in convs {
                    c.collect_values(out);
                }
            }
        }
        self.proj.collect_values(out);
    }
}
