//! Feature-pyramid fusion to a uniform spatial grid, plus the lightweight
//! regression heads: MLP, attention head, and deep ensembling.

use crate::error::{Error, Result};
use crate::nn::{resize_to, AttentionLayer, BoundAttention, BoundConv2d, BoundLinear, Conv2dLayer, LinearLayer, ResizeMode};
use crate::tensor::{Tape, Tensor, Value};
use rand::Rng;

/// Multi-resolution fusion geometry. Every fused output has spatial size
/// exactly `target × target`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidConfig {
    pub resolutions: Vec<usize>,
    pub target: usize,
    pub channels: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            resolutions: vec![320, 160, 80],
            target: 14,
            channels: 4,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() || self.target == 0 || self.channels == 0 {
            return Err(Error::Config("pyramid config must list resolutions and positive sizes".into()));
        }
        let mut sorted = self.resolutions.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.resolutions.len() {
            return Err(Error::Config(format!(
                "pyramid resolutions must be distinct, got {:?}",
                self.resolutions
            )));
        }
        Ok(())
    }
}

/// Per-level 5×5 conv, resize to the target grid, then an elementwise sum.
/// Levels are matched to their configured resolution by spatial size and
/// summed in descending-resolution order, so reordering the inputs cannot
/// change the result.
#[derive(Debug, Clone)]
pub struct FpnFuse {
    cfg: PyramidConfig,
    convs: Vec<Conv2dLayer>, // aligned with cfg.resolutions
}

pub struct BoundFpn {
    cfg: PyramidConfig,
    convs: Vec<BoundConv2d>,
}

impl FpnFuse {
    /// `in_channels[i]` is the channel count of the level at
    /// `cfg.resolutions[i]`; each level is convolved to `cfg.channels`.
    pub fn seeded<R: Rng>(cfg: PyramidConfig, in_channels: &[usize], rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if in_channels.len() != cfg.resolutions.len() {
            return Err(Error::Config(format!(
                "{} input channel counts for {} resolutions",
                in_channels.len(),
                cfg.resolutions.len()
            )));
        }
        let convs = in_channels
            .iter()
            .map(|&c| Conv2dLayer::seeded(c, cfg.channels, rng))
            .collect();
        Ok(FpnFuse { cfg, convs })
    }

    pub fn config(&self) -> &PyramidConfig {
        &self.cfg
    }

    pub fn convs_mut(&mut self) -> &mut [Conv2dLayer] {
        &mut self.convs
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundFpn {
        BoundFpn {
            cfg: self.cfg.clone(),
            convs: self.convs.iter().map(|c| c.bind(tape)).collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, levels: &[Value]) -> Result<Value> {
        self.bind(tape).forward(tape, levels)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for c in &mut self.convs {
            c.collect_params(out);
        }
    }
}

impl BoundFpn {
    pub fn forward(&self, tape: &mut Tape, levels: &[Value]) -> Result<Value> {
        if levels.len() != self.cfg.resolutions.len() {
            return Err(Error::Config(format!(
                "{} levels for {} configured resolutions",
                levels.len(),
                self.cfg.resolutions.len()
            )));
        }
        // Match each configured resolution to the level with that spatial
        // size; fusion then runs in config order regardless of input order.
        let mut slots: Vec<Option<Value>> = vec![None; self.cfg.resolutions.len()];
        for &level in levels {
            let s = tape.shape(level).to_vec();
            if s.len() != 4 || s[2] != s[3] {
                return Err(Error::Config(format!("pyramid level must be square [b,c,r,r], got {s:?}")));
            }
            let Some(idx) = self.cfg.resolutions.iter().position(|&r| r == s[2]) else {
                return Err(Error::Config(format!(
                    "level size {} not in configured resolutions {:?}",
                    s[2], self.cfg.resolutions
                )));
            };
            if slots[idx].is_some() {
                return Err(Error::Config(format!("duplicate level at resolution {}", s[2])));
            }
            slots[idx] = Some(level);
        }
        let mut acc: Option<Value> = None;
        for (idx, slot) in slots.iter().enumerate() {
            let level = slot.expect("all slots filled");
            let conv = self.convs[idx].forward(tape, level)?;
            let resized = resize_to(tape, conv, self.cfg.target, self.cfg.target, ResizeMode::Bilinear)?;
            acc = Some(match acc {
                None => resized,
                Some(a) => tape.add(a, resized)?,
            });
        }
        Ok(acc.expect("validated non-empty"))
    }

    pub fn collect_values(&self, out: &mut Vec<Value>) {
        for c in &self.convs {
            c.collect_values(out);
        }
    }
}

// ── regression heads ───────────────────────────────────────────────────

/// Two hidden relu layers and a linear output; `out_dim = 1` for plain
/// regression or `B` logits in encoding mode.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub l1: LinearLayer,
    pub l2: LinearLayer,
    pub out: LinearLayer,
}

pub struct BoundMlp {
    l1: BoundLinear,
    l2: BoundLinear,
    out: BoundLinear,
}

impl MlpHead {
    pub fn seeded<R: Rng>(in_dim: usize, hidden: (usize, usize), out_dim: usize, rng: &mut R) -> Self {
        MlpHead {
            l1: LinearLayer::seeded(in_dim, hidden.0, rng),
            l2: LinearLayer::seeded(hidden.0, hidden.1, rng),
            out: LinearLayer::seeded(hidden.1, out_dim, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.l1.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.out.out_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            l1: self.l1.bind(tape),
            l2: self.l2.bind(tape),
            out: self.out.bind(tape),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        self.bind(tape).forward(tape, x)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.l1.collect_params(out);
        self.l2.collect_params(out);
        self.out.collect_params(out);
    }

    /// Hidden-layer weight matrices, the ones the orthogonality penalty and
    /// OWM projection act on.
    pub fn hidden_weight_dims(&self) -> Vec<usize> {
        vec![self.l1.in_dim(), self.l2.in_dim()]
    }
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        let h = self.l1.forward(tape, x)?;
        let h = tape.relu(h);
        let h = self.l2.forward(tape, h)?;
        let h = tape.relu(h);
        self.out.forward(tape, h)
    }

    // Per-layer forwards so callers can observe each layer's input
    // activations (the OWM projector records them).
    pub fn forward_l1(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        self.l1.forward(tape, x)
    }

    pub fn forward_l2(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        self.l2.forward(tape, x)
    }

    pub fn forward_out(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        self.out.forward(tape, x)
    }

    pub fn collect_values(&self, out: &mut Vec<Value>) {
        self.l1.collect_values(out);
        self.l2.collect_values(out);
        self.out.collect_values(out);
    }

    pub fn hidden_weight_values(&self) -> Vec<Value> {
        vec![self.l1.weight, self.l2.weight]
    }
}

/// Attention over tokens, mean-pooled, then a linear output.
#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub attn: AttentionLayer,
    pub out: LinearLayer,
}

pub struct BoundAttentionHead {
    attn: BoundAttention,
    out: BoundLinear,
}

impl AttentionHead {
    pub fn seeded<R: Rng>(token_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        AttentionHead {
            attn: AttentionLayer::seeded(token_dim, rng),
            out: LinearLayer::seeded(token_dim, out_dim, rng),
        }
    }

    pub fn token_dim(&self) -> usize {
        self.attn.dim()
    }

    pub fn out_dim(&self) -> usize {
        self.out.out_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAttentionHead {
        BoundAttentionHead {
            attn: self.attn.bind(tape),
            out: self.out.bind(tape),
        }
    }

    pub fn forward(&self, tape: &mut Tape, tokens: Value) -> Result<Value> {
        self.bind(tape).forward(tape, tokens)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.attn.collect_params(out);
        self.out.collect_params(out);
    }
}

impl BoundAttentionHead {
    pub fn forward(&self, tape: &mut Tape, tokens: Value) -> Result<Value> {
        let attended = self.attn.forward(tape, tokens)?;
        let pooled = tape.mean(attended, Some(1))?;
        self.out.forward(tape, pooled)
    }

    pub fn collect_values(&self, out: &mut Vec<Value>) {
        self.attn.collect_values(out);
        self.out.collect_values(out);
    }
}

// ── deep ensemble ──────────────────────────────────────────────────────

/// K independently seeded members aggregated by the arithmetic mean.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnsembleConfig {
    pub seeds: Vec<u64>,
}

impl EnsembleConfig {
    pub fn new(seeds: Vec<u64>) -> Result<Self> {
        if seeds.len() < 2 {
            return Err(Error::Config(format!(
                "ensemble needs at least 2 members, got {}",
                seeds.len()
            )));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(Error::Config(format!("ensemble member seeds must be distinct: {seeds:?}")));
        }
        Ok(EnsembleConfig { seeds })
    }

    /// `base_seed + 0..k`, the default member-seed layout.
    pub fn offsets(base_seed: u64, k: usize) -> Result<Self> {
        EnsembleConfig::new((0..k as u64).map(|i| base_seed.wrapping_add(i)).collect())
    }

    pub fn k(&self) -> usize {
        self.seeds.len()
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleOutcome {
    /// Arithmetic mean over members, in fixed member-index order.
    pub mean: Vec<f64>,
    pub members: Vec<Vec<f64>>,
    /// Population variance across members, per prediction.
    pub variance: Vec<f64>,
}

/// Trains one member per seed (in fixed member-index order) and aggregates
/// the predictions each member produces on the shared evaluation inputs.
pub fn ensemble_train_predict<F>(cfg: &EnsembleConfig, mut train_member: F) -> Result<EnsembleOutcome>
where
    F: FnMut(u64) -> Result<Vec<f64>>,
{
    let mut members = Vec::with_capacity(cfg.k());
    for &seed in &cfg.seeds {
        let preds = train_member(seed)?;
        if let Some(first) = members.first() {
            let first: &Vec<f64> = first;
            if first.len() != preds.len() {
                return Err(Error::Contract(format!(
                    "ensemble members disagree on prediction count: {} vs {}",
                    first.len(),
                    preds.len()
                )));
            }
        }
        members.push(preds);
    }
    let n = members[0].len();
    let k = cfg.k() as f64;
    let mut mean = vec![0.0; n];
    for m in &members {
        for (slot, &v) in mean.iter_mut().zip(m) {
            *slot += v;
        }
    }
    for slot in &mut mean {
        *slot /= k;
    }
    let mut variance = vec![0.0; n];
    for m in &members {
        for ((slot, &v), &mu) in variance.iter_mut().zip(m).zip(&mean) {
            *slot += (v - mu) * (v - mu);
        }
    }
    for slot in &mut variance {
        *slot /= k;
    }
    Ok(EnsembleOutcome { mean, members, variance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn fused_for(resolutions: Vec<usize>, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = PyramidConfig {
            resolutions: resolutions.clone(),
            target: 14,
            channels: 2,
        };
        let fpn = FpnFuse::seeded(cfg, &vec![1; resolutions.len()], &mut rng).unwrap();
        let mut tape = Tape::new();
        let levels: Vec<Value> = resolutions
            .iter()
            .map(|&r| tape.constant(rand_tensor(vec![1, 1, r, r], &mut rng)))
            .collect();
        let out = fpn.forward(&mut tape, &levels).unwrap();
        assert_eq!(tape.shape(out), &[1, 2, 14, 14]);
        tape.data(out).to_vec()
    }

    #[test]
    fn fuses_paper_resolutions_to_fourteen() {
        fused_for(vec![320, 160, 80], 1);
    }

    #[test]
    fn fuses_alternate_resolutions_to_fourteen() {
        fused_for(vec![224, 112, 56], 2);
    }

    #[test]
    fn single_level_delta_kernel_is_identity() {
        let cfg = PyramidConfig {
            resolutions: vec![14],
            target: 14,
            channels: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut fpn = FpnFuse::seeded(cfg, &[1], &mut rng).unwrap();
        fpn.convs_mut()[0] = Conv2dLayer::delta_identity();
        let mut tape = Tape::new();
        let level = tape.constant(rand_tensor(vec![2, 1, 14, 14], &mut rng));
        let out = fpn.forward(&mut tape, &[level]).unwrap();
        assert_eq!(tape.data(out), tape.data(level));
    }

    #[test]
    fn level_permutation_is_bitwise_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = PyramidConfig {
            resolutions: vec![32, 16, 8],
            target: 14,
            channels: 2,
        };
        let fpn = FpnFuse::seeded(cfg, &[1, 1, 1], &mut rng).unwrap();
        let tensors: Vec<Tensor> = [32, 16, 8]
            .iter()
            .map(|&r| rand_tensor(vec![1, 1, r, r], &mut rng))
            .collect();
        let run = |order: [usize; 3]| -> Vec<u64> {
            let mut tape = Tape::new();
            let levels: Vec<Value> = order.iter().map(|&i| tape.constant(tensors[i].clone())).collect();
            let out = fpn.forward(&mut tape, &levels).unwrap();
            tape.data(out).iter().map(|v| v.to_bits()).collect()
        };
        let base = run([0, 1, 2]);
        for order in [[2, 1, 0], [1, 0, 2], [2, 0, 1], [0, 2, 1], [1, 2, 0]] {
            assert_eq!(run(order), base, "order {order:?} changed the fusion");
        }
    }

    #[test]
    fn level_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = PyramidConfig {
            resolutions: vec![16, 8],
            target: 14,
            channels: 2,
        };
        let fpn = FpnFuse::seeded(cfg, &[1, 1], &mut rng).unwrap();
        let mut tape = Tape::new();
        let l16 = tape.constant(rand_tensor(vec![1, 1, 16, 16], &mut rng));
        let l9 = tape.constant(rand_tensor(vec![1, 1, 9, 9], &mut rng));
        assert!(matches!(fpn.forward(&mut tape, &[l16]), Err(Error::Config(_))));
        assert!(matches!(fpn.forward(&mut tape, &[l16, l9]), Err(Error::Config(_))));
        assert!(matches!(fpn.forward(&mut tape, &[l16, l16]), Err(Error::Config(_))));
    }

    #[test]
    fn fpn_gradients_pass_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = PyramidConfig {
            resolutions: vec![8, 16],
            target: 4,
            channels: 1,
        };
        let fpn = FpnFuse::seeded(cfg, &[1, 1], &mut rng).unwrap();
        let a = rand_tensor(vec![1, 1, 8, 8], &mut rng);
        let b = rand_tensor(vec![1, 1, 16, 16], &mut rng);
        let err = crate::tensor::grad_check(
            |tape, vars| {
                let out = fpn.forward(tape, &[vars[0], vars[1]])?;
                let sq = tape.mul(out, out)?;
                tape.mean(sq, None)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "fpn grad err {err}");
    }

    #[test]
    fn mlp_zero_output_layer_predicts_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut head = MlpHead::seeded(6, (8, 4), 1, &mut rng);
        head.out.weight = Tensor::zeros(vec![1, 4]).with_requires_grad(true);
        head.out.bias = Tensor::new(vec![1], vec![2.5]).unwrap().with_requires_grad(true);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(vec![3, 6], &mut rng));
        let y = head.forward(&mut tape, x).unwrap();
        assert_eq!(tape.data(y), &[2.5, 2.5, 2.5]);
    }

    #[test]
    fn mlp_encoding_mode_emits_codec_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let head = MlpHead::seeded(10, (12, 6), 16, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(vec![3, 10], &mut rng));
        let y = head.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[3, 16]);
    }

    #[test]
    fn mlp_gradients_pass_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = MlpHead::seeded(5, (6, 4), 1, &mut rng);
        let x = rand_tensor(vec![2, 5], &mut rng);
        let err = crate::tensor::grad_check(
            |tape, vars| {
                let y = head.forward(tape, vars[0])?;
                let sq = tape.mul(y, y)?;
                tape.mean(sq, None)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "mlp grad err {err}");
    }

    #[test]
    fn attention_head_single_token_reduces_to_linear_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let head = AttentionHead::seeded(4, 1, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(vec![2, 1, 4], &mut rng));
        let out = head.forward(&mut tape, x).unwrap();

        // With one token, pooling is the identity: out = linear(v_proj(x)).
        let flat = tape.reshape(x, vec![2, 4]).unwrap();
        let vproj = head.attn.proj_v.forward(&mut tape, flat).unwrap();
        let expect = head.out.forward(&mut tape, vproj).unwrap();
        for (a, b) in tape.data(out).iter().zip(tape.data(expect)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_head_pooled_output_is_token_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let head = AttentionHead::seeded(3, 2, &mut rng);
        let tokens: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let run = |order: &[usize]| -> Vec<f64> {
            let data: Vec<f64> = order.iter().flat_map(|&i| tokens[i].clone()).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![1, 4, 3], data).unwrap());
            let out = head.forward(&mut tape, x).unwrap();
            tape.data(out).to_vec()
        };
        let base = run(&[0, 1, 2, 3]);
        for order in [[3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1]] {
            let perm = run(&order);
            for (a, b) in base.iter().zip(&perm) {
                assert!((a - b).abs() < 1e-12, "permutation changed pooled output");
            }
        }
    }

    #[test]
    fn attention_head_gradients_pass_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let head = AttentionHead::seeded(4, 1, &mut rng);
        let x = rand_tensor(vec![1, 3, 4], &mut rng);
        let err = crate::tensor::grad_check(
            |tape, vars| {
                let y = head.forward(tape, vars[0])?;
                let sq = tape.mul(y, y)?;
                tape.mean(sq, None)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "attention head grad err {err}");
    }

    #[test]
    fn ensemble_rejects_bad_configs() {
        assert!(matches!(EnsembleConfig::new(vec![1]), Err(Error::Config(_))));
        assert!(matches!(EnsembleConfig::new(vec![1, 1]), Err(Error::Config(_))));
        assert!(EnsembleConfig::offsets(7, 5).is_ok());
    }

    #[test]
    fn ensemble_identical_members_have_zero_variance() {
        let cfg = EnsembleConfig::new(vec![1, 2, 3]).unwrap();
        // Every member ignores its seed: forced-identical override.
        let out = ensemble_train_predict(&cfg, |_seed| Ok(vec![1.0, -2.0, 0.5])).unwrap();
        assert_eq!(out.mean, vec![1.0, -2.0, 0.5]);
        assert!(out.variance.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ensemble_mean_mse_never_exceeds_mean_member_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for k in [2usize, 5] {
            for _ in 0..20 {
                let n = rng.random_range(1..12);
                let target: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                let cfg = EnsembleConfig::offsets(rng.random_range(0..1000), k).unwrap();
                let out = ensemble_train_predict(&cfg, |seed| {
                    let mut member_rng = ChaCha8Rng::seed_from_u64(seed);
                    Ok((0..n).map(|_| member_rng.random_range(-2.0..2.0)).collect())
                })
                .unwrap();
                let mse = |pred: &[f64]| -> f64 {
                    pred.iter().zip(&target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n as f64
                };
                let mean_mse = mse(&out.mean);
                let avg_member: f64 = out.members.iter().map(|m| mse(m)).sum::<f64>() / k as f64;
                assert!(
                    mean_mse <= avg_member + 1e-12,
                    "Jensen violated: {mean_mse} > {avg_member}"
                );
            }
        }
    }
}
