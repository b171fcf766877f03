//! Config-driven training loop and the ablation sweeper.

use crate::codec::{BitCodec, DecodeMode};
use crate::data::{Dataset, SplitIndices, TaskName, TaskSpec};
use crate::error::{Error, Result};
use crate::loss::{bce_loss, focal_bce, focal_mse, mae_loss, mse_loss, soft_orthogonality_penalty, FocalConfig};
use crate::metrics::{metric_mae, metric_mse, metric_r2};
use crate::nn::ToyBackbone;
use crate::owm::{AdamConfig, AdamState, Projector};
use crate::pyramid::{ensemble_train_predict, AttentionHead, EnsembleConfig, FpnFuse, MlpHead, PyramidConfig};
use crate::tensor::{Tape, Tensor, Value};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Mlp,
    Attention,
    DeepEnsemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Mae,
    Bce,
    Focal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrMode {
    Owm,
    SoftPenalty,
    Both,
}

/// Declarative description of one run. Serialized as a flat JSON object;
/// defaults are the reference hyperparameters (lr 1e-3, batch 4, 20 epochs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskName,
    pub head: HeadKind,
    pub head_hidden: Vec<usize>,
    pub attention_tokens: usize,
    pub loss: LossKind,
    pub loss_gamma: f64,
    pub loss_alpha: f64,
    pub encoding_enabled: bool,
    pub encoding_bits: u32,
    pub encoding_decode_mode: DecodeMode,
    pub or_enabled: bool,
    pub or_mode: OrMode,
    pub or_alpha: f64,
    pub soft_orth_lambda: f64,
    pub fpn_enabled: bool,
    pub fpn_resolutions: Vec<usize>,
    pub freeze_backbone: bool,
    pub backbone_hidden: usize,
    pub backbone_embed: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ensemble_k: usize,
    pub seed: u64,
    pub synth_n: usize,
    pub synth_dim: usize,
    pub synth_noise: f64,
    pub data_features: Option<String>,
    pub data_targets: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskName::Mrd1,
            head: HeadKind::Mlp,
            head_hidden: vec![256, 64],
            attention_tokens: 4,
            loss: LossKind::Mse,
            loss_gamma: 0.0,
            loss_alpha: 1.0,
            encoding_enabled: false,
            encoding_bits: 16,
            encoding_decode_mode: DecodeMode::Expected,
            or_enabled: false,
            or_mode: OrMode::SoftPenalty,
            or_alpha: 1e-3,
            soft_orth_lambda: 1e-3,
            fpn_enabled: false,
            fpn_resolutions: vec![320, 160, 80],
            freeze_backbone: true,
            backbone_hidden: 64,
            backbone_embed: 64,
            lr: 1e-3,
            batch_size: 4,
            epochs: 20,
            ensemble_k: 5,
            seed: 0,
            synth_n: 2000,
            synth_dim: 32,
            synth_noise: 0.05,
            data_features: None,
            data_targets: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec::for_task(self.task)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss_gamma", self.loss_gamma),
            ("loss_alpha", self.loss_alpha),
            ("or_alpha", self.or_alpha),
            ("soft_orth_lambda", self.soft_orth_lambda),
            ("lr", self.lr),
            ("synth_noise", self.synth_noise),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite, got {v}")));
            }
        }
        if self.encoding_enabled {
            if !matches!(self.loss, LossKind::Bce | LossKind::Focal) {
                return Err(Error::Config(format!(
                    "encoding turns targets into per-bit labels; loss {:?} is invalid with it. \
                     Valid pairs: encoding on → {{bce, focal}}; encoding off → {{mse, mae, focal}}",
                    self.loss
                )));
            }
        } else if matches!(self.loss, LossKind::Bce) {
            return Err(Error::Config(
                "bce needs binary targets; enable encoding or pick one of {mse, mae, focal}".into(),
            ));
        }
        if self.loss_gamma < 0.0 {
            return Err(Error::Parameter(format!("loss_gamma must be ≥ 0, got {}", self.loss_gamma)));
        }
        if !(self.loss_alpha > 0.0 && self.loss_alpha <= 1.0) {
            return Err(Error::Parameter(format!("loss_alpha must be in (0,1], got {}", self.loss_alpha)));
        }
        if self.encoding_bits == 0 || self.encoding_bits > 52 {
            return Err(Error::Config(format!("encoding_bits must be in 1..=52, got {}", self.encoding_bits)));
        }
        if self.head_hidden.len() != 2 || self.head_hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config(format!("head_hidden must be two positive widths, got {:?}", self.head_hidden)));
        }
        if self.attention_tokens == 0 {
            return Err(Error::Config("attention_tokens must be ≥ 1".into()));
        }
        if matches!(self.head, HeadKind::Attention) && self.backbone_embed % self.attention_tokens != 0 {
            return Err(Error::Config(format!(
                "backbone_embed {} must split into attention_tokens {}",
                self.backbone_embed, self.attention_tokens
            )));
        }
        if self.or_enabled
            && matches!(self.or_mode, OrMode::Owm | OrMode::Both)
            && !matches!(self.head, HeadKind::Mlp | HeadKind::DeepEnsemble)
        {
            return Err(Error::Config(
                "owm projection is wired for the mlp head (deep_ensemble members are mlps); \
                 use or_mode = soft_penalty with other heads"
                    .into(),
            ));
        }
        if !(self.or_alpha > 0.0) {
            return Err(Error::Parameter(format!("or_alpha must be > 0, got {}", self.or_alpha)));
        }
        if self.soft_orth_lambda < 0.0 {
            return Err(Error::Parameter(format!(
                "soft_orth_lambda must be ≥ 0, got {}",
                self.soft_orth_lambda
            )));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(format!(
                "optimizer settings must be positive: lr {} batch {} epochs {}",
                self.lr, self.batch_size, self.epochs
            )));
        }
        if self.ensemble_k < 2 {
            return Err(Error::Config(format!("ensemble_k must be ≥ 2, got {}", self.ensemble_k)));
        }
        if self.synth_n == 0 || self.synth_dim == 0 {
            return Err(Error::Config("synth_n and synth_dim must be ≥ 1".into()));
        }
        if !(self.synth_noise >= 0.0) {
            return Err(Error::Config(format!("synth_noise must be ≥ 0, got {}", self.synth_noise)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
    pub r2_degenerate: bool,
    pub learning_curve: Vec<CurvePoint>,
}

// ── model ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
enum Head {
    Mlp(MlpHead),
    Attention { head: AttentionHead, tokens: usize },
}

/// One trained backbone+head pipeline; predictions are always in task units
/// (millimetres), decoded from bit probabilities when encoding is on.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    backbone: ToyBackbone,
    fpn: Option<FpnFuse>,
    head: Head,
    codec: Option<BitCodec>,
    decode_mode: DecodeMode,
}

impl TrainedModel {
    fn forward(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        let (emb, levels) = self.backbone.forward(tape, x)?;
        let head_in = match &self.fpn {
            Some(fpn) => {
                let fused = fpn.forward(tape, &levels)?;
                let s = tape.shape(fused).to_vec();
                tape.reshape(fused, vec![s[0], s[1] * s[2] * s[3]])?
            }
            None => emb,
        };
        match &self.head {
            Head::Mlp(h) => h.forward(tape, head_in),
            Head::Attention { head, tokens } => {
                let s = tape.shape(head_in).to_vec();
                let toks = tape.reshape(head_in, vec![s[0], *tokens, s[1] / *tokens])?;
                head.forward(tape, toks)
            }
        }
    }

    /// Millimetre predictions for a feature batch.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let out = self.forward(&mut tape, x)?;
        match &self.codec {
            None => Ok(tape.data(out).to_vec()),
            Some(codec) => {
                let probs = tape.sigmoid(out);
                let b = codec.bits as usize;
                tape.data(probs)
                    .chunks(b)
                    .map(|row| codec.decode_probabilistic(row, self.decode_mode))
                    .collect()
            }
        }
    }
}

/// Train result: a single model or a deep ensemble aggregated by mean.
#[derive(Debug, Clone)]
pub enum Model {
    Single(Box<TrainedModel>),
    Ensemble(Vec<TrainedModel>),
}

impl Model {
    pub fn predict(&self, features: &Tensor) -> Result<Vec<f64>> {
        match self {
            Model::Single(m) => m.predict(features),
            Model::Ensemble(members) => {
                let mut mean: Option<Vec<f64>> = None;
                for m in members {
                    let p = m.predict(features)?;
                    match &mut mean {
                        None => mean = Some(p),
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(p) {
                                *a += v;
                            }
                        }
                    }
                }
                let mut mean = mean.ok_or_else(|| Error::Contract("empty ensemble".into()))?;
                for v in &mut mean {
                    *v /= members.len() as f64;
                }
                Ok(mean)
            }
        }
    }
}

// ── training ───────────────────────────────────────────────────────────

struct BatchLoss<'a> {
    cfg: &'a ExperimentConfig,
    codec: Option<BitCodec>,
}

impl BatchLoss<'_> {
    fn build(&self, tape: &mut Tape, out: Value, targets: &[f64]) -> Result<Value> {
        match &self.codec {
            None => {
                let y = tape.constant(Tensor::new(vec![targets.len(), 1], targets.to_vec())?);
                match self.cfg.loss {
                    LossKind::Mse => mse_loss(tape, out, y),
                    LossKind::Mae => mae_loss(tape, out, y),
                    LossKind::Focal => {
                        focal_mse(tape, out, y, FocalConfig::new(self.cfg.loss_gamma, self.cfg.loss_alpha)?)
                    }
                    LossKind::Bce => unreachable!("validated"),
                }
            }
            Some(codec) => {
                let b = codec.bits as usize;
                let mut bits = Vec::with_capacity(targets.len() * b);
                for &t in targets {
                    bits.extend(codec.encode(t)?.into_iter().map(f64::from));
                }
                let y = tape.constant(Tensor::new(vec![targets.len(), b], bits)?);
                let probs = tape.sigmoid(out);
                match self.cfg.loss {
                    LossKind::Bce => bce_loss(tape, probs, y),
                    LossKind::Focal => {
                        focal_bce(tape, probs, y, FocalConfig::new(self.cfg.loss_gamma, self.cfg.loss_alpha)?)
                    }
                    _ => unreachable!("validated"),
                }
            }
        }
    }
}

fn build_model(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<TrainedModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feature_shape = data.features.shape().to_vec();
    let (backbone, fpn, head_in) = match feature_shape.len() {
        2 => {
            if cfg.fpn_enabled {
                return Err(Error::Config(
                    "fpn needs image features [n,c,h,w]; this dataset has flat features".into(),
                ));
            }
            let mut b = ToyBackbone::dense(feature_shape[1], cfg.backbone_hidden, cfg.backbone_embed, &mut rng);
            b.set_frozen(cfg.freeze_backbone);
            (b, None, cfg.backbone_embed)
        }
        4 => {
            if feature_shape[2] != feature_shape[3] {
                return Err(Error::Config(format!("image features must be square, got {feature_shape:?}")));
            }
            let size = feature_shape[2];
            let stage_c = 4;
            let mut b = ToyBackbone::conv(feature_shape[1], stage_c, cfg.backbone_embed, vec![size], &mut rng)?;
            b.set_frozen(cfg.freeze_backbone);
            if cfg.fpn_enabled {
                let level_sizes = vec![size / 2, size / 4, size / 8];
                if !cfg.fpn_resolutions.is_empty() && cfg.fpn_resolutions != level_sizes {
                    return Err(Error::Config(format!(
                        "fpn_resolutions {:?} do not match backbone level sizes {:?}",
                        cfg.fpn_resolutions, level_sizes
                    )));
                }
                let pyramid = PyramidConfig {
                    resolutions: level_sizes,
                    target: 14,
                    channels: stage_c,
                };
                let fpn = FpnFuse::seeded(pyramid, &[stage_c; 3], &mut rng)?;
                let head_in = stage_c * 14 * 14;
                (b, Some(fpn), head_in)
            } else {
                (b, None, cfg.backbone_embed)
            }
        }
        other => {
            return Err(Error::Config(format!("features must be rank 2 or 4, got rank {other}")));
        }
    };

    let out_dim = if cfg.encoding_enabled { cfg.encoding_bits as usize } else { 1 };
    let head = match cfg.head {
        HeadKind::Mlp | HeadKind::DeepEnsemble => Head::Mlp(MlpHead::seeded(
            head_in,
            (cfg.head_hidden[0], cfg.head_hidden[1]),
            out_dim,
            &mut rng,
        )),
        HeadKind::Attention => {
            let tokens = cfg.attention_tokens;
            if head_in % tokens != 0 {
                return Err(Error::Config(format!(
                    "head input width {head_in} must split into {tokens} tokens"
                )));
            }
            Head::Attention {
                head: AttentionHead::seeded(head_in / tokens, out_dim, &mut rng),
                tokens,
            }
        }
    };

    let spec = cfg.task_spec();
    let codec = if cfg.encoding_enabled {
        Some(BitCodec::new(spec.lo, spec.hi, cfg.encoding_bits)?)
    } else {
        None
    };

    Ok(TrainedModel {
        backbone,
        fpn,
        head,
        codec,
        decode_mode: cfg.encoding_decode_mode,
    })
}

/// Evaluation-side loss for the learning curve, no gradients recorded.
fn eval_loss(model: &TrainedModel, loss: &BatchLoss<'_>, features: &Tensor, targets: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let out = model.forward(&mut tape, x)?;
    let l = loss.build(&mut tape, out, targets)?;
    tape.scalar_value(l)
}

fn owm_enabled(cfg: &ExperimentConfig) -> bool {
    cfg.or_enabled && matches!(cfg.or_mode, OrMode::Owm | OrMode::Both)
}

fn soft_penalty_enabled(cfg: &ExperimentConfig) -> bool {
    cfg.or_enabled && matches!(cfg.or_mode, OrMode::SoftPenalty | OrMode::Both)
}

fn train_single(
    cfg: &ExperimentConfig,
    data: &Dataset,
    splits: &SplitIndices,
    seed: u64,
) -> Result<(TrainedModel, MetricsRecord)> {
    let mut model = build_model(cfg, data, seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let loss_builder = BatchLoss { cfg, codec: model.codec };

    let train_set = data.select(&splits.train)?;
    let val_set = data.select(&splits.val)?;
    let test_set = data.select(&splits.test)?;

    // One projector per MLP head layer, over that layer's input space.
    let mut projectors: Option<Vec<Projector>> = if owm_enabled(cfg) {
        let Head::Mlp(h) = &model.head else {
            return Err(Error::Config("owm projection needs the mlp head".into()));
        };
        Some(vec![
            Projector::identity(h.l1.in_dim(), cfg.or_alpha)?,
            Projector::identity(h.l2.in_dim(), cfg.or_alpha)?,
            Projector::identity(h.out.in_dim(), cfg.or_alpha)?,
        ])
    } else {
        None
    };

    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_set.select(chunk)?;
            let mut tape = Tape::new();
            let x = tape.constant(batch.features.clone());

            // Bind explicitly so gradients can be read back per parameter.
            let bb = model.backbone.bind(&mut tape);
            let bfpn = model.fpn.as_ref().map(|f| f.bind(&mut tape));
            let (emb, levels) = bb.forward(&mut tape, x)?;
            let head_in = match &bfpn {
                Some(f) => {
                    let fused = f.forward(&mut tape, &levels)?;
                    let s = tape.shape(fused).to_vec();
                    tape.reshape(fused, vec![s[0], s[1] * s[2] * s[3]])?
                }
                None => emb,
            };

            let mut head_values = Vec::new();
            let mut layer_inputs: Vec<Value> = Vec::new();
            let mut hidden_weights: Vec<Value> = Vec::new();
            let out = match &model.head {
                Head::Mlp(h) => {
                    let bh = h.bind(&mut tape);
                    // Layer-by-layer so each layer's input activation is
                    // available for the projector updates.
                    let h1_in = head_in;
                    let a1 = {
                        let z = bh.forward_l1(&mut tape, h1_in)?;
                        tape.relu(z)
                    };
                    let a2 = {
                        let z = bh.forward_l2(&mut tape, a1)?;
                        tape.relu(z)
                    };
                    let out = bh.forward_out(&mut tape, a2)?;
                    layer_inputs.extend([h1_in, a1, a2]);
                    hidden_weights.extend(bh.hidden_weight_values());
                    bh.collect_values(&mut head_values);
                    out
                }
                Head::Attention { head, tokens } => {
                    let bh = head.bind(&mut tape);
                    let s = tape.shape(head_in).to_vec();
                    let toks = tape.reshape(head_in, vec![s[0], *tokens, s[1] / *tokens])?;
                    let out = bh.forward(&mut tape, toks)?;
                    bh.collect_values(&mut head_values);
                    out
                }
            };

            let mut loss = loss_builder.build(&mut tape, out, &batch.targets)?;
            if soft_penalty_enabled(cfg) {
                for &w in &hidden_weights {
                    let pen = soft_orthogonality_penalty(&mut tape, w, cfg.soft_orth_lambda)?;
                    loss = tape.add(loss, pen)?;
                }
            }
            let loss_value = tape.scalar_value(loss)?;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss became {loss_value} at epoch {epoch}"
                )));
            }
            epoch_loss += loss_value;
            batches += 1;
            tape.backward(loss)?;

            // Parameter update. Values and params are collected in the same
            // order: backbone, fpn, head.
            let mut values = Vec::new();
            bb.collect_values(&mut values);
            if let Some(f) = &bfpn {
                f.collect_values(&mut values);
            }
            values.extend(head_values.iter().copied());
            let grads: Vec<Option<Vec<f64>>> =
                values.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect();

            let mut params: Vec<&mut Tensor> = Vec::new();
            model.backbone.collect_params(&mut params);
            if let Some(f) = &mut model.fpn {
                f.collect_params(&mut params);
            }
            let head_param_offset = params.len();
            match &mut model.head {
                Head::Mlp(h) => h.collect_params(&mut params),
                Head::Attention { head, .. } => head.collect_params(&mut params),
            }

            let mut proj_slots: Vec<Option<&Projector>> = vec![None; params.len()];
            if let Some(prs) = &projectors {
                // Head params are [w1, b1, w2, b2, w_out, b_out]; projectors
                // attach to the weight matrices.
                for (i, pr) in prs.iter().enumerate() {
                    proj_slots[head_param_offset + 2 * i] = Some(pr);
                }
            }
            adam.step(&mut params, &grads, &proj_slots)?;

            // Record the inputs this batch consumed, after the update was
            // projected against the previously recorded subspace.
            if let Some(prs) = &mut projectors {
                for (pr, &inp) in prs.iter_mut().zip(&layer_inputs) {
                    let d = tape.shape(inp)[1];
                    let rows = tape.data(inp).len() / d;
                    let mut mean = vec![0.0; d];
                    for row in tape.data(inp).chunks(d) {
                        for (slot, &v) in mean.iter_mut().zip(row) {
                            *slot += v;
                        }
                    }
                    for slot in &mut mean {
                        *slot /= rows as f64;
                    }
                    pr.update(&mean)?;
                }
            }
        }

        let train_loss = epoch_loss / batches.max(1) as f64;
        let val_loss = eval_loss(&model, &loss_builder, &val_set.features, &val_set.targets)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss became {val_loss} at epoch {epoch}")));
        }
        curve.push(CurvePoint { epoch, train_loss, val_loss });
    }

    let pred = model.predict(&test_set.features)?;
    let record = MetricsRecord {
        mse: metric_mse(&pred, &test_set.targets)?,
        mae: metric_mae(&pred, &test_set.targets)?,
        r2: metric_r2(&pred, &test_set.targets)?.value,
        r2_degenerate: metric_r2(&pred, &test_set.targets)?.degenerate,
        learning_curve: curve,
    };
    Ok((model, record))
}

/// Seeded mini-batch training per the experiment config. Encoding routes
/// targets through the bit codec with per-bit losses and decodes predictions
/// back to millimetres before metrics; OR applies the selected mode; the
/// deep-ensemble head trains `ensemble_k` members on distinct seeds and
/// aggregates by mean.
pub fn train(cfg: &ExperimentConfig, data: &Dataset, splits: &SplitIndices) -> Result<(Model, MetricsRecord)> {
    cfg.validate()?;
    let n = data.len();
    let covered = splits.train.len() + splits.val.len() + splits.test.len();
    if covered != n {
        return Err(Error::Config(format!("splits cover {covered} of {n} samples")));
    }

    match cfg.head {
        HeadKind::Mlp | HeadKind::Attention => {
            let (model, record) = train_single(cfg, data, splits, cfg.seed)?;
            Ok((Model::Single(Box::new(model)), record))
        }
        HeadKind::DeepEnsemble => {
            let ens = EnsembleConfig::offsets(cfg.seed, cfg.ensemble_k)?;
            let test_set = data.select(&splits.test)?;
            let mut members = Vec::with_capacity(cfg.ensemble_k);
            let mut curves: Vec<Vec<CurvePoint>> = Vec::new();
            let outcome = ensemble_train_predict(&ens, |seed| {
                let (model, record) = train_single(cfg, data, splits, seed)?;
                let preds = model.predict(&test_set.features)?;
                members.push(model);
                curves.push(record.learning_curve);
                Ok(preds)
            })?;
            let mean_curve: Vec<CurvePoint> = (0..cfg.epochs)
                .map(|e| CurvePoint {
                    epoch: e,
                    train_loss: curves.iter().map(|c| c[e].train_loss).sum::<f64>() / curves.len() as f64,
                    val_loss: curves.iter().map(|c| c[e].val_loss).sum::<f64>() / curves.len() as f64,
                })
                .collect();
            let record = MetricsRecord {
                mse: metric_mse(&outcome.mean, &test_set.targets)?,
                mae: metric_mae(&outcome.mean, &test_set.targets)?,
                r2: metric_r2(&outcome.mean, &test_set.targets)?.value,
                r2_degenerate: metric_r2(&outcome.mean, &test_set.targets)?.degenerate,
                learning_curve: mean_curve,
            };
            Ok((Model::Ensemble(members), record))
        }
    }
}

// ── ablation sweeper ───────────────────────────────────────────────────

/// Axes of the ablation sweep. The full default grid is 2 (encoding) ×
/// 5 (loss: base ∪ focal γ) × 2 (OR) = 20 cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub gammas: Vec<f64>,
    pub or: Vec<bool>,
    pub encoding: Vec<bool>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            gammas: vec![0.0, 2.0, 4.0, 6.0],
            or: vec![false, true],
            encoding: vec![false, true],
        }
    }
}

impl GridSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad grid spec: {e}")))
    }
}

/// One sweep cell: Table-style row labels plus the resulting metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub task: TaskName,
    pub head: HeadKind,
    /// "MSE", "BCE", or "Focal γ".
    pub loss_label: String,
    pub gamma: f64,
    /// "Classification" when encoding is on, "Regression" otherwise.
    pub encoding_label: String,
    pub or_enabled: bool,
    pub metrics: MetricsRecord,
}

/// Runs the Table-shaped sweep: for each encoding block (Regression first,
/// then Classification), the base loss then each focal γ, with OR off/on.
/// Every cell reuses the base config and seed; only the swept factors vary.
pub fn ablate(
    base: &ExperimentConfig,
    grid: &GridSpec,
    data: &Dataset,
    splits: &SplitIndices,
) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let mut rows = Vec::new();
    for &encoding in &grid.encoding {
        let mut cells: Vec<(String, LossKind, f64)> = Vec::new();
        if encoding {
            cells.push(("BCE".to_string(), LossKind::Bce, 0.0));
        } else {
            cells.push(("MSE".to_string(), LossKind::Mse, 0.0));
        }
        for &g in &grid.gammas {
            cells.push((format!("Focal {g}"), LossKind::Focal, g));
        }
        for (label, loss, gamma) in cells {
            for &or_enabled in &grid.or {
                let mut cfg = base.clone();
                cfg.encoding_enabled = encoding;
                cfg.loss = loss;
                cfg.loss_gamma = gamma;
                cfg.or_enabled = or_enabled;
                cfg.validate()?;
                let (_, metrics) = train(&cfg, data, splits)?;
                rows.push(AblationRow {
                    task: cfg.task,
                    head: cfg.head,
                    loss_label: label.clone(),
                    gamma,
                    encoding_label: if encoding { "Classification" } else { "Regression" }.to_string(),
                    or_enabled,
                    metrics,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    #[test]
    fn default_config_matches_reference_hyperparameters() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.epochs, 20);
        assert_eq!(cfg.encoding_bits, 16);
        assert_eq!(cfg.head_hidden, vec![256, 64]);
        assert_eq!(cfg.fpn_resolutions, vec![320, 160, 80]);
        // Round-trippable through the flat JSON form.
        let json = cfg.to_json_string();
        let back = ExperimentConfig::from_json_str(&json).unwrap();
        assert_eq!(cfg, back);
        // The serialized default carries the reference hyperparameters, and
        // the object stays flat (no nested JSON objects).
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        let obj = value.as_object().unwrap();
        assert_eq!(obj["lr"].as_f64(), Some(1e-3));
        assert_eq!(obj["batch_size"].as_u64(), Some(4));
        assert_eq!(obj["epochs"].as_u64(), Some(20));
        for (_, v) in obj {
            assert!(!v.is_object(), "config must stay flat, found nested object");
        }
    }

    #[test]
    fn invalid_loss_encoding_pairs_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.encoding_enabled = true;
        cfg.loss = LossKind::Mse;
        let err = cfg.validate().unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("Valid pairs"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }

        let mut cfg = ExperimentConfig::default();
        cfg.loss = LossKind::Bce;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.encoding_enabled = true;
        cfg.loss = LossKind::Bce;
        assert!(cfg.validate().is_ok());
    }

    fn quick_cfg() -> ExperimentConfig {
        ExperimentConfig {
            head_hidden: vec![16, 8],
            backbone_hidden: 16,
            backbone_embed: 8,
            epochs: 3,
            synth_n: 80,
            synth_dim: 6,
            ..ExperimentConfig::default()
        }
    }

    fn quick_data(cfg: &ExperimentConfig) -> (Dataset, SplitIndices) {
        let data = synth_generate(&cfg.task_spec(), cfg.synth_n, cfg.synth_dim, cfg.synth_noise, cfg.seed).unwrap();
        let splits = crate::data::split(data.len(), cfg.seed).unwrap();
        (data, splits)
    }

    #[test]
    fn training_is_bit_deterministic_under_fixed_seed() {
        let cfg = quick_cfg();
        let (data, splits) = quick_data(&cfg);
        let (_, a) = train(&cfg, &data, &splits).unwrap();
        let (_, b) = train(&cfg, &data, &splits).unwrap();
        assert_eq!(a, b);

        let mut cfg2 = cfg.clone();
        cfg2.seed = 99;
        let (_, c) = train(&cfg2, &data, &splits).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn frozen_backbone_parameters_do_not_move_in_train() {
        let cfg = quick_cfg();
        let (data, splits) = quick_data(&cfg);
        let (model, _) = train(&cfg, &data, &splits).unwrap();
        let Model::Single(trained) = model else { panic!() };

        // Rebuild the untouched model from the same seed: frozen backbone
        // params must be identical.
        let fresh = build_model(&cfg, &data, cfg.seed).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut t = trained;
        t.backbone.collect_params(&mut a);
        let mut fresh = fresh;
        fresh.backbone.collect_params(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn learning_curve_has_one_point_per_epoch() {
        let cfg = quick_cfg();
        let (data, splits) = quick_data(&cfg);
        let (_, record) = train(&cfg, &data, &splits).unwrap();
        assert_eq!(record.learning_curve.len(), cfg.epochs);
        for (i, p) in record.learning_curve.iter().enumerate() {
            assert_eq!(p.epoch, i);
            assert!(p.train_loss.is_finite() && p.val_loss.is_finite());
        }
        assert!(record.mse >= 0.0 && record.mae >= 0.0 && record.r2 <= 1.0);
    }

    #[test]
    fn encoding_and_or_modes_train() {
        for (enc, loss, or_mode) in [
            (true, LossKind::Bce, OrMode::SoftPenalty),
            (true, LossKind::Focal, OrMode::Owm),
            (false, LossKind::Focal, OrMode::Both),
            (false, LossKind::Mae, OrMode::SoftPenalty),
        ] {
            let mut cfg = quick_cfg();
            cfg.encoding_enabled = enc;
            cfg.loss = loss;
            cfg.loss_gamma = 2.0;
            cfg.or_enabled = true;
            cfg.or_mode = or_mode;
            let (data, splits) = quick_data(&cfg);
            let (_, record) = train(&cfg, &data, &splits).unwrap();
            assert!(record.mse.is_finite());
        }
    }

    #[test]
    fn attention_head_trains_in_both_target_modes() {
        for enc in [false, true] {
            let mut cfg = quick_cfg();
            cfg.head = HeadKind::Attention;
            cfg.attention_tokens = 4;
            if enc {
                cfg.encoding_enabled = true;
                cfg.loss = LossKind::Bce;
            }
            let (data, splits) = quick_data(&cfg);
            let (model, record) = train(&cfg, &data, &splits).unwrap();
            assert!(record.mse.is_finite());
            let preds = model.predict(&data.select(&splits.test).unwrap().features).unwrap();
            assert_eq!(preds.len(), splits.test.len());
        }

        // OWM projection is wired for the MLP head only.
        let mut cfg = quick_cfg();
        cfg.head = HeadKind::Attention;
        cfg.or_enabled = true;
        cfg.or_mode = OrMode::Owm;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn ensemble_head_aggregates_members() {
        let mut cfg = quick_cfg();
        cfg.head = HeadKind::DeepEnsemble;
        cfg.ensemble_k = 3;
        let (data, splits) = quick_data(&cfg);
        let (model, record) = train(&cfg, &data, &splits).unwrap();
        let Model::Ensemble(members) = &model else { panic!() };
        assert_eq!(members.len(), 3);
        assert!(record.mse.is_finite());

        // Jensen on the test split: ensemble MSE ≤ mean member MSE.
        let test = data.select(&splits.test).unwrap();
        let mean_pred = model.predict(&test.features).unwrap();
        let ens_mse = metric_mse(&mean_pred, &test.targets).unwrap();
        let member_mses: Vec<f64> = members
            .iter()
            .map(|m| metric_mse(&m.predict(&test.features).unwrap(), &test.targets).unwrap())
            .collect();
        let avg: f64 = member_mses.iter().sum::<f64>() / members.len() as f64;
        assert!(ens_mse <= avg + 1e-12);

        // Margin against the best single member, reported not asserted.
        let best = member_mses.iter().cloned().fold(f64::INFINITY, f64::min);
        println!("ensemble mse {ens_mse:.6} vs best member {best:.6} (margin {:+.6})", ens_mse - best);
    }

    #[test]
    fn image_features_train_through_fpn() {
        use crate::data::Provenance;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 24;
        let size = 16;
        let feats: Vec<f64> = (0..n * size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spec = crate::data::TaskSpec::mrd1();
        let targets: Vec<f64> = (0..n).map(|_| rng.random_range(spec.lo..spec.hi)).collect();
        let data = Dataset::new(
            Tensor::new(vec![n, 1, size, size], feats).unwrap(),
            targets,
            Provenance::Synthetic,
        )
        .unwrap();
        let splits = crate::data::split(n, 31).unwrap();

        let mut cfg = quick_cfg();
        cfg.fpn_enabled = true;
        cfg.fpn_resolutions = vec![8, 4, 2]; // backbone level sizes for 16² input
        cfg.epochs = 2;
        let (model, record) = train(&cfg, &data, &splits).unwrap();
        assert!(record.mse.is_finite());
        let preds = model.predict(&data.select(&splits.test).unwrap().features).unwrap();
        assert_eq!(preds.len(), splits.test.len());

        // Mismatched pyramid resolutions are a configuration error.
        let mut bad = cfg.clone();
        bad.fpn_resolutions = vec![320, 160, 80];
        assert!(matches!(train(&bad, &data, &splits), Err(Error::Config(_))));

        // Flat features cannot feed the pyramid.
        let mut flat = quick_cfg();
        flat.fpn_enabled = true;
        let (flat_data, flat_splits) = quick_data(&flat);
        assert!(matches!(train(&flat, &flat_data, &flat_splits), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_grid_has_twenty_labelled_rows() {
        let mut cfg = quick_cfg();
        cfg.epochs = 1;
        cfg.synth_n = 40;
        let (data, splits) = quick_data(&cfg);
        let rows = ablate(&cfg, &GridSpec::default(), &data, &splits).unwrap();
        assert_eq!(rows.len(), 20);
        assert_eq!(rows.iter().filter(|r| r.encoding_label == "Regression").count(), 10);
        assert_eq!(rows.iter().filter(|r| r.encoding_label == "Classification").count(), 10);
        assert!(rows.iter().any(|r| r.loss_label == "MSE"));
        assert!(rows.iter().any(|r| r.loss_label == "BCE"));
        assert!(rows.iter().any(|r| r.loss_label == "Focal 6"));
        assert!(rows.iter().all(|r| r.metrics.mse.is_finite()));
    }
}
