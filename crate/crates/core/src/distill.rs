//! Student-teacher self-distillation: temperature-sharpened, centered
//! teacher targets, a symmetric two-view cross-entropy, an EMA teacher, and
//! an EMA center. The teacher is advanced only by moving averages and never
//! receives gradient.

use crate::error::{Error, Result};
use crate::nn::LinearLayer;
use crate::owm::AdamState;
use crate::tensor::{Tape, Tensor, Value};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Two-layer projection network used by both student and teacher.
#[derive(Debug, Clone)]
pub struct ProjectionNet {
    pub l1: LinearLayer,
    pub out: LinearLayer,
}

impl ProjectionNet {
    pub fn seeded<R: Rng>(in_dim: usize, hidden: usize, k: usize, rng: &mut R) -> Self {
        ProjectionNet {
            l1: LinearLayer::seeded(in_dim, hidden, rng),
            out: LinearLayer::seeded(hidden, k, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out.out_dim()
    }

    pub fn forward(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        let h = self.l1.forward(tape, x)?;
        let h = tape.relu(h);
        self.out.forward(tape, h)
    }

    /// Gradient-free forward on a throwaway tape.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv)?;
        Ok(tape.detach(out))
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.l1.collect_params(out);
        self.out.collect_params(out);
    }

    fn param_data(&self) -> Vec<&Tensor> {
        vec![&self.l1.weight, &self.l1.bias, &self.out.weight, &self.out.bias]
    }

    fn param_data_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.l1.weight,
            &mut self.l1.bias,
            &mut self.out.weight,
            &mut self.out.bias,
        ]
    }
}

/// Temperatures and momenta of the distillation loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    /// Student temperature.
    pub tps: f64,
    /// Teacher temperature (sharper than the student's).
    pub tpt: f64,
    /// Teacher EMA rate `l`.
    pub teacher_momentum: f64,
    /// Center EMA rate `m`.
    pub center_momentum: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tps: 0.1,
            tpt: 0.04,
            teacher_momentum: 0.996,
            center_momentum: 0.9,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tps > 0.0) || !(self.tpt > 0.0) {
            return Err(Error::Parameter(format!(
                "distill temperatures must be > 0, got tps={} tpt={}",
                self.tps, self.tpt
            )));
        }
        for (name, v) in [("teacher", self.teacher_momentum), ("center", self.center_momentum)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parameter(format!("{name} momentum must be in [0,1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Student parameters, teacher parameters (same architecture), and the
/// center vector. At construction the teacher equals the student exactly.
#[derive(Debug, Clone)]
pub struct DistillState {
    pub student: ProjectionNet,
    pub teacher: ProjectionNet,
    pub center: Vec<f64>,
    pub cfg: DistillConfig,
}

impl DistillState {
    pub fn new(student: ProjectionNet, cfg: DistillConfig) -> Result<Self> {
        cfg.validate()?;
        let mut teacher = student.clone();
        // Teacher parameters never enter a gradient pass.
        for p in teacher.param_data_mut() {
            p.set_requires_grad(false);
        }
        let k = student.out_dim();
        Ok(DistillState {
            student,
            teacher,
            center: vec![0.0; k],
            cfg,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.student.out_dim()
    }

    /// Sharpened, centered teacher rows: `softmax((t − C) / tpt)` per row,
    /// computed outside any gradient tape.
    pub fn sharpen_teacher_rows(&self, t: &Tensor) -> Result<Vec<f64>> {
        let k = self.out_dim();
        if t.shape().len() != 2 || t.shape()[1] != k {
            return Err(Error::dimension("sharpen_teacher", t.shape(), k));
        }
        let mut out = vec![0.0; t.numel()];
        for (row_in, row_out) in t.data().chunks(k).zip(out.chunks_mut(k)) {
            let mut mx = f64::NEG_INFINITY;
            for (v, c) in row_in.iter().zip(&self.center) {
                mx = mx.max((v - c) / self.cfg.tpt);
            }
            let mut sum = 0.0;
            for ((v, c), slot) in row_in.iter().zip(&self.center).zip(row_out.iter_mut()) {
                let e = ((v - c) / self.cfg.tpt - mx).exp();
                *slot = e;
                sum += e;
            }
            for slot in row_out.iter_mut() {
                *slot /= sum;
            }
        }
        Ok(out)
    }
}

/// `H(t, s)`: mean over the batch of the cross-entropy between the sharpened
/// teacher distribution and the softened student distribution. The teacher
/// side is detached: its values are read off and re-entered as constants, so
/// no gradient can reach `t`.
pub fn distill_cross_entropy(tape: &mut Tape, t: Value, s: Value, st: &DistillState) -> Result<Value> {
    st.cfg.validate()?;
    if tape.shape(t) != tape.shape(s) {
        return Err(Error::dimension("distill_cross_entropy", tape.shape(t), tape.shape(s)));
    }
    let teacher_rows = st.sharpen_teacher_rows(&tape.detach(t))?;
    let t_soft = tape.constant(Tensor::new(tape.shape(t).to_vec(), teacher_rows)?);
    let log_s = tape.log_softmax(s, 1, st.cfg.tps)?;
    let prod = tape.mul(t_soft, log_s)?;
    let row_sums = tape.sum(prod, Some(1))?;
    let m = tape.mean(row_sums, None)?;
    Ok(tape.neg(m))
}

/// Per-step record emitted by [`distill_step`].
#[derive(Debug, Clone, Copy)]
pub struct DistillStepLog {
    pub loss: f64,
    /// Mean absolute difference between teacher and student parameters.
    pub teacher_student_divergence: f64,
    pub center_norm: f64,
}

/// One loop iteration: two stochastic views, symmetric loss, student
/// optimizer step, then teacher and center EMA updates in that order.
pub fn distill_step<F>(
    st: &mut DistillState,
    batch: &Tensor,
    mut augment: F,
    opt: &mut AdamState,
) -> Result<DistillStepLog>
where
    F: FnMut(&Tensor) -> Tensor,
{
    if batch.shape().len() != 2 || batch.shape()[0] == 0 {
        return Err(Error::Contract(format!(
            "distill batch must be [n × in] with n ≥ 1, got {:?}",
            batch.shape()
        )));
    }
    let x1 = augment(batch);
    let x2 = augment(batch);

    let t1 = st.teacher.eval(&x1)?;
    let t2 = st.teacher.eval(&x2)?;

    let mut tape = Tape::new();
    let x1v = tape.constant(x1);
    let x2v = tape.constant(x2);
    let b1 = st.student.l1.bind(&mut tape);
    let b2 = st.student.out.bind(&mut tape);
    let forward = |tape: &mut Tape, x: Value| -> Result<Value> {
        let h = b1.forward(tape, x)?;
        let h = tape.relu(h);
        b2.forward(tape, h)
    };
    let s1 = forward(&mut tape, x1v)?;
    let s2 = forward(&mut tape, x2v)?;

    let t1v = tape.constant(t1.clone());
    let t2v = tape.constant(t2.clone());
    let h12 = distill_cross_entropy(&mut tape, t1v, s2, st)?;
    let h21 = distill_cross_entropy(&mut tape, t2v, s1, st)?;
    let h12h = tape.scale(h12, 0.5);
    let h21h = tape.scale(h21, 0.5);
    let loss = tape.add(h12h, h21h)?;
    let loss_value = tape.scalar_value(loss)?;
    tape.backward(loss)?;

    let mut vals = Vec::new();
    b1.collect_values(&mut vals);
    b2.collect_values(&mut vals);
    let grads: Vec<Option<Vec<f64>>> = vals.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect();
    let mut params = Vec::new();
    st.student.collect_params(&mut params);
    opt.step(&mut params, &grads, &[])?;

    // Teacher EMA, elementwise `l·gt + (1−l)·gs` in exactly this order.
    let l = st.cfg.teacher_momentum;
    {
        let student_snapshot: Vec<Vec<f64>> =
            st.student.param_data().iter().map(|p| p.data().to_vec()).collect();
        for (tp, sp) in st.teacher.param_data_mut().into_iter().zip(&student_snapshot) {
            for (tv, &sv) in tp.data_mut().iter_mut().zip(sp) {
                *tv = l * *tv + (1.0 - l) * sv;
            }
        }
    }

    // Center EMA over the mean of the concatenated teacher outputs.
    let m = st.cfg.center_momentum;
    let k = st.out_dim();
    let rows = t1.numel() / k + t2.numel() / k;
    let mut batch_mean = vec![0.0; k];
    for row in t1.data().chunks(k).chain(t2.data().chunks(k)) {
        for (slot, &v) in batch_mean.iter_mut().zip(row) {
            *slot += v;
        }
    }
    for slot in &mut batch_mean {
        *slot /= rows as f64;
    }
    for (c, &bm) in st.center.iter_mut().zip(&batch_mean) {
        *c = m * *c + (1.0 - m) * bm;
    }

    let divergence = {
        let teacher = st.teacher.param_data();
        let student = st.student.param_data();
        let mut sum = 0.0;
        let mut count = 0usize;
        for (tp, sp) in teacher.iter().zip(&student) {
            for (a, b) in tp.data().iter().zip(sp.data()) {
                sum += (a - b).abs();
                count += 1;
            }
        }
        sum / count as f64
    };
    let center_norm = st.center.iter().map(|v| v * v).sum::<f64>().sqrt();

    Ok(DistillStepLog {
        loss: loss_value,
        teacher_student_divergence: divergence,
        center_norm,
    })
}

/// Non-collapse probe: per-dimension std of teacher outputs and the entropy
/// of the mean sharpened teacher distribution.
#[derive(Debug, Clone)]
pub struct CollapseDiagnostics {
    pub output_std: Vec<f64>,
    pub mean_entropy: f64,
}

pub fn collapse_diagnostics(st: &DistillState, probe: &Tensor) -> Result<CollapseDiagnostics> {
    if probe.shape().len() != 2 || probe.shape()[0] == 0 {
        return Err(Error::Contract(format!(
            "probe batch must be [n × in] with n ≥ 1, got {:?}",
            probe.shape()
        )));
    }
    let t = st.teacher.eval(probe)?;
    let k = st.out_dim();
    let n = t.numel() / k;

    let mut mean = vec![0.0; k];
    for row in t.data().chunks(k) {
        for (slot, &v) in mean.iter_mut().zip(row) {
            *slot += v;
        }
    }
    for slot in &mut mean {
        *slot /= n as f64;
    }
    let mut output_std = vec![0.0; k];
    for row in t.data().chunks(k) {
        for ((slot, &v), &mu) in output_std.iter_mut().zip(row).zip(&mean) {
            *slot += (v - mu) * (v - mu);
        }
    }
    for slot in &mut output_std {
        *slot = (*slot / n as f64).sqrt();
    }

    let sharp = st.sharpen_teacher_rows(&t)?;
    let mut mean_dist = vec![0.0; k];
    for row in sharp.chunks(k) {
        for (slot, &v) in mean_dist.iter_mut().zip(row) {
            *slot += v;
        }
    }
    for slot in &mut mean_dist {
        *slot /= n as f64;
    }
    let mean_entropy = -mean_dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>();

    Ok(CollapseDiagnostics { output_std, mean_entropy })
}

/// The toy-scale view transform: additive Gaussian noise plus random
/// coordinate dropout.
pub fn noise_dropout_augment(sigma: f64, drop_p: f64, rng: &mut ChaCha8Rng) -> impl FnMut(&Tensor) -> Tensor + '_ {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    move |t: &Tensor| {
        let data = t
            .data()
            .iter()
            .map(|&v| {
                let dropped = drop_p > 0.0 && rng.random_range(0.0..1.0) < drop_p;
                if dropped {
                    0.0
                } else if sigma > 0.0 {
                    v + normal.sample(rng)
                } else {
                    v
                }
            })
            .collect();
        Tensor::new(t.shape().to_vec(), data).expect("augment preserves shape")
    }
}
