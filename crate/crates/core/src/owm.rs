//! Orthogonal weight modification: a per-layer input-subspace projector plus
//! an Adam update that can route gradients through the projector, so new
//! updates avoid directions already consumed by earlier inputs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square projector `P` over a layer's input space, initialized to identity
/// and deflated toward the orthogonal complement of every recorded input.
#[derive(Debug, Clone)]
pub struct Projector {
    p: Vec<f64>,
    dim: usize,
    alpha: f64,
}

/// Outcome of a projector update; a zero input vector is a no-op and is
/// reported rather than silently absorbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectorUpdate {
    Updated,
    SkippedZeroInput,
}

impl Projector {
    pub fn identity(dim: usize, alpha: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("projector dimension must be positive".into()));
        }
        if !(alpha > 0.0) {
            return Err(Error::Parameter(format!("projector alpha must be > 0, got {alpha}")));
        }
        let mut p = vec![0.0; dim * dim];
        for i in 0..dim {
            p[i * dim + i] = 1.0;
        }
        Ok(Projector { p, dim, alpha })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn matrix(&self) -> &[f64] {
        &self.p
    }

    /// `P · x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::dimension("projector_apply", self.dim, x.len()));
        }
        let mut out = vec![0.0; self.dim];
        for i in 0..self.dim {
            let row = &self.p[i * self.dim..(i + 1) * self.dim];
            out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        Ok(out)
    }

    /// Rank-1 deflation with a consumed input:
    /// `P ← P − (P x)(P x)ᵀ / (alpha + xᵀ P x)`.
    ///
    /// The update is written in explicitly symmetric form, so `P` stays
    /// exactly symmetric.
    pub fn update(&mut self, x: &[f64]) -> Result<ProjectorUpdate> {
        if x.len() != self.dim {
            return Err(Error::dimension("projector_update", self.dim, x.len()));
        }
        if x.iter().all(|&v| v == 0.0) {
            return Ok(ProjectorUpdate::SkippedZeroInput);
        }
        let px = self.apply(x)?;
        let xpx: f64 = x.iter().zip(&px).map(|(a, b)| a * b).sum();
        let denom = self.alpha + xpx;
        for i in 0..self.dim {
            for j in 0..self.dim {
                self.p[i * self.dim + j] -= px[i] * px[j] / denom;
            }
        }
        Ok(ProjectorUpdate::Updated)
    }

    /// Projects a `[out × in]` gradient on the input side: `G' = G · P`.
    pub fn project_gradient(&self, grad: &[f64], out_dim: usize) -> Result<Vec<f64>> {
        if grad.len() != out_dim * self.dim {
            return Err(Error::dimension("project_gradient", grad.len(), (out_dim, self.dim)));
        }
        let mut out = vec![0.0; grad.len()];
        for r in 0..out_dim {
            let grow = &grad[r * self.dim..(r + 1) * self.dim];
            let orow = &mut out[r * self.dim..(r + 1) * self.dim];
            for (j, slot) in orow.iter_mut().enumerate() {
                // Column j of P equals row j by symmetry.
                let pcol = &self.p[j * self.dim..(j + 1) * self.dim];
                *slot = grow.iter().zip(pcol).map(|(g, p)| g * p).sum();
            }
        }
        Ok(out)
    }
}

/// Bias-corrected Adam with optional per-parameter gradient projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step. `params`, `grads` and `projectors` are aligned by
    /// position and must keep the same order on every call. Parameters with
    /// `requires_grad == false` (frozen layers) are skipped; a trainable
    /// parameter without a gradient is a contract violation.
    ///
    /// With a projector, both the gradient entering the moments and the
    /// realized update are projected. Adam's per-coordinate rescaling would
    /// otherwise rotate a projected gradient back out of the orthogonal
    /// subspace.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Option<Vec<f64>>],
        projectors: &[Option<&Projector>],
    ) -> Result<()> {
        if params.len() != grads.len() || (!projectors.is_empty() && projectors.len() != params.len()) {
            return Err(Error::Contract(format!(
                "adam_step arity mismatch: {} params, {} grads, {} projectors",
                params.len(),
                grads.len(),
                projectors.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        } else if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam_step parameter list changed size: {} vs {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (idx, param) in params.iter_mut().enumerate() {
            if !param.requires_grad() {
                continue;
            }
            let Some(raw) = grads[idx].as_ref() else {
                return Err(Error::Contract(format!(
                    "missing gradient for trainable parameter {idx}"
                )));
            };
            if raw.len() != param.numel() {
                return Err(Error::dimension("adam_step", param.shape(), raw.len()));
            }
            let projector = projectors.get(idx).copied().flatten();
            let projected;
            let g: &[f64] = match projector {
                Some(pr) => {
                    let out_dim = param.numel() / pr.dim();
                    projected = pr.project_gradient(raw, out_dim)?;
                    &projected
                }
                None => raw,
            };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let mut delta = vec![0.0; g.len()];
            for (i, d) in delta.iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *d = lr * m_hat / (v_hat.sqrt() + eps);
            }
            let delta = match projector {
                Some(pr) => {
                    let out_dim = param.numel() / pr.dim();
                    pr.project_gradient(&delta, out_dim)?
                }
                None => delta,
            };
            for (slot, d) in param.data_mut().iter_mut().zip(&delta) {
                *slot -= d;
            }
        }
        Ok(())
    }
}
