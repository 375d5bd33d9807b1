//! MAP estimation of probe parameters by minibatch Adam on the negative
//! log joint.
//!
//! The per-batch loss is `(N / batch_n) * batch_nll - log_prior`, so
//! stochastic gradients are unbiased estimates of the full negative log
//! joint gradient and the MAP is independent of batch size in
//! expectation. The last iterate after the configured number of epochs is
//! the MAP estimate; there is no early stopping. All updates are
//! single-threaded with a fixed reduction order, so identical inputs give
//! bitwise-identical traces.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probes::{
    self, grad_neg_log_prior, grad_nll, init_params, log_prior,
    PriorPrecisions, ProbeArchitecture, ProbeParams,
};
use crate::representations::key2;

/// Optimizer settings. The defaults are the fixed training protocol used
/// throughout: Adam with learning rate 0.1, β₁ = 0.9, β₂ = 0.999,
/// batch size 512, 500 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 512,
            epochs: 500,
            shuffle_seed: 0,
        }
    }
}

/// Adam first/second moment state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: DVector<f64>,
    pub v: DVector<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dim: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }
}

/// One bias-corrected Adam step. Returns the parameter delta to subtract
/// from θ.
pub fn adam_update(state: &mut AdamState, grad: &DVector<f64>, lr: f64) -> DVector<f64> {
    assert_eq!(state.m.len(), grad.len());
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let mut delta = DVector::zeros(grad.len());
    for i in 0..grad.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * grad[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        delta[i] = lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    delta
}

/// What a hyperparameter hook reports back for the trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HookRecord {
    pub log_evidence: f64,
    pub precision_summary: String,
}

/// Callback invoked after each epoch; may mutate the prior precisions
/// (the evidence framework does) and report the current evidence.
pub type HyperHook<'a> =
    dyn FnMut(usize, &ProbeParams, &mut PriorPrecisions) -> Result<Option<HookRecord>> + 'a;

/// Per-epoch record of the training trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub log_prior: f64,
    pub grad_norm: f64,
    pub log_evidence: Option<f64>,
    pub precision_summary: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    /// Emit the trace as CSV with a fixed header.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "epoch,train_nll,log_prior,grad_norm,log_evidence,precision_summary"
        )?;
        for r in &self.records {
            let logz = r
                .log_evidence
                .map(|v| v.to_string())
                .unwrap_or_default();
            let summary = r.precision_summary.clone().unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.epoch, r.train_nll, r.log_prior, r.grad_norm, logz, summary
            )?;
        }
        Ok(())
    }
}

/// MAP training: minimize `nll - log_prior` over the full data by
/// minibatch Adam with the paper-fixed protocol. The hook, when present,
/// runs after every epoch and may update the precisions in place.
pub fn train_map(
    arch: ProbeArchitecture,
    x: &DMatrix<f64>,
    y: &[usize],
    prec: PriorPrecisions,
    cfg: &TrainConfig,
    mut hyper_hook: Option<&mut HyperHook<'_>>,
) -> Result<(ProbeParams, PriorPrecisions, TrainTrace)> {
    let n = y.len();
    if n == 0 {
        return Err(Error::EmptyTrainingData);
    }
    {
        let mut seen = std::collections::HashSet::new();
        for &yn in y {
            seen.insert(yn);
        }
        if seen.len() < 2 {
            return Err(Error::TooFewClasses);
        }
    }
    let mut prec = prec;
    prec.validate(&arch.layout())?;

    let mut params = init_params(arch, key2(cfg.shuffle_seed, 0x1417));
    let mut adam = AdamState::new(params.theta.len(), cfg);
    let mut trace = TrainTrace::default();
    let mut indices: Vec<usize> = (0..n).collect();
    let scale_base = n as f64;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(key2(cfg.shuffle_seed, epoch as u64 + 1));
        indices.shuffle(&mut rng);
        for (batch_idx, batch) in indices.chunks(cfg.batch_size.max(1)).enumerate() {
            let bx = DMatrix::from_fn(batch.len(), x.ncols(), |r, c| x[(batch[r], c)]);
            let by: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let (bnll, mut grad) = grad_nll(&params, &bx, &by);
            let scale = scale_base / batch.len() as f64;
            grad *= scale;
            grad += grad_neg_log_prior(&params, &prec)?;
            let loss = scale * bnll - log_prior(&params, &prec)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    what: "training loss/gradient".into(),
                    epoch,
                    batch: batch_idx,
                });
            }
            let delta = adam_update(&mut adam, &grad, cfg.lr);
            params.theta -= delta;
        }

        // Full-data diagnostics for the trace.
        let (full_nll, mut full_grad) = grad_nll(&params, x, y);
        full_grad += grad_neg_log_prior(&params, &prec)?;
        let lp = log_prior(&params, &prec)?;
        let mut record = EpochRecord {
            epoch,
            train_nll: full_nll,
            log_prior: lp,
            grad_norm: full_grad.norm(),
            log_evidence: None,
            precision_summary: None,
        };
        if let Some(hook) = hyper_hook.as_deref_mut() {
            if let Some(hr) = hook(epoch, &params, &mut prec)? {
                record.log_evidence = Some(hr.log_evidence);
                record.precision_summary = Some(hr.precision_summary);
            }
        }
        trace.records.push(record);
    }
    Ok((params, prec, trace))
}

/// Classification accuracy of a probe on labeled data.
pub fn accuracy(params: &ProbeParams, x: &DMatrix<f64>, y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let logits = probes::forward_batch(params, x).logits;
    let mut correct = 0;
    for (row, &yn) in logits.row_iter().zip(y) {
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred == yn {
            correct += 1;
        }
    }
    correct as f64 / y.len() as f64
}
