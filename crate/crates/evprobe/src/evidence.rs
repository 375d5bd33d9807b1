//! The evidence framework: interleave MAP training with gradient ascent
//! on the prior precisions to maximize the Laplace evidence online, and
//! select the evidence-maximizing probe per representation.
//!
//! Every `F` epochs the curvature is recomputed at the current θ and held
//! fixed while `K` gradient-ascent steps of rate `γ` are taken on the
//! log precisions. The ascent uses Adam with state persisted across
//! phases: the raw evidence gradient scales with the parameter count, so
//! fixed-step ascent overshoots the fixed point and limit-cycles between
//! the clamps, while Adam bounds every step by `γ`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::{
    self, ggn_diagonal, ggn_kron, CurvatureApprox, PosteriorFit,
};
use crate::probes::{
    ParameterLayout, PrecisionMode, PriorPrecisions, ProbeArchitecture,
};
use crate::representations::DesignMatrix;
use crate::training::{self, HookRecord, TrainConfig, TrainTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureKind {
    Diagonal,
    Kron,
}

/// Evidence-framework schedule. Defaults: hyper-phase after every epoch
/// (`F = 1`) of `K = 100` ascent steps at rate `γ = 0.1`, starting from
/// unit precisions, with Kronecker curvature and per-group precisions.
/// Log precisions are clamped to `[-8, 12]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarglikConfig {
    pub frequency: usize,
    pub steps_per_phase: usize,
    pub hyper_lr: f64,
    pub burn_in: usize,
    pub precision_init: f64,
    pub precision_mode: PrecisionMode,
    pub curvature: CurvatureKind,
    pub log_prec_min: f64,
    pub log_prec_max: f64,
}

impl Default for MarglikConfig {
    fn default() -> Self {
        Self {
            frequency: 1,
            steps_per_phase: 100,
            hyper_lr: 0.1,
            burn_in: 0,
            precision_init: 1.0,
            precision_mode: PrecisionMode::PerGroup,
            curvature: CurvatureKind::Kron,
            log_prec_min: -8.0,
            log_prec_max: 12.0,
        }
    }
}

impl MarglikConfig {
    fn validate(&self) -> Result<()> {
        if self.frequency == 0 || self.steps_per_phase == 0 {
            return Err(Error::Config(
                "marglik frequency and steps_per_phase must be positive".into(),
            ));
        }
        if self.precision_mode == PrecisionMode::PerParameter
            && self.curvature != CurvatureKind::Diagonal
        {
            return Err(Error::IncompatiblePrecisionMode {
                mode: self.precision_mode.to_string(),
                kind: "kron".into(),
            });
        }
        Ok(())
    }

    fn initial_precisions(&self, layout: &ParameterLayout) -> PriorPrecisions {
        match self.precision_mode {
            PrecisionMode::Scalar => PriorPrecisions::scalar(self.precision_init),
            PrecisionMode::PerGroup => {
                PriorPrecisions::per_group(layout, self.precision_init)
            }
            PrecisionMode::PerParameter => {
                PriorPrecisions::per_parameter(layout, self.precision_init)
            }
        }
    }
}

fn compute_curvature(
    kind: CurvatureKind,
    params: &crate::probes::ProbeParams,
    x: &DMatrix<f64>,
    y: &[usize],
) -> Result<CurvatureApprox> {
    match kind {
        CurvatureKind::Diagonal => Ok(CurvatureApprox::Diagonal {
            diag: ggn_diagonal(params, x, y),
        }),
        CurvatureKind::Kron => ggn_kron(params, x, y),
    }
}

/// min/median/max of the precision values.
pub fn precision_summary(prec: &PriorPrecisions) -> String {
    let mut sorted = prec.values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let min = sorted.first().copied().unwrap_or(f64::NAN);
    let max = sorted.last().copied().unwrap_or(f64::NAN);
    let median = sorted[sorted.len() / 2];
    format!("{min:.6e}/{median:.6e}/{max:.6e}")
}

/// Run MAP training with interleaved precision optimization and return
/// the final Laplace fit (fresh curvature at the last θ and precisions)
/// plus the training trace.
pub fn optimize_marglik(
    arch: ProbeArchitecture,
    x: &DMatrix<f64>,
    y: &[usize],
    cfg: &TrainConfig,
    mcfg: &MarglikConfig,
) -> Result<(PosteriorFit, TrainTrace)> {
    mcfg.validate()?;
    let layout = arch.layout();
    let init_prec = mcfg.initial_precisions(&layout);
    let mut hyper_adam = training::AdamState::new(init_prec.values.len(), cfg);

    let mut hook = |epoch: usize,
                    params: &crate::probes::ProbeParams,
                    prec: &mut PriorPrecisions|
     -> Result<Option<HookRecord>> {
        if epoch < mcfg.burn_in || (epoch + 1 - mcfg.burn_in) % mcfg.frequency != 0 {
            return Ok(None);
        }
        let curvature = compute_curvature(mcfg.curvature, params, x, y)?;
        let mut fit = laplace::log_evidence(
            params,
            curvature,
            prec.clone(),
            x,
            y,
        )?;
        for _ in 0..mcfg.steps_per_phase {
            let grad = laplace::marglik_grad_log_prec(&fit, &layout)?;
            let neg_grad = nalgebra::DVector::from_iterator(
                grad.len(),
                grad.iter().map(|g| -g),
            );
            let delta =
                training::adam_update(&mut hyper_adam, &neg_grad, mcfg.hyper_lr);
            for (i, v) in fit.precisions.values.iter_mut().enumerate() {
                let log_lambda = (v.ln() - delta[i])
                    .clamp(mcfg.log_prec_min, mcfg.log_prec_max);
                *v = log_lambda.exp();
            }
        }
        // Refresh the evidence at the final precisions of this phase.
        let fit = laplace::log_evidence(
            params,
            fit.curvature,
            fit.precisions,
            x,
            y,
        )?;
        *prec = fit.precisions.clone();
        Ok(Some(HookRecord {
            log_evidence: fit.log_evidence,
            precision_summary: precision_summary(prec),
        }))
    };

    let (params, prec, trace) =
        training::train_map(arch, x, y, init_prec, cfg, Some(&mut hook))?;
    let curvature = compute_curvature(mcfg.curvature, &params, x, y)?;
    let fit = laplace::log_evidence(&params, curvature, prec, x, y)?;
    Ok((fit, trace))
}

/// Outcome of one architecture's evidence optimization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchRun {
    pub arch: ProbeArchitecture,
    pub fit: Option<PosteriorFit>,
    pub error: Option<String>,
}

/// Per-representation probe selection result. `inductive_bias` is the
/// maximum log evidence over the probe family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionResult {
    pub per_arch: Vec<ArchRun>,
    pub chosen_index: usize,
    pub chosen_arch: ProbeArchitecture,
    pub inductive_bias: f64,
    pub rep_fingerprint: u64,
    pub data_fingerprint: u64,
}

/// Run [`optimize_marglik`] independently per architecture and select the
/// evidence argmax. Ties within 1e-6 nats break toward fewer layers,
/// then fewer parameters.
pub fn select_probe(
    design: &DesignMatrix,
    y: &[usize],
    arch_list: &[ProbeArchitecture],
    cfg: &TrainConfig,
    mcfg: &MarglikConfig,
) -> Result<SelectionResult> {
    assert!(!arch_list.is_empty(), "arch_list must be non-empty");
    let mut per_arch = Vec::with_capacity(arch_list.len());
    for &arch in arch_list {
        match optimize_marglik(arch, &design.rows, y, cfg, mcfg) {
            Ok((fit, _)) => per_arch.push(ArchRun {
                arch,
                fit: Some(fit),
                error: None,
            }),
            Err(e) => per_arch.push(ArchRun {
                arch,
                fit: None,
                error: Some(e.to_string()),
            }),
        }
    }

    let mut chosen: Option<usize> = None;
    for (i, run) in per_arch.iter().enumerate() {
        let Some(fit) = &run.fit else { continue };
        match chosen {
            None => chosen = Some(i),
            Some(best) => {
                let best_fit = per_arch[best].fit.as_ref().unwrap();
                let diff = fit.log_evidence - best_fit.log_evidence;
                let better = if diff.abs() <= 1e-6 {
                    let (a, b) = (run.arch, per_arch[best].arch);
                    (a.depth, a.param_count()) < (b.depth, b.param_count())
                } else {
                    diff > 0.0
                };
                if better {
                    chosen = Some(i);
                }
            }
        }
    }
    let chosen_index = chosen.ok_or(Error::AllArchitecturesFailed)?;
    let chosen_fit = per_arch[chosen_index].fit.as_ref().unwrap();
    Ok(SelectionResult {
        chosen_index,
        chosen_arch: per_arch[chosen_index].arch,
        inductive_bias: chosen_fit.log_evidence,
        rep_fingerprint: design.rep_fingerprint,
        data_fingerprint: chosen_fit.data_fingerprint,
        per_arch,
    })
}

/// Likelihood ratio between two fits on the same data with equal model
/// priors: `exp(logZ_a - logZ_b)`. Values above 1 decide for `a`.
pub fn likelihood_ratio(fit_a: &PosteriorFit, fit_b: &PosteriorFit) -> Result<f64> {
    if fit_a.data_fingerprint != fit_b.data_fingerprint {
        return Err(Error::FingerprintMismatch {
            a: fit_a.data_fingerprint,
            b: fit_b.data_fingerprint,
        });
    }
    Ok((fit_a.log_evidence - fit_b.log_evidence).exp())
}
