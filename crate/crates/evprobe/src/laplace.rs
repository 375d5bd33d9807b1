//! Laplace approximation to the log evidence from a MAP fit, with
//! diagonal or layerwise Kronecker-factored generalized Gauss-Newton
//! curvature.
//!
//! The evidence decomposes as
//!
//! `log Z = -nll(θ*) + log p(θ*|λ) + (d/2)·log 2π - ½·log det(H + Λ)`
//!
//! where `H` is the GGN of the likelihood at the MAP and `Λ` the prior
//! precision. Curvature is computed full-batch with exact per-class
//! factorization of the softmax loss Hessian `Λ_n = B_n B_nᵀ`,
//! `B_n = diag(√p_n) - p_n √p_nᵀ`, backpropagating each column — no
//! Monte-Carlo sampling, so everything is deterministic. Examples are
//! reduced in dataset order.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probes::{
    self, backprop_deltas, forward_batch, log_prior_flat, softmax_rows,
    ParameterLayout, PrecisionMode, PriorPrecisions, ProbeArchitecture,
    ProbeParams,
};
use crate::representations::fnv1a64;

pub(crate) use crate::probes::LN_2PI;

/// One Kronecker block: eigendecompositions of the input factor `A`
/// (activation second moment, extended by the bias constant) and of the
/// output factor `G` (backpropagated loss-Hessian second moment). The
/// block covers the contiguous parameter range `[offset, offset+len)`
/// and the listed layout groups; its curvature eigenvalues are the
/// products `a_i · g_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KronBlock {
    pub layer: usize,
    pub offset: usize,
    pub len: usize,
    /// Indices into the layout's groups covered by this block. Per-group
    /// precisions are broadcast from the first listed group (the layer's
    /// weight group), so weight and bias of one layer share a precision
    /// in kron mode.
    pub groups: Vec<usize>,
    pub a_eigvals: DVector<f64>,
    pub a_eigvecs: DMatrix<f64>,
    pub g_eigvals: DVector<f64>,
    pub g_eigvecs: DMatrix<f64>,
}

impl KronBlock {
    /// All `a_i · g_j` products, the block's curvature eigenvalues.
    pub fn eig_products(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.a_eigvals.len() * self.g_eigvals.len());
        for g in self.g_eigvals.iter() {
            for a in self.a_eigvals.iter() {
                out.push(a * g);
            }
        }
        out
    }

    /// Reconstruct the dense `G ⊗ A` block. Parameter order within the
    /// block is (output unit, extended input unit) row-major, with the
    /// bias as the last extended input. Intended for small problems and
    /// tests.
    pub fn dense(&self) -> DMatrix<f64> {
        let a = &self.a_eigvecs
            * DMatrix::from_diagonal(&self.a_eigvals)
            * self.a_eigvecs.transpose();
        let g = &self.g_eigvecs
            * DMatrix::from_diagonal(&self.g_eigvals)
            * self.g_eigvecs.transpose();
        g.kronecker(&a)
    }
}

/// Likelihood curvature at the MAP, prior excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CurvatureApprox {
    Diagonal { diag: DVector<f64> },
    Kron { blocks: Vec<KronBlock> },
}

impl CurvatureApprox {
    pub fn kind(&self) -> &'static str {
        match self {
            CurvatureApprox::Diagonal { .. } => "diagonal",
            CurvatureApprox::Kron { .. } => "kron",
        }
    }
}

/// Per-class output-space factor columns of `Λ_n = B_n B_nᵀ`:
/// `dlogits_c[n, :] = √p_nc · (e_c - p_n)`.
fn loss_hessian_factor_columns(probs: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let (n, c) = probs.shape();
    (0..c)
        .map(|class| {
            let mut m = DMatrix::zeros(n, c);
            for row in 0..n {
                let s = probs[(row, class)].sqrt();
                for k in 0..c {
                    let e = if k == class { 1.0 } else { 0.0 };
                    m[(row, k)] = s * (e - probs[(row, k)]);
                }
            }
            m
        })
        .collect()
}

/// Exact diagonal of the full-batch GGN `Σ_n J_nᵀ Λ_n J_n`, via
/// per-class backward passes.
pub fn ggn_diagonal(params: &ProbeParams, x: &DMatrix<f64>, y: &[usize]) -> DVector<f64> {
    let _ = y;
    let d = params.theta.len();
    if x.nrows() == 0 {
        return DVector::zeros(d);
    }
    let cache = forward_batch(params, x);
    let probs = softmax_rows(&cache.logits);
    let mut diag = DVector::zeros(d);
    for dlogits in loss_hessian_factor_columns(&probs) {
        let deltas = backprop_deltas(params, &cache, &dlogits);
        for (l, delta) in deltas.iter().enumerate() {
            // Per-example weight gradients are rank-1 (δ aᵀ), so their
            // squares sum to (Δ∘Δ)ᵀ (A∘A).
            let d2 = delta.component_mul(delta);
            let a2 = cache.inputs[l].component_mul(&cache.inputs[l]);
            let gw = d2.transpose() * a2;
            let wg = &params.layout.groups[params.layout.weight_group(l)];
            for r in 0..gw.nrows() {
                for cc in 0..gw.ncols() {
                    diag[wg.offset + r * gw.ncols() + cc] += gw[(r, cc)];
                }
            }
            let bg = &params.layout.groups[params.layout.weight_group(l) + 1];
            for cc in 0..d2.ncols() {
                diag[bg.offset + cc] += d2.column(cc).sum();
            }
        }
    }
    diag
}

fn symmetric_eigen_clamped(mut m: DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "curvature factor before eigendecomposition".into(),
        });
    }
    // Symmetrize against round-off before decomposing.
    let mt = m.transpose();
    m = (m + mt) * 0.5;
    let eig = m.symmetric_eigen();
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok((vals, eig.eigenvectors))
}

/// Layerwise Kronecker factors of the GGN. Per layer,
/// `A = (1/N) Σ_n ã_n ã_nᵀ` over bias-extended inputs and
/// `G = Σ_n Σ_c δ_{n,c} δ_{n,c}ᵀ` over backpropagated factor columns, so
/// `G ⊗ A` reproduces the exact GGN for a linear probe at `N = 1`.
pub fn ggn_kron(
    params: &ProbeParams,
    x: &DMatrix<f64>,
    y: &[usize],
) -> Result<CurvatureApprox> {
    let _ = y;
    let layout = &params.layout;
    let num_layers = layout.num_layers();
    let n = x.nrows();

    let mut a_sums: Vec<DMatrix<f64>> = Vec::with_capacity(num_layers);
    let mut g_sums: Vec<DMatrix<f64>> = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let g = &layout.groups[layout.weight_group(l)];
        a_sums.push(DMatrix::zeros(g.fan_in + 1, g.fan_in + 1));
        g_sums.push(DMatrix::zeros(g.fan_out, g.fan_out));
    }

    if n > 0 {
        let cache = forward_batch(params, x);
        let probs = softmax_rows(&cache.logits);
        for (l, a_sum) in a_sums.iter_mut().enumerate() {
            let a = &cache.inputs[l];
            let mut ext = DMatrix::zeros(n, a.ncols() + 1);
            ext.view_mut((0, 0), (n, a.ncols())).copy_from(a);
            for row in 0..n {
                ext[(row, a.ncols())] = 1.0;
            }
            *a_sum = ext.transpose() * &ext / n as f64;
        }
        for dlogits in loss_hessian_factor_columns(&probs) {
            let deltas = backprop_deltas(params, &cache, &dlogits);
            for (l, delta) in deltas.iter().enumerate() {
                g_sums[l] += delta.transpose() * delta;
            }
        }
    }

    let mut blocks = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let wg_idx = layout.weight_group(l);
        let wg = &layout.groups[wg_idx];
        let bg = &layout.groups[wg_idx + 1];
        let (a_eigvals, a_eigvecs) = symmetric_eigen_clamped(a_sums[l].clone())?;
        let (g_eigvals, g_eigvecs) = symmetric_eigen_clamped(g_sums[l].clone())?;
        blocks.push(KronBlock {
            layer: l,
            offset: wg.offset,
            len: wg.len + bg.len,
            groups: vec![wg_idx, wg_idx + 1],
            a_eigvals,
            a_eigvecs,
            g_eigvals,
            g_eigvecs,
        });
    }
    Ok(CurvatureApprox::Kron { blocks })
}

fn block_precision(prec: &PriorPrecisions, block: &KronBlock) -> f64 {
    match prec.mode {
        PrecisionMode::Scalar => prec.values[0],
        PrecisionMode::PerGroup => prec.values[block.groups[0]],
        PrecisionMode::PerParameter => unreachable!("checked by caller"),
    }
}

/// Log-determinant of the posterior precision `H + Λ`.
///
/// Diagonal: `Σ_i log(c_i + λ_i)`. Kron: per block with factor
/// eigenvalues `a_i`, `g_j` and block precision `λ`,
/// `Σ_ij log(a_i·g_j + λ)`.
pub fn log_det_posterior(
    curvature: &CurvatureApprox,
    prec: &PriorPrecisions,
    layout: &ParameterLayout,
) -> Result<f64> {
    prec.validate(layout)?;
    match curvature {
        CurvatureApprox::Diagonal { diag } => {
            let lambda = prec.expand(layout)?;
            if diag.len() != layout.total_len() {
                return Err(Error::DimMismatch {
                    expected: layout.total_len(),
                    got: diag.len(),
                    context: "diagonal curvature".into(),
                });
            }
            let mut total = 0.0;
            for (c, l) in diag.iter().zip(lambda.iter()) {
                let ev = c + l;
                assert!(ev > 0.0, "posterior eigenvalue must be positive");
                total += ev.ln();
            }
            Ok(total)
        }
        CurvatureApprox::Kron { blocks } => {
            if prec.mode == PrecisionMode::PerParameter {
                return Err(Error::IncompatiblePrecisionMode {
                    mode: prec.mode.to_string(),
                    kind: "kron".into(),
                });
            }
            let covered: usize = blocks.iter().map(|b| b.len).sum();
            if covered != layout.total_len() {
                return Err(Error::DimMismatch {
                    expected: layout.total_len(),
                    got: covered,
                    context: "kron curvature blocks".into(),
                });
            }
            let mut total = 0.0;
            for block in blocks {
                assert_eq!(
                    block.len,
                    block.a_eigvals.len() * block.g_eigvals.len(),
                    "kron block shape"
                );
                let lambda = block_precision(prec, block);
                for e in block.eig_products() {
                    let ev = e + lambda;
                    assert!(ev > 0.0, "posterior eigenvalue must be positive");
                    total += ev.ln();
                }
            }
            Ok(total)
        }
    }
}

/// The additive pieces of the Laplace log evidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceParts {
    pub nll_at_map: f64,
    pub log_prior_at_map: f64,
    pub half_logdet_posterior: f64,
    pub half_d_log_2pi: f64,
}

impl EvidenceParts {
    pub fn log_evidence(&self) -> f64 {
        -self.nll_at_map + self.log_prior_at_map + self.half_d_log_2pi
            - self.half_logdet_posterior
    }
}

/// A completed Laplace fit: MAP parameters, curvature, precisions, and
/// the evidence with its decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorFit {
    pub theta: DVector<f64>,
    pub layout: ParameterLayout,
    pub arch: Option<ProbeArchitecture>,
    pub curvature: CurvatureApprox,
    pub precisions: PriorPrecisions,
    pub log_evidence: f64,
    pub parts: EvidenceParts,
    pub n_examples: usize,
    pub data_fingerprint: u64,
}

impl PosteriorFit {
    pub fn log_evidence_per_example(&self) -> f64 {
        if self.n_examples == 0 {
            0.0
        } else {
            self.log_evidence / self.n_examples as f64
        }
    }
}

/// Stable hash of a labeled design matrix, used to guard comparisons of
/// fits across datasets.
pub fn data_fingerprint(x: &DMatrix<f64>, y: &[usize]) -> u64 {
    let mut bytes = Vec::with_capacity(16 + 8 * (x.len() + y.len()));
    bytes.extend_from_slice(&(x.nrows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(x.ncols() as u64).to_le_bytes());
    for row in 0..x.nrows() {
        for col in 0..x.ncols() {
            bytes.extend_from_slice(&x[(row, col)].to_bits().to_le_bytes());
        }
    }
    for &yn in y {
        bytes.extend_from_slice(&(yn as u64).to_le_bytes());
    }
    fnv1a64(&bytes)
}

/// Assemble a Laplace fit from a flat MAP vector and its pieces. The
/// probe-level [`log_evidence`] wraps this; it is also usable for other
/// models that provide their own nll and curvature.
#[allow(clippy::too_many_arguments)]
pub fn log_evidence_flat(
    theta: DVector<f64>,
    layout: ParameterLayout,
    arch: Option<ProbeArchitecture>,
    nll_at_map: f64,
    curvature: CurvatureApprox,
    precisions: PriorPrecisions,
    n_examples: usize,
    data_fingerprint: u64,
) -> Result<PosteriorFit> {
    let lp = log_prior_flat(&theta, &layout, &precisions)?;
    let logdet = log_det_posterior(&curvature, &precisions, &layout)?;
    let parts = EvidenceParts {
        nll_at_map,
        log_prior_at_map: lp,
        half_logdet_posterior: 0.5 * logdet,
        half_d_log_2pi: 0.5 * layout.total_len() as f64 * LN_2PI,
    };
    let log_evidence = parts.log_evidence();
    if !log_evidence.is_finite() {
        return Err(Error::NonFinite {
            what: "log evidence".into(),
        });
    }
    Ok(PosteriorFit {
        theta,
        layout,
        arch,
        curvature,
        precisions,
        log_evidence,
        parts,
        n_examples,
        data_fingerprint,
    })
}

/// Laplace log evidence of a probe at its MAP.
pub fn log_evidence(
    theta_map: &ProbeParams,
    curvature: CurvatureApprox,
    precisions: PriorPrecisions,
    x: &DMatrix<f64>,
    y: &[usize],
) -> Result<PosteriorFit> {
    let nll = probes::nll(theta_map, x, y);
    log_evidence_flat(
        theta_map.theta.clone(),
        theta_map.layout.clone(),
        Some(theta_map.arch),
        nll,
        curvature,
        precisions,
        y.len(),
        data_fingerprint(x, y),
    )
}

fn group_grad(lambda: f64, d_g: f64, theta_sq: f64, inv_sum: f64) -> f64 {
    0.5 * lambda * (d_g / lambda - theta_sq - inv_sum)
}

/// Gradient of the Laplace log evidence with respect to the log prior
/// precisions, holding θ* and the curvature fixed. For group `g`:
/// `∂logZ/∂log λ_g = ½·λ_g·(d_g/λ_g − ‖θ_g‖² − Σ_k 1/(e_k + λ_g))`.
/// The result is aligned with `precisions.values`; in kron mode the
/// weight and bias entries of a layer receive the shared block gradient.
pub fn marglik_grad_log_prec(fit: &PosteriorFit, layout: &ParameterLayout) -> Result<Vec<f64>> {
    let prec = &fit.precisions;
    prec.validate(layout)?;
    let theta = &fit.theta;
    match (&fit.curvature, prec.mode) {
        (CurvatureApprox::Kron { .. }, PrecisionMode::PerParameter) => {
            Err(Error::IncompatiblePrecisionMode {
                mode: prec.mode.to_string(),
                kind: "kron".into(),
            })
        }
        (CurvatureApprox::Diagonal { diag }, mode) => {
            let mut out = vec![0.0; prec.values.len()];
            match mode {
                PrecisionMode::Scalar => {
                    let lambda = prec.values[0];
                    let inv: f64 = diag.iter().map(|c| 1.0 / (c + lambda)).sum();
                    out[0] = group_grad(
                        lambda,
                        theta.len() as f64,
                        theta.norm_squared(),
                        inv,
                    );
                }
                PrecisionMode::PerGroup => {
                    for (g, group) in layout.groups.iter().enumerate() {
                        let lambda = prec.values[g];
                        let mut theta_sq = 0.0;
                        let mut inv = 0.0;
                        for i in group.offset..group.offset + group.len {
                            theta_sq += theta[i] * theta[i];
                            inv += 1.0 / (diag[i] + lambda);
                        }
                        out[g] = group_grad(lambda, group.len as f64, theta_sq, inv);
                    }
                }
                PrecisionMode::PerParameter => {
                    for i in 0..theta.len() {
                        let lambda = prec.values[i];
                        out[i] = group_grad(
                            lambda,
                            1.0,
                            theta[i] * theta[i],
                            1.0 / (diag[i] + lambda),
                        );
                    }
                }
            }
            Ok(out)
        }
        (CurvatureApprox::Kron { blocks }, mode) => {
            let mut out = vec![0.0; prec.values.len()];
            match mode {
                PrecisionMode::Scalar => {
                    let lambda = prec.values[0];
                    let mut inv = 0.0;
                    for block in blocks {
                        for e in block.eig_products() {
                            inv += 1.0 / (e + lambda);
                        }
                    }
                    out[0] = group_grad(
                        lambda,
                        theta.len() as f64,
                        theta.norm_squared(),
                        inv,
                    );
                }
                PrecisionMode::PerGroup => {
                    for block in blocks {
                        let lambda = block_precision(prec, block);
                        let mut theta_sq = 0.0;
                        for i in block.offset..block.offset + block.len {
                            theta_sq += theta[i] * theta[i];
                        }
                        let inv: f64 = block
                            .eig_products()
                            .iter()
                            .map(|e| 1.0 / (e + lambda))
                            .sum();
                        let grad =
                            group_grad(lambda, block.len as f64, theta_sq, inv);
                        for &g in &block.groups {
                            out[g] = grad;
                        }
                    }
                }
                PrecisionMode::PerParameter => unreachable!(),
            }
            Ok(out)
        }
    }
}

/// Minimal single-logit binary logistic model, `p(y=1|x) = σ(wᵀx)` with
/// no bias. This is the smallest case where the Laplace machinery can be
/// checked against exact integration of the evidence; it shares the
/// curvature and evidence code paths with the probe models.
pub mod logistic {
    use super::*;

    fn sigmoid(z: f64) -> f64 {
        1.0 / (1.0 + (-z).exp())
    }

    /// Single-group layout over `d` weights.
    pub fn layout(d: usize) -> ParameterLayout {
        ParameterLayout {
            groups: vec![crate::probes::ParamGroup {
                name: "weights".into(),
                offset: 0,
                len: d,
                layer: 0,
                is_bias: false,
                fan_in: d,
                fan_out: 1,
            }],
        }
    }

    /// Bernoulli negative log likelihood; `y` entries are 0 or 1.
    pub fn nll(w: &DVector<f64>, x: &DMatrix<f64>, y: &[usize]) -> f64 {
        let mut total = 0.0;
        for (row, &yn) in x.row_iter().zip(y) {
            let z = row.transpose().dot(w);
            // log(1 + e^z) - y·z, computed stably.
            let softplus = if z > 0.0 {
                z + (-z).exp().ln_1p()
            } else {
                z.exp().ln_1p()
            };
            total += softplus - yn as f64 * z;
        }
        total
    }

    /// Newton iteration for the MAP of `nll + λ/2·‖w‖²`.
    pub fn map(x: &DMatrix<f64>, y: &[usize], lambda: f64, iters: usize) -> DVector<f64> {
        let d = x.ncols();
        let mut w = DVector::zeros(d);
        for _ in 0..iters {
            let mut grad = &w * lambda;
            let mut hess = DMatrix::identity(d, d) * lambda;
            for (row, &yn) in x.row_iter().zip(y) {
                let xr = row.transpose();
                let p = sigmoid(xr.dot(&w));
                grad += &xr * (p - yn as f64);
                hess += &xr * xr.transpose() * (p * (1.0 - p));
            }
            let step = hess
                .lu()
                .solve(&grad)
                .expect("logistic Newton system is positive definite");
            w -= step;
        }
        w
    }

    /// Single-block Kronecker curvature holding the exact logistic GGN:
    /// with one output group the factorization is not an approximation,
    /// so `G = [1]` and `A = Σ p(1-p) x xᵀ` (the full Hessian of the nll).
    pub fn kron_curvature(
        w: &DVector<f64>,
        x: &DMatrix<f64>,
        y: &[usize],
    ) -> Result<CurvatureApprox> {
        let _ = y;
        let d = x.ncols();
        let mut a_sum = DMatrix::zeros(d, d);
        for row in x.row_iter() {
            let p = sigmoid(row.transpose().dot(w));
            a_sum += p * (1.0 - p) * row.transpose() * row;
        }
        let g = 1.0f64;
        let (a_eigvals, a_eigvecs) = symmetric_eigen_clamped(a_sum)?;
        Ok(CurvatureApprox::Kron {
            blocks: vec![KronBlock {
                layer: 0,
                offset: 0,
                len: d,
                groups: vec![0],
                a_eigvals,
                a_eigvecs,
                g_eigvals: DVector::from_element(1, g.max(0.0)),
                g_eigvecs: DMatrix::identity(1, 1),
            }],
        })
    }

    /// MAP + Laplace evidence for one logistic instance.
    pub fn fit(x: &DMatrix<f64>, y: &[usize], lambda: f64) -> Result<PosteriorFit> {
        let w = map(x, y, lambda, 50);
        let curvature = kron_curvature(&w, x, y)?;
        let nll_at_map = nll(&w, x, y);
        let layout = layout(x.ncols());
        log_evidence_flat(
            w,
            layout,
            None,
            nll_at_map,
            curvature,
            PriorPrecisions::scalar(lambda),
            y.len(),
            data_fingerprint(x, y),
        )
    }
}
