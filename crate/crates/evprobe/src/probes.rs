//! The probe family: linear and 1–2-hidden-layer tanh networks with a
//! softmax output, their parameter layout into regularization groups, the
//! categorical likelihood, and the Gaussian prior.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "EVPROBE1";

/// ln(2π), shared with the evidence assembly so the normalization terms
/// of the prior and the Laplace volume cancel exactly.
pub(crate) const LN_2PI: f64 = 1.8378770664093453;

/// Feed-forward architecture: `depth` hidden layers (0 = linear probe)
/// of `hidden_width` tanh units, softmax over `num_classes` outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeArchitecture {
    pub depth: usize,
    pub hidden_width: usize,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ProbeArchitecture {
    pub fn linear(input_dim: usize, num_classes: usize) -> Self {
        Self {
            depth: 0,
            hidden_width: 100,
            input_dim,
            num_classes,
        }
    }

    pub fn mlp(depth: usize, input_dim: usize, num_classes: usize) -> Self {
        Self {
            depth,
            hidden_width: 100,
            input_dim,
            num_classes,
        }
    }

    /// The default family: linear, MLP-1, MLP-2 with 100 hidden units.
    pub fn default_family(input_dim: usize, num_classes: usize) -> Vec<Self> {
        (0..=2).map(|d| Self::mlp(d, input_dim, num_classes)).collect()
    }

    pub fn name(&self) -> String {
        match self.depth {
            0 => "linear".to_string(),
            d => format!("mlp{d}"),
        }
    }

    /// (fan_in, fan_out) per layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        assert!(self.depth <= 2, "probe family covers depth 0..=2");
        assert!(self.input_dim > 0 && self.num_classes >= 2);
        let mut dims = Vec::with_capacity(self.depth + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.depth {
            dims.push((fan_in, self.hidden_width));
            fan_in = self.hidden_width;
        }
        dims.push((fan_in, self.num_classes));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|(fi, fo)| fi * fo + fo)
            .sum()
    }

    /// One regularization group per weight matrix and one per bias vector
    /// of each layer; weights are stored row-major (fan_out × fan_in).
    pub fn layout(&self) -> ParameterLayout {
        let mut groups = Vec::new();
        let mut offset = 0;
        for (l, (fi, fo)) in self.layer_dims().into_iter().enumerate() {
            groups.push(ParamGroup {
                name: format!("layer{l}.weight"),
                offset,
                len: fi * fo,
                layer: l,
                is_bias: false,
                fan_in: fi,
                fan_out: fo,
            });
            offset += fi * fo;
            groups.push(ParamGroup {
                name: format!("layer{l}.bias"),
                offset,
                len: fo,
                layer: l,
                is_bias: true,
                fan_in: fi,
                fan_out: fo,
            });
            offset += fo;
        }
        ParameterLayout { groups }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub layer: usize,
    pub is_bias: bool,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Ordered, disjoint groups covering the flat parameter vector exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterLayout {
    pub groups: Vec<ParamGroup>,
}

impl ParameterLayout {
    pub fn total_len(&self) -> usize {
        self.groups.iter().map(|g| g.len).sum()
    }

    pub fn num_layers(&self) -> usize {
        self.groups.iter().map(|g| g.layer + 1).max().unwrap_or(0)
    }

    /// Index of the weight group of a layer.
    pub fn weight_group(&self, layer: usize) -> usize {
        self.groups
            .iter()
            .position(|g| g.layer == layer && !g.is_bias)
            .expect("layer exists")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionMode {
    Scalar,
    PerGroup,
    PerParameter,
}

impl std::fmt::Display for PrecisionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PrecisionMode::Scalar => "scalar",
            PrecisionMode::PerGroup => "per_group",
            PrecisionMode::PerParameter => "per_parameter",
        };
        f.write_str(s)
    }
}

/// Gaussian prior precisions: one value, one per group, or one per
/// parameter. All values must be strictly positive and finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorPrecisions {
    pub mode: PrecisionMode,
    pub values: Vec<f64>,
}

impl PriorPrecisions {
    pub fn scalar(value: f64) -> Self {
        Self {
            mode: PrecisionMode::Scalar,
            values: vec![value],
        }
    }

    pub fn per_group(layout: &ParameterLayout, value: f64) -> Self {
        Self {
            mode: PrecisionMode::PerGroup,
            values: vec![value; layout.groups.len()],
        }
    }

    pub fn per_parameter(layout: &ParameterLayout, value: f64) -> Self {
        Self {
            mode: PrecisionMode::PerParameter,
            values: vec![value; layout.total_len()],
        }
    }

    pub fn validate(&self, layout: &ParameterLayout) -> Result<()> {
        let expected = match self.mode {
            PrecisionMode::Scalar => 1,
            PrecisionMode::PerGroup => layout.groups.len(),
            PrecisionMode::PerParameter => layout.total_len(),
        };
        if self.values.len() != expected {
            return Err(Error::PrecisionShape {
                mode: self.mode.to_string(),
                expected,
                got: self.values.len(),
            });
        }
        for &v in &self.values {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::NonPositivePrecision { value: v });
            }
        }
        Ok(())
    }

    /// Broadcast to one effective precision per parameter.
    pub fn expand(&self, layout: &ParameterLayout) -> Result<DVector<f64>> {
        self.validate(layout)?;
        let d = layout.total_len();
        let mut out = DVector::zeros(d);
        match self.mode {
            PrecisionMode::Scalar => out.fill(self.values[0]),
            PrecisionMode::PerGroup => {
                for (g, group) in layout.groups.iter().enumerate() {
                    for i in group.offset..group.offset + group.len {
                        out[i] = self.values[g];
                    }
                }
            }
            PrecisionMode::PerParameter => {
                for (i, &v) in self.values.iter().enumerate() {
                    out[i] = v;
                }
            }
        }
        Ok(out)
    }
}

/// A probe's flat parameter vector plus its layout and architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams {
    pub theta: DVector<f64>,
    pub layout: ParameterLayout,
    pub arch: ProbeArchitecture,
}

impl ProbeParams {
    pub fn zeros(arch: ProbeArchitecture) -> Self {
        let layout = arch.layout();
        Self {
            theta: DVector::zeros(layout.total_len()),
            layout,
            arch,
        }
    }

    /// Rehydrate probe parameters from a flat vector.
    pub fn from_theta(arch: ProbeArchitecture, theta: DVector<f64>) -> Self {
        let layout = arch.layout();
        assert_eq!(theta.len(), layout.total_len(), "theta length mismatch");
        Self {
            theta,
            layout,
            arch,
        }
    }

    /// Weight matrix (fan_out × fan_in) of a layer, copied out of the
    /// flat vector.
    pub fn weight(&self, layer: usize) -> DMatrix<f64> {
        let g = &self.layout.groups[self.layout.weight_group(layer)];
        DMatrix::from_row_slice(
            g.fan_out,
            g.fan_in,
            &self.theta.as_slice()[g.offset..g.offset + g.len],
        )
    }

    pub fn bias(&self, layer: usize) -> DVector<f64> {
        let g = &self.layout.groups[self.layout.weight_group(layer) + 1];
        DVector::from_column_slice(&self.theta.as_slice()[g.offset..g.offset + g.len])
    }
}

/// Initialize a probe: weights uniform in ±sqrt(6/(fan_in+fan_out)),
/// biases zero. Deterministic given the seed.
pub fn init_params(arch: ProbeArchitecture, seed: u64) -> ProbeParams {
    let layout = arch.layout();
    let mut theta = DVector::zeros(layout.total_len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in &layout.groups {
        if g.is_bias {
            continue;
        }
        let bound = (6.0 / (g.fan_in + g.fan_out) as f64).sqrt();
        for i in g.offset..g.offset + g.len {
            theta[i] = rng.gen_range(-bound..bound);
        }
    }
    ProbeParams {
        theta,
        layout,
        arch,
    }
}

/// Cached batch forward pass. `inputs[l]` is the N×fan_in input to layer
/// `l` (the design matrix for `l = 0`, post-tanh activations after).
pub struct ForwardCache {
    pub inputs: Vec<DMatrix<f64>>,
    pub logits: DMatrix<f64>,
}

/// Batched affine chain with tanh between hidden layers and no activation
/// on the output layer.
pub fn forward_batch(params: &ProbeParams, x: &DMatrix<f64>) -> ForwardCache {
    assert_eq!(
        x.ncols(),
        params.arch.input_dim,
        "design matrix width must equal the probe input dimension"
    );
    let num_layers = params.layout.num_layers();
    let mut inputs = Vec::with_capacity(num_layers);
    let mut a = x.clone();
    for l in 0..num_layers {
        let w = params.weight(l);
        let b = params.bias(l);
        let mut z = &a * w.transpose();
        for mut row in z.row_iter_mut() {
            row += b.transpose();
        }
        inputs.push(a);
        a = if l + 1 < num_layers {
            z.map(f64::tanh)
        } else {
            z
        };
    }
    ForwardCache { inputs, logits: a }
}

/// Logits for a single input vector.
pub fn forward(params: &ProbeParams, h: &DVector<f64>) -> DVector<f64> {
    let x = DMatrix::from_row_slice(1, h.len(), h.as_slice());
    let cache = forward_batch(params, &x);
    cache.logits.row(0).transpose()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = logits.clone();
    for mut row in p.row_iter_mut() {
        let m = row.max();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
        }
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    p
}

/// Sum over examples of −log softmax(logits)[y_n], in nats.
pub fn nll_from_logits(logits: &DMatrix<f64>, y: &[usize]) -> f64 {
    assert_eq!(logits.nrows(), y.len());
    let mut total = 0.0;
    for (row, &yn) in logits.row_iter().zip(y) {
        let m = row.max();
        let lse: f64 = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        total += lse - row[yn];
    }
    total
}

/// Negative log likelihood of the labels under the probe.
pub fn nll(params: &ProbeParams, x: &DMatrix<f64>, y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    nll_from_logits(&forward_batch(params, x).logits, y)
}

/// Backpropagate per-example output-space vectors to pre-activation
/// deltas at every layer. `dlogits` is N×C; returns one N×fan_out matrix
/// per layer, input to output.
pub fn backprop_deltas(
    params: &ProbeParams,
    cache: &ForwardCache,
    dlogits: &DMatrix<f64>,
) -> Vec<DMatrix<f64>> {
    let num_layers = params.layout.num_layers();
    let mut deltas = vec![DMatrix::zeros(0, 0); num_layers];
    let mut delta = dlogits.clone();
    for l in (0..num_layers).rev() {
        deltas[l] = delta.clone();
        if l > 0 {
            let w = params.weight(l);
            let mut da = delta * w;
            // inputs[l] holds tanh(z_{l-1}); tanh' = 1 - a^2.
            let a = &cache.inputs[l];
            for (v, av) in da.iter_mut().zip(a.iter()) {
                *v *= 1.0 - av * av;
            }
            delta = da;
        }
    }
    deltas
}

/// Assemble a flat gradient from per-layer deltas: dW_l = Δ_lᵀ A_l,
/// db_l = column sums of Δ_l.
pub fn grad_from_deltas(
    params: &ProbeParams,
    cache: &ForwardCache,
    deltas: &[DMatrix<f64>],
) -> DVector<f64> {
    let mut grad = DVector::zeros(params.theta.len());
    for (l, delta) in deltas.iter().enumerate() {
        let gw = delta.transpose() * &cache.inputs[l];
        let wg = &params.layout.groups[params.layout.weight_group(l)];
        for r in 0..gw.nrows() {
            for c in 0..gw.ncols() {
                grad[wg.offset + r * gw.ncols() + c] = gw[(r, c)];
            }
        }
        let bg = &params.layout.groups[params.layout.weight_group(l) + 1];
        for c in 0..delta.ncols() {
            grad[bg.offset + c] = delta.column(c).sum();
        }
    }
    grad
}

/// Value and gradient of the nll over a batch.
pub fn grad_nll(
    params: &ProbeParams,
    x: &DMatrix<f64>,
    y: &[usize],
) -> (f64, DVector<f64>) {
    if y.is_empty() {
        return (0.0, DVector::zeros(params.theta.len()));
    }
    let cache = forward_batch(params, x);
    let value = nll_from_logits(&cache.logits, y);
    let mut dlogits = softmax_rows(&cache.logits);
    for (i, &yn) in y.iter().enumerate() {
        dlogits[(i, yn)] -= 1.0;
    }
    let deltas = backprop_deltas(params, &cache, &dlogits);
    (value, grad_from_deltas(params, &cache, &deltas))
}

/// Gaussian log prior: Σ_i ½(log λ_i − log 2π − λ_i θ_i²), with λ_i the
/// effective per-parameter precision.
pub fn log_prior(params: &ProbeParams, prec: &PriorPrecisions) -> Result<f64> {
    log_prior_flat(&params.theta, &params.layout, prec)
}

/// [`log_prior`] on a bare flat vector.
pub fn log_prior_flat(
    theta: &DVector<f64>,
    layout: &ParameterLayout,
    prec: &PriorPrecisions,
) -> Result<f64> {
    let lambda = prec.expand(layout)?;
    // The log precision and quadratic sums are accumulated separately,
    // in expansion order, so they cancel bitwise against the posterior
    // log determinant in the evidence at the prior-only limit.
    let mut sum_ln = 0.0;
    let mut quad = 0.0;
    for (li, ti) in lambda.iter().zip(theta.iter()) {
        sum_ln += li.ln();
        quad += li * ti * ti;
    }
    Ok(0.5 * sum_ln - 0.5 * theta.len() as f64 * LN_2PI - 0.5 * quad)
}

/// Gradient of −log_prior with respect to θ: λ ∘ θ.
pub fn grad_neg_log_prior(
    params: &ProbeParams,
    prec: &PriorPrecisions,
) -> Result<DVector<f64>> {
    let lambda = prec.expand(&params.layout)?;
    Ok(lambda.component_mul(&params.theta))
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    magic: String,
    arch: ProbeArchitecture,
    layout: ParameterLayout,
    theta: Vec<f64>,
    precisions: PriorPrecisions,
    seed: u64,
}

/// Write a probe checkpoint (versioned JSON record).
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ProbeParams,
    precisions: &PriorPrecisions,
    seed: u64,
) -> Result<()> {
    let path = path.as_ref();
    let ckpt = Checkpoint {
        magic: CHECKPOINT_MAGIC.to_string(),
        arch: params.arch,
        layout: params.layout.clone(),
        theta: params.theta.iter().copied().collect(),
        precisions: precisions.clone(),
        seed,
    };
    let file = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer(&mut w, &ckpt)?;
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Read a probe checkpoint, validating the magic string and shapes.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(ProbeParams, PriorPrecisions, u64)> {
    let path = path.as_ref();
    let data = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let ckpt: Checkpoint = serde_json::from_str(&data)?;
    if ckpt.magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {CHECKPOINT_MAGIC:?}",
            ckpt.magic
        )));
    }
    if ckpt.theta.len() != ckpt.arch.param_count() {
        return Err(Error::Checkpoint(format!(
            "theta length {} does not match architecture ({} params)",
            ckpt.theta.len(),
            ckpt.arch.param_count()
        )));
    }
    let params = ProbeParams {
        theta: DVector::from_vec(ckpt.theta),
        layout: ckpt.layout,
        arch: ckpt.arch,
    };
    ckpt.precisions.validate(&params.layout)?;
    Ok((params, ckpt.precisions, ckpt.seed))
}
