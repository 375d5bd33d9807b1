//! Batch experiment drivers: representation-comparison tables, weight
//! decay sweeps, ARD precision histograms, and the two-dimensional toy
//! demonstration, plus report re-rendering from serialized fits.
//!
//! Every driver writes uniquely named files under the configured output
//! directory and nothing else, so jobs keyed by (task, representation,
//! seed) never contend. All numeric output goes through `Display`
//! formatting and `serde_json`, both of which round-trip `f64` exactly,
//! which is what makes repeated runs byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, ProbingDataset};
use crate::error::{Error, Result};
use crate::evidence::{
    self, CurvatureKind, MarglikConfig, SelectionResult,
};
use crate::laplace::{self, PosteriorFit};
use crate::probes::{
    forward_batch, nll_from_logits, softmax_rows, PrecisionMode,
    PriorPrecisions, ProbeArchitecture, ProbeParams,
};
use crate::representations::{
    embed_dataset, DesignMatrix, MissingTokenPolicy, Pooling,
    RepresentationKind, RepresentationSpec,
};
use crate::training::{self, TrainConfig};

fn default_train_fraction() -> f64 {
    0.65
}

fn default_depths() -> Vec<usize> {
    vec![0, 1, 2]
}

fn default_hidden_width() -> usize {
    100
}

/// One probing task: a JSONL dataset with optional rare-label filtering
/// and a deterministic type-disjoint split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskConfig {
    pub name: String,
    pub path: PathBuf,
    #[serde(default)]
    pub min_label_count: Option<usize>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

/// One representation column of the comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepConfig {
    pub name: String,
    pub kind: RepresentationKind,
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub pooling: Option<Pooling>,
    #[serde(default)]
    pub missing_token: Option<MissingTokenPolicy>,
}

impl RepConfig {
    pub fn spec(&self) -> Result<RepresentationSpec> {
        let mut spec = match self.kind {
            RepresentationKind::Random => {
                RepresentationSpec::random(self.dim, self.seed)
            }
            RepresentationKind::WordIdentity => {
                RepresentationSpec::word_identity(self.dim, self.seed)
            }
            RepresentationKind::File => {
                let path = self.path.as_ref().ok_or_else(|| {
                    Error::Config(format!(
                        "representation {:?} has kind \"file\" but no path",
                        self.name
                    ))
                })?;
                RepresentationSpec::file(path, self.dim)
            }
        };
        if let Some(p) = self.pooling {
            spec.pooling = p;
        }
        if let Some(m) = self.missing_token {
            spec.missing_token = m;
        }
        Ok(spec)
    }
}

/// Declarative experiment description, read from a TOML file. Every seed
/// and path is explicit; the `[train]` and `[marglik]` sections accept
/// partial overrides of the protocol defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskConfig>,
    pub representations: Vec<RepConfig>,
    #[serde(default = "default_depths")]
    pub depths: Vec<usize>,
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub marglik: MarglikConfig,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.representations.is_empty() {
            return Err(Error::Config(
                "at least one representation is required".into(),
            ));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        if self.depths.is_empty() || self.depths.iter().any(|&d| d > 2) {
            return Err(Error::Config(
                "depths must be a non-empty subset of {0, 1, 2}".into(),
            ));
        }
        Ok(())
    }

    fn find_task(&self, name: Option<&str>) -> Result<&TaskConfig> {
        match name {
            None => Ok(&self.tasks[0]),
            Some(n) => self.tasks.iter().find(|t| t.name == n).ok_or_else(|| {
                Error::Config(format!("no task named {n:?} in config"))
            }),
        }
    }

    fn find_rep(&self, name: Option<&str>) -> Result<&RepConfig> {
        match name {
            None => Ok(&self.representations[0]),
            Some(n) => self
                .representations
                .iter()
                .find(|r| r.name == n)
                .ok_or_else(|| Error::Config(format!("no representation named {n:?}"))),
        }
    }
}

/// A loaded task embedded under one representation: design matrices and
/// class indices for both splits, sharing one label indexing.
pub struct TaskData {
    pub train: DesignMatrix,
    pub test: DesignMatrix,
    pub y_train: Vec<usize>,
    pub y_test: Vec<usize>,
    pub num_classes: usize,
}

/// Load, filter, and split a task dataset.
pub fn prepare_task(task: &TaskConfig) -> Result<ProbingDataset> {
    let ds = dataset::load_dataset(&task.path)?;
    let ds = dataset::split_by_type(&ds, task.train_fraction, task.split_seed)?;
    match task.min_label_count {
        Some(min) => dataset::filter_rare_labels(&ds, min),
        None => Ok(ds),
    }
}

/// Embed both splits of a prepared dataset under one representation.
pub fn embed_task(ds: &ProbingDataset, spec: &RepresentationSpec) -> Result<TaskData> {
    let train_ds = ds.subset("train");
    let test_ds = ds.subset("test");
    let train = embed_dataset(spec, &train_ds)?;
    let test = embed_dataset(spec, &test_ds)?;
    Ok(TaskData {
        train,
        test,
        y_train: train_ds.class_indices(),
        y_test: test_ds.class_indices(),
        num_classes: ds.label_set.len(),
    })
}

/// One (task, representation, seed) job in the comparison manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobEntry {
    pub task: String,
    pub representation: String,
    pub seed: u64,
    pub fit_file: Option<String>,
    pub error: Option<String>,
}

/// Comparison run manifest; `report` rebuilds the table from this plus
/// the per-job selection files, without retraining.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tasks: Vec<String>,
    pub representations: Vec<String>,
    pub jobs: Vec<JobEntry>,
}

/// One cell of the comparison table: a representation evaluated on a
/// task, aggregated over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonCell {
    pub task: String,
    pub representation: String,
    /// Mean over seeds of the per-example log evidence of the chosen probe.
    pub mean_log_evidence_per_example: Option<f64>,
    /// Modal chosen depth over seeds; 0 denotes a linear probe.
    pub chosen_depth: Option<usize>,
    /// Max minus min of the per-seed per-example log evidences.
    pub spread: f64,
    pub n_ok: usize,
    pub best: bool,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub tasks: Vec<String>,
    pub representations: Vec<String>,
    /// Row-major: representations × tasks.
    pub cells: Vec<ComparisonCell>,
}

impl ComparisonTable {
    pub fn cell(&self, task: &str, rep: &str) -> Option<&ComparisonCell> {
        self.cells
            .iter()
            .find(|c| c.task == task && c.representation == rep)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "task,representation,mean_log_evidence_per_example,chosen_depth,spread,n_ok,best,errors\n",
        );
        for c in &self.cells {
            let mean = c
                .mean_log_evidence_per_example
                .map(|v| v.to_string())
                .unwrap_or_default();
            let depth = c.chosen_depth.map(|d| d.to_string()).unwrap_or_default();
            let errors = c.errors.join("; ").replace(['\n', ','], " ");
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.task, c.representation, mean, depth, c.spread, c.n_ok, c.best, errors
            ));
        }
        out
    }

    pub fn any_errors(&self) -> bool {
        self.cells.iter().any(|c| !c.errors.is_empty())
    }
}

fn job_file_name(job: &JobEntry) -> String {
    format!(
        "fits/{}__{}__seed{}.json",
        job.task, job.representation, job.seed
    )
}

fn build_table(
    manifest: &Manifest,
    selections: &BTreeMap<String, SelectionResult>,
) -> ComparisonTable {
    let mut cells = Vec::new();
    for rep in &manifest.representations {
        for task in &manifest.tasks {
            let mut per_seed = Vec::new();
            let mut depths = Vec::new();
            let mut errors = Vec::new();
            for job in manifest
                .jobs
                .iter()
                .filter(|j| &j.task == task && &j.representation == rep)
            {
                if let Some(e) = &job.error {
                    errors.push(format!("seed {}: {e}", job.seed));
                    continue;
                }
                let key = job_file_name(job);
                match selections.get(&key) {
                    Some(sel) => {
                        let fit = sel.per_arch[sel.chosen_index]
                            .fit
                            .as_ref()
                            .expect("chosen arch has a fit");
                        per_seed.push(fit.log_evidence_per_example());
                        depths.push(sel.chosen_arch.depth);
                    }
                    None => errors.push(format!("seed {}: fit file missing", job.seed)),
                }
            }
            let n_ok = per_seed.len();
            let mean = (n_ok > 0)
                .then(|| per_seed.iter().sum::<f64>() / n_ok as f64);
            let spread = if n_ok > 1 {
                let max = per_seed.iter().cloned().fold(f64::MIN, f64::max);
                let min = per_seed.iter().cloned().fold(f64::MAX, f64::min);
                max - min
            } else {
                0.0
            };
            // Modal depth; ties break toward the shallower probe.
            let chosen_depth = (0..=2usize)
                .map(|d| (depths.iter().filter(|&&x| x == d).count(), d))
                .filter(|&(n, _)| n > 0)
                .max_by_key(|&(n, d)| (n, std::cmp::Reverse(d)))
                .map(|(_, d)| d);
            cells.push(ComparisonCell {
                task: task.clone(),
                representation: rep.clone(),
                mean_log_evidence_per_example: mean,
                chosen_depth,
                spread,
                n_ok,
                best: false,
                errors,
            });
        }
    }
    // Flag the best representation per task.
    for task in &manifest.tasks {
        let best_rep = cells
            .iter()
            .filter(|c| &c.task == task && c.mean_log_evidence_per_example.is_some())
            .max_by(|a, b| {
                a.mean_log_evidence_per_example
                    .partial_cmp(&b.mean_log_evidence_per_example)
                    .unwrap()
            })
            .map(|c| c.representation.clone());
        if let Some(rep) = best_rep {
            for c in &mut cells {
                if &c.task == task && c.representation == rep {
                    c.best = true;
                }
            }
        }
    }
    ComparisonTable {
        tasks: manifest.tasks.clone(),
        representations: manifest.representations.clone(),
        cells,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    f.write_all(bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn emit_table(out_dir: &Path, manifest: &Manifest, table: &ComparisonTable) -> Result<()> {
    let json = serde_json::to_string_pretty(table)? + "\n";
    write_file(&out_dir.join("comparison.json"), json.as_bytes())?;
    write_file(&out_dir.join("comparison.csv"), table.to_csv().as_bytes())?;
    let mjson = serde_json::to_string_pretty(manifest)? + "\n";
    write_file(&out_dir.join("jobs.json"), mjson.as_bytes())
}

/// Run the full comparison grid and emit `comparison.json`,
/// `comparison.csv`, `jobs.json`, and one selection file per job under
/// `fits/`. Per-job failures are recorded in the table, not fatal.
pub fn run_comparison(cfg: &ExperimentConfig) -> Result<ComparisonTable> {
    cfg.validate()?;
    let out_dir = &cfg.output_dir;
    let mut manifest = Manifest {
        tasks: cfg.tasks.iter().map(|t| t.name.clone()).collect(),
        representations: cfg
            .representations
            .iter()
            .map(|r| r.name.clone())
            .collect(),
        jobs: Vec::new(),
    };
    let mut selections = BTreeMap::new();

    for task in &cfg.tasks {
        let prepared = prepare_task(task);
        for rep in &cfg.representations {
            let data = prepared
                .as_ref()
                .map_err(|e| Error::Config(e.to_string()))
                .and_then(|ds| embed_task(ds, &rep.spec()?));
            for &seed in &cfg.seeds {
                let mut job = JobEntry {
                    task: task.name.clone(),
                    representation: rep.name.clone(),
                    seed,
                    fit_file: None,
                    error: None,
                };
                match &data {
                    Err(e) => job.error = Some(e.to_string()),
                    Ok(data) => {
                        let archs: Vec<ProbeArchitecture> = cfg
                            .depths
                            .iter()
                            .map(|&d| ProbeArchitecture {
                                depth: d,
                                hidden_width: cfg.hidden_width,
                                input_dim: data.train.dim(),
                                num_classes: data.num_classes,
                            })
                            .collect();
                        let train_cfg = TrainConfig {
                            shuffle_seed: seed,
                            ..cfg.train.clone()
                        };
                        match evidence::select_probe(
                            &data.train,
                            &data.y_train,
                            &archs,
                            &train_cfg,
                            &cfg.marglik,
                        ) {
                            Ok(sel) => {
                                let rel = job_file_name(&job);
                                let json = serde_json::to_string(&sel)? + "\n";
                                write_file(&out_dir.join(&rel), json.as_bytes())?;
                                selections.insert(rel.clone(), sel);
                                job.fit_file = Some(rel);
                            }
                            Err(e) => job.error = Some(e.to_string()),
                        }
                    }
                }
                manifest.jobs.push(job);
            }
        }
    }

    let table = build_table(&manifest, &selections);
    emit_table(out_dir, &manifest, &table)?;
    Ok(table)
}

/// Re-render `comparison.json` and `comparison.csv` from the manifest
/// and serialized selection files, without retraining. Byte-identical to
/// the original emission.
pub fn report(out_dir: &Path) -> Result<ComparisonTable> {
    let manifest: Manifest = read_json(&out_dir.join("jobs.json"))?;
    let mut selections = BTreeMap::new();
    for job in &manifest.jobs {
        if let Some(rel) = &job.fit_file {
            let sel: SelectionResult = read_json(&out_dir.join(rel))?;
            selections.insert(rel.clone(), sel);
        }
    }
    let table = build_table(&manifest, &selections);
    emit_table(out_dir, &manifest, &table)?;
    Ok(table)
}

/// Mean cross-entropy of the MAP predictive on (x, y).
pub fn cross_entropy(params: &ProbeParams, x: &DMatrix<f64>, y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let cache = forward_batch(params, x);
    nll_from_logits(&cache.logits, y) / y.len() as f64
}

/// The default weight decay grid: 13 points log-spaced over [1e-4, 1e8].
pub fn default_lambda_grid() -> Vec<f64> {
    (-4..=8).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub train_ce: f64,
    pub test_ce: f64,
    pub log_evidence_per_example: f64,
    pub theta_norm: f64,
}

pub const SWEEP_CSV_HEADER: &str =
    "lambda,train_ce,test_ce,log_evidence_per_example,theta_norm";

pub fn sweep_to_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.lambda, p.train_ce, p.test_ce, p.log_evidence_per_example, p.theta_norm
        ));
    }
    out
}

/// Train at each fixed scalar precision on the grid (no online precision
/// optimization) and record train/test cross-entropy plus the Laplace
/// evidence per example under Kronecker curvature.
pub fn decay_sweep(
    arch: ProbeArchitecture,
    data: &TaskData,
    lambda_grid: &[f64],
    cfg: &TrainConfig,
) -> Result<Vec<SweepPoint>> {
    assert!(!lambda_grid.is_empty(), "lambda grid must be non-empty");
    let mut points = Vec::with_capacity(lambda_grid.len());
    for &lambda in lambda_grid {
        let prec = PriorPrecisions::scalar(lambda);
        let (params, prec, _) = training::train_map(
            arch,
            &data.train.rows,
            &data.y_train,
            prec,
            cfg,
            None,
        )?;
        let curvature =
            laplace::ggn_kron(&params, &data.train.rows, &data.y_train)?;
        let fit = laplace::log_evidence(
            &params,
            curvature,
            prec,
            &data.train.rows,
            &data.y_train,
        )?;
        points.push(SweepPoint {
            lambda,
            train_ce: cross_entropy(&params, &data.train.rows, &data.y_train),
            test_ce: cross_entropy(&params, &data.test.rows, &data.y_test),
            log_evidence_per_example: fit.log_evidence_per_example(),
            theta_norm: params.theta.norm(),
        });
    }
    Ok(points)
}

/// CLI driver for the decay sweep: resolves task and representation from
/// the config, runs the grid with one probe depth, writes one CSV.
pub fn run_decay_sweep(
    cfg: &ExperimentConfig,
    task_name: Option<&str>,
    rep_name: Option<&str>,
    depth: usize,
    lambda_grid: &[f64],
) -> Result<PathBuf> {
    let task = cfg.find_task(task_name)?;
    let rep = cfg.find_rep(rep_name)?;
    let ds = prepare_task(task)?;
    let data = embed_task(&ds, &rep.spec()?)?;
    let arch = ProbeArchitecture {
        depth,
        hidden_width: cfg.hidden_width,
        input_dim: data.train.dim(),
        num_classes: data.num_classes,
    };
    let train_cfg = TrainConfig {
        shuffle_seed: cfg.seeds[0],
        ..cfg.train.clone()
    };
    let points = decay_sweep(arch, &data, lambda_grid, &train_cfg)?;
    let path = cfg
        .output_dir
        .join(format!("sweep_{}__{}.csv", task.name, rep.name));
    write_file(&path, sweep_to_csv(&points).as_bytes())?;
    Ok(path)
}

/// Result of an ARD run: the per-parameter fit plus which weights ended
/// at the zero-out mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArdResult {
    pub fit: PosteriorFit,
    pub log_prec_max: f64,
    /// Parameters with log precision at or above this are counted as
    /// zeroed out (one below the upper clamp).
    pub zero_out_threshold: f64,
    pub fraction_weights_zeroed: f64,
}

impl ArdResult {
    /// Indices of weight (non-bias) parameters.
    pub fn weight_indices(&self) -> Vec<usize> {
        self.fit
            .layout
            .groups
            .iter()
            .filter(|g| !g.is_bias)
            .flat_map(|g| g.offset..g.offset + g.len)
            .collect()
    }
}

pub const ARD_CSV_HEADER: &str =
    "index,group,input_column,precision,log_precision,zeroed";

/// Train a linear probe with one precision per parameter (diagonal
/// curvature) and summarize which weights the evidence zeroes out.
pub fn ard_run(
    design: &DesignMatrix,
    y: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
    mcfg_base: &MarglikConfig,
) -> Result<ArdResult> {
    let arch = ProbeArchitecture::linear(design.dim(), num_classes);
    let mcfg = MarglikConfig {
        precision_mode: PrecisionMode::PerParameter,
        curvature: CurvatureKind::Diagonal,
        ..mcfg_base.clone()
    };
    let (fit, _) = evidence::optimize_marglik(arch, &design.rows, y, cfg, &mcfg)?;
    let threshold = mcfg.log_prec_max - 1.0;
    let layout = fit.layout.clone();
    let weight_idx: Vec<usize> = layout
        .groups
        .iter()
        .filter(|g| !g.is_bias)
        .flat_map(|g| g.offset..g.offset + g.len)
        .collect();
    let zeroed = weight_idx
        .iter()
        .filter(|&&i| fit.precisions.values[i].ln() >= threshold)
        .count();
    Ok(ArdResult {
        fit,
        log_prec_max: mcfg.log_prec_max,
        zero_out_threshold: threshold,
        fraction_weights_zeroed: zeroed as f64 / weight_idx.len().max(1) as f64,
    })
}

pub fn ard_to_csv(result: &ArdResult) -> String {
    let mut out = String::from(ARD_CSV_HEADER);
    out.push('\n');
    let layout = &result.fit.layout;
    for g in &layout.groups {
        for k in 0..g.len {
            let i = g.offset + k;
            // Column of the input the weight reads from; biases get none.
            let col = if g.is_bias {
                String::new()
            } else {
                (k % g.fan_in).to_string()
            };
            let prec = result.fit.precisions.values[i];
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i,
                g.name,
                col,
                prec,
                prec.ln(),
                (!g.is_bias && prec.ln() >= result.zero_out_threshold)
            ));
        }
    }
    out
}

/// CLI driver for ARD: writes the per-parameter CSV and a JSON summary.
pub fn run_ard(
    cfg: &ExperimentConfig,
    task_name: Option<&str>,
    rep_name: Option<&str>,
) -> Result<PathBuf> {
    let task = cfg.find_task(task_name)?;
    let rep = cfg.find_rep(rep_name)?;
    let ds = prepare_task(task)?;
    let data = embed_task(&ds, &rep.spec()?)?;
    let train_cfg = TrainConfig {
        shuffle_seed: cfg.seeds[0],
        ..cfg.train.clone()
    };
    let result = ard_run(
        &data.train,
        &data.y_train,
        data.num_classes,
        &train_cfg,
        &cfg.marglik,
    )?;
    let csv_path = cfg
        .output_dir
        .join(format!("ard_{}__{}.csv", task.name, rep.name));
    write_file(&csv_path, ard_to_csv(&result).as_bytes())?;
    let summary = serde_json::json!({
        "task": task.name,
        "representation": rep.name,
        "log_prec_max": result.log_prec_max,
        "zero_out_threshold": result.zero_out_threshold,
        "fraction_weights_zeroed": result.fraction_weights_zeroed,
        "log_evidence": result.fit.log_evidence,
    });
    let json = serde_json::to_string_pretty(&summary)? + "\n";
    write_file(
        &cfg.output_dir
            .join(format!("ard_{}__{}.json", task.name, rep.name)),
        json.as_bytes(),
    )?;
    Ok(csv_path)
}

/// Settings for the toy demonstration; the defaults are sized so the
/// four fits finish in seconds.
#[derive(Debug, Clone)]
pub struct ToyOptions {
    pub seed: u64,
    pub n_per_blob: usize,
    pub hidden_width: usize,
    pub epochs: usize,
    pub grid_side: usize,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            n_per_blob: 50,
            hidden_width: 10,
            epochs: 200,
            grid_side: 41,
        }
    }
}

/// Two-dimensional XOR blobs: four Gaussian clusters at (±1.5, ±1.5),
/// labeled by the product of coordinate signs. The Bayes boundary is
/// nonlinear, so a linear probe on the coordinates must fail.
pub fn toy_data(opts: &ToyOptions) -> (DMatrix<f64>, Vec<usize>) {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed ^ 0x746f79);
    let n = 4 * opts.n_per_blob;
    let mut x = DMatrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    let centers = [(1.5, 1.5), (-1.5, -1.5), (1.5, -1.5), (-1.5, 1.5)];
    for (b, &(cx, cy)) in centers.iter().enumerate() {
        for i in 0..opts.n_per_blob {
            let r = b * opts.n_per_blob + i;
            let e0: f64 = StandardNormal.sample(&mut rng);
            let e1: f64 = StandardNormal.sample(&mut rng);
            x[(r, 0)] = cx + 0.35 * e0;
            x[(r, 1)] = cy + 0.35 * e1;
            y.push(usize::from(b >= 2));
        }
    }
    (x, y)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyResult {
    /// Keys: optimal_linear, optimal_neural, random_linear, random_neural.
    pub log_evidences: BTreeMap<String, f64>,
    pub fits: BTreeMap<String, PosteriorFit>,
}

/// Fit linear and one-hidden-layer probes on the informative coordinate
/// representation and on a random representation of the same data, and
/// emit log evidences plus predictive grids for the informative fits.
pub fn run_toy(opts: &ToyOptions, out_dir: Option<&Path>) -> Result<ToyResult> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    let (x, y) = toy_data(opts);
    let n = y.len();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed ^ 0x726e64);
    let x_rand = DMatrix::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng));

    let cfg = TrainConfig {
        epochs: opts.epochs,
        shuffle_seed: opts.seed,
        ..TrainConfig::default()
    };
    let mcfg = MarglikConfig::default();

    let mut fits = BTreeMap::new();
    let mut log_evidences = BTreeMap::new();
    let mut params_by_key: BTreeMap<String, ProbeParams> = BTreeMap::new();
    for (rep_name, xs) in [("optimal", &x), ("random", &x_rand)] {
        for depth in [0usize, 1] {
            let arch = ProbeArchitecture {
                depth,
                hidden_width: opts.hidden_width,
                input_dim: 2,
                num_classes: 2,
            };
            let key = format!(
                "{rep_name}_{}",
                if depth == 0 { "linear" } else { "neural" }
            );
            let (fit, _) = evidence::optimize_marglik(arch, xs, &y, &cfg, &mcfg)?;
            params_by_key.insert(
                key.clone(),
                ProbeParams::from_theta(arch, fit.theta.clone()),
            );
            log_evidences.insert(key.clone(), fit.log_evidence);
            fits.insert(key, fit);
        }
    }

    if let Some(dir) = out_dir {
        let result_json = serde_json::to_string_pretty(&serde_json::json!({
            "log_evidences": log_evidences,
        }))? + "\n";
        write_file(&dir.join("toy.json"), result_json.as_bytes())?;
        // Predictive grids only for the coordinate representation; the
        // random representation has no spatial decision surface.
        for key in ["optimal_linear", "optimal_neural"] {
            let params = &params_by_key[key];
            let side = opts.grid_side;
            let mut grid = DMatrix::zeros(side * side, 2);
            for i in 0..side {
                for j in 0..side {
                    let u = -3.0 + 6.0 * (i as f64) / (side as f64 - 1.0);
                    let v = -3.0 + 6.0 * (j as f64) / (side as f64 - 1.0);
                    grid[(i * side + j, 0)] = u;
                    grid[(i * side + j, 1)] = v;
                }
            }
            let probs = softmax_rows(&forward_batch(params, &grid).logits);
            let mut csv = String::from("x0,x1,p0,p1\n");
            for r in 0..side * side {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    grid[(r, 0)],
                    grid[(r, 1)],
                    probs[(r, 0)],
                    probs[(r, 1)]
                ));
            }
            write_file(&dir.join(format!("toy_grid_{key}.csv")), csv.as_bytes())?;
        }
    }

    Ok(ToyResult {
        log_evidences,
        fits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_grid_spans_thirteen_decades() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 13);
        assert_eq!(g[0], 1e-4);
        assert_eq!(g[12], 1e8);
        for w in g.windows(2) {
            assert!((w[1] / w[0] - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn config_parses_with_defaults() {
        let text = r#"
            output_dir = "out"
            seeds = [0, 1]

            [[tasks]]
            name = "t"
            path = "data.jsonl"

            [[representations]]
            name = "rand768"
            kind = "random"
            dim = 768

            [train]
            epochs = 10
        "#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.depths, vec![0, 1, 2]);
        assert_eq!(cfg.hidden_width, 100);
        assert_eq!(cfg.train.epochs, 10);
        assert_eq!(cfg.train.lr, 0.1);
        assert_eq!(cfg.marglik.steps_per_phase, 100);
        assert!((cfg.tasks[0].train_fraction - 0.65).abs() < 1e-12);
    }

    #[test]
    fn config_rejects_empty_seeds() {
        let text = r#"
            output_dir = "out"
            seeds = []
            [[tasks]]
            name = "t"
            path = "d.jsonl"
            [[representations]]
            name = "r"
            kind = "random"
            dim = 4
        "#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toy_data_is_balanced_and_nonlinear() {
        let opts = ToyOptions::default();
        let (x, y) = toy_data(&opts);
        assert_eq!(x.nrows(), 200);
        let ones = y.iter().filter(|&&c| c == 1).count();
        assert_eq!(ones, 100);
        // Class correlates with the sign product, not either coordinate.
        let mut agree = 0;
        for (i, &c) in y.iter().enumerate() {
            let xor = usize::from(x[(i, 0)] * x[(i, 1)] < 0.0);
            agree += usize::from(xor == c);
        }
        assert!(agree >= 190, "xor structure broken: {agree}/200");
    }

    #[test]
    fn sweep_prior_dominated_limit() {
        // At huge λ the probe is pinned near zero: train CE near log C
        // and tiny parameter norm.
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 60;
        let rows = DMatrix::from_fn(n, 4, |_, _| StandardNormal.sample(&mut rng));
        let y: Vec<usize> = (0..n).map(|i| usize::from(rows[(i, 0)] > 0.0)).collect();
        let split = 40;
        let data = TaskData {
            train: DesignMatrix {
                rows: rows.rows(0, split).into_owned(),
                row_ids: (0..split).map(|i| format!("e{i}")).collect(),
                rep_fingerprint: 0,
            },
            test: DesignMatrix {
                rows: rows.rows(split, n - split).into_owned(),
                row_ids: (split..n).map(|i| format!("e{i}")).collect(),
                rep_fingerprint: 0,
            },
            y_train: y[..split].to_vec(),
            y_test: y[split..].to_vec(),
            num_classes: 2,
        };
        let arch = ProbeArchitecture::linear(4, 2);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 64,
            shuffle_seed: 1,
            ..TrainConfig::default()
        };
        let pts = decay_sweep(arch, &data, &[1e6], &cfg).unwrap();
        // Adam hovers at step-size scale around the origin, so "near
        // zero" means well below the initialization norm.
        assert!(pts[0].theta_norm < 0.1, "norm {}", pts[0].theta_norm);
        assert!(
            (pts[0].train_ce - 2.0f64.ln()).abs() < 0.05,
            "train ce {}",
            pts[0].train_ce
        );
        let csv = sweep_to_csv(&pts);
        assert!(csv.starts_with(SWEEP_CSV_HEADER));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn ard_csv_covers_every_parameter() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 80;
        let design = DesignMatrix {
            rows: DMatrix::from_fn(n, 5, |_, _| StandardNormal.sample(&mut rng)),
            row_ids: (0..n).map(|i| format!("e{i}")).collect(),
            rep_fingerprint: 1,
        };
        let y: Vec<usize> = (0..n)
            .map(|i| usize::from(design.rows[(i, 0)] > 0.0))
            .collect();
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 64,
            shuffle_seed: 2,
            ..TrainConfig::default()
        };
        let res = ard_run(&design, &y, 2, &cfg, &MarglikConfig::default()).unwrap();
        let csv = ard_to_csv(&res);
        let arch = ProbeArchitecture::linear(5, 2);
        // Header plus one row per parameter.
        assert_eq!(csv.lines().count(), 1 + arch.param_count());
        assert!((0.0..=1.0).contains(&res.fraction_weights_zeroed));
        assert_eq!(res.weight_indices().len(), 10);
    }

    #[test]
    fn toy_emits_valid_probability_grids() {
        let dir = tempfile::tempdir().unwrap();
        let opts = ToyOptions {
            epochs: 30,
            grid_side: 5,
            ..ToyOptions::default()
        };
        let res = run_toy(&opts, Some(dir.path())).unwrap();
        assert_eq!(res.log_evidences.len(), 4);
        for key in ["optimal_linear", "optimal_neural"] {
            let text =
                fs::read_to_string(dir.path().join(format!("toy_grid_{key}.csv")))
                    .unwrap();
            let mut lines = text.lines();
            assert_eq!(lines.next().unwrap(), "x0,x1,p0,p1");
            let mut rows = 0;
            for line in lines {
                let f: Vec<f64> =
                    line.split(',').map(|s| s.parse().unwrap()).collect();
                assert!((f[2] + f[3] - 1.0).abs() < 1e-9);
                assert!(f[2] >= 0.0 && f[2] <= 1.0);
                rows += 1;
            }
            assert_eq!(rows, 25);
        }
        assert!(dir.path().join("toy.json").exists());
    }
}
