//! Experiment specs, grid execution, sweeps and result files.
//!
//! A spec fixes one corpus and one trained reference model (both derived
//! from the master seed) and lists values per config axis. Every
//! `(samples, clients, sparsity, metric, local_group)` combination yields a
//! Centralized row and a Local-only row; every further
//! `(server_group, strategy, scaling)` combination yields a federated row.
//!
//! Spec file (TOML, or JSON with the same structure):
//!
//! ```toml
//! seed = 7
//! output_dir = "out"          # optional, `--out` overrides
//!
//! [corpus]                    # all keys optional
//! vocab = 32
//! sample_len = 64
//! calibration_samples = 128
//! heldout_samples = 32
//! train_samples = 256
//! sharpness = 2.0
//!
//! [model]
//! embed_dim = 32
//! widths = [64, 64]
//!
//! [training]
//! epochs = 300
//! learning_rate = 0.5
//!
//! [grid]
//! sparsity = [0.5]
//! metric = ["wanda"]
//! local_group = ["row"]
//! server_group = ["layer", "row", "column"]
//! strategy = ["one_shot", "iterative"]
//! scaling = [false, true]
//! clients = [16]
//! samples = [128]
//! baselines = true
//! ria_alpha = 0.5
//! damping = "mean_diag:0.01"
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{
    generate_corpus, partition, train_reference_model, Corpus, CorpusParams, ModelDims, Sequence, TrainParams,
};
use crate::error::{PruneError, Result};
use crate::evaluation::{CsvRow, Method, ModelQuality, PruneReport};
use crate::federation::{
    make_clients, run_centralized, run_federated, run_local_only, ClientState, CommLedger, PruneConfig, Strategy,
};
use crate::masking::ComparisonGroup;
use crate::metrics::{DampingRule, MetricKind};
use crate::model::{ActivationTrace, PrunableModel};

/// Stable 64-bit seed from a master seed and a list of labels.
pub fn derive_seed(master: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub sparsity: Vec<f64>,
    pub metric: Vec<MetricKind>,
    pub local_group: Vec<ComparisonGroup>,
    pub server_group: Vec<ComparisonGroup>,
    pub strategy: Vec<Strategy>,
    pub scaling: Vec<bool>,
    pub clients: Vec<usize>,
    pub samples: Vec<usize>,
    pub baselines: bool,
    pub ria_alpha: f64,
    pub damping: DampingRule,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            sparsity: vec![0.5],
            metric: vec![MetricKind::Wanda],
            local_group: vec![ComparisonGroup::Row],
            server_group: ComparisonGroup::ALL.to_vec(),
            strategy: vec![Strategy::OneShot, Strategy::Iterative],
            scaling: vec![false, true],
            clients: vec![16],
            samples: vec![128],
            baselines: true,
            ria_alpha: 0.5,
            damping: DampingRule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub corpus: CorpusParams,
    #[serde(default)]
    pub model: ModelDims,
    #[serde(default)]
    pub training: TrainParams,
    #[serde(default)]
    pub grid: GridSpec,
}

impl ExperimentSpec {
    pub fn parse(text: &str, path_hint: &Path) -> Result<Self> {
        let is_json = path_hint.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
            || text.trim_start().starts_with('{');
        let spec: Self = if is_json {
            serde_json::from_str(text).map_err(|e| PruneError::Spec(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| PruneError::Spec(e.to_string()))?
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| PruneError::Spec(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PruneError::Spec(msg));
        let c = &self.corpus;
        if c.vocab < 2 || c.sample_len < 2 {
            return bad(format!("corpus needs vocab >= 2 and sample_len >= 2 (got {} / {})", c.vocab, c.sample_len));
        }
        if c.train_samples == 0 || c.heldout_samples == 0 || c.calibration_samples == 0 {
            return bad("corpus splits must all be non-empty".into());
        }
        if self.model.embed_dim == 0 || self.model.widths.is_empty() || self.model.widths.contains(&0) {
            return bad(format!("degenerate model dims {:?}", self.model));
        }
        if !(self.training.learning_rate.is_finite() && self.training.learning_rate > 0.0) {
            return bad(format!("learning rate {}", self.training.learning_rate));
        }
        let g = &self.grid;
        if let Some(s) = g.sparsity.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return bad(format!("sparsity {s} outside [0, 1]"));
        }
        if g.clients.contains(&0) {
            return bad("client counts must be >= 1".into());
        }
        if let Some(n) = g.samples.iter().find(|&&n| n == 0 || n > c.calibration_samples) {
            return bad(format!("samples {n} outside 1..={}", c.calibration_samples));
        }
        for &n in &g.samples {
            if let Some(m) = g.clients.iter().find(|&&m| m > n) {
                return bad(format!("{m} clients cannot share {n} calibration samples"));
            }
        }
        if !g.ria_alpha.is_finite() {
            return bad("ria_alpha must be finite".into());
        }
        Ok(())
    }
}

/// Corpus plus trained dense model shared by every cell of a spec.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub corpus: Corpus,
    pub dense: PrunableModel,
    pub train_loss: Vec<f64>,
}

impl Scenario {
    pub fn build(corpus: &CorpusParams, model: &ModelDims, training: &TrainParams, master_seed: u64) -> Result<Self> {
        let corpus = generate_corpus(corpus, derive_seed(master_seed, &["corpus"]))?;
        let trained = train_reference_model(&corpus, model, training, derive_seed(master_seed, &["model"]))?;
        Ok(Self { corpus, dense: trained.model, train_loss: trained.loss_history })
    }

    pub fn from_spec(spec: &ExperimentSpec) -> Result<Self> {
        Self::build(&spec.corpus, &spec.model, &spec.training, spec.seed)
    }

    /// The first `n` calibration samples.
    pub fn calibration(&self, n: usize) -> Result<&[Sequence]> {
        self.corpus.calibration.get(..n).ok_or_else(|| {
            PruneError::InputDomain(format!("{n} calibration samples requested, corpus has {}", self.corpus.calibration.len()))
        })
    }

    /// Clients for `m`-way sharding of the first `samples` calibration
    /// samples, plus the dense layer inputs over that pool (used for the
    /// reconstruction error of every method).
    pub fn prepare(&self, samples: usize, m: usize, partition_seed: u64) -> Result<(Vec<ClientState>, ActivationTrace)> {
        let pool = self.calibration(samples)?;
        let shards = partition(pool, m, partition_seed)?;
        let clients = make_clients(&self.dense, shards)?;
        let (_, trace) = self.dense.forward_with_trace(pool)?;
        Ok((clients, trace))
    }

    pub fn centralized(&self, clients: &[ClientState], trace: &ActivationTrace, config: &PruneConfig, samples: usize) -> Result<PruneReport> {
        let start = Instant::now();
        let pooled = crate::federation::pooled_calibration(clients);
        let out = run_centralized(&self.dense, &pooled, config)?;
        let q = ModelQuality::measure(&self.dense, &out.model, trace, &self.corpus.heldout)?;
        Ok(PruneReport::from_quality(Method::Centralized, *config, samples, q, CommLedger::default(), start.elapsed().as_secs_f64()))
    }

    pub fn local_only(&self, clients: &[ClientState], trace: &ActivationTrace, config: &PruneConfig, samples: usize) -> Result<PruneReport> {
        let start = Instant::now();
        let outs = run_local_only(&self.dense, clients, config)?;
        let qualities = outs
            .iter()
            .map(|o| ModelQuality::measure(&self.dense, &o.model, trace, &self.corpus.heldout))
            .collect::<Result<Vec<_>>>()?;
        PruneReport::from_local_only(*config, samples, &qualities, start.elapsed().as_secs_f64())
    }

    pub fn federated(&self, clients: &mut [ClientState], trace: &ActivationTrace, config: &PruneConfig, samples: usize) -> Result<PruneReport> {
        let start = Instant::now();
        let out = run_federated(&self.dense, clients, config)?;
        let q = ModelQuality::measure(&self.dense, &out.model, trace, &self.corpus.heldout)?;
        Ok(PruneReport::from_quality(Method::Federated, *config, samples, q, out.ledger, start.elapsed().as_secs_f64()))
    }
}

/// One row to compute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub config: PruneConfig,
    pub samples: usize,
}

impl Cell {
    pub fn describe(&self) -> String {
        let c = &self.config;
        match self.method {
            Method::Federated => format!(
                "{} metric={} local={} server={} strategy={} scaling={} s={} m={} samples={}",
                self.method, c.metric, c.local_group, c.server_group, c.strategy, c.scaling, c.sparsity, c.clients, self.samples
            ),
            _ => format!(
                "{} metric={} local={} s={} m={} samples={}",
                self.method, c.metric, c.local_group, c.sparsity, c.clients, self.samples
            ),
        }
    }
}

/// Expands the grid into cells in a fixed order.
pub fn expand_grid(spec: &ExperimentSpec) -> Vec<Cell> {
    let g = &spec.grid;
    let mut cells = Vec::new();
    for &samples in &g.samples {
        for &clients in &g.clients {
            let partition_seed =
                derive_seed(spec.seed, &["partition", &samples.to_string(), &clients.to_string()]);
            for &sparsity in &g.sparsity {
                for &metric in &g.metric {
                    for &local_group in &g.local_group {
                        let base = PruneConfig {
                            sparsity,
                            metric,
                            local_group,
                            clients,
                            seed: partition_seed,
                            ria_alpha: g.ria_alpha,
                            damping: g.damping,
                            ..PruneConfig::default()
                        };
                        if g.baselines {
                            cells.push(Cell { method: Method::Centralized, config: base, samples });
                            cells.push(Cell { method: Method::LocalOnly, config: base, samples });
                        }
                        for &server_group in &g.server_group {
                            for &strategy in &g.strategy {
                                for &scaling in &g.scaling {
                                    let config = PruneConfig { server_group, strategy, scaling, ..base };
                                    cells.push(Cell { method: Method::Federated, config, samples });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cells
}

/// Runs cells (in parallel) and returns reports in cell order. Any failure
/// is reported with the description of the failing cell.
pub fn run_cells(scenario: &Scenario, cells: &[Cell]) -> Result<Vec<PruneReport>> {
    cells
        .par_iter()
        .map(|cell| {
            let (mut clients, trace) = scenario.prepare(cell.samples, cell.config.clients, cell.config.seed)?;
            match cell.method {
                Method::Centralized => scenario.centralized(&clients, &trace, &cell.config, cell.samples),
                Method::LocalOnly => scenario.local_only(&clients, &trace, &cell.config, cell.samples),
                Method::Federated => scenario.federated(&mut clients, &trace, &cell.config, cell.samples),
            }
            .map_err(|e| match e {
                PruneError::Numerical(msg) => PruneError::Numerical(format!("cell [{}]: {msg}", cell.describe())),
                other => PruneError::Numerical(format!("cell [{}]: {other}", cell.describe())),
            })
        })
        .collect()
}

/// Everything a run produced, written as the JSON archive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunArchive {
    pub spec: ExperimentSpec,
    pub final_train_loss: Option<f64>,
    pub dense_perplexity: f64,
    pub reports: Vec<PruneReport>,
    pub skipped: Vec<String>,
}

pub fn write_csv(path: &Path, rows: &[CsvRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PruneError::Io(e.into()))?;
    if rows.is_empty() {
        w.write_record(crate::evaluation::CSV_COLUMNS).map_err(|e| PruneError::Io(e.into()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| PruneError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, archive: &RunArchive) -> Result<()> {
    let text = serde_json::to_string_pretty(archive).map_err(|e| PruneError::Format(e.to_string()))?;
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Output directory from `--out` or the spec; it must already exist.
pub fn resolve_output_dir(spec: &ExperimentSpec, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| spec.output_dir.clone())
        .ok_or_else(|| PruneError::Spec("no output directory (set output_dir or pass --out)".into()))?;
    if !dir.is_dir() {
        return Err(PruneError::Spec(format!("output directory {} does not exist", dir.display())));
    }
    Ok(dir)
}

pub struct RunOutput {
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
    pub rows: Vec<CsvRow>,
}

fn finish(spec: &ExperimentSpec, scenario: &Scenario, dir: &Path, stem: &str, reports: Vec<PruneReport>, mut rows: Vec<CsvRow>, skipped: Vec<String>) -> Result<RunOutput> {
    if rows.is_empty() {
        rows = reports.iter().map(PruneReport::csv_row).collect();
    }
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    write_csv(&csv_path, &rows)?;
    let archive = RunArchive {
        spec: spec.clone(),
        final_train_loss: scenario.train_loss.last().copied(),
        dense_perplexity: crate::evaluation::perplexity(&scenario.dense, &scenario.corpus.heldout)?,
        reports,
        skipped,
    };
    write_json(&json_path, &archive)?;
    Ok(RunOutput { csv_path, json_path, rows })
}

/// Executes every grid cell and writes `results.csv` / `results.json`.
pub fn cmd_run(spec: &ExperimentSpec, out: Option<&Path>) -> Result<RunOutput> {
    spec.validate()?;
    let dir = resolve_output_dir(spec, out)?;
    let scenario = Scenario::from_spec(spec)?;
    let reports = run_cells(&scenario, &expand_grid(spec))?;
    finish(spec, &scenario, &dir, "results", reports, Vec::new(), Vec::new())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Clients,
    Samples,
}

impl std::str::FromStr for SweepAxis {
    type Err = PruneError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clients" => Ok(SweepAxis::Clients),
            "samples" => Ok(SweepAxis::Samples),
            _ => Err(PruneError::Spec(format!("unknown sweep axis {s:?}"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Clients => "clients",
            SweepAxis::Samples => "samples",
        }
    }
}

/// `(samples, clients)` for one sweep value: the clients axis keeps the
/// spec's first sample count, the samples axis uses `m = samples / 2`.
pub fn sweep_point(spec: &ExperimentSpec, axis: SweepAxis, value: usize) -> (usize, usize) {
    match axis {
        SweepAxis::Clients => (spec.grid.samples.first().copied().unwrap_or(spec.corpus.calibration_samples), value),
        SweepAxis::Samples => (value, value / 2),
    }
}

fn skipped_row(spec: &ExperimentSpec, samples: usize, clients: usize) -> CsvRow {
    let g = &spec.grid;
    CsvRow {
        method: "skipped".into(),
        metric: g.metric.first().map_or("", |m| m.name()).into(),
        local_group: g.local_group.first().map_or("", |l| l.name()).into(),
        server_group: None,
        strategy: None,
        scaling: None,
        s: None,
        m: clients,
        samples,
        seed: spec.seed,
        perplexity: None,
        mean_recon_error: None,
        uplink_bits: None,
        downlink_bits: None,
        rounds: None,
        wall_time: None,
    }
}

/// Re-runs the base grid once per value of `axis`. Values that cannot be
/// realized (no clients, more clients than samples, more samples than the
/// corpus holds) produce a `skipped` row and a warning.
pub fn cmd_sweep(spec: &ExperimentSpec, axis: SweepAxis, values: &[usize], out: Option<&Path>) -> Result<RunOutput> {
    spec.validate()?;
    let dir = resolve_output_dir(spec, out)?;
    let scenario = Scenario::from_spec(spec)?;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for &v in values {
        let (samples, clients) = sweep_point(spec, axis, v);
        if clients == 0 || clients > samples || samples > spec.corpus.calibration_samples {
            let msg = format!("{}={v}: {clients} clients over {samples} samples is not realizable", axis.name());
            eprintln!("warning: skipping {msg}");
            rows.push(skipped_row(spec, samples, clients));
            skipped.push(msg);
            continue;
        }
        let mut point = spec.clone();
        point.grid.samples = vec![samples];
        point.grid.clients = vec![clients];
        let point_reports = run_cells(&scenario, &expand_grid(&point))?;
        rows.extend(point_reports.iter().map(PruneReport::csv_row));
        reports.extend(point_reports);
    }
    let stem = format!("sweep_{}", axis.name());
    if rows.is_empty() {
        let csv_path = dir.join(format!("{stem}.csv"));
        write_csv(&csv_path, &[])?;
        let json_path = dir.join(format!("{stem}.json"));
        let archive = RunArchive {
            spec: spec.clone(),
            final_train_loss: scenario.train_loss.last().copied(),
            dense_perplexity: crate::evaluation::perplexity(&scenario.dense, &scenario.corpus.heldout)?,
            reports,
            skipped,
        };
        write_json(&json_path, &archive)?;
        return Ok(RunOutput { csv_path, json_path, rows });
    }
    finish(spec, &scenario, &dir, &stem, reports, rows, skipped)
}
