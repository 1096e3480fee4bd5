//! Quality measures for pruned models and the report records built from them.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, PruneError, Result};
use crate::federation::{CommLedger, PruneConfig};
use crate::model::{ActivationTrace, Matrix, PrunableModel};

/// `exp` of the mean next-token negative log-likelihood (natural log) over
/// every position of every held-out sequence that has a successor.
pub fn perplexity(model: &PrunableModel, heldout: &[Vec<usize>]) -> Result<f64> {
    let inputs: Vec<Vec<usize>> = heldout
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| s[..s.len() - 1].to_vec())
        .collect();
    if inputs.is_empty() {
        return Err(PruneError::InputDomain("held-out set has no next-token targets".into()));
    }
    let targets: Vec<usize> = heldout.iter().filter(|s| s.len() >= 2).flat_map(|s| s[1..].iter().copied()).collect();
    let logits = model.forward(&inputs)?;
    let mut nll = 0.0;
    for (t, &target) in targets.iter().enumerate() {
        if target >= logits.cols() {
            return Err(PruneError::InputDomain(format!("target {target} out of vocabulary")));
        }
        let z = logits.row(t);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        nll += lse - z[target];
    }
    let ppl = (nll / targets.len() as f64).exp();
    if !ppl.is_finite() {
        return Err(PruneError::Numerical(format!("perplexity overflowed (mean nll {})", nll / targets.len() as f64)));
    }
    Ok(ppl)
}

/// `‖(W − W_pruned)·Xᵀ‖²_F` with `X` laid out one token per row.
pub fn reconstruction_error(w: &Matrix, w_pruned: &Matrix, x: &Matrix) -> Result<f64> {
    if w.shape() != w_pruned.shape() {
        return Err(shape_err(format!("weights {:?} vs pruned {:?}", w.shape(), w_pruned.shape())));
    }
    let diff = w.sub(w_pruned)?;
    Ok(x.matmul_t(&diff)?.frobenius_sq())
}

/// Per-layer reconstruction error of `pruned` against `dense` on the dense
/// model's own layer inputs.
pub fn layer_reconstruction_errors(dense: &PrunableModel, pruned: &PrunableModel, trace: &ActivationTrace) -> Result<Vec<f64>> {
    if dense.num_layers() != pruned.num_layers() || trace.per_layer_inputs.len() != dense.num_layers() {
        return Err(shape_err("models and trace disagree on layer count"));
    }
    dense
        .layers()
        .iter()
        .zip(pruned.layers())
        .zip(&trace.per_layer_inputs)
        .map(|((d, p), x)| reconstruction_error(&d.weights, &p.weights, x))
        .collect()
}

/// Fraction of exactly-zero weights in each prunable layer.
pub fn realized_sparsity(model: &PrunableModel) -> Vec<f64> {
    model
        .layers()
        .iter()
        .map(|l| l.weights.count_zeros() as f64 / l.weights.len() as f64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Centralized,
    LocalOnly,
    Federated,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Centralized => "centralized",
            Method::LocalOnly => "local_only",
            Method::Federated => "federated",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Quality of one pruned model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelQuality {
    pub perplexity: f64,
    pub per_layer_recon_error: Vec<f64>,
    pub realized_sparsity_per_layer: Vec<f64>,
}

impl ModelQuality {
    pub fn measure(dense: &PrunableModel, pruned: &PrunableModel, recon_trace: &ActivationTrace, heldout: &[Vec<usize>]) -> Result<Self> {
        Ok(Self {
            perplexity: perplexity(pruned, heldout)?,
            per_layer_recon_error: layer_reconstruction_errors(dense, pruned, recon_trace)?,
            realized_sparsity_per_layer: realized_sparsity(pruned),
        })
    }

    pub fn mean_recon_error(&self) -> f64 {
        mean(&self.per_layer_recon_error)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Full record of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub method: Method,
    pub config: PruneConfig,
    pub samples: usize,
    /// Mean over clients for Local-only.
    pub perplexity: f64,
    /// Spread over clients for Local-only; zero otherwise.
    pub perplexity_std: f64,
    pub per_layer_recon_error: Vec<f64>,
    pub realized_sparsity_per_layer: Vec<f64>,
    pub comm: CommLedger,
    pub wall_time: f64,
}

impl PruneReport {
    pub fn from_quality(method: Method, config: PruneConfig, samples: usize, q: ModelQuality, comm: CommLedger, wall_time: f64) -> Self {
        Self {
            method,
            config,
            samples,
            perplexity: q.perplexity,
            perplexity_std: 0.0,
            per_layer_recon_error: q.per_layer_recon_error,
            realized_sparsity_per_layer: q.realized_sparsity_per_layer,
            comm,
            wall_time,
        }
    }

    /// Averages per-client quality into one Local-only report.
    pub fn from_local_only(config: PruneConfig, samples: usize, per_client: &[ModelQuality], wall_time: f64) -> Result<Self> {
        let first = per_client
            .first()
            .ok_or_else(|| PruneError::InputDomain("local-only report needs at least one client".into()))?;
        let layers = first.per_layer_recon_error.len();
        let ppl: Vec<f64> = per_client.iter().map(|q| q.perplexity).collect();
        let layer_mean = |f: &dyn Fn(&ModelQuality) -> &Vec<f64>| -> Vec<f64> {
            (0..layers).map(|l| mean(&per_client.iter().map(|q| f(q)[l]).collect::<Vec<_>>())).collect()
        };
        Ok(Self {
            method: Method::LocalOnly,
            config,
            samples,
            perplexity: mean(&ppl),
            perplexity_std: std_dev(&ppl),
            per_layer_recon_error: layer_mean(&|q| &q.per_layer_recon_error),
            realized_sparsity_per_layer: layer_mean(&|q| &q.realized_sparsity_per_layer),
            comm: CommLedger::default(),
            wall_time,
        })
    }

    pub fn mean_recon_error(&self) -> f64 {
        mean(&self.per_layer_recon_error)
    }

    pub fn csv_row(&self) -> CsvRow {
        let federated = self.method == Method::Federated;
        CsvRow {
            method: self.method.name().into(),
            metric: self.config.metric.name().into(),
            local_group: self.config.local_group.name().into(),
            server_group: federated.then(|| self.config.server_group.name().into()),
            strategy: federated.then(|| self.config.strategy.name().into()),
            scaling: federated.then_some(self.config.scaling),
            s: Some(self.config.sparsity),
            m: self.config.clients,
            samples: self.samples,
            seed: self.config.seed,
            perplexity: Some(self.perplexity),
            mean_recon_error: Some(self.mean_recon_error()),
            uplink_bits: Some(self.comm.uplink_bits),
            downlink_bits: Some(self.comm.downlink_bits),
            rounds: Some(self.comm.rounds),
            wall_time: Some(self.wall_time),
        }
    }
}

/// One line of the results table. Empty cells mean "not applicable" (e.g.
/// server group of a baseline) or "skipped".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub method: String,
    pub metric: String,
    pub local_group: String,
    pub server_group: Option<String>,
    pub strategy: Option<String>,
    pub scaling: Option<bool>,
    pub s: Option<f64>,
    pub m: usize,
    pub samples: usize,
    pub seed: u64,
    pub perplexity: Option<f64>,
    pub mean_recon_error: Option<f64>,
    pub uplink_bits: Option<u64>,
    pub downlink_bits: Option<u64>,
    pub rounds: Option<u32>,
    pub wall_time: Option<f64>,
}

pub const CSV_COLUMNS: [&str; 16] = [
    "method",
    "metric",
    "local_group",
    "server_group",
    "strategy",
    "scaling",
    "s",
    "m",
    "samples",
    "seed",
    "perplexity",
    "mean_recon_error",
    "uplink_bits",
    "downlink_bits",
    "rounds",
    "wall_time",
];
