//! Acceptance checks with independent brute-force oracles.
//!
//! Every check recomputes its expectation without going through the
//! selection, aggregation or accounting code it is checking. Oracles sort
//! full index lists instead of partial selection, enumerate groups by hand,
//! and derive ledger sizes from shapes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datagen::{CorpusParams, ModelDims, Sequence, TrainParams};
use crate::error::{PruneError, Result};
use crate::experiment::{expand_grid, run_cells, ExperimentSpec, GridSpec, Scenario};
use crate::federation::{
    make_clients, run_centralized, run_federated, run_local_only, run_oneshot, ClientState, CommLedger, PruneConfig,
    Strategy,
};
use crate::masking::{decode_mask_frame, encode_mask_frame, pack_mask, unpack_mask, ComparisonGroup, MaskMatrix};
use crate::metrics::{score_magnitude, score_wanda, feature_norms, MetricKind};
use crate::model::{Matrix, Nonlinearity, PrunableModel};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

pub struct Check {
    pub name: &'static str,
    pub run: fn() -> CheckResult,
}

pub const CHECKS: [Check; 10] = [
    Check { name: "oracle_equivalence", run: check_oracle_equivalence },
    Check { name: "sparsity_exactness", run: check_sparsity_exactness },
    Check { name: "degenerate_client", run: check_degenerate_client },
    Check { name: "fedavg_scaling", run: check_fedavg_scaling },
    Check { name: "wanda_column", run: check_wanda_column },
    Check { name: "oneshot_iterative", run: check_oneshot_iterative },
    Check { name: "comm_accounting", run: check_comm_accounting },
    Check { name: "directional", run: check_directional },
    Check { name: "determinism", run: check_determinism },
    Check { name: "wire_roundtrip", run: check_wire_roundtrip },
];

/// Runs every check whose name contains `filter` (all when `None`).
pub fn run_checks(filter: Option<&str>) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| (c.run)())
        .collect()
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

// ---------------------------------------------------------------- oracles

/// Flat indices of each group instance, enumerated directly.
pub fn oracle_groups(group: ComparisonGroup, rows: usize, cols: usize) -> Vec<Vec<usize>> {
    match group {
        ComparisonGroup::Layer => vec![(0..rows * cols).collect()],
        ComparisonGroup::Row => (0..rows).map(|r| (0..cols).map(|c| r * cols + c).collect()).collect(),
        ComparisonGroup::Column => (0..cols).map(|c| (0..rows).map(|r| r * cols + c).collect()).collect(),
    }
}

pub fn oracle_budget(sparsity: f64, n: usize) -> usize {
    (sparsity * n as f64).floor() as usize
}

/// Prunes the lowest scores per group, lower index first on ties.
pub fn oracle_local_mask(scores: &[f64], rows: usize, cols: usize, s: f64, group: ComparisonGroup) -> Vec<bool> {
    let mut pruned = vec![false; rows * cols];
    for mut idx in oracle_groups(group, rows, cols) {
        let k = oracle_budget(s, idx.len());
        idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores").then(a.cmp(&b)));
        for &i in &idx[..k] {
            pruned[i] = true;
        }
    }
    pruned
}

/// Prunes the most-voted entries per group, lower index first on ties.
pub fn oracle_server_mask(votes: &[u32], rows: usize, cols: usize, s: f64, group: ComparisonGroup) -> Vec<bool> {
    let mut pruned = vec![false; rows * cols];
    for mut idx in oracle_groups(group, rows, cols) {
        let k = oracle_budget(s, idx.len());
        idx.sort_by(|&a, &b| votes[b].cmp(&votes[a]).then(a.cmp(&b)));
        for &i in &idx[..k] {
            pruned[i] = true;
        }
    }
    pruned
}

/// Single-layer federated case with coarse values so that score and vote
/// ties are common.
#[derive(Debug, Clone)]
pub struct OracleCase {
    pub model: PrunableModel,
    pub shards: Vec<Vec<Sequence>>,
    pub config: PruneConfig,
}

pub fn oracle_cases(count: usize, seed: u64) -> Result<Vec<OracleCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ms = [1usize, 2, 3, 5];
    let ss = [0.25, 0.5, 0.75];
    let metrics = [MetricKind::Wanda, MetricKind::Magnitude];
    let vocab = 5;
    (0..count)
        .map(|i| {
            let rows = rng.random_range(1..=16);
            let cols = rng.random_range(1..=16);
            let local_group = ComparisonGroup::ALL[i % 3];
            let server_group = ComparisonGroup::ALL[(i / 3) % 3];
            let m = ms[(i / 9) % 4];
            let s = ss[(i / 36) % 3];
            let embedding: Vec<f64> = (0..vocab * cols).map(|_| rng.random_range(-1i32..=1) as f64).collect();
            let w: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-4i32..=4) as f64 * 0.25).collect();
            let head: Vec<f64> = (0..rows * vocab).map(|_| rng.random_range(-1.0..1.0)).collect();
            let model = PrunableModel::new(
                Matrix::new(vocab, cols, embedding)?,
                vec![Matrix::new(rows, cols, w)?],
                Matrix::new(rows, vocab, head)?,
                Nonlinearity::Relu,
            )?;
            let shards = (0..m)
                .map(|_| {
                    (0..rng.random_range(1..=3))
                        .map(|_| (0..rng.random_range(2..=6)).map(|_| rng.random_range(0..vocab)).collect())
                        .collect()
                })
                .collect();
            let config = PruneConfig {
                sparsity: s,
                metric: metrics[i % 2],
                local_group,
                server_group,
                clients: m,
                seed: i as u64,
                ..PruneConfig::default()
            };
            Ok(OracleCase { model, shards, config })
        })
        .collect()
}

/// Final mask from the full one-shot engine.
pub fn engine_final_mask(case: &OracleCase) -> Result<MaskMatrix> {
    let mut clients = make_clients(&case.model, case.shards.clone())?;
    let out = run_oneshot(&case.model, &mut clients, &case.config)?;
    Ok(out.final_masks[0].clone())
}

/// Final mask computed from scratch: scores, full sorts, vote counts.
pub fn oracle_final_mask(case: &OracleCase) -> Vec<bool> {
    let w = &case.model.layer(0).weights;
    let (rows, cols) = w.shape();
    let emb = case.model.embedding();
    let mut votes = vec![0u32; rows * cols];
    for shard in &case.shards {
        let mut sq = vec![0.0; cols];
        for &tok in shard.iter().flatten() {
            for (j, acc) in sq.iter_mut().enumerate() {
                let x = emb.get(tok, j);
                *acc += x * x;
            }
        }
        let scores: Vec<f64> = (0..rows * cols)
            .map(|i| {
                let a = w.data()[i].abs();
                match case.config.metric {
                    MetricKind::Magnitude => a,
                    _ => a * sq[i % cols].sqrt(),
                }
            })
            .collect();
        let local = oracle_local_mask(&scores, rows, cols, case.config.sparsity, case.config.local_group);
        for (v, p) in votes.iter_mut().zip(local) {
            *v += p as u32;
        }
    }
    oracle_server_mask(&votes, rows, cols, case.config.sparsity, case.config.server_group)
}

/// Criterion 1 against an arbitrary engine.
pub fn oracle_equivalence_with(engine: &dyn Fn(&OracleCase) -> Result<MaskMatrix>) -> Result<(bool, String)> {
    let start = Instant::now();
    let cases = oracle_cases(200, 0x5eed)?;
    let mut mismatches = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        if engine(case)?.bits() != oracle_final_mask(case).as_slice() {
            mismatches.push(i);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = mismatches.is_empty() && secs < 30.0;
    Ok((ok, format!("{} of 200 cases differ {:?} in {secs:.2}s", mismatches.len(), &mismatches[..mismatches.len().min(5)])))
}

pub fn check_oracle_equivalence() -> CheckResult {
    timed("oracle_equivalence", || oracle_equivalence_with(&engine_final_mask))
}

// ------------------------------------------------------------- fixtures

fn small_setup(seed: u64, vocab: usize, embed: usize, widths: &[usize], m: usize) -> Result<(PrunableModel, Vec<Vec<Sequence>>)> {
    let model = PrunableModel::synthetic(vocab, embed, widths, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let shards = (0..m)
        .map(|_| (0..3).map(|_| (0..10).map(|_| rng.random_range(0..vocab)).collect()).collect())
        .collect();
    Ok((model, shards))
}

fn pairs() -> impl Iterator<Item = (ComparisonGroup, ComparisonGroup)> {
    ComparisonGroup::ALL.into_iter().flat_map(|l| ComparisonGroup::ALL.into_iter().map(move |s| (l, s)))
}

fn run(model: &PrunableModel, shards: &[Vec<Sequence>], config: &PruneConfig) -> Result<crate::federation::FederatedOutcome> {
    let mut clients = make_clients(model, shards.to_vec())?;
    run_federated(model, &mut clients, config)
}

// ------------------------------------------------------------- checks

pub fn check_sparsity_exactness() -> CheckResult {
    timed("sparsity_exactness", || {
        let (model, shards) = small_setup(11, 9, 7, &[10, 6], 3)?;
        let mut failures = Vec::new();
        let mut checked = 0;
        for (local, server) in pairs() {
            for strategy in [Strategy::OneShot, Strategy::Iterative] {
                for scaling in [false, true] {
                    for s in [0.0, 0.25, 0.5, 0.75, 1.0] {
                        let config = PruneConfig { sparsity: s, local_group: local, server_group: server, strategy, scaling, clients: 3, ..PruneConfig::default() };
                        let out = run(&model, &shards, &config)?;
                        for (l, layer) in out.model.layers().iter().enumerate() {
                            let w = &layer.weights;
                            let mask = out.final_masks[l].bits();
                            for idx in oracle_groups(server, w.rows(), w.cols()) {
                                // Scaling zeroes kept entries that every client
                                // voted to prune, so count mask bits there.
                                let zeros = if scaling {
                                    idx.iter().filter(|&&i| mask[i]).count()
                                } else {
                                    idx.iter().filter(|&&i| w.data()[i] == 0.0).count()
                                };
                                checked += 1;
                                if zeros != oracle_budget(s, idx.len()) {
                                    failures.push(format!("{local}/{server}/{strategy}/scaling={scaling}/s={s} layer {l}"));
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((failures.is_empty(), format!("{checked} group instances, {} wrong {:?}", failures.len(), failures.first())))
    })
}

pub fn check_degenerate_client() -> CheckResult {
    timed("degenerate_client", || {
        let mut failures = Vec::new();
        // Matched groups, plus Layer server over row/column budgets that
        // add up to the layer budget (even widths at s = 0.5).
        let (model, shards) = small_setup(5, 8, 6, &[8, 4], 1)?;
        let combos: Vec<(ComparisonGroup, ComparisonGroup)> = ComparisonGroup::ALL
            .into_iter()
            .map(|g| (g, g))
            .chain([(ComparisonGroup::Row, ComparisonGroup::Layer), (ComparisonGroup::Column, ComparisonGroup::Layer)])
            .collect();
        for metric in MetricKind::ALL {
            for &(local, server) in &combos {
                for strategy in [Strategy::OneShot, Strategy::Iterative] {
                    let config = PruneConfig { sparsity: 0.5, metric, local_group: local, server_group: server, strategy, clients: 1, ..PruneConfig::default() };
                    let fed = run(&model, &shards, &config)?;
                    let cen = run_centralized(&model, &shards[0], &config)?;
                    let same = fed.model.layers().iter().zip(cen.model.layers()).all(|(a, b)| {
                        a.weights.data().iter().zip(b.weights.data()).all(|(x, y)| x.to_bits() == y.to_bits())
                    });
                    if !same || fed.final_masks != cen.masks {
                        failures.push(format!("{metric} {local}/{server} {strategy}"));
                    }
                }
            }
        }
        Ok((failures.is_empty(), format!("{} of {} configs differ {:?}", failures.len(), MetricKind::ALL.len() * combos.len() * 2, failures.first())))
    })
}

pub fn check_fedavg_scaling() -> CheckResult {
    timed("fedavg_scaling", || {
        let mut worst: f64 = 0.0;
        for (seed, m) in [(1u64, 2usize), (2, 3), (3, 5), (4, 8)] {
            let (model, shards) = small_setup(seed, 9, 6, &[8, 5], m)?;
            for (local, server) in pairs() {
                let config = PruneConfig { sparsity: 0.5, local_group: local, server_group: server, scaling: true, clients: m, ..PruneConfig::default() };
                let fed = run(&model, &shards, &config)?;
                let clients = make_clients(&model, shards.clone())?;
                let locals = run_local_only(&model, &clients, &config)?;
                for l in 0..model.num_layers() {
                    let fmask = fed.final_masks[l].bits();
                    let got = fed.model.layer(l).weights.data();
                    for i in 0..got.len() {
                        let avg = if fmask[i] {
                            0.0
                        } else {
                            locals.iter().map(|o| o.model.layer(l).weights.data()[i]).sum::<f64>() / m as f64
                        };
                        let err = (got[i] - avg).abs() / avg.abs().max(f64::MIN_POSITIVE);
                        if got[i] != avg {
                            worst = worst.max(err);
                        }
                    }
                }
            }
        }
        Ok((worst <= 1e-12, format!("max relative deviation from client average {worst:.3e}")))
    })
}

pub fn check_wanda_column() -> CheckResult {
    timed("wanda_column", || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut failures = 0;
        for _ in 0..100 {
            let rows = rng.random_range(1..=24);
            let cols = rng.random_range(1..=24);
            let w = Matrix::gaussian(rows, cols, 1.0, &mut rng);
            let x = Matrix::gaussian(rng.random_range(1..=30), cols, 1.0, &mut rng);
            let norms = feature_norms(&x)?;
            if norms.as_slice().iter().any(|&n| n <= 0.0) {
                continue;
            }
            let s = [0.25, 0.5, 0.75][rng.random_range(0..3)];
            let wanda = score_wanda(&w, &norms)?;
            let mag = score_magnitude(&w);
            let a = oracle_local_mask(wanda.scores.data(), rows, cols, s, ComparisonGroup::Column);
            let b = oracle_local_mask(mag.scores.data(), rows, cols, s, ComparisonGroup::Column);
            let engine_a = crate::masking::mask_from_scores(&wanda, s, ComparisonGroup::Column)?;
            let engine_b = crate::masking::mask_from_scores(&mag, s, ComparisonGroup::Column)?;
            if a != b || engine_a != engine_b || engine_a.bits() != a.as_slice() {
                failures += 1;
            }
        }
        let (model, shards) = small_setup(9, 8, 6, &[8, 8], 4)?;
        for strategy in [Strategy::OneShot, Strategy::Iterative] {
            let base = PruneConfig { local_group: ComparisonGroup::Column, server_group: ComparisonGroup::Column, strategy, clients: 4, ..PruneConfig::default() };
            let wanda = run(&model, &shards, &PruneConfig { metric: MetricKind::Wanda, ..base })?;
            let mag = run(&model, &shards, &PruneConfig { metric: MetricKind::Magnitude, ..base })?;
            if wanda.final_masks != mag.final_masks {
                failures += 1;
            }
        }
        Ok((failures == 0, format!("{failures} of 102 comparisons differ")))
    })
}

pub fn check_oneshot_iterative() -> CheckResult {
    timed("oneshot_iterative", || {
        let mut failures = Vec::new();
        let (single, single_shards) = small_setup(21, 8, 6, &[9], 3)?;
        let (deep, deep_shards) = small_setup(22, 8, 6, &[9, 7, 5], 3)?;
        let same_shards = vec![deep_shards[0].clone(); 3];
        let mut checked = 0;
        for (local, server) in pairs() {
            for scaling in [false, true] {
                for (label, model, shards) in [("L=1", &single, &single_shards), ("identical shards", &deep, &same_shards)] {
                    // With identical shards the clients only follow the
                    // server's pruned path when both stages use one group.
                    if label != "L=1" && local != server {
                        continue;
                    }
                    checked += 1;
                    let base = PruneConfig { local_group: local, server_group: server, scaling, clients: 3, ..PruneConfig::default() };
                    let one = run(model, shards, &base)?;
                    let it = run(model, shards, &PruneConfig { strategy: Strategy::Iterative, ..base })?;
                    if one.final_masks != it.final_masks {
                        failures.push(format!("{label} {local}/{server} scaling={scaling}"));
                    }
                }
            }
        }
        Ok((failures.is_empty(), format!("{} of {checked} configs differ {:?}", failures.len(), failures.first())))
    })
}

fn bit_length(m: usize) -> u64 {
    let mut bits = 0;
    while (1usize << bits) <= m {
        bits += 1;
    }
    bits
}

pub fn check_comm_accounting() -> CheckResult {
    timed("comm_accounting", || {
        let mut failures = Vec::new();
        for (m, widths) in [(1usize, vec![5usize]), (2, vec![7, 3]), (3, vec![4, 9, 2]), (5, vec![6, 6]), (16, vec![8, 8])] {
            let (model, shards) = small_setup(m as u64, 6, 5, &widths, m)?;
            let shapes: Vec<(u64, u64)> = model.layers().iter().map(|l| (l.d_out() as u64, l.d_in() as u64)).collect();
            let entries: u64 = shapes.iter().map(|(r, c)| r * c).sum();
            let frames: u64 = shapes.iter().map(|(r, c)| (r * c).div_ceil(8) + 16).sum();
            let mm = m as u64;
            for strategy in [Strategy::OneShot, Strategy::Iterative] {
                for scaling in [false, true] {
                    let config = PruneConfig { strategy, scaling, clients: m, ..PruneConfig::default() };
                    let got = run(&model, &shards, &config)?.ledger;
                    let want = match strategy {
                        Strategy::OneShot => CommLedger { uplink_bits: mm * entries, downlink_bits: 0, rounds: 1, uplink_bytes: mm * frames, downlink_bytes: 0 },
                        Strategy::Iterative => {
                            let width = bit_length(m);
                            let vote_frames: u64 = shapes.iter().map(|(r, c)| (r * c * width).div_ceil(8) + 16).sum();
                            CommLedger {
                                uplink_bits: mm * entries,
                                downlink_bits: mm * entries + if scaling { mm * entries * width } else { 0 },
                                rounds: shapes.len() as u32,
                                uplink_bytes: mm * frames,
                                downlink_bytes: mm * frames + if scaling { mm * vote_frames } else { 0 },
                            }
                        }
                    };
                    if got != want {
                        failures.push(format!("m={m} {strategy} scaling={scaling}: got {got:?}, want {want:?}"));
                    }
                    let shapes_usize: Vec<(usize, usize)> = shapes.iter().map(|&(r, c)| (r as usize, c as usize)).collect();
                    if CommLedger::expected(&config, &shapes_usize) != got {
                        failures.push(format!("m={m} {strategy} scaling={scaling}: expected() disagrees"));
                    }
                }
            }
        }
        Ok((failures.is_empty(), failures.first().cloned().unwrap_or_else(|| "20 configurations match".into())))
    })
}

/// Per-seed numbers behind the directional check.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalSeed {
    pub seed: u64,
    pub centralized: f64,
    pub federated: f64,
    pub local_only_mean: f64,
    pub scaled: f64,
    pub iterative: f64,
    pub recon_layer: f64,
    pub recon_column: f64,
}

impl DirectionalSeed {
    pub fn ordering(&self) -> bool {
        self.centralized <= self.federated && self.federated <= self.local_only_mean
    }

    pub fn scaling_hurts(&self) -> bool {
        self.federated <= self.scaled
    }

    pub fn strategies_close(&self) -> bool {
        (self.federated - self.iterative).abs() <= 0.05 * self.federated
    }

    pub fn column_conflict(&self) -> bool {
        self.recon_column > self.recon_layer
    }
}

pub fn directional_seed(seed: u64) -> Result<DirectionalSeed> {
    let scenario = Scenario::build(&CorpusParams::default(), &ModelDims::default(), &TrainParams::default(), seed)?;
    let samples = 128;
    let m = 16;
    let partition_seed = crate::experiment::derive_seed(seed, &["partition", "128", "16"]);
    let (mut clients, trace) = scenario.prepare(samples, m, partition_seed)?;
    let base = PruneConfig { sparsity: 0.5, metric: MetricKind::Wanda, clients: m, seed: partition_seed, ..PruneConfig::default() };
    let cen = scenario.centralized(&clients, &trace, &base, samples)?;
    let lo = scenario.local_only(&clients, &trace, &base, samples)?;
    let fed = scenario.federated(&mut clients, &trace, &base, samples)?;
    let scaled = scenario.federated(&mut clients, &trace, &PruneConfig { scaling: true, ..base }, samples)?;
    let iterative = scenario.federated(&mut clients, &trace, &PruneConfig { strategy: Strategy::Iterative, ..base }, samples)?;
    let column = scenario.federated(&mut clients, &trace, &PruneConfig { server_group: ComparisonGroup::Column, ..base }, samples)?;
    Ok(DirectionalSeed {
        seed,
        centralized: cen.perplexity,
        federated: fed.perplexity,
        local_only_mean: lo.perplexity,
        scaled: scaled.perplexity,
        iterative: iterative.perplexity,
        recon_layer: fed.mean_recon_error(),
        recon_column: column.mean_recon_error(),
    })
}

pub fn check_directional() -> CheckResult {
    timed("directional", || {
        let start = Instant::now();
        let seeds = (0..9u64).into_par_iter().map(directional_seed).collect::<Result<Vec<_>>>()?;
        let secs = start.elapsed().as_secs_f64();
        let count = |f: fn(&DirectionalSeed) -> bool| seeds.iter().filter(|s| f(s)).count();
        let counts = [
            count(DirectionalSeed::ordering),
            count(DirectionalSeed::scaling_hurts),
            count(DirectionalSeed::strategies_close),
            count(DirectionalSeed::column_conflict),
        ];
        let ok = counts.iter().all(|&c| c >= 6) && secs < 300.0;
        Ok((
            ok,
            format!(
                "(a) ordering {}/9 [centralized<=fed {}/9, fed<=local-only {}/9], (b) scaling {}/9, (c) strategies {}/9, (d) column conflict {}/9, {secs:.1}s",
                counts[0],
                count(|s| s.centralized <= s.federated),
                count(|s| s.federated <= s.local_only_mean),
                counts[1],
                counts[2],
                counts[3]
            ),
        ))
    })
}

fn determinism_spec() -> ExperimentSpec {
    ExperimentSpec {
        seed: 42,
        output_dir: None,
        corpus: CorpusParams { vocab: 10, sample_len: 12, calibration_samples: 24, heldout_samples: 6, train_samples: 40, sharpness: 2.0 },
        model: ModelDims { embed_dim: 6, widths: vec![12, 8] },
        training: TrainParams { epochs: 30, learning_rate: 0.5 },
        grid: GridSpec {
            sparsity: vec![0.25, 0.5],
            metric: MetricKind::ALL.to_vec(),
            clients: vec![3, 6],
            samples: vec![24],
            ..GridSpec::default()
        },
    }
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| PruneError::Spec(e.to_string()))?;
    Ok(pool.install(f))
}

pub fn check_determinism() -> CheckResult {
    timed("determinism", || {
        let spec = determinism_spec();
        let scenario = Scenario::from_spec(&spec)?;
        let cells = expand_grid(&spec);
        let rows = |threads| -> Result<Vec<_>> {
            let reports = in_pool(threads, || run_cells(&scenario, &cells))??;
            Ok(reports.into_iter().map(|r| crate::evaluation::CsvRow { wall_time: None, ..r.csv_row() }).collect())
        };
        let reference = rows(1)?;
        let mut failures = Vec::new();
        for threads in [1, 2, 4, 8] {
            if rows(threads)? != reference {
                failures.push(format!("csv rows with {threads} threads"));
            }
        }
        let (mut clients, _) = scenario.prepare(24, 6, 1)?;
        let config = PruneConfig { clients: 6, scaling: true, strategy: Strategy::Iterative, ..PruneConfig::default() };
        let masks_and_weights = |threads| -> Result<(Vec<MaskMatrix>, Vec<u64>)> {
            let mut local: Vec<ClientState> = clients.clone();
            let out = in_pool(threads, || run_federated(&scenario.dense, &mut local, &config))??;
            let bits = out.model.layers().iter().flat_map(|l| l.weights.data().iter().map(|x| x.to_bits())).collect();
            Ok((out.final_masks, bits))
        };
        let reference_model = masks_and_weights(1)?;
        for threads in [2, 8] {
            if masks_and_weights(threads)? != reference_model {
                failures.push(format!("masks/weights with {threads} threads"));
            }
        }
        clients.clear();
        Ok((failures.is_empty(), format!("{} cells x 4 thread counts, {} mismatches {:?}", cells.len(), failures.len(), failures.first())))
    })
}

pub fn check_wire_roundtrip() -> CheckResult {
    timed("wire_roundtrip", || {
        let mut rng = ChaCha8Rng::seed_from_u64(1010);
        let mut failures = 0;
        for i in 0..1000 {
            let rows = rng.random_range(1..=70);
            let cols = rng.random_range(1..=70);
            let density: f64 = rng.random();
            let bits: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(density)).collect();
            let mask = MaskMatrix::from_bits(rows, cols, bits)?;
            let packed = pack_mask(&mask);
            let frame = encode_mask_frame(i % 7, i % 5, &mask)?;
            let (header, decoded) = decode_mask_frame(&frame)?;
            let ok = packed.len() == (rows * cols).div_ceil(8)
                && frame.len() == (rows * cols).div_ceil(8) + 16
                && unpack_mask(&packed, rows, cols)? == mask
                && decoded == mask
                && header.layer_index as usize == i % 7
                && header.client_id as usize == i % 5;
            if !ok {
                failures += 1;
            }
        }
        Ok((failures == 0, format!("{failures} of 1000 shapes fail")))
    })
}
