//! Client/server pruning protocols and the two baselines.
//!
//! Clients never expose weights or activations: the only payloads are packed
//! mask frames (uplink) and, in iterative mode, the final mask plus optional
//! vote counts (downlink). Frames are really encoded and decoded so that the
//! ledger counts what would cross the wire.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PruneError, Result};
use crate::masking::{
    check_sparsity, decode_mask_frame, decode_vote_frame, encode_mask_frame, encode_vote_frame,
    mask_from_scores, packed_len, scale_retained, select_final_mask, vote_bit_width, AggregatedMask,
    ComparisonGroup, MaskMatrix, FRAME_HEADER_BYTES,
};
use crate::metrics::{score_layer, DampingRule, MetricKind, MetricSettings};
use crate::model::{apply_mask_inplace, Matrix, PrunableModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    OneShot,
    Iterative,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::OneShot => "one_shot",
            Strategy::Iterative => "iterative",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = PruneError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "one_shot" | "oneshot" => Ok(Strategy::OneShot),
            "iterative" => Ok(Strategy::Iterative),
            _ => Err(PruneError::Spec(format!("unknown strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub sparsity: f64,
    pub metric: MetricKind,
    pub local_group: ComparisonGroup,
    pub server_group: ComparisonGroup,
    pub strategy: Strategy,
    pub scaling: bool,
    pub clients: usize,
    pub seed: u64,
    pub ria_alpha: f64,
    pub damping: DampingRule,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            sparsity: 0.5,
            metric: MetricKind::Wanda,
            local_group: ComparisonGroup::Row,
            server_group: ComparisonGroup::Layer,
            strategy: Strategy::OneShot,
            scaling: false,
            clients: 1,
            seed: 0,
            ria_alpha: 0.5,
            damping: DampingRule::default(),
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        check_sparsity(self.sparsity)?;
        if self.clients == 0 {
            return Err(PruneError::InputDomain("at least one client is required".into()));
        }
        if !self.ria_alpha.is_finite() {
            return Err(PruneError::InputDomain("ria_alpha must be finite".into()));
        }
        Ok(())
    }

    pub fn metric_settings(&self) -> MetricSettings {
        MetricSettings { kind: self.metric, ria_alpha: self.ria_alpha, damping: self.damping }
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub calibration: Vec<Vec<usize>>,
    pub model: PrunableModel,
}

impl ClientState {
    pub fn new(client_id: usize, calibration: Vec<Vec<usize>>, global: &PrunableModel) -> Result<Self> {
        if calibration.iter().all(Vec::is_empty) {
            return Err(PruneError::InputDomain(format!("client {client_id} has no calibration tokens")));
        }
        Ok(Self { client_id, calibration, model: global.clone() })
    }
}

/// One client per shard, ids in shard order.
pub fn make_clients(global: &PrunableModel, shards: Vec<Vec<Vec<usize>>>) -> Result<Vec<ClientState>> {
    shards.into_iter().enumerate().map(|(i, s)| ClientState::new(i, s, global)).collect()
}

/// All client shards concatenated in client order.
pub fn pooled_calibration(clients: &[ClientState]) -> Vec<Vec<usize>> {
    clients.iter().flat_map(|c| c.calibration.iter().cloned()).collect()
}

/// Payload and on-wire traffic of one protocol run. `*_bits` count mask and
/// vote payload bits only; `*_bytes` count whole frames including headers
/// and padding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    pub rounds: u32,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
}

impl CommLedger {
    /// The counts a run of `config` over layers of the given shapes must produce.
    pub fn expected(config: &PruneConfig, layer_shapes: &[(usize, usize)]) -> CommLedger {
        let m = config.clients as u64;
        let width = u64::from(vote_bit_width(config.clients as u32));
        let entries: u64 = layer_shapes.iter().map(|&(d, r)| (d * r) as u64).sum();
        let mask_frames: u64 = layer_shapes.iter().map(|&(d, r)| (packed_len(d, r) + FRAME_HEADER_BYTES) as u64).sum();
        let vote_frames: u64 = layer_shapes
            .iter()
            .map(|&(d, r)| ((d * r) as u64 * width).div_ceil(8) + FRAME_HEADER_BYTES as u64)
            .sum();
        let mut ledger = CommLedger { uplink_bits: m * entries, uplink_bytes: m * mask_frames, rounds: 1, ..CommLedger::default() };
        if config.strategy == Strategy::Iterative {
            ledger.rounds = layer_shapes.len() as u32;
            ledger.downlink_bits = m * entries;
            ledger.downlink_bytes = m * mask_frames;
            if config.scaling {
                ledger.downlink_bits += m * entries * width;
                ledger.downlink_bytes += m * vote_frames;
            }
        }
        ledger
    }

    fn record_uplink(&mut self, shape: (usize, usize), frames: &[(usize, Vec<u8>)]) {
        for (_, f) in frames {
            self.uplink_bits += (shape.0 * shape.1) as u64;
            self.uplink_bytes += f.len() as u64;
        }
    }

    /// Adds another ledger's counts (rounds included).
    pub fn merge(&mut self, other: &CommLedger) {
        self.uplink_bits += other.uplink_bits;
        self.downlink_bits += other.downlink_bits;
        self.rounds += other.rounds;
        self.uplink_bytes += other.uplink_bytes;
        self.downlink_bytes += other.downlink_bytes;
    }
}

/// Result of a federated run.
#[derive(Debug, Clone)]
pub struct FederatedOutcome {
    pub model: PrunableModel,
    pub final_masks: Vec<MaskMatrix>,
    pub votes: Vec<AggregatedMask>,
    pub ledger: CommLedger,
}

/// Result of a single-party run (Centralized or one Local-only client).
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub model: PrunableModel,
    pub masks: Vec<MaskMatrix>,
}

/// Scores, masks and prunes `model` layer by layer, feeding each layer the
/// output of the already-pruned layer before it.
pub fn prune_layerwise(
    model: &mut PrunableModel,
    calibration: &[Vec<usize>],
    settings: &MetricSettings,
    sparsity: f64,
    group: ComparisonGroup,
) -> Result<Vec<MaskMatrix>> {
    check_sparsity(sparsity)?;
    let layers = model.num_layers();
    let mut x = model.embed(calibration)?;
    let mut masks = Vec::with_capacity(layers);
    for l in 0..layers {
        let scores = score_layer(settings, &model.layer(l).weights, &x)?;
        let mask = mask_from_scores(&scores, sparsity, group)?;
        apply_mask_inplace(model.layer_mut(l), &mask)?;
        if l + 1 < layers {
            x = model.forward_partial(&x, l)?;
        }
        masks.push(mask);
    }
    Ok(masks)
}

/// One-shot client step: masks for every layer, computed while pruning the
/// client's own copy. The copy is reset to `global` first.
pub fn client_local_masks_oneshot(
    client: &mut ClientState,
    global: &PrunableModel,
    config: &PruneConfig,
) -> Result<Vec<MaskMatrix>> {
    client.model = global.clone();
    prune_layerwise(
        &mut client.model,
        &client.calibration,
        &config.metric_settings(),
        config.sparsity,
        config.local_group,
    )
}

fn check_clients(clients: &[ClientState], config: &PruneConfig) -> Result<()> {
    config.validate()?;
    if clients.len() != config.clients {
        return Err(PruneError::InputDomain(format!(
            "config expects {} clients, got {}",
            config.clients,
            clients.len()
        )));
    }
    Ok(())
}

/// Decodes and tallies one layer's uploads, checking every frame header.
fn aggregate_uploads(frames: &[(usize, Vec<u8>)], layer: usize, shape: (usize, usize)) -> Result<AggregatedMask> {
    let mut agg = AggregatedMask::empty(shape.0, shape.1);
    for (client_id, frame) in frames {
        let (header, mask) = decode_mask_frame(frame)?;
        if header.layer_index as usize != layer || header.client_id as usize != *client_id {
            return Err(PruneError::Protocol(format!(
                "frame for layer {} / client {} arrived as layer {layer} / client {client_id}",
                header.layer_index, header.client_id
            )));
        }
        if mask.shape() != shape {
            return Err(PruneError::Protocol(format!(
                "client {client_id} sent a {:?} mask for layer {layer} of shape {shape:?}",
                mask.shape()
            )));
        }
        agg.add(&mask)?;
    }
    Ok(agg)
}

/// Server step for one layer: select, prune, optionally scale.
fn server_prune_layer(
    global: &mut PrunableModel,
    layer: usize,
    agg: &AggregatedMask,
    config: &PruneConfig,
) -> Result<MaskMatrix> {
    let final_mask = select_final_mask(agg, config.sparsity, config.server_group)?;
    let target = global.layer_mut(layer);
    apply_mask_inplace(target, &final_mask)?;
    if config.scaling {
        target.weights = scale_retained(&target.weights, agg, &final_mask)?;
    }
    Ok(final_mask)
}

fn layer_shapes(model: &PrunableModel) -> Vec<(usize, usize)> {
    model.layers().iter().map(|l| l.weights.shape()).collect()
}

pub fn run_oneshot(
    global: &PrunableModel,
    clients: &mut [ClientState],
    config: &PruneConfig,
) -> Result<FederatedOutcome> {
    check_clients(clients, config)?;
    let uploads: Vec<Vec<(usize, Vec<u8>)>> = clients
        .par_iter_mut()
        .map(|client| {
            let masks = client_local_masks_oneshot(client, global, config)?;
            masks
                .iter()
                .enumerate()
                .map(|(l, m)| Ok((client.client_id, encode_mask_frame(l, client.client_id, m)?)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut ledger = CommLedger { rounds: 1, ..CommLedger::default() };
    let mut model = global.clone();
    let shapes = layer_shapes(global);
    let mut final_masks = Vec::with_capacity(shapes.len());
    let mut votes = Vec::with_capacity(shapes.len());
    for (l, &shape) in shapes.iter().enumerate() {
        let frames: Vec<(usize, Vec<u8>)> = uploads
            .iter()
            .map(|per_client| {
                per_client
                    .get(l)
                    .cloned()
                    .ok_or_else(|| PruneError::Protocol(format!("missing upload for layer {l}")))
            })
            .collect::<Result<_>>()?;
        let agg = aggregate_uploads(&frames, l, shape)?;
        ledger.record_uplink(shape, &frames);
        final_masks.push(server_prune_layer(&mut model, l, &agg, config)?);
        votes.push(agg);
    }
    Ok(FederatedOutcome { model, final_masks, votes, ledger })
}

pub fn run_iterative(
    global: &PrunableModel,
    clients: &mut [ClientState],
    config: &PruneConfig,
) -> Result<FederatedOutcome> {
    check_clients(clients, config)?;
    let settings = config.metric_settings();
    let layers = global.num_layers();
    let mut inputs: Vec<Matrix> = clients
        .iter_mut()
        .map(|c| {
            c.model = global.clone();
            c.model.embed(&c.calibration)
        })
        .collect::<Result<_>>()?;

    let mut ledger = CommLedger::default();
    let mut model = global.clone();
    let mut final_masks = Vec::with_capacity(layers);
    let mut votes = Vec::with_capacity(layers);
    for l in 0..layers {
        let shape = global.layer(l).weights.shape();
        let frames: Vec<(usize, Vec<u8>)> = clients
            .par_iter()
            .zip(inputs.par_iter())
            .map(|(client, x)| {
                let scores = score_layer(&settings, &client.model.layer(l).weights, x)?;
                let mask = mask_from_scores(&scores, config.sparsity, config.local_group)?;
                Ok((client.client_id, encode_mask_frame(l, client.client_id, &mask)?))
            })
            .collect::<Result<_>>()?;
        ledger.record_uplink(shape, &frames);
        let agg = aggregate_uploads(&frames, l, shape)?;
        let final_mask = server_prune_layer(&mut model, l, &agg, config)?;

        let broadcasts: Vec<(Vec<u8>, Option<Vec<u8>>)> = clients
            .iter()
            .map(|c| {
                let mask_frame = encode_mask_frame(l, c.client_id, &final_mask)?;
                let vote_frame =
                    if config.scaling { Some(encode_vote_frame(l, c.client_id, &agg)?) } else { None };
                Ok((mask_frame, vote_frame))
            })
            .collect::<Result<_>>()?;
        let width = u64::from(vote_bit_width(agg.client_count()));
        for (mask_frame, vote_frame) in &broadcasts {
            ledger.downlink_bits += (shape.0 * shape.1) as u64;
            ledger.downlink_bytes += mask_frame.len() as u64;
            if let Some(v) = vote_frame {
                ledger.downlink_bits += (shape.0 * shape.1) as u64 * width;
                ledger.downlink_bytes += v.len() as u64;
            }
        }
        ledger.rounds += 1;

        let clients_n = agg.client_count();
        clients
            .par_iter_mut()
            .zip(inputs.par_iter_mut())
            .zip(broadcasts.par_iter())
            .map(|((client, x), (mask_frame, vote_frame))| {
                let (_, mask) = decode_mask_frame(mask_frame)?;
                let layer = client.model.layer_mut(l);
                apply_mask_inplace(layer, &mask)?;
                if let Some(v) = vote_frame {
                    let (_, client_votes) = decode_vote_frame(v, clients_n)?;
                    layer.weights = scale_retained(&layer.weights, &client_votes, &mask)?;
                }
                if l + 1 < layers {
                    *x = client.model.forward_partial(x, l)?;
                }
                Ok(())
            })
            .collect::<Result<()>>()?;
        final_masks.push(final_mask);
        votes.push(agg);
    }
    Ok(FederatedOutcome { model, final_masks, votes, ledger })
}

/// Dispatches on `config.strategy`.
pub fn run_federated(
    global: &PrunableModel,
    clients: &mut [ClientState],
    config: &PruneConfig,
) -> Result<FederatedOutcome> {
    match config.strategy {
        Strategy::OneShot => run_oneshot(global, clients, config),
        Strategy::Iterative => run_iterative(global, clients, config),
    }
}

/// Upper-bound baseline: one pruner holding every calibration sample.
pub fn run_centralized(
    global: &PrunableModel,
    pooled: &[Vec<usize>],
    config: &PruneConfig,
) -> Result<LocalOutcome> {
    config.validate()?;
    let mut model = global.clone();
    let masks = prune_layerwise(&mut model, pooled, &config.metric_settings(), config.sparsity, config.local_group)?;
    Ok(LocalOutcome { model, masks })
}

/// Each client prunes its own copy from its own shard only.
pub fn run_local_only(
    global: &PrunableModel,
    clients: &[ClientState],
    config: &PruneConfig,
) -> Result<Vec<LocalOutcome>> {
    config.validate()?;
    clients
        .par_iter()
        .map(|c| run_centralized(global, &c.calibration, config))
        .collect()
}
