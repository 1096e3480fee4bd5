//! Binary prune masks, vote aggregation and the packed wire format.
//!
//! Mask convention: `1` (true) marks a pruned weight. Within every
//! comparison group the budget is `k = floor(s · group_size)`; ties are
//! always broken by ascending row-major index so that selection is a pure
//! function of its inputs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, PruneError, Result};
use crate::metrics::ImportanceScores;
use crate::model::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonGroup {
    Layer,
    Row,
    Column,
}

impl ComparisonGroup {
    pub const ALL: [ComparisonGroup; 3] = [ComparisonGroup::Layer, ComparisonGroup::Row, ComparisonGroup::Column];

    pub fn name(self) -> &'static str {
        match self {
            ComparisonGroup::Layer => "layer",
            ComparisonGroup::Row => "row",
            ComparisonGroup::Column => "column",
        }
    }

    /// Row-major entry indices of every group instance, each in ascending order.
    pub fn instances(self, rows: usize, cols: usize) -> Vec<Vec<usize>> {
        match self {
            ComparisonGroup::Layer => vec![(0..rows * cols).collect()],
            ComparisonGroup::Row => (0..rows).map(|r| (r * cols..(r + 1) * cols).collect()).collect(),
            ComparisonGroup::Column => (0..cols).map(|c| (0..rows).map(|r| r * cols + c).collect()).collect(),
        }
    }

    /// Entries pruned in total for a `rows x cols` matrix at sparsity `s`.
    pub fn total_budget(self, rows: usize, cols: usize, sparsity: f64) -> usize {
        match self {
            ComparisonGroup::Layer => group_budget(sparsity, rows * cols),
            ComparisonGroup::Row => rows * group_budget(sparsity, cols),
            ComparisonGroup::Column => cols * group_budget(sparsity, rows),
        }
    }
}

impl fmt::Display for ComparisonGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ComparisonGroup {
    type Err = PruneError;

    fn from_str(s: &str) -> Result<Self> {
        ComparisonGroup::ALL
            .into_iter()
            .find(|g| g.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| PruneError::Spec(format!("unknown comparison group {s:?}")))
    }
}

/// `floor(s · n)`. The product is nudged by 1e-9 so that ratios such as
/// 0.29 · 100 land on the integer they denote rather than one below.
pub fn group_budget(sparsity: f64, group_size: usize) -> usize {
    let k = (sparsity * group_size as f64 + 1e-9).floor();
    (k.max(0.0) as usize).min(group_size)
}

pub fn check_sparsity(sparsity: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(PruneError::InputDomain(format!("sparsity {sparsity} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl MaskMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, bits: vec![false; rows * cols] }
    }

    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(shape_err(format!("mask {rows}x{cols} from {} bits", bits.len())));
        }
        Ok(Self { rows, cols, bits })
    }

    /// Builds a mask from rows of 0/1 values.
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut bits = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err("ragged mask rows"));
            }
            for &v in r {
                match v {
                    0 => bits.push(false),
                    1 => bits.push(true),
                    _ => return Err(PruneError::InputDomain(format!("mask value {v} is not 0/1"))),
                }
            }
        }
        Ok(Self { rows: rows.len(), cols, bits })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, pruned: bool) {
        self.bits[r * self.cols + c] = pruned;
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Pruned entries inside each instance of `group`.
    pub fn group_popcounts(&self, group: ComparisonGroup) -> Vec<usize> {
        group
            .instances(self.rows, self.cols)
            .iter()
            .map(|idx| idx.iter().filter(|&&i| self.bits[i]).count())
            .collect()
    }

    pub fn pack(&self) -> Vec<u8> {
        pack_mask(self)
    }
}

/// Per-entry prune vote counts from `clients` masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregatedMask {
    rows: usize,
    cols: usize,
    votes: Vec<u32>,
    clients: u32,
}

impl AggregatedMask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self { rows, cols, votes: vec![0; rows * cols], clients: 0 }
    }

    pub fn from_votes(rows: usize, cols: usize, votes: Vec<u32>, clients: u32) -> Result<Self> {
        if votes.len() != rows * cols {
            return Err(shape_err(format!("{} votes for a {rows}x{cols} mask", votes.len())));
        }
        if let Some(v) = votes.iter().find(|&&v| v > clients) {
            return Err(PruneError::InputDomain(format!("vote count {v} exceeds client count {clients}")));
        }
        Ok(Self { rows, cols, votes, clients })
    }

    pub fn add(&mut self, mask: &MaskMatrix) -> Result<()> {
        if mask.shape() != (self.rows, self.cols) {
            return Err(shape_err(format!(
                "mask {:?} does not match aggregate {:?}",
                mask.shape(),
                (self.rows, self.cols)
            )));
        }
        for (v, &b) in self.votes.iter_mut().zip(&mask.bits) {
            *v += u32::from(b);
        }
        self.clients += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn votes(&self) -> &[u32] {
        &self.votes
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.votes[r * self.cols + c]
    }

    pub fn client_count(&self) -> u32 {
        self.clients
    }
}

pub fn aggregate_masks(masks: &[MaskMatrix]) -> Result<AggregatedMask> {
    let first = masks
        .first()
        .ok_or_else(|| PruneError::InputDomain("no masks to aggregate".into()))?;
    let mut agg = AggregatedMask::empty(first.rows, first.cols);
    for m in masks {
        agg.add(m)?;
    }
    Ok(agg)
}

/// Marks the first `k` entries of each group instance after ordering them
/// with `cmp` (a total order that already includes the index tie-break).
fn select_per_group(
    rows: usize,
    cols: usize,
    sparsity: f64,
    group: ComparisonGroup,
    cmp: impl Fn(usize, usize) -> std::cmp::Ordering,
) -> MaskMatrix {
    let mut mask = MaskMatrix::zeros(rows, cols);
    for mut idx in group.instances(rows, cols) {
        let k = group_budget(sparsity, idx.len());
        if k == 0 {
            continue;
        }
        if k < idx.len() {
            idx.select_nth_unstable_by(k - 1, |&a, &b| cmp(a, b));
        }
        for &i in &idx[..k] {
            mask.bits[i] = true;
        }
    }
    mask
}

/// Prunes the `floor(s · group_size)` lowest-scoring entries of every group.
pub fn mask_from_scores(scores: &ImportanceScores, sparsity: f64, group: ComparisonGroup) -> Result<MaskMatrix> {
    mask_from_score_matrix(&scores.scores, sparsity, group)
}

pub fn mask_from_score_matrix(scores: &Matrix, sparsity: f64, group: ComparisonGroup) -> Result<MaskMatrix> {
    check_sparsity(sparsity)?;
    let s = scores.data();
    Ok(select_per_group(scores.rows(), scores.cols(), sparsity, group, |a, b| {
        s[a].total_cmp(&s[b]).then(a.cmp(&b))
    }))
}

/// Prunes the `floor(s · group_size)` most-voted entries of every group.
pub fn select_final_mask(agg: &AggregatedMask, sparsity: f64, group: ComparisonGroup) -> Result<MaskMatrix> {
    check_sparsity(sparsity)?;
    let v = &agg.votes;
    Ok(select_per_group(agg.rows, agg.cols, sparsity, group, |a, b| {
        v[b].cmp(&v[a]).then(a.cmp(&b))
    }))
}

/// `W ⊙ (m − votes)/m`. Entries pruned by `final_mask` are returned as 0.
pub fn scale_retained(w_pruned: &Matrix, agg: &AggregatedMask, final_mask: &MaskMatrix) -> Result<Matrix> {
    if w_pruned.shape() != agg.shape() || agg.shape() != final_mask.shape() {
        return Err(shape_err(format!(
            "scale_retained shapes: weights {:?}, votes {:?}, mask {:?}",
            w_pruned.shape(),
            agg.shape(),
            final_mask.shape()
        )));
    }
    if agg.clients == 0 {
        return Err(PruneError::InputDomain("aggregate holds no client votes".into()));
    }
    let m = f64::from(agg.clients);
    let mut out = w_pruned.clone();
    for ((w, &v), &pruned) in out.data_mut().iter_mut().zip(&agg.votes).zip(&final_mask.bits) {
        *w = if pruned { 0.0 } else { *w * (f64::from(agg.clients - v) / m) };
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

/// Size of the little-endian `{layer_index, rows, cols, client_id}` header.
pub const FRAME_HEADER_BYTES: usize = 16;

pub fn packed_len(rows: usize, cols: usize) -> usize {
    (rows * cols).div_ceil(8)
}

/// MSB-first fixed-width bit writer.
struct BitWriter {
    bytes: Vec<u8>,
    used: usize,
}

impl BitWriter {
    fn with_bits(total_bits: usize) -> Self {
        Self { bytes: Vec::with_capacity(total_bits.div_ceil(8)), used: 0 }
    }

    fn push(&mut self, value: u32, width: u32) {
        for shift in (0..width).rev() {
            if self.used.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if (value >> shift) & 1 == 1 {
                let last = self.bytes.len() - 1;
                self.bytes[last] |= 0x80 >> (self.used % 8);
            }
            self.used += 1;
        }
    }
}

fn read_bits(bytes: &[u8], start: usize, width: u32) -> u32 {
    (0..width as usize).fold(0u32, |acc, i| {
        let bit = start + i;
        (acc << 1) | u32::from((bytes[bit / 8] >> (7 - bit % 8)) & 1)
    })
}

/// Row-major bits, MSB-first within each byte, zero-padded final byte.
pub fn pack_mask(mask: &MaskMatrix) -> Vec<u8> {
    let mut w = BitWriter::with_bits(mask.bits.len());
    for &b in &mask.bits {
        w.push(u32::from(b), 1);
    }
    w.bytes
}

pub fn unpack_mask(bytes: &[u8], rows: usize, cols: usize) -> Result<MaskMatrix> {
    let expected = packed_len(rows, cols);
    if bytes.len() != expected {
        return Err(PruneError::Format(format!(
            "{rows}x{cols} mask needs {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let bits = (0..rows * cols).map(|i| read_bits(bytes, i, 1) == 1).collect();
    Ok(MaskMatrix { rows, cols, bits })
}

/// Bits per vote entry for `m` clients: `ceil(log2(m + 1))`.
pub fn vote_bit_width(clients: u32) -> u32 {
    u32::BITS - clients.leading_zeros()
}

pub fn pack_votes(agg: &AggregatedMask) -> Vec<u8> {
    let width = vote_bit_width(agg.clients);
    let mut w = BitWriter::with_bits(agg.votes.len() * width as usize);
    for &v in &agg.votes {
        w.push(v, width);
    }
    w.bytes
}

pub fn unpack_votes(bytes: &[u8], rows: usize, cols: usize, clients: u32) -> Result<AggregatedMask> {
    let width = vote_bit_width(clients);
    let expected = (rows * cols * width as usize).div_ceil(8);
    if bytes.len() != expected {
        return Err(PruneError::Format(format!(
            "{rows}x{cols} vote block at {width} bits needs {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let votes = (0..rows * cols).map(|i| read_bits(bytes, i * width as usize, width)).collect();
    AggregatedMask::from_votes(rows, cols, votes, clients)
        .map_err(|e| PruneError::Format(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub layer_index: u32,
    pub rows: u32,
    pub cols: u32,
    pub client_id: u32,
}

impl FrameHeader {
    fn write(&self, out: &mut Vec<u8>) {
        for v in [self.layer_index, self.rows, self.cols, self.client_id] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FRAME_HEADER_BYTES {
            return Err(PruneError::Format(format!("frame of {} bytes has no header", bytes.len())));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
        Ok(Self { layer_index: word(0), rows: word(1), cols: word(2), client_id: word(3) })
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| PruneError::Format(format!("{what} {v} does not fit in u32")))
}

pub fn encode_mask_frame(layer_index: usize, client_id: usize, mask: &MaskMatrix) -> Result<Vec<u8>> {
    let header = FrameHeader {
        layer_index: to_u32(layer_index, "layer index")?,
        rows: to_u32(mask.rows, "rows")?,
        cols: to_u32(mask.cols, "cols")?,
        client_id: to_u32(client_id, "client id")?,
    };
    let mut out = Vec::with_capacity(FRAME_HEADER_BYTES + packed_len(mask.rows, mask.cols));
    header.write(&mut out);
    out.extend(pack_mask(mask));
    Ok(out)
}

pub fn decode_mask_frame(bytes: &[u8]) -> Result<(FrameHeader, MaskMatrix)> {
    let header = FrameHeader::read(bytes)?;
    let mask = unpack_mask(&bytes[FRAME_HEADER_BYTES..], header.rows as usize, header.cols as usize)?;
    Ok((header, mask))
}

/// Vote-count broadcast: same header (with the recipient's id) followed by
/// `vote_bit_width(m)`-bit entries.
pub fn encode_vote_frame(layer_index: usize, client_id: usize, agg: &AggregatedMask) -> Result<Vec<u8>> {
    let header = FrameHeader {
        layer_index: to_u32(layer_index, "layer index")?,
        rows: to_u32(agg.rows, "rows")?,
        cols: to_u32(agg.cols, "cols")?,
        client_id: to_u32(client_id, "client id")?,
    };
    let mut out = Vec::new();
    header.write(&mut out);
    out.extend(pack_votes(agg));
    Ok(out)
}

pub fn decode_vote_frame(bytes: &[u8], clients: u32) -> Result<(FrameHeader, AggregatedMask)> {
    let header = FrameHeader::read(bytes)?;
    let agg = unpack_votes(&bytes[FRAME_HEADER_BYTES..], header.rows as usize, header.cols as usize, clients)?;
    Ok((header, agg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{score_magnitude, MetricKind};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scores(rows: &[[f64; 2]]) -> ImportanceScores {
        ImportanceScores { scores: Matrix::from_rows(rows).unwrap(), metric: MetricKind::Magnitude }
    }

    #[test]
    fn mask_from_scores_examples() {
        let s = scores(&[[4.0, 1.0], [3.0, 2.0]]);
        let expect = |rows: &[[u8; 2]]| MaskMatrix::from_rows(rows).unwrap();
        assert_eq!(mask_from_scores(&s, 0.5, ComparisonGroup::Layer).unwrap(), expect(&[[0, 1], [0, 1]]));
        assert_eq!(mask_from_scores(&s, 0.5, ComparisonGroup::Row).unwrap(), expect(&[[0, 1], [0, 1]]));
        assert_eq!(mask_from_scores(&s, 0.5, ComparisonGroup::Column).unwrap(), expect(&[[0, 1], [1, 0]]));
    }

    #[test]
    fn sparsity_bounds() {
        let s = scores(&[[4.0, 1.0], [3.0, 2.0]]);
        assert_eq!(mask_from_scores(&s, 0.0, ComparisonGroup::Layer).unwrap().popcount(), 0);
        assert_eq!(mask_from_scores(&s, 1.0, ComparisonGroup::Row).unwrap().popcount(), 4);
        assert!(mask_from_scores(&s, 1.5, ComparisonGroup::Row).is_err());
        assert!(mask_from_scores(&s, -0.1, ComparisonGroup::Row).is_err());
    }

    #[test]
    fn budget_is_floor() {
        assert_eq!(group_budget(0.5, 7), 3);
        assert_eq!(group_budget(0.7, 10), 7);
        assert_eq!(group_budget(0.29, 100), 29);
        assert_eq!(group_budget(1.0, 5), 5);
        assert_eq!(group_budget(0.0, 5), 0);
    }

    #[test]
    fn aggregate_examples() {
        let a = MaskMatrix::from_rows(&[[1, 0]]).unwrap();
        let b = MaskMatrix::from_rows(&[[0, 1]]).unwrap();
        let agg = aggregate_masks(&[a.clone(), b]).unwrap();
        assert_eq!(agg.votes(), &[1, 1]);
        assert_eq!(agg.client_count(), 2);

        let twice = aggregate_masks(&[a.clone(), a]).unwrap();
        assert_eq!(twice.votes(), &[2, 0]);

        assert!(matches!(aggregate_masks(&[]), Err(PruneError::InputDomain(_))));
        let bad = [MaskMatrix::zeros(1, 2), MaskMatrix::zeros(2, 1)];
        assert!(matches!(aggregate_masks(&bad), Err(PruneError::Shape(_))));
    }

    #[test]
    fn aggregate_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let masks: Vec<MaskMatrix> = (0..5)
            .map(|_| MaskMatrix::from_bits(6, 9, (0..54).map(|_| rng.random_bool(0.4)).collect()).unwrap())
            .collect();
        let agg = aggregate_masks(&masks).unwrap();
        for r in 0..6 {
            for c in 0..9 {
                let mut n = 0;
                for m in &masks {
                    if m.get(r, c) {
                        n += 1;
                    }
                }
                assert_eq!(agg.get(r, c), n);
            }
        }
    }

    #[test]
    fn select_final_examples() {
        let agg = AggregatedMask::from_votes(2, 2, vec![3, 1, 0, 2], 3).unwrap();
        let m = select_final_mask(&agg, 0.5, ComparisonGroup::Layer).unwrap();
        assert_eq!(m, MaskMatrix::from_rows(&[[1, 0], [0, 1]]).unwrap());

        let flat = AggregatedMask::from_votes(2, 4, vec![2; 8], 2).unwrap();
        let m = select_final_mask(&flat, 0.5, ComparisonGroup::Row).unwrap();
        assert_eq!(m, MaskMatrix::from_rows(&[[1, 1, 0, 0], [1, 1, 0, 0]]).unwrap());
    }

    #[test]
    fn scale_examples() {
        let w = Matrix::from_rows(&[[2.0, 4.0]]).unwrap();
        let none = AggregatedMask::from_votes(1, 2, vec![0, 0], 4).unwrap();
        assert_eq!(scale_retained(&w, &none, &MaskMatrix::zeros(1, 2)).unwrap(), w);

        let one = AggregatedMask::from_votes(1, 2, vec![1, 0], 4).unwrap();
        let out = scale_retained(&w, &one, &MaskMatrix::zeros(1, 2)).unwrap();
        assert_eq!(out.data(), &[1.5, 4.0]);

        let pruned = Matrix::from_rows(&[[2.0, 0.0]]).unwrap();
        let agg = AggregatedMask::from_votes(1, 2, vec![1, 3], 4).unwrap();
        let fin = MaskMatrix::from_rows(&[[0, 1]]).unwrap();
        assert_eq!(scale_retained(&pruned, &agg, &fin).unwrap().data(), &[1.5, 0.0]);

        assert!(scale_retained(&w, &AggregatedMask::empty(2, 1), &MaskMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn pack_layout() {
        let m = MaskMatrix::from_rows(&[[1, 0, 0, 0, 0, 0, 0, 1]]).unwrap();
        assert_eq!(pack_mask(&m), vec![0x81]);
        assert_eq!(pack_mask(&MaskMatrix::zeros(3, 3)), vec![0, 0]);
        let tail = MaskMatrix::from_rows(&[[1, 1, 1, 1, 1, 1, 1, 1, 1]]).unwrap();
        assert_eq!(pack_mask(&tail), vec![0xFF, 0x80]);
    }

    #[test]
    fn unpack_rejects_wrong_length() {
        assert!(matches!(unpack_mask(&[0], 3, 3), Err(PruneError::Format(_))));
        assert!(matches!(unpack_mask(&[0, 0, 0], 3, 3), Err(PruneError::Format(_))));
    }

    #[test]
    fn vote_widths() {
        assert_eq!(vote_bit_width(1), 1);
        assert_eq!(vote_bit_width(2), 2);
        assert_eq!(vote_bit_width(3), 2);
        assert_eq!(vote_bit_width(4), 3);
        assert_eq!(vote_bit_width(7), 3);
        assert_eq!(vote_bit_width(8), 4);
        assert_eq!(vote_bit_width(64), 7);
    }

    #[test]
    fn frame_round_trip_and_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = MaskMatrix::from_bits(13, 7, (0..91).map(|_| rng.random_bool(0.5)).collect()).unwrap();
        let frame = encode_mask_frame(2, 5, &mask).unwrap();
        assert_eq!(frame.len(), FRAME_HEADER_BYTES + 12);
        assert_eq!(&frame[..4], &2u32.to_le_bytes());
        let (h, back) = decode_mask_frame(&frame).unwrap();
        assert_eq!(h, FrameHeader { layer_index: 2, rows: 13, cols: 7, client_id: 5 });
        assert_eq!(back, mask);
        assert!(decode_mask_frame(&frame[..10]).is_err());
    }

    #[test]
    fn vote_frame_round_trip() {
        let agg = AggregatedMask::from_votes(2, 3, vec![0, 5, 3, 1, 4, 2], 5).unwrap();
        let frame = encode_vote_frame(1, 0, &agg).unwrap();
        assert_eq!(frame.len(), FRAME_HEADER_BYTES + (6 * 3usize).div_ceil(8));
        let (_, back) = decode_vote_frame(&frame, 5).unwrap();
        assert_eq!(back, agg);
    }

    #[test]
    fn unanimous_votes_select_client_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Matrix::gaussian(8, 8, 1.0, &mut rng);
        for g in ComparisonGroup::ALL {
            let local = mask_from_scores(&score_magnitude(&w), 0.5, g).unwrap();
            let agg = aggregate_masks(&[local.clone(), local.clone(), local.clone()]).unwrap();
            assert_eq!(select_final_mask(&agg, 0.5, g).unwrap(), local);
        }
    }

    fn arb_mask() -> impl Strategy<Value = MaskMatrix> {
        (1usize..20, 1usize..20).prop_flat_map(|(r, c)| {
            proptest::collection::vec(any::<bool>(), r * c)
                .prop_map(move |bits| MaskMatrix::from_bits(r, c, bits).unwrap())
        })
    }

    proptest! {
        #[test]
        fn pack_unpack_identity(mask in arb_mask()) {
            let bytes = pack_mask(&mask);
            prop_assert_eq!(bytes.len(), packed_len(mask.rows(), mask.cols()));
            prop_assert_eq!(unpack_mask(&bytes, mask.rows(), mask.cols()).unwrap(), mask);
        }

        #[test]
        fn group_exactness(
            rows in 1usize..12, cols in 1usize..12, s in 0.0f64..=1.0, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..rows * cols).map(|_| f64::from(rng.random_range(0u8..4))).collect();
            let m = Matrix::new(rows, cols, data).unwrap();
            for g in ComparisonGroup::ALL {
                let mask = mask_from_score_matrix(&m, s, g).unwrap();
                for (inst, count) in g.instances(rows, cols).iter().zip(mask.group_popcounts(g)) {
                    prop_assert_eq!(count, group_budget(s, inst.len()));
                }
                prop_assert_eq!(mask.popcount(), g.total_budget(rows, cols, s));
            }
        }

        #[test]
        fn vote_monotonicity(
            rows in 1usize..8, cols in 1usize..8, s in 0.0f64..=1.0, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rows * cols;
            let base: Vec<u32> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let e = rng.random_range(0..n);
            let mut bumped = base.clone();
            bumped[e] += 1;
            let a = AggregatedMask::from_votes(rows, cols, bumped, 4).unwrap();
            let b = AggregatedMask::from_votes(rows, cols, base, 4).unwrap();
            for g in ComparisonGroup::ALL {
                if select_final_mask(&b, s, g).unwrap().bits()[e] {
                    prop_assert!(select_final_mask(&a, s, g).unwrap().bits()[e]);
                }
            }
        }
    }
}
