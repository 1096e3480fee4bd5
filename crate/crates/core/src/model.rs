//! Dense matrices and the prunable layer stack.
//!
//! A [`PrunableModel`] is `embedding -> [linear -> relu]* -> linear -> head`.
//! Only the linear layers between embedding and head are ever pruned.
//! Activations are laid out one token per row, so a layer with weights
//! `W (d_out x d_in)` maps an input `X (tokens x d_in)` to `X · Wᵀ`.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, PruneError, Result};
use crate::masking::MaskMatrix;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = PruneError;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PruneError::Numerical("matrix contains non-finite values".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err(format!("row {i} has {} entries, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Entries drawn i.i.d. from `N(0, std²)`.
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, the layer application for row-per-token activations.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape_err(format!(
                "cannot multiply {}x{} by transpose of {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = a.iter().zip(other.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        Ok(out)
    }

    /// `selfᵀ · self`, the (unnormalized) Gram matrix of the columns.
    pub fn gram(&self) -> Matrix {
        let n = self.cols;
        let mut out = Self::zeros(n, n);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..n {
                let a = row[i];
                if a == 0.0 {
                    continue;
                }
                for j in i..n {
                    out.data[i * n + j] += a * row[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                out.data[i * n + j] = out.data[j * n + i];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(shape_err(format!(
                "cannot subtract {:?} from {:?}",
                other.shape(),
                self.shape()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// Squared Frobenius norm.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn count_zeros(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0.0).count()
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(shape_err(format!("vstack: {} columns vs {cols}", p.cols)));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix { rows, cols, data })
    }
}

/// Elementwise function applied between prunable layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Relu,
    Identity,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Relu => x.max(0.0),
            Nonlinearity::Identity => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    /// `d_out x d_in`.
    pub weights: Matrix,
    pub layer_index: usize,
}

impl LinearLayer {
    pub fn d_out(&self) -> usize {
        self.weights.rows()
    }

    pub fn d_in(&self) -> usize {
        self.weights.cols()
    }
}

/// Inputs seen by each prunable layer during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub per_layer_inputs: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunableModel {
    embedding: Matrix,
    layers: Vec<LinearLayer>,
    head: Matrix,
    nonlinearity: Nonlinearity,
}

impl PrunableModel {
    pub fn new(
        embedding: Matrix,
        weights: Vec<Matrix>,
        head: Matrix,
        nonlinearity: Nonlinearity,
    ) -> Result<Self> {
        if weights.is_empty() {
            return Err(shape_err("model needs at least one prunable layer"));
        }
        if embedding.rows() < 1 || embedding.cols() < 1 {
            return Err(shape_err("embedding must be non-empty"));
        }
        let mut d_in = embedding.cols();
        for (l, w) in weights.iter().enumerate() {
            if w.rows() < 1 || w.cols() < 1 {
                return Err(shape_err(format!("layer {l} has an empty weight matrix")));
            }
            if w.cols() != d_in {
                return Err(shape_err(format!("layer {l} expects input {}, got {d_in}", w.cols())));
            }
            d_in = w.rows();
        }
        if head.rows() != d_in {
            return Err(shape_err(format!("head expects input {}, got {d_in}", head.rows())));
        }
        if head.cols() != embedding.rows() {
            return Err(shape_err(format!(
                "head emits {} logits for a vocabulary of {}",
                head.cols(),
                embedding.rows()
            )));
        }
        let layers = weights
            .into_iter()
            .enumerate()
            .map(|(layer_index, weights)| LinearLayer { weights, layer_index })
            .collect();
        Ok(Self { embedding, layers, head, nonlinearity })
    }

    /// Seeded initialization: embedding `N(0,1)`, layer and head weights
    /// `N(0, 1/d_in)`. `widths` are the output sizes of the prunable layers.
    pub fn synthetic(vocab: usize, embed_dim: usize, widths: &[usize], seed: u64) -> Result<Self> {
        if vocab < 1 || embed_dim < 1 || widths.is_empty() || widths.contains(&0) {
            return Err(PruneError::InputDomain(format!(
                "degenerate model dims: vocab={vocab} embed={embed_dim} widths={widths:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Matrix::gaussian(vocab, embed_dim, 1.0, &mut rng);
        let mut d_in = embed_dim;
        let mut weights = Vec::with_capacity(widths.len());
        for &d_out in widths {
            weights.push(Matrix::gaussian(d_out, d_in, 1.0 / (d_in as f64).sqrt(), &mut rng));
            d_in = d_out;
        }
        let head = Matrix::gaussian(d_in, vocab, 1.0 / (d_in as f64).sqrt(), &mut rng);
        Self::new(embedding, weights, head, Nonlinearity::Relu)
    }

    pub fn vocab(&self) -> usize {
        self.embedding.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LinearLayer {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LinearLayer {
        &mut self.layers[l]
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub fn head(&self) -> &Matrix {
        &self.head
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    /// Total number of prunable weights, `Σ d_out·d_in`.
    pub fn prunable_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Matrix, &mut [LinearLayer], &mut Matrix) {
        (&mut self.embedding, &mut self.layers, &mut self.head)
    }

    /// Embedding rows for every token of every sequence, flattened in order.
    pub fn embed(&self, batch: &[Vec<usize>]) -> Result<Matrix> {
        let total: usize = batch.iter().map(Vec::len).sum();
        if total == 0 {
            return Err(PruneError::InputDomain("empty token batch".into()));
        }
        let d = self.embed_dim();
        let mut data = Vec::with_capacity(total * d);
        for &tok in batch.iter().flatten() {
            if tok >= self.vocab() {
                return Err(PruneError::InputDomain(format!(
                    "token {tok} out of range for vocabulary {}",
                    self.vocab()
                )));
            }
            data.extend_from_slice(self.embedding.row(tok));
        }
        Matrix::new(total, d, data)
    }

    /// Applies layer `from_layer` to `input`, with the nonlinearity unless it
    /// is the last prunable layer.
    pub fn forward_partial(&self, input: &Matrix, from_layer: usize) -> Result<Matrix> {
        let layer = self
            .layers
            .get(from_layer)
            .ok_or_else(|| shape_err(format!("no layer {from_layer}")))?;
        if input.cols() != layer.d_in() {
            return Err(shape_err(format!(
                "layer {from_layer} expects {} input features, got {}",
                layer.d_in(),
                input.cols()
            )));
        }
        let out = input.matmul_t(&layer.weights)?;
        if from_layer + 1 == self.layers.len() {
            Ok(out)
        } else {
            let f = self.nonlinearity;
            Ok(out.map(|v| f.apply(v)))
        }
    }

    /// Head projection of the last layer's output.
    pub fn logits_from_final(&self, last_output: &Matrix) -> Result<Matrix> {
        last_output.matmul(&self.head)
    }

    pub fn forward_with_trace(&self, batch: &[Vec<usize>]) -> Result<(Matrix, ActivationTrace)> {
        let mut x = self.embed(batch)?;
        let mut per_layer_inputs = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let next = self.forward_partial(&x, l)?;
            per_layer_inputs.push(x);
            x = next;
        }
        let logits = self.logits_from_final(&x)?;
        Ok((logits, ActivationTrace { per_layer_inputs }))
    }

    pub fn forward(&self, batch: &[Vec<usize>]) -> Result<Matrix> {
        self.forward_with_trace(batch).map(|(logits, _)| logits)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, model: self.clone() };
        let text = serde_json::to_string(&ckpt).map_err(|e| PruneError::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| PruneError::Format(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(PruneError::Format(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let m = ckpt.model;
        let weights = m.layers.into_iter().map(|l| l.weights).collect();
        Self::new(m.embedding, weights, m.head, m.nonlinearity)
    }
}

const CHECKPOINT_FORMAT: &str = "fedprune-model";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: PrunableModel,
}

/// Zeroes the entries of `layer` marked 1 in `mask`; other entries are untouched.
pub fn apply_mask_inplace(layer: &mut LinearLayer, mask: &MaskMatrix) -> Result<()> {
    if mask.shape() != layer.weights.shape() {
        return Err(shape_err(format!(
            "mask {:?} does not match layer {} weights {:?}",
            mask.shape(),
            layer.layer_index,
            layer.weights.shape()
        )));
    }
    for (w, &pruned) in layer.weights.data_mut().iter_mut().zip(mask.bits()) {
        if pruned {
            *w = 0.0;
        }
    }
    Ok(())
}
