//! Synthetic corpora, reference-model training and client sharding.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{PruneError, Result};
use crate::model::{Matrix, Nonlinearity, PrunableModel};

pub type Sequence = Vec<usize>;

/// Order-1 Markov source over `0..vocab`. Row `a` of the transition matrix
/// is the distribution of the token following `a`; the first token of a
/// sequence is uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovChain {
    transition: Vec<Vec<f64>>,
}

impl MarkovChain {
    pub fn new(transition: Vec<Vec<f64>>) -> Result<Self> {
        let v = transition.len();
        if v < 2 {
            return Err(PruneError::InputDomain(format!("vocabulary of {v} tokens")));
        }
        for (a, row) in transition.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.len() != v || row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(PruneError::InputDomain(format!("transition row {a} is not a distribution")));
            }
        }
        Ok(Self { transition })
    }

    /// Rows are softmaxes of `sharpness · N(0,1)` logits; larger sharpness
    /// gives a more predictable chain.
    pub fn random<R: Rng + ?Sized>(vocab: usize, sharpness: f64, rng: &mut R) -> Result<Self> {
        if vocab < 2 {
            return Err(PruneError::InputDomain(format!("vocabulary of {vocab} tokens")));
        }
        let transition = (0..vocab)
            .map(|_| {
                let logits: Vec<f64> =
                    (0..vocab).map(|_| sharpness * rng.sample::<f64, _>(StandardNormal)).collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exp.iter().sum();
                exp.into_iter().map(|e| e / z).collect()
            })
            .collect();
        Self::new(transition)
    }

    pub fn vocab(&self) -> usize {
        self.transition.len()
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // Rounding left u above the cumulative sum; take the last supported state.
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Sequence {
        let mut seq = Vec::with_capacity(len);
        if len == 0 {
            return seq;
        }
        let mut tok = rng.random_range(0..self.vocab());
        seq.push(tok);
        for _ in 1..len {
            tok = Self::draw(&self.transition[tok], rng);
            seq.push(tok);
        }
        seq
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusParams {
    pub vocab: usize,
    pub sample_len: usize,
    pub calibration_samples: usize,
    pub heldout_samples: usize,
    pub train_samples: usize,
    pub sharpness: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            vocab: 32,
            sample_len: 64,
            calibration_samples: 128,
            heldout_samples: 32,
            train_samples: 256,
            sharpness: 2.0,
        }
    }
}

/// Train, calibration and held-out splits drawn from one chain. The splits
/// are separate draws, so no sample belongs to two of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab_size: usize,
    pub seed: u64,
    pub chain: MarkovChain,
    pub train: Vec<Sequence>,
    pub calibration: Vec<Sequence>,
    pub heldout: Vec<Sequence>,
}

impl Corpus {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| PruneError::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let corpus: Corpus = serde_json::from_str(&text).map_err(|e| PruneError::Format(e.to_string()))?;
        let bad = corpus
            .train
            .iter()
            .chain(&corpus.calibration)
            .chain(&corpus.heldout)
            .flatten()
            .any(|&t| t >= corpus.vocab_size);
        if bad || corpus.chain.vocab() != corpus.vocab_size {
            return Err(PruneError::Format("corpus tokens exceed its vocabulary".into()));
        }
        Ok(corpus)
    }
}

pub fn generate_corpus(params: &CorpusParams, seed: u64) -> Result<Corpus> {
    if params.vocab < 2 || params.sample_len < 2 {
        return Err(PruneError::InputDomain(format!(
            "corpus needs vocab >= 2 and sample_len >= 2, got {} and {}",
            params.vocab, params.sample_len
        )));
    }
    if !(params.sharpness.is_finite() && params.sharpness >= 0.0) {
        return Err(PruneError::InputDomain(format!("sharpness {}", params.sharpness)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = MarkovChain::random(params.vocab, params.sharpness, &mut rng)?;
    Ok(generate_from_chain(chain, params, seed, &mut rng))
}

/// Draws the three splits from a given chain.
pub fn generate_from_chain<R: Rng + ?Sized>(chain: MarkovChain, params: &CorpusParams, seed: u64, rng: &mut R) -> Corpus {
    let mut draw = |n: usize| (0..n).map(|_| chain.sample(params.sample_len, rng)).collect::<Vec<_>>();
    let train = draw(params.train_samples);
    let calibration = draw(params.calibration_samples);
    let heldout = draw(params.heldout_samples);
    Corpus { vocab_size: chain.vocab(), seed, chain, train, calibration, heldout }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub embed_dim: usize,
    /// Output width of each prunable layer.
    pub widths: Vec<usize>,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { embed_dim: 32, widths: vec![64, 64] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self { epochs: 300, learning_rate: 0.5 }
    }
}

/// A trained model and the full-batch loss before every update.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: PrunableModel,
    pub loss_history: Vec<f64>,
}

/// Bigram counts `C[a][b]` over consecutive token pairs.
fn bigram_counts(vocab: usize, samples: &[Sequence]) -> Result<Matrix> {
    let mut counts = Matrix::zeros(vocab, vocab);
    for s in samples {
        for w in s.windows(2) {
            if w[0] >= vocab || w[1] >= vocab {
                return Err(PruneError::InputDomain(format!("token pair {w:?} outside vocabulary {vocab}")));
            }
            let c = counts.get(w[0], w[1]);
            counts.set(w[0], w[1], c + 1.0);
        }
    }
    Ok(counts)
}

/// Full-batch gradients of the mean next-token cross-entropy.
struct Gradients {
    embedding: Matrix,
    layers: Vec<Matrix>,
    head: Matrix,
}

/// Bigram-weighted training objective. The model sees one token at a time,
/// so the full batch reduces to one forward pass over the vocabulary with
/// every row weighted by how often that token precedes each target.
struct BigramObjective {
    counts: Matrix,
    row_totals: Vec<f64>,
    pairs: f64,
}

impl BigramObjective {
    fn new(vocab: usize, samples: &[Sequence]) -> Result<Self> {
        let counts = bigram_counts(vocab, samples)?;
        let pairs: f64 = counts.data().iter().sum();
        if pairs == 0.0 {
            return Err(PruneError::InputDomain("training split has no token pairs".into()));
        }
        let row_totals = (0..counts.rows()).map(|a| counts.row(a).iter().sum()).collect();
        Ok(Self { counts, row_totals, pairs })
    }

    fn loss_and_gradients(&self, model: &PrunableModel) -> Result<(f64, Gradients)> {
        let layers = model.num_layers();
        let f = model.nonlinearity();
        // acts[l] is the input to layer l for every vocabulary entry.
        let mut acts = vec![model.embedding().clone()];
        let mut pre = Vec::with_capacity(layers);
        for l in 0..layers {
            let p = acts[l].matmul_t(&model.layer(l).weights)?;
            let a = if l + 1 < layers { p.map(|v| f.apply(v)) } else { p.clone() };
            pre.push(p);
            acts.push(a);
        }
        let logits = acts[layers].matmul(model.head())?;

        let mut loss = 0.0;
        let mut dz = Matrix::zeros(logits.rows(), logits.cols());
        for a in 0..logits.rows() {
            let z = logits.row(a);
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (b, &zb) in z.iter().enumerate() {
                let c = self.counts.get(a, b);
                if c > 0.0 {
                    loss -= c * (zb - lse);
                }
                dz.set(a, b, (self.row_totals[a] * (zb - lse).exp() - c) / self.pairs);
            }
        }
        loss /= self.pairs;

        let head = acts[layers].transpose().matmul(&dz)?;
        let mut d_act = dz.matmul(&model.head().transpose())?;
        let mut d_layers = Vec::with_capacity(layers);
        for l in (0..layers).rev() {
            if l + 1 < layers && f == Nonlinearity::Relu {
                for (g, p) in d_act.data_mut().iter_mut().zip(pre[l].data()) {
                    if *p <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            d_layers.push(d_act.transpose().matmul(&acts[l])?);
            d_act = d_act.matmul(&model.layer(l).weights)?;
        }
        d_layers.reverse();
        Ok((loss, Gradients { embedding: d_act, layers: d_layers, head }))
    }
}

/// Full-batch gradient descent with a fixed step on next-token
/// cross-entropy over the train split.
pub fn train_reference_model(
    corpus: &Corpus,
    dims: &ModelDims,
    params: &TrainParams,
    seed: u64,
) -> Result<TrainedModel> {
    let mut model = PrunableModel::synthetic(corpus.vocab_size, dims.embed_dim, &dims.widths, seed)?;
    if params.epochs == 0 {
        return Ok(TrainedModel { model, loss_history: Vec::new() });
    }
    let objective = BigramObjective::new(corpus.vocab_size, &corpus.train)?;
    let lr = params.learning_rate;
    let mut loss_history = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        let (loss, grads) = objective.loss_and_gradients(&model)?;
        if !loss.is_finite() {
            return Err(PruneError::Numerical(format!(
                "training diverged at epoch {epoch} (loss {loss}); lower the learning rate"
            )));
        }
        loss_history.push(loss);
        let (embedding, layer_list, head) = model.parts_mut();
        step(embedding, &grads.embedding, lr);
        for (layer, g) in layer_list.iter_mut().zip(&grads.layers) {
            step(&mut layer.weights, g, lr);
        }
        step(head, &grads.head, lr);
        let finite = embedding.is_finite() && head.is_finite() && layer_list.iter().all(|l| l.weights.is_finite());
        if !finite {
            return Err(PruneError::Numerical(format!("non-finite weights after epoch {epoch}")));
        }
    }
    Ok(TrainedModel { model, loss_history })
}

fn step(param: &mut Matrix, grad: &Matrix, lr: f64) {
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
}

/// Seeded shuffle, then sample `p` of the shuffled order goes to shard `p mod m`.
pub fn partition(samples: &[Sequence], m: usize, seed: u64) -> Result<Vec<Vec<Sequence>>> {
    if m == 0 || m > samples.len() {
        return Err(PruneError::InputDomain(format!(
            "cannot split {} samples across {m} clients",
            samples.len()
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut shards = vec![Vec::new(); m];
    for (p, &i) in order.iter().enumerate() {
        shards[p % m].push(samples[i].clone());
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::perplexity;
    use proptest::prelude::*;

    fn small_params() -> CorpusParams {
        CorpusParams { vocab: 8, sample_len: 16, calibration_samples: 8, heldout_samples: 8, train_samples: 64, sharpness: 2.0 }
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = generate_corpus(&small_params(), 5).unwrap();
        let b = generate_corpus(&small_params(), 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_corpus(&small_params(), 6).unwrap());
        assert!(a.calibration.iter().flatten().all(|&t| t < 8));
    }

    #[test]
    fn degenerate_params_rejected() {
        let p = CorpusParams { vocab: 1, ..small_params() };
        assert!(matches!(generate_corpus(&p, 1), Err(PruneError::InputDomain(_))));
        let p = CorpusParams { sample_len: 1, ..small_params() };
        assert!(matches!(generate_corpus(&p, 1), Err(PruneError::InputDomain(_))));
    }

    #[test]
    fn identity_chain_gives_constant_sequences() {
        let chain = MarkovChain::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let corpus = generate_from_chain(chain, &CorpusParams { vocab: 2, ..small_params() }, 1, &mut rng);
        for s in corpus.train.iter().chain(&corpus.calibration) {
            assert!(s.iter().all(|&t| t == s[0]));
        }
    }

    #[test]
    fn bigram_frequencies_match_transition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let chain = MarkovChain::random(4, 1.0, &mut rng).unwrap();
        let seq = chain.sample(100_000, &mut rng);
        let mut counts = vec![vec![0usize; 4]; 4];
        for w in seq.windows(2) {
            counts[w[0]][w[1]] += 1;
        }
        for (a, row) in counts.iter().enumerate() {
            let n: usize = row.iter().sum();
            let tv: f64 = row
                .iter()
                .zip(&chain.transition()[a])
                .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv <= 0.02, "row {a}: tv {tv}");
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let corpus = generate_corpus(&small_params(), 3).unwrap();
        let dims = ModelDims { embed_dim: 4, widths: vec![6, 5] };
        let out = train_reference_model(&corpus, &dims, &TrainParams { epochs: 0, learning_rate: 0.5 }, 9).unwrap();
        assert_eq!(out.model, PrunableModel::synthetic(8, 4, &[6, 5], 9).unwrap());
    }

    #[test]
    fn training_reduces_loss_and_beats_uniform() {
        let corpus = generate_corpus(&small_params(), 3).unwrap();
        let dims = ModelDims { embed_dim: 8, widths: vec![16, 16] };
        let params = TrainParams { epochs: 200, learning_rate: 0.5 };
        let a = train_reference_model(&corpus, &dims, &params, 9).unwrap();
        let h = &a.loss_history;
        assert_eq!(h.len(), 200);
        assert!(h.last().unwrap() < &h[0]);
        assert!(perplexity(&a.model, &corpus.heldout).unwrap() < 8.0);
        let b = train_reference_model(&corpus, &dims, &params, 9).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn gradients_match_central_differences() {
        let corpus = generate_corpus(&small_params(), 4).unwrap();
        let objective = BigramObjective::new(8, &corpus.train).unwrap();
        let model = PrunableModel::synthetic(8, 3, &[5, 4], 2).unwrap();
        let (_, grads) = objective.loss_and_gradients(&model).unwrap();
        let h = 1e-6;
        let loss_at = |m: &PrunableModel| objective.loss_and_gradients(m).unwrap().0;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * h);
            assert!((analytic - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()), "{analytic} vs {numeric}");
        };
        for idx in [0, 7, 13] {
            let mut p = model.clone();
            let mut q = model.clone();
            p.parts_mut().0.data_mut()[idx] += h;
            q.parts_mut().0.data_mut()[idx] -= h;
            check(grads.embedding.data()[idx], loss_at(&p), loss_at(&q));
        }
        for l in 0..2 {
            for idx in [0, 5, 11] {
                let mut p = model.clone();
                let mut q = model.clone();
                p.parts_mut().1[l].weights.data_mut()[idx] += h;
                q.parts_mut().1[l].weights.data_mut()[idx] -= h;
                check(grads.layers[l].data()[idx], loss_at(&p), loss_at(&q));
            }
        }
        for idx in [0, 9, 31] {
            let mut p = model.clone();
            let mut q = model.clone();
            p.parts_mut().2.data_mut()[idx] += h;
            q.parts_mut().2.data_mut()[idx] -= h;
            check(grads.head.data()[idx], loss_at(&p), loss_at(&q));
        }
    }

    #[test]
    fn divergence_is_reported() {
        let corpus = generate_corpus(&small_params(), 3).unwrap();
        let dims = ModelDims { embed_dim: 4, widths: vec![8] };
        let r = train_reference_model(&corpus, &dims, &TrainParams { epochs: 50, learning_rate: 1e200 }, 1);
        assert!(matches!(r, Err(PruneError::Numerical(_))));
    }

    #[test]
    fn partition_examples() {
        let samples: Vec<Sequence> = (0..128).map(|i| vec![i]).collect();
        let shards = partition(&samples, 64, 1).unwrap();
        assert!(shards.iter().all(|s| s.len() == 2));

        let one = partition(&samples, 1, 1).unwrap();
        let mut all = one[0].clone();
        all.sort();
        assert_eq!(all, samples);

        let seven: Vec<Sequence> = (0..7).map(|i| vec![i]).collect();
        let sizes: Vec<usize> = partition(&seven, 3, 2).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 2, 2]);

        assert!(matches!(partition(&seven, 8, 2), Err(PruneError::InputDomain(_))));
        assert!(partition(&seven, 0, 2).is_err());
    }

    #[test]
    fn corpus_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let c = generate_corpus(&small_params(), 8).unwrap();
        c.save_json(&path).unwrap();
        assert_eq!(Corpus::load_json(&path).unwrap(), c);
    }

    proptest! {
        #[test]
        fn partition_is_set_partition(n in 1usize..60, m_frac in 0.0f64..1.0, seed in any::<u64>()) {
            let m = 1 + ((n - 1) as f64 * m_frac) as usize;
            let samples: Vec<Sequence> = (0..n).map(|i| vec![i]).collect();
            let shards = partition(&samples, m, seed).unwrap();
            prop_assert_eq!(shards.len(), m);
            let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut seen: Vec<usize> = shards.iter().flatten().map(|s| s[0]).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }
}
