//! Prototypical head: per-relation centroids, relation-level score vectors
//! from a small CNN over the stacked support embeddings, score-weighted
//! squared-Euclidean distances, and distance-softmax classification.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{NodeId, ParameterStore, Role, Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Scoring-CNN shape: three layers with the given output channels (the last
/// is 1 so the map collapses to a length-d vector), `kernel_h`-tall kernels
/// on the first two layers (same-padded along the shot axis), a K-tall
/// kernel on the third, ReLU everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub channels: [usize; 3],
    pub kernel_h: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig { channels: [32, 64, 1], kernel_h: 3 }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels[0] == 0 || self.channels[1] == 0 {
            return Err(Error::Config("scorer channel counts must be >= 1".into()));
        }
        if self.channels[2] != 1 {
            return Err(Error::Config(format!(
                "scorer final channel count must be 1, got {}",
                self.channels[2]
            )));
        }
        if self.kernel_h == 0 || self.kernel_h % 2 == 0 {
            return Err(Error::Config(format!(
                "scorer kernel height must be odd, got {}",
                self.kernel_h
            )));
        }
        Ok(())
    }
}

pub const SCORER_CONV1_W: &str = "scorer.conv1_w";
pub const SCORER_CONV1_B: &str = "scorer.conv1_b";
pub const SCORER_CONV2_W: &str = "scorer.conv2_w";
pub const SCORER_CONV2_B: &str = "scorer.conv2_b";
pub const SCORER_CONV3_W: &str = "scorer.conv3_w";
pub const SCORER_CONV3_B: &str = "scorer.conv3_b";

/// Create the scoring-CNN parameters. The third layer's kernel spans the
/// full shot axis, so its shape depends on the run's K.
pub fn init_scorer_params<F: Scalar>(
    store: &mut ParameterStore<F>,
    cfg: &ScorerConfig,
    k_shot: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    if k_shot == 0 {
        return Err(Error::Config("k_shot must be >= 1".into()));
    }
    let [c1, c2, _] = cfg.channels;
    let kh = cfg.kernel_h;
    let layers: [(&str, &str, usize, usize, usize); 3] = [
        (SCORER_CONV1_W, SCORER_CONV1_B, c1, 1, kh),
        (SCORER_CONV2_W, SCORER_CONV2_B, c2, c1, kh),
        (SCORER_CONV3_W, SCORER_CONV3_B, 1, c2, k_shot),
    ];
    for (wname, bname, c_out, c_in, k) in layers {
        let fan_in = c_in * k;
        let limit = (6.0 / (fan_in + c_out) as f64).sqrt();
        let w: Vec<F> =
            (0..c_out * c_in * k).map(|_| F::from_f64(rng.gen_range(-limit..limit))).collect();
        store.insert(wname, Role::Scorer, Tensor::new(vec![c_out, c_in, k], w)?)?;
        store.insert(bname, Role::Scorer, Tensor::zeros(vec![c_out]))?;
    }
    Ok(())
}

/// Tape handles for the scoring-CNN parameters.
#[derive(Clone, Copy, Debug)]
pub struct ScorerBinding {
    pub conv1_w: NodeId,
    pub conv1_b: NodeId,
    pub conv2_w: NodeId,
    pub conv2_b: NodeId,
    pub conv3_w: NodeId,
    pub conv3_b: NodeId,
}

impl ScorerBinding {
    pub fn params<F: Scalar>(tape: &mut Tape<F>, store: &ParameterStore<F>) -> Result<Self> {
        Ok(ScorerBinding {
            conv1_w: tape.param(store, SCORER_CONV1_W)?,
            conv1_b: tape.param(store, SCORER_CONV1_B)?,
            conv2_w: tape.param(store, SCORER_CONV2_W)?,
            conv2_b: tape.param(store, SCORER_CONV2_B)?,
            conv3_w: tape.param(store, SCORER_CONV3_W)?,
            conv3_b: tape.param(store, SCORER_CONV3_B)?,
        })
    }
}

/// Per-relation centroids: the arithmetic mean of each relation's support
/// embeddings. `groups[r]` holds the K embedding nodes of relation r.
pub fn prototypes<F: Scalar>(
    tape: &mut Tape<F>,
    groups: &[Vec<NodeId>],
) -> Result<Vec<NodeId>> {
    if groups.is_empty() {
        return Err(Error::Shape("prototypes need at least one relation".into()));
    }
    groups
        .iter()
        .map(|rows| {
            if rows.is_empty() {
                return Err(Error::Shape("empty support group".into()));
            }
            let stacked = tape.stack_rows(rows)?;
            tape.mean_rows(stacked)
        })
        .collect()
}

/// Relation score vectors g_r: each relation's K support embeddings are
/// stacked into a K x d map and pushed through the scoring CNN; the final
/// ReLU keeps every component nonnegative.
pub fn score_vectors<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &ScorerBinding,
    cfg: &ScorerConfig,
    groups: &[Vec<NodeId>],
) -> Result<Vec<NodeId>> {
    cfg.validate()?;
    let pad = cfg.kernel_h / 2;
    groups
        .iter()
        .map(|rows| {
            if rows.is_empty() {
                return Err(Error::Shape("empty support group".into()));
            }
            let k = rows.len();
            let d = tape.shape(rows[0]).first().copied().unwrap_or(0);
            let stacked = tape.stack_rows(rows)?;
            let map = tape.reshape(stacked, vec![1, k, d])?;
            let h1 = tape.conv2d_colwise(map, binding.conv1_w, binding.conv1_b, pad)?;
            let h1 = tape.relu(h1);
            let h2 = tape.conv2d_colwise(h1, binding.conv2_w, binding.conv2_b, pad)?;
            let h2 = tape.relu(h2);
            let h3 = tape.conv2d_colwise(h2, binding.conv3_w, binding.conv3_b, 0)?;
            let h3 = tape.relu(h3);
            tape.reshape(h3, vec![d])
        })
        .collect()
}

/// All-ones score vectors: the plain prototypical-network special case.
pub fn uniform_scores<F: Scalar>(tape: &mut Tape<F>, n: usize, d: usize) -> Result<Vec<NodeId>> {
    (0..n).map(|_| tape.constant(vec![d], vec![F::one(); d])).collect()
}

/// Score-weighted squared Euclidean distance, recorded on the tape:
/// `sum_i g_i * (x_i - c_i)^2`. With g = 1 this is the plain squared
/// Euclidean distance.
pub fn scored_distance<F: Scalar>(
    tape: &mut Tape<F>,
    embedding: NodeId,
    centroid: NodeId,
    score: NodeId,
) -> Result<NodeId> {
    let diff = tape.sub(embedding, centroid)?;
    let sq = tape.square(diff);
    tape.dot(score, sq)
}

/// Straight-line evaluation of the scored distance on plain slices.
pub fn scored_distance_values<F: Scalar>(x: &[F], c: &[F], g: &[F]) -> Result<F> {
    if x.len() != c.len() || x.len() != g.len() {
        return Err(Error::Shape(format!(
            "scored distance width mismatch: x {}, c {}, g {}",
            x.len(),
            c.len(),
            g.len()
        )));
    }
    let mut acc = F::zero();
    for i in 0..x.len() {
        let d = x[i] - c[i];
        acc += g[i] * d * d;
    }
    Ok(acc)
}

/// `[B, N]` matrix of scored distances from each query row to each
/// relation's centroid.
pub fn distance_matrix<F: Scalar>(
    tape: &mut Tape<F>,
    queries: NodeId,
    centroids: &[NodeId],
    scores: &[NodeId],
) -> Result<NodeId> {
    if centroids.is_empty() {
        return Err(Error::Shape("distance matrix needs at least one relation".into()));
    }
    if centroids.len() != scores.len() {
        return Err(Error::Shape(format!(
            "centroid count {} != score count {}",
            centroids.len(),
            scores.len()
        )));
    }
    let mut cols = Vec::with_capacity(centroids.len());
    for (&c, &g) in centroids.iter().zip(scores.iter()) {
        let diff = tape.sub_row_broadcast(queries, c)?;
        let sq = tape.square(diff);
        cols.push(tape.matvec(sq, g)?);
    }
    tape.stack_cols(&cols)
}

/// Row-stochastic probabilities `softmax(-distances)` per query, evaluated
/// in the log domain. Returns the distance node (the differentiable carrier
/// for the loss path) and the probability rows.
pub fn classify<F: Scalar>(
    tape: &mut Tape<F>,
    queries: NodeId,
    centroids: &[NodeId],
    scores: &[NodeId],
) -> Result<(NodeId, Vec<Vec<F>>)> {
    let dist = distance_matrix(tape, queries, centroids, scores)?;
    let shape = tape.shape(dist).to_vec();
    let (b, n) = (shape[0], shape[1]);
    let values = tape.value(dist);
    let mut probs = Vec::with_capacity(b);
    for i in 0..b {
        probs.push(softmax_neg_distances(&values[i * n..(i + 1) * n]));
    }
    Ok((dist, probs))
}

/// Stable softmax of the negated distances of one query row.
pub fn softmax_neg_distances<F: Scalar>(distances: &[F]) -> Vec<F> {
    let min_d = distances.iter().cloned().fold(F::infinity(), F::min);
    let mut exps: Vec<F> = distances.iter().map(|&d| (min_d - d).exp()).collect();
    let total: F = exps.iter().cloned().sum();
    for e in exps.iter_mut() {
        *e = *e / total;
    }
    exps
}

/// Mean cross-entropy of the distance-softmax against the true labels:
/// the episode-level classification objective.
pub fn query_loss<F: Scalar>(
    tape: &mut Tape<F>,
    distances: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let logits = tape.scale(distances, -F::one());
    tape.softmax_cross_entropy(logits, labels)
}
