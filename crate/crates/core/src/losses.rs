//! Training objective: softmax ID loss, batch-hard triplet loss on global
//! features, batch-hard triplet loss on attention-weighted local distances,
//! and their unweighted sum. Every loss returns its value together with the
//! closed-form gradient, computed in `f64`.
//!
//! Visibility scores are constants here: attention weights are not
//! differentiated through.

use serde::{Deserialize, Serialize};

use crate::distance::{attention, AttentionMode};
use crate::error::{Error, Result};
use crate::types::{ViewEmbedding, NUM_VIEWS};

pub const DEFAULT_MARGIN: f64 = 0.3;

/// `f64` embedding used on the training path.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEmbedding {
    pub global: Vec<f64>,
    pub locals: [Vec<f64>; NUM_VIEWS],
    pub visibilities: [f64; NUM_VIEWS],
}

impl From<&ViewEmbedding> for LossEmbedding {
    fn from(e: &ViewEmbedding) -> Self {
        let wide = |v: &[f32]| v.iter().map(|&x| x as f64).collect();
        Self {
            global: wide(e.global()),
            locals: std::array::from_fn(|i| wide(e.local(i))),
            visibilities: e.visibilities().map(|v| v as f64),
        }
    }
}

/// A PK batch: embeddings, identity labels and classifier logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    embeddings: Vec<LossEmbedding>,
    labels: Vec<usize>,
    logits: Vec<Vec<f64>>,
}

impl Batch {
    pub fn new(
        embeddings: Vec<LossEmbedding>,
        labels: Vec<usize>,
        logits: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let b = embeddings.len();
        if b < 2 {
            return Err(Error::NoValidTriplet(format!("batch of size {b}")));
        }
        if labels.len() != b || logits.len() != b {
            return Err(Error::DimensionMismatch(format!(
                "{b} embeddings, {} labels, {} logit rows",
                labels.len(),
                logits.len()
            )));
        }
        let dim = embeddings[0].global.len();
        for e in &embeddings {
            if e.global.len() != dim || e.locals.iter().any(|l| l.len() != dim) {
                return Err(Error::DimensionMismatch(
                    "embeddings in a batch must share one dimension".into(),
                ));
            }
            if let Some((view, &value)) =
                e.visibilities.iter().enumerate().find(|(_, &v)| !(v >= 0.0))
            {
                return Err(Error::NegativeVisibility { view, value });
            }
        }
        let k = logits[0].len();
        if logits.iter().any(|row| row.len() != k) {
            return Err(Error::DimensionMismatch("ragged logits".into()));
        }
        check_pk(&labels)?;
        Ok(Self {
            embeddings,
            labels,
            logits,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn embeddings(&self) -> &[LossEmbedding] {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn globals(&self) -> Vec<Vec<f64>> {
        self.embeddings.iter().map(|e| e.global.clone()).collect()
    }
}

fn check_pk(labels: &[usize]) -> Result<()> {
    for &l in labels {
        if labels.iter().filter(|&&m| m == l).count() < 2 {
            return Err(Error::NoValidTriplet(format!(
                "identity {l} appears once in the batch"
            )));
        }
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::NoValidTriplet("batch holds a single identity".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<G> {
    pub value: f64,
    pub grad: G,
}

/// Mean softmax cross-entropy; gradient with respect to the logits.
pub fn id_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<LossOutput<Vec<Vec<f64>>>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("logits"));
    }
    if logits.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let b = logits.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, (z, &y)) in logits.iter().zip(labels).enumerate() {
        if y >= z.len() {
            return Err(Error::LabelOutOfRange {
                row,
                label: y,
                classes: z.len(),
            });
        }
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        value += lse - z[y];
        let mut g: Vec<f64> = z.iter().map(|&v| (v - lse).exp() / b).collect();
        g[y] -= 1.0 / b;
        grad.push(g);
    }
    Ok(LossOutput {
        value: value / b,
        grad,
    })
}

/// Hardest positive and hardest negative for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinedTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    /// `d(a, p) - d(a, n) + margin`, before the hinge.
    pub slack: f64,
}

/// Batch-hard mining over a row-major B x B distance matrix. Ties resolve to
/// the lowest index.
pub fn mine_batch_hard(dist: &[f64], labels: &[usize], margin: f64) -> Result<Vec<MinedTriplet>> {
    let b = labels.len();
    debug_assert_eq!(dist.len(), b * b);
    (0..b)
        .map(|a| {
            let row = &dist[a * b..(a + 1) * b];
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..b {
                if j == a {
                    continue;
                }
                if labels[j] == labels[a] {
                    if pos.is_none_or(|p| row[j] > row[p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|n| row[j] < row[n]) {
                    neg = Some(j);
                }
            }
            match (pos, neg) {
                (Some(p), Some(n)) => Ok(MinedTriplet {
                    anchor: a,
                    positive: p,
                    negative: n,
                    slack: row[p] - row[n] + margin,
                }),
                (None, _) => Err(Error::NoValidTriplet(format!("anchor {a} has no positive"))),
                (_, None) => Err(Error::NoValidTriplet(format!("anchor {a} has no negative"))),
            }
        })
        .collect()
}

fn euclid(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Adds `scale * d||x - y|| / dx` to `gx` and its negation to `gy`.
/// The zero-distance subgradient is taken as 0.
fn accumulate_distance_grad(x: &[f64], y: &[f64], d: f64, scale: f64, gx: &mut [f64], gy: &mut [f64]) {
    if d == 0.0 {
        return;
    }
    let s = scale / d;
    for i in 0..x.len() {
        let g = s * (x[i] - y[i]);
        gx[i] += g;
        gy[i] -= g;
    }
}

fn two_mut<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    assert_ne!(i, j);
    if i < j {
        let (lo, hi) = v.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}

fn hinge_mean(triplets: &[MinedTriplet]) -> f64 {
    triplets.iter().map(|t| t.slack.max(0.0)).sum::<f64>() / triplets.len() as f64
}

/// Batch-hard triplet loss on Euclidean distances of global features.
pub fn global_triplet(
    globals: &[Vec<f64>],
    labels: &[usize],
    margin: f64,
) -> Result<LossOutput<Vec<Vec<f64>>>> {
    if globals.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} features for {} labels",
            globals.len(),
            labels.len()
        )));
    }
    if globals.len() < 2 {
        return Err(Error::NoValidTriplet(format!("batch of size {}", globals.len())));
    }
    let b = globals.len();
    let mut dist = vec![0.0; b * b];
    for i in 0..b {
        for j in i + 1..b {
            let d = euclid(&globals[i], &globals[j]);
            dist[i * b + j] = d;
            dist[j * b + i] = d;
        }
    }
    let triplets = mine_batch_hard(&dist, labels, margin)?;
    let dim = globals[0].len();
    let mut grad = vec![vec![0.0; dim]; b];
    let scale = 1.0 / b as f64;
    for t in &triplets {
        if t.slack <= 0.0 {
            continue;
        }
        let (a, p, n) = (t.anchor, t.positive, t.negative);
        let (ga, gp) = two_mut(&mut grad, a, p);
        accumulate_distance_grad(&globals[a], &globals[p], dist[a * b + p], scale, ga, gp);
        let (ga, gn) = two_mut(&mut grad, a, n);
        accumulate_distance_grad(&globals[a], &globals[n], dist[a * b + n], -scale, ga, gn);
    }
    Ok(LossOutput {
        value: hinge_mean(&triplets),
        grad,
    })
}

/// Attention-weighted local distance between two training embeddings, plus
/// the attention weights and per-view distances it was built from.
fn local_pair(
    p: &LossEmbedding,
    q: &LossEmbedding,
    mode: AttentionMode,
) -> Result<(f64, [f64; NUM_VIEWS], [f64; NUM_VIEWS])> {
    let att = attention(mode, &p.visibilities, &q.visibilities)?;
    let mut per_view = [0.0; NUM_VIEWS];
    let mut total = 0.0;
    for i in 0..NUM_VIEWS {
        if att.weights[i] != 0.0 {
            per_view[i] = euclid(&p.locals[i], &q.locals[i]);
            total += att.weights[i] * per_view[i];
        }
    }
    Ok((total, att.weights, per_view))
}

/// Gradient buffer for the local features of every image in a batch.
pub type LocalGrad = Vec<[Vec<f64>; NUM_VIEWS]>;

/// Batch-hard triplet loss whose distance (for both mining and the hinge) is
/// the attention-weighted local distance.
pub fn local_triplet(
    batch: &Batch,
    margin: f64,
    mode: AttentionMode,
) -> Result<LossOutput<LocalGrad>> {
    let b = batch.len();
    let embs = batch.embeddings();
    let mut dist = vec![0.0; b * b];
    let mut weights = vec![[0.0; NUM_VIEWS]; b * b];
    let mut per_view = vec![[0.0; NUM_VIEWS]; b * b];
    for i in 0..b {
        for j in i + 1..b {
            let (d, w, pv) = local_pair(&embs[i], &embs[j], mode)?;
            for (a, c) in [(i, j), (j, i)] {
                dist[a * b + c] = d;
                weights[a * b + c] = w;
                per_view[a * b + c] = pv;
            }
        }
    }
    let triplets = mine_batch_hard(&dist, batch.labels(), margin)?;
    let dim = embs[0].global.len();
    let mut grad: LocalGrad = vec![std::array::from_fn(|_| vec![0.0; dim]); b];
    let scale = 1.0 / b as f64;
    for t in &triplets {
        if t.slack <= 0.0 {
            continue;
        }
        let a = t.anchor;
        for (other, sign) in [(t.positive, scale), (t.negative, -scale)] {
            let w = weights[a * b + other];
            let pv = per_view[a * b + other];
            let (ga, go) = two_mut(&mut grad, a, other);
            for i in 0..NUM_VIEWS {
                if w[i] == 0.0 {
                    continue;
                }
                accumulate_distance_grad(
                    &embs[a].locals[i],
                    &embs[other].locals[i],
                    pv[i],
                    sign * w[i],
                    &mut ga[i],
                    &mut go[i],
                );
            }
        }
    }
    Ok(LossOutput {
        value: hinge_mean(&triplets),
        grad,
    })
}

/// Which terms enter the total loss and how the local term is weighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub attention: AttentionMode,
    /// Drop the local triplet term (the "without local branch" ablation).
    pub local_term: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            attention: AttentionMode::CommonVisible,
            local_term: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub id: f64,
    pub global_triplet: f64,
    pub local_triplet: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.id + self.global_triplet + self.local_triplet
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrad {
    pub logits: Vec<Vec<f64>>,
    pub globals: Vec<Vec<f64>>,
    pub locals: LocalGrad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub parts: LossBreakdown,
    pub grad: BatchGrad,
}

/// ID loss + global triplet + local triplet, summed without weights.
pub fn total_loss(batch: &Batch, config: &LossConfig) -> Result<TotalLoss> {
    let id = id_loss(batch.logits(), batch.labels())?;
    let global = global_triplet(&batch.globals(), batch.labels(), config.margin)?;
    let (local_value, locals) = if config.local_term {
        let l = local_triplet(batch, config.margin, config.attention)?;
        (l.value, l.grad)
    } else {
        let dim = batch.embeddings()[0].global.len();
        (0.0, vec![std::array::from_fn(|_| vec![0.0; dim]); batch.len()])
    };
    let parts = LossBreakdown {
        id: id.value,
        global_triplet: global.value,
        local_triplet: local_value,
    };
    Ok(TotalLoss {
        value: parts.id + parts.global_triplet + parts.local_triplet,
        parts,
        grad: BatchGrad {
            logits: id.grad,
            globals: global.grad,
            locals,
        },
    })
}
