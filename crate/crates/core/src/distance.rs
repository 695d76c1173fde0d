//! Common-visible attention, attention-weighted local distance, fused
//! inference distance and the batched query x gallery engine.
//!
//! Every distance accumulates in `f64`. The batched engine stores `f32`
//! results and evaluates each entry with exactly the same kernel and
//! summation order as the pairwise functions, so its output does not depend
//! on tiling or on the number of worker threads.

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DistanceMatrix, ViewEmbedding, NUM_VIEWS};

/// Weights of the global (`lambda1`) and local (`lambda2`) distance terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    lambda1: f64,
    lambda2: f64,
}

impl FusionWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let ok = |l: f64| l.is_finite() && l >= 0.0;
        if !ok(lambda1) || !ok(lambda2) {
            return Err(Error::InvalidConfig(format!(
                "fusion weights must be finite and non-negative, got ({lambda1}, {lambda2})"
            )));
        }
        if lambda1 == 0.0 && lambda2 == 0.0 {
            return Err(Error::InvalidConfig(
                "fusion weights cannot both be zero".into(),
            ));
        }
        Ok(Self { lambda1, lambda2 })
    }

    pub fn global_only() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.0,
        }
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
        }
    }
}

/// How per-view local distances are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Normalized product of the two images' visibility scores.
    #[default]
    CommonVisible,
    /// Every view weighted 1/N regardless of visibility (ablation).
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attention {
    pub weights: [f64; NUM_VIEWS],
    /// Set when the two images share no visible view and the weights fell
    /// back to uniform.
    pub degenerate: bool,
}

const UNIFORM: [f64; NUM_VIEWS] = [1.0 / NUM_VIEWS as f64; NUM_VIEWS];

fn check_visibility(v: &[f64; NUM_VIEWS]) -> Result<()> {
    for (view, &value) in v.iter().enumerate() {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::NegativeVisibility { view, value });
        }
    }
    Ok(())
}

/// Common-visible attention between two images' visibility scores.
///
/// Falls back to uniform weights with `degenerate` set when no view is
/// visible in both.
pub fn common_visible_scores(
    vis_p: &[f64; NUM_VIEWS],
    vis_q: &[f64; NUM_VIEWS],
) -> Result<Attention> {
    check_visibility(vis_p)?;
    check_visibility(vis_q)?;
    Ok(common_visible_unchecked(vis_p, vis_q))
}

fn common_visible_unchecked(vis_p: &[f64; NUM_VIEWS], vis_q: &[f64; NUM_VIEWS]) -> Attention {
    let products: [f64; NUM_VIEWS] = std::array::from_fn(|i| vis_p[i] * vis_q[i]);
    let total: f64 = products.iter().sum();
    if total > 0.0 {
        Attention {
            weights: products.map(|p| p / total),
            degenerate: false,
        }
    } else {
        Attention {
            weights: UNIFORM,
            degenerate: true,
        }
    }
}

/// Attention weights under the given mode.
pub fn attention(
    mode: AttentionMode,
    vis_p: &[f64; NUM_VIEWS],
    vis_q: &[f64; NUM_VIEWS],
) -> Result<Attention> {
    let cv = common_visible_scores(vis_p, vis_q)?;
    Ok(match mode {
        AttentionMode::CommonVisible => cv,
        AttentionMode::Uniform => Attention {
            weights: UNIFORM,
            degenerate: cv.degenerate,
        },
    })
}

fn widen(v: &[f32; NUM_VIEWS]) -> [f64; NUM_VIEWS] {
    v.map(|x| x as f64)
}

/// Plain (not squared) Euclidean distance.
pub fn euclidean(x: &[f32], y: &[f32]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(sq_dist(x, y).sqrt())
}

fn check_dims(p: &ViewEmbedding, q: &ViewEmbedding) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch(format!(
            "embeddings of dimension {} and {}",
            p.dim(),
            q.dim()
        )));
    }
    Ok(())
}

/// Attention-weighted sum of per-view Euclidean distances, with
/// common-visible attention.
pub fn local_distance(p: &ViewEmbedding, q: &ViewEmbedding) -> Result<f64> {
    local_distance_with(p, q, AttentionMode::CommonVisible).map(|(d, _)| d)
}

/// Local distance under `mode`; also reports whether the attention was
/// degenerate.
pub fn local_distance_with(
    p: &ViewEmbedding,
    q: &ViewEmbedding,
    mode: AttentionMode,
) -> Result<(f64, bool)> {
    check_dims(p, q)?;
    let att = attention(mode, &widen(p.visibilities()), &widen(q.visibilities()))?;
    let mut total = 0.0f64;
    for (i, &a) in att.weights.iter().enumerate() {
        if a != 0.0 {
            total += a * sq_dist(p.local(i), q.local(i)).sqrt();
        }
    }
    Ok((total, att.degenerate))
}

/// `lambda1 * D(global) + lambda2 * local_distance`.
pub fn fused_distance(p: &ViewEmbedding, q: &ViewEmbedding, weights: FusionWeights) -> Result<f64> {
    check_dims(p, q)?;
    let global = sq_dist(p.global(), q.global()).sqrt();
    let local = if weights.lambda2 != 0.0 {
        local_distance(p, q)?
    } else {
        0.0
    };
    Ok(weights.lambda1 * global + weights.lambda2 * local)
}

/// Settings of the batched distance engine.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DistanceOptions {
    pub weights: FusionWeights,
    pub attention: AttentionMode,
    /// L2-normalize global and local vectors before comparing.
    pub normalize: bool,
}

/// Raw output of [`distance_matrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct FusedDistances {
    pub num_query: usize,
    pub num_gallery: usize,
    /// Row-major Q x G.
    pub values: Vec<f32>,
    /// Pairs whose attention fell back to uniform weights.
    pub degenerate_pairs: u64,
}

impl FusedDistances {
    pub fn get(&self, q: usize, g: usize) -> f32 {
        self.values[q * self.num_gallery + g]
    }

    pub fn into_matrix(
        self,
        query_ids: Vec<String>,
        gallery_ids: Vec<String>,
    ) -> Result<DistanceMatrix> {
        Ok(DistanceMatrix::new(
            self.num_query,
            self.num_gallery,
            self.values,
            query_ids,
            gallery_ids,
        )?
        .with_degenerate_pairs(self.degenerate_pairs))
    }
}

/// Embedding packed into one contiguous `[global, local_0..local_3]` buffer.
struct Packed {
    vectors: Vec<f32>,
    vis: [f64; NUM_VIEWS],
}

impl Packed {
    fn new(e: &ViewEmbedding, normalize: bool) -> Self {
        let owned;
        let e = if normalize {
            owned = e.l2_normalized();
            &owned
        } else {
            e
        };
        let mut vectors = Vec::with_capacity((NUM_VIEWS + 1) * e.dim());
        vectors.extend_from_slice(e.global());
        for l in e.locals() {
            vectors.extend_from_slice(l);
        }
        Self {
            vectors,
            vis: widen(e.visibilities()),
        }
    }

    fn part(&self, idx: usize, dim: usize) -> &[f32] {
        &self.vectors[idx * dim..(idx + 1) * dim]
    }
}

const QUERY_TILE: usize = 16;

/// Fused distances between every query and every gallery embedding.
///
/// Rows are computed in parallel on the current rayon pool. Entry `(q, g)`
/// equals `fused_distance(queries[q], gallery[g])` rounded to `f32` (for the
/// default options).
pub fn distance_matrix(
    queries: &[ViewEmbedding],
    gallery: &[ViewEmbedding],
    options: &DistanceOptions,
) -> Result<FusedDistances> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("query set"));
    }
    if gallery.is_empty() {
        return Err(Error::EmptyInput("gallery set"));
    }
    let dim = queries[0].dim();
    if let Some(bad) = queries.iter().chain(gallery).find(|e| e.dim() != dim) {
        return Err(Error::DimensionMismatch(format!(
            "embedding of dimension {} in a set of dimension {dim}",
            bad.dim()
        )));
    }

    let pack = |set: &[ViewEmbedding]| -> Vec<Packed> {
        set.par_iter().map(|e| Packed::new(e, options.normalize)).collect()
    };
    let q_packed = pack(queries);
    let g_packed = pack(gallery);
    let num_gallery = gallery.len();
    let weights = options.weights;
    let mode = options.attention;
    let kernel = sq_dist_kernel();

    let mut values = vec![0.0f32; queries.len() * num_gallery];
    let degenerate: u64 = values
        .par_chunks_mut(QUERY_TILE * num_gallery)
        .zip(q_packed.par_chunks(QUERY_TILE))
        .map(|(out, q_tile)| {
            let mut degenerate = 0u64;
            for (gi, g) in g_packed.iter().enumerate() {
                for (qi, q) in q_tile.iter().enumerate() {
                    let (d, deg) = packed_fused(q, g, dim, weights, mode, kernel);
                    degenerate += deg as u64;
                    out[qi * num_gallery + gi] = d as f32;
                }
            }
            degenerate
        })
        .sum();

    Ok(FusedDistances {
        num_query: queries.len(),
        num_gallery,
        values,
        degenerate_pairs: degenerate,
    })
}

#[inline]
fn packed_fused(
    q: &Packed,
    g: &Packed,
    dim: usize,
    weights: FusionWeights,
    mode: AttentionMode,
    kernel: SqDistFn,
) -> (f64, bool) {
    let global = kernel(q.part(0, dim), g.part(0, dim)).sqrt();
    let cv = common_visible_unchecked(&q.vis, &g.vis);
    if weights.lambda2 == 0.0 {
        return (weights.lambda1 * global, cv.degenerate);
    }
    let w = match mode {
        AttentionMode::CommonVisible => cv.weights,
        AttentionMode::Uniform => UNIFORM,
    };
    let mut local = 0.0f64;
    for (i, &a) in w.iter().enumerate() {
        if a != 0.0 {
            local += a * kernel(q.part(i + 1, dim), g.part(i + 1, dim)).sqrt();
        }
    }
    (weights.lambda1 * global + weights.lambda2 * local, cv.degenerate)
}

type SqDistFn = fn(&[f32], &[f32]) -> f64;

const LANES: usize = 8;

// Fixed lane layout and reduction tree: every instruction-set variant below
// runs the same IEEE operations in the same order, so results are identical
// whichever one is selected.
#[inline(always)]
fn sq_dist_lanes(x: &[f32], y: &[f32]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f64; LANES];
    let xs = x.chunks_exact(LANES);
    let ys = y.chunks_exact(LANES);
    let (xr, yr) = (xs.remainder(), ys.remainder());
    for (a, b) in xs.zip(ys) {
        for i in 0..LANES {
            let d = a[i] as f64 - b[i] as f64;
            acc[i] += d * d;
        }
    }
    for (i, (&a, &b)) in xr.iter().zip(yr).enumerate() {
        let d = a as f64 - b as f64;
        acc[i] += d * d;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

fn sq_dist_portable(x: &[f32], y: &[f32]) -> f64 {
    sq_dist_lanes(x, y)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn sq_dist_avx2(x: &[f32], y: &[f32]) -> f64 {
    sq_dist_lanes(x, y)
}

#[cfg(target_arch = "x86_64")]
fn sq_dist_avx2_entry(x: &[f32], y: &[f32]) -> f64 {
    // SAFETY: only selected after runtime detection of AVX2.
    unsafe { sq_dist_avx2(x, y) }
}

fn sq_dist_kernel() -> SqDistFn {
    static KERNEL: OnceLock<SqDistFn> = OnceLock::new();
    *KERNEL.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            return sq_dist_avx2_entry as SqDistFn;
        }
        sq_dist_portable as SqDistFn
    })
}

/// Squared Euclidean distance, 64-bit accumulation. Callers check lengths.
pub(crate) fn sq_dist(x: &[f32], y: &[f32]) -> f64 {
    sq_dist_kernel()(x, y)
}
