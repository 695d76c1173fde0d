//! Desk-scale trainer.
//!
//! [`ToyEmbedder`] maps every cell descriptor `x` of an observation to
//! `W2 tanh(W1 x + b1) + b2`, giving an H x W x C feature map that is pooled
//! into global and view-aligned local features. A linear classifier on the
//! batch-standardized global feature produces ID logits. Training minimizes
//! the total loss with plain gradient descent under a warm-up / step-decay
//! schedule; gradients are chained analytically through the pooling and
//! the per-cell network.
//!
//! Batch standardization (zero mean, unit variance per channel over the
//! batch, no affine parameters) stands in for a batch-norm layer in front of
//! the classifier.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::distance::{distance_matrix, AttentionMode, DistanceOptions, FusionWeights};
use crate::error::{Error, Result};
use crate::eval::{evaluate_rows, EvalProtocol, EvalReport, ItemMeta};
use crate::io::{self, Tensor};
use crate::losses::{total_loss, Batch, LossBreakdown, LossConfig, LossEmbedding};
use crate::pooling::downsample_masks;
use crate::synth::SyntheticDataset;
use crate::types::{DatasetManifest, FeatureMap, Split, ViewEmbedding, ViewMaskSet, NUM_VIEWS};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const BN_EPS: f64 = 1e-5;

/// Layer sizes of the toy embedder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl EmbedderShape {
    fn sizes(&self) -> [(&'static str, Vec<usize>); 6] {
        let EmbedderShape {
            input_dim: d,
            hidden_dim: h,
            embed_dim: c,
            num_classes: k,
        } = *self;
        [
            ("w1", vec![h, d]),
            ("b1", vec![h]),
            ("w2", vec![c, h]),
            ("b2", vec![c]),
            ("wc", vec![k, c]),
            ("bc", vec![k]),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.sizes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Offsets of each parameter array inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wc: usize,
    bc: usize,
    end: usize,
}

impl Layout {
    fn new(s: &EmbedderShape) -> Self {
        let (d, h, c, k) = (s.input_dim, s.hidden_dim, s.embed_dim, s.num_classes);
        let w1 = 0;
        let b1 = w1 + h * d;
        let w2 = b1 + h;
        let b2 = w2 + c * h;
        let wc = b2 + c;
        let bc = wc + k * c;
        Self {
            w1,
            b1,
            w2,
            b2,
            wc,
            bc,
            end: bc + k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEmbedder {
    shape: EmbedderShape,
    params: Vec<f64>,
}

/// Per-image intermediates kept for the backward pass.
struct ForwardCache {
    hidden: Vec<f64>,
    pooled_global: Vec<f64>,
    pooled_locals: [Option<Vec<f64>>; NUM_VIEWS],
}

impl ToyEmbedder {
    pub fn new(shape: EmbedderShape, seed: u64) -> Result<Self> {
        if shape.input_dim == 0 || shape.hidden_dim == 0 || shape.embed_dim == 0 || shape.num_classes < 2 {
            return Err(Error::InvalidConfig(format!("bad embedder shape {shape:?}")));
        }
        let lay = Layout::new(&shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; lay.end];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, rng: &mut ChaCha8Rng| {
            let n = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
            for p in &mut params[range] {
                *p = n.sample(rng);
            }
        };
        fill(lay.w1..lay.b1, shape.input_dim, &mut rng);
        fill(lay.w2..lay.b2, shape.hidden_dim, &mut rng);
        fill(lay.wc..lay.bc, shape.embed_dim, &mut rng);
        Ok(Self { shape, params })
    }

    pub fn from_params(shape: EmbedderShape, params: Vec<f64>) -> Result<Self> {
        if params.len() != shape.num_params() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters for shape {shape:?}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteValue {
                what: "embedder parameters",
                index: params.iter().position(|p| !p.is_finite()).unwrap(),
            });
        }
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> &EmbedderShape {
        &self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.shape)
    }

    fn check_input(&self, obs: &FeatureMap) -> Result<()> {
        if obs.channels() != self.shape.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "observation has {} channels, embedder expects {}",
                obs.channels(),
                self.shape.input_dim
            )));
        }
        Ok(())
    }

    fn hidden_layer(&self, obs: &FeatureMap) -> Vec<f64> {
        let lay = self.layout();
        let (d, h) = (self.shape.input_dim, self.shape.hidden_dim);
        let w1 = &self.params[lay.w1..lay.b1];
        let b1 = &self.params[lay.b1..lay.w2];
        let mut hidden = Vec::with_capacity(obs.cells() * h);
        for x in obs.data().chunks_exact(d) {
            for j in 0..h {
                let row = &w1[j * d..(j + 1) * d];
                let mut pre = b1[j];
                for (w, &xi) in row.iter().zip(x) {
                    pre += w * xi as f64;
                }
                hidden.push(pre.tanh());
            }
        }
        hidden
    }

    fn project(&self, pooled: &[f64]) -> Vec<f64> {
        let lay = self.layout();
        let (h, c) = (self.shape.hidden_dim, self.shape.embed_dim);
        let w2 = &self.params[lay.w2..lay.b2];
        let b2 = &self.params[lay.b2..lay.wc];
        (0..c)
            .map(|o| b2[o] + w2[o * h..(o + 1) * h].iter().zip(pooled).map(|(w, a)| w * a).sum::<f64>())
            .collect()
    }

    /// Full H x W x C output map.
    pub fn forward_map(&self, obs: &FeatureMap) -> Result<FeatureMap> {
        self.check_input(obs)?;
        let h = self.shape.hidden_dim;
        let hidden = self.hidden_layer(obs);
        let data = hidden
            .chunks_exact(h)
            .flat_map(|a| self.project(a))
            .map(|v| v as f32)
            .collect();
        FeatureMap::new(obs.height(), obs.width(), self.shape.embed_dim, data)
    }

    fn forward(&self, obs: &FeatureMap, masks: &ViewMaskSet) -> Result<(LossEmbedding, ForwardCache)> {
        self.check_input(obs)?;
        crate::types::validate_pair(obs, masks)?;
        let h = self.shape.hidden_dim;
        let hidden = self.hidden_layer(obs);
        let cells = obs.cells();

        let mut pooled_global = vec![0.0; h];
        for a in hidden.chunks_exact(h) {
            for (p, &v) in pooled_global.iter_mut().zip(a) {
                *p += v;
            }
        }
        pooled_global.iter_mut().for_each(|p| *p /= cells as f64);

        let mut visibilities = [0.0; NUM_VIEWS];
        let pooled_locals: [Option<Vec<f64>>; NUM_VIEWS] = std::array::from_fn(|v| {
            let mask = masks.mask(v);
            let mass: f64 = mask.iter().map(|&m| m as f64).sum();
            visibilities[v] = mass;
            if mass == 0.0 {
                return None;
            }
            let mut acc = vec![0.0; h];
            for (a, &m) in hidden.chunks_exact(h).zip(mask) {
                if m != 0.0 {
                    for (p, &val) in acc.iter_mut().zip(a) {
                        *p += m as f64 * val;
                    }
                }
            }
            acc.iter_mut().for_each(|p| *p /= mass);
            Some(acc)
        });
        let c = self.shape.embed_dim;
        let emb = LossEmbedding {
            global: self.project(&pooled_global),
            locals: std::array::from_fn(|v| match &pooled_locals[v] {
                Some(p) => self.project(p),
                None => vec![0.0; c],
            }),
            visibilities,
        };
        Ok((
            emb,
            ForwardCache {
                hidden,
                pooled_global,
                pooled_locals,
            },
        ))
    }

    /// Inference embedding (pre-standardization global feature).
    pub fn embed(&self, obs: &FeatureMap, masks: &ViewMaskSet) -> Result<ViewEmbedding> {
        let (e, _) = self.forward(obs, masks)?;
        let narrow = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        ViewEmbedding::new(
            narrow(&e.global),
            std::array::from_fn(|i| narrow(&e.locals[i])),
            e.visibilities.map(|v| v as f32),
        )
    }

    /// Standardizes globals over the batch and applies the classifier.
    fn classify(&self, globals: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
        let lay = self.layout();
        let (c, k) = (self.shape.embed_dim, self.shape.num_classes);
        let b = globals.len() as f64;
        let mut mean = vec![0.0; c];
        for g in globals {
            for (m, &x) in mean.iter_mut().zip(g) {
                *m += x / b;
            }
        }
        let mut var = vec![0.0; c];
        for g in globals {
            for ((v, &x), &m) in var.iter_mut().zip(g).zip(&mean) {
                *v += (x - m) * (x - m) / b;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let normed: Vec<Vec<f64>> = globals
            .iter()
            .map(|g| (0..c).map(|j| (g[j] - mean[j]) * inv_std[j]).collect())
            .collect();
        let wc = &self.params[lay.wc..lay.bc];
        let bc = &self.params[lay.bc..lay.end];
        let logits = normed
            .iter()
            .map(|z| {
                (0..k)
                    .map(|o| bc[o] + wc[o * c..(o + 1) * c].iter().zip(z).map(|(w, x)| w * x).sum::<f64>())
                    .collect()
            })
            .collect();
        (logits, normed, inv_std)
    }

    /// Total loss of one batch and its gradient with respect to every
    /// parameter.
    pub fn loss_and_grad(
        &self,
        items: &[&TrainItem],
        labels: &[usize],
        loss: &LossConfig,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        let mut embs = Vec::with_capacity(items.len());
        let mut caches = Vec::with_capacity(items.len());
        for it in items {
            let (e, cache) = self.forward(&it.features, &it.masks)?;
            embs.push(e);
            caches.push(cache);
        }
        let globals: Vec<Vec<f64>> = embs.iter().map(|e| e.global.clone()).collect();
        let (logits, normed, inv_std) = self.classify(&globals);
        let batch = Batch::new(embs, labels.to_vec(), logits)?;
        let out = total_loss(&batch, loss)?;

        let lay = self.layout();
        let (d, h, c, k) = (
            self.shape.input_dim,
            self.shape.hidden_dim,
            self.shape.embed_dim,
            self.shape.num_classes,
        );
        let bsz = items.len() as f64;
        let mut grad = vec![0.0; lay.end];

        // classifier
        let wc = &self.params[lay.wc..lay.bc];
        let mut d_normed = vec![vec![0.0; c]; items.len()];
        for (bi, dz) in out.grad.logits.iter().enumerate() {
            for o in 0..k {
                grad[lay.bc + o] += dz[o];
                for j in 0..c {
                    grad[lay.wc + o * c + j] += dz[o] * normed[bi][j];
                    d_normed[bi][j] += dz[o] * wc[o * c + j];
                }
            }
        }
        // batch standardization backward, then add the triplet gradient
        let mut d_global = out.grad.globals.clone();
        for j in 0..c {
            let mean_d: f64 = d_normed.iter().map(|r| r[j]).sum::<f64>() / bsz;
            let mean_dx: f64 = d_normed.iter().zip(&normed).map(|(r, z)| r[j] * z[j]).sum::<f64>() / bsz;
            for bi in 0..items.len() {
                d_global[bi][j] += inv_std[j] * (d_normed[bi][j] - mean_d - normed[bi][j] * mean_dx);
            }
        }

        let w2 = &self.params[lay.w2..lay.b2];
        let back_project = |dout: &[f64], pooled: &[f64], grad: &mut [f64]| -> Vec<f64> {
            let mut dpooled = vec![0.0; h];
            for o in 0..c {
                if dout[o] == 0.0 {
                    continue;
                }
                grad[lay.b2 + o] += dout[o];
                for j in 0..h {
                    grad[lay.w2 + o * h + j] += dout[o] * pooled[j];
                    dpooled[j] += dout[o] * w2[o * h + j];
                }
            }
            dpooled
        };

        for (bi, (it, cache)) in items.iter().zip(&caches).enumerate() {
            let cells = it.features.cells();
            let d_pg = back_project(&d_global[bi], &cache.pooled_global, &mut grad);
            let mut d_hidden: Vec<f64> = (0..cells).flat_map(|_| d_pg.iter().map(|g| g / cells as f64)).collect();
            for v in 0..NUM_VIEWS {
                let Some(pooled) = &cache.pooled_locals[v] else {
                    continue;
                };
                let d_pl = back_project(&out.grad.locals[bi][v], pooled, &mut grad);
                let mask = it.masks.mask(v);
                let mass: f64 = mask.iter().map(|&m| m as f64).sum();
                for (cell, &m) in mask.iter().enumerate() {
                    if m != 0.0 {
                        let w = m as f64 / mass;
                        for j in 0..h {
                            d_hidden[cell * h + j] += w * d_pl[j];
                        }
                    }
                }
            }
            for (cell, x) in it.features.data().chunks_exact(d).enumerate() {
                for j in 0..h {
                    let a = cache.hidden[cell * h + j];
                    let dpre = d_hidden[cell * h + j] * (1.0 - a * a);
                    if dpre == 0.0 {
                        continue;
                    }
                    grad[lay.b1 + j] += dpre;
                    let row = &mut grad[lay.w1 + j * d..lay.w1 + (j + 1) * d];
                    for (g, &xi) in row.iter_mut().zip(x) {
                        *g += dpre * xi as f64;
                    }
                }
            }
        }
        Ok((out.parts, grad))
    }

    /// Loss value only (used by finite-difference checks).
    pub fn loss(&self, items: &[&TrainItem], labels: &[usize], loss: &LossConfig) -> Result<LossBreakdown> {
        let mut embs = Vec::with_capacity(items.len());
        for it in items {
            embs.push(self.forward(&it.features, &it.masks)?.0);
        }
        let globals: Vec<Vec<f64>> = embs.iter().map(|e| e.global.clone()).collect();
        let (logits, _, _) = self.classify(&globals);
        Ok(total_loss(&Batch::new(embs, labels.to_vec(), logits)?, loss)?.parts)
    }

    /// Writes one container per parameter array plus `metadata.json`.
    pub fn save(&self, dir: impl AsRef<Path>, config: &TrainConfig) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut offset = 0;
        for (name, dims) in self.shape.sizes() {
            let n: usize = dims.iter().product();
            let data = self.params[offset..offset + n].iter().map(|&p| p as f32).collect();
            io::write_tensor(dir.join(format!("{name}.bin")), &Tensor::new(dims, data)?)?;
            offset += n;
        }
        let meta = CheckpointMeta {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            shape: self.shape,
            config: config.clone(),
        };
        let path = dir.join("metadata.json");
        let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Loads a checkpoint written by [`ToyEmbedder::save`]. Parameters are
    /// stored as `f32`, so a reload is exact only up to that rounding.
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, TrainConfig)> {
        let dir = dir.as_ref();
        let path = dir.join("metadata.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::ParseError {
            line: e.line(),
            message: e.to_string(),
        })?;
        if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion(meta.schema_version as u8));
        }
        let mut params = Vec::with_capacity(meta.shape.num_params());
        for (name, dims) in meta.shape.sizes() {
            let t = io::read_tensor(dir.join(format!("{name}.bin")))?;
            if t.dims() != dims.as_slice() {
                return Err(Error::DimensionMismatch(format!(
                    "{name}: expected {dims:?}, found {:?}",
                    t.dims()
                )));
            }
            params.extend(t.data().iter().map(|&x| x as f64));
        }
        Ok((Self::from_params(meta.shape, params)?, meta.config))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    schema_version: u32,
    shape: EmbedderShape,
    config: TrainConfig,
}

/// Warm-up then step-decay learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub base_rate: f64,
    pub warmup_steps: usize,
    /// Rate at step 0 as a fraction of `base_rate`.
    pub warmup_start_factor: f64,
    /// Steps at which the rate is multiplied by `decay_factor`.
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_rate: 0.05,
            warmup_steps: 100,
            warmup_start_factor: 0.1,
            milestones: vec![800, 1400],
            decay_factor: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn rate(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let f = self.warmup_start_factor;
            return self.base_rate * (f + (1.0 - f) * step as f64 / self.warmup_steps as f64);
        }
        let passed = self.milestones.iter().filter(|&&m| step >= m).count();
        self.base_rate * self.decay_factor.powi(passed as i32)
    }

    fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.base_rate) || !positive(self.warmup_start_factor) || !positive(self.decay_factor) {
            return Err(Error::InvalidConfig("learning rates and factors must be positive".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("milestones must be strictly increasing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Identities per batch.
    pub p: usize,
    /// Images per identity per batch.
    pub k: usize,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    pub margin: f64,
    pub attention: AttentionMode,
    /// Include the local triplet term.
    pub local_term: bool,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Evaluate on query/gallery after every n-th epoch (0 disables).
    pub eval_every: usize,
    pub fusion: FusionWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p: 8,
            k: 4,
            epochs: 30,
            seed: 0,
            schedule: LrSchedule::default(),
            margin: crate::losses::DEFAULT_MARGIN,
            attention: AttentionMode::CommonVisible,
            local_term: true,
            hidden_dim: 32,
            embed_dim: 32,
            eval_every: 0,
            fusion: FusionWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::InvalidConfig(format!(
                "P and K must be at least 2, got P={} K={}",
                self.p, self.k
            )));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidConfig(format!("margin {}", self.margin)));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig("layer sizes must be positive".into()));
        }
        self.schedule.validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            margin: self.margin,
            attention: self.attention,
            local_term: self.local_term,
        }
    }
}

/// One observation ready for the embedder: masks already on the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub image_id: String,
    pub vehicle_id: String,
    pub camera_id: String,
    pub split: Split,
    pub features: FeatureMap,
    pub masks: ViewMaskSet,
}

/// Observations grouped by split, plus the train class index of each
/// training identity.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub train: Vec<TrainItem>,
    pub query: Vec<TrainItem>,
    pub gallery: Vec<TrainItem>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl TrainingSet {
    pub fn new(items: Vec<TrainItem>) -> Result<Self> {
        let mut train = Vec::new();
        let mut query = Vec::new();
        let mut gallery = Vec::new();
        for it in items {
            match it.split {
                Split::Train => train.push(it),
                Split::Query => query.push(it),
                Split::Gallery => gallery.push(it),
            }
        }
        let classes: BTreeMap<&str, usize> = {
            let mut ids: Vec<&str> = train.iter().map(|t| t.vehicle_id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            ids.into_iter().enumerate().map(|(i, v)| (v, i)).collect()
        };
        let labels = train.iter().map(|t| classes[t.vehicle_id.as_str()]).collect();
        let num_classes = classes.len();
        Ok(Self {
            train,
            query,
            gallery,
            labels,
            num_classes,
        })
    }

    pub fn from_synthetic(data: &SyntheticDataset) -> Result<Self> {
        let grid = data.config.grid;
        let items = data
            .images
            .iter()
            .map(|img| {
                Ok(TrainItem {
                    image_id: img.record.image_id.clone(),
                    vehicle_id: img.record.vehicle_id.clone(),
                    camera_id: img.record.camera_id.clone(),
                    split: img.record.split,
                    features: img.observation.features.clone(),
                    masks: downsample_masks(&img.observation.masks, grid.height, grid.width)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(items)
    }

    /// Reads every feature and mask container a manifest points to.
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let items = manifest
            .records()
            .iter()
            .map(|r| {
                let features = io::read_feature_map(manifest.resolve(&r.feature_path))?;
                let full = io::read_masks(manifest.resolve(&r.mask_path))?;
                let masks = downsample_masks(&full, features.height(), features.width())?;
                Ok(TrainItem {
                    image_id: r.image_id.clone(),
                    vehicle_id: r.vehicle_id.clone(),
                    camera_id: r.camera_id.clone(),
                    split: r.split,
                    features,
                    masks,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(items)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn train_labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.train.first().map(|t| t.features.channels())
    }
}

/// Draws P identities and K distinct images of each; returns positions into
/// `labels`. Identities are taken in ascending label order before sampling,
/// so the draw depends only on `labels` and the RNG state.
pub fn sample_pk_indices(labels: &[usize], p: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let eligible: Vec<&Vec<usize>> = by_label.values().filter(|v| v.len() >= k).collect();
    if eligible.len() < p {
        return Err(Error::InsufficientIdentities {
            needed: p,
            per_id: k,
            found: eligible.len(),
        });
    }
    let mut out = Vec::with_capacity(p * k);
    for id in sample(rng, eligible.len(), p) {
        let members = eligible[id];
        out.extend(sample(rng, members.len(), k).into_iter().map(|j| members[j]));
    }
    Ok(out)
}

/// PK batch over the train split of a manifest: manifest record indices.
pub fn sample_pk_batch(
    manifest: &DatasetManifest,
    p: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let train: Vec<(usize, &str)> = manifest
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Train)
        .map(|(i, r)| (i, r.vehicle_id.as_str()))
        .collect();
    let mut names: Vec<&str> = train.iter().map(|(_, v)| *v).collect();
    names.sort_unstable();
    names.dedup();
    let labels: Vec<usize> = train
        .iter()
        .map(|(_, v)| names.binary_search(v).expect("present"))
        .collect();
    let picked = sample_pk_indices(&labels, p, k, rng)?;
    Ok(picked.into_iter().map(|i| train[i].0).collect())
}

/// One gradient-descent step. Returns the loss before the update.
pub fn train_step(
    model: &mut ToyEmbedder,
    set: &TrainingSet,
    batch: &[usize],
    config: &TrainConfig,
    rate: f64,
    step: usize,
) -> Result<LossBreakdown> {
    let items: Vec<&TrainItem> = batch.iter().map(|&i| &set.train[i]).collect();
    let labels: Vec<usize> = batch.iter().map(|&i| set.labels[i]).collect();
    let (parts, grad) = model.loss_and_grad(&items, &labels, &config.loss_config())?;
    let total = parts.total();
    if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!(
                "id={} global={} local={} rate={rate}",
                parts.id, parts.global_triplet, parts.local_triplet
            ),
        });
    }
    if rate != 0.0 {
        for (p, g) in model.params.iter_mut().zip(&grad) {
            *p -= rate * g;
        }
    }
    Ok(parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: LossBreakdown,
    pub total: f64,
    pub map: Option<f64>,
    pub cmc1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyEmbedder,
    pub log: Vec<EpochLog>,
}

const MONITOR_STREAM: u64 = 1;
const SAMPLER_STREAM: u64 = 2;

fn mean_parts(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    LossBreakdown {
        id: parts.iter().map(|p| p.id).sum::<f64>() / n,
        global_triplet: parts.iter().map(|p| p.global_triplet).sum::<f64>() / n,
        local_triplet: parts.iter().map(|p| p.local_triplet).sum::<f64>() / n,
    }
}

pub fn steps_per_epoch(set: &TrainingSet, config: &TrainConfig) -> usize {
    (set.train.len() / (config.p * config.k)).max(1)
}

/// Trains a fresh embedder on `set`.
///
/// The log starts with an epoch-0 row holding the untrained model's mean
/// loss over one epoch of batches drawn from a separate RNG stream.
pub fn train_on(set: &TrainingSet, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let input_dim = set
        .input_dim()
        .ok_or(Error::EmptyInput("train split"))?;
    let shape = EmbedderShape {
        input_dim,
        hidden_dim: config.hidden_dim,
        embed_dim: config.embed_dim,
        num_classes: set.num_classes().max(2),
    };
    let mut model = ToyEmbedder::new(shape, config.seed)?;
    let steps = steps_per_epoch(set, config);
    let loss_cfg = config.loss_config();

    let mut monitor_rng = ChaCha8Rng::seed_from_u64(config.seed);
    monitor_rng.set_stream(MONITOR_STREAM);
    let mut initial = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch = sample_pk_indices(set.train_labels(), config.p, config.k, &mut monitor_rng)?;
        let items: Vec<&TrainItem> = batch.iter().map(|&i| &set.train[i]).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| set.labels[i]).collect();
        initial.push(model.loss(&items, &labels, &loss_cfg)?);
    }
    let parts = mean_parts(&initial);
    let mut log = vec![EpochLog {
        epoch: 0,
        learning_rate: 0.0,
        loss: parts,
        total: parts.total(),
        map: None,
        cmc1: None,
    }];
    if config.eval_every > 0 && !set.query.is_empty() {
        let r = evaluate_model(&model, set, &eval_options(config), &EvalProtocol::cross_camera())?;
        log[0].map = Some(r.map);
        log[0].cmc1 = r.cmc_at(1);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SAMPLER_STREAM);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let mut parts = Vec::with_capacity(steps);
        let mut rate = 0.0;
        for _ in 0..steps {
            let batch = sample_pk_indices(set.train_labels(), config.p, config.k, &mut rng)?;
            rate = config.schedule.rate(step);
            parts.push(train_step(&mut model, set, &batch, config, rate, step)?);
            step += 1;
        }
        let loss = mean_parts(&parts);
        let mut entry = EpochLog {
            epoch,
            learning_rate: rate,
            loss,
            total: loss.total(),
            map: None,
            cmc1: None,
        };
        if config.eval_every > 0 && epoch % config.eval_every == 0 && !set.query.is_empty() {
            let r = evaluate_model(&model, set, &eval_options(config), &EvalProtocol::cross_camera())?;
            entry.map = Some(r.map);
            entry.cmc1 = r.cmc_at(1);
        }
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}

/// Reads the manifest's tensors and trains on them.
pub fn train(manifest: &DatasetManifest, config: &TrainConfig) -> Result<TrainOutcome> {
    let set = TrainingSet::from_manifest(manifest)?;
    for split in [Split::Train, Split::Query, Split::Gallery] {
        if manifest.split(split).next().is_none() {
            return Err(Error::EmptyInput(match split {
                Split::Train => "train split",
                Split::Query => "query split",
                Split::Gallery => "gallery split",
            }));
        }
    }
    train_on(&set, config)
}

fn eval_options(config: &TrainConfig) -> DistanceOptions {
    DistanceOptions {
        weights: config.fusion,
        attention: config.attention,
        normalize: false,
    }
}

pub fn embed_items(model: &ToyEmbedder, items: &[TrainItem]) -> Result<Vec<ViewEmbedding>> {
    items.iter().map(|it| model.embed(&it.features, &it.masks)).collect()
}

/// Embeds query and gallery with `model` and evaluates retrieval.
pub fn evaluate_model(
    model: &ToyEmbedder,
    set: &TrainingSet,
    options: &DistanceOptions,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    let q = embed_items(model, &set.query)?;
    let g = embed_items(model, &set.gallery)?;
    evaluate_embeddings(&q, &g, set, options, protocol)
}

/// Evaluates precomputed query/gallery embeddings of `set`.
pub fn evaluate_embeddings(
    queries: &[ViewEmbedding],
    gallery: &[ViewEmbedding],
    set: &TrainingSet,
    options: &DistanceOptions,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    let dm = distance_matrix(queries, gallery, options)?;
    fn meta(items: &[TrainItem]) -> Vec<ItemMeta<'_>> {
        items
            .iter()
            .map(|i| ItemMeta {
                vehicle_id: &i.vehicle_id,
                camera_id: &i.camera_id,
            })
            .collect()
    }
    let mut report = evaluate_rows(&dm.values, &meta(&set.query), &meta(&set.gallery), protocol)?;
    report.degenerate_pair_count = dm.degenerate_pairs;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pooling::{global_average_pool, mask_average_pool};
    use crate::synth::{generate, SynthConfig};

    fn small_set(seed: u64) -> TrainingSet {
        let cfg = SynthConfig {
            num_ids: 12,
            images_per_id: 6,
            dim: 6,
            seed,
            ..Default::default()
        };
        TrainingSet::from_synthetic(&generate(&cfg).unwrap()).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            p: 3,
            k: 2,
            epochs: 2,
            hidden_dim: 5,
            embed_dim: 4,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_pointwise() {
        let s = LrSchedule {
            base_rate: 1.0,
            warmup_steps: 10,
            warmup_start_factor: 0.1,
            milestones: vec![20, 30],
            decay_factor: 0.1,
        };
        assert!((s.rate(0) - 0.1).abs() < 1e-15);
        assert!((s.rate(5) - 0.55).abs() < 1e-15);
        assert_eq!(s.rate(10), 1.0);
        assert_eq!(s.rate(19), 1.0);
        assert!((s.rate(20) - 0.1).abs() < 1e-15);
        assert!((s.rate(30) - 0.01).abs() < 1e-15);
        assert!((s.rate(10_000) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn pk_sampling_contract() {
        let labels = vec![0, 0, 1, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = sample_pk_indices(&labels, 2, 2, &mut rng).unwrap();
        b.sort_unstable();
        assert_eq!(b, vec![0, 1, 2, 3]);

        let labels: Vec<usize> = (0..10).flat_map(|i| [i; 5]).collect();
        let draw = |seed| sample_pk_indices(&labels, 3, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(draw(7), draw(7));
        let b = draw(7);
        assert_eq!(b.len(), 12);
        for chunk in b.chunks(4) {
            assert!(chunk.iter().all(|&i| labels[i] == labels[chunk[0]]));
            let mut c = chunk.to_vec();
            c.dedup();
            assert_eq!(c.len(), 4);
        }

        assert!(matches!(
            sample_pk_indices(&labels, 11, 2, &mut rng),
            Err(Error::InsufficientIdentities { found: 10, .. })
        ));
    }

    #[test]
    fn pk_sampling_covers_every_identity() {
        let labels: Vec<usize> = (0..10).flat_map(|i| [i; 4]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = [false; 10];
        for _ in 0..1000 {
            for i in sample_pk_indices(&labels, 2, 2, &mut rng).unwrap() {
                seen[labels[i]] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn fast_pooling_path_matches_full_map() {
        let set = small_set(1);
        let model = ToyEmbedder::new(
            EmbedderShape { input_dim: 6, hidden_dim: 5, embed_dim: 4, num_classes: 3 },
            9,
        )
        .unwrap();
        for it in set.train.iter().take(10) {
            let e = model.embed(&it.features, &it.masks).unwrap();
            let map = model.forward_map(&it.features).unwrap();
            let g = global_average_pool(&map);
            let l = mask_average_pool(&map, &it.masks).unwrap();
            for (a, b) in e.global().iter().zip(&g) {
                assert!((a - b).abs() < 1e-5);
            }
            for v in 0..NUM_VIEWS {
                for (a, b) in e.local(v).iter().zip(&l[v]) {
                    assert!((a - b).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let set = small_set(2);
        let cfg = small_config();
        let mut model = ToyEmbedder::new(
            EmbedderShape { input_dim: 6, hidden_dim: 5, embed_dim: 4, num_classes: set.num_classes() },
            1,
        )
        .unwrap();
        let before = model.clone();
        let batch = sample_pk_indices(set.train_labels(), 3, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let parts = train_step(&mut model, &set, &batch, &cfg, 0.0, 0).unwrap();
        assert!(parts.total() > 0.0);
        assert_eq!(model, before);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let set = small_set(3);
        let cfg = TrainConfig { epochs: 0, ..small_config() };
        let out = train_on(&set, &cfg).unwrap();
        let fresh = ToyEmbedder::new(*out.model.shape(), cfg.seed).unwrap();
        assert_eq!(out.model, fresh);
        assert_eq!(out.log.len(), 1);
    }

    #[test]
    fn training_is_reproducible() {
        let set = small_set(4);
        let cfg = small_config();
        let a = train_on(&set, &cfg).unwrap();
        let b = train_on(&set, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let set = small_set(5);
        let cfg = small_config();
        let out = train_on(&set, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.model.save(dir.path(), &cfg).unwrap();
        let (loaded, loaded_cfg) = ToyEmbedder::load(dir.path()).unwrap();
        assert_eq!(loaded_cfg, cfg);
        assert_eq!(loaded.shape(), out.model.shape());
        for (a, b) in loaded.params().iter().zip(out.model.params()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { p: 1, ..Default::default() }.validate().is_err());
        let mut c = TrainConfig::default();
        c.schedule.base_rate = 0.0;
        assert!(c.validate().is_err());
        let c: TrainConfig = toml::from_str("p = 4\nk = 3\n[schedule]\nbase_rate = 0.01\n").unwrap();
        assert_eq!((c.p, c.k, c.schedule.base_rate), (4, 3, 0.01));
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
    }

    fn fixed_batch(set: &TrainingSet, seed: u64) -> (Vec<&TrainItem>, Vec<usize>) {
        let batch = sample_pk_indices(set.train_labels(), 3, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (
            batch.iter().map(|&i| &set.train[i]).collect(),
            batch.iter().map(|&i| set.train_labels()[i]).collect(),
        )
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let set = small_set(6);
        for (seed, local_term) in [(0, true), (1, true), (2, false)] {
            let shape = EmbedderShape { input_dim: 6, hidden_dim: 5, embed_dim: 4, num_classes: set.num_classes() };
            let model = ToyEmbedder::new(shape, seed).unwrap();
            let (items, labels) = fixed_batch(&set, seed);
            let cfg = LossConfig { local_term, ..Default::default() };
            let (_, grad) = model.loss_and_grad(&items, &labels, &cfg).unwrap();
            let h = 1e-4;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..60 {
                let i = rng.random_range(0..model.params().len());
                let at = |delta: f64| {
                    let mut p = model.params().to_vec();
                    p[i] += delta;
                    ToyEmbedder::from_params(shape, p).unwrap().loss(&items, &labels, &cfg).unwrap().total()
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
                assert!(err < 1e-3, "param {i}: fd {fd} analytic {}", grad[i]);
            }
        }
    }

    #[test]
    fn small_steps_do_not_increase_loss() {
        let set = small_set(7);
        let shape = EmbedderShape { input_dim: 6, hidden_dim: 5, embed_dim: 4, num_classes: set.num_classes() };
        let mut model = ToyEmbedder::new(shape, 3).unwrap();
        let batch = sample_pk_indices(set.train_labels(), 3, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cfg = small_config();
        let mut prev = f64::INFINITY;
        for step in 0..50 {
            let total = train_step(&mut model, &set, &batch, &cfg, 1e-3, step).unwrap().total();
            assert!(total <= prev + 1e-12, "step {step}: {total} > {prev}");
            prev = total;
        }
    }

    #[test]
    fn training_without_local_term_gives_usable_model() {
        let set = small_set(8);
        let cfg = TrainConfig { local_term: false, ..small_config() };
        let out = train_on(&set, &cfg).unwrap();
        assert!(out.log.iter().all(|l| l.loss.local_triplet == 0.0 && l.total.is_finite()));
        let r = evaluate_model(&out.model, &set, &DistanceOptions::default(), &EvalProtocol::cross_camera()).unwrap();
        assert!(r.map.is_finite() && r.map > 0.0);
    }

    #[test]
    fn embedding_dimension_mismatch() {
        let model = ToyEmbedder::new(
            EmbedderShape { input_dim: 3, hidden_dim: 2, embed_dim: 2, num_classes: 2 },
            0,
        )
        .unwrap();
        let f = FeatureMap::new(2, 2, 4, vec![0.0; 16]).unwrap();
        let m = ViewMaskSet::filled(2, 2, 1.0).unwrap();
        assert!(matches!(model.embed(&f, &m), Err(Error::DimensionMismatch(_))));
    }
}
