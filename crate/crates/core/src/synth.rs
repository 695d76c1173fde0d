//! Analytic multi-view synthetic dataset.
//!
//! Each identity owns a "type/colour" vector `t` and one signature `s_i` per
//! view. An observation at viewpoint (azimuth, elevation) splits the feature
//! grid into a horizontal top band and two vertical stripes (front-or-back,
//! side) whose areas follow [`view_visibilities`]; every cell in region `i`
//! holds `t + s_i + noise`. The masks are the exact region indicators, so
//! with zero noise mask average pooling returns `t + s_i` exactly.
//!
//! Confuser identities are generated in pairs sharing the same `t`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Tensor};
use crate::pooling::FullResMaskSet;
use crate::types::{DatasetManifest, FeatureMap, ImageRecord, Split, View, NUM_VIEWS};

pub const CAMERA_SECTOR_DEG: f64 = 30.0;
pub const MAX_ELEVATION_DEG: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    azimuth_deg: f64,
    elevation_deg: f64,
}

impl Viewpoint {
    pub fn new(azimuth_deg: f64, elevation_deg: f64) -> Result<Self> {
        if !(0.0..360.0).contains(&azimuth_deg) {
            return Err(Error::InvalidConfig(format!(
                "azimuth {azimuth_deg} outside [0, 360)"
            )));
        }
        if !(0.0..=MAX_ELEVATION_DEG).contains(&elevation_deg) {
            return Err(Error::InvalidConfig(format!(
                "elevation {elevation_deg} outside [0, {MAX_ELEVATION_DEG}]"
            )));
        }
        Ok(Self {
            azimuth_deg,
            elevation_deg,
        })
    }

    pub fn azimuth_deg(&self) -> f64 {
        self.azimuth_deg
    }

    pub fn elevation_deg(&self) -> f64 {
        self.elevation_deg
    }

    /// One of 12 synthetic cameras, by 30-degree azimuth sector.
    pub fn camera(&self) -> usize {
        (self.azimuth_deg / CAMERA_SECTOR_DEG).floor() as usize
    }

    /// Opposite azimuth, same elevation.
    pub fn flipped(&self) -> Self {
        Self {
            azimuth_deg: (self.azimuth_deg + 180.0) % 360.0,
            elevation_deg: self.elevation_deg,
        }
    }
}

/// Fraction of the visible surface belonging to each view; sums to 1.
///
/// Values below 1e-12 (cos/sin of exact right angles) are snapped to zero.
pub fn view_visibilities(vp: &Viewpoint) -> [f64; NUM_VIEWS] {
    let (theta, phi) = (vp.azimuth_deg.to_radians(), vp.elevation_deg.to_radians());
    let snap = |x: f64| if x.abs() < 1e-12 { 0.0 } else { x };
    let (c, s) = (snap(theta.cos()), snap(theta.sin()));
    let raw = [
        c.max(0.0) * phi.cos(),
        (-c).max(0.0) * phi.cos(),
        s.abs() * phi.cos(),
        snap(phi.sin()),
    ];
    let total: f64 = raw.iter().sum();
    raw.map(|r| r / total)
}

/// Latent appearance of one synthetic vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticIdentity {
    pub id: usize,
    pub type_vector: Vec<f64>,
    pub signatures: [Vec<f64>; NUM_VIEWS],
}

impl SyntheticIdentity {
    /// Noise-free appearance of view `view`: `t + s_view`.
    pub fn appearance(&self, view: usize) -> Vec<f64> {
        self.type_vector
            .iter()
            .zip(&self.signatures[view])
            .map(|(t, s)| t + s)
            .collect()
    }
}

/// Region label per cell (row-major), from quantized stripe areas.
pub fn region_layout(vis: &[f64; NUM_VIEWS], height: usize, width: usize) -> Vec<usize> {
    let quantize = |share: f64, len: usize, others: bool| -> usize {
        if share <= 0.0 {
            0
        } else if !others {
            len
        } else {
            ((share * len as f64).round() as usize).clamp(1, len - 1)
        }
    };
    let front_back = vis[View::Front.index()] + vis[View::Back.index()];
    let side = vis[View::Side.index()];
    let top = vis[View::Top.index()];
    let top_rows = quantize(top, height, front_back + side > 0.0);
    let fb_view = if vis[View::Front.index()] > 0.0 {
        View::Front
    } else {
        View::Back
    };
    let fb_cols = if front_back + side > 0.0 {
        quantize(front_back / (front_back + side), width, side > 0.0)
    } else {
        0
    };
    let mut labels = Vec::with_capacity(height * width);
    for row in 0..height {
        for col in 0..width {
            let view = if row < top_rows {
                View::Top
            } else if col < fb_cols {
                fb_view
            } else {
                View::Side
            };
            labels.push(view.index());
        }
    }
    labels
}

/// Rendered feature map, full-resolution masks and camera of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: FeatureMap,
    pub masks: FullResMaskSet,
    pub camera: usize,
}

/// Grid geometry of rendered observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderGrid {
    pub height: usize,
    pub width: usize,
    /// Full-resolution masks are `factor` times larger per side.
    pub mask_factor: usize,
}

impl Default for RenderGrid {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            mask_factor: 2,
        }
    }
}

pub fn render_observation(
    ident: &SyntheticIdentity,
    vp: &Viewpoint,
    grid: RenderGrid,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Result<Observation> {
    if grid.height == 0 || grid.width == 0 || grid.mask_factor == 0 {
        return Err(Error::InvalidConfig(format!("degenerate grid {grid:?}")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise sigma {noise_sigma}")));
    }
    let labels = region_layout(&view_visibilities(vp), grid.height, grid.width);
    let appearance: [Vec<f64>; NUM_VIEWS] = std::array::from_fn(|v| ident.appearance(v));
    let dim = ident.type_vector.len();
    let noise = Normal::new(0.0, noise_sigma).expect("sigma validated");
    let mut data = Vec::with_capacity(labels.len() * dim);
    for &view in &labels {
        for &a in &appearance[view] {
            let n = if noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push((a + n) as f32);
        }
    }
    let features = FeatureMap::new(grid.height, grid.width, dim, data)?;

    let (fh, fw) = (grid.height * grid.mask_factor, grid.width * grid.mask_factor);
    let mut masks = vec![0.0f32; NUM_VIEWS * fh * fw];
    for r in 0..fh {
        for c in 0..fw {
            let view = labels[(r / grid.mask_factor) * grid.width + c / grid.mask_factor];
            masks[view * fh * fw + r * fw + c] = 1.0;
        }
    }
    Ok(Observation {
        features,
        masks: FullResMaskSet::new(fh, fw, masks)?,
        camera: vp.camera(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_ids: usize,
    pub images_per_id: usize,
    /// Fraction of identities generated in pairs sharing one type vector.
    pub confuser_fraction: f64,
    pub seed: u64,
    pub dim: usize,
    pub grid: RenderGrid,
    pub noise_sigma: f64,
    pub type_scale: f64,
    pub signature_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_ids: 200,
            images_per_id: 20,
            confuser_fraction: 0.5,
            seed: 0,
            dim: 16,
            grid: RenderGrid::default(),
            noise_sigma: 0.5,
            type_scale: 1.0,
            signature_scale: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 {
            return Err(Error::InvalidConfig("need at least 2 identities".into()));
        }
        if self.images_per_id < 2 {
            return Err(Error::InvalidConfig("need at least 2 images per identity".into()));
        }
        if !(0.0..=1.0).contains(&self.confuser_fraction) {
            return Err(Error::InvalidConfig("confuser_fraction outside [0, 1]".into()));
        }
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dim must be positive".into()));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("type_scale", self.type_scale),
            ("signature_scale", self.signature_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    /// Identities `[0, num_train_ids)` form the train split.
    pub fn num_train_ids(&self) -> usize {
        self.num_ids / 2
    }

    /// Query images per test identity; the rest go to the gallery.
    pub fn queries_per_id(&self) -> usize {
        (self.images_per_id / 5).max(1)
    }

    /// (train, query, gallery) image counts.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let test_ids = self.num_ids - self.num_train_ids();
        let q = self.queries_per_id();
        (
            self.num_train_ids() * self.images_per_id,
            test_ids * q,
            test_ids * (self.images_per_id - q),
        )
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const IMAGE_STREAM_BASE: u64 = 1 << 40;
const LAYOUT_STREAM: u64 = 1 << 41;

pub fn generate_identities(config: &SynthConfig) -> Vec<SyntheticIdentity> {
    let num_confusers = ((config.num_ids as f64 * config.confuser_fraction).round() as usize) & !1;
    let type_dist = Normal::new(0.0, config.type_scale).unwrap();
    let sig_dist = Normal::new(0.0, config.signature_scale).unwrap();
    let mut ids: Vec<SyntheticIdentity> = (0..config.num_ids)
        .map(|id| {
            let mut rng = stream_rng(config.seed, id as u64);
            let type_vector = (0..config.dim).map(|_| type_dist.sample(&mut rng)).collect();
            let signatures = std::array::from_fn(|_| {
                (0..config.dim).map(|_| sig_dist.sample(&mut rng)).collect()
            });
            SyntheticIdentity {
                id,
                type_vector,
                signatures,
            }
        })
        .collect();
    // Confuser pairs are spread over both splits by pairing within the
    // train half and within the test half.
    let half = config.num_train_ids();
    let mut pair_in = |lo: usize, hi: usize, pairs: usize| {
        for k in 0..pairs {
            let (a, b) = (lo + 2 * k, lo + 2 * k + 1);
            if b < hi {
                ids[b].type_vector = ids[a].type_vector.clone();
            }
        }
    };
    let train_pairs = num_confusers / 2 * half / config.num_ids.max(1);
    pair_in(0, half, train_pairs);
    pair_in(half, config.num_ids, num_confusers / 2 - train_pairs);
    ids
}

/// Vehicle identifier string of identity `id`.
pub fn vehicle_name(id: usize) -> String {
    format!("v{id:04}")
}

pub fn camera_name(camera: usize) -> String {
    format!("c{camera:02}")
}

/// One generated image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub record: ImageRecord,
    pub identity: usize,
    pub viewpoint: Viewpoint,
    pub observation: Observation,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SynthConfig,
    pub identities: Vec<SyntheticIdentity>,
    pub images: Vec<SyntheticImage>,
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SyntheticImage> {
        self.images.iter().filter(move |i| i.record.split == split)
    }
}

fn random_viewpoint(rng: &mut impl Rng) -> Viewpoint {
    Viewpoint::new(
        rng.random_range(0.0..360.0),
        rng.random_range(0.0..=MAX_ELEVATION_DEG),
    )
    .expect("sampled in range")
}

/// Viewpoints for every image of one identity. For test identities the
/// first `queries` images are queries; the layout guarantees that every
/// query has at least one gallery image from another camera.
fn plan_viewpoints(rng: &mut impl Rng, count: usize, queries: Option<usize>) -> Vec<Viewpoint> {
    let mut vps: Vec<Viewpoint> = (0..count).map(|_| random_viewpoint(rng)).collect();
    if let Some(q) = queries {
        let gallery = count - q;
        for qi in 0..q {
            let cam = vps[qi].camera();
            if vps[q..].iter().all(|g| g.camera() == cam) {
                vps[q + qi % gallery] = vps[qi].flipped();
            }
        }
    }
    vps
}

/// Renders the whole dataset in memory. Output is a pure function of the
/// config; per-image random streams make it independent of thread count.
pub fn generate(config: &SynthConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let identities = generate_identities(config);
    let train_ids = config.num_train_ids();
    let q = config.queries_per_id();

    let mut plan = Vec::with_capacity(config.num_ids * config.images_per_id);
    for ident in &identities {
        let mut rng = stream_rng(config.seed, LAYOUT_STREAM + ident.id as u64);
        let is_test = ident.id >= train_ids;
        let vps = plan_viewpoints(&mut rng, config.images_per_id, is_test.then_some(q));
        for (k, vp) in vps.into_iter().enumerate() {
            let split = if !is_test {
                Split::Train
            } else if k < q {
                Split::Query
            } else {
                Split::Gallery
            };
            plan.push((ident.id, k, vp, split));
        }
    }

    let images = plan
        .into_par_iter()
        .enumerate()
        .map(|(index, (id, k, vp, split))| {
            let mut rng = stream_rng(config.seed, IMAGE_STREAM_BASE + index as u64);
            let observation =
                render_observation(&identities[id], &vp, config.grid, config.noise_sigma, &mut rng)?;
            let image_id = format!("{}_{k:03}", vehicle_name(id));
            Ok(SyntheticImage {
                record: ImageRecord {
                    feature_path: format!("features/{image_id}.bin").into(),
                    mask_path: format!("masks/{image_id}.bin").into(),
                    image_id,
                    vehicle_id: vehicle_name(id),
                    camera_id: camera_name(observation.camera),
                    split,
                },
                identity: id,
                viewpoint: vp,
                observation,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticDataset {
        config: config.clone(),
        identities,
        images,
    })
}

/// Renders the dataset and writes `manifest.jsonl`, `synth_config.json`,
/// `features/*.bin` and `masks/*.bin` under `out_dir`.
pub fn generate_dataset(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out = out_dir.as_ref();
    let data = generate(config)?;
    for sub in ["features", "masks"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    data.images.par_iter().try_for_each(|img| {
        io::write_tensor(
            out.join(&img.record.feature_path),
            &Tensor::from(&img.observation.features),
        )?;
        io::write_tensor(
            out.join(&img.record.mask_path),
            &Tensor::from(img.observation.masks.masks()),
        )
    })?;
    let records: Vec<ImageRecord> = data.images.iter().map(|i| i.record.clone()).collect();
    io::write_manifest(out.join("manifest.jsonl"), &records)?;
    let cfg_path = out.join("synth_config.json");
    let text = serde_json::to_string_pretty(config).expect("config serializes");
    fs::write(&cfg_path, text + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    DatasetManifest::new(out, records)
}
