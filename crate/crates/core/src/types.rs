//! Shared data model: feature maps, view masks, embeddings, manifests and
//! distance matrices.
//!
//! Every constructor validates its invariants and rejects bad data; nothing
//! is clamped or repaired on the way in.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of vehicle views (front, back, side, top).
pub const NUM_VIEWS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum View {
    Front = 0,
    Back = 1,
    Side = 2,
    Top = 3,
}

impl View {
    pub const ALL: [View; NUM_VIEWS] = [View::Front, View::Back, View::Side, View::Top];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Front => "front",
            View::Back => "back",
            View::Side => "side",
            View::Top => "top",
        }
    }
}

fn check_finite(what: &'static str, data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFiniteValue { what, index }),
        None => Ok(()),
    }
}

/// H x W x C activations stored row-major as (h, w, c).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::DimensionMismatch(format!(
                "feature map dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch(format!(
                "feature map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        check_finite("feature map", &data)?;
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Channel vector of cell `(row, col)`.
    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        self.cell_flat(row * self.width + col)
    }

    /// Channel vector of the cell at flat (row-major) index.
    pub fn cell_flat(&self, cell: usize) -> &[f32] {
        let c = self.channels;
        &self.data[cell * c..(cell + 1) * c]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Four soft view masks over one H x W grid, stored view-major (view, h, w).
#[derive(Debug, Clone, PartialEq)]
pub struct ViewMaskSet {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ViewMaskSet {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::DimensionMismatch(format!(
                "mask dims must be positive, got {height}x{width}"
            )));
        }
        let cells = height * width;
        if data.len() != NUM_VIEWS * cells {
            return Err(Error::DimensionMismatch(format!(
                "mask set {NUM_VIEWS}x{height}x{width} needs {} values, got {}",
                NUM_VIEWS * cells,
                data.len()
            )));
        }
        check_finite("view masks", &data)?;
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::MaskOutOfRange {
                view: i / cells,
                cell: i % cells,
                value: data[i],
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds a mask set from four per-view grids.
    pub fn from_views(height: usize, width: usize, views: [Vec<f32>; NUM_VIEWS]) -> Result<Self> {
        let mut data = Vec::with_capacity(NUM_VIEWS * height * width);
        for v in views {
            if v.len() != height * width {
                return Err(Error::DimensionMismatch(format!(
                    "view mask needs {} values, got {}",
                    height * width,
                    v.len()
                )));
            }
            data.extend(v);
        }
        Self::new(height, width, data)
    }

    /// All four views set to a constant.
    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; NUM_VIEWS * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn mask(&self, view: usize) -> &[f32] {
        let cells = self.cells();
        &self.data[view * cells..(view + 1) * cells]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Checks that a feature map and a mask set share the same spatial grid.
///
/// Both types validate their own contents at construction, so only the
/// pairing is left to check here.
pub fn validate_pair(features: &FeatureMap, masks: &ViewMaskSet) -> Result<()> {
    if features.height() != masks.height() || features.width() != masks.width() {
        return Err(Error::DimensionMismatch(format!(
            "feature grid {}x{} vs mask grid {}x{}",
            features.height(),
            features.width(),
            masks.height(),
            masks.width()
        )));
    }
    Ok(())
}

/// Global vector, four view-aligned local vectors and their visibility scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewEmbedding {
    global: Vec<f32>,
    locals: [Vec<f32>; NUM_VIEWS],
    visibilities: [f32; NUM_VIEWS],
}

impl ViewEmbedding {
    pub fn new(
        global: Vec<f32>,
        locals: [Vec<f32>; NUM_VIEWS],
        visibilities: [f32; NUM_VIEWS],
    ) -> Result<Self> {
        let dim = global.len();
        if dim == 0 {
            return Err(Error::InvalidEmbedding("zero-dimensional embedding".into()));
        }
        check_finite("global feature", &global)?;
        for (i, (local, &vis)) in locals.iter().zip(&visibilities).enumerate() {
            if local.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "local {i} has dimension {}, global has {dim}",
                    local.len()
                )));
            }
            check_finite("local feature", local)?;
            if !vis.is_finite() || vis < 0.0 {
                return Err(Error::NegativeVisibility {
                    view: i,
                    value: vis as f64,
                });
            }
            if vis == 0.0 && local.iter().any(|&x| x != 0.0) {
                return Err(Error::InvalidEmbedding(format!(
                    "view {i} has zero visibility but a non-zero local feature"
                )));
            }
        }
        Ok(Self {
            global,
            locals,
            visibilities,
        })
    }

    pub fn dim(&self) -> usize {
        self.global.len()
    }

    pub fn global(&self) -> &[f32] {
        &self.global
    }

    pub fn locals(&self) -> &[Vec<f32>; NUM_VIEWS] {
        &self.locals
    }

    pub fn local(&self, view: usize) -> &[f32] {
        &self.locals[view]
    }

    pub fn visibilities(&self) -> &[f32; NUM_VIEWS] {
        &self.visibilities
    }

    /// Copy with the global and every local vector scaled to unit L2 norm
    /// (zero vectors stay zero).
    pub fn l2_normalized(&self) -> Self {
        fn unit(v: &[f32]) -> Vec<f32> {
            let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            if n == 0.0 {
                v.to_vec()
            } else {
                v.iter().map(|&x| (x as f64 / n) as f32).collect()
            }
        }
        Self {
            global: unit(&self.global),
            locals: std::array::from_fn(|i| unit(&self.locals[i])),
            visibilities: self.visibilities,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_id: String,
    pub vehicle_id: String,
    pub camera_id: String,
    pub split: Split,
    pub feature_path: PathBuf,
    pub mask_path: PathBuf,
}

/// Image records plus the directory relative paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    root: PathBuf,
    records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ImageRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::DuplicateImageId(r.image_id.clone()));
            }
        }
        Ok(Self {
            root: root.into(),
            records,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }
}

/// Q x G fused distances, row-major by query.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    num_query: usize,
    num_gallery: usize,
    values: Vec<f32>,
    query_ids: Vec<String>,
    gallery_ids: Vec<String>,
    degenerate_pairs: u64,
}

impl DistanceMatrix {
    pub fn new(
        num_query: usize,
        num_gallery: usize,
        values: Vec<f32>,
        query_ids: Vec<String>,
        gallery_ids: Vec<String>,
    ) -> Result<Self> {
        if num_query == 0 || num_gallery == 0 {
            return Err(Error::EmptyInput("distance matrix"));
        }
        if values.len() != num_query * num_gallery
            || query_ids.len() != num_query
            || gallery_ids.len() != num_gallery
        {
            return Err(Error::DimensionMismatch(format!(
                "distance matrix {num_query}x{num_gallery} with {} values, {} query ids, {} gallery ids",
                values.len(),
                query_ids.len(),
                gallery_ids.len()
            )));
        }
        check_finite("distance matrix", &values)?;
        if let Some(i) = values.iter().position(|&v| v < 0.0) {
            return Err(Error::NegativeDistance {
                index: i,
                value: values[i],
            });
        }
        Ok(Self {
            num_query,
            num_gallery,
            values,
            query_ids,
            gallery_ids,
            degenerate_pairs: 0,
        })
    }

    /// Records how many pairs had no commonly visible view.
    pub fn with_degenerate_pairs(mut self, count: u64) -> Self {
        self.degenerate_pairs = count;
        self
    }

    pub fn degenerate_pairs(&self) -> u64 {
        self.degenerate_pairs
    }

    pub fn num_query(&self) -> usize {
        self.num_query
    }

    pub fn num_gallery(&self) -> usize {
        self.num_gallery
    }

    pub fn get(&self, q: usize, g: usize) -> f32 {
        self.values[q * self.num_gallery + g]
    }

    pub fn row(&self, q: usize) -> &[f32] {
        &self.values[q * self.num_gallery..(q + 1) * self.num_gallery]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn query_ids(&self) -> &[String] {
        &self.query_ids
    }

    pub fn gallery_ids(&self) -> &[String] {
        &self.gallery_ids
    }
}
