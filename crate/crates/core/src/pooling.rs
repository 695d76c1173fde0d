//! View-aware feature alignment: mask downsampling, mask average pooling,
//! global average pooling and visibility scores.
//!
//! All reductions accumulate in `f64` and round once to `f32` on output.

use crate::error::{Error, Result};
use crate::types::{validate_pair, FeatureMap, ViewEmbedding, ViewMaskSet, NUM_VIEWS};

/// Default spatial grid of the backbone feature map.
pub const DEFAULT_GRID: usize = 16;

/// View masks at source (image) resolution, before max-pooling onto the
/// feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FullResMaskSet(ViewMaskSet);

impl FullResMaskSet {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ViewMaskSet::new(height, width, data).map(Self)
    }

    pub fn masks(&self) -> &ViewMaskSet {
        &self.0
    }

    pub fn into_masks(self) -> ViewMaskSet {
        self.0
    }
}

impl From<ViewMaskSet> for FullResMaskSet {
    fn from(m: ViewMaskSet) -> Self {
        Self(m)
    }
}

/// Max-pools every view mask independently onto a `target_h x target_w` grid.
pub fn downsample_masks(
    masks: &FullResMaskSet,
    target_h: usize,
    target_w: usize,
) -> Result<ViewMaskSet> {
    let src = masks.masks();
    let (src_h, src_w) = (src.height(), src.width());
    if target_h == 0 || target_w == 0 || src_h % target_h != 0 || src_w % target_w != 0 {
        return Err(Error::NonDivisibleDims {
            src_h,
            src_w,
            dst_h: target_h,
            dst_w: target_w,
        });
    }
    let (bh, bw) = (src_h / target_h, src_w / target_w);
    let mut out = vec![0.0f32; NUM_VIEWS * target_h * target_w];
    for view in 0..NUM_VIEWS {
        let mask = src.mask(view);
        let dst = &mut out[view * target_h * target_w..(view + 1) * target_h * target_w];
        for (row, src_row) in mask.chunks_exact(src_w).enumerate() {
            let dst_row = &mut dst[(row / bh) * target_w..(row / bh + 1) * target_w];
            for (col, &v) in src_row.iter().enumerate() {
                let cell = &mut dst_row[col / bw];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    ViewMaskSet::new(target_h, target_w, out)
}

/// Mask-weighted mean of the feature map, one vector per view.
///
/// A view whose mask sums to zero yields the zero vector; its visibility
/// score is zero as well, which removes it from every attention-weighted
/// distance downstream.
pub fn mask_average_pool(
    features: &FeatureMap,
    masks: &ViewMaskSet,
) -> Result<[Vec<f32>; NUM_VIEWS]> {
    validate_pair(features, masks)?;
    let c = features.channels();
    let mut out: [Vec<f32>; NUM_VIEWS] = Default::default();
    let mut acc = vec![0.0f64; c];
    for (view, slot) in out.iter_mut().enumerate() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut mass = 0.0f64;
        for (cell, &w) in masks.mask(view).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let w = w as f64;
            mass += w;
            for (a, &x) in acc.iter_mut().zip(features.cell_flat(cell)) {
                *a += w * x as f64;
            }
        }
        *slot = if mass > 0.0 {
            acc.iter().map(|&a| (a / mass) as f32).collect()
        } else {
            vec![0.0; c]
        };
    }
    Ok(out)
}

/// Per-channel mean over all cells.
pub fn global_average_pool(features: &FeatureMap) -> Vec<f32> {
    let c = features.channels();
    let mut acc = vec![0.0f64; c];
    for cell in features.data().chunks_exact(c) {
        for (a, &x) in acc.iter_mut().zip(cell) {
            *a += x as f64;
        }
    }
    let n = features.cells() as f64;
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

/// Total mask mass per view.
pub fn visibility_scores(masks: &ViewMaskSet) -> [f32; NUM_VIEWS] {
    std::array::from_fn(|view| {
        masks
            .mask(view)
            .iter()
            .map(|&m| m as f64)
            .sum::<f64>() as f32
    })
}

/// Global feature, view-aligned locals and visibility scores for one image.
pub fn embed(features: &FeatureMap, masks: &ViewMaskSet) -> Result<ViewEmbedding> {
    let locals = mask_average_pool(features, masks)?;
    ViewEmbedding::new(
        global_average_pool(features),
        locals,
        visibility_scores(masks),
    )
}
