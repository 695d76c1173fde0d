//! Retrieval evaluation (CMC@k, mAP) and distance heatmaps.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DatasetManifest, DistanceMatrix, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GallerySampling {
    #[default]
    Full,
    /// Keep one randomly chosen gallery image per vehicle (seeded).
    OnePerId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    /// Drop gallery entries sharing both vehicle and camera with the query.
    pub exclude_same_camera: bool,
    pub gallery_sampling: GallerySampling,
    pub k_values: Vec<usize>,
    /// Seed of the one-per-id gallery draw.
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self::cross_camera()
    }
}

impl EvalProtocol {
    /// Full gallery, same-camera matches of the same vehicle excluded.
    pub fn cross_camera() -> Self {
        Self {
            exclude_same_camera: true,
            gallery_sampling: GallerySampling::Full,
            k_values: vec![1, 5, 10],
            seed: 0,
        }
    }

    /// One random gallery image per vehicle, no camera filtering.
    pub fn one_per_id(seed: u64) -> Self {
        Self {
            exclude_same_camera: false,
            gallery_sampling: GallerySampling::OnePerId,
            k_values: vec![1, 5],
            seed,
        }
    }

    /// Full gallery, nothing excluded.
    pub fn plain() -> Self {
        Self {
            exclude_same_camera: false,
            gallery_sampling: GallerySampling::Full,
            k_values: vec![1, 5, 10],
            seed: 0,
        }
    }

    pub fn by_name(name: &str, seed: u64) -> Result<Self> {
        match name {
            "cross-camera" | "veri" => Ok(Self::cross_camera()),
            "one-per-id" | "vehicleid" => Ok(Self::one_per_id(seed)),
            "plain" => Ok(Self::plain()),
            other => Err(Error::InvalidConfig(format!("unknown protocol {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.k_values[0] == 0 {
            return Err(Error::InvalidConfig("k values must be positive".into()));
        }
        if self.k_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("k values must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Identity and camera of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ItemMeta<'a> {
    pub vehicle_id: &'a str,
    pub camera_id: &'a str,
}

/// Gallery indices ordered by ascending distance (ties by index), with
/// protocol exclusions removed.
pub fn rank_gallery(
    row: &[f32],
    gallery: &[ItemMeta<'_>],
    query: &ItemMeta<'_>,
    protocol: &EvalProtocol,
) -> Vec<usize> {
    rank_candidates(row, gallery, query, protocol.exclude_same_camera, 0..row.len())
}

fn rank_candidates(
    row: &[f32],
    gallery: &[ItemMeta<'_>],
    query: &ItemMeta<'_>,
    exclude_same_camera: bool,
    candidates: impl Iterator<Item = usize>,
) -> Vec<usize> {
    let mut order: Vec<usize> = candidates
        .filter(|&g| {
            !(exclude_same_camera
                && gallery[g].vehicle_id == query.vehicle_id
                && gallery[g].camera_id == query.camera_id)
        })
        .collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    order
}

/// Mean of precision@position over the relevant positions.
pub fn average_precision(ranked_relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (pos, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::NoRelevantItems);
    }
    Ok(sum / hits as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    /// `(k, CMC@k)` in increasing `k`.
    pub cmc: Vec<(usize, f64)>,
    pub num_queries_evaluated: usize,
    /// Queries without any relevant gallery item after exclusions.
    pub num_queries_skipped: usize,
    pub degenerate_pair_count: u64,
    pub protocol: EvalProtocol,
}

impl EvalReport {
    pub fn cmc_at(&self, k: usize) -> Option<f64> {
        self.cmc.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }

    /// `key=value` lines, UTF-8, fixed key order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "map={:.6}", self.map);
        for (k, v) in &self.cmc {
            let _ = writeln!(s, "cmc@{k}={v:.6}");
        }
        let _ = writeln!(s, "num_queries_evaluated={}", self.num_queries_evaluated);
        let _ = writeln!(s, "num_queries_skipped={}", self.num_queries_skipped);
        let _ = writeln!(s, "degenerate_pair_count={}", self.degenerate_pair_count);
        let _ = writeln!(s, "exclude_same_camera={}", self.protocol.exclude_same_camera);
        let sampling = match self.protocol.gallery_sampling {
            GallerySampling::Full => "full",
            GallerySampling::OnePerId => "one-per-id",
        };
        let _ = writeln!(s, "gallery_sampling={sampling}");
        let _ = writeln!(s, "gallery_seed={}", self.protocol.seed);
        s
    }
}

/// Per-query outcome: `None` when the query had nothing to retrieve.
fn score_query(
    row: &[f32],
    gallery: &[ItemMeta<'_>],
    query: &ItemMeta<'_>,
    exclude_same_camera: bool,
    candidates: &[usize],
) -> Option<(f64, usize)> {
    let order = rank_candidates(
        row,
        gallery,
        query,
        exclude_same_camera,
        candidates.iter().copied(),
    );
    let relevance: Vec<bool> = order
        .iter()
        .map(|&g| gallery[g].vehicle_id == query.vehicle_id)
        .collect();
    let first = relevance.iter().position(|&r| r)?;
    let ap = average_precision(&relevance).ok()?;
    Some((ap, first + 1))
}

fn sample_gallery(gallery: &[ItemMeta<'_>], protocol: &EvalProtocol) -> Vec<usize> {
    match protocol.gallery_sampling {
        GallerySampling::Full => (0..gallery.len()).collect(),
        GallerySampling::OnePerId => {
            let mut groups: Vec<Vec<usize>> = Vec::new();
            let mut slot: HashMap<&str, usize> = HashMap::new();
            for (i, g) in gallery.iter().enumerate() {
                let s = *slot.entry(g.vehicle_id).or_insert_with(|| {
                    groups.push(Vec::new());
                    groups.len() - 1
                });
                groups[s].push(i);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
            let mut picked: Vec<usize> = groups
                .iter()
                .map(|g| *g.choose(&mut rng).expect("non-empty group"))
                .collect();
            picked.sort_unstable();
            picked
        }
    }
}

/// Evaluates a row-major Q x G distance grid against query/gallery metadata.
pub fn evaluate_rows(
    values: &[f32],
    queries: &[ItemMeta<'_>],
    gallery: &[ItemMeta<'_>],
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    protocol.validate()?;
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::EmptyInput("query or gallery set"));
    }
    if values.len() != queries.len() * gallery.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} distances for {} x {}",
            values.len(),
            queries.len(),
            gallery.len()
        )));
    }
    let candidates = sample_gallery(gallery, protocol);
    let g = gallery.len();
    let per_query: Vec<Option<(f64, usize)>> = queries
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            score_query(
                &values[qi * g..(qi + 1) * g],
                gallery,
                q,
                protocol.exclude_same_camera,
                &candidates,
            )
        })
        .collect();

    let mut ap_sum = 0.0f64;
    let mut hits = vec![0usize; protocol.k_values.len()];
    let mut evaluated = 0usize;
    for (ap, first) in per_query.iter().flatten() {
        evaluated += 1;
        ap_sum += ap;
        for (h, &k) in hits.iter_mut().zip(&protocol.k_values) {
            if *first <= k {
                *h += 1;
            }
        }
    }
    let frac = |n: usize| if evaluated == 0 { 0.0 } else { n as f64 / evaluated as f64 };
    Ok(EvalReport {
        map: if evaluated == 0 { 0.0 } else { ap_sum / evaluated as f64 },
        cmc: protocol
            .k_values
            .iter()
            .zip(&hits)
            .map(|(&k, &h)| (k, frac(h)))
            .collect(),
        num_queries_evaluated: evaluated,
        num_queries_skipped: queries.len() - evaluated,
        degenerate_pair_count: 0,
        protocol: protocol.clone(),
    })
}

/// Evaluates a distance matrix whose ids are looked up in `manifest`.
pub fn evaluate(
    dm: &DistanceMatrix,
    manifest: &DatasetManifest,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    let by_id: HashMap<&str, ItemMeta<'_>> = manifest
        .records()
        .iter()
        .map(|r| {
            (
                r.image_id.as_str(),
                ItemMeta {
                    vehicle_id: &r.vehicle_id,
                    camera_id: &r.camera_id,
                },
            )
        })
        .collect();
    let lookup = |ids: &[String]| -> Result<Vec<ItemMeta<'_>>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::UnknownImageId(id.clone()))
            })
            .collect()
    };
    let queries = lookup(dm.query_ids())?;
    let gallery = lookup(dm.gallery_ids())?;
    let mut report = evaluate_rows(dm.values(), &queries, &gallery, protocol)?;
    report.degenerate_pair_count = dm.degenerate_pairs();
    Ok(report)
}

/// Per-cell distance map between two feature maps, scaled to max 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl Heatmap {
    /// Binary portable graymap (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.values
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }
}

/// Channel-wise Euclidean distance of corresponding cells, linearly rescaled
/// so the largest cell is 1. Identical maps give an all-zero grid.
pub fn distance_heatmap(a: &FeatureMap, b: &FeatureMap) -> Result<Heatmap> {
    if (a.height(), a.width(), a.channels()) != (b.height(), b.width(), b.channels()) {
        return Err(Error::DimensionMismatch(format!(
            "feature maps {}x{}x{} and {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    let raw: Vec<f64> = (0..a.cells())
        .map(|c| {
            a.cell_flat(c)
                .iter()
                .zip(b.cell_flat(c))
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let max = raw.iter().copied().fold(0.0f64, f64::max);
    let values = raw
        .iter()
        .map(|&r| if max > 0.0 { (r / max) as f32 } else { 0.0 })
        .collect();
    Ok(Heatmap {
        height: a.height(),
        width: a.width(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn meta<'a>(v: &'a str, c: &'a str) -> ItemMeta<'a> {
        ItemMeta {
            vehicle_id: v,
            camera_id: c,
        }
    }

    #[test]
    fn ranking_examples() {
        let g = [meta("a", "1"), meta("b", "1"), meta("c", "1")];
        let q = meta("x", "2");
        let p = EvalProtocol::plain();
        assert_eq!(rank_gallery(&[0.3, 0.1, 0.2], &g, &q, &p), vec![1, 2, 0]);
        assert_eq!(rank_gallery(&[0.1, 0.1], &g[..2], &q, &p), vec![0, 1]);

        let q = meta("a", "1");
        let order = rank_gallery(&[0.0, 0.5, 0.2], &g, &q, &EvalProtocol::cross_camera());
        assert_eq!(order, vec![2, 1]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, false, false]).unwrap(), 1.0);
        let ap = average_precision(&[true, false, true, false]).unwrap();
        assert_eq!(ap, (1.0 + 2.0 / 3.0) / 2.0);
        assert!((ap - 0.833_333_333_333_333_4).abs() < 1e-15);
        assert_eq!(average_precision(&[true; 5]).unwrap(), 1.0);
        assert!(matches!(average_precision(&[false, false]), Err(Error::NoRelevantItems)));
    }

    #[test]
    fn perfect_retrieval_and_map_of_two_queries() {
        let g = [meta("a", "1"), meta("b", "1"), meta("a", "3"), meta("c", "2")];
        let qs = [meta("a", "2"), meta("b", "2")];
        // Query a: relevant at ranks 1 and 3 of 4; query b: rank 1.
        let values = [0.1, 0.2, 0.25, 0.3, 0.5, 0.0, 0.6, 0.7];
        let r = evaluate_rows(&values, &qs, &g, &EvalProtocol::plain()).unwrap();
        assert_eq!(r.cmc_at(1), Some(1.0));
        assert!((r.map - (1.0 + (1.0 + 2.0 / 3.0) / 2.0) / 2.0).abs() < 1e-15);
        assert!((r.map - 0.916_666).abs() < 1e-5);
    }

    #[test]
    fn skipped_queries_are_counted() {
        let g = [meta("a", "1"), meta("b", "1")];
        let qs = [meta("a", "1"), meta("z", "2")];
        let r = evaluate_rows(&[0.1, 0.2, 0.3, 0.4], &qs, &g, &EvalProtocol::cross_camera()).unwrap();
        assert_eq!(r.num_queries_evaluated, 0);
        assert_eq!(r.num_queries_skipped, 2);
    }

    #[test]
    fn one_per_id_keeps_one_image_per_vehicle() {
        let g = [meta("a", "1"), meta("a", "2"), meta("b", "1"), meta("b", "3"), meta("b", "4")];
        let picked = sample_gallery(&g, &EvalProtocol::one_per_id(3));
        assert_eq!(picked.len(), 2);
        assert_eq!(picked, sample_gallery(&g, &EvalProtocol::one_per_id(3)));
        assert!(picked[0] < 2 && picked[1] >= 2);
    }

    #[test]
    fn protocol_validation() {
        let mut p = EvalProtocol::plain();
        p.k_values = vec![5, 1];
        assert!(p.validate().is_err());
        p.k_values = vec![0];
        assert!(p.validate().is_err());
        assert!(EvalProtocol::by_name("nope", 0).is_err());
    }

    #[test]
    fn monotone_transform_leaves_metrics_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ids = ["a", "b", "c", "d"];
        let cams = ["1", "2", "3"];
        let g: Vec<_> = (0..15).map(|i| meta(ids[i % 4], cams[i % 3])).collect();
        let q: Vec<_> = (0..6).map(|i| meta(ids[i % 4], cams[(i + 1) % 3])).collect();
        let values: Vec<f32> = (0..90).map(|_| rng.random_range(0.0..4.0)).collect();
        let mapped: Vec<f32> = values.iter().map(|&v| (v * 0.5).exp() + 3.0).collect();
        let p = EvalProtocol::cross_camera();
        assert_eq!(
            evaluate_rows(&values, &q, &g, &p).unwrap(),
            evaluate_rows(&mapped, &q, &g, &p).unwrap()
        );
    }

    #[test]
    fn heatmap_examples() {
        let a = FeatureMap::new(2, 3, 2, (0..12).map(|i| i as f32).collect()).unwrap();
        let h = distance_heatmap(&a, &a).unwrap();
        assert!(h.values.iter().all(|&v| v == 0.0));

        let mut data = a.data().to_vec();
        data[4 * 2] += 3.0;
        data[4 * 2 + 1] -= 4.0;
        let b = FeatureMap::new(2, 3, 2, data).unwrap();
        let h = distance_heatmap(&a, &b).unwrap();
        let expect: Vec<f32> = (0..6).map(|c| if c == 4 { 1.0 } else { 0.0 }).collect();
        assert_eq!(h.values, expect);
        let pgm = h.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 6..], &[0, 0, 0, 0, 255, 0]);

        let c = FeatureMap::new(3, 2, 2, vec![0.0; 12]).unwrap();
        assert!(matches!(distance_heatmap(&a, &c), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn heatmap_matches_cell_norm_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |rng: &mut ChaCha8Rng| {
            FeatureMap::new(5, 4, 3, (0..60).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        let h = distance_heatmap(&a, &b).unwrap();
        let norms: Vec<f64> = (0..20)
            .map(|c| {
                let mut s = 0.0f64;
                for ch in 0..3 {
                    s += (a.cell_flat(c)[ch] as f64 - b.cell_flat(c)[ch] as f64).powi(2);
                }
                s.sqrt()
            })
            .collect();
        let max = norms.iter().cloned().fold(0.0, f64::max);
        for (v, n) in h.values.iter().zip(&norms) {
            let expect = n / max;
            assert!((*v as f64 - expect).abs() <= 1e-6 * expect.max(1e-6));
        }
    }
}
