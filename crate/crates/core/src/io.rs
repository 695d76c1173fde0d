//! On-disk formats.
//!
//! Tensor container (all integers little-endian, no padding):
//!
//! | offset | size      | field                                   |
//! |--------|-----------|-----------------------------------------|
//! | 0      | 4         | magic `b"PVEN"`                         |
//! | 4      | 1         | format version, `1`                     |
//! | 5      | 1         | dtype code, `1` = IEEE-754 binary32     |
//! | 6      | 1         | ndim                                    |
//! | 7      | 4 * ndim  | dims, `u32` each                        |
//! | ...    | 4 * prod  | payload, row-major                      |
//!
//! Feature maps are stored as `[H, W, C]`, view masks as `[4, H, W]`
//! (front, back, side, top), embeddings as `[5, C]` (global then the four
//! locals) with visibilities in a sibling `[4]` container.
//!
//! Manifests are JSON lines with keys `image_id`, `vehicle_id`, `camera_id`,
//! `split`, `feature_path`, `mask_path`; relative paths resolve against the
//! manifest's directory.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pooling::FullResMaskSet;
use serde::{Deserialize, Serialize};

use crate::types::{
    DatasetManifest, DistanceMatrix, FeatureMap, ImageRecord, ViewEmbedding, ViewMaskSet, NUM_VIEWS,
};

pub const MAGIC: [u8; 4] = *b"PVEN";
pub const FORMAT_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
/// Reserved for a future 64-bit payload; not accepted by version 1 readers.
pub const DTYPE_F64: u8 = 2;

const HEADER_FIXED: usize = 7;

/// N-dimensional `f32` array as stored in a container.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::DimensionMismatch(format!("{} dims", dims.len())));
        }
        if let Some(d) = dims.iter().find(|&&d| d > u32::MAX as usize) {
            return Err(Error::DimensionMismatch(format!("dim {d} exceeds u32")));
        }
        let count: usize = dims.iter().product();
        if count != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "dims {dims:?} need {count} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_FIXED + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.push(FORMAT_VERSION);
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_FIXED {
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(Error::BadMagic {
                    found: bytes[..4].try_into().unwrap(),
                });
            }
            return Err(Error::TruncatedPayload {
                expected: HEADER_FIXED,
                actual: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        if bytes[5] != DTYPE_F32 {
            return Err(Error::UnsupportedDtype(bytes[5]));
        }
        let ndim = bytes[6] as usize;
        let header = HEADER_FIXED + 4 * ndim;
        if bytes.len() < header {
            return Err(Error::TruncatedPayload {
                expected: header,
                actual: bytes.len(),
            });
        }
        let dims: Vec<usize> = bytes[HEADER_FIXED..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::DimensionMismatch(format!("dims {dims:?} overflow")))?;
        let expected = count
            .checked_mul(4)
            .ok_or_else(|| Error::DimensionMismatch(format!("dims {dims:?} overflow")))?;
        let payload = &bytes[header..];
        if payload.len() < expected {
            return Err(Error::TruncatedPayload {
                expected,
                actual: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::TrailingData {
                extra: payload.len() - expected,
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, data })
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.dims.len() != rank {
        return Err(Error::DimensionMismatch(format!(
            "{what} container must have {rank} dims, got {:?}",
            t.dims
        )));
    }
    Ok(())
}

impl From<&FeatureMap> for Tensor {
    fn from(f: &FeatureMap) -> Self {
        Tensor {
            dims: vec![f.height(), f.width(), f.channels()],
            data: f.data().to_vec(),
        }
    }
}

impl From<&ViewMaskSet> for Tensor {
    fn from(m: &ViewMaskSet) -> Self {
        Tensor {
            dims: vec![NUM_VIEWS, m.height(), m.width()],
            data: m.data().to_vec(),
        }
    }
}

impl TryFrom<Tensor> for FeatureMap {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        expect_rank(&t, 3, "feature map")?;
        FeatureMap::new(t.dims[0], t.dims[1], t.dims[2], t.data)
    }
}

impl TryFrom<Tensor> for ViewMaskSet {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        expect_rank(&t, 3, "mask")?;
        if t.dims[0] != NUM_VIEWS {
            return Err(Error::DimensionMismatch(format!(
                "mask container needs {NUM_VIEWS} views, got {}",
                t.dims[0]
            )));
        }
        ViewMaskSet::new(t.dims[1], t.dims[2], t.data)
    }
}

pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    read_tensor(path)?.try_into()
}

pub fn read_masks(path: impl AsRef<Path>) -> Result<FullResMaskSet> {
    let m: ViewMaskSet = read_tensor(path)?.try_into()?;
    Ok(m.into())
}

/// Writes `<stem>.emb` (`[5, C]`) and `<stem>.vis` (`[4]`) side by side.
pub fn write_embedding(dir: impl AsRef<Path>, stem: &str, e: &ViewEmbedding) -> Result<()> {
    let dir = dir.as_ref();
    let mut vectors = Vec::with_capacity((NUM_VIEWS + 1) * e.dim());
    vectors.extend_from_slice(e.global());
    for l in e.locals() {
        vectors.extend_from_slice(l);
    }
    write_tensor(
        dir.join(format!("{stem}.emb")),
        &Tensor::new(vec![NUM_VIEWS + 1, e.dim()], vectors)?,
    )?;
    write_tensor(
        dir.join(format!("{stem}.vis")),
        &Tensor::new(vec![NUM_VIEWS], e.visibilities().to_vec())?,
    )
}

pub fn read_embedding(dir: impl AsRef<Path>, stem: &str) -> Result<ViewEmbedding> {
    let dir = dir.as_ref();
    let vectors = read_tensor(dir.join(format!("{stem}.emb")))?;
    expect_rank(&vectors, 2, "embedding")?;
    if vectors.dims[0] != NUM_VIEWS + 1 {
        return Err(Error::DimensionMismatch(format!(
            "embedding container needs {} rows, got {}",
            NUM_VIEWS + 1,
            vectors.dims[0]
        )));
    }
    let vis = read_tensor(dir.join(format!("{stem}.vis")))?;
    if vis.dims != [NUM_VIEWS] {
        return Err(Error::DimensionMismatch(format!(
            "visibility container must be [{NUM_VIEWS}], got {:?}",
            vis.dims
        )));
    }
    let dim = vectors.dims[1];
    let rows: Vec<Vec<f32>> = vectors.data.chunks_exact(dim.max(1)).map(<[f32]>::to_vec).collect();
    let mut rows = rows.into_iter();
    let global = rows.next().unwrap_or_default();
    let locals = std::array::from_fn(|_| rows.next().unwrap_or_default());
    ViewEmbedding::new(global, locals, vis.data.try_into().unwrap())
}

/// Parses a JSON-lines manifest; relative paths resolve against `root`.
pub fn parse_manifest(text: &str, root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord = serde_json::from_str(line).map_err(|e| Error::ParseError {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    DatasetManifest::new(root.as_ref(), records)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, root)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ImageRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// JSON sidecar stored next to a distance-matrix container as `<file>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSidecar {
    pub query_ids: Vec<String>,
    pub gallery_ids: Vec<String>,
    pub degenerate_pairs: u64,
    /// Settings that produced the matrix, echoed verbatim.
    #[serde(default)]
    pub config: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

/// Writes the `[Q, G]` container and its sidecar.
pub fn write_distance_matrix(
    path: impl AsRef<Path>,
    dm: &DistanceMatrix,
    config: serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    write_tensor(
        path,
        &Tensor::new(vec![dm.num_query(), dm.num_gallery()], dm.values().to_vec())?,
    )?;
    let side = DistanceSidecar {
        query_ids: dm.query_ids().to_vec(),
        gallery_ids: dm.gallery_ids().to_vec(),
        degenerate_pairs: dm.degenerate_pairs(),
        config,
    };
    let sp = sidecar_path(path);
    let text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    fs::write(&sp, text + "\n").map_err(|e| Error::io(&sp, e))
}

pub fn read_distance_matrix(path: impl AsRef<Path>) -> Result<(DistanceMatrix, DistanceSidecar)> {
    let path = path.as_ref();
    let t = read_tensor(path)?;
    expect_rank(&t, 2, "distance matrix")?;
    let sp = sidecar_path(path);
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: DistanceSidecar = serde_json::from_str(&text).map_err(|e| Error::ParseError {
        line: e.line(),
        message: e.to_string(),
    })?;
    let dm = DistanceMatrix::new(
        t.dims[0],
        t.dims[1],
        t.data,
        side.query_ids.clone(),
        side.gallery_ids.clone(),
    )?
    .with_degenerate_pairs(side.degenerate_pairs);
    Ok((dm, side))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = t.to_bytes();
        let mut expect = b"PVEN".to_vec();
        expect.extend([1, 1, 2]);
        expect.extend(2u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.5f32).to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn feature_map_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..16 * 16 * 8).map(|i| (i as f32 * 0.37).sin()).collect();
        let f = FeatureMap::new(16, 16, 8, data).unwrap();
        let p = dir.path().join("f.bin");
        write_tensor(&p, &Tensor::from(&f)).unwrap();
        let back = read_feature_map(&p).unwrap();
        assert_eq!(
            back.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            f.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejects_bad_headers() {
        let good = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().to_bytes();

        let mut b = good.clone();
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Tensor::from_bytes(&b), Err(Error::BadMagic { found }) if &found == b"XXXX"));

        let mut b = good.clone();
        b[4] = 2;
        assert!(matches!(Tensor::from_bytes(&b), Err(Error::UnsupportedVersion(2))));

        let mut b = good.clone();
        b[5] = DTYPE_F64;
        assert!(matches!(Tensor::from_bytes(&b), Err(Error::UnsupportedDtype(2))));

        let b = &good[..good.len() - 3];
        assert!(matches!(
            Tensor::from_bytes(b),
            Err(Error::TruncatedPayload { expected: 12, actual: 9 })
        ));

        let mut b = good.clone();
        b.push(0);
        assert!(matches!(Tensor::from_bytes(&b), Err(Error::TrailingData { extra: 1 })));

        assert!(matches!(
            Tensor::from_bytes(b"PVE"),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_tensor("/nonexistent/x.bin").unwrap_err();
        assert_eq!(err.class(), "IoError");
    }

    #[test]
    fn embedding_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let e = ViewEmbedding::new(
            vec![1.0, 2.0],
            [vec![0.5, 0.5], vec![0.0, 0.0], vec![-1.0, 3.0], vec![0.25, 0.0]],
            [10.0, 0.0, 3.5, 1.0],
        )
        .unwrap();
        write_embedding(dir.path(), "img", &e).unwrap();
        assert_eq!(read_embedding(dir.path(), "img").unwrap(), e);
    }

    const LINE_A: &str = r#"{"image_id":"a","vehicle_id":"v1","camera_id":"c01","split":"query","feature_path":"f/a.bin","mask_path":"m/a.bin"}"#;
    const LINE_B: &str = r#"{"image_id":"b","vehicle_id":"v1","camera_id":"c02","split":"gallery","feature_path":"/abs/b.bin","mask_path":"m/b.bin"}"#;

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest(&format!("{LINE_A}\n{LINE_B}\n"), "/data/set").unwrap();
        assert_eq!(m.len(), 2);
        let a = &m.records()[0];
        assert_eq!(m.resolve(&a.feature_path), Path::new("/data/set/f/a.bin"));
        assert_eq!(m.resolve(&m.records()[1].feature_path), Path::new("/abs/b.bin"));
    }

    #[test]
    fn manifest_duplicates_and_bad_split() {
        let err = parse_manifest(&format!("{LINE_A}\n{LINE_A}\n"), ".").unwrap_err();
        assert!(matches!(err, Error::DuplicateImageId(ref id) if id == "a"));

        let bad = LINE_B.replace("gallery", "validation");
        let err = parse_manifest(&format!("{LINE_A}\n{bad}\n"), ".").unwrap_err();
        assert!(matches!(err, Error::ParseError { line: 2, .. }), "{err}");
    }

    #[test]
    fn manifest_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = parse_manifest(&format!("{LINE_A}\n{LINE_B}\n"), dir.path()).unwrap();
        let p = dir.path().join("manifest.jsonl");
        write_manifest(&p, m.records()).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), m);
    }

    proptest! {
        #[test]
        fn container_roundtrip_is_bit_exact(
            dims in prop::collection::vec(1usize..5, 0..4),
            seed in any::<u32>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503)))
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            let a: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn distance_matrix_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let dm = DistanceMatrix::new(
            2,
            3,
            vec![0.0, 1.5, 2.0, 0.25, 3.0, 1e-7],
            vec!["q0".into(), "q1".into()],
            vec!["g0".into(), "g1".into(), "g2".into()],
        )
        .unwrap()
        .with_degenerate_pairs(4);
        let path = dir.path().join("d.bin");
        write_distance_matrix(&path, &dm, serde_json::json!({"lambda2": 0.5})).unwrap();
        assert!(dir.path().join("d.bin.json").exists());
        let (back, side) = read_distance_matrix(&path).unwrap();
        assert_eq!(back, dm);
        assert_eq!(back.degenerate_pairs(), 4);
        assert_eq!(side.config["lambda2"], 0.5);
    }
}
