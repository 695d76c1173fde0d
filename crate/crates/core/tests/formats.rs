//! Containers and manifests written byte by byte, as an external exporter
//! would, must be accepted by the readers.

use std::fs;
use std::path::Path;

use viewreid::io::{read_feature_map, read_manifest, read_masks, read_tensor};
use viewreid::pooling::{downsample_masks, visibility_scores};
use viewreid::{validate_pair, Error, Split};

fn container(dims: &[u32], values: &[f32]) -> Vec<u8> {
    let mut b = b"PVEN".to_vec();
    b.extend([1u8, 1u8, dims.len() as u8]);
    for d in dims {
        b.extend(d.to_le_bytes());
    }
    for v in values {
        b.extend(v.to_le_bytes());
    }
    b
}

fn write_pair(dir: &Path, stem: &str, h: u32, w: u32, c: u32, mask_scale: u32) {
    let features: Vec<f32> = (0..h * w * c).map(|i| (i as f32 * 0.37).sin()).collect();
    let (mh, mw) = (h * mask_scale, w * mask_scale);
    let mut masks = vec![0.0f32; (4 * mh * mw) as usize];
    for r in 0..mh {
        for col in 0..mw {
            // left half front, right half side, first row top
            let view = if r == 0 { 3 } else if col < mw / 2 { 0 } else { 2 };
            masks[(view * mh * mw + r * mw + col) as usize] = 1.0;
        }
    }
    fs::create_dir_all(dir.join("features")).unwrap();
    fs::create_dir_all(dir.join("masks")).unwrap();
    fs::write(dir.join(format!("features/{stem}.bin")), container(&[h, w, c], &features)).unwrap();
    fs::write(dir.join(format!("masks/{stem}.bin")), container(&[4, mh, mw], &masks)).unwrap();
}

#[test]
fn exporter_style_files_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_pair(d, "img_a", 4, 6, 3, 4);
    write_pair(d, "img_b", 4, 6, 3, 4);
    let lines = [
        r#"{"image_id":"img_a","vehicle_id":"v1","camera_id":"c1","split":"query","feature_path":"features/img_a.bin","mask_path":"masks/img_a.bin"}"#,
        r#"{"image_id":"img_b","vehicle_id":"v1","camera_id":"c2","split":"gallery","feature_path":"features/img_b.bin","mask_path":"masks/img_b.bin"}"#,
    ];
    fs::write(d.join("manifest.jsonl"), lines.join("\n") + "\n").unwrap();

    let manifest = read_manifest(d.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.len(), 2);
    assert_eq!(manifest.split(Split::Query).count(), 1);
    for r in manifest.records() {
        let f = read_feature_map(manifest.resolve(&r.feature_path)).unwrap();
        let full = read_masks(manifest.resolve(&r.mask_path)).unwrap();
        let m = downsample_masks(&full, f.height(), f.width()).unwrap();
        validate_pair(&f, &m).unwrap();
        let vis = visibility_scores(&m);
        // Block max on the 4x6 grid: the top band covers only part of the
        // first block row, so front and side keep all 4 rows of 3 columns.
        assert_eq!(vis, [12.0, 0.0, 12.0, 6.0]);
    }
}

#[test]
fn header_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.bin");

    let mut bytes = container(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    fs::write(&p, &bytes).unwrap();
    assert_eq!(read_tensor(&p).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);

    bytes[4] = 2;
    fs::write(&p, &bytes).unwrap();
    assert!(matches!(read_tensor(&p), Err(Error::UnsupportedVersion(2))));

    bytes[4] = 1;
    bytes[5] = 2;
    fs::write(&p, &bytes).unwrap();
    assert!(matches!(read_tensor(&p), Err(Error::UnsupportedDtype(2))));

    bytes[5] = 1;
    fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    match read_tensor(&p) {
        Err(Error::TruncatedPayload { expected, actual }) => assert_eq!((expected, actual), (16, 13)),
        other => panic!("{other:?}"),
    }

    fs::write(&p, b"PVE").unwrap();
    assert!(read_tensor(&p).is_err());
}

#[test]
fn manifest_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.jsonl");
    let good = r#"{"image_id":"a","vehicle_id":"v","camera_id":"c","split":"train","feature_path":"f","mask_path":"m"}"#;
    let bad = r#"{"image_id":"b","vehicle_id":"v","camera_id":"c","split":"validation","feature_path":"f","mask_path":"m"}"#;
    fs::write(&p, format!("{good}\n{bad}\n")).unwrap();
    assert!(matches!(read_manifest(&p), Err(Error::ParseError { line: 2, .. })));
    fs::write(&p, format!("{good}\n{good}\n")).unwrap();
    match read_manifest(&p) {
        Err(Error::DuplicateImageId(id)) => assert_eq!(id, "a"),
        other => panic!("{other:?}"),
    }
}
