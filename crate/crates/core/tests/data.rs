use std::fs;

use patchdiff::data::{encode_pnm, load_pnm_dir, parse_pnm, DatasetSpec};
use patchdiff::Tensor;

#[test]
fn pnm_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for (class, vals) in [("a", [-1.0, 1.0, 0.0, 1.0]), ("b", [1.0, -1.0, -1.0, 1.0])] {
        fs::create_dir(dir.path().join(class)).unwrap();
        let img = Tensor::new(&[2, 2, 1], vals.to_vec()).unwrap();
        fs::write(dir.path().join(class).join("x.pgm"), encode_pnm(&img).unwrap()).unwrap();
    }
    let ds = load_pnm_dir(dir.path()).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.labels(), Some(&[0, 1][..]));
    assert_eq!(ds.example(0)[1], 1.0);
    assert_eq!(ds.example(1)[0], 1.0);
}

#[test]
fn malformed_pnm_reports_path() {
    let err = parse_pnm(b"P6\n2 2\n255\n\x00\x01", "broken.ppm".as_ref()).unwrap_err();
    assert!(err.to_string().contains("broken.ppm"), "{err}");
}

#[test]
fn idx_spec_loads_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
    images.extend([0, 255, 255, 0, 128, 128, 128, 128]);
    let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
    fs::write(dir.path().join("img.idx"), images).unwrap();
    fs::write(dir.path().join("lab.idx"), labels).unwrap();
    let spec = format!(
        "idx:{}:{}",
        dir.path().join("img.idx").display(),
        dir.path().join("lab.idx").display()
    );
    let ds = DatasetSpec::parse(&spec).unwrap().load().unwrap();
    assert_eq!(ds.item_shape(), &[2, 2, 1]);
    assert_eq!(ds.example(0), &[-1.0, 1.0, 1.0, -1.0]);
    assert_eq!(ds.label(1), Some(3));
}

#[test]
fn spec_parse_errors() {
    for bad in ["", "ppm:", "toy:3", "two_point:x", "nope:1"] {
        assert!(DatasetSpec::parse(bad).is_err(), "{bad:?} parsed");
    }
}
