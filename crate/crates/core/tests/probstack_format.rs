//! Stacks written by hand, byte by byte, the way an external training
//! script would produce them.

use std::path::Path;

use histosynth::uq::decompose;
use histosynth::{Error, ProbStack};

fn write_raw(dir: &Path, stem: &str, header: &str, values: &[f32]) {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(dir.join(format!("{stem}_probs.bin")), bytes).unwrap();
    std::fs::write(dir.join(format!("{stem}_probs.json")), header).unwrap();
}

#[test]
fn reads_member_major_little_endian_floats() {
    let dir = tempfile::tempdir().unwrap();
    // T=2, C=2, H=1, W=2; layout is [t][c][h][w]
    let values = [0.8f32, 0.1, 0.2, 0.9, 0.6, 0.3, 0.4, 0.7];
    write_raw(
        dir.path(),
        "a",
        r#"{"T": 2, "C": 2, "H": 1, "W": 2, "class_names": ["bg", "fg"], "source_tag": "external"}"#,
        &values,
    );
    let s = ProbStack::read(dir.path(), "a").unwrap();
    assert_eq!((s.members, s.classes, s.height, s.width), (2, 2, 1, 2));
    assert_eq!(s.source_tag, "external");
    assert_eq!(s.at(0, 0, 0), 0.8);
    assert_eq!(s.at(0, 1, 1), 0.9);
    assert_eq!(s.at(1, 0, 1), 0.3);
    assert_eq!(s.at(1, 1, 0), 0.4);

    // pixel 0 holds members (0.8, 0.2) and (0.6, 0.4)
    let u = decompose(&s).unwrap();
    assert!((u.pu[0] - 0.6109).abs() < 1e-3);
    assert!((u.au[0] - 0.5867).abs() < 1e-3);
    assert!((u.eu[0] - 0.0242).abs() < 1e-3);
}

#[test]
fn written_bytes_match_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let data = vec![0.25f32, 0.5, 0.75, 0.5, 0.5, 0.25];
    let s = ProbStack::new(1, 2, 1, 3, data.clone(), vec!["a".into(), "b".into()], "t").unwrap();
    s.write(dir.path(), "b").unwrap();
    let bytes = std::fs::read(dir.path().join("b_probs.bin")).unwrap();
    assert_eq!(bytes.len(), 4 * 6);
    assert_eq!(&bytes[4..8], &0.5f32.to_le_bytes());
    let header: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("b_probs.json")).unwrap()).unwrap();
    assert_eq!(header["T"], 1);
    assert_eq!(header["C"], 2);
    assert_eq!(header["H"], 1);
    assert_eq!(header["W"], 3);
    assert_eq!(header["class_names"], serde_json::json!(["a", "b"]));
}

#[test]
fn short_binary_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write_raw(
        dir.path(),
        "c",
        r#"{"T": 2, "C": 2, "H": 2, "W": 2, "class_names": ["bg", "fg"], "source_tag": "x"}"#,
        &[0.5; 7],
    );
    let err = ProbStack::read(dir.path(), "c").unwrap_err();
    assert!(err.to_string().contains("c_probs.bin"), "{err}");
}

#[test]
fn off_simplex_pixel_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_raw(
        dir.path(),
        "d",
        r#"{"T": 1, "C": 2, "H": 1, "W": 2, "class_names": ["bg", "fg"], "source_tag": "x"}"#,
        &[0.5, 0.9, 0.5, 0.9],
    );
    match ProbStack::read(dir.path(), "d") {
        Err(Error::InFile { source, .. }) => assert!(!matches!(*source, Error::InFile { .. })),
        other => panic!("expected a file-scoped error, got {other:?}"),
    }
}
