//! Checked-in DICOM fixtures match their definitions. Set `UPDATE_FIXTURES=1`
//! to rewrite them.

mod common;

use scopeformer::data::{parse_dicom_lite, DataError};

use common::{fixture_dir, fixtures, Expect};

#[test]
fn fixtures_match_definitions() {
    let dir = fixture_dir();
    let update = std::env::var_os("UPDATE_FIXTURES").is_some();
    for f in fixtures() {
        let path = dir.join(f.file);
        if update {
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(&path, &f.bytes).unwrap();
        }
        let on_disk = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}; run with UPDATE_FIXTURES=1", path.display()));
        assert_eq!(on_disk, f.bytes, "{} differs from its definition", f.file);
    }
}

#[test]
fn fixtures_parse_as_expected() {
    for f in fixtures() {
        let got = parse_dicom_lite(&f.bytes, "fixture");
        match (&f.expect, got) {
            (Expect::Slice(want), Ok(s)) => assert_eq!(&s, want, "{}", f.file),
            (Expect::UnsupportedFormat, Err(DataError::UnsupportedFormat(_))) => {}
            (Expect::Unsupported, Err(DataError::Unsupported(_))) => {}
            (Expect::Corrupt, Err(DataError::Corrupt { offset, needed, available, .. })) => {
                assert!(needed > available, "{}", f.file);
                assert!(offset > 132 && offset < f.bytes.len(), "{}", f.file);
            }
            (_, other) => panic!("{}: unexpected {other:?}", f.file),
        }
    }
}

#[test]
fn basic_fixture_hounsfield_values() {
    let bytes = std::fs::read(fixture_dir().join("ct_2x2_basic.dcm")).unwrap();
    let s = parse_dicom_lite(&bytes, "fixture").unwrap();
    assert_eq!((s.rows, s.cols), (2, 2));
    assert_eq!(s.pixel_values, vec![0, 100, 200, 300]);
    let hu: Vec<f64> = (0..4).map(|i| s.hu(i)).collect();
    assert_eq!(hu, vec![-1024.0, -924.0, -824.0, -724.0]);
    assert!(!s.rescale_defaulted);
}
