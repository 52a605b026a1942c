//! The dataset under fixtures/ must stay in sync with the generator.
//! Regenerate with `cogedit fixtures --n 8 --seed 7 --out fixtures/remove-shapes`.

use std::path::{Path, PathBuf};

use cogedit_core::eval::load_dataset;
use cogedit_core::mocks::fixtures::make_fixture_dataset;
use cogedit_core::mocks::MockScenario;

fn checked_in() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/remove-shapes")
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "images", "masks"] {
        let dir = root.join(sub);
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_file() {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn checked_in_dataset_matches_generator() {
    let tmp = tempfile::tempdir().unwrap();
    make_fixture_dataset(8, 7, tmp.path()).unwrap();
    let want = files(tmp.path());
    let got = files(&checked_in());
    assert_eq!(
        got.iter().map(|f| &f.0).collect::<Vec<_>>(),
        want.iter().map(|f| &f.0).collect::<Vec<_>>()
    );
    for ((name, a), (_, b)) in got.iter().zip(&want) {
        assert!(a == b, "{name} is stale");
    }
}

#[test]
fn checked_in_dataset_loads() {
    let samples = load_dataset(&checked_in()).unwrap();
    assert_eq!(samples.len(), 8);
    MockScenario::load(&checked_in().join("scenario.json")).unwrap();
}
