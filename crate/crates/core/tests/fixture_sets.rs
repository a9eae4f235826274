//! The checked-in fixture bundles must be exactly what the generators
//! produce. Set `XFR_REGENERATE_FIXTURES=1` to rewrite them.

mod common;

use std::fs;
use std::path::Path;

use xfr_core::bundle::read_bundle;
use xfr_core::eval::list_bundles;

fn assert_same_sets(expected: &Path, actual: &Path) {
    let want = list_bundles(expected).unwrap();
    let got = list_bundles(actual).unwrap();
    let ids = |v: &[(String, std::path::PathBuf)]| v.iter().map(|b| b.0.clone()).collect::<Vec<_>>();
    assert_eq!(ids(&want), ids(&got));
    for ((id, w), (_, g)) in want.iter().zip(&got) {
        assert_eq!(read_bundle(w).unwrap(), read_bundle(g).unwrap(), "bundle {id}");
        for file in ["manifest.json", "feature_maps.f32", "head_weights.f32"] {
            assert_eq!(fs::read(w.join(file)).unwrap(), fs::read(g.join(file)).unwrap(), "{id}/{file}");
        }
    }
}

#[test]
fn checked_in_fixtures_match_generators() {
    let root = common::fixtures_dir();
    if std::env::var_os("XFR_REGENERATE_FIXTURES").is_some() {
        let _ = fs::remove_dir_all(&root);
        common::write_fixtures(&root);
    }
    let fresh = tempfile::tempdir().unwrap();
    common::write_fixtures(fresh.path());
    for set in ["mock8", "ranked", "model8"] {
        assert_same_sets(&root.join(set), &fresh.path().join(set));
    }
}

#[test]
fn mock_set_covers_both_predictions() {
    let predicted: Vec<usize> = common::mock_set().iter().map(|(_, b)| b.predicted_class).collect();
    assert!(predicted.contains(&0));
    assert!(predicted.contains(&1));
}
