//! CLI runs against the stored checkpoints and the real MNIST files in `data/`.

mod common;

use std::path::{Path, PathBuf};

use morphscope_cli::commands::Sidecar;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn data_dir() -> PathBuf {
    std::env::var_os("MORPHSCOPE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("data"))
}

fn explain(args: &[&str], out: &Path) -> Sidecar {
    let mut full = vec!["explain", "--dataset", "mnist", "--index", "1242", "--out", out.to_str().unwrap()];
    full.extend_from_slice(args);
    let res = common::run(&full, &data_dir(), &workspace().join("fixtures/checkpoints"));
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    serde_json::from_slice(&std::fs::read(out.with_extension("json")).unwrap()).unwrap()
}

#[test]
fn digit_four_grid_shows_both_classes() {
    let dir = tempfile::tempdir().unwrap();
    let side = explain(&["--kind", "grid_2d", "--dims", "0,1"], &dir.path().join("grid.png"));
    assert_eq!((side.poi.true_label, side.poi.predicted_label), (4, 9));
    let labels = &side.neighborhood.labels;
    assert_eq!(labels.len(), 81);
    assert!(labels.contains(&4) && labels.contains(&9), "{labels:?}");
    assert!(!side.neighborhood.boundary_edges.is_empty());
}

#[test]
fn one_step_path_has_three_tiles() {
    let dir = tempfile::tempdir().unwrap();
    let side = explain(&["--kind", "path_1d", "--dims", "3", "--count", "1"], &dir.path().join("p.png"));
    assert_eq!(side.neighborhood.labels.len(), 3);
    let montage = image::open(dir.path().join("p.png")).unwrap();
    let expected_width = morphscope_core::render::GAP + 3 * (morphscope_core::render::tile_size(2) + morphscope_core::render::GAP);
    assert_eq!(montage.width(), expected_width);
}
