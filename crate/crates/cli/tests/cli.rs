use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cmpfcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmpfcn")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cmpfcn(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_layout(dir: &Path) -> PathBuf {
    let mut text = String::from("CMPRECT 1\nDIE 64 64\n# pads\n");
    for (i, (x, y)) in [(2, 3), (20, 5), (40, 30), (8, 44), (30, 18), (50, 52)].iter().enumerate() {
        let side = 6 + 3 * i as i64;
        text.push_str(&format!("{x} {y} {} {}\n", (x + side).min(64), (y + side / 2 + 2).min(64)));
    }
    let path = dir.join("die.cmprect");
    fs::write(&path, text).unwrap();
    path
}

/// Run the whole pipeline into `dir` and return the primary outputs' bytes.
fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let layout = write_layout(dir);
    let raster = dir.join("raster.cmpg");
    let heights = dir.join("heights.cmpg");
    let data = dir.join("data");
    let model = dir.join("model");
    let pred = dir.join("pred.cmpg");
    let metrics = dir.join("metrics.csv");
    let grid_metrics = dir.join("grid_metrics.csv");
    let xsec = dir.join("xsec.csv");

    ok(&["rasterize", "--layout", s(&layout), "--pitch", "1", "--out", s(&raster)]);
    ok(&["synth", "--raster", s(&raster), "--out", s(&heights), "--sigma", "3"]);
    ok(&[
        "dataset",
        "--raster",
        s(&raster),
        "--heights",
        s(&heights),
        "--out",
        s(&data),
        "--frame",
        "16",
        "--stride",
        "16",
    ]);
    ok(&["train", "--dataset", s(&data), "--out", s(&model), "--depth", "2", "--base-channels", "2", "--epochs", "2"]);
    let ckpt = model.join("best.cmpw");
    let summary = ok(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--out", s(&metrics)]);
    let line = String::from_utf8(summary.stdout).unwrap();
    assert!(line.starts_with("L1=") && line.contains("nm RMSE=") && line.contains(" n=24 t_inf="), "{line}");
    ok(&["predict", "--checkpoint", s(&ckpt), "--raster", s(&raster), "--out", s(&pred), "--mode", "full"]);
    ok(&["eval", "--pred", s(&pred), "--truth", s(&heights), "--out", s(&grid_metrics)]);
    ok(&["xsec", "--pred", s(&pred), "--truth", s(&heights), "--row", "10", "--out", s(&xsec)]);

    for p in [&raster, &heights, &pred, &metrics, &xsec] {
        assert!(fs::metadata(format!("{}.manifest.txt", p.display())).is_ok(), "manifest for {}", p.display());
    }
    assert!(data.join("run_manifest.txt").exists() && model.join("run_manifest.txt").exists());
    assert!(fs::read_to_string(dir.join("oracle.txt")).unwrap().contains("planarization_sigma 3"));
    assert!(fs::read_to_string(&xsec).unwrap().starts_with("x_nm,height_nm,height2_nm\n"));
    assert!(fs::read_to_string(&metrics).unwrap().starts_with("sample,l1_nm,rmse_nm\n"));

    let files = vec![
        ("raster", fs::read(&raster).unwrap()),
        ("heights", fs::read(&heights).unwrap()),
        ("manifest", fs::read(data.join("manifest.txt")).unwrap()),
        ("sample", fs::read(data.join("sample_00003_5_out.cmpg")).unwrap()),
        ("history", fs::read(model.join("history.csv")).unwrap()),
        ("checkpoint", fs::read(&ckpt).unwrap()),
        ("metrics", fs::read(&metrics).unwrap()),
        ("pred", fs::read(&pred).unwrap()),
        ("xsec", fs::read(&xsec).unwrap()),
    ];
    files.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[test]
fn end_to_end_pipeline_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn missing_pitch_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let layout = write_layout(dir.path());
    let out = cmpfcn(&["rasterize", "--layout", s(&layout), "--out", s(&dir.path().join("r.cmpg"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_pitch_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let layout = write_layout(dir.path());
    let out = cmpfcn(&["rasterize", "--layout", s(&layout), "--pitch", "0", "--out", s(&dir.path().join("r.cmpg"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--pitch"));
}

#[test]
fn layout_errors_report_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let layout = dir.path().join("bad.cmprect");
    fs::write(&layout, "CMPRECT 1\nDIE 10 10\n0 0 4 4\n1 1 z 3\n").unwrap();
    let out = cmpfcn(&["rasterize", "--layout", s(&layout), "--pitch", "1", "--out", s(&dir.path().join("r.cmpg"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.cmprect:4:") && err.contains("non-integer coordinate"), "{err}");
}

#[test]
fn mismatched_eval_grids_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let layout = write_layout(dir.path());
    let (a, b) = (dir.path().join("a.cmpg"), dir.path().join("b.cmpg"));
    ok(&["rasterize", "--layout", s(&layout), "--pitch", "1", "--out", s(&a)]);
    ok(&["rasterize", "--layout", s(&layout), "--pitch", "2", "--out", s(&b)]);
    let out = cmpfcn(&["eval", "--pred", s(&a), "--truth", s(&b), "--out", s(&dir.path().join("m.csv"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn corrupt_grid_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cmpg");
    fs::write(&bad, b"XMPG0000").unwrap();
    let out = cmpfcn(&["synth", "--raster", s(&bad), "--out", s(&dir.path().join("h.cmpg"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not a CMPG file"));
}

#[test]
fn help_lists_defaults() {
    let train = String::from_utf8(ok(&["train", "--help"]).stdout).unwrap();
    for d in
        ["[default: 150]", "[default: 20]", "[default: 16]", "[default: 0.001]", "[default: 0.999]", "[default: adam]"]
    {
        assert!(train.contains(d), "train --help lacks {d}");
    }
    let synth = String::from_utf8(ok(&["synth", "--help"]).stdout).unwrap();
    for d in ["[default: 8]", "[default: 40]", "[default: 3]", "[default: 0.5]", "[default: 42]"] {
        assert!(synth.contains(d), "synth --help lacks {d}");
    }
    let dataset = String::from_utf8(ok(&["dataset", "--help"]).stdout).unwrap();
    for d in ["[default: 128]", "[default: 0.2]", "[default: 5]"] {
        assert!(dataset.contains(d), "dataset --help lacks {d}");
    }
}

#[test]
fn eval_without_a_source_is_a_usage_error() {
    let out = cmpfcn(&["eval"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn non_finite_training_exits_4() {
    use cmpfcn::persistence::{load_grid, save_grid, GridDtype};
    let dir = tempfile::tempdir().unwrap();
    let layout = write_layout(dir.path());
    let raster = dir.path().join("raster.cmpg");
    let heights = dir.path().join("heights.cmpg");
    ok(&["rasterize", "--layout", s(&layout), "--pitch", "1", "--out", s(&raster)]);
    ok(&["synth", "--raster", s(&raster), "--out", s(&heights)]);
    let data = dir.path().join("data");
    ok(&[
        "dataset",
        "--raster",
        s(&raster),
        "--heights",
        s(&heights),
        "--out",
        s(&data),
        "--frame",
        "16",
        "--stride",
        "16",
    ]);
    // A corrupted sample that still parses: base 0 lands in one split or the other.
    for aug in 0..8 {
        let path = data.join(format!("sample_00000_{aug}_out.cmpg"));
        let mut g = load_grid(&path).unwrap();
        g.values_mut()[0] = f64::NAN;
        save_grid(&g, GridDtype::F32, &path).unwrap();
    }
    let out = cmpfcn(&[
        "train",
        "--dataset",
        s(&data),
        "--out",
        s(&dir.path().join("m")),
        "--depth",
        "2",
        "--base-channels",
        "2",
        "--epochs",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite loss"));
}
