mod common;

use common::{run, run_ok, s, small_config, tree, write_config};
use histosynth::config::CellClass;
use histosynth::render::{read_instance, read_semantic};
use histosynth::SceneGraph;

#[test]
fn generate_three_writes_three_sets_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(96));
    let out = dir.path().join("out");
    run_ok(&["generate", "--config", s(&cfg), "--count", "3", "--seed", "7", "--out", s(&out)]);
    let files = tree(&out);
    assert_eq!(files.len(), 3 * 6 + 1);
    for stem in ["img_0000", "img_0001", "img_0002"] {
        for suffix in [".png", "_sem.png", "_inst.png", "_depth.bin", "_meta.json"] {
            assert!(files.contains_key(&format!("{stem}/{stem}{suffix}")), "{stem}{suffix}");
        }
        assert!(files.contains_key(&format!("{stem}/scene.json")));
    }
    let manifest: serde_json::Value = serde_json::from_slice(&files["manifest.json"]).unwrap();
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 18);
    assert_eq!(manifest["seeds"]["base_seed"], 7);
}

#[test]
fn count_zero_writes_only_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    run_ok(&["generate", "--count", "0", "--out", s(&out)]);
    assert_eq!(tree(&out).keys().collect::<Vec<_>>(), vec!["manifest.json"]);
}

#[test]
fn rerun_from_manifest_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(64));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["generate", "--config", s(&cfg), "--count", "2", "--perturb", "kind=blood-stain,level=0.5", "--out", s(&a)]);
    // The config file is not needed any more; the manifest carries it.
    std::fs::remove_file(&cfg).unwrap();
    run_ok(&["rerun", "--manifest", s(&a.join("manifest.json")), "--out", s(&b)]);
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(96));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["--jobs", "1", "generate", "--config", s(&cfg), "--count", "3", "--out", s(&a)]);
    run_ok(&["--jobs", "3", "generate", "--config", s(&cfg), "--count", "3", "--out", s(&b)]);
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn bad_config_fails_without_leaving_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(64);
    cfg.class_ratios.plasma = 0.9;
    let path = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    let r = run(&["generate", "--config", s(&path), "--count", "2", "--out", s(&out)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("class_ratios"));
    assert!(!out.exists());
}

#[test]
fn failed_render_removes_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    std::fs::create_dir_all(out.join("img_0001")).unwrap();
    // A directory where a file must go makes the second scene fail.
    std::fs::create_dir_all(out.join("img_0001/img_0001_depth.bin")).unwrap();
    let cfg = write_config(dir.path(), &small_config(48));
    let r = run(&["generate", "--config", s(&cfg), "--count", "2", "--out", s(&out)]);
    assert!(!r.status.success());
    let left: Vec<String> = tree(&out).into_keys().collect();
    assert!(left.is_empty(), "{left:?}");
}

#[test]
fn environment_supplies_output_root_and_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env-out");
    let st = common::bin()
        .args(["generate", "--count", "0"])
        .env("HISTOSYNTH_OUT", &out)
        .env("HISTOSYNTH_JOBS", "1")
        .status()
        .unwrap();
    assert!(st.success());
    assert!(out.join("manifest.json").is_file());
    let st = common::bin().args(["generate", "--count", "0", "--out", s(&out)]).env("HISTOSYNTH_JOBS", "0").status().unwrap();
    assert!(!st.success());
}

#[test]
fn perturb_levels_and_mask_copies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(64));
    let data = dir.path().join("data");
    run_ok(&["generate", "--config", s(&cfg), "--count", "2", "--out", s(&data)]);
    let out = dir.path().join("pert");
    run_ok(&["perturb", "--dataset", s(&data), "--kind", "nuclei-intensity", "--levels", "0,0.5,1", "--out", s(&out)]);
    let files = tree(&out);
    let images: Vec<_> = files.keys().filter(|k| k.ends_with("/img_0000.png") || k.ends_with("/img_0001.png")).collect();
    assert_eq!(images.len(), 6);
    let orig = tree(&data);
    for stem in ["img_0000", "img_0001"] {
        assert_eq!(files[&format!("level_0.00/{stem}/{stem}.png")], orig[&format!("{stem}/{stem}.png")]);
        for level in ["0.00", "0.50", "1.00"] {
            for m in ["_sem.png", "_inst.png", "_depth.bin"] {
                assert_eq!(files[&format!("level_{level}/{stem}/{stem}{m}")], orig[&format!("{stem}/{stem}{m}")]);
            }
        }
        assert_ne!(files[&format!("level_1.00/{stem}/{stem}.png")], orig[&format!("{stem}/{stem}.png")]);
    }
    // Inputs untouched.
    assert_eq!(orig, tree(&data));
}

#[test]
fn perturb_reports_missing_scene_files_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(48));
    let data = dir.path().join("data");
    run_ok(&["generate", "--config", s(&cfg), "--count", "2", "--out", s(&data)]);
    std::fs::remove_file(data.join("img_0000/scene.json")).unwrap();
    let out = dir.path().join("pert");
    let r = run(&["perturb", "--dataset", s(&data), "--kind", "blood-stain", "--levels", "1", "--out", s(&out)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("img_0000"));
    assert!(out.join("level_1.00/img_0001/img_0001.png").is_file());
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn blood_stain_counts_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(64));
    let data = dir.path().join("data");
    run_ok(&["generate", "--config", s(&cfg), "--count", "1", "--out", s(&data)]);
    let out = dir.path().join("pert");
    run_ok(&["perturb", "--dataset", s(&data), "--kind", "blood-stain", "--levels", "0,0.3", "--out", s(&out)]);
    let count = |p: &std::path::Path| {
        SceneGraph::from_json(&std::fs::read_to_string(p).unwrap()).unwrap().count(CellClass::BloodCell)
    };
    let base = count(&data.join("img_0000/scene.json"));
    assert_eq!(count(&out.join("level_0.30/img_0000/scene.json")), base + 45);
}

#[test]
fn labelnoise_identity_flip_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(128));
    let data = dir.path().join("data");
    run_ok(&["generate", "--config", s(&cfg), "--count", "1", "--out", s(&data)]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run_ok(&["labelnoise", "--gt", s(&data), "--task", "semseg-flip", "--levels", "0,1", "--seed", "3", "--out", s(out)]);
    }
    assert_eq!(tree(&a), tree(&b));
    let orig = tree(&data);
    let noisy = tree(&a);
    assert_eq!(noisy["level_0.00/img_0000/img_0000_sem.png"], orig["img_0000/img_0000_sem.png"]);
    assert_eq!(noisy["level_0.00/img_0000/img_0000_inst.png"], orig["img_0000/img_0000_inst.png"]);
    assert_eq!(noisy["level_1.00/img_0000/img_0000_inst.png"], orig["img_0000/img_0000_inst.png"]);

    let (_, _, sem0) = read_semantic(&data.join("img_0000/img_0000_sem.png")).unwrap();
    let (_, _, sem1) = read_semantic(&a.join("level_1.00/img_0000/img_0000_sem.png")).unwrap();
    let (_, _, inst) = read_instance(&data.join("img_0000/img_0000_inst.png")).unwrap();
    assert!(inst.iter().any(|&v| v != 0));
    for i in 0..inst.len() {
        assert_eq!(sem0[i] == 0, sem1[i] == 0);
        if inst[i] != 0 {
            assert_ne!(sem0[i], sem1[i]);
        }
    }
}

#[test]
fn fgbg_shape_noise_writes_binary_masks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(96));
    let data = dir.path().join("data");
    run_ok(&["generate", "--config", s(&cfg), "--count", "1", "--out", s(&data)]);
    let out = dir.path().join("noisy");
    run_ok(&["labelnoise", "--gt", s(&data), "--task", "fgbg-shape", "--levels", "0.5", "--out", s(&out)]);
    let (_, _, fg) = read_semantic(&out.join("level_0.50/img_0000/img_0000_fgbg.png")).unwrap();
    let (_, _, sem) = read_semantic(&out.join("level_0.50/img_0000/img_0000_sem.png")).unwrap();
    assert!(fg.iter().zip(&sem).all(|(&f, &s)| f == u8::from(s != 0)));
}

#[test]
fn evaluate_jitter_sweep_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(64));
    let data = dir.path().join("data");
    run_ok(&["generate", "--config", s(&cfg), "--count", "2", "--out", s(&data)]);
    let pred = dir.path().join("pred");
    run_ok(&[
        "mockpred", "--gt", s(&data), "--members", "4", "--sweep", "jitter", "--levels", "0,1,3", "--out", s(&pred),
    ]);
    let rep = dir.path().join("rep");
    let out = run_ok(&["evaluate", "--pred", s(&pred), "--gt", s(&data), "--agg", "image-mean", "--out", s(&rep)]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 4);

    let mut reader = csv::Reader::from_path(rep.join("report.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * 3 + 3);
    let means: Vec<f64> = rows.iter().filter(|r| &r[1] == "mean").map(|r| r[7].parse().unwrap()).collect();
    assert_eq!(means.len(), 3);
    assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");

    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(rep.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["levels"].as_array().unwrap().len(), 3);

    let again = dir.path().join("rep2");
    run_ok(&["rerun", "--manifest", s(&rep.join("manifest.json")), "--out", s(&again)]);
    assert_eq!(tree(&rep), tree(&again));
}

#[test]
fn evaluate_rejects_empty_and_unpaired_input() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let r = run(&["evaluate", "--pred", s(&empty), "--gt", s(&empty), "--out", s(&dir.path().join("r"))]);
    assert!(!r.status.success());

    let cfg = write_config(dir.path(), &small_config(32));
    let data = dir.path().join("data");
    run_ok(&["generate", "--config", s(&cfg), "--count", "1", "--out", s(&data)]);
    let pred = dir.path().join("pred");
    run_ok(&["mockpred", "--gt", s(&data), "--members", "2", "--out", s(&pred)]);
    std::fs::copy(pred.join("img_0000_probs.bin"), pred.join("img_0099_probs.bin")).unwrap();
    std::fs::copy(pred.join("img_0000_probs.json"), pred.join("img_0099_probs.json")).unwrap();
    let r = run(&["evaluate", "--pred", s(&pred), "--gt", s(&data), "--out", s(&dir.path().join("r"))]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("img_0099"));
}
