mod common;

use common::{err, ok, write_config, TINY};
use lesion_synth::manifest::{Manifest, Split};
use lesion_synth::core::phantom::CaseRole;

#[test]
fn phantom_presets_dispatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);

    let m = ok(&cfg, &dir.path().join("c"), &["phantom-gen", "--preset", "cardiac"]);
    let m = Manifest::load(&m).unwrap();
    assert_eq!(m.class_names().unwrap(), ["mi", "pmo"]);

    let m = ok(&cfg, &dir.path().join("l"), &["phantom-gen", "--preset", "lung"]);
    let m = Manifest::load(&m).unwrap();
    assert_eq!(m.class_names().unwrap(), ["nodule"]);
    let c = m.load_case(&m.cases[0]).unwrap();
    assert_eq!(c.volume.spatial(), [16, 32, 32]);
    let peaks: std::collections::BTreeSet<_> = m
        .cases
        .iter()
        .filter_map(|r| r.peak_indices.first().copied().flatten())
        .collect();
    assert!(peaks.iter().all(|&p| p < 3));
}

#[test]
fn phantom_gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = Manifest::load(&ok(&cfg, &dir.path().join("a"), &["phantom-gen"])).unwrap();
    let b = Manifest::load(&ok(&cfg, &dir.path().join("b"), &["phantom-gen"])).unwrap();
    assert_eq!(a.hash(), b.hash());
    let ca = a.load_case(&a.cases[2]).unwrap();
    let cb = b.load_case(&b.cases[2]).unwrap();
    assert_eq!(ca.volume, cb.volume);

    let mut other = TINY.replace("seed = 3", "seed = 4");
    other.push('\n');
    let cfg2 = write_config(&dir.path().join("a"), &other);
    let c = Manifest::load(&ok(&cfg2, &dir.path().join("c"), &["phantom-gen"])).unwrap();
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn split_counts_follow_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let m = ok(
        &cfg,
        &dir.path().join("r"),
        &["phantom-gen", "--pathological", "5", "--normal", "2", "--test", "1"],
    );
    let m = Manifest::load(&m).unwrap();
    assert_eq!(m.select(Split::Train, CaseRole::Pathological).len(), 4);
    assert_eq!(m.select(Split::Test, CaseRole::Pathological).len(), 1);
    assert_eq!(m.select(Split::Train, CaseRole::Normal).len(), 2);
}

#[test]
fn unknown_method_lists_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("r");
    ok(&cfg, &out, &["phantom-gen"]);
    let e = err(&cfg, &out, &["train", "--kind", "texture", "--method", "nonsense"]);
    let msg = e["error"].as_str().unwrap();
    assert!(msg.contains("nonsense"), "{msg}");
    for m in ["lefusion", "lefusion_h", "lefusion_j", "repaint"] {
        assert!(msg.contains(m), "{msg}");
    }
}

#[test]
fn usage_and_config_errors_are_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data]\nbogus = 1\n");
    let e = err(&cfg, &dir.path().join("r"), &["phantom-gen"]);
    assert_eq!(e["kind"], "config");

    let cfg = write_config(dir.path(), TINY);
    let e = err(&cfg, &dir.path().join("r"), &["frobnicate"]);
    assert_eq!(e["kind"], "usage");
}

#[test]
fn synth_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("r");
    ok(&cfg, &out, &["phantom-gen"]);
    let e = err(&cfg, &out, &["synth", "--set", "N'", "--method", "lefusion"]);
    assert_eq!(e["kind"], "missing_checkpoint");
}

#[test]
fn lock_rejects_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("r");
    ok(&cfg, &out, &["phantom-gen"]);
    let o = common::run(&cfg, &out, &["--seed", "99", "hist-cluster"]);
    assert!(!o.status.success());
    // Without --config the lock is reused.
    let o = std::process::Command::new(common::bin())
        .arg("--out")
        .arg(&out)
        .arg("hist-cluster")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn copy_paste_and_n_double_prime() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("r");
    let real = Manifest::load(&ok(&cfg, &out, &["phantom-gen"])).unwrap();
    let normals = real.select(Split::Train, CaseRole::Normal).len();

    let p = ok(
        &cfg,
        &out,
        &["synth", "--method", "copy_paste", "--set", "N''", "--multiplier", "2"],
    );
    let m = Manifest::load(&p).unwrap();
    assert_eq!(m.cases.len(), 2 * normals);
    for r in &m.cases {
        let donor = r
            .provenance
            .split("; ")
            .find_map(|s| s.strip_prefix("donor="))
            .unwrap();
        let d = real.load_case(real.get(donor).unwrap()).unwrap();
        let s = m.load_case(r).unwrap();
        assert_eq!(s.masks, d.masks, "{}", r.id);
        let src = real.load_case(real.get(r.source_id.as_deref().unwrap()).unwrap()).unwrap();
        let bg = s.masks.background();
        for [z, y, x] in bg.coords() {
            assert_eq!(s.volume.get(z, y, x, 0), src.volume.get(z, y, x, 0));
        }
    }

    ok(&cfg, &dir.path().join("r2"), &["phantom-gen"]);
    let p2 = ok(
        &cfg,
        &dir.path().join("r2"),
        &["synth", "--method", "copy_paste", "--set", "N''", "--multiplier", "2"],
    );
    assert_eq!(Manifest::load(&p2).unwrap().hash(), m.hash());
}

#[test]
fn eval_requires_test_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("r");
    ok(&cfg, &out, &["phantom-gen", "--pathological", "4", "--test", "0"]);
    // Flags are recorded in config.lock, so later commands run off the lock.
    let o = std::process::Command::new(common::bin())
        .arg("--out")
        .arg(&out)
        .args(["eval", "--setting", "P"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    let e: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert!(e["error"].as_str().unwrap().contains("test split"), "{e}");
}

#[test]
fn full_pipeline_produces_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("r");
    ok(&cfg, &out, &["phantom-gen"]);
    ok(&cfg, &out, &["hist-cluster"]);
    let ck = ok(&cfg, &out, &["train", "--kind", "texture"]);
    assert!(ck.join("weights.bin").exists());
    ok(&cfg, &out, &["train", "--kind", "mask"]);
    ok(&cfg, &out, &["synth", "--set", "N'"]);
    ok(&cfg, &out, &["synth", "--set", "P'"]);
    let reports = ok(&cfg, &out, &["eval"]);

    let seg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(reports.join("segmentation.json")).unwrap())
            .unwrap();
    let rows = seg["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["setting"], "P");
    assert_eq!(rows[1]["setting"], "P+N'");
    for r in rows {
        let d = r["mean_dice"].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&d));
    }

    let q: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(reports.join("quality.json")).unwrap())
            .unwrap();
    let q = q.as_array().unwrap();
    assert!(q.iter().any(|e| e["set"] == "P'" && e["method"] == "lefusion_j"));
    assert!(q.iter().all(|e| e.get("psnr_mean").is_some() && e.get("ssim_mean").is_some()));

    for f in ["diversity.json", "histogram_shift.json", "summary.md", "segmentation.md"] {
        assert!(reports.join(f).exists(), "{f}");
    }
    let figs: Vec<_> = std::fs::read_dir(out.join("figures")).unwrap().collect();
    assert!(!figs.is_empty());
    assert!(out.join("config.lock").exists());
    assert!(out.join("checkpoints/segmenter/P_seed0/weights.bin").exists());

    // report re-renders from the stored JSON without retraining.
    let summary = ok(&cfg, &out, &["report"]);
    assert!(std::fs::read_to_string(summary).unwrap().contains("P+N'"));
}
