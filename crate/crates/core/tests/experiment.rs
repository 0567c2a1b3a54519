use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

mod common;

use common::{files_under, tiny_experiment as config};
use meterdiff::experiment::{run_experiment, ExperimentManifest};
use meterdiff::Error;

fn reports(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<(PathBuf, Vec<u8>)> = std::fs::read_dir(dir.join("reports"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (PathBuf::from(p.file_name().unwrap()), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn full_run_is_complete_consistent_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let outcome = run_experiment(&config(&dir, None)).unwrap();
    let m = &outcome.manifest;
    assert_eq!(m.status, "complete");
    assert_eq!(
        m.stages_completed,
        ["preprocess", "train:cvae", "evaluate:cvae", "train:cgan", "evaluate:cgan", "train:diffusion", "evaluate:diffusion", "report"]
    );

    // Every file on disk is listed, and every listed file exists.
    let listed: BTreeSet<String> = m.artifacts.iter().map(|a| a.path.clone()).collect();
    let mut on_disk = files_under(&dir);
    assert!(on_disk.remove("manifest.json"));
    assert_eq!(listed, on_disk);
    for role in [
        "preprocess_summary",
        "eval_report",
        "eval_report_csv",
        "ranking",
        "loss:cvae",
        "epoch_curves:cgan",
        "eval_report:diffusion",
    ] {
        assert!(m.artifact(role).is_some(), "{role}");
    }
    assert_eq!(ExperimentManifest::load(&dir).unwrap(), *m);

    // One epoch-curve row per evaluation: floor(epochs / eval_every).
    for (kind, rows) in [("cvae", 2), ("cgan", 2), ("diffusion", 3)] {
        let text = std::fs::read_to_string(dir.join(format!("curves/{kind}_epoch_curves.csv"))).unwrap();
        assert_eq!(text.lines().count(), rows + 1, "{kind}");
        let loss = std::fs::read_to_string(dir.join(format!("curves/{kind}_loss.csv"))).unwrap();
        let epochs = [("cvae", 5), ("cgan", 50), ("diffusion", 10)].iter().find(|e| e.0 == kind).unwrap().1;
        assert_eq!(loss.lines().count(), epochs + 1, "{kind}");
    }

    let csv = std::fs::read_to_string(dir.join("reports/eval_report.csv")).unwrap();
    for kind in ["cvae", "cgan", "diffusion"] {
        for metric in ["fid", "kl", "rmse", "r2"] {
            assert!(csv.contains(&format!("{kind},overall,{metric},")), "{kind} {metric}");
        }
    }

    // Same directory again, then a different directory: identical reports.
    let first = reports(&dir);
    run_experiment(&config(&dir, None)).unwrap();
    assert_eq!(reports(&dir), first);
    let other = tmp.path().join("elsewhere");
    run_experiment(&config(&other, None)).unwrap();
    assert_eq!(reports(&other), first);
    assert_eq!(
        std::fs::read(dir.join("curves/diffusion_epoch_curves.csv")).unwrap(),
        std::fs::read(other.join("curves/diffusion_epoch_curves.csv")).unwrap()
    );
}

#[test]
fn failing_stage_leaves_a_usable_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let err = run_experiment(&config(&dir, Some(1e30))).unwrap_err();
    assert!(err.to_string().contains("train:diffusion"), "{err}");

    let m = ExperimentManifest::load(&dir).unwrap();
    assert_eq!(m.status, "failed");
    assert_eq!(m.failed_stage.as_deref(), Some("train:diffusion"));
    assert!(m.error.as_deref().is_some_and(|e| e.contains("non-finite")), "{:?}", m.error);
    assert_eq!(m.stages_completed.last().map(String::as_str), Some("evaluate:cgan"));
    for a in &m.artifacts {
        assert!(dir.join(&a.path).is_file(), "{}", a.path);
    }
    assert!(m.artifact("eval_report:cvae").is_some());
    assert!(m.artifact("eval_report:diffusion").is_none());

    // A rerun with a sane config replaces the partial run.
    let ok = run_experiment(&config(&dir, None)).unwrap();
    assert_eq!(ok.manifest.status, "complete");
    assert_eq!(ExperimentManifest::load(&dir).unwrap().failed_stage, None);
}

#[test]
fn foreign_output_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("precious.txt"), "keep me").unwrap();
    let err = run_experiment(&config(tmp.path(), None)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(tmp.path().join("precious.txt").is_file());
}
