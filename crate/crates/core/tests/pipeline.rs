//! Pipeline orchestration on a deliberately tiny configuration.

use std::path::{Path, PathBuf};

use duoseg_core::experiment::{run_pipeline, ExperimentConfig, PipelineStage as S, Report, RunDir};
use duoseg_core::io::{Checkpoint, DatasetManifest, Provenance};
use duoseg_core::segmentation::{SegTask, Variant};
use duoseg_core::Error;

fn tiny() -> ExperimentConfig {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let mut c = ExperimentConfig::load(&p).unwrap();
    c.name = "tiny".into();
    c.phantom.count = 5;
    c.phantom.splits.train = 3;
    c.phantom.splits.val = 1;
    c.phantom.splits.test = 1;
    c.label_vae.schedule.epochs = 3;
    c.image_vae.schedule.epochs = 3;
    c.label_diffusion.schedule.epochs = 3;
    c.image_diffusion.schedule.epochs = 3;
    c.controlnet.schedule.epochs = 3;
    c.segmentation.variants = vec![Variant::Unet];
    c.segmentation.tasks = vec![SegTask::LiverOnly];
    c.segmentation.schedule.epochs = 1;
    c.validate().unwrap();
    c
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn seg_mixed_without_generate_is_a_dependency_error() {
    let tmp = tempfile::tempdir().unwrap();
    let c = tiny();
    run_pipeline(&c, &[S::Phantom, S::SegReal], tmp.path()).unwrap();
    let err = run_pipeline(&c, &[S::SegMixed], tmp.path()).unwrap_err();
    match err {
        Error::MissingDependency { stage, missing } => {
            assert_eq!(stage, "seg_mixed");
            assert!(missing.contains("generate"), "{missing}");
        }
        other => panic!("expected a dependency error, got {other}"),
    }
    assert!(!RunDir::new(tmp.path()).artifact(S::SegMixed).exists());
}

#[test]
fn full_run_is_resumable_and_traceable() {
    let tmp = tempfile::tempdir().unwrap();
    let c = tiny();
    let first = run_pipeline(&c, &S::ALL, tmp.path()).unwrap();
    assert_eq!(first.executed, S::ALL.to_vec());
    let dir = RunDir::new(tmp.path());
    let report_path = dir.artifact(S::Report);
    let report_bytes = read(&report_path);

    // Rerun: nothing executes, artifacts untouched.
    let again = run_pipeline(&c, &S::ALL, tmp.path()).unwrap();
    assert!(again.executed.is_empty());
    assert_eq!(again.skipped, S::ALL.to_vec());
    assert_eq!(read(&report_path), report_bytes);

    // Report parses strictly, validates and renders both tables.
    let report = Report::from_json(std::str::from_utf8(&report_bytes).unwrap()).unwrap();
    report.validate().unwrap();
    let md = report.to_markdown();
    assert!(md.contains("FID (Ax.)") && md.contains("U-Net"), "{md}");
    let mut broken = report.clone();
    broken.overall[0].mixed = (broken.overall[0].mixed + 0.1).min(1.0) - 0.05;
    assert!(broken.validate().is_err());

    // Lineage: every synthetic record names the current generator checkpoints.
    let lineage = dir.generator_checkpoints().unwrap().lineage();
    assert_eq!(lineage.len(), 5);
    assert_eq!(report.metadata.generator_lineage, lineage);
    let synthetic = DatasetManifest::load(&dir.artifact(S::Generate)).unwrap();
    assert_eq!(synthetic.len(), c.synthetic_count());
    for r in &synthetic.records {
        assert_eq!(r.provenance, Provenance::Synthetic);
        assert_eq!(r.lineage, lineage);
    }
    for run in &report.runs {
        let ck = Checkpoint::load(&tmp.path().join(&run.checkpoint)).unwrap();
        assert_eq!(ck.content_hash(), run.checkpoint_hash);
    }
    let real = DatasetManifest::load(&dir.artifact(S::Phantom)).unwrap();
    let seeds: Vec<u64> = real.records.iter().map(|r| r.seed).collect();
    assert_eq!(
        report.metadata.phantom_seeds,
        [*seeds.iter().min().unwrap(), *seeds.iter().max().unwrap()]
    );

    // Changing only segmentation settings reruns segmentation and report.
    let mut c2 = c.clone();
    c2.segmentation.schedule.seed += 1;
    let third = run_pipeline(&c2, &S::ALL, tmp.path()).unwrap();
    assert_eq!(third.executed, vec![S::SegReal, S::SegMixed, S::Report]);
}
