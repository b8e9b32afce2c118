mod common;

use common::checks::{self, Workspace};
use rom_core::checkpoint::Checkpoint;
use rom_core::pipeline;
use rom_core::trainer::{read_rows, MetricsRow, StepRow, METRICS_FILE, STEPS_FILE};

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    checks::determinism(dir.path()).unwrap();
}

#[test]
fn every_phase_steps_with_a_positive_learning_rate() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::tiny(dir.path(), &[("joint.lr_schedule", "constant")]).unwrap();
    let c = ws.with_run("lr");
    let run = c.run_dir();
    pipeline::run_pretrain(&c, &ws.corpus, &run).unwrap();
    pipeline::run_retrieval(&c, &ws.corpus, &ws.data, &run).unwrap();
    pipeline::run_joint(&c, &ws.corpus, &ws.data, &run).unwrap();
    let steps: Vec<StepRow> = read_rows(&run.join(STEPS_FILE)).unwrap();
    for phase in ["pretrain", "retrieval", "joint"] {
        let rows: Vec<&StepRow> = steps.iter().filter(|r| r.phase == phase).collect();
        assert!(!rows.is_empty(), "no {phase} steps");
        assert!(rows.iter().all(|r| r.lr > 0.0), "{phase} took a zero-lr step");
    }
    assert!(steps.windows(2).all(|w| w[1].step == w[0].step + 1));
    let joint: Vec<&StepRow> = steps.iter().filter(|r| r.phase == "joint").collect();
    assert!(joint.iter().all(|r| r.lr == c.joint.lr));
}

#[test]
fn frozen_token_embeddings_survive_the_joint_phase() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::tiny(dir.path(), &[("joint.freeze_embeddings", "true")]).unwrap();
    let c = ws.with_run("freeze");
    let run = c.run_dir();
    pipeline::run_pretrain(&c, &ws.corpus, &run).unwrap();
    pipeline::run_retrieval(&c, &ws.corpus, &ws.data, &run).unwrap();
    pipeline::run_joint(&c, &ws.corpus, &ws.data, &run).unwrap();
    let before = Checkpoint::load(&pipeline::checkpoint_path(&run, "retrieval")).unwrap().params;
    let after = Checkpoint::load(&pipeline::checkpoint_path(&run, "joint")).unwrap().params;
    assert_eq!(before.tok_emb, after.tok_emb);
    assert_ne!(before.w_start, after.w_start);
    assert_ne!(before.pos_emb, after.pos_emb);
}

#[test]
fn joint_log_is_consistent_with_refresh_gating() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::tiny(dir.path(), &[("joint.epochs", "6")]).unwrap();
    let c = ws.with_run("gate");
    let run = c.run_dir();
    pipeline::run_pretrain(&c, &ws.corpus, &run).unwrap();
    pipeline::run_retrieval(&c, &ws.corpus, &ws.data, &run).unwrap();
    let j = pipeline::run_joint(&c, &ws.corpus, &ws.data, &run).unwrap();

    let header = std::fs::read_to_string(run.join(METRICS_FILE)).unwrap();
    assert_eq!(
        header.lines().next().unwrap(),
        "epoch,phase,lambda_retrieval,lambda_reader,loss_total,loss_ict,loss_retrieval,loss_reader,avg_rank,\
         top1,top5,top10,top20,top100,em_dev,refresh_attempted,refresh_accepted,snapshot_version"
    );
    let rows: Vec<MetricsRow> = read_rows(&run.join(METRICS_FILE)).unwrap();
    let joint: Vec<&MetricsRow> = rows.iter().filter(|r| r.phase == "joint").collect();
    assert_eq!(joint.len(), 6);
    assert!(joint.iter().all(|r| r.lambda_retrieval == 0.5 && r.lambda_reader == 0.5));

    let log = &j.state.refresh_log;
    assert_eq!(log.len(), joint.iter().filter(|r| r.refresh_attempted).count());
    assert_eq!(j.accepted_refreshes, joint.iter().filter(|r| r.refresh_accepted).count());
    assert!(joint.iter().all(|r| r.refresh_attempted || !r.refresh_accepted));
    let accepted: Vec<_> = log.iter().filter(|r| r.accepted).collect();
    for w in accepted.windows(2) {
        assert!(w[1].avg_rank < w[0].avg_rank && w[1].topk_acc > w[0].topk_acc);
    }
    let versions: Vec<u64> = joint.iter().map(|r| r.snapshot_version).collect();
    assert!(versions.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(j.state.accepted_snapshot_version, *versions.last().unwrap());
}
