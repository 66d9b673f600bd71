//! Runner-level integration: determinism, checkpoint round-trips through a
//! live agent, and the transfer protocol at desk scale.

use moore::envs::ScMdpSuite;
use moore::expman::*;
use moore::numkit::Tape;

fn tiny_grid_cfg(suite: &str, steps: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults_for(suite).unwrap();
    cfg.arch.conv_channels = vec![4, 6];
    cfg.arch.head_hidden = vec![8];
    cfg.total_steps = steps;
    cfg.steps_per_epoch = 200;
    cfg.eval_episodes = 2;
    cfg.k = 2;
    cfg
}

fn tiny_point_cfg(steps: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults_for("point_mt4").unwrap();
    cfg.arch.dense_units = vec![12, 8];
    cfg.total_steps = steps;
    cfg.steps_per_epoch = 100;
    cfg.eval_episodes = 2;
    cfg.k = 2;
    cfg.sac.exploration_steps = 50;
    cfg
}

#[test]
fn identical_config_and_seed_reproduce_metrics_bitwise() {
    let cfg = tiny_grid_cfg("grid_mt3", 1200);
    let dir = tempfile::tempdir().unwrap();
    let a = run_training(&cfg, 3, &dir.path().join("a"), EarlyStop::None).unwrap();
    let b = run_training(&cfg, 3, &dir.path().join("b"), EarlyStop::None).unwrap();
    let bytes_a = std::fs::read(&a.metrics_path).unwrap();
    let bytes_b = std::fs::read(&b.metrics_path).unwrap();
    assert!(!bytes_a.is_empty());
    assert_eq!(bytes_a, bytes_b);
}

#[test]
fn budget_zero_leaves_only_the_step_zero_evaluation() {
    let cfg = tiny_grid_cfg("grid_mt3", 0);
    let dir = tempfile::tempdir().unwrap();
    let art = run_training(&cfg, 0, dir.path(), EarlyStop::None).unwrap();
    assert_eq!(art.records.len(), 1);
    assert_eq!(art.records[0].step, 0);
}

#[test]
fn averaged_metrics_equal_task_means_at_every_evaluation() {
    let cfg = tiny_grid_cfg("grid_mt3", 600);
    let dir = tempfile::tempdir().unwrap();
    let art = run_training(&cfg, 1, dir.path(), EarlyStop::None).unwrap();
    for r in &art.records {
        let want: f64 = r.per_task_return.iter().sum::<f64>() / r.per_task_return.len() as f64;
        assert_eq!(r.avg_return, want);
    }
}

#[test]
fn checkpoint_round_trip_reproduces_forward_outputs_bitwise() {
    let cfg = tiny_grid_cfg("grid_mt3", 600);
    let dir = tempfile::tempdir().unwrap();
    let art = run_training(&cfg, 5, dir.path(), EarlyStop::None).unwrap();

    let suite = ScMdpSuite::make(&cfg.suite, 5).unwrap();
    let nets = build_ppo_nets(&cfg, &suite, 5).unwrap();
    let ck = load_checkpoint(&art.checkpoint_path).unwrap();
    let mut named = Vec::new();
    nets.actor.net.named_params("actor", &mut named);
    nets.critic.net.named_params("critic", &mut named);
    ck.load_into(&named).unwrap();

    // a fresh build with the loaded weights matches a fully fresh load
    let nets2 = build_ppo_nets(&cfg, &suite, 5).unwrap();
    let mut named2 = Vec::new();
    nets2.actor.net.named_params("actor", &mut named2);
    nets2.critic.net.named_params("critic", &mut named2);
    ck.load_into(&named2).unwrap();

    let tape = Tape::inference();
    let mut env = suite.make_env(0).unwrap();
    let obs = env.reset(0);
    let t = moore::numkit::Tensor::from_vec(&[1, 3, 7, 7], obs).unwrap();
    let o1 = nets.actor.net.forward(&tape, &t, &[0]).unwrap().to_vec();
    let o2 = nets2.actor.net.forward(&tape, &t, &[0]).unwrap().to_vec();
    assert!(o1.iter().zip(&o2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn cross_config_checkpoint_load_names_the_mismatched_tensor() {
    let cfg = tiny_grid_cfg("grid_mt3", 0);
    let dir = tempfile::tempdir().unwrap();
    let art = run_training(&cfg, 2, dir.path(), EarlyStop::None).unwrap();
    let ck = load_checkpoint(&art.checkpoint_path).unwrap();

    let mut other = cfg.clone();
    other.k = 3; // wrong expert count: task encoder shape differs
    let suite = ScMdpSuite::make(&cfg.suite, 2).unwrap();
    let nets = build_ppo_nets(&other, &suite, 2).unwrap();
    let mut named = Vec::new();
    nets.actor.net.named_params("actor", &mut named);
    let err = ck.load_into(&named).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("task_encoder") || msg.contains("expert"), "{msg}");
}

#[test]
fn sac_runner_completes_and_counts_steps() {
    let cfg = tiny_point_cfg(500);
    let dir = tempfile::tempdir().unwrap();
    let art = run_training(&cfg, 0, dir.path(), EarlyStop::None).unwrap();
    assert!(art.steps_taken >= 500);
    assert!(art.records.len() >= 2);
    // per-task metrics cover the whole suite
    assert_eq!(art.records[0].per_task_return.len(), 4);
}

#[test]
fn transfer_trains_only_novel_tasks_and_freezes_experts() {
    // source: minimal mt3 run
    let src_cfg = tiny_grid_cfg("grid_mt3", 600);
    let dir = tempfile::tempdir().unwrap();
    let src = run_training(&src_cfg, 7, &dir.path().join("src"), EarlyStop::None).unwrap();

    // target: mt5 with the source checkpoint
    let mut tgt_cfg = tiny_grid_cfg("grid_mt5", 600);
    tgt_cfg.transfer_source = Some(src.checkpoint_path.to_string_lossy().into_owned());
    let art = run_transfer(&tgt_cfg, 8, &dir.path().join("tgt"), EarlyStop::None).unwrap();

    // experts bitwise constant across the run
    assert_eq!(art.expert_hash_start, art.expert_hash_end);

    // the transferred experts equal the source checkpoint's experts
    let ck = load_checkpoint(&src.checkpoint_path).unwrap();
    let tgt_ck = load_checkpoint(&art.checkpoint_path).unwrap();
    for (name, shape, data) in ck
        .tensors
        .iter()
        .filter(|(n, _, _)| n.contains(".experts."))
    {
        let (tshape, tdata) = tgt_ck.tensor(name).expect("expert tensor present");
        assert_eq!(tshape, shape.as_slice());
        assert_eq!(tdata, data.as_slice(), "{name} changed during transfer");
    }

    // mt5 minus mt3 is exactly the novel pair, in registry order
    let mt3 = ScMdpSuite::make("grid_mt3", 0).unwrap();
    let mt5 = ScMdpSuite::make("grid_mt5", 0).unwrap();
    let novel: Vec<&str> = mt5
        .task_names()
        .into_iter()
        .filter(|n| !mt3.task_names().contains(n))
        .collect();
    assert_eq!(novel, vec!["door_key", "multi_room"]);
}

#[test]
fn transfer_mt5_to_mt7_trains_the_two_extra_tasks() {
    let mut src_cfg = tiny_grid_cfg("grid_mt5", 600);
    src_cfg.k = 3;
    let dir = tempfile::tempdir().unwrap();
    let src = run_training(&src_cfg, 9, &dir.path().join("src"), EarlyStop::None).unwrap();
    let mut tgt_cfg = tiny_grid_cfg("grid_mt7", 600);
    tgt_cfg.k = 3;
    tgt_cfg.transfer_source = Some(src.checkpoint_path.to_string_lossy().into_owned());
    let art = run_transfer(&tgt_cfg, 10, &dir.path().join("tgt"), EarlyStop::None).unwrap();
    let mt7 = ScMdpSuite::make("grid_mt7", 0).unwrap();
    let names = mt7.task_names();
    let novel: Vec<&str> = art.active_tasks.iter().map(|&t| names[t]).collect();
    assert_eq!(novel, vec!["dist_shift", "simple_crossing"]);
    assert_eq!(art.expert_hash_start, art.expert_hash_end);
}

#[test]
fn transfer_rejects_single_head_and_suite_mismatch() {
    let src_cfg = tiny_grid_cfg("grid_mt3", 0);
    let dir = tempfile::tempdir().unwrap();
    let src = run_training(&src_cfg, 1, &dir.path().join("src"), EarlyStop::None).unwrap();

    let mut bad = tiny_grid_cfg("grid_mt5", 0);
    bad.transfer_source = Some(src.checkpoint_path.to_string_lossy().into_owned());
    bad.head_mode = HeadChoice::Single;
    assert!(bad.validate().is_err());

    // mt7 -> mt5 is not a containment
    let mut src7_cfg = tiny_grid_cfg("grid_mt7", 0);
    src7_cfg.k = 2;
    let src7 = run_training(&src7_cfg, 1, &dir.path().join("src7"), EarlyStop::None).unwrap();
    let mut bad2 = tiny_grid_cfg("grid_mt5", 0);
    bad2.transfer_source = Some(src7.checkpoint_path.to_string_lossy().into_owned());
    let err = run_training(&bad2, 2, &dir.path().join("t2"), EarlyStop::None).unwrap_err();
    assert!(err.to_string().contains("not contained"), "{err}");
}

#[test]
fn sweep_aggregates_mean_and_interval_per_cell() {
    let mut cfg = tiny_grid_cfg("grid_mt3", 400);
    cfg.seeds = vec![0, 1];
    let dir = tempfile::tempdir().unwrap();
    let report = sweep(
        &cfg,
        &SweepAxis::Representation(vec![ReprChoice::Moore, ReprChoice::Moe]),
        dir.path(),
        EarlyStop::None,
    )
    .unwrap();
    // 2 cells x 2 seeds
    assert_eq!(report.runs.len(), 4);
    let cells: std::collections::BTreeSet<&str> =
        report.rows.iter().map(|r| r.cell.as_str()).collect();
    assert_eq!(cells.len(), 2);
    assert!(report.csv_path.exists());
    let csv = std::fs::read_to_string(&report.csv_path).unwrap();
    assert!(csv.starts_with("cell,step,mean,ci95_lo,ci95_hi"));
    let table = comparison_table(&report);
    assert!(table.contains("representation=moore") && table.contains("representation=moe"));
}

#[test]
fn permutation_sweep_builds_k_cells() {
    let mut cfg = tiny_grid_cfg("grid_mt3", 0);
    cfg.k = 3;
    cfg.seeds = vec![0];
    let dir = tempfile::tempdir().unwrap();
    let report = sweep(
        &cfg,
        &SweepAxis::Permutation(vec![vec![0, 1, 2], vec![1, 2, 0], vec![2, 0, 1]]),
        dir.path(),
        EarlyStop::None,
    )
    .unwrap();
    assert_eq!(report.runs.len(), 3);
}

#[test]
fn trajectory_dump_has_the_documented_fields() {
    let mut cfg = tiny_grid_cfg("grid_mt3", 0);
    cfg.dump_trajectories = true;
    let dir = tempfile::tempdir().unwrap();
    let art = run_training(&cfg, 4, dir.path(), EarlyStop::None).unwrap();
    let dump_path = dir
        .path()
        .join(format!("{}.trajectories.jsonl", art.run_id));
    let body = std::fs::read_to_string(dump_path).unwrap();
    let first: serde_json::Value = serde_json::from_str(body.lines().next().unwrap()).unwrap();
    for key in ["t", "c", "s_digest", "a", "r", "absorbing", "last"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn strict_gs_mode_flows_into_the_pipeline() {
    let mut cfg = tiny_grid_cfg("grid_mt3", 0);
    cfg.strict_gs = true;
    let suite = ScMdpSuite::make("grid_mt3", 0).unwrap();
    let nets = build_ppo_nets(&cfg, &suite, 0).unwrap();
    assert_eq!(nets.actor.net.gs_mode, moore::mixture::GsMode::Strict);
}
