use pidp_core::pipeline::{
    account_traces, compose_traces, records_from_runs, ComposeTraceOptions, TraceDirection,
};
use pidp_core::simulator::{
    multi_run, resume_run, synth_dataset, train_run, Checkpoint, ModelKind, SynthSpec, TargetKind,
    TrainerConfig,
};
use pidp_core::trace_io::{read_records, read_trace, write_records, write_trace, StepLabel};

fn setup() -> (pidp_core::simulator::Dataset, TrainerConfig) {
    let spec = SynthSpec {
        points_per_cluster: 50,
        outliers: 1,
        target: TargetKind::Duplicate,
        ..SynthSpec::default()
    };
    let data = synth_dataset(&spec, 3).unwrap();
    let cfg = TrainerConfig {
        expected_batch: 16,
        steps: 15,
        checkpoint_every: 5,
        model: ModelKind::Mlp { hidden: 6 },
        seed: 4,
        ..TrainerConfig::default()
    };
    (data, cfg)
}

#[test]
fn parallel_runs_match_sequential_runs() {
    let (data, cfg) = setup();
    let tracked = vec![data.target().unwrap().clone()];
    let par = multi_run(&data, &cfg, &tracked, 4, 100, "x-");
    for (r, run) in par.into_iter().enumerate() {
        let run = run.unwrap();
        let seq = train_run(&data, &cfg, &tracked, &run.run_id, run.run_seed).unwrap();
        assert_eq!(run.run_seed, 100 + r as u64);
        assert_eq!(run.records, seq.records);
        assert_eq!(run.final_parameters, seq.final_parameters);
    }
}

#[test]
fn resume_from_reloaded_checkpoint() {
    let (data, cfg) = setup();
    let tracked = vec![data.point("outlier-0").unwrap().clone()];
    let full = train_run(&data, &cfg, &tracked, "r", 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.jsonl");
    write_records(&full.checkpoints, &path).unwrap();
    let back: Vec<Checkpoint> = read_records(&path).unwrap();
    assert_eq!(back, full.checkpoints);
    let mid = back.iter().find(|c| c.step == 10).unwrap();
    let resumed = resume_run(&data, &cfg, &tracked, mid).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&resumed.final_parameters), bits(&full.final_parameters));
    assert_eq!(resumed.records[..], full.records[10..]);
}

#[test]
fn accounting_is_unchanged_by_a_file_round_trip() {
    let (data, cfg) = setup();
    let tracked = vec![data.target().unwrap().clone(), data.points[7].clone()];
    let x = data.without_target();
    let runs: Vec<_> = multi_run(&x, &cfg, &tracked, 3, 10, "x-")
        .into_iter()
        .map(|r| r.unwrap())
        .collect();
    let xp: Vec<_> = multi_run(&data, &cfg, &tracked, 3, 20, "xp-")
        .into_iter()
        .map(|r| r.unwrap())
        .collect();
    let fwd = records_from_runs(&runs, &cfg);
    let rev = records_from_runs(&xp, &cfg);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    write_trace(&fwd, &path).unwrap();
    let fwd_back = read_trace(&path).unwrap();
    assert_eq!(fwd_back, fwd);

    let rows = account_traces(&fwd, 8).unwrap();
    assert_eq!(rows, account_traces(&fwd_back, 8).unwrap());
    assert_eq!(rows.len(), 2 * cfg.steps);
    assert!(rows.iter().all(|r| r.eps_ours <= r.eps_baseline));

    let opts = ComposeTraceOptions {
        direction: TraceDirection::Max,
        ..ComposeTraceOptions::default()
    };
    let comps = compose_traces(&fwd_back, Some(&rev), &opts).unwrap();
    assert_eq!(comps.len(), 2);
    for c in &comps {
        let rows = c.rows();
        let total = rows.iter().find(|r| r.step == StepLabel::Total).unwrap();
        let steps: f64 = rows
            .iter()
            .filter(|r| r.step != StepLabel::Total)
            .map(|r| r.eps_ours)
            .sum();
        assert!((total.eps_ours - steps).abs() <= 1e-9 * total.eps_ours.max(1.0));
        assert!(total.eps_ours <= c.baseline_total * (1.0 + 1e-12));
    }
}
