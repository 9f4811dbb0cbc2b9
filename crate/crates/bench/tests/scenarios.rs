use std::io::Write;
use std::process::Command;

use kvtier_bench::workload::WorkloadKind;
use kvtier_bench::{
    generate_workload, report_compare, run_scenario, BenchConfig, BenchError, RunReport, Scenario,
    Verdict, WorkloadSpec,
};
use kvtier_core::{ModelSpec, TierId};

fn qa(users: usize, rounds: usize) -> WorkloadSpec {
    WorkloadSpec {
        doc_tokens: 4000,
        question_tokens: 20,
        output_tokens: 8,
        initial_users: users,
        rounds,
        round_interval_s: 30.0,
        seed: 5,
        ..Default::default()
    }
}

fn small_config() -> BenchConfig {
    BenchConfig {
        model: ModelSpec::new("bench-test", 4, 32),
        ..Default::default()
    }
}

#[test]
fn poisson_arrival_count_within_three_sigma() {
    // N ~ Poisson(120): sigma = sqrt(120)
    let bound = 3.0 * 120f64.sqrt();
    for seed in 0..20 {
        let w = WorkloadSpec {
            kind: WorkloadKind::PoissonRandom,
            qps: 2.0,
            duration_s: 60.0,
            doc_tokens: 16,
            num_docs: 2,
            question_tokens: 4,
            seed,
            ..Default::default()
        };
        let n = generate_workload(&w).unwrap().len() as f64;
        assert!((n - 120.0).abs() <= bound, "seed {seed}: {n} arrivals");
    }
}

#[test]
fn cpu_offload_hits_from_round_two_and_warm_beats_cold() {
    let r = run_scenario(Scenario::CpuOffload, &qa(6, 3), &small_config()).unwrap();
    assert_eq!(r.equivalence.status, Verdict::Pass);
    assert_eq!(r.rows.len(), 18);
    for round in &r.aggregates.rounds[1..] {
        assert!(
            round.hit_ratio > 0.9,
            "round {}: {}",
            round.round,
            round.hit_ratio
        );
    }
    let pairs = r.warm_vs_cold();
    assert_eq!(pairs.len(), 12);
    for (session, cold, warm) in pairs {
        assert!(warm < cold, "session {session}: warm {warm} cold {cold}");
    }
    assert!(r.is_consistent());
    assert!(r.leftovers.is_clean());
    assert!(r.tier_bytes["ram"].read > 0);
}

#[test]
fn virtual_reports_are_reproducible_and_survive_json() {
    for s in [Scenario::CpuOffload, Scenario::CentralStorage] {
        let a = run_scenario(s, &qa(4, 2), &small_config()).unwrap();
        let b = run_scenario(s, &qa(4, 2), &small_config()).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap(), "{s}");
        let back = RunReport::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
        assert!(back.is_consistent());
    }
}

#[test]
fn tampered_aggregates_are_detected() {
    let mut r = run_scenario(Scenario::CpuOffload, &qa(2, 2), &small_config()).unwrap();
    r.rows[0].ttft_ns += 1;
    assert!(!r.is_consistent());
}

#[test]
fn central_storage_reuses_across_instances() {
    let mut cfg = small_config();
    cfg.central.instances = 3;
    let r = run_scenario(Scenario::CentralStorage, &qa(6, 3), &cfg).unwrap();
    assert_eq!(r.equivalence.status, Verdict::Pass);
    assert_eq!(r.instances, 3);
    // round-robin puts consecutive rounds of a session on different
    // instances, so these hits came through the server
    let cross = r
        .rows
        .iter()
        .filter(|x| x.round > 0 && x.reused > 0)
        .filter(|x| {
            let prev = r
                .rows
                .iter()
                .find(|p| p.session == x.session && p.round == x.round - 1)
                .unwrap();
            prev.instance != x.instance
        })
        .count();
    assert!(cross > 0);
    assert!(r.aggregates.rounds[1].hit_ratio > 0.9);
    assert!(r.tier_bytes["remote:central"].read > 0);
    assert!(r.leftovers.is_clean());
}

#[test]
fn central_storage_wall_clock_runs_instances_concurrently() {
    let mut cfg = small_config();
    cfg.clock = kvtier_engine::ClockMode::Wall;
    cfg.engine.cost = kvtier_engine::CostModel::new(200.0, 0.0, 100_000);
    let w = WorkloadSpec {
        round_interval_s: 0.3,
        ..qa(4, 2)
    };
    let r = run_scenario(Scenario::CentralStorage, &w, &cfg).unwrap();
    assert_eq!(r.equivalence.status, Verdict::Pass);
    assert_eq!(r.rows.len(), 8);
    assert!(r.rows.iter().any(|x| x.instance == 1));
}

#[test]
fn pd_report_has_transfer_and_passes_equivalence() {
    let r = run_scenario(Scenario::Pd, &qa(3, 2), &small_config()).unwrap();
    assert_eq!(r.equivalence.status, Verdict::Pass);
    let pd = r.aggregates.pd.as_ref().unwrap();
    assert!(pd.transfer.mean_ms > 0.0);
    assert!(r
        .rows
        .iter()
        .all(|x| x.pd.as_ref().unwrap().transfer_ns > 0));
    assert!(pd.max_decomposition_error < 0.01);
    // the prefiller keeps its own cache between rounds
    assert!(r.aggregates.rounds[1].hit_ratio > 0.9);
    assert!(!r.tier_bytes.contains_key("disk"));
    assert!(r.leftovers.is_clean());
}

#[test]
fn config_errors_fail_before_running() {
    let w = qa(2, 1);
    let mut cfg = small_config();
    cfg.connector.store_tiers = vec![TierId::remote("central")];
    let e = run_scenario(Scenario::CpuOffload, &w, &cfg).unwrap_err();
    assert!(
        matches!(e, BenchError::Config(ref m) if m.contains("remote:central")),
        "{e}"
    );

    let mut cfg = small_config();
    cfg.engine.num_pages = 8;
    assert!(matches!(
        run_scenario(Scenario::Pd, &w, &cfg),
        Err(BenchError::Config(_))
    ));

    let mut cfg = small_config();
    cfg.central.instances = 0;
    assert!(matches!(
        run_scenario(Scenario::CentralStorage, &w, &cfg),
        Err(BenchError::Config(_))
    ));

    let mut cfg = small_config();
    cfg.chunk_size = 100;
    assert!(matches!(
        run_scenario(Scenario::CpuOffload, &w, &cfg),
        Err(BenchError::Config(_))
    ));

    let mut cfg = small_config();
    cfg.engine.vocab = 1000;
    assert!(matches!(
        run_scenario(Scenario::CpuOffload, &w, &cfg),
        Err(BenchError::Config(_))
    ));
}

#[test]
fn trace_replay_shares_prefixes_by_id() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "arrival_s,prefix_id,prefix_len,suffix_len,output_len").unwrap();
    for (i, t) in [0.0, 0.5, 1.0, 1.5, 2.0, 2.5].iter().enumerate() {
        writeln!(f, "{t},{},1024,{},3", i % 2, 10 + i).unwrap();
    }
    drop(f);
    let w = WorkloadSpec {
        kind: WorkloadKind::TraceReplay,
        trace: Some(path),
        ..Default::default()
    };
    let s = generate_workload(&w).unwrap();
    assert_eq!(s.len(), 6);
    assert_eq!(s[0].query.tokens[..1024], s[2].query.tokens[..1024]);
    assert_ne!(s[0].query.tokens[..1024], s[1].query.tokens[..1024]);
    let r = run_scenario(Scenario::CpuOffload, &w, &small_config()).unwrap();
    assert_eq!(r.equivalence.status, Verdict::Pass);
    assert!(r.rows[2..].iter().all(|x| x.reused == 1024));
}

#[test]
fn compare_gives_paired_deltas() {
    let mut cfg = small_config();
    let a = run_scenario(Scenario::CpuOffload, &qa(3, 2), &cfg).unwrap();
    cfg.connector.store = false;
    let b = run_scenario(Scenario::CpuOffload, &qa(3, 2), &cfg).unwrap();
    let same = report_compare(&a, &a);
    assert!(same.deltas.iter().all(|d| d.delta == 0.0));
    let c = report_compare(&a, &b);
    let ttft = c.get("ttft_mean_ms").unwrap();
    assert!(
        ttft.ratio.unwrap() > 1.0,
        "no cache should be slower: {ttft:?}"
    );
    assert_eq!(c.get("hit_ratio").unwrap().b, 0.0);
    assert!(c.table().lines().count() >= 10);
}

#[test]
fn cli_run_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let wl = dir.path().join("qa.json");
    std::fs::write(&wl, serde_json::to_string(&qa(2, 2)).unwrap()).unwrap();
    let cfg = dir.path().join("tiers.toml");
    std::fs::write(
        &cfg,
        "[model]\nmodel_tag = \"cli\"\nnum_layers = 2\nbytes_per_token_per_layer = 16\npage_tokens = 16\n",
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_kvbench");
    for (s, out) in [("cpu_offload", "a.json"), ("pd", "b.json")] {
        let st = Command::new(bin)
            .args(["run", "--scenario", s, "--workload"])
            .arg(&wl)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join(out))
            .arg("--csv")
            .arg(dir.path().join(format!("{out}.csv")))
            .output()
            .unwrap();
        assert!(
            st.status.success(),
            "{}",
            String::from_utf8_lossy(&st.stderr)
        );
    }
    let a = RunReport::load(&dir.path().join("a.json")).unwrap();
    assert_eq!(a.model_tag, "cli");
    let csv = std::fs::read_to_string(dir.path().join("a.json.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + a.rows.len());
    let out = Command::new(bin)
        .arg("compare")
        .arg(dir.path().join("a.json"))
        .arg(dir.path().join("b.json"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("ttft_p99_ms"));
    let bad = Command::new(bin)
        .args(["run", "--scenario", "gpu_cluster"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
