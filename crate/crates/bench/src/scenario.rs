//! Instance topologies and the loop that drives a schedule through them.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use kvtier_core::storage::TierBackend;
use kvtier_core::{ModelSpec, PagedKVStore, StorageEngine, TierId};
use kvtier_engine::{
    run_pd, Clock, Connector, ConnectorConfig, Engine, EngineConfig, EventLog, KvConnector,
    NoopConnector, PdLink, QueryOutput, QueryRecord, SimQuery, TransferMode,
};
use kvtier_transfer::{RemoteTier, Server};

use crate::config::{BenchConfig, Scenario};
use crate::report::{
    Aggregates, Equivalence, Leftovers, PdSegments, QueryRow, RunReport, TierBytes, Verdict,
};
use crate::workload::{generate_workload, Scheduled, WorkloadSpec};
use crate::BenchError;

fn ns(d: Duration) -> u64 {
    d.as_nanos() as u64
}

fn engine_with(
    spec: &ModelSpec,
    ec: &EngineConfig,
    connector: impl FnOnce(Arc<PagedKVStore>, Arc<EventLog>) -> Arc<dyn KvConnector>,
    clock: Arc<Clock>,
) -> Result<Engine, BenchError> {
    let pages = Arc::new(PagedKVStore::new(spec.clone(), ec.num_pages));
    let log = Arc::new(EventLog::new(false));
    let c = connector(pages.clone(), log.clone());
    Ok(Engine::new(spec.clone(), ec.clone(), pages, c, clock, log)?)
}

fn cached_engine(
    cfg: &BenchConfig,
    storage: &StorageEngine,
    cc: ConnectorConfig,
    clock: Arc<Clock>,
) -> Result<Engine, BenchError> {
    let s = storage.clone();
    let c = clock.clone();
    engine_with(
        &cfg.model,
        &cfg.engine,
        move |pages, log| Arc::new(Connector::new(s, pages, cc, c, log)),
        clock,
    )
}

/// Outputs of an engine without any KV cache, one query at a time.
pub fn oracle_outputs(
    spec: &ModelSpec,
    ec: &EngineConfig,
    queries: &[SimQuery],
) -> Result<HashMap<u64, QueryOutput>, BenchError> {
    let clock = Arc::new(Clock::virtual_time());
    let mut e = engine_with(
        spec,
        ec,
        |_, log| Arc::new(NoopConnector::new(TransferMode::Blocking, log)),
        clock,
    )?;
    let mut out = HashMap::new();
    for q in queries {
        let r = e.run_query(SimQuery {
            arrival: Duration::ZERO,
            ..q.clone()
        })?;
        out.insert(r.id, r.output);
    }
    Ok(out)
}

fn row(s: &Scheduled, rec: &QueryRecord, instance: usize) -> QueryRow {
    QueryRow {
        id: rec.id,
        session: s.session,
        round: s.round,
        instance,
        prompt_tokens: rec.prompt_tokens,
        output_tokens: rec.output.tokens.len(),
        matched: rec.matched,
        reused: rec.reused,
        arrival_ns: ns(rec.arrival),
        ttft_ns: ns(rec.ttft()),
        e2e_ns: ns(rec.finish.saturating_sub(rec.arrival)),
        itl_ns: rec.itl.iter().copied().map(ns).collect(),
        kv_digest: rec.output.kv_digest,
        output_ok: None,
        pd: None,
    }
}

/// Stores whose bytes and leftovers the report sums.
struct Outcome {
    rows: Vec<QueryRow>,
    outputs: HashMap<u64, QueryOutput>,
    stores: Vec<StorageEngine>,
    extra_bytes: BTreeMap<String, TierBytes>,
    instances: usize,
}

/// Runs `workload` under `scenario`. Configuration problems are reported
/// before any instance starts.
pub fn run_scenario(
    scenario: Scenario,
    workload: &WorkloadSpec,
    cfg: &BenchConfig,
) -> Result<RunReport, BenchError> {
    let schedule = generate_workload(workload)?;
    run_schedule(scenario, workload, &schedule, cfg)
}

/// [`run_scenario`] over a prepared schedule.
pub fn run_schedule(
    scenario: Scenario,
    workload: &WorkloadSpec,
    schedule: &[Scheduled],
    cfg: &BenchConfig,
) -> Result<RunReport, BenchError> {
    cfg.validate(scenario, workload, schedule)?;
    let out = match scenario {
        Scenario::CpuOffload => cpu_offload(schedule, cfg)?,
        Scenario::CentralStorage => central_storage(schedule, cfg)?,
        Scenario::Pd => pd(schedule, cfg)?,
    };
    finish(scenario, workload, schedule, cfg, out)
}

fn finish(
    scenario: Scenario,
    workload: &WorkloadSpec,
    schedule: &[Scheduled],
    cfg: &BenchConfig,
    mut out: Outcome,
) -> Result<RunReport, BenchError> {
    let mut leftovers = Leftovers::default();
    let mut tier_bytes = out.extra_bytes;
    for s in &out.stores {
        s.quiesce();
        leftovers.share_count += s.total_share_count();
        let occ = s.buffer_pool().occupancy();
        leftovers.pool_buffers += occ.buffers;
        leftovers.pool_refs += occ.refs;
        for (tier, st) in s.tier_stats() {
            let e = tier_bytes.entry(tier.to_string()).or_default();
            e.written += st.bytes_written;
            e.read += st.bytes_read;
        }
    }
    let equivalence = if cfg.verify {
        let queries: Vec<SimQuery> = schedule.iter().map(|s| s.query.clone()).collect();
        let want = oracle_outputs(&cfg.model, &cfg.engine, &queries)?;
        let mut mismatched = Vec::new();
        for r in &mut out.rows {
            let ok = want.get(&r.id) == out.outputs.get(&r.id);
            r.output_ok = Some(ok);
            if !ok {
                mismatched.push(r.id);
            }
        }
        Equivalence {
            status: if mismatched.is_empty() {
                Verdict::Pass
            } else {
                Verdict::Fail
            },
            checked: out.rows.len(),
            mismatched,
        }
    } else {
        Equivalence {
            status: Verdict::Skipped,
            checked: 0,
            mismatched: Vec::new(),
        }
    };
    out.rows.sort_by_key(|r| r.id);
    let aggregates = Aggregates::from_rows(&out.rows);
    Ok(RunReport {
        scenario: scenario.to_string(),
        clock: format!("{:?}", cfg.clock).to_lowercase(),
        model_tag: cfg.model.model_tag.clone(),
        chunk_size: cfg.chunk_size,
        instances: out.instances,
        workload: workload.clone(),
        rows: out.rows,
        aggregates,
        tier_bytes,
        equivalence,
        leftovers,
    })
}

fn collect(
    schedule: &[Scheduled],
    recs: Vec<(usize, QueryRecord)>,
) -> (Vec<QueryRow>, HashMap<u64, QueryOutput>) {
    let by_id: HashMap<u64, &Scheduled> = schedule.iter().map(|s| (s.query.id, s)).collect();
    let mut rows = Vec::with_capacity(recs.len());
    let mut outputs = HashMap::with_capacity(recs.len());
    for (i, r) in recs {
        rows.push(row(by_id[&r.id], &r, i));
        outputs.insert(r.id, r.output);
    }
    (rows, outputs)
}

fn cpu_offload(schedule: &[Scheduled], cfg: &BenchConfig) -> Result<Outcome, BenchError> {
    let storage = StorageEngine::new(cfg.model.clone(), cfg.storage_config(), Vec::new())?;
    let clock = Arc::new(Clock::new(cfg.clock));
    let mut engine = cached_engine(cfg, &storage, cfg.connector.clone(), clock)?;
    let recs = engine.run(schedule.iter().map(|s| s.query.clone()))?;
    let (rows, outputs) = collect(schedule, recs.into_iter().map(|r| (0, r)).collect());
    drop(engine);
    Ok(Outcome {
        rows,
        outputs,
        stores: vec![storage],
        extra_bytes: BTreeMap::new(),
        instances: 1,
    })
}

fn central_storage(schedule: &[Scheduled], cfg: &BenchConfig) -> Result<Outcome, BenchError> {
    let n = cfg.central.instances;
    let central =
        StorageEngine::in_memory(cfg.model.clone(), cfg.chunk_size, cfg.central.server_bytes)?;
    let server: Server = kvtier_transfer::serve("127.0.0.1:0", central.clone())?;
    let mut cc = cfg.connector.clone();
    if cc.store_tiers.is_empty() {
        cc.store_tiers = vec![TierId::RamPool, TierId::remote("central")];
    }
    let mut stores = Vec::with_capacity(n);
    let mut engines = Vec::with_capacity(n);
    for _ in 0..n {
        let remote: Arc<dyn TierBackend> =
            Arc::new(RemoteTier::connect("central", server.local_addr())?);
        let s = StorageEngine::new(cfg.model.clone(), cfg.storage_config(), vec![remote])?;
        let clock = Arc::new(Clock::new(cfg.clock));
        engines.push(cached_engine(cfg, &s, cc.clone(), clock)?);
        stores.push(s);
    }
    // new sessions go round-robin; a session's next round moves to the
    // following instance, so its reuse has to come through the server
    let mut next = 0;
    let mut last: HashMap<u64, usize> = HashMap::new();
    for s in schedule {
        let i = match last.get(&s.session) {
            Some(&p) if s.round > 0 => (p + 1) % n,
            _ => {
                next += 1;
                (next - 1) % n
            }
        };
        last.insert(s.session, i);
        engines[i].submit(s.query.clone());
    }
    let recs = if cfg.clock == kvtier_engine::ClockMode::Virtual {
        interleave(&mut engines)?
    } else {
        for e in &engines {
            e.clock().reset();
        }
        std::thread::scope(|sc| {
            let hs: Vec<_> = engines
                .iter_mut()
                .enumerate()
                .map(|(i, e)| {
                    sc.spawn(move || {
                        drain(e).map(|rs| rs.into_iter().map(|r| (i, r)).collect::<Vec<_>>())
                    })
                })
                .collect();
            let mut all = Vec::new();
            for h in hs {
                all.extend(h.join().expect("instance thread panicked")?);
            }
            Ok::<_, BenchError>(all)
        })?
    };
    let (rows, outputs) = collect(schedule, recs);
    drop(engines);
    stores.push(central);
    drop(server);
    Ok(Outcome {
        rows,
        outputs,
        stores,
        extra_bytes: BTreeMap::new(),
        instances: n,
    })
}

fn drain(e: &mut Engine) -> Result<Vec<QueryRecord>, BenchError> {
    let mut out = Vec::new();
    while !e.is_idle() {
        out.extend(e.step()?);
    }
    Ok(out)
}

/// Steps whichever instance is furthest behind in virtual time, so stores
/// and lookups through the shared server happen in time order.
fn interleave(engines: &mut [Engine]) -> Result<Vec<(usize, QueryRecord)>, BenchError> {
    let mut out = Vec::new();
    loop {
        let next = engines
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.next_arrival().map(|a| (a.max(e.clock().now()), i)))
            .min();
        let Some((_, i)) = next else { return Ok(out) };
        out.extend(engines[i].step()?.into_iter().map(|r| (i, r)));
    }
}

fn pd(schedule: &[Scheduled], cfg: &BenchConfig) -> Result<Outcome, BenchError> {
    let storage = StorageEngine::new(cfg.model.clone(), cfg.storage_config(), Vec::new())?;
    let clock = Arc::new(Clock::new(cfg.clock));
    let mut pre = cached_engine(cfg, &storage, cfg.connector.clone(), clock.clone())?;
    let mut dec = engine_with(
        &cfg.model,
        &cfg.engine,
        |_, log| Arc::new(NoopConnector::new(TransferMode::Layerwise, log)),
        clock.clone(),
    )?;
    let mut link = PdLink::new(cfg.model.clone(), cfg.chunk_size, cfg.pd.push_mode)?;
    link.max_message = cfg.pd.max_message;
    link.speed = cfg.pd.link;
    let by_id: HashMap<u64, &Scheduled> = schedule.iter().map(|s| (s.query.id, s)).collect();
    let mut rows = Vec::with_capacity(schedule.len());
    let mut outputs = HashMap::with_capacity(schedule.len());
    let mut link_bytes = 0u64;
    clock.reset();
    for s in schedule {
        let rec = run_pd(s.query.clone(), &mut pre, &mut dec, &link)?;
        let measured = clock.now().saturating_sub(rec.arrival);
        link_bytes += rec.bytes as u64;
        rows.push(QueryRow {
            id: rec.id,
            session: by_id[&rec.id].session,
            round: by_id[&rec.id].round,
            instance: 0,
            prompt_tokens: rec.prompt_tokens,
            output_tokens: rec.output.tokens.len(),
            matched: rec.matched,
            reused: rec.reused,
            arrival_ns: ns(rec.arrival),
            ttft_ns: ns(rec.ttft()),
            e2e_ns: ns(rec.end_to_end()),
            itl_ns: rec.itl.iter().copied().map(ns).collect(),
            kv_digest: rec.output.kv_digest,
            output_ok: None,
            pd: Some(PdSegments {
                prefill_ns: ns(rec.prefill()),
                transfer_ns: ns(rec.transfer()),
                decode_ns: ns(rec.decode()),
                measured_ns: ns(measured),
                messages: rec.messages,
                bytes: rec.bytes,
                push_wall_ns: ns(rec.push_wall),
            }),
        });
        outputs.insert(rec.id, rec.output);
    }
    drop((pre, dec, link));
    Ok(Outcome {
        rows,
        outputs,
        stores: vec![storage],
        extra_bytes: [(
            "pd_link".to_string(),
            TierBytes {
                written: link_bytes,
                read: link_bytes,
            },
        )]
        .into(),
        instances: 2,
    })
}
