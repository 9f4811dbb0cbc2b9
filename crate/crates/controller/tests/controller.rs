mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use common::{chunks_for, session, spec, store_tokens, Fleet, CHUNK};
use kvtier_controller::manager::ChunkResult;
use kvtier_controller::{ControllerClient, ControllerError, Manager, ManagerConfig};
use kvtier_core::token::longest_prefix_match;
use kvtier_core::{StorageEngine, TierId, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tokens(seed: u64, n: usize) -> Vec<TokenId> {
    session(&mut ChaCha8Rng::seed_from_u64(seed), n)
}

/// Lookup recomputed from what each store actually holds.
fn recompute(fleet: &Fleet, q: &[TokenId]) -> BTreeMap<String, usize> {
    fleet
        .workers
        .iter()
        .filter_map(|w| {
            let s = w.store();
            let hit = longest_prefix_match(q, CHUNK, &spec().model_tag, &|k: &_| s.contains_any(k));
            (hit > 0).then(|| (w.instance().to_string(), hit))
        })
        .collect()
}

#[test]
fn lookup_follows_store_and_evict_events() {
    let f = Fleet::new(2, 64);
    let q = tokens(1, 512);
    assert!(f.manager.lookup(&q).is_empty());
    store_tokens(f.store(0), &q);
    store_tokens(f.store(1), &q[..256]);
    f.manager.sync_all().unwrap();
    assert_eq!(
        f.manager.lookup(&q),
        BTreeMap::from([("i0".into(), 512), ("i1".into(), 256)])
    );
    let keys = f.manager.keys(&q);
    f.store(0).clear(&keys[1..], &TierId::RamPool);
    f.manager.sync_all().unwrap();
    assert_eq!(f.manager.lookup(&q)["i0"], 256);
    // longer query over the same prefix
    let mut longer = q.clone();
    longer.extend(tokens(2, 300));
    assert_eq!(
        f.manager.lookup(&longer),
        BTreeMap::from([("i0".into(), 256), ("i1".into(), 256)])
    );
}

#[test]
fn events_arrive_without_explicit_sync() {
    let f = Fleet::new(1, 64);
    let q = tokens(3, 700);
    store_tokens(f.store(0), &q);
    let deadline = std::time::Instant::now() + Duration::from_secs(10);
    while f.manager.lookup(&q).get("i0") != Some(&700) {
        assert!(std::time::Instant::now() < deadline, "pump never delivered");
        std::thread::sleep(Duration::from_millis(5));
    }
    assert!(f.workers[0].batches_sent() >= 1);
}

#[test]
fn registry_is_faithful_under_random_workloads() {
    for seed in 0..4u64 {
        let f = Fleet::new(3, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sessions: Vec<Vec<TokenId>> = (0..12)
            .map(|_| {
                let n = rng.gen_range(200..2000);
                session(&mut rng, n)
            })
            .collect();
        let mut queries = Vec::new();
        for _ in 0..150 {
            let s = &sessions[rng.gen_range(0..sessions.len())];
            let len = rng.gen_range(1..=s.len());
            let q = s[..len].to_vec();
            let i = rng.gen_range(0..3);
            match rng.gen_range(0..10) {
                0 => {
                    let keys = f.manager.keys(&q);
                    let from = rng.gen_range(0..keys.len());
                    f.store(i).clear(&keys[from..], &TierId::RamPool);
                }
                1 => {
                    let _ = f.manager.pin(
                        &q[..len.min(256)],
                        &format!("i{i}"),
                        &TierId::RamPool,
                        rng.gen(),
                    );
                }
                _ => store_tokens(f.store(i), &q),
            }
            if rng.gen_bool(0.1) {
                // lookups in flight must not disturb anything
                let _ = f.manager.lookup(&q);
            }
            queries.push(q);
        }
        f.manager.sync_all().unwrap();
        for q in &queries {
            assert_eq!(f.manager.lookup(q), recompute(&f, q), "seed {seed}");
        }
        for w in &f.workers {
            let mut want: Vec<_> = w
                .store()
                .entries()
                .into_iter()
                .map(|e| (e.key.digest, e.tiers, e.pinned))
                .collect();
            want.sort();
            let got: Vec<_> = f
                .manager
                .with_pool(|p| p.entries(w.instance()))
                .into_iter()
                .map(|e| (e.key.digest, e.tiers, e.pinned))
                .collect();
            assert_eq!(got, want, "seed {seed} instance {}", w.instance());
        }
    }
}

#[test]
fn pinned_prefix_survives_eviction_pressure() {
    let f = Fleet::new(1, 8);
    let system = tokens(10, 512);
    store_tokens(f.store(0), &system);
    let out = f
        .manager
        .pin(&system, "i0", &TierId::RamPool, true)
        .unwrap();
    assert!(out.iter().all(|o| o.result == ChunkResult::Done));
    for s in 0..20 {
        let mut q = system.clone();
        q.extend(tokens(100 + s, 1024));
        store_tokens(f.store(0), &q[512..]);
        store_tokens(f.store(0), &q);
    }
    f.manager.sync_all().unwrap();
    assert_eq!(f.manager.lookup(&system)["i0"], 512);
    for c in chunks_for(&system) {
        assert_eq!(f.store(0).get(c.key(), &[]).unwrap().payload(), c.payload());
    }
    let keys = f.manager.keys(&system);
    assert!(f.manager.with_pool(|p| p
        .entry("i0", &keys[0])
        .unwrap()
        .pinned
        .contains(&TierId::RamPool)));
    let cleared = f.manager.clear(&system, "i0", &TierId::RamPool).unwrap();
    assert!(cleared.iter().all(|o| o.result == ChunkResult::Pinned));
}

#[test]
fn move_relocates_bytes_exactly() {
    let f = Fleet::new(2, 64);
    let q = tokens(20, 512 + 77);
    store_tokens(f.store(0), &q);
    f.manager.sync_all().unwrap();
    assert_eq!(f.manager.move_tokens("i0", "i1", &q).unwrap(), q.len());
    for c in chunks_for(&q) {
        assert!(!f.store(0).contains_any(c.key()));
        assert_eq!(f.store(1).get(c.key(), &[]).unwrap().payload(), c.payload());
    }
    assert_eq!(
        f.manager.lookup(&q),
        BTreeMap::from([("i1".into(), q.len())])
    );
    // cold source
    assert_eq!(f.manager.move_tokens("i0", "i1", &q).unwrap(), 0);
    // partial source: only the matched prefix moves
    let r = tokens(21, 768);
    store_tokens(f.store(0), &r[..512]);
    assert_eq!(f.manager.move_tokens("i0", "i1", &r).unwrap(), 512);
    assert_eq!(f.manager.lookup(&r), BTreeMap::from([("i1".into(), 512)]));
    assert!(matches!(
        f.manager.move_tokens("i0", "zz", &r),
        Err(ControllerError::UnknownInstance(_))
    ));
}

#[test]
fn clear_pin_compress_dispatch() {
    let f = Fleet::new(2, 64);
    let q = tokens(30, 512);
    store_tokens(f.store(0), &q);
    let wrong = f.manager.clear(&q, "i0", &TierId::LocalDisk).unwrap();
    assert!(wrong.iter().all(|o| o.result == ChunkResult::Missing));
    let before: Vec<_> = chunks_for(&q).iter().map(|c| c.len() as u64).collect();
    let same = f
        .manager
        .compress(&q, "i0", &TierId::RamPool, "identity")
        .unwrap();
    assert_eq!(
        same.iter().map(|o| o.size.unwrap()).collect::<Vec<_>>(),
        before
    );
    let small = f
        .manager
        .compress(&q, "i0", &TierId::RamPool, "q8-scale")
        .unwrap();
    assert!(small.iter().zip(&before).all(|(o, b)| o.size.unwrap() < *b));
    let cleared = f.manager.clear(&q, "i0", &TierId::RamPool).unwrap();
    assert!(cleared.iter().all(|o| o.result == ChunkResult::Done));
    assert!(f.manager.lookup(&q).is_empty());
    assert!(matches!(
        f.manager.clear(&q, "nope", &TierId::RamPool),
        Err(ControllerError::UnknownInstance(_))
    ));
}

#[test]
fn query_ip_and_instances() {
    let f = Fleet::new(2, 4);
    let eps = f.manager.query_ip(&["i1".into(), "x".into()]);
    assert_eq!(eps["i1"].as_deref().unwrap(), "10.0.0.1:9000");
    assert_eq!(eps["x"], Err(ControllerError::UnknownInstance("x".into())));
    assert!(f.manager.query_ip(&[]).is_empty());
    let ids: BTreeSet<_> = f
        .manager
        .instances()
        .into_iter()
        .map(|i| i.instance)
        .collect();
    assert_eq!(ids, BTreeSet::from(["i0".to_string(), "i1".to_string()]));
}

#[test]
fn wire_client_matches_in_process_answers() {
    let f = Fleet::new(2, 64);
    let q = tokens(40, 600);
    store_tokens(f.store(1), &q);
    f.manager.sync_all().unwrap();
    let c = ControllerClient::connect(f.server.local_addr()).unwrap();
    assert_eq!(c.lookup(&q).unwrap(), f.manager.lookup(&q));
    assert_eq!(c.instances().unwrap(), f.manager.instances());
    let ips = c.query_ip(&["i0".into(), "q".into()]).unwrap();
    assert!(ips["i0"].is_ok() && ips["q"].is_err());
    assert_eq!(c.move_tokens("i1", "i0", &q).unwrap(), 600);
    assert_eq!(c.lookup(&q).unwrap(), BTreeMap::from([("i0".into(), 600)]));
    assert_eq!(c.pin(&q, "i0", &TierId::RamPool, true).unwrap().len(), 3);
    assert!(
        c.compress(&q, "i0", &TierId::RamPool, "q8-scale").unwrap()[0]
            .size
            .is_some()
    );
    assert!(c
        .clear(&q, "i0", &TierId::RamPool)
        .unwrap()
        .iter()
        .all(|o| o.result == ChunkResult::Pinned));
    assert!(
        matches!(c.clear(&q, "zz", &TierId::RamPool), Err(ControllerError::UnknownInstance(id)) if id == "zz")
    );
}

#[test]
fn restarted_manager_rebuilds_from_snapshots() {
    let mut f = Fleet::new(2, 64);
    let q = tokens(50, 900);
    store_tokens(f.store(0), &q);
    store_tokens(f.store(1), &q[..300]);
    f.manager.sync_all().unwrap();
    let before = f.manager.lookup(&q);
    f.server.shutdown();
    let m2 = Manager::new(ManagerConfig {
        chunk_size: CHUNK,
        model_tag: spec().model_tag,
        ..Default::default()
    });
    let s2 = m2.serve("127.0.0.1:0").unwrap();
    for w in &f.workers {
        w.reconnect(s2.local_addr()).unwrap();
    }
    assert_eq!(m2.lookup(&q), before);
    // events keep flowing to the new manager
    f.store(1).clear(&m2.keys(&q), &TierId::RamPool);
    m2.sync_all().unwrap();
    assert_eq!(m2.lookup(&q), BTreeMap::from([("i0".into(), 900)]));
}

#[test]
fn departed_worker_is_forgotten() {
    let mut f = Fleet::new(2, 64);
    let q = tokens(60, 256);
    store_tokens(f.store(1), &q);
    f.manager.sync_all().unwrap();
    drop(f.workers.pop());
    let deadline = std::time::Instant::now() + Duration::from_secs(10);
    while f.manager.instances().len() != 1 {
        assert!(std::time::Instant::now() < deadline);
        std::thread::sleep(Duration::from_millis(5));
    }
    assert!(f.manager.lookup(&q).is_empty());
    let _ = StorageEngine::in_memory(spec(), CHUNK, 1 << 20).unwrap();
}
