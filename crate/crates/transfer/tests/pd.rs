mod common;

use std::sync::Arc;
use std::time::Duration;

use common::{chunks, small_spec, tokens};
use kvtier_transfer::pd::{Segment, SlotState};
use kvtier_transfer::{
    pd_push, push_chunks, push_pages, Connection, NoHandler, PdError, PdReceiver, Server,
    ServerConfig,
};

fn rig(spec: kvtier_core::ModelSpec) -> (Arc<PdReceiver>, Server, Connection) {
    let rx = PdReceiver::new(spec, 256);
    let server = Server::bind("127.0.0.1:0", rx.clone(), ServerConfig::default()).unwrap();
    let conn = Connection::connect(server.local_addr(), Arc::new(NoHandler)).unwrap();
    (rx, server, conn)
}

const WAIT: Duration = Duration::from_secs(30);

#[test]
fn chunk_push_is_byte_exact_for_1_to_64_chunks() {
    let spec = small_spec();
    let (rx, _s, conn) = rig(spec.clone());
    for n in 1..=64usize {
        // odd n get a partial last chunk
        let len = n * 256 - if n % 2 == 1 { 100 } else { 0 };
        let toks = tokens(n as u64, len);
        let cs = chunks(&spec, &toks, 256, 1000 + n as u64);
        let q = n as u64;
        assert_eq!(rx.register(q, &toks).unwrap(), n);
        let max = [4096, 64 << 10, 1 << 20][n % 3];
        let msgs = push_chunks(&conn, q, 0, &cs, max).unwrap();
        assert!(msgs >= 1 && msgs <= n);
        let got = rx.pd_await(q, WAIT).unwrap();
        assert_eq!(got.len(), n);
        for (g, c) in got.iter().zip(&cs) {
            assert_eq!(g.key(), c.key());
            assert_eq!(g.payload(), c.payload());
        }
        assert!(!rx.is_registered(q));
    }
}

#[test]
fn page_push_is_byte_exact() {
    let spec = small_spec();
    let (rx, _s, conn) = rig(spec.clone());
    let toks = tokens(77, 256 * 3 + 40);
    let cs = chunks(&spec, &toks, 256, 78);
    rx.register(5, &toks).unwrap();
    let mut msgs = 0;
    for (i, c) in cs.iter().enumerate() {
        msgs += push_pages(&conn, 5, i as u32, c, spec.page_tokens).unwrap();
    }
    assert_eq!(msgs, spec.num_layers * (16 * 3 + 3));
    let got = rx.pd_await(5, WAIT).unwrap();
    for (g, c) in got.iter().zip(&cs) {
        assert_eq!(g.payload(), c.payload());
    }
}

#[test]
fn unknown_query_is_reported() {
    let spec = small_spec();
    let (_rx, _s, conn) = rig(spec.clone());
    let cs = chunks(&spec, &tokens(1, 256), 256, 1);
    assert_eq!(
        pd_push(&conn, 404, 0, &cs[0]),
        Err(PdError::UnknownQuery(404))
    );
    assert!(!conn.is_closed());
}

#[test]
fn repeated_push_is_idempotent_and_first_write_wins() {
    let spec = small_spec();
    let (rx, _s, conn) = rig(spec.clone());
    let toks = tokens(2, 512);
    let cs = chunks(&spec, &toks, 256, 3);
    let other = chunks(&spec, &toks, 256, 4);
    rx.register(1, &toks).unwrap();
    assert_eq!(rx.register(1, &toks), Err(PdError::AlreadyRegistered(1)));
    // half the pages of chunk 0, then the whole chunk with different bytes
    for l in 0..spec.num_layers {
        let layer = cs[0].layer(l);
        let bptl = spec.bytes_per_token_per_layer;
        let seg = Segment {
            query_id: 1,
            ordinal: 0,
            layer_start: l as u16,
            layer_count: 1,
            token_offset: 0,
            token_count: 128,
            data: &layer[..128 * bptl],
        };
        assert_eq!(rx.apply(&seg).unwrap(), 8);
        assert_eq!(rx.apply(&seg).unwrap(), 0);
    }
    assert_eq!(rx.slot_states(1).unwrap(), vec![SlotState::Awaiting; 2]);
    pd_push(&conn, 1, 0, &other[0]).unwrap();
    pd_push(&conn, 1, 0, &cs[0]).unwrap();
    pd_push(&conn, 1, 1, &cs[1]).unwrap();
    pd_push(&conn, 1, 1, &other[1]).unwrap();
    assert_eq!(rx.slot_states(1).unwrap(), vec![SlotState::Filled; 2]);
    let got = rx.pd_await(1, WAIT).unwrap();
    let bptl = spec.bytes_per_token_per_layer;
    for l in 0..spec.num_layers {
        let g = got[0].layer(l);
        assert_eq!(&g[..128 * bptl], &cs[0].layer(l)[..128 * bptl]);
        assert_eq!(&g[128 * bptl..], &other[0].layer(l)[128 * bptl..]);
    }
    assert_eq!(got[1].payload(), cs[1].payload());
}

#[test]
fn malformed_segments_are_rejected() {
    let spec = small_spec();
    let (rx, _s, _conn) = rig(spec.clone());
    let toks = tokens(2, 300);
    rx.register(1, &toks).unwrap();
    let data = vec![0u8; 64 * 16];
    let seg = |ordinal, layer_start, token_offset, token_count, data| Segment {
        query_id: 1,
        ordinal,
        layer_start,
        layer_count: 1,
        token_offset,
        token_count,
        data,
    };
    let bad = |s: Segment<'_>| matches!(rx.apply(&s), Err(PdError::BadSegment(_)));
    assert!(bad(seg(2, 0, 0, 16, &data)));
    assert!(bad(seg(0, 2, 0, 16, &data)));
    assert!(bad(seg(0, 0, 8, 16, &data)));
    assert!(bad(seg(0, 0, 0, 8, &data[..512])));
    assert!(bad(seg(0, 0, 0, 16, &data[..512])));
    assert!(bad(seg(1, 0, 32, 16, &data)));
    // partial last page of the short chunk
    assert_eq!(rx.apply(&seg(1, 0, 32, 12, &data[..12 * 64])).unwrap(), 1);
}

#[test]
fn await_times_out_with_missing_count() {
    let spec = small_spec();
    let (rx, _s, _conn) = rig(spec.clone());
    rx.register(3, &tokens(1, 256)).unwrap();
    match rx.pd_await(3, Duration::from_millis(50)) {
        Err(PdError::Timeout { query: 3, missing }) => assert_eq!(missing, 32),
        other => panic!("{other:?}"),
    }
}
