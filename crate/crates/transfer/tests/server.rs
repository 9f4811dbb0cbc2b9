mod common;

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::time::Duration;

use common::{chunks, small_spec, tokens};
use kvtier_core::{StorageEngine, TierId};
use kvtier_transfer::body::{Reader, Writer};
use kvtier_transfer::wire::{parse_frame, HEADER_LEN};
use kvtier_transfer::{
    serve, ChunkStatus, ConnConfig, Connection, ErrCode, Frame, Handler, NoHandler, Opcode,
    RemoteClient, Reply, Request, Server, ServerConfig, StoreHandler,
};

fn store() -> StorageEngine {
    StorageEngine::in_memory(small_spec(), 256, 64 << 20).unwrap()
}

#[test]
fn chunk_put_by_one_client_reads_back_on_another() {
    let server = serve("127.0.0.1:0", store()).unwrap();
    let a = RemoteClient::connect(server.local_addr()).unwrap();
    let b = RemoteClient::connect(server.local_addr()).unwrap();
    let spec = small_spec();
    let cs = chunks(&spec, &tokens(1, 256 * 5 + 37), 256, 2);
    let st = a.send_chunks(&cs, &[]).unwrap();
    assert!(st.iter().all(|s| *s == ChunkStatus::Stored));
    assert!(a
        .send_chunks(&cs, &[])
        .unwrap()
        .iter()
        .all(|s| *s == ChunkStatus::AlreadyPresent));
    for c in &cs {
        let got = b.get(c.key()).unwrap().expect("present");
        assert_eq!(got.payload(), c.payload());
        assert_eq!(got.token_count(), c.token_count());
    }
    let keys: Vec<_> = cs.iter().map(|c| c.key().clone()).collect();
    let ex = b.exists(&keys).unwrap();
    assert!(ex.iter().all(|e| e.is_some()));
    assert_eq!(server.connection_count(), 2);
}

#[test]
fn send_chunks_coalesces_under_max_payload() {
    let spec = kvtier_core::ModelSpec::new("t", 4, 256);
    let cs = chunks(&spec, &tokens(3, 256 * 64), 256, 4);
    assert_eq!(cs[0].len(), 256 << 10);
    // 64 x 256 KiB plus record headers fits one 64 MiB message only if
    // headers are small; two at most.
    let n = RemoteClient::message_count(&cs, 64 << 20);
    assert!(n <= 2, "{n} messages");
    assert_eq!(RemoteClient::message_count(&cs[..32], 64 << 20), 1);
    let server = serve(
        "127.0.0.1:0",
        StorageEngine::in_memory(spec, 256, 128 << 20).unwrap(),
    )
    .unwrap();
    let c = RemoteClient::connect(server.local_addr()).unwrap();
    let before = c.connection().bytes_sent();
    assert!(c
        .send_chunks(&cs[..32], &[])
        .unwrap()
        .iter()
        .all(|s| s.is_ok()));
    let sent = c.connection().bytes_sent() - before;
    assert!(sent < (32 * (256 << 10) + 32 * 256) as u64);
}

#[test]
fn bad_magic_closes_only_that_connection() {
    let server = serve("127.0.0.1:0", store()).unwrap();
    let good = RemoteClient::connect(server.local_addr()).unwrap();
    let mut raw = TcpStream::connect(server.local_addr()).unwrap();
    raw.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    raw.write_all(b"HTTP/1.1 GET / garbage garbage").unwrap();
    let mut buf = [0u8; 16];
    // server hangs up: EOF or reset
    let n = raw.read(&mut buf).unwrap_or(0);
    assert_eq!(n, 0);
    let spec = small_spec();
    let cs = chunks(&spec, &tokens(5, 256), 256, 6);
    assert!(good.put(&cs[0], false).unwrap().is_ok());
    assert!(good.get(cs[0].key()).unwrap().is_some());
}

fn read_frame(s: &mut TcpStream) -> Frame {
    let mut buf = vec![0u8; HEADER_LEN];
    s.read_exact(&mut buf).unwrap();
    let len = u32::from_le_bytes(buf[15..19].try_into().unwrap()) as usize;
    buf.resize(HEADER_LEN + len, 0);
    s.read_exact(&mut buf[HEADER_LEN..]).unwrap();
    parse_frame(&buf, usize::MAX).unwrap().unwrap().0
}

#[test]
fn oversize_payload_is_refused_and_connection_survives() {
    let cfg = ServerConfig {
        conn: ConnConfig {
            max_payload: 1024,
            ..Default::default()
        },
        ..Default::default()
    };
    let server = Server::bind("127.0.0.1:0", Arc::new(StoreHandler::new(store())), cfg).unwrap();
    let mut raw = TcpStream::connect(server.local_addr()).unwrap();
    raw.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    raw.write_all(&Frame::new(Opcode::Put, 9, vec![0u8; 4096]).encode())
        .unwrap();
    let f = read_frame(&mut raw);
    assert_eq!((f.opcode, f.request_id), (Opcode::Err, 9));
    assert_eq!(
        ErrCode::from_u16(Reader::new(&f.payload).u16().unwrap()),
        ErrCode::TooLarge
    );

    let mut w = Writer::new();
    w.keys(&[]);
    raw.write_all(&Frame::new(Opcode::Exists, 10, w.finish()).encode())
        .unwrap();
    let f = read_frame(&mut raw);
    assert_eq!((f.opcode, f.request_id), (Opcode::Ok, 10));
    assert_eq!(f.payload, 0u32.to_le_bytes());
}

#[test]
fn malformed_body_gets_bad_request() {
    let server = serve("127.0.0.1:0", store()).unwrap();
    let c = Connection::connect(server.local_addr(), Arc::new(NoHandler)).unwrap();
    match c.request(Opcode::Get, &[1, 2, 3]) {
        Err(kvtier_transfer::TransferError::Remote { code, .. }) => {
            assert_eq!(code, ErrCode::BadRequest)
        }
        other => panic!("{other:?}"),
    }
    match c.request(Opcode::PdPush, &[]) {
        Err(kvtier_transfer::TransferError::Remote { code, .. }) => {
            assert_eq!(code, ErrCode::Unsupported)
        }
        other => panic!("{other:?}"),
    }
    assert!(!c.is_closed());
}

struct Echo;

impl Handler for Echo {
    fn handle(&self, _conn: &Connection, req: Request<'_>) -> Reply {
        let mut p = req.request_id.to_le_bytes().to_vec();
        p.extend_from_slice(req.payload);
        Reply::Ok(p)
    }
}

#[test]
fn pipelined_requests_pair_with_their_replies() {
    let server = Server::bind("127.0.0.1:0", Arc::new(Echo), ServerConfig::default()).unwrap();
    let c = Connection::connect(server.local_addr(), Arc::new(NoHandler)).unwrap();
    let pending: Vec<_> = (0..500u32)
        .map(|i| {
            let body = vec![(i % 251) as u8; i as usize * 7];
            (body.clone(), c.send_request(Opcode::Get, &[&body]).unwrap())
        })
        .collect();
    for (body, p) in pending.iter().rev() {
        let r = c.wait(p).unwrap();
        assert_eq!(&r.payload[8..], &body[..]);
    }
    // threads sharing one connection
    std::thread::scope(|s| {
        for t in 0..4u8 {
            let c = c.clone();
            s.spawn(move || {
                for i in 0..200u32 {
                    let body = [t, (i & 0xff) as u8, (i >> 8) as u8];
                    assert_eq!(
                        &c.request(Opcode::Exists, &body).unwrap().payload[8..],
                        &body
                    );
                }
            });
        }
    });
}

#[test]
fn clear_pin_and_compress_over_the_wire() {
    let server = serve("127.0.0.1:0", store()).unwrap();
    let c = RemoteClient::connect(server.local_addr()).unwrap();
    let spec = small_spec();
    let cs = chunks(&spec, &tokens(8, 256 * 3), 256, 9);
    c.send_chunks(&cs, &[]).unwrap();
    let keys: Vec<_> = cs.iter().map(|c| c.key().clone()).collect();
    assert_eq!(
        c.pin(&keys[..1], &TierId::RamPool, true).unwrap(),
        vec![true]
    );
    let sizes = c
        .compress(&keys[1..2], &TierId::RamPool, "q8-scale")
        .unwrap();
    assert!(sizes[0].unwrap() < cs[1].len() as u64);
    let rep = c.clear(&keys, &TierId::RamPool).unwrap();
    assert_eq!((rep.removed, rep.refused_pinned), (2, 1));
    assert!(c.get(&keys[0]).unwrap().is_some());
    assert!(c.get(&keys[2]).unwrap().is_none());
    assert!(c.compress(&keys, &TierId::RamPool, "nope").is_err());
}
