use kvtier_transfer::bench::Loopback;

fn main() {
    let total: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse().unwrap())
        .unwrap_or(1 << 30);
    let trials: usize = std::env::args()
        .nth(2)
        .map(|s| s.parse().unwrap())
        .unwrap_or(3);
    let direct = std::env::args().nth(3).is_none_or(|s| s == "direct");
    let buf: Option<usize> = std::env::args().nth(4).map(|s| s.parse().unwrap());
    let cfg = kvtier_transfer::ConnConfig {
        socket_buffer: buf,
        ..Default::default()
    };
    let lb = Loopback::with_config(total, direct, cfg).unwrap();
    let sizes = [64 << 10, 256 << 10, 1 << 20, 16 << 20];
    for s in lb.measure(&sizes, trials).unwrap() {
        println!(
            "{:>9} B  best {:.2} GB/s  median {:.2} GB/s  trials {:?}",
            s.message_bytes,
            s.best() / 1e9,
            s.median() / 1e9,
            s.trials
                .iter()
                .map(|t| (t / 1e7).round() / 100.0)
                .collect::<Vec<_>>()
        );
    }
    assert!(lb.verify());
}
