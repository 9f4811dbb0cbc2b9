//! Run reports: per-query rows, aggregates recomputable from them, and
//! paired comparison of two runs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::workload::WorkloadSpec;
use crate::BenchError;

/// Prefill / transfer / decode split of one PD query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PdSegments {
    pub prefill_ns: u64,
    pub transfer_ns: u64,
    pub decode_ns: u64,
    /// Arrival to completion as read off the clock around the whole trip.
    pub measured_ns: u64,
    pub messages: usize,
    pub bytes: usize,
    pub push_wall_ns: u64,
}

impl PdSegments {
    /// Relative gap between the segment sum and the measured latency.
    pub fn decomposition_error(&self) -> f64 {
        let sum = self.prefill_ns + self.transfer_ns + self.decode_ns;
        if self.measured_ns == 0 {
            return if sum == 0 { 0.0 } else { 1.0 };
        }
        (sum as f64 - self.measured_ns as f64).abs() / self.measured_ns as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRow {
    pub id: u64,
    pub session: u64,
    pub round: u32,
    pub instance: usize,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
    pub matched: usize,
    pub reused: usize,
    pub arrival_ns: u64,
    pub ttft_ns: u64,
    pub e2e_ns: u64,
    pub itl_ns: Vec<u64>,
    /// Output digest, for comparing runs.
    pub kv_digest: u64,
    /// Agreement with the cacheless engine; absent when not verified.
    pub output_ok: Option<bool>,
    pub pd: Option<PdSegments>,
}

/// Latency distribution in milliseconds. Percentiles are nearest-rank.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
}

impl Summary {
    pub fn of_ns(values: impl IntoIterator<Item = u64>) -> Self {
        let mut v: Vec<u64> = values.into_iter().collect();
        if v.is_empty() {
            return Self::default();
        }
        v.sort_unstable();
        let n = v.len();
        let rank = |p: f64| {
            let k = ((p / 100.0) * n as f64).ceil() as usize;
            v[k.clamp(1, n) - 1] as f64 / 1e6
        };
        let sum: u128 = v.iter().map(|&x| x as u128).sum();
        Self {
            count: n,
            mean_ms: sum as f64 / n as f64 / 1e6,
            p50_ms: rank(50.0),
            p95_ms: rank(95.0),
            p99_ms: rank(99.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundAggregate {
    pub round: u32,
    pub queries: usize,
    pub hit_ratio: f64,
    pub ttft: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdAggregate {
    pub prefill: Summary,
    pub transfer: Summary,
    pub decode: Summary,
    pub measured: Summary,
    pub max_decomposition_error: f64,
    pub messages: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub queries: usize,
    pub ttft: Summary,
    pub itl: Summary,
    pub e2e: Summary,
    /// Reused prompt tokens over all prompt tokens.
    pub hit_ratio: f64,
    pub rounds: Vec<RoundAggregate>,
    pub pd: Option<PdAggregate>,
}

fn hit_ratio<'a>(rows: impl IntoIterator<Item = &'a QueryRow>) -> f64 {
    let (mut reused, mut prompt) = (0u64, 0u64);
    for r in rows {
        reused += r.reused as u64;
        prompt += r.prompt_tokens as u64;
    }
    if prompt == 0 {
        0.0
    } else {
        reused as f64 / prompt as f64
    }
}

impl Aggregates {
    pub fn from_rows(rows: &[QueryRow]) -> Self {
        let mut by_round: BTreeMap<u32, Vec<&QueryRow>> = BTreeMap::new();
        for r in rows {
            by_round.entry(r.round).or_default().push(r);
        }
        let rounds = by_round
            .into_iter()
            .map(|(round, rs)| RoundAggregate {
                round,
                queries: rs.len(),
                hit_ratio: hit_ratio(rs.iter().copied()),
                ttft: Summary::of_ns(rs.iter().map(|r| r.ttft_ns)),
            })
            .collect();
        let pd_rows: Vec<&PdSegments> = rows.iter().filter_map(|r| r.pd.as_ref()).collect();
        let pd = (!pd_rows.is_empty()).then(|| PdAggregate {
            prefill: Summary::of_ns(pd_rows.iter().map(|p| p.prefill_ns)),
            transfer: Summary::of_ns(pd_rows.iter().map(|p| p.transfer_ns)),
            decode: Summary::of_ns(pd_rows.iter().map(|p| p.decode_ns)),
            measured: Summary::of_ns(pd_rows.iter().map(|p| p.measured_ns)),
            max_decomposition_error: pd_rows
                .iter()
                .map(|p| p.decomposition_error())
                .fold(0.0, f64::max),
            messages: pd_rows.iter().map(|p| p.messages).sum(),
            bytes: pd_rows.iter().map(|p| p.bytes).sum(),
        });
        Self {
            queries: rows.len(),
            ttft: Summary::of_ns(rows.iter().map(|r| r.ttft_ns)),
            itl: Summary::of_ns(rows.iter().flat_map(|r| r.itl_ns.iter().copied())),
            e2e: Summary::of_ns(rows.iter().map(|r| r.e2e_ns)),
            hit_ratio: hit_ratio(rows),
            rounds,
            pd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Equivalence {
    pub status: Verdict,
    pub checked: usize,
    pub mismatched: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierBytes {
    pub written: u64,
    pub read: u64,
}

/// Buffer accounting left over after the run, summed over all stores.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leftovers {
    pub share_count: u64,
    pub pool_buffers: usize,
    pub pool_refs: usize,
}

impl Leftovers {
    pub fn is_clean(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub clock: String,
    pub model_tag: String,
    pub chunk_size: usize,
    pub instances: usize,
    pub workload: WorkloadSpec,
    pub rows: Vec<QueryRow>,
    pub aggregates: Aggregates,
    pub tier_bytes: BTreeMap<String, TierBytes>,
    pub equivalence: Equivalence,
    pub leftovers: Leftovers,
}

impl RunReport {
    /// Whether the shipped aggregates are exactly what the rows give.
    pub fn is_consistent(&self) -> bool {
        Aggregates::from_rows(&self.rows) == self.aggregates
    }

    /// `(session, cold ttft, warm ttft)` for every repeated-prefix query,
    /// paired with round 0 of the same session.
    pub fn warm_vs_cold(&self) -> Vec<(u64, u64, u64)> {
        let cold: BTreeMap<u64, u64> = self
            .rows
            .iter()
            .filter(|r| r.round == 0)
            .map(|r| (r.session, r.ttft_ns))
            .collect();
        self.rows
            .iter()
            .filter(|r| r.round > 0)
            .filter_map(|r| cold.get(&r.session).map(|&c| (r.session, c, r.ttft_ns)))
            .collect()
    }

    pub fn to_json(&self) -> Result<String, BenchError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, BenchError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), BenchError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// One CSV line per query; ITLs are `;`-separated nanoseconds.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), BenchError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "id",
            "session",
            "round",
            "instance",
            "prompt_tokens",
            "output_tokens",
            "matched",
            "reused",
            "arrival_ns",
            "ttft_ns",
            "e2e_ns",
            "itl_ns",
            "output_ok",
            "prefill_ns",
            "transfer_ns",
            "decode_ns",
            "pd_messages",
        ])?;
        for r in &self.rows {
            let itl: Vec<String> = r.itl_ns.iter().map(u64::to_string).collect();
            let ok = match r.output_ok {
                Some(true) => "pass",
                Some(false) => "fail",
                None => "",
            };
            let pd = |f: fn(&PdSegments) -> String| r.pd.as_ref().map(f).unwrap_or_default();
            out.write_record([
                r.id.to_string(),
                r.session.to_string(),
                r.round.to_string(),
                r.instance.to_string(),
                r.prompt_tokens.to_string(),
                r.output_tokens.to_string(),
                r.matched.to_string(),
                r.reused.to_string(),
                r.arrival_ns.to_string(),
                r.ttft_ns.to_string(),
                r.e2e_ns.to_string(),
                itl.join(";"),
                ok.to_string(),
                pd(|p| p.prefill_ns.to_string()),
                pd(|p| p.transfer_ns.to_string()),
                pd(|p| p.decode_ns.to_string()),
                pd(|p| p.messages.to_string()),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    /// `b / a`; absent when `a` is zero.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub deltas: Vec<Delta>,
}

impl Comparison {
    pub fn get(&self, metric: &str) -> Option<&Delta> {
        self.deltas.iter().find(|d| d.metric == metric)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<16} {:>12} {:>12} {:>12} {:>8}\n",
            "metric", "a", "b", "b-a", "b/a"
        );
        for d in &self.deltas {
            let ratio = d
                .ratio
                .map(|r| format!("{r:.3}"))
                .unwrap_or_else(|| "-".into());
            s += &format!(
                "{:<16} {:>12.3} {:>12.3} {:>12.3} {:>8}\n",
                d.metric, d.a, d.b, d.delta, ratio
            );
        }
        s
    }
}

/// Paired deltas and ratios of the TTFT/ITL aggregates of two runs.
pub fn report_compare(a: &RunReport, b: &RunReport) -> Comparison {
    let pick = |r: &RunReport| -> Vec<(&'static str, f64)> {
        let g = &r.aggregates;
        vec![
            ("ttft_mean_ms", g.ttft.mean_ms),
            ("ttft_p50_ms", g.ttft.p50_ms),
            ("ttft_p95_ms", g.ttft.p95_ms),
            ("ttft_p99_ms", g.ttft.p99_ms),
            ("itl_mean_ms", g.itl.mean_ms),
            ("itl_p50_ms", g.itl.p50_ms),
            ("itl_p95_ms", g.itl.p95_ms),
            ("itl_p99_ms", g.itl.p99_ms),
            ("hit_ratio", g.hit_ratio),
        ]
    };
    let deltas = pick(a)
        .into_iter()
        .zip(pick(b))
        .map(|((m, x), (_, y))| Delta {
            metric: m.to_string(),
            a: x,
            b: y,
            delta: y - x,
            ratio: (x != 0.0).then(|| y / x),
        })
        .collect();
    Comparison {
        a: a.scenario.clone(),
        b: b.scenario.clone(),
        deltas,
    }
}
