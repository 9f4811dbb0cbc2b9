//! Synthetic query schedules.

use std::path::PathBuf;
use std::time::Duration;

use kvtier_core::TokenId;
use kvtier_engine::model::output_tokens;
use kvtier_engine::SimQuery;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    /// Chat sessions over a per-user document; each round's prompt extends
    /// the previous round's prompt and answer.
    MultiRoundQa,
    /// Independent queries over a shared document pool, arriving as a
    /// Poisson process.
    PoissonRandom,
    /// Rows of a CSV trace.
    TraceReplay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub doc_tokens: usize,
    /// Question length; poisson_random draws it from `1..=question_tokens`.
    pub question_tokens: usize,
    /// Answer length; poisson_random draws it from `0..=output_tokens`.
    pub output_tokens: usize,
    pub initial_users: usize,
    pub rounds: usize,
    pub round_interval_s: f64,
    /// Arrival rate of new users (multi_round_qa) or queries (poisson_random).
    pub qps: f64,
    pub duration_s: f64,
    pub seed: u64,
    /// Document pool size for poisson_random.
    pub num_docs: usize,
    pub vocab: u32,
    /// CSV with `arrival_s,prefix_id,prefix_len,suffix_len,output_len`.
    pub trace: Option<PathBuf>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            kind: WorkloadKind::MultiRoundQa,
            doc_tokens: 10_000,
            question_tokens: 32,
            output_tokens: 100,
            initial_users: 40,
            rounds: 3,
            round_interval_s: 60.0,
            qps: 0.0,
            duration_s: 0.0,
            seed: 0,
            num_docs: 16,
            vocab: 32_000,
            trace: None,
        }
    }
}

/// A query plus where it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scheduled {
    pub query: SimQuery,
    pub session: u64,
    pub round: u32,
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    arrival_s: f64,
    prefix_id: u64,
    prefix_len: usize,
    suffix_len: usize,
    output_len: usize,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Config(format!("workload: {m}")));
        if self.vocab == 0 {
            return bad("vocab must be positive");
        }
        if !(self.qps >= 0.0 && self.qps.is_finite())
            || !(self.duration_s >= 0.0 && self.duration_s.is_finite())
        {
            return bad("qps and duration_s must be finite and non-negative");
        }
        if !(self.round_interval_s >= 0.0 && self.round_interval_s.is_finite()) {
            return bad("round_interval_s must be finite and non-negative");
        }
        match self.kind {
            WorkloadKind::MultiRoundQa => {
                if self.rounds == 0 {
                    return bad("rounds must be at least 1");
                }
                if self.doc_tokens + self.question_tokens == 0 {
                    return bad("prompts would be empty");
                }
            }
            WorkloadKind::PoissonRandom => {
                if self.num_docs == 0 || self.question_tokens == 0 {
                    return bad("poisson_random needs num_docs and question_tokens");
                }
                if self.qps == 0.0 {
                    return bad("poisson_random needs qps > 0");
                }
            }
            WorkloadKind::TraceReplay => {
                if self.trace.is_none() {
                    return bad("trace_replay needs a trace path");
                }
            }
        }
        Ok(())
    }
}

fn stream(seed: u64, n: usize, vocab: u32) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

fn poisson_arrivals(rng: &mut ChaCha8Rng, qps: f64, duration_s: f64) -> Vec<f64> {
    let mut out = Vec::new();
    if qps <= 0.0 {
        return out;
    }
    let gap = Exp::new(qps).expect("qps checked positive");
    let mut t = 0.0;
    loop {
        t += gap.sample(rng);
        if t >= duration_s {
            return out;
        }
        out.push(t);
    }
}

fn secs(s: f64) -> Duration {
    Duration::from_secs_f64(s)
}

/// Builds the schedule for `spec`, sorted by arrival with ids `0..n`.
pub fn generate_workload(spec: &WorkloadSpec) -> Result<Vec<Scheduled>, BenchError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = match spec.kind {
        WorkloadKind::MultiRoundQa => multi_round(spec, &mut rng),
        WorkloadKind::PoissonRandom => poisson_random(spec, &mut rng),
        WorkloadKind::TraceReplay => trace_replay(spec)?,
    };
    out.sort_by_key(|s| (s.query.arrival, s.session, s.round));
    for (i, s) in out.iter_mut().enumerate() {
        s.query.id = i as u64;
    }
    Ok(out)
}

fn multi_round(spec: &WorkloadSpec, rng: &mut ChaCha8Rng) -> Vec<Scheduled> {
    let mut starts = vec![0.0; spec.initial_users];
    starts.extend(poisson_arrivals(rng, spec.qps, spec.duration_s));
    let mut out = Vec::new();
    for (user, start) in starts.into_iter().enumerate() {
        let seed: u64 = rng.gen();
        let mut prompt = stream(seed, spec.doc_tokens, spec.vocab);
        for round in 0..spec.rounds {
            prompt.extend(stream(
                seed ^ (round as u64 + 1).wrapping_mul(0x9e37_79b9),
                spec.question_tokens,
                spec.vocab,
            ));
            out.push(Scheduled {
                query: SimQuery::new(
                    0,
                    prompt.clone(),
                    spec.output_tokens,
                    secs(start + round as f64 * spec.round_interval_s),
                ),
                session: user as u64,
                round: round as u32,
            });
            // the next round sees this round's answer as history
            prompt.extend(output_tokens(&prompt, spec.output_tokens, spec.vocab));
        }
    }
    out
}

fn poisson_random(spec: &WorkloadSpec, rng: &mut ChaCha8Rng) -> Vec<Scheduled> {
    let docs: Vec<Vec<TokenId>> = (0..spec.num_docs)
        .map(|_| stream(rng.gen(), spec.doc_tokens, spec.vocab))
        .collect();
    poisson_arrivals(rng, spec.qps, spec.duration_s)
        .into_iter()
        .map(|t| {
            let d = rng.gen_range(0..docs.len());
            let mut tokens = docs[d].clone();
            let q = rng.gen_range(1..=spec.question_tokens);
            tokens.extend(stream(rng.gen(), q, spec.vocab));
            let out = rng.gen_range(0..=spec.output_tokens);
            Scheduled {
                query: SimQuery::new(0, tokens, out, secs(t)),
                session: d as u64,
                round: 0,
            }
        })
        .collect()
}

fn trace_replay(spec: &WorkloadSpec) -> Result<Vec<Scheduled>, BenchError> {
    let path = spec.trace.as_ref().expect("validated");
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<TraceRow>().enumerate() {
        let row = row?;
        if !(row.arrival_s >= 0.0 && row.arrival_s.is_finite()) {
            return Err(BenchError::Config(format!(
                "trace row {i}: bad arrival_s {}",
                row.arrival_s
            )));
        }
        if row.prefix_len + row.suffix_len == 0 {
            return Err(BenchError::Config(format!("trace row {i}: empty prompt")));
        }
        // one token stream per prefix id, so equal ids share a prefix
        let mut tokens = stream(
            spec.seed ^ row.prefix_id.wrapping_mul(0x2545_f491_4f6c_dd1d),
            row.prefix_len,
            spec.vocab,
        );
        tokens.extend(stream(
            spec.seed.wrapping_add(1 + i as u64).rotate_left(17),
            row.suffix_len,
            spec.vocab,
        ));
        out.push(Scheduled {
            query: SimQuery::new(0, tokens, row.output_len, secs(row.arrival_s)),
            session: row.prefix_id,
            round: 0,
        });
    }
    Ok(out)
}
