//! Re-ranking latency and throughput benchmark.
//!
//! Each query rescores a fixed candidate list (the first-stage output) with
//! one scoring mode; embeddings are precomputed, so only scoring and the
//! final sort are timed. A pool of worker threads pulls queries from a
//! shared counter, which keeps every worker busy for the whole measured
//! window.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Barrier, Mutex};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{l2_normalize, l2_normalize_rows, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::retrieval::{build_index, rerank, RankedList, RetrievalIndex};
use crate::similarity::{score_pair, Direction, ItemEmbedding, LateMatrix, ScoringMode};

pub const THREADS_ENV: &str = "BAGF_THREADS";
pub const MIN_WARMUP: usize = 10;
pub const TIMER: &str = "std::time::Instant (monotonic wall clock)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Visual rows per image.
    pub n: usize,
    /// Bags per text.
    pub k: usize,
    pub dim: usize,
    pub candidates: usize,
    pub queries: usize,
    pub warmup: usize,
    /// Worker count; `None` reads `BAGF_THREADS`, then the core count.
    pub threads: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n: 196,
            k: 32,
            dim: 64,
            candidates: 64,
            queries: 1000,
            warmup: 20,
            threads: None,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 || self.dim == 0 || self.candidates == 0 || self.queries == 0 {
            return Err(Error::InvalidConfig("n, k, dim, candidates and queries must be positive".into()));
        }
        if self.warmup < MIN_WARMUP {
            return Err(Error::InvalidConfig(format!("warmup must be at least {MIN_WARMUP}")));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidConfig("threads must be positive".into()));
        }
        Ok(())
    }

    pub fn resolved_threads(&self) -> Result<usize> {
        if let Some(t) = self.threads {
            return Ok(t);
        }
        match std::env::var(THREADS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(t) if t > 0 => Ok(t),
                _ => Err(Error::InvalidConfig(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
            },
            Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles over `samples_ms`.
    pub fn from_samples(samples_ms: &[f64]) -> Self {
        let mut sorted = samples_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = |p: f64| {
            let r = (p * sorted.len() as f64).ceil() as usize;
            sorted[r.clamp(1, sorted.len()) - 1]
        };
        Self {
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50: rank(0.50),
            p99: rank(0.99),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEcho {
    pub n: usize,
    pub k: usize,
    pub dim: usize,
    pub candidates: usize,
    pub queries: usize,
    pub warmup: usize,
    pub threads: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: ScoringMode,
    pub latency_ms: LatencyStats,
    pub throughput_qps: f64,
    pub config: BenchEcho,
    pub timer: String,
    /// Smallest observed nonzero step of the timer.
    pub timer_resolution_ns: u64,
    pub elapsed_s: f64,
}

fn random_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<EmbeddingMatrix> {
    let data = (0..rows * dim).map(|_| StandardNormal.sample(rng)).collect();
    l2_normalize_rows(&EmbeddingMatrix::new(dim, data)?)
}

fn random_item(id: String, late_rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<ItemEmbedding> {
    let cls: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    Ok(ItemEmbedding {
        id,
        cls: l2_normalize(&cls)?,
        late: Some(LateMatrix::unpadded(random_rows(late_rows, dim, rng)?)),
    })
}

fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Text queries (k bags) rescoring image candidates (n patches). Global
/// mode rescores with CLS inner products only.
fn rescore(index: &RetrievalIndex, query: &ItemEmbedding, list: &RankedList, mode: ScoringMode) -> Result<RankedList> {
    if mode.is_late() {
        return rerank(index, query, list, mode, Direction::T2i);
    }
    let mut ranking = list
        .ranking
        .iter()
        .map(|(id, _)| {
            let item = index.get(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
            Ok((id.clone(), score_pair(&query.cls, None, item, mode, Direction::T2i)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(RankedList {
        query_id: query.id.clone(),
        ranking,
    })
}

fn run_pool(
    threads: usize,
    jobs: usize,
    work: &(dyn Fn(usize) -> Result<()> + Sync),
) -> Result<(Vec<f64>, Duration)> {
    let next = AtomicUsize::new(0);
    let samples = Mutex::new(Vec::with_capacity(jobs));
    let failure = Mutex::new(None);
    let barrier = Barrier::new(threads + 1);
    let elapsed = std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| {
                let mut local = Vec::new();
                barrier.wait();
                loop {
                    let j = next.fetch_add(1, Ordering::Relaxed);
                    if j >= jobs {
                        break;
                    }
                    let t0 = Instant::now();
                    if let Err(e) = work(j) {
                        failure.lock().unwrap().get_or_insert(e);
                        next.store(jobs, Ordering::Relaxed);
                        break;
                    }
                    local.push(t0.elapsed().as_secs_f64() * 1e3);
                }
                samples.lock().unwrap().extend(local);
                barrier.wait();
            });
        }
        barrier.wait();
        let start = Instant::now();
        barrier.wait();
        start.elapsed()
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    Ok((samples.into_inner().unwrap(), elapsed))
}

/// Rescoring benchmark for one mode. Warmup queries run on the same pool
/// first and are excluded from all statistics.
pub fn bench_run(mode: ScoringMode, config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    let threads = config.resolved_threads()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let images = (0..config.candidates)
        .map(|i| random_item(format!("img{i:05}"), config.n, config.dim, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let late_modes: &[ScoringMode] = if mode.is_late() { &[mode] } else { &[] };
    let index = build_index(images, late_modes)?;
    let first_stage = RankedList {
        query_id: String::new(),
        ranking: index.items().iter().map(|it| (it.id.clone(), 0.0)).collect(),
    };
    let pool = config.queries.min(256);
    let queries = (0..pool)
        .map(|i| random_item(format!("txt{i:05}"), config.k, config.dim, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    let work = |j: usize| -> Result<()> {
        let out = rescore(&index, &queries[j % pool], &first_stage, mode)?;
        std::hint::black_box(out);
        Ok(())
    };
    run_pool(threads, config.warmup, &work)?;
    let (samples, elapsed) = run_pool(threads, config.queries, &work)?;

    let elapsed_s = elapsed.as_secs_f64().max(f64::MIN_POSITIVE);
    Ok(BenchReport {
        mode,
        latency_ms: LatencyStats::from_samples(&samples),
        throughput_qps: samples.len() as f64 / elapsed_s,
        config: BenchEcho {
            n: config.n,
            k: config.k,
            dim: config.dim,
            candidates: config.candidates,
            queries: config.queries,
            warmup: config.warmup,
            threads,
            seed: config.seed,
        },
        timer: TIMER.to_string(),
        timer_resolution_ns: timer_resolution().as_nanos() as u64,
        elapsed_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(candidates: usize, dim: usize) -> BenchConfig {
        BenchConfig {
            n: 49,
            k: 16,
            dim,
            candidates,
            queries: 200,
            warmup: 10,
            threads: Some(1),
            seed: 1,
        }
    }

    #[test]
    fn percentiles_nearest_rank() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        let st = LatencyStats::from_samples(&s);
        assert_eq!((st.p50, st.p99), (50.0, 99.0));
        assert!((st.mean - 50.5).abs() < 1e-12);
        assert_eq!(LatencyStats::from_samples(&[3.0]).p99, 3.0);
    }

    #[test]
    fn report_invariants_and_echo() {
        for mode in ScoringMode::ALL {
            let r = bench_run(mode, &small(64, 16)).unwrap();
            assert!(r.throughput_qps > 0.0);
            assert!(r.latency_ms.p50 <= r.latency_ms.p99);
            assert_eq!(r.config.candidates, 64);
            assert_eq!(r.mode, mode);
        }
    }

    #[test]
    fn fewer_candidates_is_faster() {
        let one = bench_run(ScoringMode::BagWise, &small(1, 32)).unwrap();
        let many = bench_run(ScoringMode::BagWise, &small(64, 32)).unwrap();
        assert!(one.latency_ms.mean < many.latency_ms.mean);
    }

    #[test]
    fn larger_dim_is_not_faster() {
        let narrow = bench_run(ScoringMode::BagWise, &small(64, 32)).unwrap();
        let wide = bench_run(ScoringMode::BagWise, &small(64, 64)).unwrap();
        assert!(wide.latency_ms.mean >= narrow.latency_ms.mean, "{narrow:?} {wide:?}");
    }

    #[test]
    fn config_validation() {
        assert!(bench_run(ScoringMode::Global, &BenchConfig { warmup: 5, ..small(4, 4) }).is_err());
        assert!(bench_run(ScoringMode::Global, &BenchConfig { candidates: 0, ..small(4, 4) }).is_err());
        assert!(bench_run(ScoringMode::Global, &BenchConfig { threads: Some(0), ..small(4, 4) }).is_err());
    }
}
