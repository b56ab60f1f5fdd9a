//! Trace replay: per-layer compression runs, budget/τ sweeps and the
//! uniform-attention proof check. Everything here is deterministic given
//! its inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{CompressionConfig, CompressionResult, LayerStats, MergeStrategy, Policy};
use crate::policy::compress_layer;
use crate::redistribution::{raw_column_sums, redistribute, uniform_attention};
use crate::trace::Trace;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Threshold grid used for τ sweeps.
pub const TAU_GRID: [f64; 11] = [0.01, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Worst allowed deviation in the proof check.
pub const PROOF_TOL: f64 = 1e-9;

// ── Budget ──────────────────────────────────────────────────────────────────

/// Cache budget as a share of the multimodal tokens or an absolute count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    Fraction(f64),
    Tokens(usize),
}

impl Budget {
    /// Token count for a sequence with `multimodal` video+audio tokens.
    /// Fractions round up.
    #[must_use]
    pub fn resolve(self, multimodal: usize) -> usize {
        match self {
            Self::Tokens(n) => n,
            // The epsilon keeps e.g. 0.1 * 30 from rounding up to 4.
            Self::Fraction(f) => (f * multimodal as f64 - 1e-9).ceil().max(0.0) as usize,
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fraction(x) => write!(f, "{x}"),
            Self::Tokens(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for Budget {
    type Err = Error;

    /// Integers are token counts; decimals in `(0, 1]` are fractions; a
    /// trailing `%` is a percentage.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(pct) = s.strip_suffix('%') {
            let p: f64 = pct.parse().map_err(|_| Error::Config(format!("bad budget {s:?}")))?;
            return Self::Fraction(p / 100.0).checked();
        }
        if let Ok(n) = s.parse::<usize>() {
            return Ok(Self::Tokens(n));
        }
        let f: f64 = s.parse().map_err(|_| Error::Config(format!("bad budget {s:?}")))?;
        Self::Fraction(f).checked()
    }
}

impl Budget {
    fn checked(self) -> Result<Self> {
        match self {
            Self::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                Err(Error::Config(format!("budget fraction {f} outside (0, 1]")))
            }
            b => Ok(b),
        }
    }
}

// ── Runs ────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct TraceSummary {
    pub num_layers: usize,
    pub n_video: usize,
    pub n_audio: usize,
    pub n_text: usize,
    pub d_k: usize,
    pub metadata: BTreeMap<String, String>,
}

impl From<&Trace> for TraceSummary {
    fn from(t: &Trace) -> Self {
        Self {
            num_layers: t.num_layers(),
            n_video: t.layout.n_video(),
            n_audio: t.layout.n_audio(),
            n_text: t.layout.n_text(),
            d_k: t.d_k,
            metadata: t.metadata.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    pub total_rows: usize,
    pub final_rows: usize,
    /// Final rows over original rows, all layers.
    pub retained_token_ratio: f64,
    pub multimodal_retained_ratio: f64,
    /// Per layer: original video tokens kept, over the video span.
    pub video_retention: Vec<f64>,
    pub audio_retention: Vec<f64>,
    /// Mean over layers that ran alignment.
    pub mean_alignment_similarity: Option<f64>,
    pub budget_violations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub policy: String,
    pub budget: Budget,
    pub config: CompressionConfig,
    pub trace: TraceSummary,
    pub layers: Vec<LayerStats>,
    pub aggregate: Aggregate,
}

/// Resolves `budget` against `trace` into a concrete configuration.
#[must_use]
pub fn resolve_config(trace: &Trace, mut cfg: CompressionConfig, budget: Budget) -> CompressionConfig {
    cfg.budget_k = budget.resolve(trace.layout.multimodal_len());
    cfg
}

/// Compresses every layer of `trace` (in parallel) with `cfg`.
pub fn compress_trace(trace: &Trace, cfg: &CompressionConfig) -> Result<Vec<CompressionResult>> {
    cfg.validate()?;
    trace
        .layers
        .par_iter()
        .enumerate()
        .map(|(n, layer)| compress_layer(n, &layer.attention, &layer.kv, &trace.layout, cfg))
        .collect()
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[must_use]
pub fn aggregate(trace: &Trace, cfg: &CompressionConfig, results: &[CompressionResult]) -> Aggregate {
    let lay = &trace.layout;
    let total_rows = lay.seq_len() * results.len();
    let final_rows: usize = results.iter().map(|r| r.final_kv.len()).sum();
    let mm_total = lay.multimodal_len() * results.len();
    let mm_final = final_rows - lay.n_text() * results.len();
    let sims: Vec<f64> = results.iter().filter_map(|r| r.stats.mean_similarity).collect();
    Aggregate {
        total_rows,
        final_rows,
        retained_token_ratio: ratio(final_rows, total_rows),
        multimodal_retained_ratio: ratio(mm_final, mm_total),
        video_retention: results.iter().map(|r| ratio(r.retained_video.len(), lay.n_video())).collect(),
        audio_retention: results.iter().map(|r| ratio(r.retained_audio.len(), lay.n_audio())).collect(),
        mean_alignment_similarity: (!sims.is_empty()).then(|| sims.iter().sum::<f64>() / sims.len() as f64),
        budget_violations: results.iter().filter(|r| r.violates_budget(cfg.budget_k, lay.n_text())).count(),
    }
}

/// Resolves the budget, compresses every layer and summarises the run.
pub fn run_trace(
    trace: &Trace,
    cfg: CompressionConfig,
    budget: Budget,
) -> Result<(RunReport, Vec<CompressionResult>)> {
    let cfg = resolve_config(trace, cfg, budget);
    let results = compress_trace(trace, &cfg)?;
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        policy: policy_label(&cfg),
        budget,
        config: cfg,
        trace: TraceSummary::from(trace),
        layers: results.iter().map(|r| r.stats.clone()).collect(),
        aggregate: aggregate(trace, &cfg, &results),
    };
    Ok((report, results))
}

// ── Sweeps ──────────────────────────────────────────────────────────────────

/// One CSV row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub policy: String,
    pub budget: String,
    pub budget_k: usize,
    pub tau: f64,
    pub merge_strategy: MergeStrategy,
    pub final_rows: usize,
    pub retained_ratio: f64,
    pub multimodal_retained_ratio: f64,
    pub kept_video: usize,
    pub kept_audio: usize,
    pub merged_rows: usize,
    pub evicted: usize,
    pub alignment_evicted: usize,
    /// Empty when no layer ran alignment.
    pub mean_similarity: Option<f64>,
    pub budget_violations: usize,
}

/// Display name of a configured policy; layer-gated eviction gets a
/// `-high` suffix.
#[must_use]
pub fn policy_label(cfg: &CompressionConfig) -> String {
    match (cfg.policy, cfg.high_layer_start) {
        (Policy::EvictModality(_), Some(_)) => format!("{}-high", cfg.policy.name()),
        (p, _) => p.name().to_string(),
    }
}

/// Runs every `(config, budget, tau)` combination, in that nesting order.
/// Each config's own `tau` and `budget_k` are overridden.
pub fn sweep(
    trace: &Trace,
    configs: &[CompressionConfig],
    budgets: &[Budget],
    taus: &[f64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(configs.len() * budgets.len() * taus.len());
    for base in configs {
        for &budget in budgets {
            for &tau in taus {
                let cfg = CompressionConfig { tau, ..*base };
                let (report, results) = run_trace(trace, cfg, budget)?;
                let sum = |f: fn(&LayerStats) -> usize| report.layers.iter().map(f).sum::<usize>();
                rows.push(SweepRow {
                    policy: policy_label(&cfg),
                    budget: budget.to_string(),
                    budget_k: report.config.budget_k,
                    tau,
                    merge_strategy: base.merge_strategy,
                    final_rows: report.aggregate.final_rows,
                    retained_ratio: report.aggregate.retained_token_ratio,
                    multimodal_retained_ratio: report.aggregate.multimodal_retained_ratio,
                    kept_video: sum(|s| s.retained_video),
                    kept_audio: sum(|s| s.retained_audio),
                    merged_rows: sum(|s| s.merged_rows),
                    evicted: results.iter().map(|r| r.evicted.len()).sum(),
                    alignment_evicted: sum(|s| s.alignment_evicted),
                    mean_similarity: report.aggregate.mean_alignment_similarity,
                    budget_violations: report.aggregate.budget_violations,
                });
            }
        }
    }
    Ok(rows)
}

// ── Proof check ─────────────────────────────────────────────────────────────

/// Test hook: doubles redistributed entry `(row, col)` of the length-`l` case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InjectedFault {
    pub l: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProofCheck {
    /// Raw column sum differs from `H_l - H_j`.
    RawHarmonic,
    /// Raw column sums fail to strictly decrease.
    RawMonotone,
    /// Redistributed column sum differs from 1.
    Redistributed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProofFailure {
    pub l: usize,
    pub column: usize,
    pub check: ProofCheck,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProofReport {
    pub max_l: usize,
    pub tolerance: f64,
    pub worst_raw_deviation: f64,
    pub worst_redistributed_deviation: f64,
    pub failures: Vec<ProofFailure>,
}

impl ProofReport {
    #[must_use]
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks, for every `l` in `1..=max_l`, that uniform attention has raw
/// column sums `H_l - H_j` (strictly decreasing) and redistributed column
/// sums of exactly one.
#[must_use]
pub fn verify_proof(max_l: usize, fault: Option<InjectedFault>) -> ProofReport {
    // Prefix harmonic numbers, independent of the column summation order.
    let mut h = vec![0.0f64; max_l + 1];
    for n in 1..=max_l {
        h[n] = h[n - 1] + 1.0 / n as f64;
    }
    let mut report = ProofReport {
        max_l,
        tolerance: PROOF_TOL,
        worst_raw_deviation: 0.0,
        worst_redistributed_deviation: 0.0,
        failures: Vec::new(),
    };
    for l in 1..=max_l {
        let a = uniform_attention(l);
        let raw = raw_column_sums(&a);
        let mut redist = redistribute(&a);
        if let Some(f) = fault.filter(|f| f.l == l && f.col <= f.row && f.row < l) {
            redist.entries_mut()[[f.row, f.col]] *= 2.0;
        }
        let redist = redist.column_sums();
        for j in 0..l {
            let dev_raw = (raw[j] - (h[l] - h[j])).abs();
            let dev_red = (redist[j] - 1.0).abs();
            report.worst_raw_deviation = report.worst_raw_deviation.max(dev_raw);
            report.worst_redistributed_deviation = report.worst_redistributed_deviation.max(dev_red);
            let mut fail = |check, deviation| {
                report.failures.push(ProofFailure { l, column: j, check, deviation });
            };
            if dev_raw > PROOF_TOL {
                fail(ProofCheck::RawHarmonic, dev_raw);
            }
            if dev_red > PROOF_TOL {
                fail(ProofCheck::Redistributed, dev_red);
            }
            if j > 0 && raw[j] >= raw[j - 1] {
                fail(ProofCheck::RawMonotone, raw[j] - raw[j - 1]);
            }
        }
    }
    report
}
