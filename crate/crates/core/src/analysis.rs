//! Experiment protocols over traces and live toy-model runs.
//!
//! * consistency: Jaccard similarity between the tokens a budgeted replay
//!   retains and the top-B tokens under the same importance method with the
//!   full cache, per position, head and layer;
//! * std trajectories of the attention a token receives;
//! * perplexity under a budget;
//! * scope-size sweeps (local window vs. top-r standard deviation);
//! * block-size sweeps and token agreement with full-cache generation.
//!
//! Every experiment is a grid of independent cells evaluated through
//! [`Exec`], so the parallel and sequential paths produce identical output.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cache::{BudgetSpec, CacheSet};
use crate::error::{Error, Result};
use crate::model::{forward_step, generate, generate_with, init_model, ModelConfig, ToyModel};
use crate::parallel::Exec;
use crate::policies::{importance_scores, EvictionContext, ImportanceMethod, PolicySpec, ScopeKind, ScopeSize};
use crate::stats::streaming_std;
use crate::tensor::softmax_row;
use crate::trace::{replay_visit, AttentionTrace};

/// `|a ∩ b| / |a ∪ b|`; two empty sets are identical.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: HashSet<usize> = a.iter().copied().collect();
    let b: HashSet<usize> = b.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// The `k` most important positions (ties keep the newer position),
/// returned in ascending order.
pub fn top_positions(scores: &[f64], positions: &[usize], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| positions[b].cmp(&positions[a]))
    });
    let mut top: Vec<usize> = order.into_iter().take(k).map(|i| positions[i]).collect();
    top.sort_unstable();
    top
}

// ---------------------------------------------------------------------------
// CSV

pub const CSV_HEADER: &str = "experiment,method,budget,r,b,seed,metric,value";

/// One output row: `experiment,method,budget,r,b,seed,metric,value`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub experiment: String,
    pub method: String,
    pub budget: f64,
    pub r: usize,
    pub b: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub fn render_csv(rows: &[CsvRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.experiment, r.method, r.budget, r.r, r.b, r.seed, r.metric, r.value
        )
        .unwrap();
    }
    out
}

pub fn write_csv(path: &Path, rows: &[CsvRow]) -> Result<()> {
    crate::io::write_atomic(path, render_csv(rows).as_bytes())
}

// ---------------------------------------------------------------------------
// Corpora and traces from the toy model

/// Samples `count` sequences of `len` tokens from the model at temperature 1
/// with a full cache. The first token is drawn uniformly.
pub fn sample_corpus(model: &ToyModel, count: usize, len: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = Vec::with_capacity(count);
    for _ in 0..count {
        let mut caches = CacheSet::unbounded(cfg.layers, cfg.kv_heads, cfg.head_dim);
        let mut seq = Vec::with_capacity(len);
        if len > 0 {
            seq.push(rng.gen_range(1..cfg.vocab as u32));
        }
        while seq.len() < len {
            let pos = seq.len() - 1;
            let out = forward_step(model, seq[pos], pos, &mut caches)?;
            let probs = softmax_row(&out.logits)?;
            let dist = WeightedIndex::new(probs.as_slice()).map_err(|e| Error::invalid(e.to_string()))?;
            seq.push(dist.sample(&mut rng) as u32);
        }
        corpus.push(seq);
    }
    Ok(corpus)
}

/// Full-cache attention trace of a teacher-forced token sequence.
pub fn trace_sequence(model: &ToyModel, tokens: &[u32], source: &str) -> Result<AttentionTrace> {
    let cfg = model.config();
    let mut caches = CacheSet::unbounded(cfg.layers, cfg.kv_heads, cfg.head_dim);
    let steps = tokens
        .iter()
        .enumerate()
        .map(|(pos, &t)| forward_step(model, t, pos, &mut caches))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionTrace::from_steps(cfg, &steps, source))
}

/// `count` traces of `len` steps; trace `i` comes from a model seeded
/// `base.seed + i` reading a sequence it sampled itself.
pub fn toy_traces(base: ModelConfig, count: usize, len: usize, exec: Exec) -> Result<Vec<AttentionTrace>> {
    let seeds: Vec<u64> = (0..count as u64).map(|i| base.seed + i).collect();
    exec.map(&seeds, |&seed| {
        let model = init_model(ModelConfig { seed, ..base })?;
        let corpus = sample_corpus(&model, 1, len, seed ^ 0x5eed)?;
        trace_sequence(&model, &corpus[0], &format!("toy-seed-{seed}"))
    })
    .into_iter()
    .collect()
}

// ---------------------------------------------------------------------------
// Consistency

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyCell {
    pub budget: f64,
    pub method: String,
    /// Mean Jaccard over every (trace, step, layer, kv head) sample.
    pub mean: f64,
    /// Mean Jaccard per position, over traces, layers and heads.
    pub curve: Vec<f64>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConsistencyReport {
    pub cells: Vec<ConsistencyCell>,
    /// Budgets outside `(0, 1]` that were not run.
    pub skipped: Vec<f64>,
}

impl ConsistencyReport {
    pub fn cell(&self, budget: f64, method: &str) -> Option<&ConsistencyCell> {
        self.cells.iter().find(|c| c.budget == budget && c.method == method)
    }

    pub fn csv_rows(&self, seed: u64) -> Vec<CsvRow> {
        self.cells
            .iter()
            .map(|c| CsvRow {
                experiment: "consistency".into(),
                method: c.method.clone(),
                budget: c.budget,
                r: 0,
                b: 1,
                seed,
                metric: "mean_jaccard".into(),
                value: c.mean,
            })
            .collect()
    }
}

/// Per-step, per-head Jaccard values of one trace under one policy:
/// `out[step]` holds one value per `(layer, kv_head)`.
fn jaccard_series(trace: &AttentionTrace, policy: &PolicySpec, budget: f64) -> Result<Vec<Vec<f64>>> {
    let h = &trace.header;
    let resolved = BudgetSpec::rate(budget).resolve(policy, trace.steps())?;
    let k = resolved.tokens.expect("rate budgets are bounded");
    let method = policy.importance;
    let global_policy = PolicySpec {
        name: "full".into(),
        importance: method,
        scope: ScopeKind::All,
    };
    let full = BudgetSpec::unbounded().resolve(&global_policy, trace.steps())?;

    let mut global_top: Vec<Vec<Vec<usize>>> = Vec::with_capacity(trace.steps());
    replay_visit(
        trace,
        full,
        |step, caches| {
            let mut per_head = Vec::with_capacity(h.layers * h.kv_heads);
            for layer in 0..h.layers {
                for kv in 0..h.kv_heads {
                    let head = caches.head(layer, kv);
                    let ctx = EvictionContext { layer, head: kv, step };
                    let scores = importance_scores(head.stats(), head.positions(), method, ctx);
                    per_head.push(top_positions(&scores, head.positions(), k.min(step + 1)));
                }
            }
            global_top.push(per_head);
        },
        |_| {},
    )?;

    let mut series = Vec::with_capacity(trace.steps());
    replay_visit(
        trace,
        resolved,
        |step, caches| {
            let mut row = Vec::with_capacity(h.layers * h.kv_heads);
            for layer in 0..h.layers {
                for kv in 0..h.kv_heads {
                    let local = caches.head(layer, kv).positions();
                    row.push(jaccard(local, &global_top[step][layer * h.kv_heads + kv]));
                }
            }
            series.push(row);
        },
        |_| {},
    )?;
    Ok(series)
}

fn summarize(series: &[Vec<Vec<f64>>]) -> (f64, Vec<f64>, usize) {
    let steps = series.iter().map(Vec::len).max().unwrap_or(0);
    let mut curve_sum = vec![0.0; steps];
    let mut curve_n = vec![0usize; steps];
    let mut total = 0.0;
    let mut samples = 0;
    for trace in series {
        for (t, row) in trace.iter().enumerate() {
            for &j in row {
                curve_sum[t] += j;
                curve_n[t] += 1;
                total += j;
                samples += 1;
            }
        }
    }
    let curve = curve_sum
        .iter()
        .zip(&curve_n)
        .map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect();
    let mean = if samples == 0 { 0.0 } else { total / samples as f64 };
    (mean, curve, samples)
}

/// Jaccard consistency of each importance method against its own
/// full-cache ranking, with an empty eviction scope.
pub fn consistency_experiment(
    traces: &[AttentionTrace],
    budgets: &[f64],
    methods: &[ImportanceMethod],
    exec: Exec,
) -> Result<ConsistencyReport> {
    let mut report = ConsistencyReport::default();
    let mut cells = Vec::new();
    for &budget in budgets {
        if !(budget > 0.0 && budget <= 1.0) {
            eprintln!("warning: skipping budget {budget}: outside (0, 1]");
            report.skipped.push(budget);
            continue;
        }
        for &m in methods {
            for (ti, _) in traces.iter().enumerate() {
                cells.push((budget, m, ti));
            }
        }
    }
    let series = exec.map(&cells, |&(budget, m, ti)| {
        let spec = PolicySpec {
            name: m.label().into(),
            importance: m,
            scope: ScopeKind::All,
        };
        jaccard_series(&traces[ti], &spec, budget)
    });
    let series = series.into_iter().collect::<Result<Vec<_>>>()?;
    for (chunk, cell) in series.chunks(traces.len().max(1)).zip(cells.chunks(traces.len().max(1))) {
        let (budget, m, _) = cell[0];
        let (mean, curve, samples) = summarize(chunk);
        report.cells.push(ConsistencyCell {
            budget,
            method: m.label().into(),
            mean,
            curve,
            samples,
        });
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Std trajectories

/// Running standard deviation of the attention that `position` receives in
/// `(layer, head)`, one entry per step from `position` onward. Stops early if
/// the position stops appearing in the recorded rows.
pub fn std_trajectory(
    trace: &AttentionTrace,
    position: usize,
    layer: usize,
    head: usize,
) -> Result<Vec<(usize, f64)>> {
    let h = &trace.header;
    if position >= h.steps || layer >= h.layers || head >= h.query_heads {
        return Err(Error::invalid(format!(
            "position {position}, layer {layer}, head {head} outside the trace"
        )));
    }
    let (mut acc, mut acc_sq, mut count) = (0.0f64, 0.0f64, 0u32);
    let mut out = Vec::with_capacity(h.steps - position);
    for step in position..h.steps {
        let rec = trace.record(step, layer, head);
        let Ok(idx) = rec.positions.binary_search(&(position as u32)) else {
            break;
        };
        let p = f64::from(rec.probs[idx]);
        acc += p;
        acc_sq += p * p;
        count += 1;
        out.push((step, streaming_std(acc, acc_sq, count)));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Perplexity

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perplexity {
    pub nll_sum: f64,
    pub targets: usize,
}

impl Perplexity {
    pub fn value(&self) -> f64 {
        if self.targets == 0 {
            return f64::NAN;
        }
        (self.nll_sum / self.targets as f64).exp()
    }
}

fn log_prob(logits: &[f32], target: u32) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = logits.iter().map(|&l| (f64::from(l) - max).exp()).sum();
    f64::from(logits[target as usize]) - max - z.ln()
}

/// Next-token perplexity of `corpus` with eviction active. Sequences shorter
/// than two tokens have no targets and are skipped. `budget = None` runs
/// with a full cache.
pub fn perplexity(
    model: &ToyModel,
    corpus: &[Vec<u32>],
    policy: &PolicySpec,
    budget: Option<BudgetSpec>,
) -> Result<Perplexity> {
    let cfg = model.config();
    let mut result = Perplexity {
        nll_sum: 0.0,
        targets: 0,
    };
    for seq in corpus.iter().filter(|s| s.len() >= 2) {
        let mut caches = match budget {
            Some(b) => CacheSet::new(cfg.layers, cfg.kv_heads, cfg.head_dim, b.resolve(policy, seq.len())?),
            None => CacheSet::unbounded(cfg.layers, cfg.kv_heads, cfg.head_dim),
        };
        for (pos, &tok) in seq[..seq.len() - 1].iter().enumerate() {
            let out = forward_step(model, tok, pos, &mut caches)?;
            result.nll_sum -= log_prob(&out.logits, seq[pos + 1]);
            result.targets += 1;
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerplexityCell {
    pub budget: f64,
    pub policy: String,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerplexityReport {
    pub full_cache: f64,
    pub cells: Vec<PerplexityCell>,
}

impl PerplexityReport {
    pub fn csv_rows(&self, block: usize, seed: u64) -> Vec<CsvRow> {
        self.cells
            .iter()
            .map(|c| CsvRow {
                experiment: "perplexity".into(),
                method: c.policy.clone(),
                budget: c.budget,
                r: 0,
                b: block,
                seed,
                metric: "perplexity".into(),
                value: c.perplexity,
            })
            .collect()
    }
}

/// Perplexity for every `(budget rate, policy)` cell plus the full cache.
pub fn perplexity_sweep(
    model: &ToyModel,
    corpus: &[Vec<u32>],
    budgets: &[f64],
    policies: &[PolicySpec],
    block: usize,
    exec: Exec,
) -> Result<PerplexityReport> {
    let full = perplexity(model, corpus, &PolicySpec::canonical("h2o", 0)?, None)?.value();
    let cells: Vec<(f64, &PolicySpec)> = budgets
        .iter()
        .flat_map(|&b| policies.iter().map(move |p| (b, p)))
        .collect();
    let values = exec.map(&cells, |&(b, p)| {
        perplexity(model, corpus, p, Some(BudgetSpec::rate(b).with_block(block))).map(|r| r.value())
    });
    let cells = cells
        .iter()
        .zip(values)
        .map(|(&(budget, p), v)| {
            Ok(PerplexityCell {
                budget,
                policy: p.name.clone(),
                perplexity: v?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PerplexityReport {
        full_cache: full,
        cells,
    })
}

// ---------------------------------------------------------------------------
// Scope sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepScope {
    LocalWindow,
    TopStd,
}

impl SweepScope {
    pub fn label(self) -> &'static str {
        match self {
            SweepScope::LocalWindow => "window",
            SweepScope::TopStd => "std",
        }
    }

    fn spec(self, r: usize) -> PolicySpec {
        let size = ScopeSize::Fixed(r);
        PolicySpec {
            name: format!("mas+{}({r})", self.label()),
            importance: ImportanceMethod::Mas,
            scope: match self {
                SweepScope::LocalWindow => ScopeKind::LocalWindow(size),
                SweepScope::TopStd => ScopeKind::TopStd(size),
            },
        }
    }
}

/// What a scope sweep measures.
pub enum SweepSource<'a> {
    /// Mean Jaccard of budgeted replay against full-cache MAS rankings.
    Replay(&'a [AttentionTrace]),
    /// Perplexity of live constrained runs over a corpus.
    Live { model: &'a ToyModel, corpus: &'a [Vec<u32>] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub scope: SweepScope,
    pub r: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScopeSweepReport {
    pub metric: &'static str,
    pub budget: f64,
    pub block: usize,
    pub cells: Vec<SweepCell>,
    pub skipped: Vec<usize>,
}

impl ScopeSweepReport {
    /// `max − min` of the metric across the swept `r` values of one scope.
    pub fn sensitivity(&self, scope: SweepScope) -> f64 {
        let vals: Vec<f64> = self.cells.iter().filter(|c| c.scope == scope).map(|c| c.value).collect();
        if vals.is_empty() {
            return 0.0;
        }
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }

    pub fn csv_rows(&self, seed: u64) -> Vec<CsvRow> {
        let mut rows: Vec<CsvRow> = self
            .cells
            .iter()
            .map(|c| CsvRow {
                experiment: "scope_sweep".into(),
                method: format!("mas+{}", c.scope.label()),
                budget: self.budget,
                r: c.r,
                b: self.block,
                seed,
                metric: self.metric.into(),
                value: c.value,
            })
            .collect();
        for scope in [SweepScope::LocalWindow, SweepScope::TopStd] {
            rows.push(CsvRow {
                experiment: "scope_sweep".into(),
                method: format!("mas+{}", scope.label()),
                budget: self.budget,
                r: 0,
                b: self.block,
                seed,
                metric: "sensitivity".into(),
                value: self.sensitivity(scope),
            });
        }
        rows
    }
}

/// MAS paired with a local window and with the top-r std scope for each `r`.
/// Values of `r` that leave no room for one block are skipped.
pub fn scope_sweep(
    source: SweepSource<'_>,
    budget: f64,
    r_values: &[usize],
    block: usize,
    exec: Exec,
) -> Result<ScopeSweepReport> {
    let seq_len = match &source {
        SweepSource::Replay(traces) => traces.iter().map(|t| t.steps()).min().unwrap_or(0),
        SweepSource::Live { corpus, .. } => corpus.iter().map(Vec::len).min().unwrap_or(0),
    };
    let tokens = ((budget * seq_len as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut skipped = Vec::new();
    let mut cells = Vec::new();
    for &r in r_values {
        if r + block > tokens {
            eprintln!("warning: skipping r={r}: budget of {tokens} tokens leaves no room for block {block}");
            skipped.push(r);
            continue;
        }
        for scope in [SweepScope::LocalWindow, SweepScope::TopStd] {
            cells.push((scope, r));
        }
    }
    let (metric, values) = match source {
        SweepSource::Replay(traces) => {
            let jobs: Vec<(usize, usize)> = (0..cells.len())
                .flat_map(|c| (0..traces.len()).map(move |t| (c, t)))
                .collect();
            let series = exec.map(&jobs, |&(c, t)| {
                let (scope, r) = cells[c];
                let spec = scope.spec(r);
                jaccard_series(&traces[t], &spec, budget)
            });
            let series = series.into_iter().collect::<Result<Vec<_>>>()?;
            let per_cell = traces.len().max(1);
            let values: Vec<f64> = series.chunks(per_cell).map(|chunk| summarize(chunk).0).collect();
            ("mean_jaccard", values)
        }
        SweepSource::Live { model, corpus } => {
            let values = exec.map(&cells, |&(scope, r)| {
                perplexity(model, corpus, &scope.spec(r), Some(BudgetSpec::rate(budget).with_block(block)))
                    .map(|p| p.value())
            });
            ("perplexity", values.into_iter().collect::<Result<Vec<_>>>()?)
        }
    };
    Ok(ScopeSweepReport {
        metric,
        budget,
        block,
        cells: cells
            .into_iter()
            .zip(values)
            .map(|((scope, r), value)| SweepCell { scope, r, value })
            .collect(),
        skipped,
    })
}

// ---------------------------------------------------------------------------
// Generation agreement and block sweeps

/// Fraction of positions where two generations agree, over the longer one.
pub fn token_agreement(a: &[u32], b: &[u32]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / longest as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCell {
    pub block: usize,
    pub agreement: f64,
    pub eviction_events: usize,
    /// Wall-clock seconds spent prefilling; informational only.
    pub prefill_seconds: f64,
}

/// Generation under `policy` at a budget rate for each block size, compared
/// against full-cache generation. Runs sequentially so prefill timings are
/// not distorted by contention.
pub fn block_sweep(
    model: &ToyModel,
    prompts: &[Vec<u32>],
    max_new: usize,
    policy: &PolicySpec,
    budget: f64,
    blocks: &[usize],
) -> Result<Vec<BlockCell>> {
    let cfg = model.config();
    let mut reference = Vec::with_capacity(prompts.len());
    for p in prompts {
        let mut caches = CacheSet::unbounded(cfg.layers, cfg.kv_heads, cfg.head_dim);
        reference.push(generate(model, p, max_new, &mut caches)?.tokens);
    }
    let mut out = Vec::with_capacity(blocks.len());
    for &b in blocks {
        let mut agreement = 0.0;
        let mut events = 0;
        let mut prefill = 0.0;
        for (p, full) in prompts.iter().zip(&reference) {
            let spec = BudgetSpec::rate(budget).with_block(b);
            let mut caches = CacheSet::new(cfg.layers, cfg.kv_heads, cfg.head_dim, spec.resolve(policy, p.len())?);
            let start = Instant::now();
            generate_with(model, p, 0, &mut caches, |_| {})?;
            prefill += start.elapsed().as_secs_f64();
            let mut caches = CacheSet::new(cfg.layers, cfg.kv_heads, cfg.head_dim, spec.resolve(policy, p.len())?);
            let g = generate(model, p, max_new, &mut caches)?;
            agreement += token_agreement(&g.tokens[p.len()..], &full[p.len()..]);
            events += caches.total_eviction_events();
        }
        let n = prompts.len().max(1) as f64;
        out.push(BlockCell {
            block: b,
            agreement: agreement / n,
            eviction_events: events,
            prefill_seconds: prefill,
        });
    }
    Ok(out)
}
