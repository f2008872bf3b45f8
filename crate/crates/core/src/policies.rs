//! Eviction policies as the composition of an importance score and an
//! eviction scope.
//!
//! The importance score orders tokens (higher = more important, lowest is
//! evicted first); the scope decides which slots are eligible at all. The six
//! named policies bind one of each:
//!
//! | name           | importance | scope                      |
//! |----------------|------------|----------------------------|
//! | `random`       | Random     | All                        |
//! | `streamllm`    | Recency    | 4 sink tokens protected    |
//! | `scissorhands` | AQAS       | local window of `r`        |
//! | `h2o`          | AAS        | local window of `r`        |
//! | `tova`         | LTAS       | All                        |
//! | `roco`         | MAS        | top-`r` standard deviation |
//!
//! Ties are always resolved toward evicting the older position, and, inside
//! the standard-deviation scope, toward protecting the more recent one.

use std::cmp::Ordering;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::stats::ImportanceStats;
use crate::tensor::ProbRow;

/// Attention-sink tokens kept by the StreamLLM scope.
pub const SINK_TOKENS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ImportanceMethod {
    /// Seeded uniform draws, re-drawn at every eviction event.
    Random { seed: u64 },
    /// Position itself: older tokens score lower.
    Recency,
    /// Accumulated attention score.
    Aas,
    /// Accumulated count of above-average attention.
    Aqas,
    /// Attention received from the most recent row.
    Ltas,
    /// Accumulated attention divided by the number of rows attended.
    Mas,
}

impl ImportanceMethod {
    pub fn label(&self) -> &'static str {
        match self {
            ImportanceMethod::Random { .. } => "random",
            ImportanceMethod::Recency => "recency",
            ImportanceMethod::Aas => "aas",
            ImportanceMethod::Aqas => "aqas",
            ImportanceMethod::Ltas => "ltas",
            ImportanceMethod::Mas => "mas",
        }
    }

    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "random" => ImportanceMethod::Random { seed },
            "recency" => ImportanceMethod::Recency,
            "aas" => ImportanceMethod::Aas,
            "aqas" => ImportanceMethod::Aqas,
            "ltas" => ImportanceMethod::Ltas,
            "mas" => ImportanceMethod::Mas,
            other => return Err(Error::invalid(format!("unknown importance method {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScopeMethod {
    All,
    /// Protects the `r` most recent slots.
    LocalWindow(usize),
    /// Protects the first [`SINK_TOKENS`] slots.
    SinkPlusRecency,
    /// Protects the `r` slots with the largest attention standard deviation.
    TopStd(usize),
}

impl ScopeMethod {
    /// Number of slots this scope protects in a cache of `n` slots.
    pub fn protected(&self, n: usize) -> usize {
        match *self {
            ScopeMethod::All => 0,
            ScopeMethod::LocalWindow(r) | ScopeMethod::TopStd(r) => r.min(n),
            ScopeMethod::SinkPlusRecency => SINK_TOKENS.min(n),
        }
    }
}

impl fmt::Display for ScopeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScopeMethod::All => write!(f, "all"),
            ScopeMethod::LocalWindow(r) => write!(f, "window({r})"),
            ScopeMethod::SinkPlusRecency => write!(f, "sink"),
            ScopeMethod::TopStd(r) => write!(f, "std({r})"),
        }
    }
}

/// A fully bound policy: importance method plus a scope with a concrete size.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Policy {
    pub name: String,
    pub importance: ImportanceMethod,
    pub scope: ScopeMethod,
}

impl Policy {
    pub fn new(name: impl Into<String>, importance: ImportanceMethod, scope: ScopeMethod) -> Self {
        Policy {
            name: name.into(),
            importance,
            scope,
        }
    }

    /// Picks `how_many` victim slots. `ctx` seeds the Random method.
    pub fn choose_victims(
        &self,
        stats: &ImportanceStats,
        positions: &[usize],
        how_many: usize,
        ctx: EvictionContext,
    ) -> Result<Vec<usize>> {
        let scores = importance_scores(stats, positions, self.importance, ctx);
        let candidates = eviction_scope(self.scope, positions, stats)?;
        select_victims(&scores, positions, &candidates, how_many)
    }
}

/// Where an eviction event happens; seeds per-event random draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvictionContext {
    pub layer: usize,
    pub head: usize,
    pub step: usize,
}

/// How the scope size is chosen when a policy is bound to a budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScopeSize {
    /// Half the resolved token budget, rounded down.
    HalfBudget,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScopeKind {
    All,
    LocalWindow(ScopeSize),
    SinkPlusRecency,
    TopStd(ScopeSize),
}

/// A policy whose scope size may still depend on the budget.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PolicySpec {
    pub name: String,
    pub importance: ImportanceMethod,
    pub scope: ScopeKind,
}

pub const CANONICAL_POLICIES: [&str; 6] = ["random", "streamllm", "scissorhands", "h2o", "tova", "roco"];

impl PolicySpec {
    /// Looks up one of the six named policies. Window and standard-deviation
    /// scopes default to half the budget.
    pub fn canonical(name: &str, seed: u64) -> Result<Self> {
        let half = ScopeSize::HalfBudget;
        let (importance, scope) = match name {
            "random" => (ImportanceMethod::Random { seed }, ScopeKind::All),
            "streamllm" => (ImportanceMethod::Recency, ScopeKind::SinkPlusRecency),
            "scissorhands" => (ImportanceMethod::Aqas, ScopeKind::LocalWindow(half)),
            "h2o" => (ImportanceMethod::Aas, ScopeKind::LocalWindow(half)),
            "tova" => (ImportanceMethod::Ltas, ScopeKind::All),
            "roco" => (ImportanceMethod::Mas, ScopeKind::TopStd(half)),
            other => return Err(Error::invalid(format!("unknown policy {other:?}"))),
        };
        Ok(PolicySpec {
            name: name.to_string(),
            importance,
            scope,
        })
    }

    /// Parses a canonical name or an `importance+scope` composition such as
    /// `mas+window(8)`, `mas+std`, `aas+all` or `recency+sink`. A scope
    /// without a size uses half the budget.
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if let Some((imp, scope)) = s.split_once('+') {
            let importance = ImportanceMethod::parse(imp, seed)?;
            let scope = parse_scope(scope.trim())?;
            return Ok(PolicySpec {
                name: s.clone(),
                importance,
                scope,
            });
        }
        Self::canonical(&s, seed)
    }

    /// Overrides the size of a window or standard-deviation scope.
    pub fn with_scope_size(mut self, size: ScopeSize) -> Self {
        self.scope = match self.scope {
            ScopeKind::LocalWindow(_) => ScopeKind::LocalWindow(size),
            ScopeKind::TopStd(_) => ScopeKind::TopStd(size),
            other => other,
        };
        self
    }

    /// Slots the scope protects once bound to `budget` tokens.
    pub fn scope_size(&self, budget: usize) -> usize {
        let resolve = |s: ScopeSize| match s {
            ScopeSize::HalfBudget => budget / 2,
            ScopeSize::Fixed(r) => r,
        };
        match self.scope {
            ScopeKind::All => 0,
            ScopeKind::SinkPlusRecency => SINK_TOKENS,
            ScopeKind::LocalWindow(s) | ScopeKind::TopStd(s) => resolve(s),
        }
    }

    pub fn bind(&self, budget: usize) -> Policy {
        let r = self.scope_size(budget);
        let scope = match self.scope {
            ScopeKind::All => ScopeMethod::All,
            ScopeKind::SinkPlusRecency => ScopeMethod::SinkPlusRecency,
            ScopeKind::LocalWindow(_) => ScopeMethod::LocalWindow(r),
            ScopeKind::TopStd(_) => ScopeMethod::TopStd(r),
        };
        Policy::new(self.name.clone(), self.importance, scope)
    }
}

fn parse_scope(s: &str) -> Result<ScopeKind> {
    let (head, arg) = match s.split_once('(') {
        Some((h, rest)) => {
            let arg = rest
                .strip_suffix(')')
                .ok_or_else(|| Error::invalid(format!("unterminated scope {s:?}")))?;
            let r = arg
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad scope size in {s:?}")))?;
            (h.trim(), Some(r))
        }
        None => (s, None),
    };
    let size = arg.map_or(ScopeSize::HalfBudget, ScopeSize::Fixed);
    Ok(match head {
        "all" => ScopeKind::All,
        "sink" => ScopeKind::SinkPlusRecency,
        "window" => ScopeKind::LocalWindow(size),
        "std" | "topstd" => ScopeKind::TopStd(size),
        other => return Err(Error::invalid(format!("unknown scope {other:?}"))),
    })
}

fn event_seed(seed: u64, ctx: EvictionContext) -> u64 {
    // splitmix64 over the event coordinates
    let mut z = seed;
    for v in [ctx.layer as u64, ctx.head as u64, ctx.step as u64] {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(v);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Per-slot importance under `method`; higher means more important.
pub fn importance_scores(
    stats: &ImportanceStats,
    positions: &[usize],
    method: ImportanceMethod,
    ctx: EvictionContext,
) -> Vec<f64> {
    debug_assert_eq!(stats.len(), positions.len());
    match method {
        ImportanceMethod::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(event_seed(seed, ctx));
            positions.iter().map(|_| rng.gen::<f64>()).collect()
        }
        ImportanceMethod::Recency => positions.iter().map(|&p| p as f64).collect(),
        ImportanceMethod::Aas => stats.acc().to_vec(),
        ImportanceMethod::Aqas => stats.quant_acc().iter().map(|&q| f64::from(q)).collect(),
        ImportanceMethod::Ltas => stats.last().iter().map(|&l| f64::from(l)).collect(),
        ImportanceMethod::Mas => (0..stats.len()).map(|i| stats.mean(i)).collect(),
    }
}

/// Standard deviation of the received attention of every slot.
pub fn std_scores(stats: &ImportanceStats) -> Vec<f64> {
    (0..stats.len()).map(|i| stats.std(i)).collect()
}

/// Slots eligible for eviction under `scope`, in ascending slot order.
pub fn eviction_scope(
    scope: ScopeMethod,
    positions: &[usize],
    stats: &ImportanceStats,
) -> Result<Vec<usize>> {
    let n = positions.len();
    if n == 0 {
        return Err(Error::invalid("eviction scope of an empty cache"));
    }
    let protected = scope.protected(n);
    if protected >= n {
        return Err(Error::config(format!(
            "scope {scope} protects all {n} slots; nothing is evictable"
        )));
    }
    let mut keep = vec![true; n];
    match scope {
        ScopeMethod::All => {}
        ScopeMethod::LocalWindow(r) => {
            let mut by_recency: Vec<usize> = (0..n).collect();
            by_recency.sort_by(|&a, &b| positions[b].cmp(&positions[a]));
            for &i in by_recency.iter().take(r) {
                keep[i] = false;
            }
        }
        ScopeMethod::SinkPlusRecency => {
            let mut by_age: Vec<usize> = (0..n).collect();
            by_age.sort_by_key(|&i| positions[i]);
            for &i in by_age.iter().take(SINK_TOKENS) {
                keep[i] = false;
            }
        }
        ScopeMethod::TopStd(r) => {
            let std = std_scores(stats);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                std[b]
                    .total_cmp(&std[a])
                    .then_with(|| positions[b].cmp(&positions[a]))
            });
            for &i in order.iter().take(r) {
                keep[i] = false;
            }
        }
    }
    Ok((0..n).filter(|&i| keep[i]).collect())
}

fn victim_order(scores: &[f64], positions: &[usize], a: usize, b: usize) -> Ordering {
    scores[a]
        .total_cmp(&scores[b])
        .then_with(|| positions[a].cmp(&positions[b]))
}

/// The `how_many` candidates with the lowest scores, lowest first. Equal
/// scores evict the older position first.
pub fn select_victims(
    scores: &[f64],
    positions: &[usize],
    candidates: &[usize],
    how_many: usize,
) -> Result<Vec<usize>> {
    if how_many == 0 {
        return Ok(Vec::new());
    }
    if candidates.len() < how_many {
        return Err(Error::config(format!(
            "need {how_many} victims but only {} slots are in scope",
            candidates.len()
        )));
    }
    let mut order = candidates.to_vec();
    if how_many < order.len() {
        order.select_nth_unstable_by(how_many - 1, |&a, &b| victim_order(scores, positions, a, b));
        order.truncate(how_many);
    }
    order.sort_by(|&a, &b| victim_order(scores, positions, a, b));
    Ok(order)
}

/// Elementwise mean of the attention rows of the query heads sharing one
/// key/value head.
pub fn group_average(rows: &[&[f32]]) -> Result<ProbRow> {
    let first = rows
        .first()
        .ok_or_else(|| Error::invalid("group average of zero rows"))?;
    if rows.len() == 1 {
        return Ok(ProbRow(first.to_vec()));
    }
    let n = first.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("group average over ragged rows"));
    }
    let g = rows.len() as f64;
    Ok(ProbRow(
        (0..n)
            .map(|i| (rows.iter().map(|r| f64::from(r[i])).sum::<f64>() / g) as f32)
            .collect(),
    ))
}
