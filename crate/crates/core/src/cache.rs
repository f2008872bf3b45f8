//! Fixed-budget key/value storage.
//!
//! A [`CacheSet`] owns one [`HeadCache`] per `(layer, kv_head)`. Every head
//! shares the same token budget but evicts independently, so different heads
//! end up retaining different position sets. Each decoding or prefill step
//! runs, per head: evict `b` slots if the cache is full, append the new
//! token, then fold the new token's (group-averaged) attention row into the
//! statistics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::policies::{EvictionContext, Policy, PolicySpec};
use crate::stats::ImportanceStats;
use crate::tensor::Matrix;

/// How the token budget is expressed before it is resolved to a count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BudgetMode {
    /// Fraction of the sequence length, in `(0, 1]`.
    Rate(f64),
    /// Absolute number of retained tokens per head.
    Tokens(usize),
    /// Never evict.
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetSpec {
    pub mode: BudgetMode,
    /// Slots freed per eviction event.
    pub block: usize,
}

impl BudgetSpec {
    pub fn rate(rate: f64) -> Self {
        BudgetSpec {
            mode: BudgetMode::Rate(rate),
            block: 1,
        }
    }

    pub fn tokens(tokens: usize) -> Self {
        BudgetSpec {
            mode: BudgetMode::Tokens(tokens),
            block: 1,
        }
    }

    pub fn unbounded() -> Self {
        BudgetSpec {
            mode: BudgetMode::Unbounded,
            block: 1,
        }
    }

    pub fn with_block(mut self, block: usize) -> Self {
        self.block = block;
        self
    }

    /// Resolves the budget for a sequence of `seq_len` tokens and binds the
    /// policy's scope size to it.
    ///
    /// A rate resolves to `max(ceil(rate * seq_len), r + b)`, growing the
    /// budget until the slots outside the protected scope can absorb one
    /// block. A token budget that cannot do so is rejected.
    pub fn resolve(&self, policy: &PolicySpec, seq_len: usize) -> Result<ResolvedBudget> {
        if self.block == 0 {
            return Err(Error::config("block size must be at least 1"));
        }
        let b = self.block;
        let fits = |tokens: usize| tokens >= policy.scope_size(tokens) + b;
        let tokens = match self.mode {
            BudgetMode::Unbounded => None,
            BudgetMode::Rate(rate) => {
                if !(rate > 0.0 && rate <= 1.0) {
                    return Err(Error::config(format!("budget rate {rate} is outside (0, 1]")));
                }
                // the epsilon keeps e.g. 0.3 * 10 from rounding up to 4
                let mut tokens = ((rate * seq_len as f64) - 1e-9).ceil().max(1.0) as usize;
                while !fits(tokens) {
                    tokens += 1;
                }
                Some(tokens)
            }
            BudgetMode::Tokens(tokens) => {
                if tokens == 0 || !fits(tokens) {
                    return Err(Error::config(format!(
                        "budget of {tokens} tokens cannot hold scope {} plus block {b}",
                        policy.scope_size(tokens)
                    )));
                }
                Some(tokens)
            }
        };
        let policy = policy.bind(tokens.unwrap_or(usize::MAX));
        Ok(ResolvedBudget {
            tokens,
            block: b,
            policy,
        })
    }
}

/// A budget bound to a concrete token count and policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedBudget {
    /// `None` means unbounded.
    pub tokens: Option<usize>,
    pub block: usize,
    pub policy: Policy,
}

/// Retained keys, values and statistics of one key/value head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    positions: Vec<usize>,
    keys: Matrix,
    values: Matrix,
    stats: ImportanceStats,
    capacity: Option<usize>,
}

impl HeadCache {
    /// An empty cache with room for `capacity` tokens (`None` = unbounded).
    /// A `head_dim` of zero stores positions and statistics only.
    pub fn new(head_dim: usize, capacity: Option<usize>) -> Self {
        HeadCache {
            positions: Vec::new(),
            keys: Matrix::with_cols(head_dim),
            values: Matrix::with_cols(head_dim),
            stats: ImportanceStats::with_capacity(capacity.unwrap_or(0).min(4096)),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.capacity.is_some_and(|c| self.len() >= c)
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn stats(&self) -> &ImportanceStats {
        &self.stats
    }

    pub fn append(&mut self, pos: usize, key: &[f32], value: &[f32]) -> Result<()> {
        if self.is_full() {
            return Err(Error::Contract(format!(
                "append of position {pos} into a full cache of {} slots",
                self.len()
            )));
        }
        if let Some(&last) = self.positions.last() {
            if pos <= last {
                return Err(Error::Contract(format!(
                    "position {pos} appended after {last}"
                )));
            }
        }
        self.keys.push_row(key)?;
        self.values.push_row(value)?;
        self.positions.push(pos);
        self.stats.push_slot();
        Ok(())
    }

    /// Folds the attention row of the newest query into the statistics. With
    /// `include_self` unset the newest slot's own entry is not counted.
    pub fn update_stats(&mut self, probs: &[f32], include_self: bool) -> Result<()> {
        if probs.len() != self.len() {
            return Err(Error::invalid(format!(
                "attention row of length {} for a cache of {} slots",
                probs.len(),
                self.len()
            )));
        }
        self.stats.observe(probs, !include_self);
        Ok(())
    }

    /// Removes `how_many` slots chosen by `policy` and returns their positions
    /// in eviction order.
    pub fn evict(
        &mut self,
        policy: &Policy,
        how_many: usize,
        ctx: EvictionContext,
    ) -> Result<Vec<usize>> {
        let victims = policy.choose_victims(&self.stats, &self.positions, how_many, ctx)?;
        let evicted: Vec<usize> = victims.iter().map(|&i| self.positions[i]).collect();
        let mut keep = vec![true; self.len()];
        for &i in &victims {
            keep[i] = false;
        }
        self.keys.retain_rows(|i| keep[i]);
        self.values.retain_rows(|i| keep[i]);
        self.stats.retain(&keep);
        let mut it = keep.iter();
        self.positions.retain(|_| *it.next().unwrap());
        Ok(evicted)
    }

    /// Overrides the statistics; used to build fixtures.
    pub fn set_stats(&mut self, stats: ImportanceStats) -> Result<()> {
        if stats.len() != self.len() {
            return Err(Error::invalid("statistics do not match the slot count"));
        }
        self.stats = stats;
        Ok(())
    }
}

/// Per-head eviction counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HeadCounters {
    pub eviction_events: usize,
    pub evicted_tokens: usize,
    pub peak_len: usize,
}

/// Floats held by the importance statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatsOverhead {
    /// `L × H_kv × B × 3`: statistics live per key/value head.
    pub per_kv_head: usize,
    /// `L × H × B × 3`: the same count with one statistics array per query head.
    pub per_query_head: usize,
}

/// All head caches of one sequence.
#[derive(Debug, Clone)]
pub struct CacheSet {
    layers: usize,
    kv_heads: usize,
    heads: Vec<HeadCache>,
    counters: Vec<HeadCounters>,
    budget: ResolvedBudget,
    include_self: bool,
}

impl CacheSet {
    pub fn new(layers: usize, kv_heads: usize, head_dim: usize, budget: ResolvedBudget) -> Self {
        let heads = (0..layers * kv_heads)
            .map(|_| HeadCache::new(head_dim, budget.tokens))
            .collect();
        CacheSet {
            layers,
            kv_heads,
            heads,
            counters: vec![HeadCounters::default(); layers * kv_heads],
            budget,
            include_self: true,
        }
    }

    /// A cache that never evicts.
    pub fn unbounded(layers: usize, kv_heads: usize, head_dim: usize) -> Self {
        let budget = ResolvedBudget {
            tokens: None,
            block: 1,
            policy: Policy::new("full", crate::policies::ImportanceMethod::Recency, crate::policies::ScopeMethod::All),
        };
        Self::new(layers, kv_heads, head_dim, budget)
    }

    /// Whether a token's attention to itself at insertion counts toward its
    /// statistics (default: yes).
    pub fn with_self_attention_stats(mut self, include_self: bool) -> Self {
        self.include_self = include_self;
        self
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    pub fn budget(&self) -> &ResolvedBudget {
        &self.budget
    }

    pub fn head(&self, layer: usize, kv_head: usize) -> &HeadCache {
        &self.heads[layer * self.kv_heads + kv_head]
    }

    pub fn head_mut(&mut self, layer: usize, kv_head: usize) -> &mut HeadCache {
        &mut self.heads[layer * self.kv_heads + kv_head]
    }

    pub fn counters(&self, layer: usize, kv_head: usize) -> &HeadCounters {
        &self.counters[layer * self.kv_heads + kv_head]
    }

    pub fn total_eviction_events(&self) -> usize {
        self.counters.iter().map(|c| c.eviction_events).sum()
    }

    /// Makes room if the head is full, then appends the token. Returns the
    /// evicted positions (empty when nothing was evicted).
    pub fn admit(
        &mut self,
        layer: usize,
        kv_head: usize,
        pos: usize,
        key: &[f32],
        value: &[f32],
    ) -> Result<Vec<usize>> {
        let idx = layer * self.kv_heads + kv_head;
        let head = &mut self.heads[idx];
        let mut evicted = Vec::new();
        if head.is_full() {
            let ctx = EvictionContext {
                layer,
                head: kv_head,
                step: pos,
            };
            let how_many = self.budget.block.min(head.len());
            evicted = head.evict(&self.budget.policy, how_many, ctx)?;
            let c = &mut self.counters[idx];
            c.eviction_events += 1;
            c.evicted_tokens += evicted.len();
        }
        head.append(pos, key, value)?;
        let c = &mut self.counters[idx];
        c.peak_len = c.peak_len.max(head.len());
        Ok(evicted)
    }

    /// Feeds the head its (group-averaged) attention row for this step.
    pub fn observe(&mut self, layer: usize, kv_head: usize, probs: &[f32]) -> Result<()> {
        let include_self = self.include_self;
        self.head_mut(layer, kv_head).update_stats(probs, include_self)
    }

    pub fn overhead(&self, query_heads: usize) -> StatsOverhead {
        let b = self.budget.tokens.unwrap_or(0);
        StatsOverhead {
            per_kv_head: self.layers * self.kv_heads * b * 3,
            per_query_head: self.layers * query_heads * b * 3,
        }
    }

    /// One line per head: `layer head pos:acc:acc_sq:count ...`, layers then
    /// heads in ascending order, slots in ascending position order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for layer in 0..self.layers {
            for kv in 0..self.kv_heads {
                let h = self.head(layer, kv);
                let s = h.stats();
                write!(out, "{layer} {kv}").unwrap();
                for (i, pos) in h.positions().iter().enumerate() {
                    write!(out, " {pos}:{}:{}:{}", s.acc()[i], s.acc_sq()[i], s.count()[i]).unwrap();
                }
                out.push('\n');
            }
        }
        out
    }
}
