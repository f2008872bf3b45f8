//! Attention traces and policy replay.
//!
//! A trace records, for every step, layer and query head, the positions the
//! head attended over and the probabilities it assigned. Replaying a trace
//! under a policy simulates constrained inference without a model: once a
//! position is evicted, later rows are masked to the retained positions and
//! renormalised before they update the statistics. Renormalisation stands in
//! for the constrained softmax, whose logits a trace does not carry.
//!
//! File layout (little-endian):
//!
//! ```text
//! b"KVTR" | u32 version | u32 header_len | header (UTF-8 key=value lines)
//! then steps × layers × query_heads records, ordered by step, layer, head:
//! u32 step | u16 layer | u16 head | u32 n | n × u32 positions | n × f32 probs
//! ```
//!
//! Header keys: `version`, `layers`, `query_heads`, `kv_heads`, `head_dim`,
//! `steps`, `source`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::cache::{CacheSet, ResolvedBudget};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, StepOutput};
use crate::policies::group_average;
use crate::stats::ImportanceStats;

pub const TRACE_MAGIC: &[u8; 4] = b"KVTR";
pub const TRACE_VERSION: u32 = 1;
/// Row-sum tolerance accepted when reading a trace.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceHeader {
    pub version: u32,
    pub layers: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub steps: usize,
    pub source: String,
}

impl TraceHeader {
    pub fn group_size(&self) -> usize {
        self.query_heads / self.kv_heads
    }

    fn to_text(&self) -> String {
        format!(
            "version={}\nlayers={}\nquery_heads={}\nkv_heads={}\nhead_dim={}\nsteps={}\nsource={}\n",
            self.version, self.layers, self.query_heads, self.kv_heads, self.head_dim, self.steps, self.source
        )
    }

    fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::parse("trace header", m);
        let mut fields = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {line:?} is not key=value")))?;
            fields.insert(k.trim().to_string(), v.to_string());
        }
        let num = |key: &str| -> Result<usize> {
            fields
                .get(key)
                .ok_or_else(|| bad(format!("missing key {key}")))?
                .trim()
                .parse()
                .map_err(|_| bad(format!("key {key} is not a number")))
        };
        let header = TraceHeader {
            version: num("version")? as u32,
            layers: num("layers")?,
            query_heads: num("query_heads")?,
            kv_heads: num("kv_heads")?,
            head_dim: num("head_dim")?,
            steps: num("steps")?,
            source: fields.get("source").cloned().unwrap_or_default(),
        };
        if header.layers == 0 || header.query_heads == 0 || header.kv_heads == 0 {
            return Err(bad("layers and head counts must be positive".into()));
        }
        if !header.query_heads.is_multiple_of(header.kv_heads) {
            return Err(bad("kv_heads does not divide query_heads".into()));
        }
        Ok(header)
    }
}

/// One attention row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: u32,
    pub layer: u16,
    pub head: u16,
    pub positions: Vec<u32>,
    pub probs: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub header: TraceHeader,
    /// Ordered by step, then layer, then query head.
    pub records: Vec<TraceRecord>,
}

impl AttentionTrace {
    /// Builds a trace from the per-step outputs of a model run.
    pub fn from_steps(config: &ModelConfig, steps: &[StepOutput], source: impl Into<String>) -> Self {
        let g = config.group_size();
        let mut records = Vec::with_capacity(steps.len() * config.layers * config.query_heads);
        for (t, s) in steps.iter().enumerate() {
            for l in 0..config.layers {
                for h in 0..config.query_heads {
                    records.push(TraceRecord {
                        step: t as u32,
                        layer: l as u16,
                        head: h as u16,
                        positions: s.retained(l, h / g).iter().map(|&p| p as u32).collect(),
                        probs: s.attention(l, h).0.clone(),
                    });
                }
            }
        }
        AttentionTrace {
            header: TraceHeader {
                version: TRACE_VERSION,
                layers: config.layers,
                query_heads: config.query_heads,
                kv_heads: config.kv_heads,
                head_dim: config.head_dim,
                steps: steps.len(),
                source: source.into(),
            },
            records,
        }
    }

    pub fn steps(&self) -> usize {
        self.header.steps
    }

    pub fn record(&self, step: usize, layer: usize, head: usize) -> &TraceRecord {
        let h = &self.header;
        &self.records[(step * h.layers + layer) * h.query_heads + head]
    }

    /// Checks ordering, coverage and row sums. Errors name the offending row.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.version != TRACE_VERSION {
            return Err(Error::parse("trace header", format!("unsupported version {}", h.version)));
        }
        let expected = h.steps * h.layers * h.query_heads;
        if self.records.len() != expected {
            return Err(Error::parse(
                "trace records",
                format!("expected {expected} records, found {}", self.records.len()),
            ));
        }
        for (i, r) in self.records.iter().enumerate() {
            let step = i / (h.layers * h.query_heads);
            let layer = (i / h.query_heads) % h.layers;
            let head = i % h.query_heads;
            let loc = || format!("record {i} (step {step}, layer {layer}, head {head})");
            if (r.step as usize, r.layer as usize, r.head as usize) != (step, layer, head) {
                return Err(Error::parse(
                    loc(),
                    format!("out of order: found step {}, layer {}, head {}", r.step, r.layer, r.head),
                ));
            }
            if r.positions.len() != r.probs.len() || r.positions.is_empty() {
                return Err(Error::parse(loc(), "empty row or position/probability length mismatch"));
            }
            if r.positions.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::parse(loc(), "positions are not strictly ascending"));
            }
            if *r.positions.last().unwrap() as usize > step {
                return Err(Error::parse(loc(), "row attends to a future position"));
            }
            if r.probs.iter().any(|p| !(0.0..=1.0 + ROW_SUM_TOLERANCE as f32).contains(p)) {
                return Err(Error::parse(loc(), "probability outside [0, 1]"));
            }
            let sum: f64 = r.probs.iter().map(|&p| f64::from(p)).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::parse(loc(), format!("row sums to {sum}")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header.to_text();
        let mut out = Vec::new();
        out.extend_from_slice(TRACE_MAGIC);
        out.extend_from_slice(&self.header.version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.step.to_le_bytes());
            out.extend_from_slice(&r.layer.to_le_bytes());
            out.extend_from_slice(&r.head.to_le_bytes());
            out.extend_from_slice(&(r.positions.len() as u32).to_le_bytes());
            for p in &r.positions {
                out.extend_from_slice(&p.to_le_bytes());
            }
            for p in &r.probs {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, off: 0 };
        let magic = cur.take(4).map_err(|_| Error::parse("trace file", "too short for magic"))?;
        if magic != TRACE_MAGIC {
            return Err(Error::parse("trace file", "bad magic"));
        }
        let version = cur.u32("trace header")?;
        if version != TRACE_VERSION {
            return Err(Error::parse("trace file", format!("unsupported version {version}")));
        }
        let len = cur.u32("trace header")? as usize;
        let text = std::str::from_utf8(cur.take(len).map_err(|_| Error::parse("trace header", "truncated"))?)
            .map_err(|_| Error::parse("trace header", "not UTF-8"))?;
        let header = TraceHeader::from_text(text)?;
        if header.version != version {
            return Err(Error::parse("trace header", "header version disagrees with file version"));
        }
        let expected = header.steps * header.layers * header.query_heads;
        let mut records = Vec::with_capacity(expected.min(1 << 20));
        for i in 0..expected {
            let step = i / (header.layers * header.query_heads);
            let layer = (i / header.query_heads) % header.layers;
            let head = i % header.query_heads;
            let ctx = format!("record {i} (step {step}, layer {layer}, head {head})");
            let r_step = cur.u32(&ctx)?;
            let r_layer = cur.u16(&ctx)?;
            let r_head = cur.u16(&ctx)?;
            let n = cur.u32(&ctx)? as usize;
            if n > header.steps {
                return Err(Error::parse(ctx, format!("row length {n} exceeds step count")));
            }
            let positions = (0..n).map(|_| cur.u32(&ctx)).collect::<Result<Vec<_>>>()?;
            let probs = (0..n).map(|_| cur.f32(&ctx)).collect::<Result<Vec<_>>>()?;
            records.push(TraceRecord {
                step: r_step,
                layer: r_layer,
                head: r_head,
                positions,
                probs,
            });
        }
        if cur.off != bytes.len() {
            return Err(Error::parse("trace file", "trailing bytes after the last record"));
        }
        let trace = AttentionTrace { header, records };
        trace.validate()?;
        Ok(trace)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn write_trace(trace: &AttentionTrace, path: &Path) -> Result<()> {
    trace.write(path)
}

pub fn read_trace(path: &Path) -> Result<AttentionTrace> {
    AttentionTrace::read(path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ()> {
        let end = self.off.checked_add(n).ok_or(())?;
        let s = self.bytes.get(self.off..end).ok_or(())?;
        self.off = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, ctx: &str) -> Result<[u8; N]> {
        self.take(N)
            .map(|s| s.try_into().unwrap())
            .map_err(|_| Error::parse(ctx, "truncated file"))
    }

    fn u32(&mut self, ctx: &str) -> Result<u32> {
        self.array(ctx).map(u32::from_le_bytes)
    }

    fn u16(&mut self, ctx: &str) -> Result<u16> {
        self.array(ctx).map(u16::from_le_bytes)
    }

    fn f32(&mut self, ctx: &str) -> Result<f32> {
        self.array(ctx).map(f32::from_le_bytes)
    }
}

/// Positions evicted from one head at one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvictionEvent {
    pub step: usize,
    pub layer: usize,
    pub kv_head: usize,
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayResult {
    pub budget: Option<usize>,
    pub block: usize,
    /// `retained[step][layer * kv_heads + kv_head]`, ascending positions.
    pub retained: Vec<Vec<Vec<usize>>>,
    pub events: Vec<EvictionEvent>,
    /// Statistics of every head after the last step.
    pub final_stats: Vec<ImportanceStats>,
}

/// Restricts a recorded row to `retained`, renormalising if anything was
/// masked. A row with no mass left on the retained set becomes uniform.
pub fn mask_row(record: &TraceRecord, retained: &[usize]) -> Vec<f32> {
    if record.positions.len() == retained.len()
        && record.positions.iter().zip(retained).all(|(&a, &b)| a as usize == b)
    {
        return record.probs.clone();
    }
    let mut out = vec![0.0f64; retained.len()];
    let mut j = 0;
    for (i, &pos) in retained.iter().enumerate() {
        while j < record.positions.len() && (record.positions[j] as usize) < pos {
            j += 1;
        }
        if j < record.positions.len() && record.positions[j] as usize == pos {
            out[i] = f64::from(record.probs[j]);
        }
    }
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        out.iter().map(|&p| (p / total) as f32).collect()
    } else {
        vec![(1.0 / retained.len() as f64) as f32; retained.len()]
    }
}

/// Drives a cache set through every step of `trace`, calling `on_step` after
/// each step's statistics update and `on_evict` for each eviction.
pub fn replay_visit(
    trace: &AttentionTrace,
    budget: ResolvedBudget,
    mut on_step: impl FnMut(usize, &CacheSet),
    mut on_evict: impl FnMut(EvictionEvent),
) -> Result<CacheSet> {
    let h = &trace.header;
    let g = h.group_size();
    let mut caches = CacheSet::new(h.layers, h.kv_heads, 0, budget);
    for step in 0..h.steps {
        for layer in 0..h.layers {
            for kv in 0..h.kv_heads {
                let evicted = caches.admit(layer, kv, step, &[], &[])?;
                if !evicted.is_empty() {
                    on_evict(EvictionEvent {
                        step,
                        layer,
                        kv_head: kv,
                        positions: evicted,
                    });
                }
                let retained = caches.head(layer, kv).positions();
                let rows: Vec<Vec<f32>> = (kv * g..(kv + 1) * g)
                    .map(|qh| mask_row(trace.record(step, layer, qh), retained))
                    .collect();
                let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
                let avg = group_average(&refs)?;
                caches.observe(layer, kv, avg.as_slice())?;
            }
        }
        on_step(step, &caches);
    }
    Ok(caches)
}

/// Replays `trace` under a resolved budget, collecting retained sets,
/// eviction events and final statistics.
pub fn replay(trace: &AttentionTrace, budget: ResolvedBudget) -> Result<ReplayResult> {
    let tokens = budget.tokens;
    let block = budget.block;
    let mut retained = Vec::with_capacity(trace.steps());
    let mut events = Vec::new();
    let caches = replay_visit(
        trace,
        budget,
        |_, c| {
            retained.push(
                (0..c.layers())
                    .flat_map(|l| (0..c.kv_heads()).map(move |k| (l, k)))
                    .map(|(l, k)| c.head(l, k).positions().to_vec())
                    .collect(),
            )
        },
        |e| events.push(e),
    )?;
    let final_stats = (0..caches.layers())
        .flat_map(|l| (0..caches.kv_heads()).map(move |k| (l, k)))
        .map(|(l, k)| caches.head(l, k).stats().clone())
        .collect();
    Ok(ReplayResult {
        budget: tokens,
        block,
        retained,
        events,
        final_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::BudgetSpec;
    use crate::policies::PolicySpec;

    /// Synthetic full-cache trace with seeded random rows.
    pub(crate) fn synthetic(steps: usize, layers: usize, heads: usize, kv: usize, seed: u64) -> AttentionTrace {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        for t in 0..steps {
            for l in 0..layers {
                for h in 0..heads {
                    let logits: Vec<f32> = (0..=t).map(|_| rng.gen_range(-2.0..2.0)).collect();
                    records.push(TraceRecord {
                        step: t as u32,
                        layer: l as u16,
                        head: h as u16,
                        positions: (0..=t as u32).collect(),
                        probs: crate::tensor::softmax_row(&logits).unwrap().0,
                    });
                }
            }
        }
        AttentionTrace {
            header: TraceHeader {
                version: TRACE_VERSION,
                layers,
                query_heads: heads,
                kv_heads: kv,
                head_dim: 4,
                steps,
                source: "synthetic".into(),
            },
            records,
        }
    }

    #[test]
    fn round_trip_and_corruption() {
        let t = synthetic(6, 2, 2, 1, 1);
        let bytes = t.to_bytes();
        assert_eq!(AttentionTrace::from_bytes(&bytes).unwrap(), t);
        assert!(AttentionTrace::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'?';
        assert!(AttentionTrace::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(AttentionTrace::from_bytes(&bad).is_err());
    }

    #[test]
    fn row_sum_violation_names_the_row() {
        let mut t = synthetic(4, 1, 2, 2, 2);
        let idx = 2 * 2 + 1;
        t.records[idx].probs[0] += 0.01;
        let err = AttentionTrace::from_bytes(&t.to_bytes()).unwrap_err().to_string();
        assert!(err.contains("step 2, layer 0, head 1"), "{err}");
    }

    #[test]
    fn mask_row_renormalises() {
        let r = TraceRecord {
            step: 3,
            layer: 0,
            head: 0,
            positions: vec![0, 1, 2, 3],
            probs: vec![0.1, 0.2, 0.3, 0.4],
        };
        let m = mask_row(&r, &[1, 3]);
        assert!((m[0] - 0.2 / 0.6).abs() < 1e-6 && (m[1] - 0.4 / 0.6).abs() < 1e-6);
        assert_eq!(mask_row(&r, &[0, 1, 2, 3]), r.probs);
        let z = TraceRecord { probs: vec![0.0, 0.0, 0.0, 1.0], ..r };
        assert_eq!(mask_row(&z, &[0, 2]), vec![0.5, 0.5]);
    }

    #[test]
    fn full_budget_replay_evicts_nothing() {
        let t = synthetic(12, 2, 2, 2, 3);
        let spec = PolicySpec::canonical("roco", 0).unwrap();
        let b = BudgetSpec::rate(1.0).resolve(&spec, t.steps()).unwrap();
        let r = replay(&t, b).unwrap();
        assert!(r.events.is_empty());
        let full = replay(&t, BudgetSpec::unbounded().resolve(&spec, t.steps()).unwrap()).unwrap();
        assert_eq!(r.final_stats, full.final_stats);
    }

    #[test]
    fn recency_replay_is_a_sliding_window() {
        let t = synthetic(20, 1, 1, 1, 4);
        let spec = PolicySpec::parse("recency+all", 0).unwrap();
        let b = BudgetSpec::tokens(19).resolve(&spec, 20).unwrap();
        let r = replay(&t, b).unwrap();
        for (step, sets) in r.retained.iter().enumerate() {
            let lo = (step + 1).saturating_sub(19);
            assert_eq!(sets[0], (lo..=step).collect::<Vec<_>>());
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let t = synthetic(30, 2, 4, 2, 5);
        for name in ["random", "roco", "h2o"] {
            let spec = PolicySpec::canonical(name, 77).unwrap();
            let b = BudgetSpec::rate(0.4).resolve(&spec, t.steps()).unwrap();
            assert_eq!(replay(&t, b.clone()).unwrap(), replay(&t, b).unwrap());
        }
    }
}
