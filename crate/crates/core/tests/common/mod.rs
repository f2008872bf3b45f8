//! Reference implementations shared by the integration suites. None of these
//! go through the cache or eviction code paths they are used to check.
#![allow(dead_code)]

use kvevict::model::{apply_rope, argmax, feed_forward, logits_from_hidden, rms_norm, ToyModel, EOS_TOKEN};
use kvevict::policies::{importance_scores, EvictionContext, ImportanceMethod, Policy, ScopeMethod, SINK_TOKENS};
use kvevict::stats::{streaming_std, ImportanceStats};
use kvevict::tensor::{dot, matmul, softmax_row, Matrix};
use kvevict::trace::{AttentionTrace, TraceHeader, TraceRecord, TRACE_VERSION};
use rand::Rng;

/// Dense causal forward over a whole sequence with every key visible.
/// Returns per-position logits and per-position attention rows indexed
/// `[pos][layer * H + head]`.
pub struct DenseRun {
    pub logits: Vec<Vec<f32>>,
    pub attention: Vec<Vec<Vec<f32>>>,
}

pub fn dense_forward(model: &ToyModel, tokens: &[u32]) -> DenseRun {
    let cfg = model.config();
    let t = tokens.len();
    let dh = cfg.head_dim;
    let g = cfg.group_size();
    let scale = (1.0 / (dh as f64).sqrt()) as f32;
    let mut hidden: Vec<Vec<f32>> = tokens.iter().map(|&tok| model.embeddings().row(tok as usize).to_vec()).collect();
    let mut attention = vec![Vec::with_capacity(cfg.layers * cfg.query_heads); t];

    for layer in model.layers() {
        let normed: Vec<Vec<f32>> = hidden.iter().map(|h| rms_norm(h, &layer.attn_norm)).collect();
        let x = Matrix::from_rows(&normed).unwrap();
        let q_all = matmul(&x, &layer.wq).unwrap();
        let k_all = matmul(&x, &layer.wk).unwrap();
        let v_all = matmul(&x, &layer.wv).unwrap();
        let mut q: Vec<Vec<f32>> = (0..t).map(|i| q_all.row(i).to_vec()).collect();
        let mut k: Vec<Vec<f32>> = (0..t).map(|i| k_all.row(i).to_vec()).collect();
        for i in 0..t {
            apply_rope(&mut q[i], dh, i);
            apply_rope(&mut k[i], dh, i);
        }
        let mut concat = vec![Vec::with_capacity(cfg.model_dim()); t];
        for i in 0..t {
            for h in 0..cfg.query_heads {
                let kv = h / g;
                let qh = &q[i][h * dh..(h + 1) * dh];
                // full causal row: every position j <= i
                let logits: Vec<f32> = (0..=i)
                    .map(|j| (dot(qh, &k[j][kv * dh..(kv + 1) * dh]) * f64::from(scale)) as f32)
                    .collect();
                let probs = softmax_row(&logits).unwrap().0;
                let mut out = vec![0.0f64; dh];
                for (j, &p) in probs.iter().enumerate() {
                    for (o, &v) in out.iter_mut().zip(&v_all.row(j)[kv * dh..(kv + 1) * dh]) {
                        *o += f64::from(p) * f64::from(v);
                    }
                }
                concat[i].extend(out.into_iter().map(|v| v as f32));
                attention[i].push(probs);
            }
        }
        let attn_out = matmul(&Matrix::from_rows(&concat).unwrap(), &layer.wo).unwrap();
        for i in 0..t {
            for (x, a) in hidden[i].iter_mut().zip(attn_out.row(i)) {
                *x += a;
            }
            let ff = feed_forward(layer, &hidden[i]);
            for (x, f) in hidden[i].iter_mut().zip(&ff) {
                *x += f;
            }
        }
    }
    DenseRun {
        logits: hidden.iter().map(|h| logits_from_hidden(model, h)).collect(),
        attention,
    }
}

/// Greedy generation where every step re-runs the dense forward over the
/// whole prefix. Returns the tokens and the logits of every processed step.
pub fn dense_generate(model: &ToyModel, prompt: &[u32], max_new: usize) -> (Vec<u32>, Vec<Vec<f32>>) {
    let mut tokens = prompt.to_vec();
    let mut run = dense_forward(model, &tokens);
    let mut logits = run.logits.clone();
    for i in 0..max_new {
        let next = argmax(run.logits.last().unwrap());
        tokens.push(next);
        if next == EOS_TOKEN || i + 1 == max_new {
            break;
        }
        run = dense_forward(model, &tokens);
        logits.push(run.logits.last().unwrap().clone());
    }
    (tokens, logits)
}

/// Log-probability of `target`, computed the way the perplexity harness does.
pub fn log_prob(logits: &[f32], target: u32) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = logits.iter().map(|&l| (f64::from(l) - max).exp()).sum();
    f64::from(logits[target as usize]) - max - z.ln()
}

/// Statistics of one slot rebuilt from the full history of received
/// probabilities and the row length at each reception.
#[derive(Debug, Clone, Default)]
pub struct History {
    pub probs: Vec<f32>,
    pub row_len: Vec<usize>,
}

impl History {
    pub fn push(&mut self, p: f32, n: usize) {
        self.probs.push(p);
        self.row_len.push(n);
    }

    pub fn acc(&self) -> f64 {
        self.probs.iter().map(|&p| f64::from(p)).sum()
    }

    pub fn acc_sq(&self) -> f64 {
        self.probs.iter().map(|&p| f64::from(p) * f64::from(p)).sum()
    }

    pub fn count(&self) -> u32 {
        self.probs.len() as u32
    }

    pub fn quant(&self) -> u32 {
        self.probs
            .iter()
            .zip(&self.row_len)
            .filter(|(&p, &n)| f64::from(p) > 1.0 / n as f64)
            .count() as u32
    }

    pub fn last(&self) -> f32 {
        self.probs.last().copied().unwrap_or(0.0)
    }

    pub fn mean(&self) -> f64 {
        if self.probs.is_empty() {
            0.0
        } else {
            self.acc() / self.probs.len() as f64
        }
    }

    /// Two-pass population standard deviation.
    pub fn std_two_pass(&self) -> f64 {
        if self.probs.is_empty() {
            return 0.0;
        }
        let m = self.mean();
        let var = self.probs.iter().map(|&p| (f64::from(p) - m).powi(2)).sum::<f64>() / self.probs.len() as f64;
        var.sqrt()
    }

    /// Same quantity via the running-sum formula, over the stored history.
    pub fn std_from_sums(&self) -> f64 {
        streaming_std(self.acc(), self.acc_sq(), self.count())
    }
}

pub fn rel_close(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want.abs().max(1e-12)
}

/// What the victim oracle needs to know about one slot.
#[derive(Debug, Clone, Copy)]
pub struct SlotView {
    pub pos: usize,
    pub score: f64,
    pub std: f64,
}

/// Whether slot `i` is protected, decided by counting the slots that outrank
/// it under the scope's ordering.
pub fn oracle_protected(scope: ScopeMethod, slots: &[SlotView], i: usize) -> bool {
    let me = slots[i];
    let outranked_by = |pred: &dyn Fn(&SlotView) -> bool| slots.iter().filter(|s| pred(s)).count();
    match scope {
        ScopeMethod::All => false,
        ScopeMethod::LocalWindow(r) => outranked_by(&|s| s.pos > me.pos) < r,
        ScopeMethod::SinkPlusRecency => outranked_by(&|s| s.pos < me.pos) < SINK_TOKENS,
        ScopeMethod::TopStd(r) => {
            outranked_by(&|s| s.std > me.std || (s.std == me.std && s.pos > me.pos)) < r
        }
    }
}

/// Exhaustive argmin of `(score, position)` over the unprotected slots.
pub fn oracle_victim(scope: ScopeMethod, slots: &[SlotView]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..slots.len() {
        if oracle_protected(scope, slots, i) {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let (s, t) = (slots[i], slots[b]);
                if s.score < t.score || (s.score == t.score && s.pos < t.pos) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Token-wise reference cache for one head: evicts a single slot per event
/// using scores recomputed from each slot's full history.
#[derive(Debug, Clone)]
pub struct RefHead {
    pub slots: Vec<(usize, History)>,
    pub capacity: usize,
}

impl RefHead {
    pub fn new(capacity: usize) -> Self {
        RefHead {
            slots: Vec::new(),
            capacity,
        }
    }

    pub fn positions(&self) -> Vec<usize> {
        self.slots.iter().map(|(p, _)| *p).collect()
    }

    pub fn views(&self, method: ImportanceMethod, ctx: EvictionContext) -> Vec<SlotView> {
        let positions = self.positions();
        let n = positions.len();
        let random = match method {
            // per-event draws come from the library; only the ranking is recomputed
            ImportanceMethod::Random { .. } => {
                let blank = ImportanceStats::from_parts(vec![0.0; n], vec![0.0; n], vec![0; n], vec![0; n], vec![0.0; n]);
                Some(importance_scores(&blank, &positions, method, ctx))
            }
            _ => None,
        };
        self.slots
            .iter()
            .enumerate()
            .map(|(i, (pos, h))| SlotView {
                pos: *pos,
                score: match method {
                    ImportanceMethod::Random { .. } => random.as_ref().unwrap()[i],
                    ImportanceMethod::Recency => *pos as f64,
                    ImportanceMethod::Aas => h.acc(),
                    ImportanceMethod::Aqas => f64::from(h.quant()),
                    ImportanceMethod::Ltas => f64::from(h.last()),
                    ImportanceMethod::Mas => h.mean(),
                },
                std: h.std_from_sums(),
            })
            .collect()
    }

    pub fn admit(&mut self, policy: &Policy, pos: usize, ctx: EvictionContext) -> Option<usize> {
        let mut evicted = None;
        if self.slots.len() >= self.capacity {
            let views = self.views(policy.importance, ctx);
            let v = oracle_victim(policy.scope, &views).expect("a victim in scope");
            evicted = Some(self.slots.remove(v).0);
        }
        self.slots.push((pos, History::default()));
        evicted
    }

    pub fn observe(&mut self, row: &[f32], include_self: bool) {
        let n = row.len();
        assert_eq!(n, self.slots.len());
        let upto = if include_self { n } else { n - 1 };
        for (slot, &p) in self.slots.iter_mut().zip(row).take(upto) {
            slot.1.push(p, n);
        }
    }
}

/// A structurally valid trace with random rows. With `sparse` set, each row
/// covers a random subset of the earlier positions (always keeping the
/// newest), as a trace recorded under eviction would.
pub fn random_trace(rng: &mut impl Rng, steps: usize, layers: usize, heads: usize, kv_heads: usize, sparse: bool) -> AttentionTrace {
    let mut records = Vec::with_capacity(steps * layers * heads);
    for t in 0..steps {
        for l in 0..layers {
            for h in 0..heads {
                let positions: Vec<u32> = (0..=t as u32)
                    .filter(|&p| !sparse || p == t as u32 || rng.gen_bool(0.6))
                    .collect();
                let logits: Vec<f32> = positions.iter().map(|_| rng.gen_range(-3.0..3.0)).collect();
                records.push(TraceRecord {
                    step: t as u32,
                    layer: l as u16,
                    head: h as u16,
                    positions,
                    probs: softmax_row(&logits).unwrap().0,
                });
            }
        }
    }
    AttentionTrace {
        header: TraceHeader {
            version: TRACE_VERSION,
            layers,
            query_heads: heads,
            kv_heads,
            head_dim: 8,
            steps,
            source: format!("random-{steps}x{layers}x{heads}"),
        },
        records,
    }
}
