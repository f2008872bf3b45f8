use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kvevict::analysis::{
    self, block_sweep, consistency_experiment, perplexity_sweep, sample_corpus, scope_sweep, std_trajectory,
    token_agreement, toy_traces, CsvRow, SweepSource,
};
use kvevict::cache::{BudgetSpec, CacheSet};
use kvevict::model::{generate, init_model, ModelConfig, ToyModel};
use kvevict::parallel::Exec;
use kvevict::policies::{ImportanceMethod, PolicySpec, ScopeSize, CANONICAL_POLICIES};
use kvevict::trace::{replay, AttentionTrace};
use kvevict::Error;

#[derive(Parser)]
#[command(name = "kvevict", version, about = "KV cache eviction policies on a toy transformer")]
struct Cli {
    /// Run experiment cells sequentially even when built with rayon.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// KVTM model file; a default model seeded with --seed is used if absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, env = "KVEVICT_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct BudgetArgs {
    #[arg(long, default_value = "roco")]
    policy: String,
    /// Budget as a fraction of the sequence length.
    #[arg(long, conflicts_with_all = ["budget_tokens", "no_evict"])]
    budget_rate: Option<f64>,
    /// Budget as a token count per head.
    #[arg(long, conflicts_with = "no_evict")]
    budget_tokens: Option<usize>,
    /// Keep the full cache.
    #[arg(long)]
    no_evict: bool,
    /// Scope size r for window and std scopes (default: half the budget).
    #[arg(long)]
    window: Option<usize>,
    /// Tokens freed per eviction event.
    #[arg(long, default_value_t = 1)]
    block: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Create a seeded toy model file.
    InitModel {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 4)]
        kv_heads: usize,
        #[arg(long, default_value_t = 16)]
        head_dim: usize,
        #[arg(long, default_value_t = 256)]
        vocab: usize,
        #[arg(long, default_value_t = 4096)]
        max_position: usize,
        #[arg(long, env = "KVEVICT_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Greedy generation under a cache budget.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        budget: BudgetArgs,
        /// File of whitespace-separated token ids.
        #[arg(long, conflicts_with = "prompt_text")]
        prompt: Option<PathBuf>,
        /// Literal prompt mapped byte-for-byte to token ids.
        #[arg(long)]
        prompt_text: Option<String>,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        /// Write the attention trace of the run here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Print eviction counts, peak cache sizes and statistics overhead.
        #[arg(long)]
        report: bool,
    },
    /// Replay a trace under a policy and summarise evictions.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        budget: BudgetArgs,
        #[arg(long, env = "KVEVICT_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Jaccard consistency of importance methods (fig2.csv).
    Consistency {
        /// Trace files; toy traces are generated when none are given.
        #[arg(long)]
        trace: Vec<PathBuf>,
        #[arg(long, default_value_t = 20)]
        traces: usize,
        #[arg(long, default_value_t = 128)]
        length: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.4,0.5,0.6")]
        budgets: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "aas,aqas,ltas,mas,random")]
        methods: Vec<String>,
        #[arg(long, env = "KVEVICT_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "fig2.csv")]
        out: PathBuf,
    },
    /// Running std of the attention one token receives (fig3.csv).
    Std {
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        length: usize,
        #[arg(long)]
        position: usize,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long, env = "KVEVICT_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "fig3.csv")]
        out: PathBuf,
    },
    /// MAS with window vs. std scopes across scope sizes (fig4.csv).
    ScopeSweep {
        #[command(flatten)]
        model: ModelArgs,
        /// `replay` reports mean Jaccard, `live` reports perplexity.
        #[arg(long, default_value = "replay")]
        mode: String,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        scopes: Vec<usize>,
        #[arg(long, default_value_t = 0.5)]
        budget_rate: f64,
        #[arg(long, default_value_t = 1)]
        block: usize,
        #[arg(long, default_value_t = 8)]
        traces: usize,
        #[arg(long, default_value_t = 64)]
        length: usize,
        #[arg(long, default_value = "fig4.csv")]
        out: PathBuf,
    },
    /// Perplexity under budget for each policy (fig5.csv).
    Ppl {
        #[command(flatten)]
        model: ModelArgs,
        /// One sequence of whitespace-separated token ids per line.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        sequences: usize,
        #[arg(long, default_value_t = 128)]
        length: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.15,0.2,0.3,0.5")]
        budgets: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "random,streamllm,scissorhands,h2o,tova,roco")]
        policies: Vec<String>,
        #[arg(long, default_value_t = 1)]
        block: usize,
        #[arg(long, default_value = "fig5.csv")]
        out: PathBuf,
    },
    /// Block-wise eviction: events and agreement with full-cache output.
    BlockSweep {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "roco")]
        policy: String,
        #[arg(long, default_value_t = 0.5)]
        budget_rate: f64,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        blocks: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        prompts: usize,
        #[arg(long, default_value_t = 128)]
        length: usize,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        #[arg(long, default_value = "blocks.csv")]
        out: PathBuf,
    },
    /// Token agreement of constrained vs. full-cache generation.
    Agreement {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.5")]
        budgets: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "random,streamllm,scissorhands,h2o,tova,roco")]
        policies: Vec<String>,
        #[arg(long, default_value_t = 4)]
        prompts: usize,
        #[arg(long, default_value_t = 64)]
        length: usize,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        #[arg(long, default_value = "agreement.csv")]
        out: PathBuf,
    },
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

fn require_file(path: &Path) -> Result<(), Error> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("input file {} does not exist", path.display())))
    }
}

fn load_model(args: &ModelArgs) -> Result<ToyModel, Error> {
    match &args.model {
        Some(path) => {
            require_file(path)?;
            ToyModel::load(path)
        }
        None => init_model(ModelConfig {
            seed: args.seed,
            ..ModelConfig::default()
        }),
    }
}

fn read_token_lines(path: &Path) -> Result<Vec<Vec<u32>>, Error> {
    require_file(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|t| {
                    t.parse::<u32>()
                        .map_err(|_| usage(format!("{}: line {}: bad token id {t:?}", path.display(), i + 1)))
                })
                .collect()
        })
        .collect()
}

fn policy_spec(args: &BudgetArgs, seed: u64) -> Result<PolicySpec, Error> {
    let spec = PolicySpec::parse(&args.policy, seed)?;
    Ok(match args.window {
        Some(r) => spec.with_scope_size(ScopeSize::Fixed(r)),
        None => spec,
    })
}

fn budget_spec(args: &BudgetArgs) -> Result<BudgetSpec, Error> {
    let spec = match (args.no_evict, args.budget_rate, args.budget_tokens) {
        (true, _, _) => BudgetSpec::unbounded(),
        (_, Some(rate), _) => BudgetSpec::rate(rate),
        (_, _, Some(tokens)) => BudgetSpec::tokens(tokens),
        _ => return Err(usage("one of --budget-rate, --budget-tokens or --no-evict is required")),
    };
    Ok(spec.with_block(args.block))
}

fn parse_policies(names: &[String], seed: u64) -> Result<Vec<PolicySpec>, Error> {
    names.iter().map(|n| PolicySpec::parse(n, seed)).collect()
}

fn finish_csv(out: &Path, rows: &[CsvRow]) -> Result<(), Error> {
    analysis::write_csv(out, rows)?;
    eprintln!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::InitModel {
            out,
            layers,
            heads,
            kv_heads,
            head_dim,
            vocab,
            max_position,
            seed,
        } => {
            let model = init_model(ModelConfig {
                layers,
                query_heads: heads,
                kv_heads,
                head_dim,
                vocab,
                max_position,
                seed,
            })?;
            model.save(&out)?;
            println!("{} parameters written to {}", model.parameter_count(), out.display());
        }

        Command::Generate {
            model,
            budget,
            prompt,
            prompt_text,
            max_new,
            trace,
            report,
        } => {
            let toy = load_model(&model)?;
            let tokens: Vec<u32> = match (prompt, prompt_text) {
                (Some(path), _) => read_token_lines(&path)?.concat(),
                (None, Some(text)) => {
                    if toy.config().vocab < 256 {
                        return Err(usage("--prompt-text needs a vocabulary of at least 256"));
                    }
                    text.bytes().map(u32::from).collect()
                }
                (None, None) => return Err(usage("one of --prompt or --prompt-text is required")),
            };
            let spec = policy_spec(&budget, model.seed)?;
            let resolved = budget_spec(&budget)?.resolve(&spec, tokens.len() + max_new)?;
            let cfg = *toy.config();
            let mut caches = CacheSet::new(cfg.layers, cfg.kv_heads, cfg.head_dim, resolved);
            let g = generate(&toy, &tokens, max_new, &mut caches)?;
            let ids: Vec<String> = g.generated().iter().map(u32::to_string).collect();
            println!("{}", ids.join(" "));
            if let Some(path) = trace {
                AttentionTrace::from_steps(&cfg, &g.steps, format!("toy-seed-{}", cfg.seed)).write(&path)?;
                eprintln!("trace written to {}", path.display());
            }
            if report {
                let b = caches.budget();
                println!(
                    "policy={} budget={} block={} scope={}",
                    b.policy.name,
                    b.tokens.map_or("unbounded".to_string(), |t| t.to_string()),
                    b.block,
                    b.policy.scope
                );
                println!("eviction_events={}", caches.total_eviction_events());
                for l in 0..cfg.layers {
                    for h in 0..cfg.kv_heads {
                        let c = caches.counters(l, h);
                        println!(
                            "layer={l} head={h} peak_n={} events={} evicted={}",
                            c.peak_len, c.eviction_events, c.evicted_tokens
                        );
                    }
                }
                let o = caches.overhead(cfg.query_heads);
                println!(
                    "stats_overhead_floats per_kv_head={} per_query_head={}",
                    o.per_kv_head, o.per_query_head
                );
            }
        }

        Command::Replay { trace, budget, seed } => {
            require_file(&trace)?;
            let t = AttentionTrace::read(&trace)?;
            let spec = policy_spec(&budget, seed)?;
            let resolved = budget_spec(&budget)?.resolve(&spec, t.steps())?;
            let result = replay(&t, resolved)?;
            println!(
                "steps={} budget={} block={} eviction_events={} evicted_tokens={}",
                t.steps(),
                result.budget.map_or("unbounded".to_string(), |b| b.to_string()),
                result.block,
                result.events.len(),
                result.events.iter().map(|e| e.positions.len()).sum::<usize>()
            );
            if let Some(last) = result.retained.last() {
                let peak = last.iter().map(Vec::len).max().unwrap_or(0);
                println!("final_max_n={peak}");
            }
        }

        Command::Consistency {
            trace,
            traces,
            length,
            budgets,
            methods,
            seed,
            out,
        } => {
            let methods = methods
                .iter()
                .map(|m| ImportanceMethod::parse(m, seed))
                .collect::<Result<Vec<_>, _>>()?;
            let loaded = if trace.is_empty() {
                let base = ModelConfig {
                    seed,
                    ..ModelConfig::default()
                };
                toy_traces(base, traces, length, exec)?
            } else {
                trace
                    .iter()
                    .map(|p| require_file(p).and_then(|_| AttentionTrace::read(p)))
                    .collect::<Result<Vec<_>, _>>()?
            };
            let report = consistency_experiment(&loaded, &budgets, &methods, exec)?;
            println!("{:<8} {:<8} {:>12}", "budget", "method", "mean_jaccard");
            for c in &report.cells {
                println!("{:<8} {:<8} {:>12.4}", c.budget, c.method, c.mean);
            }
            finish_csv(&out, &report.csv_rows(seed))?;
        }

        Command::Std {
            trace,
            length,
            position,
            layer,
            head,
            seed,
            out,
        } => {
            let t = match trace {
                Some(p) => {
                    require_file(&p)?;
                    AttentionTrace::read(&p)?
                }
                None => toy_traces(ModelConfig { seed, ..ModelConfig::default() }, 1, length, exec)?.remove(0),
            };
            let traj = std_trajectory(&t, position, layer, head)?;
            let rows: Vec<CsvRow> = traj
                .iter()
                .map(|&(step, std)| CsvRow {
                    experiment: "std_trajectory".into(),
                    method: format!("pos{position}/l{layer}h{head}"),
                    budget: 1.0,
                    r: 0,
                    b: 1,
                    seed,
                    metric: format!("std@{step}"),
                    value: std,
                })
                .collect();
            if let Some(peak) = traj.iter().max_by(|a, b| a.1.total_cmp(&b.1)) {
                println!("steps={} peak_std={:.6} at step {}", traj.len(), peak.1, peak.0);
            }
            finish_csv(&out, &rows)?;
        }

        Command::ScopeSweep {
            model,
            mode,
            scopes,
            budget_rate,
            block,
            traces,
            length,
            out,
        } => {
            let report = match mode.as_str() {
                "replay" => {
                    let base = match &model.model {
                        Some(_) => *load_model(&model)?.config(),
                        None => ModelConfig { seed: model.seed, ..ModelConfig::default() },
                    };
                    let t = toy_traces(base, traces, length, exec)?;
                    scope_sweep(SweepSource::Replay(&t), budget_rate, &scopes, block, exec)?
                }
                "live" => {
                    let toy = load_model(&model)?;
                    let corpus = sample_corpus(&toy, traces, length, model.seed)?;
                    scope_sweep(SweepSource::Live { model: &toy, corpus: &corpus }, budget_rate, &scopes, block, exec)?
                }
                other => return Err(usage(format!("unknown sweep mode {other:?}"))),
            };
            for c in &report.cells {
                println!("mas+{:<7} r={:<4} {}={:.4}", c.scope.label(), c.r, report.metric, c.value);
            }
            finish_csv(&out, &report.csv_rows(model.seed))?;
        }

        Command::Ppl {
            model,
            corpus,
            sequences,
            length,
            budgets,
            policies,
            block,
            out,
        } => {
            let toy = load_model(&model)?;
            let corpus = match corpus {
                Some(path) => read_token_lines(&path)?,
                None => sample_corpus(&toy, sequences, length, model.seed)?,
            };
            let specs = parse_policies(&policies, model.seed)?;
            let report = perplexity_sweep(&toy, &corpus, &budgets, &specs, block, exec)?;
            println!("full-cache perplexity {:.4}", report.full_cache);
            for c in &report.cells {
                println!("{:<6} {:<14} {:.4}", c.budget, c.policy, c.perplexity);
            }
            finish_csv(&out, &report.csv_rows(block, model.seed))?;
        }

        Command::BlockSweep {
            model,
            policy,
            budget_rate,
            blocks,
            prompts,
            length,
            max_new,
            out,
        } => {
            let toy = load_model(&model)?;
            let spec = PolicySpec::parse(&policy, model.seed)?;
            let prompts = sample_corpus(&toy, prompts, length, model.seed)?;
            let cells = block_sweep(&toy, &prompts, max_new, &spec, budget_rate, &blocks)?;
            let mut rows = Vec::new();
            for c in &cells {
                println!(
                    "b={:<3} events={:<6} agreement={:.4} prefill={:.3}s",
                    c.block, c.eviction_events, c.agreement, c.prefill_seconds
                );
                for (metric, value) in [("agreement", c.agreement), ("eviction_events", c.eviction_events as f64)] {
                    rows.push(CsvRow {
                        experiment: "block_sweep".into(),
                        method: spec.name.clone(),
                        budget: budget_rate,
                        r: 0,
                        b: c.block,
                        seed: model.seed,
                        metric: metric.into(),
                        value,
                    });
                }
            }
            finish_csv(&out, &rows)?;
        }

        Command::Agreement {
            model,
            budgets,
            policies,
            prompts,
            length,
            max_new,
            out,
        } => {
            let toy = load_model(&model)?;
            let cfg = *toy.config();
            let specs = parse_policies(&policies, model.seed)?;
            let prompts = sample_corpus(&toy, prompts, length, model.seed)?;
            let full: Vec<Vec<u32>> = prompts
                .iter()
                .map(|p| {
                    let mut c = CacheSet::unbounded(cfg.layers, cfg.kv_heads, cfg.head_dim);
                    generate(&toy, p, max_new, &mut c).map(|g| g.tokens)
                })
                .collect::<Result<_, _>>()?;
            let cells: Vec<(f64, &PolicySpec)> =
                budgets.iter().flat_map(|&b| specs.iter().map(move |s| (b, s))).collect();
            let values = exec.map(&cells, |&(b, spec)| -> Result<f64, Error> {
                let mut total = 0.0;
                for (p, reference) in prompts.iter().zip(&full) {
                    let resolved = BudgetSpec::rate(b).resolve(spec, p.len() + max_new)?;
                    let mut c = CacheSet::new(cfg.layers, cfg.kv_heads, cfg.head_dim, resolved);
                    let g = generate(&toy, p, max_new, &mut c)?;
                    total += token_agreement(&g.tokens[p.len()..], &reference[p.len()..]);
                }
                Ok(total / prompts.len().max(1) as f64)
            });
            let mut rows = Vec::new();
            for (&(b, spec), v) in cells.iter().zip(values) {
                let v = v?;
                println!("{:<6} {:<14} {:.4}", b, spec.name, v);
                rows.push(CsvRow {
                    experiment: "agreement".into(),
                    method: spec.name.clone(),
                    budget: b,
                    r: 0,
                    b: 1,
                    seed: model.seed,
                    metric: "token_agreement".into(),
                    value: v,
                });
            }
            finish_csv(&out, &rows)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                eprintln!("known policies: {}", CANONICAL_POLICIES.join(", "));
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
