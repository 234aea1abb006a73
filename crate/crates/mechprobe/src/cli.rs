// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line interface.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mechprobe_core::analysis::{
    correlate_scores, greedy_layer_prune, heatmap_rows, robustness_report, ProbeInputs,
    RobustnessBin,
};
use mechprobe_core::flow::{check_domination_bound, rollout_attention, FlowExampleReport};
use mechprobe_core::heads::{
    head_profiles, make_schedule, pruning_curve, HeadEntropyRow, PruneCriterion, PruningCurveRow,
};
use mechprobe_core::probe::DataSplits;
use mechprobe_core::repro::{
    repro_table, CellStatus, Printed, ReproTable, Score, Variant, TOLERANCE,
};
use mechprobe_core::taskgen::{Dataset, TaskKind};
use mechprobe_core::toylm::{Model, PruneMask};
use mechprobe_core::trace::TraceKind;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{self, TraceSet};
use crate::pipeline::{self, Artifacts, Pool, ProbeTraces, Split, Stamped};

#[derive(Debug, Parser)]
#[command(
    name = "mechprobe",
    version,
    about = "Train a toy transformer on synthetic reasoning tasks and probe its attention"
)]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Directory holding every artifact of the run.
    #[arg(long, global = true, value_name = "DIR")]
    pub work_dir: Option<PathBuf>,
    /// Worker threads for evaluation and trace collection.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Leave timestamps out of the output files.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train, dev, test and probe-train splits as JSONL.
    Gen(GenArgs),
    /// Train the model and write it with its random-init baseline.
    Train(TrainArgs),
    /// Record simplified attention of both models on the probe splits.
    Trace(TraceArgs),
    /// Fit the kNN probes on recorded traces and score them.
    Probe(ProbeArgs),
    /// Size and position entropy of every head.
    Entropy,
    /// Accuracy while pruning heads in entropy or random order.
    PruneHeads,
    /// Greedily disable attention sublayers within an accuracy budget.
    PruneLayers(PruneLayersArgs),
    /// Check the first-token domination bound on the model's attention.
    FlowCheck(FlowArgs),
    /// Correlate subset accuracy with subset probe scores.
    Correlate(ResampleArgs),
    /// Accuracy change under corruption of a useless statement, binned by S_P2.
    Robustness(RobustnessArgs),
    /// Write one example's head-pooled trace as a layer x index grid.
    Heatmap(HeatmapArgs),
    /// Recompute the published GPT-2 normalized scores from the raw F1 table.
    ReproTables(ReproArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Kth,
    Chain,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
    ProbeTrain,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
            SplitArg::ProbeTrain => Split::ProbeTrain,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// List length of k-th smallest inputs.
    #[arg(long)]
    pub m: Option<u32>,
    /// Target rank of k-th smallest inputs.
    #[arg(long)]
    pub k: Option<u32>,
    /// Number of training examples.
    #[arg(long)]
    pub n: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Content symbols (numbers, or entities plus attributes).
    #[arg(long)]
    pub vocab_size: Option<u32>,
    /// Statements per chain-proof example.
    #[arg(long)]
    pub n_statements: Option<u32>,
    /// Gold tree depth of chain proofs (0 or 1).
    #[arg(long)]
    pub chain_depth: Option<u32>,
    /// Write a single split to this file instead of all splits to the work directory.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Split written with --out.
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed of the batch order.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    /// Keep one slot per head instead of pooling heads.
    #[arg(long)]
    pub per_head: bool,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub k_neighbors: Option<usize>,
    /// Probe only the first N layers.
    #[arg(long)]
    pub prefix: Option<usize>,
    /// Skip the layer-wise and per-height curves.
    #[arg(long)]
    pub no_layerwise: bool,
}

#[derive(Debug, Args)]
pub struct PruneLayersArgs {
    /// Largest tolerated dev-accuracy drop.
    #[arg(long)]
    pub budget: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FlowArgs {
    /// Number of test examples to roll out.
    #[arg(long)]
    pub examples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ResampleArgs {
    #[arg(long)]
    pub resamples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    #[command(flatten)]
    pub resample: ResampleArgs,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum HeatmapKind {
    HeadPooled,
    CrossPooled,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    /// Position of the example in the test split.
    #[arg(long, default_value_t = 0)]
    pub example: usize,
    #[arg(long, value_enum, default_value = "head-pooled")]
    pub kind: HeatmapKind,
    /// Use the random-init baseline instead of the trained model.
    #[arg(long)]
    pub random: bool,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReproArgs {
    /// Agreement tolerance in percentage points.
    #[arg(long, default_value_t = TOLERANCE)]
    pub tolerance: f64,
    /// Print JSON instead of a text table.
    #[arg(long)]
    pub json: bool,
}

/// Settings shared by every command after merging config file and flags.
pub struct Context {
    pub cfg: RunConfig,
    pub paths: Artifacts,
    pub pool: Pool,
    pub deterministic: bool,
}

impl Context {
    fn stamp<T: Serialize>(&self, result: T) -> Stamped<'_, T> {
        Stamped::new(&self.cfg, self.deterministic, result)
    }

    fn write_json<T: Serialize>(&self, path: &Path, result: T) -> Result<()> {
        io::write_json(path, &self.stamp(result))
    }

    fn write_csv<T: Serialize>(&self, path: &Path, rows: &[T]) -> Result<()> {
        io::write_csv(path, rows)?;
        io::write_json(&Artifacts::echo_for(path), &self.stamp(()))
    }

    fn dataset(&self, split: Split) -> Result<Dataset> {
        io::read_dataset(&self.paths.dataset(split))
    }

    fn model(&self) -> Result<Model<f32>> {
        io::load_checkpoint(&self.paths.model(), None)
    }

    fn random_model(&self) -> Result<Model<f32>> {
        io::load_checkpoint(&self.paths.random_model(), None)
    }

    fn ensure_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.paths.dir).map_err(|e| Error::io(&self.paths.dir, e))
    }

    fn read_probe_traces(&self) -> Result<ProbeTraces> {
        let read = |who: &str, split: &str| {
            io::read_traces(&self.paths.traces(who, split)).map(|s| s.traces)
        };
        Ok(ProbeTraces {
            model_train: read("model", "train")?,
            model_test: read("model", "test")?,
            rand_train: read("random", "train")?,
            rand_test: read("random", "test")?,
        })
    }
}

fn apply_overrides(cfg: &mut RunConfig, cli: &Cli) {
    if let Some(dir) = &cli.work_dir {
        cfg.paths.work_dir = dir.clone();
    }
    match &cli.command {
        Command::Gen(a) => {
            let t = &mut cfg.task;
            if let Some(task) = a.task {
                t.task = match task {
                    TaskArg::Kth => TaskKind::KthSmallest,
                    TaskArg::Chain => TaskKind::ChainProof,
                };
            }
            t.m = a.m.unwrap_or(t.m);
            t.k = a.k.unwrap_or(t.k);
            t.n_examples = a.n.unwrap_or(t.n_examples);
            t.seed = a.seed.unwrap_or(t.seed);
            t.vocab_size = a.vocab_size.unwrap_or(t.vocab_size);
            t.n_statements = a.n_statements.unwrap_or(t.n_statements);
            t.chain_depth = a.chain_depth.unwrap_or(t.chain_depth);
        }
        Command::Train(a) => {
            let t = &mut cfg.train;
            t.epochs = a.epochs.unwrap_or(t.epochs);
            t.learning_rate = a.lr.unwrap_or(t.learning_rate);
            t.batch_size = a.batch_size.unwrap_or(t.batch_size);
            t.seed = a.seed.unwrap_or(t.seed);
        }
        Command::Trace(a) => cfg.probe.per_head |= a.per_head,
        Command::Probe(a) => {
            cfg.probe.k_neighbors = a.k_neighbors.unwrap_or(cfg.probe.k_neighbors);
            cfg.probe.prefix = a.prefix.or(cfg.probe.prefix);
            cfg.analysis.layerwise &= !a.no_layerwise;
        }
        Command::PruneLayers(a) => {
            cfg.analysis.layer_budget = a.budget.unwrap_or(cfg.analysis.layer_budget)
        }
        Command::FlowCheck(a) => {
            cfg.analysis.flow_examples = a.examples.unwrap_or(cfg.analysis.flow_examples)
        }
        Command::Correlate(r) | Command::Robustness(RobustnessArgs { resample: r, .. }) => {
            cfg.analysis.n_resamples = r.resamples.unwrap_or(cfg.analysis.n_resamples);
            cfg.analysis.seed = r.seed.unwrap_or(cfg.analysis.seed);
            if let Command::Robustness(a) = &cli.command {
                cfg.analysis.n_bins = a.bins.unwrap_or(cfg.analysis.n_bins);
            }
        }
        _ => {}
    }
}

pub fn context(cli: &Cli) -> Result<Context> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, cli);
    cfg.validate()?;
    Ok(Context {
        paths: Artifacts::new(cfg.work_dir()),
        pool: Pool::new(cli.threads)?,
        deterministic: cli.deterministic,
        cfg,
    })
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = context(cli)?;
    match &cli.command {
        Command::Gen(a) => gen(&ctx, a),
        Command::Train(_) => train(&ctx),
        Command::Trace(_) => trace(&ctx),
        Command::Probe(_) => probe(&ctx),
        Command::Entropy => entropy(&ctx),
        Command::PruneHeads => prune_heads(&ctx),
        Command::PruneLayers(_) => prune_layers(&ctx),
        Command::FlowCheck(_) => flow_check(&ctx),
        Command::Correlate(_) => correlate(&ctx),
        Command::Robustness(_) => robustness(&ctx),
        Command::Heatmap(a) => heatmap(&ctx, a),
        Command::ReproTables(a) => repro(a),
    }
}

fn gen(ctx: &Context, a: &GenArgs) -> Result<()> {
    if let Some(out) = &a.out {
        let ds = pipeline::generate_split(&ctx.cfg, a.split.into())?;
        return io::write_dataset(out, &ds);
    }
    ctx.ensure_dir()?;
    for split in Split::ALL {
        let ds = pipeline::generate_split(&ctx.cfg, split)?;
        io::write_dataset(&ctx.paths.dataset(split), &ds)?;
        eprintln!("{}: {} examples", split.name(), ds.len());
    }
    Ok(())
}

fn train(ctx: &Context) -> Result<()> {
    let train_ds = ctx.dataset(Split::Train)?;
    let dev_ds = ctx.dataset(Split::Dev)?;
    let (model, log) = pipeline::train_model(&ctx.cfg, &train_ds, &dev_ds, &ctx.pool, |e| {
        eprintln!(
            "epoch {}: loss {:.4}, dev accuracy {}",
            e.epoch,
            e.train_loss,
            e.dev_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
        )
    })?;
    io::save_checkpoint(&model, &ctx.paths.model())?;
    io::save_checkpoint(
        &pipeline::random_model(&ctx.cfg)?,
        &ctx.paths.random_model(),
    )?;
    ctx.write_json(&ctx.paths.training_log(), &log)
}

fn trace(ctx: &Context) -> Result<()> {
    let model = ctx.model()?;
    let rand = ctx.random_model()?;
    let probe_train = ctx.dataset(Split::ProbeTrain)?;
    let test = ctx.dataset(Split::Test)?;
    let traces = pipeline::collect_probe_traces(
        &ctx.pool,
        &ctx.cfg.probe,
        &model,
        &rand,
        &probe_train,
        &test,
    )?;
    let kind = pipeline::probe_kind(&ctx.cfg.probe, &test);
    let cfg = model.config();
    let heads = if kind.is_pooled() { 1 } else { cfg.n_heads };
    for (who, split, t) in [
        ("model", "train", traces.model_train),
        ("model", "test", traces.model_test),
        ("random", "train", traces.rand_train),
        ("random", "test", traces.rand_test),
    ] {
        let set = TraceSet::new(kind, cfg.n_layers, heads, t)?;
        io::write_traces(&ctx.paths.traces(who, split), &set)?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |s| format!("{s:.4}"))
}

fn probe(ctx: &Context) -> Result<()> {
    let traces = ctx.read_probe_traces()?;
    let probe_train = ctx.dataset(Split::ProbeTrain)?;
    let test = ctx.dataset(Split::Test)?;
    let report = pipeline::full_probe_report(
        &traces,
        &probe_train,
        &test,
        &ctx.cfg.probe,
        ctx.cfg.analysis.layerwise,
    )?;
    println!(
        "usefulness: raw {:.4}, random {:.4}, S_P1 {}",
        report.raw_f1_usefulness,
        report.rand_f1_usefulness,
        fmt_opt(report.s_p1)
    );
    println!(
        "height:     raw {:.4}, random {:.4}, S_P2 {}",
        report.raw_f1_height,
        report.rand_f1_height,
        fmt_opt(report.s_p2)
    );
    for l in &report.per_layer {
        println!(
            "  layers 1..{}: S_P1 {}, S_P2 {}",
            l.layers,
            fmt_opt(l.usefulness.normalized),
            fmt_opt(l.height.normalized)
        );
    }
    ctx.write_json(&ctx.paths.probe_report(), &report)
}

fn profiles(
    ctx: &Context,
    model: &Model<f32>,
    test: &Dataset,
) -> Result<Vec<mechprobe_core::heads::HeadProfile>> {
    let traces =
        ctx.pool
            .collect_traces(model, test, TraceKind::LastToken, None, &PruneMask::none())?;
    Ok(head_profiles(&traces, test)?)
}

fn entropy(ctx: &Context) -> Result<()> {
    let model = ctx.model()?;
    let test = ctx.dataset(Split::Test)?;
    let rows: Vec<HeadEntropyRow> = profiles(ctx, &model, &test)?
        .iter()
        .map(HeadEntropyRow::from)
        .collect();
    ctx.write_csv(&ctx.paths.head_entropy(), &rows)
}

fn prune_heads(ctx: &Context) -> Result<()> {
    let model = ctx.model()?;
    let test = ctx.dataset(Split::Test)?;
    let profiles = profiles(ctx, &model, &test)?;
    let mut criteria = vec![
        PruneCriterion::SizeEntropyAscending,
        PruneCriterion::PositionEntropyAscending,
    ];
    criteria.extend(
        ctx.cfg
            .analysis
            .random_prune_seeds
            .iter()
            .map(|&seed| PruneCriterion::Random { seed }),
    );
    let mut rows = Vec::new();
    for crit in criteria {
        let schedule = make_schedule(&profiles, crit, &ctx.cfg.analysis.prune_rates)?;
        let name = match crit {
            PruneCriterion::Random { seed } => format!("random:{seed}"),
            c => c.name().to_string(),
        };
        for p in pruning_curve(&ctx.pool, &model, &test, &schedule)? {
            println!(
                "{name:>18} rate {:.2} ({:>2} heads): accuracy {:.4}",
                p.rate, p.n_pruned, p.accuracy
            );
            rows.push(PruningCurveRow {
                criterion: name.clone(),
                rate: p.rate,
                accuracy: p.accuracy,
            });
        }
    }
    ctx.write_csv(&ctx.paths.pruning_curve(), &rows)
}

fn prune_layers(ctx: &Context) -> Result<()> {
    let model = ctx.model()?;
    let dev = ctx.dataset(Split::Dev)?;
    let report = greedy_layer_prune(&ctx.pool, &model, &dev, ctx.cfg.analysis.layer_budget)?;
    for s in &report.steps {
        println!(
            "layer {}: accuracy {:.4} (drop {:.4}) {}",
            s.layer,
            s.accuracy,
            s.cumulative_drop,
            if s.accepted { "disabled" } else { "kept" }
        );
    }
    ctx.write_json(&ctx.paths.layer_prune_log(), &report)
}

#[derive(Debug, Serialize)]
struct FlowSummary {
    n_examples: usize,
    n_violations: usize,
    min_margin: f64,
    examples: Vec<FlowExampleReport>,
}

fn flow_check(ctx: &Context) -> Result<()> {
    let model = ctx.model()?;
    let test = ctx.dataset(Split::Test)?;
    let mut examples = Vec::new();
    for ex in test.iter().take(ctx.cfg.analysis.flow_examples) {
        let rec = model.forward(&ex.tokens, &PruneMask::none())?;
        let b = check_domination_bound(&rollout_attention(&rec.attention)?);
        examples.push(FlowExampleReport {
            example_id: ex.id,
            epsilon: b.epsilon,
            margin: b.margin,
            holds: b.holds,
        });
    }
    let summary = FlowSummary {
        n_examples: examples.len(),
        n_violations: examples.iter().filter(|e| !e.holds).count(),
        min_margin: examples
            .iter()
            .map(|e| e.margin)
            .fold(f64::INFINITY, f64::min),
        examples,
    };
    println!(
        "{} examples, {} violations, min margin {:.3e}",
        summary.n_examples, summary.n_violations, summary.min_margin
    );
    ctx.write_json(&ctx.paths.flow_report(), &summary)?;
    if summary.n_violations > 0 {
        return Err(Error::CheckFailed(format!(
            "domination bound violated on {} examples",
            summary.n_violations
        )));
    }
    Ok(())
}

struct ProbeData {
    traces: ProbeTraces,
    probe_train: Dataset,
    test: Dataset,
}

impl ProbeData {
    fn load(ctx: &Context) -> Result<Self> {
        Ok(Self {
            traces: ctx.read_probe_traces()?,
            probe_train: ctx.dataset(Split::ProbeTrain)?,
            test: ctx.dataset(Split::Test)?,
        })
    }

    fn inputs<'a>(&'a self, cfg: &'a RunConfig) -> ProbeInputs<'a> {
        ProbeInputs {
            model: self.traces.model(),
            rand: self.traces.rand(),
            ds: DataSplits {
                train: &self.probe_train,
                test: &self.test,
            },
            cfg: &cfg.probe,
        }
    }
}

fn correlate(ctx: &Context) -> Result<()> {
    let model = ctx.model()?;
    let data = ProbeData::load(ctx)?;
    let a = &ctx.cfg.analysis;
    let report = correlate_scores(
        data.inputs(&ctx.cfg),
        &model,
        a.n_resamples,
        a.subset_lo,
        a.subset_hi,
        a.seed,
    )?;
    println!("rho(accuracy, S_P1) = {}", fmt_opt(report.rho_acc_p1));
    println!("rho(accuracy, S_P2) = {}", fmt_opt(report.rho_acc_p2));
    println!("rho(S_P1, S_P2)     = {}", fmt_opt(report.rho_p1_p2));
    for n in &report.notes {
        println!("note: {n}");
    }
    ctx.write_csv(&ctx.paths.correlation(), &report.rows)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        rho_acc_p1: Option<f64>,
        rho_acc_p2: Option<f64>,
        rho_p1_p2: Option<f64>,
        notes: &'a [String],
    }
    ctx.write_json(
        &ctx.paths.correlation_summary(),
        Summary {
            rho_acc_p1: report.rho_acc_p1,
            rho_acc_p2: report.rho_acc_p2,
            rho_p1_p2: report.rho_p1_p2,
            notes: &report.notes,
        },
    )
}

fn robustness(ctx: &Context) -> Result<()> {
    let model = ctx.model()?;
    let data = ProbeData::load(ctx)?;
    let a = &ctx.cfg.analysis;
    let report = robustness_report(
        data.inputs(&ctx.cfg),
        &model,
        &ctx.cfg.task.vocab(),
        a.n_bins,
        a.n_resamples,
        a.subset_lo,
        a.subset_hi,
        a.seed,
    )?;
    println!(
        "accuracy {:.4} clean, {:.4} corrupted; {} subsets, {} undefined, {} examples skipped",
        report.clean_accuracy,
        report.corrupted_accuracy,
        report.n_subsets,
        report.n_undefined,
        report.n_skipped_examples
    );
    for b in &report.bins {
        println!(
            "  S_P2 [{:.3}, {:.3}]: {:>5} subsets, mean change {}",
            b.lo,
            b.hi,
            b.count,
            fmt_opt(b.mean_delta)
        );
    }
    let rows: Vec<RobustnessBin> = report.bins.clone();
    ctx.write_csv(&ctx.paths.robustness(), &rows)?;
    ctx.write_json(&ctx.paths.robustness_summary(), &report)
}

fn heatmap(ctx: &Context, a: &HeatmapArgs) -> Result<()> {
    let model = if a.random {
        ctx.random_model()?
    } else {
        ctx.model()?
    };
    let test = ctx.dataset(Split::Test)?;
    let Some(ex) = test.examples.get(a.example) else {
        return Err(mechprobe_core::Error::Input(format!(
            "test split has {} examples, asked for {}",
            test.len(),
            a.example
        ))
        .into());
    };
    let kind = match a.kind {
        HeatmapKind::HeadPooled => TraceKind::HeadPooled,
        HeatmapKind::CrossPooled => TraceKind::CrossPooled,
    };
    let rec = model.forward(&ex.tokens, &PruneMask::none())?;
    let kept: Option<BTreeSet<(usize, usize)>> = pipeline::head_subset(&ctx.cfg.probe);
    let t = mechprobe_core::trace::simplify(&rec.attention, ex, kind, kept.as_ref())?;
    let out = a.out.clone().unwrap_or_else(|| ctx.paths.heatmap());
    ctx.write_csv(&out, &heatmap_rows(&t)?)
}

fn printed(p: Printed) -> String {
    match p {
        Printed::Blank => "-".into(),
        Printed::Value(v) => format!("{v:.2}"),
        Printed::Below(v) => format!("< {v}"),
    }
}

pub fn render_repro(t: &ReproTable) -> String {
    let mut s = format!(
        "{:>2}  {:<10} {:<4} {:>9} {:>9} {:>7}  status\n",
        "k", "model", "score", "computed", "printed", "delta"
    );
    for c in &t.cells {
        let model = match c.variant {
            Variant::Pretrained => "GPT-2",
            Variant::Finetuned => "GPT-2_FT",
        };
        let score = match c.score {
            Score::P1 => "S_P1",
            Score::P2 => "S_P2",
        };
        let status = match c.status {
            CellStatus::Match => "ok",
            CellStatus::Blank => "ok (blank)",
            CellStatus::Mismatch => "MISMATCH",
            CellStatus::KnownMismatch => "MISMATCH (known inconsistency)",
            CellStatus::KnownButMatches => "UNEXPECTED MATCH",
        };
        s += &format!(
            "{:>2}  {:<10} {:<5} {:>9} {:>9} {:>7}  {}\n",
            c.k,
            model,
            score,
            c.computed.map_or("-".into(), |v| format!("{v:.2}")),
            printed(c.printed),
            c.delta.map_or("".into(), |d| format!("{d:+.2}")),
            status
        );
    }
    s
}

fn repro(a: &ReproArgs) -> Result<()> {
    let table = repro_table(a.tolerance);
    if a.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&table).expect("table serializes")
        );
    } else {
        print!("{}", render_repro(&table));
    }
    if !table.consistent() {
        return Err(Error::CheckFailed(format!(
            "normalized table disagrees beyond ±{}",
            a.tolerance
        )));
    }
    Ok(())
}
