//! `partialnet` command line: training, evaluation, counting, benchmarking,
//! fusion checks, split search and ablation grids.
//!
//! Exit codes: 0 success, 1 failed run or check, 2 usage or configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use partialnet::complexity::{benchmark_throughput, count};
use partialnet::dpconv::{search, SearchConfig};
use partialnet::fusion::{default_tolerance, fuse_model_with_tol};
use partialnet::kv::{KvMap, KvWriter};
use partialnet::train::ablation::{run_ablation, Grid};
use partialnet::train::data::Normalization;
use partialnet::train::manifest::write_manifest;
use partialnet::train::trainer::{load_splits, CHECKPOINT_FILE, HISTORY_FILE};
use partialnet::train::{evaluate, train_with, EpochRecord, Precision, TrainConfig};
use partialnet::{Element, Error, Model, ModelConfig, Variant};

#[derive(Parser, Debug)]
#[command(name = "partialnet", version, about = "Partial-attention convolution networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write history, checkpoint and manifest.
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint on the test split.
    Eval(EvalArgs),
    /// Parameter and FLOP report.
    Count(CountArgs),
    /// Eval-mode throughput.
    Bench(BenchArgs),
    /// Fuse a model for inference and verify it against the original.
    FuseCheck(FuseArgs),
    /// Constrained split search on a toy network.
    DpconvSearch(SearchArgs),
    /// Comparison grids over attention scope, attention blocks and mixer.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Model variant; shorthand for `--set variant=..`.
    #[arg(long)]
    variant: Option<String>,
    /// Output directory for reports and the run manifest.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// More output; repeat for per-step detail.
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only the final report.
    #[arg(short, long)]
    quiet: bool,
}

impl Common {
    fn kv(&self) -> Result<KvMap, Error> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut kv = KvMap::parse(&text)?;
        let mut sets = Vec::new();
        if let Some(v) = &self.variant {
            sets.push(format!("variant={v}"));
        }
        sets.extend(self.overrides.iter().cloned());
        kv.apply_overrides(&sets)?;
        Ok(kv)
    }

    fn train_config(&self) -> Result<TrainConfig, Error> {
        TrainConfig::from_kv(self.kv()?)
    }

    fn model_config(&self) -> Result<ModelConfig, Error> {
        let mut kv = self.kv()?;
        let cfg = ModelConfig::from_kv(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Fail (exit 1) when the final top-1 is below this fraction.
    #[arg(long)]
    require_top1: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[command(flatten)]
    common: Common,
    /// Count every named variant instead of one model.
    #[arg(long)]
    all: bool,
    /// Square input side; defaults to the model input size.
    #[arg(long)]
    input: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value = "f32")]
    precision: String,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[command(flatten)]
    common: Common,
    /// Trained weights; without it the model is freshly initialized.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    probes: usize,
    #[arg(long, default_value = "f32")]
    precision: String,
    /// Largest allowed deviation; defaults by precision.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the fused checkpoint here.
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Grid to run; repeatable. All grids when omitted.
    #[arg(long, value_enum)]
    grid: Vec<GridArg>,
    /// Seeds per row.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Count only, even when a dataset is configured.
    #[arg(long)]
    count_only: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Tsv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum GridArg {
    Scope,
    Blocks,
    Mixer,
}

impl From<GridArg> for Grid {
    fn from(g: GridArg) -> Grid {
        match g {
            GridArg::Scope => Grid::Scope,
            GridArg::Blocks => Grid::Blocks,
            GridArg::Mixer => Grid::Mixer,
        }
    }
}

/// Outcome of a command that ran to completion.
enum Verdict {
    Pass,
    Fail(String),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command_line = std::env::args().collect::<Vec<_>>().join(" ");
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, &command_line),
        Command::Eval(a) => cmd_eval(a, &command_line),
        Command::Count(a) => cmd_count(a, &command_line),
        Command::Bench(a) => cmd_bench(a, &command_line),
        Command::FuseCheck(a) => cmd_fuse(a, &command_line),
        Command::DpconvSearch(a) => cmd_search(a, &command_line),
        Command::Ablate(a) => cmd_ablate(a, &command_line),
    };
    match result {
        Ok(Verdict::Pass) => ExitCode::SUCCESS,
        Ok(Verdict::Fail(why)) => {
            eprintln!("FAIL: {why}");
            ExitCode::from(1)
        }
        Err(e @ (Error::Config(_) | Error::UnknownKey(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn precision(s: &str) -> Result<Precision, Error> {
    s.parse()
}

fn write_report(dir: &Path, name: &str, text: &str) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn progress_line(r: &EpochRecord) -> String {
    let mut s = format!("epoch {:>3}  loss {:.4}  lr {:.2e}", r.epoch, r.train_loss, r.lr);
    if let Some(t) = r.eval_top1 {
        s.push_str(&format!("  top1 {:.4}", t));
    }
    if let Some(z) = r.zeta {
        s.push_str(&format!("  zeta {z:.1}"));
    }
    s
}

fn cmd_train(a: &TrainArgs, command_line: &str) -> Result<Verdict, Error> {
    let c = &a.common;
    let cfg = c.train_config()?;
    write_manifest(&c.out, command_line, &cfg.to_kv_text())?;
    let (train_set, test_set) = load_splits(&cfg)?;
    c.say(format!("train {} / test {} samples, {} epochs", train_set.len(), test_set.len(), cfg.epochs));
    let s = train_with(&cfg, &train_set, Some(&test_set), Some(&c.out), &mut |r| c.say(progress_line(r)))?;
    let top1 = s.history.final_top1();
    println!(
        "final top1 {}  wall {:.1}s  history {}  checkpoint {}",
        top1.map_or("-".into(), |t| format!("{t:.4}")),
        s.wall_seconds,
        c.out.join(HISTORY_FILE).display(),
        c.out.join(CHECKPOINT_FILE).display()
    );
    match (a.require_top1, top1) {
        (Some(min), Some(t)) if t < min => Ok(Verdict::Fail(format!("top1 {t:.4} below required {min}"))),
        (Some(_), None) => Ok(Verdict::Fail("no evaluation was run".into())),
        _ => Ok(Verdict::Pass),
    }
}

fn cmd_eval(a: &EvalArgs, command_line: &str) -> Result<Verdict, Error> {
    let c = &a.common;
    let cfg = c.train_config()?;
    let mut w = KvWriter::default();
    w.put("checkpoint", a.checkpoint.display());
    write_manifest(&c.out, command_line, &format!("{}{}", w.finish(), cfg.to_kv_text()))?;
    let (_, test_set) = load_splits(&cfg)?;
    let norm = Normalization::for_format(cfg.data_format);
    let top1 = match cfg.precision {
        Precision::F32 => {
            let mut m = Model::<f32>::load(&a.checkpoint)?;
            let side = m.config().input_size.0;
            evaluate(&mut m, &test_set, side, &norm, cfg.eval_batch_size)?
        }
        Precision::F64 => {
            let mut m = Model::<f64>::load(&a.checkpoint)?;
            let side = m.config().input_size.0;
            evaluate(&mut m, &test_set, side, &norm, cfg.eval_batch_size)?
        }
    };
    println!("top1 {top1:.4} on {} samples", test_set.len());
    write_report(&c.out, "eval.txt", &format!("top1\t{top1}\nsamples\t{}\n", test_set.len()))?;
    Ok(Verdict::Pass)
}

fn cmd_count(a: &CountArgs, command_line: &str) -> Result<Verdict, Error> {
    let c = &a.common;
    let base = c.model_config()?;
    let configs: Vec<(String, ModelConfig)> = if a.all {
        Variant::ALL
            .into_iter()
            .map(|v| {
                let (w, b, act) = v.shape();
                (v.name().to_string(), ModelConfig { base_width: w, stage_blocks: b, activation: act, ..base.clone() })
            })
            .collect()
    } else {
        vec![(c.variant.clone().unwrap_or_else(|| "model".into()), base.clone())]
    };
    let mut w = KvWriter::default();
    w.put("all", a.all).put("input", a.input.map_or("model".into(), |s| s.to_string()));
    write_manifest(&c.out, command_line, &format!("{}{}", w.finish(), base.kv_text()))?;
    let mut out = String::new();
    let mut summary = String::from("model\tparams\tflops\n");
    for (name, cfg) in &configs {
        let input = a.input.map_or(cfg.input_size, |s| (s, s));
        let model = Model::<f32>::declare(cfg)?;
        let r = count(&model, input)?;
        summary.push_str(&format!("{name}\t{}\t{}\n", r.total_params(), r.total_flops()));
        if a.all {
            continue;
        }
        out = match a.format {
            Format::Text => r.to_text(),
            Format::Tsv => r.to_delimited(),
        };
    }
    if a.all {
        out = summary.clone();
    }
    print!("{out}");
    write_report(&c.out, "count.txt", &out)?;
    Ok(Verdict::Pass)
}

fn cmd_bench(a: &BenchArgs, command_line: &str) -> Result<Verdict, Error> {
    let c = &a.common;
    let cfg = c.model_config()?;
    let p = precision(&a.precision)?;
    let mut w = KvWriter::default();
    w.put("batch", a.batch).put("warmup", a.warmup).put("reps", a.reps).put("precision", p);
    write_manifest(&c.out, command_line, &format!("{}{}", w.finish(), cfg.kv_text()))?;
    let t = match p {
        Precision::F32 => benchmark_throughput(&mut Model::<f32>::new(&cfg, 0)?, a.batch, a.warmup, a.reps)?,
        Precision::F64 => benchmark_throughput(&mut Model::<f64>::new(&cfg, 0)?, a.batch, a.warmup, a.reps)?,
    };
    println!("{t}");
    write_report(&c.out, "bench.txt", &format!("{t}\n"))?;
    Ok(Verdict::Pass)
}

fn fuse_run<T: Element>(a: &FuseArgs, cfg: &ModelConfig) -> Result<partialnet::fusion::FusionReport, Error> {
    let model = match &a.checkpoint {
        Some(p) => Model::<T>::load(p)?,
        None => Model::<T>::new(cfg, a.seed)?,
    };
    let tol = a.tol.unwrap_or_else(|| default_tolerance(T::DTYPE));
    let (fused, report) = fuse_model_with_tol(&model, a.probes, tol, a.seed)?;
    if let (Some(path), true) = (&a.save, report.passed()) {
        fused.save(path)?;
    }
    Ok(report)
}

fn cmd_fuse(a: &FuseArgs, command_line: &str) -> Result<Verdict, Error> {
    let c = &a.common;
    let cfg = c.model_config()?;
    let p = precision(&a.precision)?;
    let mut w = KvWriter::default();
    w.put("probes", a.probes).put("precision", p).put("seed", a.seed);
    if let Some(t) = a.tol {
        w.put("tol", t);
    }
    if let Some(ck) = &a.checkpoint {
        w.put("checkpoint", ck.display());
    }
    write_manifest(&c.out, command_line, &format!("{}{}", w.finish(), cfg.kv_text()))?;
    let report = match p {
        Precision::F32 => fuse_run::<f32>(a, &cfg)?,
        Precision::F64 => fuse_run::<f64>(a, &cfg)?,
    };
    let text = report.to_text();
    if c.verbose > 0 {
        print!("{text}");
    } else {
        print!("{}", text.lines().rev().take(2).collect::<Vec<_>>().into_iter().rev().map(|l| format!("{l}\n")).collect::<String>());
    }
    write_report(&c.out, "fusion.txt", &text)?;
    if report.passed() {
        Ok(Verdict::Pass)
    } else {
        Ok(Verdict::Fail(format!("fused model deviates by {:.3e}", report.equivalence.max_deviation)))
    }
}

fn cmd_search(a: &SearchArgs, command_line: &str) -> Result<Verdict, Error> {
    let c = &a.common;
    let mut kv = c.kv()?;
    let d = SearchConfig::default();
    let mut cfg = SearchConfig {
        channels: kv.take_or("channels", d.channels)?,
        layers: kv.take_or("layers", d.layers)?,
        theta: kv.take_or("theta", d.theta)?,
        init_ones: kv.take("init_ones")?,
        steps: kv.take_or("steps", d.steps)?,
        batch: kv.take_or("batch", d.batch)?,
        image: kv.take_or("image", d.image)?,
        classes: kv.take_or("classes", d.classes)?,
        lr: kv.take_or("lr", d.lr)?,
        seed: kv.take_or("seed", d.seed)?,
        residual: kv.take_or("residual", d.residual)?,
        noise: kv.take_or("noise", d.noise)?,
    };
    kv.finish()?;
    cfg.theta = a.theta.unwrap_or(cfg.theta);
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.layers = a.layers.unwrap_or(cfg.layers);
    cfg.channels = a.channels.unwrap_or(cfg.channels);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let mut w = KvWriter::default();
    w.put("channels", cfg.channels)
        .put("layers", cfg.layers)
        .put("theta", cfg.theta)
        .put("steps", cfg.steps)
        .put("batch", cfg.batch)
        .put("image", cfg.image)
        .put("classes", cfg.classes)
        .put("lr", cfg.lr)
        .put("seed", cfg.seed)
        .put("residual", cfg.residual)
        .put("noise", cfg.noise);
    if let Some(n) = cfg.init_ones {
        w.put("init_ones", n);
    }
    write_manifest(&c.out, command_line, &w.finish())?;
    let r = search(&cfg)?;
    let mut hist = String::from("step\ttask_loss\tobjective\tzeta\tpsi\n");
    for h in &r.history {
        hist.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", h.step, h.task_loss, h.objective, h.zeta, h.psi));
        if c.verbose > 1 {
            c.say(format!("step {:>4}  task {:.4}  zeta {:.1}  psi {}", h.step, h.task_loss, h.zeta, h.psi));
        }
    }
    write_report(&c.out, "search_history.tsv", &hist)?;
    let table = r.table();
    write_report(&c.out, "split_ratios.txt", &table)?;
    print!("{table}");
    println!(
        "zeta {:.1} -> {:.1}, budget {:.1}, psi {}, feasible at {}",
        r.initial_zeta,
        r.final_zeta(),
        r.budget.kappa,
        r.final_psi(),
        r.feasible_at.map_or("never".into(), |s| format!("step {s}"))
    );
    if r.final_zeta() <= r.budget.kappa && r.final_psi() == 0.0 {
        Ok(Verdict::Pass)
    } else {
        Ok(Verdict::Fail("search ended outside the complexity budget".into()))
    }
}

fn cmd_ablate(a: &AblateArgs, command_line: &str) -> Result<Verdict, Error> {
    let c = &a.common;
    let cfg = c.train_config()?;
    let grids: Vec<Grid> = if a.grid.is_empty() { Grid::ALL.to_vec() } else { a.grid.iter().map(|&g| g.into()).collect() };
    let mut w = KvWriter::default();
    w.put("grids", grids.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(","))
        .put("seeds", a.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","))
        .put("count_only", a.count_only);
    write_manifest(&c.out, command_line, &format!("{}{}", w.finish(), cfg.to_kv_text()))?;
    let data = if a.count_only || cfg.data_path.is_none() {
        c.say("no dataset configured; counting only");
        None
    } else {
        Some(load_splits(&cfg)?)
    };
    for g in grids {
        let report = run_ablation(&cfg, g, &a.seeds, data.as_ref().map(|(tr, te)| (tr, te)), &mut |name, seed, r| {
            if c.verbose > 0 {
                c.say(format!("{g} {name} seed {seed}: {}", progress_line(r)));
            }
        })?;
        let text = report.to_text();
        print!("{text}");
        write_report(&c.out, &format!("ablation_{g}.tsv"), &text)?;
    }
    Ok(Verdict::Pass)
}
