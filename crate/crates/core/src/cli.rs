//! Command-line entry point: generate, audit, solve, train, evaluate, render.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{audit_hamiltonian, generate_corpus, split_sizes, GenerationConfig};
use crate::evaluation::{aggregate, format_report, read_rows, render_paths, score_route, write_rows, MetricsRow};
use crate::heuristics::{exact_dfs, run, validate_route, Method, Route};
use crate::inference::{self, stream_seed, InferenceConfig, Mode};
use crate::instance::{read_corpus, sha256_hex, write_corpus, AoiInstance, Split};
use crate::policy::Checkpoint;
use crate::training::{TrainConfig, Trainer};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn config<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "hexcover", version, about = "Coverage path planning on hexagonal grids")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// TOML file with [generate], [train] and [inference] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an audited instance corpus.
    Generate(GenerateArgs),
    /// Re-run the Hamiltonian audit on every instance of a corpus.
    Audit(AuditArgs),
    /// Solve a corpus with a heuristic or a trained policy.
    Solve(SolveArgs),
    /// Train a policy with GRPO.
    Train(TrainArgs),
    /// Aggregate metrics files into a report.
    Evaluate(EvaluateArgs),
    /// Draw routes of one instance as SVG.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Total instance count, split 8:1:1.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Small instances for desk-scale training.
    #[arg(long)]
    pub tiny: bool,
    #[arg(long)]
    pub obstacle_rate: Option<f64>,
    #[arg(long)]
    pub min_cells: Option<usize>,
    #[arg(long)]
    pub max_cells: Option<usize>,
    #[arg(long)]
    pub audit_budget: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 2_000_000)]
    pub budget: u64,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Comma-separated heuristic names, `exact_dfs` or `all`.
    #[arg(long, conflicts_with = "mode")]
    pub method: Option<String>,
    /// Policy decoding mode: greedy, bok or bok_2opt.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 5_000_000)]
    pub exact_budget: u64,
    /// Metrics CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Route documents, one JSON object per line.
    #[arg(long)]
    pub routes: Option<PathBuf>,
    /// Record per-instance wall time (makes output machine-dependent).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Maximum epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub inner_epochs: Option<usize>,
    #[arg(long)]
    pub clip_eps: Option<f64>,
    #[arg(long)]
    pub entropy_coef: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub minibatch: Option<usize>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub p_aug: Option<f64>,
    #[arg(long)]
    pub temp_init: Option<f64>,
    #[arg(long)]
    pub temp_final: Option<f64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Metrics CSV files from `solve`.
    #[arg(long, required = true, num_args = 1..)]
    pub metrics: Vec<PathBuf>,
    /// Reference method for the common solved subset.
    #[arg(long)]
    pub reference: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// With --corpus and --routes, write one SVG per instance here.
    #[arg(long)]
    pub svg_dir: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub routes: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub instance: String,
    #[arg(long, num_args = 0..)]
    pub routes: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Optional config file tables; missing keys keep their defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub generate: Option<GenerationConfig>,
    pub train: Option<TrainConfig>,
    pub inference: Option<InferenceConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(data)?;
        Ok(Self { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
    }
}

/// Everything needed to re-run a command and check its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub wall_time_s: f64,
}

impl RunManifest {
    fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Internal(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(data)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(data)?;
        serde_json::from_str(&text).map_err(data)
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(data)?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?))
}

fn load_corpus(path: &Path) -> Result<Vec<AoiInstance>, CliError> {
    read_corpus(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("configs serialize")
}

pub fn run_cli(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        // A pool may already exist when called repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Generate(a) => cmd_generate(a, &file),
        Command::Audit(a) => cmd_audit(a),
        Command::Solve(a) => cmd_solve(a, &file),
        Command::Train(a) => cmd_train(a, &file),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Render(a) => cmd_render(a),
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match run_cli(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn generation_config(a: &GenerateArgs, file: &FileConfig) -> GenerationConfig {
    let mut cfg = file.generate.clone().unwrap_or_else(|| if a.tiny { GenerationConfig::tiny() } else { GenerationConfig::default() });
    if a.tiny && file.generate.is_some() {
        let t = GenerationConfig::tiny();
        cfg.area_band = t.area_band;
        cfg.target_cell_band = t.target_cell_band;
    }
    if let Some(n) = a.count {
        cfg.counts = split_sizes(n);
    }
    if let Some(s) = a.seed {
        cfg.master_seed = s;
    }
    if let Some(r) = a.obstacle_rate {
        cfg.obstacle_removal_rate = r;
    }
    if let Some(v) = a.min_cells {
        cfg.target_cell_band.0 = v;
    }
    if let Some(v) = a.max_cells {
        cfg.target_cell_band.1 = v;
    }
    if let Some(b) = a.audit_budget {
        cfg.audit_budget = b;
    }
    cfg
}

fn cmd_generate(a: GenerateArgs, file: &FileConfig) -> Result<(), CliError> {
    let t0 = Instant::now();
    let cfg = generation_config(&a, file);
    cfg.validate().map_err(config)?;
    let corpus = generate_corpus(&cfg).map_err(data)?;
    if let Some(bad) = corpus.iter().find(|i| !i.audit.hamiltonian) {
        return Err(CliError::Internal(format!("instance {} failed its audit", bad.id)));
    }
    write_corpus(create(&a.out)?, &corpus).map_err(data)?;
    RunManifest {
        command: "generate".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: to_value(&cfg),
        seeds: vec![cfg.master_seed],
        inputs: vec![],
        outputs: vec![FileHash::of(&a.out)?],
        wall_time_s: t0.elapsed().as_secs_f64(),
    }
    .write(&manifest_path(&a.out))?;
    println!("wrote {} instances to {}", corpus.len(), a.out.display());
    Ok(())
}

fn cmd_audit(a: AuditArgs) -> Result<(), CliError> {
    let corpus = load_corpus(&a.corpus)?;
    let failures: Vec<String> = corpus
        .par_iter()
        .filter_map(|inst| {
            let g = &inst.graph;
            let report = audit_hamiltonian(g, a.budget);
            let witness_ok = inst.audit.witness.as_ref().is_some_and(|w| {
                let mut nodes = vec![g.base()];
                nodes.extend(w);
                nodes.push(g.terminal());
                let r = Route::from_nodes(g, nodes);
                r.hamiltonian && validate_route(g, &r).is_ok()
            });
            (!(report.is_hamiltonian() && inst.audit.hamiltonian && witness_ok)).then(|| inst.id.clone())
        })
        .collect();
    let cells: Vec<usize> = corpus.iter().map(|i| i.graph.num_cells()).collect();
    println!(
        "audited {} instances: {} pass, {} fail; cells min {} max {}",
        corpus.len(),
        corpus.len() - failures.len(),
        failures.len(),
        cells.iter().min().copied().unwrap_or(0),
        cells.iter().max().copied().unwrap_or(0),
    );
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Data(format!("audit failed for {}", failures.join(", "))))
    }
}

/// One solved route as written to the routes file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDoc {
    pub method: String,
    pub instance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub route: Route,
}

enum Solver {
    Heuristic(Method),
    Exact(u64),
    Policy(Box<crate::policy::PolicyParams>, InferenceConfig),
}

impl Solver {
    fn name(&self) -> String {
        match self {
            Solver::Heuristic(m) => m.as_str().into(),
            Solver::Exact(_) => "exact_dfs".into(),
            Solver::Policy(_, c) => c.mode.as_str().into(),
        }
    }

    fn solve(&self, inst: &AoiInstance) -> Result<(Route, Option<u64>), CliError> {
        match self {
            Solver::Heuristic(m) => Ok((run(*m, &inst.graph), None)),
            Solver::Exact(budget) => exact_dfs(&inst.graph, *budget).map(|r| (r, None)).map_err(data),
            Solver::Policy(p, c) => {
                let cfg = InferenceConfig { seed: stream_seed(c.seed, inst.seed), ..*c };
                let r = inference::solve(&inst.graph, p, &cfg).map_err(|e| CliError::Internal(e.to_string()))?;
                Ok((r, (cfg.mode != Mode::Greedy).then_some(cfg.seed)))
            }
        }
    }
}

pub fn inference_config(a: &SolveArgs, file: &FileConfig, mode: Mode) -> InferenceConfig {
    let mut cfg = file.inference.unwrap_or_default();
    cfg.mode = mode;
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(t) = a.temperature {
        cfg.temperature = t;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg
}

fn solvers(a: &SolveArgs, file: &FileConfig) -> Result<(Vec<Solver>, serde_json::Value), CliError> {
    match (&a.method, &a.mode) {
        (Some(list), None) => {
            let mut out = Vec::new();
            for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                match name {
                    "all" => out.extend(Method::ALL.iter().map(|&m| Solver::Heuristic(m))),
                    "exact_dfs" => out.push(Solver::Exact(a.exact_budget)),
                    _ => out.push(Solver::Heuristic(name.parse().map_err(config)?)),
                }
            }
            if out.is_empty() {
                return Err(CliError::Config("--method lists no methods".into()));
            }
            Ok((out, serde_json::json!({ "method": list, "exact_budget": a.exact_budget })))
        }
        (None, Some(mode)) => {
            let mode: Mode = mode.parse().map_err(config)?;
            let ckpt = match a.checkpoint.as_deref() {
                None | Some("none") => return Err(CliError::Config(format!("mode {mode} needs --checkpoint"))),
                Some(p) => Checkpoint::load(Path::new(p)).map_err(|e| CliError::Data(format!("{p}: {e}")))?,
            };
            let params = ckpt.to_params().map_err(data)?;
            let cfg = inference_config(a, file, mode);
            cfg.validate().map_err(config)?;
            Ok((vec![Solver::Policy(Box::new(params), cfg)], to_value(&cfg)))
        }
        _ => Err(CliError::Config("give exactly one of --method or --mode".into())),
    }
}

fn cmd_solve(a: SolveArgs, file: &FileConfig) -> Result<(), CliError> {
    let t0 = Instant::now();
    let (solvers, cfg_value) = solvers(&a, file)?;
    let mut corpus = load_corpus(&a.corpus)?;
    if let Some(s) = a.split {
        corpus.retain(|i| i.split == Some(s));
    }
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut docs: Vec<RouteDoc> = Vec::new();
    for s in &solvers {
        let name = s.name();
        let solved = corpus
            .par_iter()
            .map(|inst| {
                let t = Instant::now();
                let (route, seed) = s.solve(inst)?;
                let ms = t.elapsed().as_secs_f64() * 1e3;
                let row = score_route(&name, &inst.id, &inst.graph, &route, a.timing.then_some(ms))
                    .map_err(|e| CliError::Internal(format!("{name} on {}: {e}", inst.id)))?;
                Ok((row, RouteDoc { method: name.clone(), instance_id: inst.id.clone(), seed, route }))
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        for (r, d) in solved {
            rows.push(r);
            docs.push(d);
        }
    }
    write_rows(create(&a.out)?, &rows).map_err(data)?;
    let mut outputs = vec![FileHash::of(&a.out)?];
    if let Some(path) = &a.routes {
        let mut w = create(path)?;
        for d in &docs {
            writeln!(w, "{}", serde_json::to_string(d).map_err(|e| CliError::Internal(e.to_string()))?).map_err(data)?;
        }
        w.flush().map_err(data)?;
        outputs.push(FileHash::of(path)?);
    }
    let mut inputs = vec![FileHash::of(&a.corpus)?];
    if let (Some(p), Some(_)) = (&a.checkpoint, &a.mode) {
        inputs.push(FileHash::of(Path::new(p))?);
    }
    RunManifest {
        command: "solve".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: serde_json::json!({ "solver": cfg_value, "split": a.split, "timing": a.timing }),
        seeds: a.seed.into_iter().collect(),
        inputs,
        outputs,
        wall_time_s: t0.elapsed().as_secs_f64(),
    }
    .write(&manifest_path(&a.out))?;
    println!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

pub fn train_config(a: &TrainArgs, file: &FileConfig) -> TrainConfig {
    let mut c = file.train.unwrap_or_default();
    macro_rules! set {
        ($($flag:ident => $field:expr),* $(,)?) => {
            $(if let Some(v) = a.$flag { $field = v; })*
        };
    }
    set!(
        epochs => c.max_epochs,
        seed => c.seed,
        group_size => c.group_size,
        inner_epochs => c.inner_epochs,
        clip_eps => c.clip_eps,
        entropy_coef => c.entropy_coef,
        lr => c.lr,
        batch_size => c.batch_size,
        minibatch => c.minibatch,
        grad_clip => c.grad_clip,
        patience => c.patience,
        p_aug => c.p_aug,
        temp_init => c.temp_init,
        temp_final => c.temp_final,
        d_model => c.dims.d,
        layers => c.dims.layers,
        heads => c.dims.heads,
    );
    c
}

fn cmd_train(a: TrainArgs, file: &FileConfig) -> Result<(), CliError> {
    let t0 = Instant::now();
    let cfg = train_config(&a, file);
    cfg.validate().map_err(config)?;
    let corpus = load_corpus(&a.corpus)?;
    let split = |s: Split| corpus.iter().filter(|i| i.split == Some(s)).cloned().collect::<Vec<_>>();
    let (train, val) = (split(Split::Train), split(Split::Val));
    if train.is_empty() || val.is_empty() {
        return Err(CliError::Data("corpus needs non-empty train and val splits".into()));
    }
    let mut inputs = vec![FileHash::of(&a.corpus)?];
    let mut trainer = match &a.resume {
        None => Trainer::new(cfg).map_err(config)?,
        Some(p) => {
            inputs.push(FileHash::of(p)?);
            let ck = Checkpoint::load(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            Trainer::resume(cfg, &ck).map_err(data)?
        }
    };
    std::fs::create_dir_all(&a.out_dir).map_err(data)?;
    let log_path = a.out_dir.join("train_log.csv");
    let last_path = a.out_dir.join("last.json");
    let best_path = a.out_dir.join("checkpoint.json");
    let mut log = csv::Writer::from_writer(create(&log_path)?);
    let mut io_err: Option<CliError> = None;
    trainer
        .fit(&train, &val, |t, row| {
            let r = log.serialize(row).and_then(|_| log.flush().map_err(csv::Error::from));
            if let Err(e) = r {
                io_err.get_or_insert(data(e));
            }
            if let Err(e) = t.checkpoint().save(&last_path) {
                io_err.get_or_insert(data(e));
            }
            eprintln!("epoch {} train_sr {:.3} val_sr {:.3} return {:.2}", row.epoch, row.train_sr, row.val_sr, row.mean_return);
        })
        .map_err(|e| CliError::Internal(e.to_string()))?;
    if let Some(e) = io_err {
        return Err(e);
    }
    drop(log);
    trainer.checkpoint().save(&last_path).map_err(data)?;
    trainer.best_checkpoint().save(&best_path).map_err(data)?;
    let manifest = a.out_dir.join("manifest.json");
    RunManifest {
        command: "train".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: to_value(&cfg),
        seeds: vec![cfg.seed],
        inputs,
        outputs: vec![FileHash::of(&best_path)?, FileHash::of(&last_path)?, FileHash::of(&log_path)?],
        wall_time_s: t0.elapsed().as_secs_f64(),
    }
    .write(&manifest)?;
    println!("trained to epoch {}; best val_sr {:?}", trainer.epoch, trainer.best_val);
    Ok(())
}

fn read_route_docs(paths: &[PathBuf]) -> Result<Vec<RouteDoc>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        let f = File::open(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(data)?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| CliError::Data(format!("{}:{}: {e}", p.display(), i + 1)))?);
        }
    }
    Ok(out)
}

fn render_instance(inst: &AoiInstance, docs: &[&RouteDoc]) -> Result<String, CliError> {
    for d in docs {
        validate_route(&inst.graph, &d.route).map_err(|e| CliError::Data(format!("{} on {}: {e}", d.method, inst.id)))?;
    }
    let routes: Vec<(&str, &Route)> = docs.iter().map(|d| (d.method.as_str(), &d.route)).collect();
    Ok(render_paths(&inst.graph, Some(&inst.polygon), &routes))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for p in &a.metrics {
        let f = File::open(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        rows.extend(read_rows(f).map_err(data)?);
    }
    if rows.is_empty() {
        return Err(CliError::Data("no metrics rows".into()));
    }
    let reference = a.reference.clone().unwrap_or_else(|| {
        if rows.iter().any(|r| r.method == "bok_2opt") {
            "bok_2opt".into()
        } else {
            rows[0].method.clone()
        }
    });
    let report = aggregate(&rows, &reference).map_err(data)?;
    let text = format_report(&report);
    print!("{text}");
    if let Some(p) = &a.out {
        std::fs::write(p, &text).map_err(data)?;
    }
    if let Some(p) = &a.json {
        std::fs::write(p, serde_json::to_string_pretty(&report).map_err(|e| CliError::Internal(e.to_string()))?).map_err(data)?;
    }
    if let Some(dir) = &a.svg_dir {
        let corpus = a.corpus.as_ref().ok_or_else(|| CliError::Config("--svg-dir needs --corpus".into()))?;
        let corpus = load_corpus(corpus)?;
        let docs = read_route_docs(&a.routes)?;
        let mut by_instance: BTreeMap<&str, Vec<&RouteDoc>> = BTreeMap::new();
        for d in &docs {
            by_instance.entry(&d.instance_id).or_default().push(d);
        }
        std::fs::create_dir_all(dir).map_err(data)?;
        for inst in &corpus {
            if let Some(ds) = by_instance.get(inst.id.as_str()) {
                std::fs::write(dir.join(format!("{}.svg", inst.id)), render_instance(inst, ds)?).map_err(data)?;
            }
        }
    }
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<(), CliError> {
    let corpus = load_corpus(&a.corpus)?;
    let inst = corpus
        .iter()
        .find(|i| i.id == a.instance)
        .ok_or_else(|| CliError::Data(format!("instance {} not in corpus", a.instance)))?;
    let docs = read_route_docs(&a.routes)?;
    let mine: Vec<&RouteDoc> = docs.iter().filter(|d| d.instance_id == inst.id).collect();
    let svg = render_instance(inst, &mine)?;
    let mut w = create(&a.out)?;
    w.write_all(svg.as_bytes()).map_err(data)?;
    w.flush().map_err(data)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("hexcover").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let file: FileConfig = toml::from_str("[train]\nlr = 1e-3\ngroup_size = 8\n[train.dims]\nd = 16\nheads = 4\n").unwrap();
        let Command::Train(a) = parse(&["train", "--corpus", "c", "--out-dir", "o", "--lr", "5e-4"]).command else {
            panic!()
        };
        let c = train_config(&a, &file);
        assert_eq!(c.lr, 5e-4);
        assert_eq!(c.group_size, 8);
        assert_eq!(c.dims.d, 16);
        assert_eq!(c.inner_epochs, 4);
        assert_eq!(c.clip_eps, 0.2);
    }

    #[test]
    fn generate_count_maps_to_splits() {
        let Command::Generate(a) = parse(&["generate", "--out", "x", "--count", "10", "--seed", "1"]).command else {
            panic!()
        };
        let c = generation_config(&a, &FileConfig::default());
        assert_eq!(c.counts, (8, 1, 1));
        assert_eq!(c.master_seed, 1);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[bogus]\nx = 1\n").is_err());
    }

    #[test]
    fn policy_modes_require_a_checkpoint() {
        let Command::Solve(a) = parse(&["solve", "--corpus", "c", "--mode", "greedy", "--checkpoint", "none", "--out", "o"]).command else {
            panic!()
        };
        let err = solvers(&a, &FileConfig::default()).err().unwrap();
        assert_eq!(err.exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn usage_errors_use_the_config_code() {
        assert_eq!(main_with_args(["hexcover", "solve"]), EXIT_CONFIG);
        assert_eq!(main_with_args(["hexcover", "generate", "--out", "/nonexistent/x", "--count", "0", "--obstacle-rate", "2"]), EXIT_CONFIG);
    }
}
