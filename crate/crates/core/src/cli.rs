//! `gqakit` command-line driver.
//!
//! stdout carries primary results, stderr carries logs and the one-line
//! `error: kind=<kind> msg=<message>` failure record.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, Checkpoint};
use crate::convert::{convert_with_report, encode_checkpoint, load_any, AnyCheckpoint, ConversionMethod};
use crate::costmodel::{bench_generate, cost_csv, cost_sweep, median, HardwareSpec};
use crate::decoder::{generate, DEFAULT_CAPACITY};
use crate::error::{Error, Result};
use crate::tensor::{derive_seed, Precision, Rng, Scalar};
use crate::train::{
    eval_loss, pretrain_base, run_study, uptrain, BaseRun, StudyArm, StudySettings, SyntheticTask, TaskKind,
    TrainSettings,
};

#[derive(Debug, Parser)]
#[command(name = "gqakit", version, about = "Grouped-query attention toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Reduce the key/value group count of a checkpoint.
    Convert(ConvertArgs),
    /// Greedy generation with a KV cache.
    Decode(DecodeArgs),
    /// Time generation across group counts.
    Bench(BenchArgs),
    /// Analytic per-step cost over group counts.
    Report(ReportArgs),
    /// Pretrain a multi-head base model on a synthetic task.
    Train(TrainArgs),
    /// Convert a base model and continue training for a fraction of its budget.
    Uptrain(UptrainArgs),
    /// Evaluation loss of a checkpoint on the held-out synthetic stream.
    Eval(EvalArgs),
    /// Multi-seed conversion / uptraining study.
    Study(StudyArgs),
    /// Re-execute the command recorded in a run manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    /// Generate a seeded model instead of loading one, e.g. `H=8,dim=4,layers=2,vocab=64`.
    #[arg(long)]
    pub auto_model: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ConvertArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub groups: usize,
    /// mean | first | random
    #[arg(long, default_value = "mean")]
    pub method: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Conversion report path (default: `<out>.report.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub probe_sequences: usize,
    #[arg(long, default_value_t = 16)]
    pub probe_len: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct DecodeArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated prompt token ids; random if omitted.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long, default_value_t = 8)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 16)]
    pub gen: usize,
    #[arg(long, default_value_t = DEFAULT_CAPACITY)]
    pub capacity: usize,
    /// DecodeTrace JSON path.
    #[arg(long, default_value = "decode.trace.json")]
    pub trace_out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// Comma-separated checkpoint paths; otherwise models are generated.
    #[arg(long, value_delimiter = ',')]
    pub ckpts: Vec<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub groups: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    pub seq_in: usize,
    #[arg(long, default_value_t = 64)]
    pub seq_out: usize,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[arg(long, default_value = "desk")]
    pub hardware: String,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub groups: Vec<usize>,
    #[arg(long, default_value_t = 2048)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// desk | pod | `<bytes/s>,<flop/s>,<partitions>`
    #[arg(long, default_value = "desk")]
    pub hardware: String,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct TaskArgs {
    /// markov | copy:<offset>
    #[arg(long, default_value = "markov")]
    pub task: String,
    #[arg(long)]
    pub task_seed: Option<u64>,
    #[arg(long, default_value_t = 24)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 4096)]
    pub train_sequences: usize,
    #[arg(long, default_value_t = 64)]
    pub eval_sequences: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct UptrainArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub groups: usize,
    #[arg(long, default_value = "mean")]
    pub method: String,
    #[arg(long)]
    pub alpha: f64,
    /// Number of uptraining seeds (derived from `--seed`).
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Training sidecar holding the task (default: `<ckpt>.train.json`).
    #[arg(long)]
    pub settings: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct StudyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RerunArgs {
    pub manifest: PathBuf,
}

/// Provenance record written beside every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub params: serde_json::Value,
    pub seeds: Vec<u64>,
    pub precision: Precision,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub start_unix_s: f64,
    pub end_unix_s: f64,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

struct Run {
    subcommand: &'static str,
    argv: Vec<String>,
    params: serde_json::Value,
    seeds: Vec<u64>,
    precision: Precision,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    start: f64,
}

impl Run {
    fn new(subcommand: &'static str, argv: &[String], params: &impl Serialize) -> Result<Self> {
        Ok(Self {
            subcommand,
            argv: argv.to_vec(),
            params: serde_json::to_value(params)?,
            seeds: Vec::new(),
            precision: Precision::from_env()?,
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: unix_now(),
        })
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes)?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    fn write_json(&mut self, path: &Path, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(path, text.as_bytes())
    }

    /// Writes the manifest next to `anchor` as `<anchor>.manifest.json`.
    fn finish(self, anchor: &Path) -> Result<()> {
        let manifest = RunManifest {
            subcommand: self.subcommand.to_string(),
            argv: self.argv,
            params: self.params,
            seeds: self.seeds,
            precision: self.precision,
            inputs: self.inputs,
            outputs: self.outputs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            start_unix_s: self.start,
            end_unix_s: unix_now(),
        };
        let path = suffixed(anchor, "manifest.json");
        write_atomic(&path, format!("{}\n", serde_json::to_string_pretty(&manifest)?).as_bytes())
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes via a temporary sibling and rename so no partial file is left behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = suffixed(path, "tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Parses `H=8,dim=4,layers=2,vocab=64` (optional `G=`, `causal=`).
pub fn parse_auto_model(spec: &str) -> Result<AttentionConfig> {
    let (mut h, mut g, mut dim, mut layers, mut vocab, mut causal) = (8, None, 4, 2, 32, true);
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::Argument(format!("auto-model entry {part:?} is not key=value")))?;
        let num = || value.parse::<usize>().map_err(|_| Error::Argument(format!("bad value in {part:?}")));
        match key {
            "H" | "heads" => h = num()?,
            "G" | "groups" => g = Some(num()?),
            "dim" | "head_dim" => dim = num()?,
            "layers" => layers = num()?,
            "vocab" => vocab = num()?,
            "causal" => causal = value == "1" || value == "true",
            other => return Err(Error::Argument(format!("unknown auto-model key {other:?}"))),
        }
    }
    AttentionConfig::new(h, g.unwrap_or(h), dim, layers, vocab, causal)
}

fn parse_hardware(spec: &str) -> Result<HardwareSpec> {
    match spec {
        "desk" => Ok(HardwareSpec::desk()),
        "pod" => Ok(HardwareSpec::accelerator_pod()),
        custom => {
            let parts: Vec<&str> = custom.split(',').collect();
            let bad = || Error::Argument(format!("hardware {custom:?}: expected desk, pod or <bytes/s>,<flop/s>,<partitions>"));
            if parts.len() != 3 {
                return Err(bad());
            }
            HardwareSpec::new(
                parts[0].parse().map_err(|_| bad())?,
                parts[1].parse().map_err(|_| bad())?,
                parts[2].parse().map_err(|_| bad())?,
            )
        }
    }
}

fn parse_tokens(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| Error::Argument(format!("bad token id {t:?}"))))
        .collect()
}

impl TaskArgs {
    fn settings(&self, vocab: usize, steps: usize, seed: u64) -> Result<TrainSettings> {
        let kind = match self.task.as_str() {
            "markov" => TaskKind::Markov2,
            other => match other.strip_prefix("copy:") {
                Some(off) => TaskKind::Copy {
                    offset: off.parse().map_err(|_| Error::Argument(format!("bad copy offset in {other:?}")))?,
                },
                None => return Err(Error::Argument(format!("unknown task {other:?} (markov | copy:<offset>)"))),
            },
        };
        let s = TrainSettings {
            task: SyntheticTask { kind, seed: self.task_seed.unwrap_or(seed), vocab, seq_len: self.seq_len },
            lr: self.lr,
            batch_size: self.batch_size,
            train_sequences: self.train_sequences,
            eval_sequences: self.eval_sequences,
            base_steps: steps,
        };
        s.validate()?;
        s.task.sampler()?;
        Ok(s)
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn main_with_args(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), e.to_string().replace('\n', " "));
            1
        }
    }
}

pub fn run(cli: Cli, argv: &[String]) -> Result<()> {
    match cli.command {
        Command::Convert(a) => cmd_convert(a, argv),
        Command::Decode(a) => cmd_decode(a, argv),
        Command::Bench(a) => cmd_bench(a, argv),
        Command::Report(a) => cmd_report(a, argv),
        Command::Train(a) => cmd_train(a, argv),
        Command::Uptrain(a) => cmd_uptrain(a, argv),
        Command::Eval(a) => cmd_eval(a),
        Command::Study(a) => cmd_study(a, argv),
        Command::Rerun(a) => cmd_rerun(a),
    }
}

/// Calls `$body` with `$ck` bound to the concrete-precision checkpoint.
macro_rules! with_checkpoint {
    ($any:expr, $ck:ident => $body:expr) => {
        match $any {
            AnyCheckpoint::F32($ck) => $body,
            AnyCheckpoint::F64($ck) => $body,
        }
    };
}

/// Dispatches a generic call on the precision selected by `GQAKIT_PRECISION`.
macro_rules! with_precision {
    ($prec:expr, $f:ident => $body:expr) => {
        match $prec {
            Precision::F32 => {
                type $f = f32;
                $body
            }
            Precision::F64 => {
                type $f = f64;
                $body
            }
        }
    };
}

fn load_or_generate(ckpt: Option<&Path>, model: &ModelArgs, precision: Precision) -> Result<AnyCheckpoint> {
    match (ckpt, &model.auto_model) {
        (Some(path), None) => load_any(path),
        (None, spec) => {
            let cfg = parse_auto_model(spec.as_deref().unwrap_or(""))?;
            Ok(with_precision!(precision, F => generic_init::<F>(cfg, model.seed)?))
        }
        (Some(_), Some(_)) => Err(Error::Argument("pass either --ckpt or --auto-model, not both".into())),
    }
}

trait IntoAny: Sized {
    fn into_any(self) -> AnyCheckpoint;
}
impl IntoAny for Checkpoint<f32> {
    fn into_any(self) -> AnyCheckpoint {
        AnyCheckpoint::F32(self)
    }
}
impl IntoAny for Checkpoint<f64> {
    fn into_any(self) -> AnyCheckpoint {
        AnyCheckpoint::F64(self)
    }
}

fn generic_init<F: Scalar>(cfg: AttentionConfig, seed: u64) -> Result<AnyCheckpoint>
where
    Checkpoint<F>: IntoAny,
{
    Ok(Checkpoint::<F>::init(cfg, seed)?.into_any())
}

fn cmd_convert(a: ConvertArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("convert", argv, &a)?;
    run.inputs.push(a.input.clone());
    run.seeds.push(a.seed);
    let method = ConversionMethod::parse(&a.method, a.seed)?;
    let source = load_any(&a.input)?;
    run.precision = source.precision();
    let cfg = *source.config();
    let mut rng = Rng::new(derive_seed(a.seed, 0x9b0be));
    let probe: Vec<Vec<usize>> =
        (0..a.probe_sequences).map(|_| (0..a.probe_len.max(1)).map(|_| rng.below(cfg.vocab)).collect()).collect();
    let (bytes, report) = with_checkpoint!(&source, ck => {
        let (out, report) = convert_with_report(ck, a.groups, method, &probe)?;
        (encode_checkpoint(&out)?, report)
    });
    run.write(&a.out, &bytes)?;
    let report_path = a.report.clone().unwrap_or_else(|| suffixed(&a.out, "report.json"));
    run.write_json(&report_path, &report)?;
    println!("{}", serde_json::to_string(&report)?);
    run.finish(&a.out)
}

fn cmd_decode(a: DecodeArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("decode", argv, &a)?;
    run.seeds.push(a.model.seed);
    if let Some(p) = &a.ckpt {
        run.inputs.push(p.clone());
    }
    let model = load_or_generate(a.ckpt.as_deref(), &a.model, run.precision)?;
    run.precision = model.precision();
    let vocab = model.config().vocab;
    let prompt = match &a.prompt {
        Some(p) => parse_tokens(p)?,
        None => {
            let mut rng = Rng::new(derive_seed(a.model.seed, 0xd ^ 0x9));
            (0..a.prompt_len.max(1)).map(|_| rng.below(vocab)).collect()
        }
    };
    let trace = with_checkpoint!(&model, ck => generate(ck, &prompt, a.gen, a.capacity)?);
    let line: Vec<String> = trace.tokens.iter().map(|t| t.to_string()).collect();
    println!("{}", line.join(" "));
    run.write_json(&a.trace_out, &trace)?;
    run.finish(&a.trace_out)
}

fn bench_models(a: &BenchArgs, precision: Precision) -> Result<Vec<AnyCheckpoint>> {
    if !a.ckpts.is_empty() {
        if a.model.auto_model.is_some() {
            return Err(Error::Argument("pass either --ckpts or --auto-model, not both".into()));
        }
        let models = a.ckpts.iter().map(load_any).collect::<Result<Vec<_>>>()?;
        if models.iter().any(|m| m.precision() != models[0].precision()) {
            return Err(Error::Config("mismatched precisions across benchmark checkpoints".into()));
        }
        return Ok(models);
    }
    let cfg = parse_auto_model(a.model.auto_model.as_deref().unwrap_or(""))?;
    if cfg.n_kv_groups != cfg.n_heads {
        return Err(Error::Argument("auto-model for bench must be multi-head; groups come from --groups".into()));
    }
    let base = load_or_generate(None, &a.model, precision)?;
    a.groups
        .iter()
        .map(|&g| {
            Ok(with_checkpoint!(&base, ck => {
                crate::convert::convert_checkpoint(ck, g, ConversionMethod::MeanPool)?.into_any()
            }))
        })
        .collect()
}

fn cmd_bench(a: BenchArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("bench", argv, &a)?;
    run.seeds.push(a.model.seed);
    run.inputs.extend(a.ckpts.iter().cloned());
    let hw = parse_hardware(&a.hardware)?;
    let models = bench_models(&a, run.precision)?;
    run.precision = models[0].precision();
    let vocab = models[0].config().vocab;
    let mut rng = Rng::new(derive_seed(a.model.seed, 0xbe));
    let prompt: Vec<usize> = (0..a.seq_in.max(1)).map(|_| rng.below(vocab)).collect();
    let report = match run.precision {
        Precision::F32 => {
            let ms: Vec<Checkpoint<f32>> = models
                .into_iter()
                .filter_map(|m| if let AnyCheckpoint::F32(c) = m { Some(c) } else { None })
                .collect();
            bench_generate(&ms, &prompt, a.seq_out, a.trials, &hw)?
        }
        Precision::F64 => {
            let ms: Vec<Checkpoint<f64>> = models
                .into_iter()
                .filter_map(|m| if let AnyCheckpoint::F64(c) = m { Some(c) } else { None })
                .collect();
            bench_generate(&ms, &prompt, a.seq_out, a.trials, &hw)?
        }
    };
    let csv = report.to_csv();
    let csv_path = a.out_dir.join("bench.csv");
    run.write(&csv_path, csv.as_bytes())?;
    run.write_json(&a.out_dir.join("bench.json"), &report)?;
    print!("{csv}");
    if !report.wall_time_ordered() {
        eprintln!("note: measured time is not ordered in G within the {:.0}% noise band", report.noise_band * 100.0);
    }
    run.finish(&csv_path)
}

fn cmd_report(a: ReportArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("report", argv, &a)?;
    let cfg = parse_auto_model(a.model.auto_model.as_deref().unwrap_or(""))?;
    let hw = parse_hardware(&a.hardware)?;
    let reports = cost_sweep(&cfg, &a.groups, &hw, a.seq_len, a.batch, run.precision)?;
    let csv = cost_csv(&reports);
    let csv_path = a.out_dir.join("cost.csv");
    run.write(&csv_path, csv.as_bytes())?;
    run.write_json(&a.out_dir.join("cost.json"), &serde_json::json!({ "hardware": hw, "reports": reports }))?;
    print!("{csv}");
    run.finish(&csv_path)
}

fn cmd_train(a: TrainArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("train", argv, &a)?;
    run.seeds.push(a.model.seed);
    let cfg = parse_auto_model(a.model.auto_model.as_deref().unwrap_or(""))?;
    let settings = a.task.settings(cfg.vocab, a.steps, a.model.seed)?;
    let (bytes, base_run) = with_precision!(run.precision, F => {
        let (ck, br) = pretrain_base::<F>(cfg, &settings, a.model.seed)?;
        (encode_checkpoint(&ck)?, br)
    });
    run.write(&a.out, &bytes)?;
    run.write_json(&suffixed(&a.out, "train.json"), &base_run)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in base_run.loss_trajectory.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    run.write(&suffixed(&a.out, "loss.csv"), csv.as_bytes())?;
    println!("eval_loss {}", base_run.eval_loss);
    run.finish(&a.out)
}

fn read_sidecar(ckpt: &Path, explicit: Option<&Path>) -> Result<BaseRun> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| suffixed(ckpt, "train.json"));
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Argument(format!("cannot read training settings {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Serialize)]
struct UptrainAggregate {
    method: String,
    target_groups: usize,
    alpha: f64,
    seeds: Vec<u64>,
    base_eval_loss: f64,
    final_eval_losses: Vec<f64>,
    median_final_eval_loss: f64,
    files: Vec<PathBuf>,
}

fn cmd_uptrain(a: UptrainArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("uptrain", argv, &a)?;
    run.inputs.push(a.base.clone());
    if a.seeds == 0 {
        return Err(Error::Argument("--seeds must be at least 1".into()));
    }
    let base = load_any(&a.base)?;
    run.precision = base.precision();
    let settings = read_sidecar(&a.base, None)?.settings;
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| if a.seeds == 1 { a.seed } else { derive_seed(a.seed, i) }).collect();
    run.seeds = seeds.clone();
    let method_name = a.method.clone();
    let runs = crate::par::map(&seeds, |&seed| -> Result<_> {
        let method = ConversionMethod::parse(&method_name, seed)?;
        with_checkpoint!(&base, ck => uptrain(ck, &settings, a.groups, method, a.alpha, seed).map(|(_, r)| r))
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let stem = format!("uptrain_{}_g{}_a{}", a.method, a.groups, a.alpha);
    let mut files = Vec::new();
    for r in &runs {
        let path = a.out_dir.join(format!("{stem}_s{}.json", r.seed));
        run.write_json(&path, r)?;
        files.push(path);
    }
    let finals: Vec<f64> = runs.iter().map(|r| r.final_eval_loss).collect();
    let agg = UptrainAggregate {
        method: a.method.clone(),
        target_groups: a.groups,
        alpha: a.alpha,
        seeds,
        base_eval_loss: runs[0].base_eval_loss,
        median_final_eval_loss: median(&finals),
        final_eval_losses: finals,
        files,
    };
    let agg_path = a.out_dir.join(format!("{stem}_aggregate.json"));
    run.write_json(&agg_path, &agg)?;
    println!("base_eval_loss {} median_eval_loss {}", agg.base_eval_loss, agg.median_final_eval_loss);
    run.finish(&agg_path)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = load_any(&a.ckpt)?;
    let settings = read_sidecar(&a.ckpt, a.settings.as_deref())?.settings;
    let mut task = settings.task;
    task.vocab = model.config().vocab;
    let corpus = task.sampler()?.eval_corpus(settings.eval_sequences);
    let loss = with_checkpoint!(&model, ck => eval_loss(ck, &corpus)?);
    println!("{loss}");
    Ok(())
}

fn cmd_study(a: StudyArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("study", argv, &a)?;
    let cfg = parse_auto_model(a.model.auto_model.as_deref().unwrap_or(""))?;
    if cfg.n_kv_groups != cfg.n_heads {
        return Err(Error::Argument("study base model must be multi-head".into()));
    }
    let train = a.task.settings(cfg.vocab, a.steps, a.model.seed)?;
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| derive_seed(a.model.seed, i)).collect();
    run.seeds = seeds.clone();
    let settings = StudySettings { config: cfg, train, seeds };
    let half = (cfg.n_heads / 2).max(1);
    let arms = [
        StudyArm { method: ConversionMethod::MeanPool, groups: 1, alpha: 0.10 },
        StudyArm { method: ConversionMethod::FirstHead, groups: 1, alpha: 0.0 },
        StudyArm { method: ConversionMethod::RandomInit { seed: 0 }, groups: 1, alpha: 0.0 },
        StudyArm { method: ConversionMethod::MeanPool, groups: half, alpha: 0.10 },
    ];
    let report = with_precision!(run.precision, F => run_study::<F>(&settings, &arms)?);
    let mut csv = String::from("method,groups,alpha,median_eval_loss,per_seed\n");
    for c in &report.cells {
        let per: Vec<String> = c.per_seed.iter().map(|v| v.to_string()).collect();
        csv.push_str(&format!("{},{},{},{},{}\n", c.method.name(), c.target_groups, c.alpha, c.median, per.join(";")));
    }
    let csv_path = a.out_dir.join("study.csv");
    run.write(&csv_path, csv.as_bytes())?;
    run.write_json(&a.out_dir.join("study.json"), &report)?;
    print!("{csv}");
    run.finish(&csv_path)
}

fn cmd_rerun(a: RerunArgs) -> Result<()> {
    let text = fs::read_to_string(&a.manifest)?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    let cli = Cli::try_parse_from(&manifest.argv).map_err(|e| Error::Argument(e.to_string()))?;
    if matches!(cli.command, Command::Rerun(_)) {
        return Err(Error::Argument("manifest records a rerun".into()));
    }
    // Precision comes from the environment, so restore the recorded one.
    std::env::set_var("GQAKIT_PRECISION", manifest.precision.to_string());
    run(cli, &manifest.argv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auto_model_parsing() {
        let c = parse_auto_model("H=8,dim=4,layers=2,vocab=64").unwrap();
        assert_eq!((c.n_heads, c.n_kv_groups, c.head_dim, c.n_layers, c.vocab), (8, 8, 4, 2, 64));
        assert_eq!(c.d_model, 32);
        assert_eq!(parse_auto_model("H=4,G=2").unwrap().n_kv_groups, 2);
        assert!(parse_auto_model("H=8,G=3").is_err());
        assert!(parse_auto_model("H=8,colour=3").is_err());
        assert!(parse_auto_model("H").is_err());
    }

    #[test]
    fn hardware_parsing() {
        assert_eq!(parse_hardware("desk").unwrap(), HardwareSpec::desk());
        let hw = parse_hardware("1e9,2e9,4").unwrap();
        assert_eq!(hw.partitions, 4);
        assert!(parse_hardware("1e9,2e9").is_err());
        assert!(parse_hardware("0,1,1").is_err());
    }

    #[test]
    fn task_parsing() {
        let t = TaskArgs {
            task: "copy:3".into(),
            task_seed: None,
            seq_len: 8,
            lr: 0.1,
            batch_size: 2,
            train_sequences: 4,
            eval_sequences: 2,
        };
        assert_eq!(t.settings(5, 10, 1).unwrap().task.kind, TaskKind::Copy { offset: 3 });
        let bad = TaskArgs { task: "span".into(), ..t.clone() };
        assert!(bad.settings(5, 10, 1).is_err());
        let neg = TaskArgs { lr: -1.0, ..t };
        assert!(neg.settings(5, 10, 1).is_err());
    }

    #[test]
    fn suffixed_paths() {
        assert_eq!(suffixed(Path::new("a/b.gqac"), "report.json"), PathBuf::from("a/b.gqac.report.json"));
    }
}
