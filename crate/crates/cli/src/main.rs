use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use msrh::checkpoint::{load_checkpoint, save_checkpoint};
use msrh::corpus::{generate_parallel, load_corpus, pooled_labels, write_corpus, CorpusSpec, CODEBOOK_FILE, LABELS_FILE};
use msrh::dsp::CANONICAL_RATES;
use msrh::model::{ModelConfig, MsrModel};
use msrh::objective::{read_labels, write_labels};
use msrh::plan::{canonical_plan, derive_plan, validate_plan, DEFAULT_CHANNELS};
use msrh::probe::{layer_weight_report, probe_features, probe_train, ProbeConfig, ProbeMode, ProbeRow, REFERENCE_RATE};
use msrh::trainer::{append_metrics, overhead_report, OverheadConfig, TrainConfig, TrainSet, Trainer};
use msrh::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const METRICS_FILE: &str = "metrics.csv";
const FINAL_CHECKPOINT: &str = "final.ckpt";
const PROBE_FILE: &str = "probe.csv";
const LAYER_WEIGHTS_FILE: &str = "layer_weights.json";
const REPORT_FILE: &str = "report.json";

#[derive(Parser)]
#[command(name = "msrh", version, about = "Multi-sampling-rate masked-prediction pre-training at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the downsampling plan for a sampling rate and validate it.
    Plan(PlanArgs),
    /// Generate a parallel multi-rate synthetic corpus.
    GenCorpus(GenArgs),
    /// Fit the shared k-means codebook and write pseudo-labels.
    Labels(LabelArgs),
    /// Run mixed-rate masked-prediction pre-training.
    Pretrain(PretrainArgs),
    /// Train frozen-backbone frame-classification probes.
    Probe(ProbeArgs),
    /// Summarize a run directory as JSON.
    Report(ReportArgs),
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    rate: u32,
    #[arg(long, default_value_t = 0.02)]
    frame_shift: f64,
    /// Emit the plan as JSON instead of text.
    #[arg(long)]
    json: bool,
    /// Directory for the run manifest; nothing is written when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    /// Key-value spec file (duration_s, num_classes, count, seed).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "16000,22050,24000,48000")]
    rates: Vec<u32>,
    /// Overrides the spec file's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// JSON config with optional `model`, `train`, `rates` and `checkpoint_every`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.total_steps`.
    #[arg(long)]
    steps: Option<u64>,
    /// Overrides `train.seed`; also seeds model initialization.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint instead of initializing a fresh model.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Compare the resampled path with raw audio through the 16 kHz branch.
    #[arg(long)]
    mismatch: bool,
    /// Probe only this rate (default: every rate in the corpus).
    #[arg(long)]
    rate: Option<u32>,
    /// Output directory (default: the checkpoint's directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunManifest {
    command: String,
    config_path: Option<PathBuf>,
    seed: u64,
    out_dir: PathBuf,
    /// Hash of the resolved configuration and seed.
    run_id: String,
    config: serde_json::Value,
    created_unix_s: u64,
}

impl RunManifest {
    fn new(command: &str, config_path: Option<&Path>, seed: u64, out_dir: &Path, config: serde_json::Value) -> Self {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(serde_json::to_vec(&config).expect("json value serializes"));
        h.update(seed.to_le_bytes());
        let digest = h.finalize();
        RunManifest {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            seed,
            out_dir: out_dir.to_path_buf(),
            run_id: digest.iter().take(8).map(|b| format!("{b:02x}")).collect(),
            config,
            created_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    fn write(&self) -> CliResult<()> {
        fs::create_dir_all(&self.out_dir)?;
        fs::write(self.out_dir.join(format!("run-{}.json", self.command)), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn cmd_plan(a: &PlanArgs) -> CliResult<()> {
    if !(a.frame_shift > 0.0) {
        return Err(CliError::Input("frame shift must be positive".into()));
    }
    let plan = derive_plan(a.rate, a.frame_shift)?.with_channels(DEFAULT_CHANNELS);
    let problems = validate_plan(&plan);
    let rf = plan.receptive_field();
    if a.json {
        let v = serde_json::json!({
            "plan": plan,
            "strides": plan.strides(),
            "kernels": plan.kernels(),
            "dr": plan.dr,
            "receptive_field_samples": rf.samples,
            "receptive_field_ms": rf.ms,
            "canonical": canonical_plan(a.rate).is_ok(),
            "valid": problems.is_empty(),
            "problems": problems,
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        let list = |v: Vec<usize>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        println!("rate {} Hz", a.rate);
        println!("strides {}", list(plan.strides()));
        println!("kernels {}", list(plan.kernels()));
        println!("dr {}", plan.dr);
        println!("rf {} samples, {:.1} ms", rf.samples, rf.ms);
        if problems.is_empty() {
            println!("VALID");
        } else {
            println!("INVALID");
            for p in &problems {
                println!("  {p}");
            }
        }
    }
    if let Some(out) = &a.out {
        RunManifest::new("plan", None, 0, out, serde_json::json!({ "rate": a.rate, "frame_shift": a.frame_shift })).write()?;
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Input(format!("plan for {} Hz is invalid", a.rate)))
    }
}

fn cmd_gen_corpus(a: &GenArgs) -> CliResult<()> {
    let text = fs::read_to_string(&a.spec).map_err(|e| CliError::Input(format!("{}: {e}", a.spec.display())))?;
    let mut spec = CorpusSpec::parse(&text)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let utts = generate_parallel(&spec, &a.rates)?;
    let entries = write_corpus(&a.out, &utts)?;
    fs::write(a.out.join("spec.txt"), spec.to_text())?;
    RunManifest::new("gen-corpus", Some(&a.spec), spec.seed, &a.out, serde_json::json!({ "spec": spec, "rates": a.rates })).write()?;
    println!("wrote {} files for {} utterances to {}", entries.len(), utts.len(), a.out.display());
    Ok(())
}

fn cmd_labels(a: &LabelArgs) -> CliResult<()> {
    let utts = load_corpus(&a.corpus, None)?;
    let (cb, fit, labels) = pooled_labels(&utts, a.k, a.iters, a.seed)?;
    cb.save(a.corpus.join(CODEBOOK_FILE))?;
    write_labels(a.corpus.join(LABELS_FILE), &labels)?;
    RunManifest::new("labels", None, a.seed, &a.corpus, serde_json::json!({ "k": a.k, "iters": a.iters })).write()?;
    println!("k={} iterations={} inertia={:.4} entries={}", a.k, fit.inertia_history.len(), fit.inertia(), labels.len());
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct PretrainConfig {
    /// Shorthand that sets both the model's branches and uniform training weights.
    rates: Option<Vec<u32>>,
    model: Option<ModelConfig>,
    train: TrainConfig,
    /// Save a checkpoint every this many steps (0: only at the end).
    checkpoint_every: u64,
}

fn cmd_pretrain(a: &PretrainArgs) -> CliResult<()> {
    let mut cfg: PretrainConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?)?,
        None => PretrainConfig::default(),
    };
    if let Some(s) = a.steps {
        cfg.train.total_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let mut model_cfg = match (&cfg.rates, cfg.model.take()) {
        (_, Some(m)) => m,
        (Some(r), None) => ModelConfig::desk(r)?,
        (None, None) => ModelConfig::default(),
    };
    if let Some(r) = &cfg.rates {
        cfg.train.rates = TrainConfig::uniform(r);
        if model_cfg.rates() != *r {
            model_cfg = ModelConfig { plans: ModelConfig::desk(r)?.plans, ..model_cfg };
        }
    }
    cfg.model = Some(model_cfg.clone());
    let rates: Vec<u32> = cfg.train.rates.iter().map(|w| w.rate_hz).collect();
    let labels = read_labels(a.corpus.join(LABELS_FILE)).map_err(|e| CliError::Input(format!("{e} (run `msrh labels` first)")))?;
    let utts = load_corpus(&a.corpus, Some(&rates))?;
    let data = TrainSet::from_corpus(&utts, &labels, &rates)?;

    let mut tr = match &a.resume {
        Some(p) => {
            let mut tr = load_checkpoint::<f32>(p)?;
            tr.cfg = cfg.train.clone();
            tr
        }
        None => Trainer::new(MsrModel::new(&model_cfg, cfg.train.seed)?, cfg.train.clone())?,
    };
    let manifest = RunManifest::new("pretrain", a.config.as_deref(), cfg.train.seed, &a.out, serde_json::to_value(&cfg)?);
    manifest.write()?;
    let ckpt_dir = a.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let metrics = a.out.join(METRICS_FILE);
    if a.resume.is_none() && metrics.exists() {
        fs::remove_file(&metrics)?;
    }
    let every = cfg.checkpoint_every;
    tr.run(&data, |tr, s| {
        append_metrics(&metrics, std::slice::from_ref(s))?;
        if s.step % 10 == 0 || s.step + 1 == tr.cfg.total_steps {
            println!("step {:>5} loss {:.4} acc {:.3} grad_norm {:.3} lr {:.2e} rates {}", s.step, s.loss, s.accuracy, s.grad_norm, s.lr, s.rate_mix_string());
        }
        if every > 0 && tr.step % every == 0 {
            save_checkpoint(ckpt_dir.join(format!("step-{:06}.ckpt", tr.step)), tr)?;
        }
        Ok(())
    })?;
    save_checkpoint(a.out.join(FINAL_CHECKPOINT), &tr)?;
    println!("run {} finished at step {}", manifest.run_id, tr.step);
    Ok(())
}

fn cmd_probe(a: &ProbeArgs) -> CliResult<()> {
    let tr = load_checkpoint::<f32>(&a.checkpoint)?;
    let model = tr.model;
    let utts = load_corpus(&a.corpus, None)?;
    let corpus_rates: Vec<u32> = utts.first().map(|u| u.waves.keys().copied().collect()).unwrap_or_default();
    let rates = match a.rate {
        Some(r) if !corpus_rates.contains(&r) => return Err(CliError::Input(format!("corpus has no {r} Hz audio"))),
        Some(r) => vec![r],
        None => corpus_rates,
    };
    let num_classes = utts.iter().flat_map(|u| u.track.classes.iter().copied()).max().map_or(0, |c| c + 1);
    let cfg = ProbeConfig { epochs: a.epochs, seed: a.seed, ..ProbeConfig::default() };
    let model_name = a.checkpoint.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    for &r in &rates {
        let modes = if a.mismatch && r != REFERENCE_RATE {
            vec![ProbeMode::Resampled, ProbeMode::Mismatch]
        } else if model.rates().contains(&r) {
            vec![ProbeMode::Matched]
        } else {
            vec![ProbeMode::Resampled]
        };
        for mode in modes {
            let res = probe_train(&probe_features(&model, &utts, r, mode)?, num_classes, &cfg)?;
            println!("{r:>6} Hz {:<9} accuracy {:.4}", mode.as_str(), res.accuracy);
            weights.push(serde_json::json!({ "rate": r, "mode": mode, "layer_weights": layer_weight_report(&res) }));
            rows.push(ProbeRow { model: model_name.clone(), rate: r, mode, accuracy: res.accuracy });
        }
    }
    let out = a.out.clone().unwrap_or_else(|| a.checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
    fs::create_dir_all(&out)?;
    msrh::probe::write_probe_results(out.join(PROBE_FILE), &rows)?;
    fs::write(out.join(LAYER_WEIGHTS_FILE), serde_json::to_string_pretty(&weights)?)?;
    let config = serde_json::json!({ "checkpoint": a.checkpoint, "corpus": a.corpus, "mismatch": a.mismatch, "rates": rates, "probe": cfg });
    RunManifest::new("probe", None, a.seed, &out, config).write()?;
    Ok(())
}

fn read_csv(path: &Path) -> CliResult<Vec<BTreeMap<String, String>>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    Ok(lines.filter(|l| !l.is_empty()).map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(str::to_string)).collect()).collect())
}

fn cmd_report(a: &ReportArgs) -> CliResult<()> {
    if !a.run.is_dir() {
        return Err(CliError::Input(format!("{} is not a directory", a.run.display())));
    }
    let alignment: Vec<serde_json::Value> = CANONICAL_RATES
        .iter()
        .map(|&r| {
            let p = canonical_plan(r).expect("canonical");
            serde_json::json!({
                "rate": r,
                "strides": p.strides(),
                "kernels": p.kernels(),
                "dr": p.dr,
                "receptive_field_ms": p.receptive_field().ms,
                "frames_per_second": p.frame_count(r as usize).expect("one second is long enough"),
            })
        })
        .collect();
    let mut manifests = BTreeMap::new();
    for e in fs::read_dir(&a.run)? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if name.starts_with("run-") && name.ends_with(".json") {
            let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.run.join(&name))?)?;
            manifests.insert(name, m);
        }
    }
    let probe = if a.run.join(PROBE_FILE).exists() { Some(read_csv(&a.run.join(PROBE_FILE))?) } else { None };
    let training = if a.run.join(METRICS_FILE).exists() {
        let rows = read_csv(&a.run.join(METRICS_FILE))?;
        let loss = |r: &BTreeMap<String, String>| r.get("loss").and_then(|v| v.parse::<f64>().ok());
        Some(serde_json::json!({ "steps": rows.len(), "first_loss": rows.first().and_then(loss), "last_loss": rows.last().and_then(loss) }))
    } else {
        None
    };
    let report = serde_json::json!({
        "alignment": alignment,
        "overhead": { "base_like": overhead_report(&OverheadConfig::base_like())?, "desk": overhead_report(&OverheadConfig::desk())? },
        "training": training,
        "probe": probe,
        "manifests": manifests,
    });
    let text = serde_json::to_string_pretty(&report)?;
    fs::write(a.run.join(REPORT_FILE), &text)?;
    println!("{text}");
    Ok(())
}

fn init_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("MSRH_THREADS") {
        let n: usize = v.parse().map_err(|_| CliError::Input(format!("MSRH_THREADS={v} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = init_threads().and_then(|_| match &cli.cmd {
        Cmd::Plan(a) => cmd_plan(a),
        Cmd::GenCorpus(a) => cmd_gen_corpus(a),
        Cmd::Labels(a) => cmd_labels(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Probe(a) => cmd_probe(a),
        Cmd::Report(a) => cmd_report(a),
    });
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
