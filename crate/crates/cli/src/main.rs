use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use kgfp::baselines::{Baseline, BaselineConfig, BaselineKind};
use kgfp::cache::{read_cache, write_cache, FeatureCache, FeatureRecord, PyramidSpec, SafetyLabel};
use kgfp::error::{Error, ErrorClass, Result};
use kgfp::fusion::{ArchConfig, FusionModel, HeadKind};
use kgfp::labeling::{match_and_label, parse_interchange, LabelConfig};
use kgfp::metrics::DEFAULT_TARGET_FPR;
use kgfp::pipeline::{summary_table, GateFile, Scorer};
use kgfp::synth::{generate, SynthParams, DEFAULT_WORLD_SEED};
use kgfp::trainer::{train_with, OptimizerKind, TrainConfig};

#[derive(Parser)]
#[command(name = "kgfp", version, about = "Predict person-detector failures and gate images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a cache of planted synthetic records.
    GenSynth(GenSynthArgs),
    /// Derive labels and counts from ground-truth and predicted boxes.
    Label(LabelArgs),
    /// Train the fusion model on a cache.
    Train(TrainArgs),
    /// Fit one of the comparison scorers on a cache.
    FitBaseline(FitBaselineArgs),
    /// Pick the gate threshold on a validation cache.
    Calibrate(CalibrateArgs),
    /// Score caches and write reports.
    Eval(EvalArgs),
    /// Print accept/reject for every record of a cache.
    Gate(GateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Desk,
    Full,
}

#[derive(Args)]
struct Output {
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0.3)]
    unsafe_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    hardness: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Caches meant to be used together must share this.
    #[arg(long, default_value_t = DEFAULT_WORLD_SEED)]
    world_seed: u64,
    #[arg(long, default_value_t = 32)]
    d_wk: usize,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    scale: Scale,
    #[arg(long, default_value = "id")]
    domain: String,
    /// Covariate shift strength, 0 for in-distribution data.
    #[arg(long, default_value_t = 0.0)]
    shift: f64,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct LabelArgs {
    /// Box interchange file.
    #[arg(long)]
    boxes: PathBuf,
    /// Relabel this cache instead of writing a table.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iou_threshold: Option<f64>,
    #[arg(long)]
    confidence_threshold: Option<f64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch JSON lines; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    arch: Scale,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_parser = ["lars", "adam"])]
    optimizer: Option<String>,
    #[arg(long, value_parser = ["cosine", "mlp"])]
    head: Option<String>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Disable every attention stage.
    #[arg(long)]
    no_attention: bool,
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct FitBaselineArgs {
    #[arg(long)]
    kind: String,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct ScorerArgs {
    /// Fusion model checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Fitted baseline file; may be repeated for eval.
    #[arg(long)]
    baseline: Vec<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TARGET_FPR)]
    target_fpr: f64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    scorer: ScorerArgs,
    /// Validation cache used to calibrate each scorer's threshold.
    #[arg(long, conflicts_with = "gate")]
    calib: Option<PathBuf>,
    /// Precomputed gate file (single scorer only).
    #[arg(long)]
    gate: Option<PathBuf>,
    /// Evaluation caches; records are grouped by their domain tag.
    #[arg(long, required = true)]
    cache: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TARGET_FPR)]
    target_fpr: f64,
    /// JSON report; plot data and the summary table go next to it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct GateArgs {
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long)]
    gate: PathBuf,
    #[arg(long)]
    cache: PathBuf,
}

/// Optional config file; each section overrides the matching preset field by field.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    arch: Option<Value>,
    train: Option<Value>,
    label: Option<Value>,
    baseline: Option<Value>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))
        }
    }
}

fn merge(base: &mut Value, over: &Value, at: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let slot = b.get_mut(k).ok_or_else(|| usage(format!("unknown config key {at}.{k}")))?;
                if slot.is_object() {
                    merge(slot, v, &format!("{at}.{k}"))?;
                } else {
                    *slot = v.clone();
                }
            }
            Ok(())
        }
        _ => Err(usage(format!("config section {at} must be an object"))),
    }
}

fn overlay<T: Serialize + DeserializeOwned>(preset: T, over: Option<&Value>, section: &str) -> Result<T> {
    let Some(over) = over else { return Ok(preset) };
    let mut base = serde_json::to_value(&preset).map_err(|e| Error::Format(e.to_string()))?;
    merge(&mut base, over, section)?;
    serde_json::from_value(base).map_err(|e| usage(format!("config section {section}: {e}")))
}

fn check_fresh(out: &Path, force: bool, inputs: &[&Path]) -> Result<()> {
    if inputs.contains(&out) {
        return Err(usage(format!("output {} would overwrite an input", out.display())));
    }
    if out.exists() && !force {
        return Err(usage(format!("{} exists; pass --force to overwrite", out.display())));
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    check_fresh(&a.out, a.output.force, &[])?;
    let spec = match a.scale {
        Scale::Desk => PyramidSpec::desk(),
        Scale::Full => PyramidSpec::full(),
    };
    let mut params = SynthParams::new(a.n, a.unsafe_fraction, a.hardness, a.seed).shifted(a.domain, a.shift);
    params.world_seed = a.world_seed;
    let records = generate(&spec, a.d_wk, &params)?;
    write_cache(&a.out, &spec, a.d_wk, &records)?;
    let n_unsafe = records.iter().filter(|r| r.label.is_unsafe()).count();
    println!("wrote {} records ({n_unsafe} unsafe) to {}", records.len(), a.out.display());
    Ok(())
}

fn label(a: LabelArgs) -> Result<()> {
    let inputs: Vec<&Path> = std::iter::once(a.boxes.as_path()).chain(a.cache.as_deref()).collect();
    check_fresh(&a.out, a.output.force, &inputs)?;
    let file = read_config(a.config.as_deref())?;
    let mut cfg = overlay(LabelConfig::default(), file.label.as_ref(), "label")?;
    if let Some(v) = a.iou_threshold {
        cfg.iou_threshold = v;
    }
    if let Some(v) = a.confidence_threshold {
        cfg.confidence_threshold = v;
    }
    cfg.validate()?;
    let images = parse_interchange(&fs::read_to_string(&a.boxes)?)?;
    let outcomes: Vec<_> = images.iter().map(|img| (img.id.as_str(), match_and_label(&img.gt, &img.preds, &cfg))).collect();
    match &a.cache {
        None => {
            let mut s = String::from("id\tlabel\tgt_count\tmatched_count\tpred_count\n");
            for (id, o) in &outcomes {
                s.push_str(&format!("{id}\t{}\t{}\t{}\t{}\n", o.label as u8, o.gt_count, o.matched_count, o.pred_count));
            }
            fs::write(&a.out, s)?;
        }
        Some(path) => {
            let mut cache = read_cache(path)?;
            let by_id: std::collections::HashMap<&str, _> = outcomes.iter().cloned().collect();
            for r in cache.records.iter_mut() {
                let o = by_id.get(r.id.as_str()).ok_or_else(|| Error::Format(format!("no boxes for record {:?}", r.id)))?;
                r.label = o.label;
                r.gt_count = o.gt_count;
                r.matched_count = o.matched_count;
                r.pred_count = o.pred_count;
            }
            write_cache(&a.out, &cache.spec, cache.d_wk, &cache.records)?;
        }
    }
    let n_unsafe = outcomes.iter().filter(|(_, o)| o.label == SafetyLabel::Unsafe).count();
    println!("labeled {} images ({n_unsafe} unsafe)", outcomes.len());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log.jsonl"));
    check_fresh(&a.out, a.output.force, &[&a.cache])?;
    check_fresh(&log_path, a.output.force, &[&a.cache, &a.out])?;
    let file = read_config(a.config.as_deref())?;
    let (arch, train) = match a.arch {
        Scale::Desk => (ArchConfig::desk(), TrainConfig::desk()),
        Scale::Full => (ArchConfig::full(), TrainConfig::full()),
    };
    let mut arch = overlay(arch, file.arch.as_ref(), "arch")?;
    let mut cfg = overlay(train, file.train.as_ref(), "train")?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
        cfg.t_max = e as f64;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    match a.optimizer.as_deref() {
        Some("adam") => cfg.optimizer = OptimizerKind::Adam,
        Some("lars") => cfg.optimizer = OptimizerKind::Lars,
        _ => {}
    }
    match a.head.as_deref() {
        Some("mlp") => arch.head_kind = HeadKind::Mlp,
        Some("cosine") => arch.head_kind = HeadKind::Cosine,
        _ => {}
    }
    if let Some(d) = a.embed_dim {
        arch.embed_dim = d;
    }
    if a.no_attention {
        arch = arch.without_attention();
    }
    cfg.validate()?;
    let cache = read_cache(&a.cache)?;
    arch.validate(&cache.spec)?;
    let mut log = String::new();
    let quiet = a.quiet;
    let (model, _) = train_with::<f32>(&cache, &cfg, &arch, |e| {
        log.push_str(&serde_json::to_string(e).expect("epoch log serializes"));
        log.push('\n');
        if !quiet {
            eprintln!(
                "epoch {:>3} lr {:.3e} loss {:.4} val_loss {:.4} mean_cos {:.3}{}",
                e.epoch,
                e.lr,
                e.loss,
                e.val_loss,
                e.mean_cos,
                if e.collapse_warning { " collapse-warning" } else { "" }
            );
        }
    })?;
    model.save(&a.out)?;
    fs::write(&log_path, log)?;
    println!("saved model ({} parameters) to {}", model.parameter_count(), a.out.display());
    Ok(())
}

fn fit_baseline(a: FitBaselineArgs) -> Result<()> {
    check_fresh(&a.out, a.output.force, &[&a.cache])?;
    let kind: BaselineKind = a.kind.parse()?;
    let file = read_config(a.config.as_deref())?;
    let mut cfg = overlay(BaselineConfig::default(), file.baseline.as_ref(), "baseline")?;
    if let Some(s) = a.seed {
        cfg.mlp.seed = s;
    }
    let cache = read_cache(&a.cache)?;
    let b = Baseline::fit(kind, &cache.records, &cfg)?;
    b.save(&a.out)?;
    println!("saved {kind} baseline to {}", a.out.display());
    Ok(())
}

fn load_scorers(s: &ScorerArgs) -> Result<Vec<Scorer>> {
    let mut out = Vec::new();
    if let Some(m) = &s.model {
        out.push(Scorer::Fusion(Box::new(FusionModel::<f32>::load(m)?)));
    }
    for b in &s.baseline {
        out.push(Scorer::Baseline(Baseline::load(b)?));
    }
    if out.is_empty() {
        return Err(usage("need --model or --baseline"));
    }
    Ok(out)
}

fn single_scorer(s: &ScorerArgs) -> Result<Scorer> {
    let mut v = load_scorers(s)?;
    if v.len() != 1 {
        return Err(usage("exactly one of --model or --baseline is required here"));
    }
    Ok(v.remove(0))
}

fn read_gate(path: &Path, scorer: &Scorer) -> Result<GateFile> {
    let g: GateFile = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Format(format!("gate file {}: {e}", path.display())))?;
    if g.scorer != scorer.name() {
        return Err(usage(format!("gate file is for {}, scorer is {}", g.scorer, scorer.name())));
    }
    Ok(g)
}

fn calibrate_cmd(a: CalibrateArgs) -> Result<()> {
    check_fresh(&a.out, a.output.force, &[&a.cache])?;
    let scorer = single_scorer(&a.scorer)?;
    let cache = read_cache(&a.cache)?;
    let gate = scorer.calibrate(&cache.records, a.target_fpr)?;
    let file = GateFile { scorer: scorer.name().to_string(), gate };
    fs::write(&a.out, serde_json::to_string_pretty(&file).map_err(|e| Error::Format(e.to_string()))? + "\n")?;
    println!(
        "tau {} achieved fpr {} on {} safe records",
        file.gate.threshold, file.gate.achieved_fpr, file.gate.calibration_safe
    );
    Ok(())
}

fn load_records(paths: &[PathBuf]) -> Result<Vec<FeatureRecord>> {
    let mut out = Vec::new();
    let mut first: Option<FeatureCache> = None;
    for p in paths {
        let c = read_cache(p)?;
        if let Some(f) = &first {
            if f.spec != c.spec || f.d_wk != c.d_wk {
                return Err(Error::Format(format!("{} has a different layout than {}", p.display(), paths[0].display())));
            }
        }
        out.extend(c.records.iter().cloned());
        first.get_or_insert(c);
    }
    Ok(out)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let summary_path = with_suffix(&a.out, ".summary.csv");
    let plot_path = with_suffix(&a.out, ".plot.csv");
    let mut inputs: Vec<&Path> = a.cache.iter().map(PathBuf::as_path).collect();
    inputs.extend(a.calib.as_deref());
    for out in [&a.out, &summary_path, &plot_path] {
        check_fresh(out, a.output.force, &inputs)?;
    }
    let scorers = load_scorers(&a.scorer)?;
    if a.gate.is_some() && scorers.len() != 1 {
        return Err(usage("--gate works with a single scorer"));
    }
    if a.gate.is_none() && a.calib.is_none() {
        return Err(usage("need --calib or --gate"));
    }
    let calib = a.calib.as_ref().map(read_cache).transpose()?;
    let records = load_records(&a.cache)?;
    let mut reports = Vec::new();
    for s in &scorers {
        let gate = match (&a.gate, &calib) {
            (Some(g), _) => read_gate(g, s)?.gate,
            (None, Some(c)) => s.calibrate(&c.records, a.target_fpr)?,
            (None, None) => unreachable!(),
        };
        reports.push(s.evaluate(&gate, &records)?);
    }
    let json = serde_json::to_string_pretty(&reports).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&a.out, json + "\n")?;
    let summary = summary_table(&reports);
    fs::write(&summary_path, &summary)?;
    let mut plot = String::new();
    for (i, r) in reports.iter().enumerate() {
        let t = r.plot_table();
        plot.push_str(if i == 0 { &t } else { t.split_once('\n').map_or("", |x| x.1) });
    }
    fs::write(&plot_path, plot)?;
    print!("{summary}");
    Ok(())
}

fn gate_cmd(a: GateArgs) -> Result<()> {
    let scorer = single_scorer(&a.scorer)?;
    let g = read_gate(&a.gate, &scorer)?;
    let cache = read_cache(&a.cache)?;
    let stdout = io::stdout();
    let mut out = io::BufWriter::new(stdout.lock());
    for chunk in cache.records.chunks(256) {
        for r in scorer.score(chunk)? {
            let d = match g.gate.decide(r.score) {
                kgfp::metrics::Decision::Accept => "accept",
                kgfp::metrics::Decision::Reject => "reject",
            };
            writeln!(out, "{}\t{d}\t{}", r.id, r.score)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Label(a) => label(a),
        Command::Train(a) => train_cmd(a),
        Command::FitBaseline(a) => fit_baseline(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gate(a) => gate_cmd(a),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error kind=usage msg={}", one_line(&e.to_string()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match e.class() {
                ErrorClass::Usage => ("usage", 2),
                ErrorClass::Data => ("data", 3),
                ErrorClass::Numeric => ("numeric", 4),
            };
            eprintln!("error kind={kind} msg={}", one_line(&e.to_string()));
            ExitCode::from(code)
        }
    }
}
