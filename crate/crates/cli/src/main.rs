use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use ttl_core::bank::BankDump;
use ttl_core::config::LossKind;
use ttl_core::dataio::{self, Manifest};
use ttl_core::gradcheck::{self, GradcheckSpec};
use ttl_core::metrics::{density_report, evaluate, EvalResult};
use ttl_core::runner::{resolve_config, run_manifest, StreamReport};
use ttl_core::synth::{generate, scaled_notes, write_dataset, SynthSpec};
use ttl_core::TtlError;

#[derive(Parser)]
#[command(name = "ttl", version, about = "Streaming test-time OOD detection over embedding files")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the detector over a manifest's stream and write a report.
    Run(RunArgs),
    /// Generate a synthetic dataset (embeddings, labels, manifest).
    Synth(SynthArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Run one manifest under several values of a single setting.
    Ablate(AblateArgs),
    /// AUROC / FPR95 for a scores file against a labels file.
    Eval(EvalArgs),
    /// Export the bank stored in a run report as an embedding file.
    DumpBank(DumpBankArgs),
}

#[derive(Args, Clone, Default)]
struct ConfigFlags {
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long = "bank-k")]
    bank_k: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    grid: Option<String>,
    #[arg(long = "early-stop")]
    early_stop: Option<String>,
    #[arg(long = "bank-strategy", value_parser = ["priority", "fifo", "rand", "sa"])]
    bank_strategy: Option<String>,
    #[arg(long, value_parser = ["omb", "ce"])]
    loss: Option<String>,
    #[arg(long, value_parser = ["fusion", "maxsim", "expsum", "idr"])]
    calibration: Option<String>,
    #[arg(long, value_parser = ["mcm", "maxlogit"])]
    base: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

impl ConfigFlags {
    fn overrides(&self) -> Vec<(String, String)> {
        let pairs = [
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("tau", &self.tau),
            ("bank_capacity", &self.bank_k),
            ("batch_size", &self.batch),
            ("learning_rate", &self.lr),
            ("threshold_grid", &self.grid),
            ("early_stop_after", &self.early_stop),
            ("bank_strategy", &self.bank_strategy),
            ("loss", &self.loss),
            ("calibration", &self.calibration),
            ("base", &self.base),
            ("seed", &self.seed),
        ];
        pairs
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    config: ConfigFlags,
    /// Report path; the report goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Leave the per-sample outcome array out of the report.
    #[arg(long)]
    no_outcomes: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Start from a named stream instead of the plain defaults.
    #[arg(long, value_parser = ["reference", "imbalanced"])]
    preset: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long = "ood-clusters")]
    ood_clusters: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    concentration: Option<f64>,
    #[arg(long = "id-fraction")]
    id_fraction: Option<f64>,
    #[arg(long = "ood-max-cosine")]
    ood_max_cosine: Option<f64>,
    #[arg(long = "ood-anchor-cosine")]
    ood_anchor_cosine: Option<f64>,
    #[arg(long = "ood-domain-spread")]
    ood_domain_spread: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Free-form manifest notes (`key=value` pairs feed run config).
    #[arg(long, default_value = "")]
    notes: String,
    /// Append beta / bank capacity rescaled to the number of ID classes.
    #[arg(long)]
    scale_defaults: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value = "omb", value_parser = ["omb", "ce"])]
    loss: String,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Setting to vary, e.g. bank-strategy, loss, calibration, alpha, beta.
    #[arg(long)]
    axis: String,
    /// Comma-separated values for the axis.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[command(flatten)]
    config: ConfigFlags,
    /// Summary path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Also write an ID/OOD score histogram as CSV.
    #[arg(long)]
    density_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    bins: usize,
}

#[derive(Args)]
struct DumpBankArgs {
    #[arg(long)]
    report: PathBuf,
    /// Feature file; a JSON sidecar with priorities goes next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

/// Exit 1: a check failed or the run hit a data/IO problem.
/// Exit 2: the invocation or configuration is unusable.
struct Failure {
    code: u8,
    kind: String,
    message: String,
}

impl From<TtlError> for Failure {
    fn from(e: TtlError) -> Self {
        let code = match e {
            TtlError::Config(_) | TtlError::Argument(_) => 2,
            _ => 1,
        };
        Failure { code, kind: e.kind().to_string(), message: e.to_string() }
    }
}

type CliResult = std::result::Result<(), Failure>;

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| Failure {
        code: 1,
        kind: "io".into(),
        message: format!("{}: {e}", path.display()),
    })
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(TtlError::from)? + "\n";
    match out {
        Some(path) => write_text(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn summary(report: &StreamReport) -> serde_json::Value {
    json!({
        "dataset": report.dataset_name,
        "samples": report.samples_processed,
        "flushes": report.flush_count,
        "flags": report.flags,
        "metrics": report.metrics,
        "timing": report.timing,
        "incidents": report.incidents.len(),
    })
}

fn cmd_run(args: RunArgs) -> CliResult {
    let manifest = Manifest::load(&args.manifest)?;
    let config = resolve_config(&manifest, &args.config.overrides())?;
    log::info!("running {} with {:?}", manifest.dataset_name, config);
    let mut report = run_manifest(&manifest, &config)?;
    if args.no_outcomes {
        report.outcomes.clear();
    }
    match &args.out {
        Some(path) => {
            report.write(path)?;
            emit(&summary(&report), None)
        }
        None => emit(&report, None),
    }
}

fn cmd_synth(args: SynthArgs) -> CliResult {
    let mut spec = match args.preset.as_deref() {
        Some("reference") => SynthSpec::reference(),
        Some("imbalanced") => SynthSpec::imbalanced(),
        _ => SynthSpec::default(),
    };
    macro_rules! take {
        ($($field:ident <- $flag:ident),*) => {
            $(if let Some(v) = args.$flag { spec.$field = v; })*
        };
    }
    take!(dim <- dim, num_id_classes <- classes, num_ood_clusters <- ood_clusters,
        stream_length <- length, concentration <- concentration, id_fraction <- id_fraction,
        ood_max_cosine <- ood_max_cosine, seed <- seed);
    if args.ood_anchor_cosine.is_some() {
        spec.ood_anchor_cosine = args.ood_anchor_cosine;
    }
    if args.ood_domain_spread.is_some() {
        spec.ood_domain_spread = args.ood_domain_spread;
    }
    let mut notes = args.notes.clone();
    if args.scale_defaults {
        if !notes.is_empty() {
            notes.push(' ');
        }
        notes += &scaled_notes(spec.num_id_classes);
    }
    let ds = generate(&spec)?;
    let manifest = write_dataset(&ds, &spec, &args.out, &notes)?;
    emit(&json!({ "manifest": manifest, "spec": spec, "notes": notes }), None)
}

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult {
    let spec = GradcheckSpec {
        dim: args.dim,
        classes: args.classes,
        batch: args.batch,
        alpha: args.alpha,
        tau: args.tau,
        kind: args.loss.parse::<LossKind>()?,
        seed: args.seed,
        step: args.step,
        tolerance: args.tolerance,
    };
    if spec.dim > 64 {
        return Err(TtlError::Argument("gradcheck expects dim <= 64".into()).into());
    }
    let report = gradcheck::run(&spec)?;
    emit(&report, None)?;
    if report.passed {
        Ok(())
    } else {
        let w = &report.worst;
        Err(Failure {
            code: 1,
            kind: "check".into(),
            message: format!(
                "max relative error {:.3e} >= {:.1e} at feature {} coord {} (analytic {:.6e}, numeric {:.6e})",
                report.max_rel_err, spec.tolerance, w.feature, w.coord, w.analytic, w.numeric
            ),
        })
    }
}

#[derive(Serialize)]
struct AblationRow {
    value: String,
    metrics: Option<ttl_core::runner::MetricsBlock>,
    flushes: usize,
    bank_len: usize,
    total_ms: f64,
}

fn worker_pool() -> Result<rayon::ThreadPool, Failure> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("TTL_THREADS") {
        let n: usize = v.parse().map_err(|_| Failure {
            code: 2,
            kind: "config".into(),
            message: format!("TTL_THREADS must be a positive integer, got {v:?}"),
        })?;
        builder = builder.num_threads(n.max(1));
    }
    builder.build().map_err(|e| Failure { code: 1, kind: "threads".into(), message: e.to_string() })
}

fn cmd_ablate(args: AblateArgs) -> CliResult {
    let manifest = Manifest::load(&args.manifest)?;
    let base = args.config.overrides();
    let configs = args
        .values
        .iter()
        .map(|v| {
            let mut o = base.clone();
            o.push((args.axis.clone(), v.clone()));
            resolve_config(&manifest, &o)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let pool = worker_pool()?;
    let rows: Vec<Result<AblationRow, TtlError>> = pool.install(|| {
        args.values
            .par_iter()
            .zip(configs.par_iter())
            .map(|(value, cfg)| {
                let r = run_manifest(&manifest, cfg)?;
                Ok(AblationRow {
                    value: value.clone(),
                    metrics: r.metrics,
                    flushes: r.flush_count,
                    bank_len: r.bank.entries.len(),
                    total_ms: r.timing.total_ms,
                })
            })
            .collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    emit(&json!({ "axis": args.axis, "rows": rows }), args.out.as_deref())
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let scores = dataio::read_scores(&args.scores)?;
    let labels = dataio::read_labels(&args.labels)?;
    if scores.len() != labels.len() {
        return Err(TtlError::Evaluation(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        ))
        .into());
    }
    let result: EvalResult = evaluate(&scores, &labels)?;
    if let Some(path) = &args.density_csv {
        write_text(path, &density_report(&scores, &labels, args.bins)?.to_csv())?;
    }
    emit(&result, None)
}

fn cmd_dump_bank(args: DumpBankArgs) -> CliResult {
    let report = StreamReport::read(&args.report)?;
    let sidecar = args
        .sidecar
        .clone()
        .unwrap_or_else(|| args.out.with_extension("json"));
    let dump: &BankDump = &report.bank;
    dump.write(&args.out, &sidecar)?;
    emit(
        &json!({ "features": args.out, "sidecar": sidecar, "entries": dump.entries.len() }),
        None,
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::DumpBank(a) => cmd_dump_bank(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({ "error": f.kind, "message": f.message }));
            ExitCode::from(f.code)
        }
    }
}
