use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use idbench::degrade::{degrade_corpus, read_landmarks, CorpusJob, SunglassesSpec};
use idbench::embedstore::write_embedding_set;
use idbench::experiment::{diff_runs, load_output, run_experiment, ExperimentConfig, ExperimentError};
use idbench::manifest::{load_manifest, manifest_stats, save_manifest, ConditionBase};
use idbench::metrics::MetricReport;
use idbench::search::load_results;
use idbench::simulate::{generate_cohort, CohortSpec};

// Like println!, but a closed pipe (`idbench diff a b | head`) is not a panic.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

const EXIT_DIFF: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_CELL: u8 = 3;

#[derive(Parser)]
#[command(name = "idbench", version, about = "One-to-many identification benchmark over face embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment grid described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic cohort (manifest.csv + embeddings.oidemb).
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a results CSV against a baseline results CSV.
    Metrics {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
    },
    /// Write degraded variants of every original image in a manifest.
    Degrade {
        /// blur, lowres, sunglasses, sunglasses+blur or sunglasses+lowres
        #[arg(long, value_parser = parse_op)]
        op: ConditionBase,
        #[arg(long)]
        sigma: Option<f32>,
        #[arg(long)]
        side: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Landmark sidecar CSV; required for sunglasses ops.
        #[arg(long)]
        landmarks: Option<PathBuf>,
        /// Where to write the extended manifest [default: <out>/manifest.csv].
        #[arg(long)]
        manifest_out: Option<PathBuf>,
    },
    /// Cell-wise metric deltas between two run output directories.
    Diff {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        tolerance: f64,
    },
    /// Subject and image counts of a manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn parse_op(s: &str) -> Result<ConditionBase, String> {
    let c: ConditionBase = s.replace('+', "_").parse()?;
    if c == ConditionBase::Original {
        return Err("`original` is not a degradation".into());
    }
    Ok(c)
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(e: impl ToString) -> Self {
        Self { code: EXIT_VALIDATION, message: e.to_string() }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        let code = match e {
            ExperimentError::Cell { .. } => EXIT_CELL,
            ExperimentError::GridMismatch(_) => EXIT_VALIDATION,
            ref e if e.is_validation() => EXIT_VALIDATION,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn dispatch(cmd: Command) -> Result<u8, Failure> {
    match cmd {
        Command::Run { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let output = run_experiment(&cfg)?;
            out!("{} cells written to {}", output.cells.len(), cfg.output_dir.display());
            Ok(0)
        }
        Command::Simulate { spec, out } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Failure::validation(format!("{}: {e}", spec.display())))?;
            let spec: CohortSpec = serde_json::from_str(&text).map_err(Failure::validation)?;
            let (m, e) = generate_cohort(&spec).map_err(Failure::validation)?;
            std::fs::create_dir_all(&out).map_err(|e| Failure { code: 1, message: e.to_string() })?;
            save_manifest(&m, out.join("manifest.csv")).map_err(|e| Failure { code: 1, message: e.to_string() })?;
            write_embedding_set(&e, out.join("embeddings.oidemb"))
                .map_err(|e| Failure { code: 1, message: e.to_string() })?;
            out!("{} images, {} embeddings of dim {}", m.len(), e.len(), e.dim());
            Ok(0)
        }
        Command::Metrics { results, baseline } => {
            let cond = load_results(&results).map_err(|e| Failure::validation(format!("{}: {e}", results.display())))?;
            let base =
                load_results(&baseline).map_err(|e| Failure::validation(format!("{}: {e}", baseline.display())))?;
            let report = MetricReport::compare(&base, &cond).map_err(Failure::validation)?;
            out!("{}", to_json(&report));
            Ok(0)
        }
        Command::Degrade { op, sigma, side, seed, input, out, manifest, landmarks, manifest_out } => {
            let m = load_manifest(&manifest).map_err(|e| Failure::validation(format!("{}: {e}", manifest.display())))?;
            let landmarks = match landmarks {
                Some(p) => read_landmarks(&p).map_err(Failure::validation)?,
                None => Default::default(),
            };
            let job = CorpusJob {
                condition: op,
                sigma: op.has_blur().then_some(sigma).flatten(),
                side: op.has_lowres().then_some(side).flatten(),
                seed,
                input_dir: input,
                output_dir: out.clone(),
                landmarks,
                sunglasses: SunglassesSpec::default(),
            };
            if op.has_blur() && job.sigma.is_none() {
                return Err(Failure::validation("--sigma is required for blur ops"));
            }
            if op.has_lowres() && job.side.is_none() {
                return Err(Failure::validation("--side is required for lowres ops"));
            }
            let extended = degrade_corpus(&m, &job).map_err(Failure::validation)?;
            let dest = manifest_out.unwrap_or_else(|| out.join("manifest.csv"));
            save_manifest(&extended, &dest).map_err(|e| Failure { code: 1, message: e.to_string() })?;
            out!("{} variants written; manifest at {}", extended.len() - m.len(), dest.display());
            Ok(0)
        }
        Command::Diff { a, b, tolerance } => diff(&a, &b, tolerance),
        Command::Stats { manifest } => {
            let m = load_manifest(&manifest).map_err(|e| Failure::validation(format!("{}: {e}", manifest.display())))?;
            out!("{}", to_json(&manifest_stats(&m)));
            Ok(0)
        }
    }
}

fn diff(a: &Path, b: &Path, tolerance: f64) -> Result<u8, Failure> {
    let deltas = diff_runs(&load_output(a)?, &load_output(b)?)?;
    let mut over = 0;
    out!("cell,fpir,dprime_mated,dprime_nonmated,wasserstein_shift");
    for d in &deltas {
        out!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            d.cell, d.fpir, d.dprime_mated, d.dprime_nonmated, d.wasserstein_shift
        );
        if d.max_abs() > tolerance {
            over += 1;
        }
    }
    if over > 0 {
        eprintln!("{over} of {} cells differ by more than {tolerance}", deltas.len());
        return Ok(EXIT_DIFF);
    }
    Ok(0)
}
