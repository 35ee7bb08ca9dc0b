use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use safe_core::io::read_container_file;
use safe_core::rem::{prune_layer, synthetic_anisotropic_activations, ActivationBatch, LinearLayer, PruneMethod, RemConfig};
use safe_core::SparsityTarget;
use safe_harness::diagnose::diagnose_checkpoint;
use safe_harness::{export_report, run_experiment, verify_suite, ExperimentConfig, HarnessError, Result, Scope, VerifyOptions};

#[derive(Parser)]
#[command(name = "safe", version, about = "Sparse sharpness-aware training experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every seed of an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config field, e.g. `--set method.steps=500`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Rerun even if a complete run with the same hash exists.
        #[arg(long)]
        force: bool,
    },
    /// Prune one linear layer by reconstruction error.
    PruneLayer {
        /// Layer container; a random layer is used when absent.
        #[arg(long)]
        layer: Option<PathBuf>,
        /// Calibration activations container (`shape = [N, d_in]`); synthetic when absent.
        #[arg(long)]
        activations: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        d_in: usize,
        #[arg(long, default_value_t = 64)]
        d_out: usize,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, value_enum, default_value_t = MethodArg::SafePlus)]
        method: MethodArg,
        /// Unstructured sparsity fraction.
        #[arg(long, default_value_t = 0.5, conflicts_with = "nm")]
        sparsity: f64,
        /// N:M pattern such as `2:4`.
        #[arg(long)]
        nm: Option<String>,
        /// Optional JSON `RemConfig`.
        #[arg(long)]
        rem_config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the pruned layer.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hessian, landscape and stationarity diagnostics of a checkpoint.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the landscape grid here as CSV.
        #[arg(long)]
        landscape_csv: Option<PathBuf>,
    },
    /// Merge completed runs into comparison tables and plot CSVs.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle checks.
    Verify {
        #[arg(long, value_enum, default_value_t = Scope::All)]
        scope: Scope,
        #[arg(long, hide = true)]
        corrupt_tie_break: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Magnitude,
    WandaOneshot,
    Safe,
    SafePlus,
}

impl From<MethodArg> for PruneMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Magnitude => PruneMethod::Magnitude,
            MethodArg::WandaOneshot => PruneMethod::WandaOneshot,
            MethodArg::Safe => PruneMethod::Safe,
            MethodArg::SafePlus => PruneMethod::SafePlus,
        }
    }
}

fn parse_nm(s: &str) -> Result<SparsityTarget> {
    let bad = || HarnessError::Config(format!("expected N:M, got {s:?}"));
    let (n, m) = s.split_once(':').ok_or_else(bad)?;
    let t = SparsityTarget::n_of_m(n.trim().parse().map_err(|_| bad())?, m.trim().parse().map_err(|_| bad())?);
    t.validate()?;
    Ok(t)
}

fn load_activations(path: &Path) -> Result<ActivationBatch<f64>> {
    let (h, data) = read_container_file(path)?;
    let shape: Vec<usize> = h
        .get("shape")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| HarnessError::Config(format!("{}: header lacks shape", path.display())))?;
    let [n, d] = shape[..] else {
        return Err(HarnessError::Config(format!("{}: activations must be 2-D", path.display())));
    };
    let a = Array2::from_shape_vec((n, d), data)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    Ok(ActivationBatch::with_provenance(a, path.display().to_string())?)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Train {
            config,
            overrides,
            force,
        } => {
            let cfg = ExperimentConfig::load_with_overrides(&config, &overrides)?;
            let out = run_experiment(&cfg, force)?;
            if out.skipped {
                println!("{}: up to date (hash {})", out.dir.display(), out.aggregate.config_hash);
            }
            println!("{}", serde_json::to_string_pretty(&out.aggregate).expect("serializable"));
            Ok(true)
        }
        Cmd::PruneLayer {
            layer,
            activations,
            d_in,
            d_out,
            samples,
            method,
            sparsity,
            nm,
            rem_config,
            seed,
            out,
        } => {
            let layer = match layer {
                Some(p) => LinearLayer::<f64>::load(&p)?,
                None => LinearLayer::random(d_in, d_out, seed),
            };
            let acts = match activations {
                Some(p) => load_activations(&p)?,
                None => synthetic_anisotropic_activations(samples, layer.d_in(), seed.wrapping_add(1))?,
            };
            let target = match nm {
                Some(s) => parse_nm(&s)?,
                None => SparsityTarget::fraction(sparsity),
            };
            let rc = match rem_config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
                    serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?
                }
                None => RemConfig::default(),
            };
            let (pruned, report) = prune_layer(&layer, &acts, &target, method.into(), &rc)?;
            if let Some(p) = out {
                pruned.save(&p)?;
            }
            println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
            Ok(true)
        }
        Cmd::Diagnose {
            config,
            overrides,
            checkpoint,
            seed,
            landscape_csv,
        } => {
            let cfg = ExperimentConfig::load_with_overrides(&config, &overrides)?;
            let d = diagnose_checkpoint(&cfg, &checkpoint, seed)?;
            if let (Some(p), Some(grid)) = (&landscape_csv, &d.landscape) {
                let f = std::fs::File::create(p).map_err(|e| HarnessError::io(p, e))?;
                grid.write_csv(std::io::BufWriter::new(f)).map_err(|e| HarnessError::io(p, e))?;
            }
            println!("{}", serde_json::to_string_pretty(&d).expect("serializable"));
            Ok(true)
        }
        Cmd::Report { runs, out } => {
            let r = export_report(&runs, &out)?;
            for f in &r.files {
                println!("{}", f.display());
            }
            Ok(true)
        }
        Cmd::Verify {
            scope,
            corrupt_tie_break,
        } => {
            let report = verify_suite(scope, VerifyOptions { corrupt_tie_break });
            print!("{report}");
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
