//! Experiment execution: one directory per experiment, one subdirectory per seed.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use safe_core::baselines::run_baseline;
use safe_core::io::save_params;
use safe_core::safe::stationarity_gap;
use safe_core::sharpness::{landscape_slice, max_hessian_eigenvalue, sam_gradient, PowerIteration};
use safe_core::trace::write_jsonl;
use safe_core::{
    project, run_safe, DataStream, EvalHook, Objective, ParamVector, SaliencyMode, ShuffledBatches,
    SparsityTarget, TraceRecord, TrainResult,
};
use safe_models::{corrupt_labels, load_mnist_dir, synth_blobs, AccuracyHook, Dataset, Mlp};

use crate::config::{DataSpec, DenseConfig, ExperimentConfig, MethodConfig};
use crate::error::{HarnessError, Result};

/// Final numbers of one seed, written to `seed-<s>/summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub config_hash: String,
    pub model_data_hash: String,
    pub method: String,
    pub seed: u64,
    pub steps: usize,
    pub target_sparsity: Option<f64>,
    /// Sparsity of the returned sparse model over sparsifiable entries.
    pub achieved_sparsity: f64,
    pub dense_test_acc: f64,
    pub dense_test_loss: f64,
    pub sparse_test_acc: f64,
    pub sparse_test_loss: f64,
    /// Fraction of sparsifiable dense-iterate entries below the small-weight threshold.
    pub small_weight_fraction: f64,
    /// ‖x − proj(x)‖₂ of the final dense iterate.
    pub dist_to_constraint: f64,
    pub lambda_max: Option<f64>,
    pub lambda_max_iterations: Option<usize>,
    pub lambda_max_converged: Option<bool>,
    pub stationarity_gap: Option<f64>,
    pub wall_time_s: f64,
}

impl SeedSummary {
    /// Numeric fields by name, for aggregation.
    pub fn numeric(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("achieved_sparsity".into(), self.achieved_sparsity);
        m.insert("dense_test_acc".into(), self.dense_test_acc);
        m.insert("dense_test_loss".into(), self.dense_test_loss);
        m.insert("sparse_test_acc".into(), self.sparse_test_acc);
        m.insert("sparse_test_loss".into(), self.sparse_test_loss);
        m.insert("small_weight_fraction".into(), self.small_weight_fraction);
        m.insert("dist_to_constraint".into(), self.dist_to_constraint);
        m.insert("wall_time_s".into(), self.wall_time_s);
        if let Some(v) = self.lambda_max {
            m.insert("lambda_max".into(), v);
        }
        if let Some(v) = self.stationarity_gap {
            m.insert("stationarity_gap".into(), v);
        }
        m
    }
}

/// Cross-seed summary, written to `<run>/summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub config_hash: String,
    pub model_data_hash: String,
    pub name: String,
    pub method: String,
    pub target_sparsity: Option<f64>,
    pub seeds: Vec<u64>,
    pub mean: BTreeMap<String, f64>,
    /// Sample standard deviation (zero for a single seed).
    pub std: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    /// The run was already complete with the same configuration hash.
    pub skipped: bool,
    pub seeds: Vec<SeedSummary>,
    pub aggregate: AggregateSummary,
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed-{seed}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Report(format!("{}: {e}", path.display())))
}

pub fn read_aggregate(run_dir: &Path) -> Result<AggregateSummary> {
    read_json(&run_dir.join("summary.json"))
}

pub fn read_seed_summary(seed_dir: &Path) -> Result<SeedSummary> {
    read_json(&seed_dir.join("summary.json"))
}

/// Training and test sets for `seed` (label noise is drawn per seed).
pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = base_data(&cfg.data)?;
    let train = if cfg.label_noise > 0.0 {
        corrupt_labels(&train, cfg.label_noise, seed)?
    } else {
        train
    };
    Ok((train, test))
}

fn base_data(spec: &DataSpec) -> Result<(Dataset, Dataset)> {
    match spec {
        DataSpec::Mnist {
            dir,
            train_limit,
            test_limit,
            standardize,
        } => {
            let (train, test) = load_mnist_dir(dir)
                .map_err(|e| HarnessError::Config(format!("cannot load MNIST from {}: {e}", dir.display())))?;
            let train = train.head(train_limit.unwrap_or(usize::MAX));
            let test = test.head(test_limit.unwrap_or(usize::MAX));
            if *standardize {
                Ok((train.standardized_by(&train), test.standardized_by(&train)))
            } else {
                Ok((train, test))
            }
        }
        DataSpec::Blobs {
            train,
            test,
            features,
            classes,
            separation,
            seed,
        } => {
            // one draw split in two so both halves share class centers
            let all = synth_blobs(train + test, *features, *classes, *separation, *seed)?;
            let mut tr = all.head(*train);
            tr.split = "train".into();
            let te = Dataset::new(
                all.inputs.slice(ndarray::s![*train.., ..]).to_owned(),
                all.labels[*train..].to_vec(),
                *classes,
                "test",
            )?;
            Ok((tr, te))
        }
    }
}

/// Plain (or sharpness-aware) descent without sparsity pressure.
pub fn run_dense<O: Objective<f64>>(
    oracle: &O,
    x_init: ParamVector<f64>,
    stream: &mut dyn DataStream,
    cfg: &DenseConfig,
    hooks: &mut dyn EvalHook<f64>,
) -> Result<TrainResult<f64>> {
    let mut x = x_init;
    let mut trace = Vec::new();
    let every = hooks.every();
    let reported = |x: &ParamVector<f64>| -> Result<ParamVector<f64>> {
        Ok(match &cfg.target {
            Some(t) => project(x, t, None)?,
            None => x.clone(),
        })
    };
    for t in 0..cfg.steps {
        let batch = stream.next_batch();
        let eta = cfg.lr.eval(t, cfg.steps)?;
        let (loss, g) = oracle.value_and_gradient(&x, &batch)?;
        let dir = if cfg.rho > 0.0 {
            sam_gradient(oracle, &x, cfg.rho, &batch)?
        } else {
            g
        };
        if !loss.is_finite() {
            return Err(safe_core::Error::NonFinite {
                what: "loss".into(),
                step: t,
                snapshot: Some(x.to_f64_vec()),
            }
            .into());
        }
        let evaluated = every > 0 && t % every == 0;
        if t % cfg.trace_every == 0 || t + 1 == cfg.steps || evaluated {
            let s = reported(&x)?;
            let mut rec = TraceRecord::new(t, loss);
            rec.dist_to_constraint = x.dist2(&s);
            rec.dist_to_z = rec.dist_to_constraint;
            rec.lr = eta;
            rec.rho = cfg.rho;
            rec.sparsity = x.sparsity();
            if evaluated {
                rec.metrics = hooks.evaluate(t, &x, &s)?;
            }
            trace.push(rec);
        }
        x.axpy(-eta, &dir);
    }
    let x_sparse = reported(&x)?;
    let final_metrics = hooks.evaluate(cfg.steps, &x, &x_sparse)?;
    Ok(TrainResult {
        x_dense: x,
        x_sparse,
        trace,
        final_saliency: None,
        final_metrics,
        dual: None,
        prune_events: Vec::new(),
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(cfg: &ExperimentConfig, seeds: &[SeedSummary]) -> AggregateSummary {
    let mut by_key: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in seeds {
        for (k, v) in s.numeric() {
            by_key.entry(k).or_default().push(v);
        }
    }
    let (mut mean, mut std) = (BTreeMap::new(), BTreeMap::new());
    for (k, vs) in by_key {
        let (m, s) = mean_std(&vs);
        mean.insert(k.clone(), m);
        std.insert(k, s);
    }
    AggregateSummary {
        config_hash: cfg.hash(),
        model_data_hash: cfg.model_data_hash(),
        name: cfg.name.clone(),
        method: cfg.method.label(),
        target_sparsity: seeds.first().and_then(|s| s.target_sparsity),
        seeds: seeds.iter().map(|s| s.seed).collect(),
        mean,
        std,
    }
}

/// Runs every seed of `cfg` under `cfg.output_dir`. A directory whose
/// summary carries the same configuration hash is reused unless `force`.
pub fn run_experiment(cfg: &ExperimentConfig, force: bool) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    let hash = cfg.hash();
    if !force {
        if let Ok(existing) = read_aggregate(&dir) {
            if existing.config_hash == hash {
                let seeds = existing
                    .seeds
                    .iter()
                    .map(|&s| read_seed_summary(&seed_dir(&dir, s)))
                    .collect::<Result<Vec<_>>>();
                if let Ok(seeds) = seeds {
                    log::info!("{}: complete run with hash {hash} found, skipping", dir.display());
                    return Ok(RunOutcome {
                        dir,
                        skipped: true,
                        seeds,
                        aggregate: existing,
                    });
                }
            }
        }
    }
    fs::create_dir_all(&dir).map_err(|e| HarnessError::Config(format!("cannot create {}: {e}", dir.display())))?;
    let probe = dir.join(".write-test");
    fs::write(&probe, b"").map_err(|e| HarnessError::Config(format!("{} is not writable: {e}", dir.display())))?;
    let _ = fs::remove_file(&probe);
    // data problems are configuration problems: surface them before training
    base_data(&cfg.data)?;
    write_json(&dir.join("config.json"), cfg)?;

    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        seeds.push(run_seed(cfg, seed)?);
    }
    let agg = aggregate(cfg, &seeds);
    write_json(&dir.join("summary.json"), &agg)?;
    Ok(RunOutcome {
        dir,
        skipped: false,
        seeds,
        aggregate: agg,
    })
}

fn hash_header(cfg: &ExperimentConfig, seed: u64, which: &str) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("config_hash".into(), Value::from(cfg.hash()));
    m.insert("model_data_hash".into(), Value::from(cfg.model_data_hash()));
    m.insert("seed".into(), Value::from(seed));
    m.insert("which".into(), Value::from(which));
    m
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| HarnessError::io(path, e))
}

fn fraction_of_target(target: &SparsityTarget, n: usize) -> f64 {
    target.nominal_sparsity(n)
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedSummary> {
    let sdir = seed_dir(&cfg.output_dir, seed);
    fs::create_dir_all(&sdir).map_err(|e| HarnessError::io(&sdir, e))?;
    let hash = cfg.hash();
    let (train, test) = load_data(cfg, seed)?;
    let mlp = Mlp::<f64>::new(cfg.model.clone(), &train)?;
    let x0 = mlp.init(seed);
    let mut stream = ShuffledBatches::new(train.len(), cfg.batch_size.min(train.len()), seed)?;
    let mut hook = AccuracyHook {
        mlp: &mlp,
        train: &train,
        test: &test,
        every: cfg.eval_every,
        bn_samples: cfg.diagnostics.bn_tune_samples,
    };

    let start = Instant::now();
    let (res, steps) = match &cfg.method {
        MethodConfig::Safe(c) => {
            let mut c = c.clone();
            c.seed = seed;
            if c.variant.plus == SaliencyMode::Wanda {
                return Err(HarnessError::Config(
                    "wanda saliency needs calibration activations; use prune-layer".into(),
                ));
            }
            (run_safe(&mlp, x0, &mut stream, &c, &mut hook)?, c.steps)
        }
        MethodConfig::Baseline(b) => {
            let mut b = b.clone();
            b.seed = seed;
            (run_baseline(&mlp, x0, &mut stream, &b, &mut hook)?, b.steps)
        }
        MethodConfig::Dense(d) => (run_dense(&mlp, x0, &mut stream, d, &mut hook)?, d.steps),
    };
    let wall = start.elapsed().as_secs_f64();

    let mut trace = res.trace.clone();
    for r in &mut trace {
        r.config_hash = Some(hash.clone());
    }
    write_jsonl(create(&sdir.join("trace.jsonl"))?, &trace)?;
    save_params(&sdir.join("dense.safef64"), &res.x_dense, &hash_header(cfg, seed, "dense"))?;
    save_params(&sdir.join("sparse.safef64"), &res.x_sparse, &hash_header(cfg, seed, "sparse"))?;
    if !res.prune_events.is_empty() {
        let mut w = create(&sdir.join("prune_events.csv"))?;
        let io = |e| HarnessError::io(sdir.join("prune_events.csv"), e);
        writeln!(w, "config_hash,step,scheduled_sparsity,achieved_sparsity").map_err(io)?;
        for e in &res.prune_events {
            writeln!(w, "{hash},{},{},{}", e.step, e.scheduled_sparsity, e.achieved_sparsity).map_err(io)?;
        }
    }

    let diag = &cfg.diagnostics;
    let layout = res.x_dense.layout().clone();
    let idx = layout.sparsifiable_indices();
    let small = idx.iter().filter(|&&i| res.x_dense[i].abs() < diag.small_threshold).count() as f64
        / idx.len().max(1) as f64;
    let target = cfg.method.target().cloned();
    let dist_to_constraint = match &target {
        Some(t) => res.x_dense.dist2(&project(&res.x_dense, t, None)?),
        None => 0.0,
    };

    let mut lambda = (None, None, None);
    if let Some(h) = &diag.hessian {
        let batch: Vec<usize> = (0..h.samples.min(train.len())).collect();
        let est = max_hessian_eigenvalue(
            &mlp,
            &res.x_sparse,
            &batch,
            &PowerIteration {
                iters: h.iters,
                tol: h.tol,
                seed,
            },
        )?;
        let path = sdir.join("hessian.csv");
        let mut w = create(&path)?;
        writeln!(w, "config_hash,point,lambda_max,iterations,converged")
            .and_then(|_| writeln!(w, "{hash},sparse,{},{},{}", est.value, est.iterations, est.converged))
            .map_err(|e| HarnessError::io(&path, e))?;
        lambda = (Some(est.value), Some(est.iterations), Some(est.converged));
    }
    if let Some(l) = &diag.landscape {
        let batch: Vec<usize> = (0..l.samples.min(train.len())).collect();
        let grid = landscape_slice(&mlp, &res.x_sparse, l.axes, l.grid_points, l.radius, &batch, seed)?;
        let path = sdir.join("landscape.csv");
        let mut body = Vec::new();
        grid.write_csv(&mut body).map_err(|e| HarnessError::io(&path, e))?;
        let text = String::from_utf8(body).expect("CSV is UTF-8");
        let mut w = create(&path)?;
        for (i, line) in text.lines().enumerate() {
            let prefix = if i == 0 { "config_hash".to_string() } else { hash.clone() };
            writeln!(w, "{prefix},{line}").map_err(|e| HarnessError::io(&path, e))?;
        }
    }
    let mut gap = None;
    if let (Some(delta), Some(t)) = (diag.stationarity_delta, &target) {
        let n = diag.hessian.as_ref().map_or(1000, |h| h.samples).min(train.len());
        let batch: Vec<usize> = (0..n).collect();
        gap = Some(stationarity_gap(&mlp, &res.x_sparse, delta, t, &batch)?);
    }

    let metric = |k: &str| res.final_metrics.get(k).copied().unwrap_or(f64::NAN);
    let summary = SeedSummary {
        config_hash: hash,
        model_data_hash: cfg.model_data_hash(),
        method: cfg.method.label(),
        seed,
        steps,
        target_sparsity: target.as_ref().map(|t| fraction_of_target(t, idx.len())),
        achieved_sparsity: res.x_sparse.sparsity(),
        dense_test_acc: metric("dense_test_acc"),
        dense_test_loss: metric("dense_test_loss"),
        sparse_test_acc: metric("sparse_test_acc"),
        sparse_test_loss: metric("sparse_test_loss"),
        small_weight_fraction: small,
        dist_to_constraint,
        lambda_max: lambda.0,
        lambda_max_iterations: lambda.1,
        lambda_max_converged: lambda.2,
        stationarity_gap: gap,
        wall_time_s: wall,
    };
    write_json(&sdir.join("summary.json"), &summary)?;
    log::info!(
        "{} seed {seed}: sparse acc {:.4}, lambda_max {:?}, {:.1}s",
        summary.method,
        summary.sparse_test_acc,
        summary.lambda_max,
        wall
    );
    Ok(summary)
}
