//! The batch front-end: invariant-check suite, experiment runner, metric
//! evaluation, and the two-parameter demo. Machine output goes to files;
//! progress lines go to standard error.
//!
//! Exit codes: 0 success (including expected-fail audit verdicts), 1 a
//! registered check failed, 2 configuration or input errors.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::checkpoint;
use crate::checks;
use crate::config::{Config, Model};
use crate::data::{self, Dataset, Split};
use crate::ensemble::{evaluate, symmetrize, Ensemble, MemberProvenance};
use crate::error::{Error, Result};
use crate::network::{NetworkSpec, ParamPoint, Targets, LossKind};
use crate::report::{self, CsvWriter};
use crate::rng::{Purpose, Stream};
use crate::scalar::Scalar;
use crate::tensor::Batch;
use crate::training::{self, DType, InitKind, TrainConfig, TrainMode};

#[derive(Parser, Debug)]
#[command(name = "equiflow", about = "Equivariance laboratory for augmented ensembles")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Run every registered invariant check and write a JSON report.
    Check {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured ensembles and write metrics plus checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        members: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which model variant the checkpoint holds (sym, asym_invariant, asym_naive).
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the two-parameter reflection toy and dump trajectory snapshots.
    Demo2d {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        members: Option<usize>,
        /// Skip the mirrored pairing of initial points.
        #[arg(long, default_value_t = false)]
        asym_init: bool,
    },
}

pub fn run(cli: Cli) -> i32 {
    let code = match cli.cmd {
        Cmd::Check { config, out } => cmd_check(config.as_deref(), out.as_deref()),
        Cmd::Train {
            config,
            seed,
            out,
            members,
            epochs,
            dataset,
        } => cmd_train(config.as_deref(), seed, out.as_deref(), members, epochs, dataset.as_deref()),
        Cmd::Eval {
            config,
            checkpoint,
            model,
            dataset,
            out,
            seed,
        } => cmd_eval(
            config.as_deref(),
            &checkpoint,
            model.as_deref(),
            dataset.as_deref(),
            out.as_deref(),
            seed,
        ),
        Cmd::Demo2d {
            config,
            out,
            seed,
            members,
            asym_init,
        } => cmd_demo2d(config.as_deref(), out.as_deref(), seed, members, asym_init),
    };
    match code {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Io(_) | Error::Format(_) | Error::Checkpoint(_) => 2,
                _ => 1,
            }
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::from_path(p),
        None => Ok(Config::default()),
    }
}

fn out_dir(cfg: &Config, flag: Option<&Path>) -> Result<PathBuf> {
    let dir = flag
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Dataset root: config, then EQUIFLOW_DATA_DIR, then the in-repo default.
fn data_dir(cfg: &Config, dataset: &str) -> PathBuf {
    if let Some(dir) = &cfg.data.dir {
        return PathBuf::from(dir);
    }
    if let Ok(dir) = std::env::var("EQUIFLOW_DATA_DIR") {
        return PathBuf::from(dir);
    }
    match dataset {
        "cifar_gray" => PathBuf::from("data/cifar"),
        _ => PathBuf::from("data/mnist"),
    }
}

fn load_eval_dataset(cfg: &Config, dataset: &str, subset_seed: u64) -> Result<Dataset> {
    match dataset {
        "mnist" => {
            let ds = data::load_mnist_idx(&data_dir(cfg, dataset), Split::Test)?;
            if cfg.data.test_subset > 0 && cfg.data.test_subset < ds.len() {
                ds.subset_stratified(cfg.data.test_subset, subset_seed)
            } else {
                Ok(ds)
            }
        }
        "cifar_gray" => {
            let ds = data::load_cifar10_gray(&data_dir(cfg, dataset))?;
            if cfg.data.test_subset > 0 && cfg.data.test_subset < ds.len() {
                ds.subset_stratified(cfg.data.test_subset, subset_seed)
            } else {
                Ok(ds)
            }
        }
        "toy" => Ok(data::make_c2_toy(cfg.data.test_subset.max(16), subset_seed)),
        other => Err(Error::Config(format!("unknown dataset {other:?}"))),
    }
}

fn cmd_check(config: Option<&Path>, out: Option<&Path>) -> Result<i32> {
    let cfg = load_config(config)?;
    let report = checks::run_all(&cfg)?;
    let dir = out_dir(&cfg, out)?;
    report::write_json(&dir.join("check_report.json"), &report)?;
    for c in &report.checks {
        let verdict = match c.verdict {
            checks::Verdict::Pass => "PASS",
            checks::Verdict::ExpectedFail => "EXPECTED-FAIL",
            checks::Verdict::Fail => "FAIL",
        };
        match (c.residual, c.tolerance) {
            (Some(r), Some(t)) => eprintln!("{verdict:>13}  {}  residual {r:.3e} (tol {t:.1e})", c.name),
            _ => eprintln!("{verdict:>13}  {}", c.name),
        }
    }
    if let Some(fail) = report.first_failure() {
        eprintln!("first failing check: {}", fail.name);
        return Ok(1);
    }
    eprintln!("all checks passed; report written to {}", dir.join("check_report.json").display());
    Ok(0)
}

/// Per-model effective config: the support is pinned explicitly so the
/// checkpoint spec hash identifies the exact architecture.
fn effective_config(cfg: &Config, model: Model) -> Result<(Config, NetworkSpec)> {
    let mut eff = cfg.clone();
    if eff.space.support.is_none() && eff.network.arch == "mnist_c4" {
        let support = model.support(eff.space.filter_size)?;
        eff.space.support = Some(crate::config::SupportSpec::Ascii {
            ascii: support.to_ascii(),
        });
    }
    let spec = eff.build_network(model)?;
    Ok((eff, spec))
}

fn cmd_train(
    config: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
    members: Option<usize>,
    epochs: Option<usize>,
    dataset: Option<&str>,
) -> Result<i32> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(m) = members {
        cfg.ensemble.members = m;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(d) = dataset {
        cfg.data.dataset = d.to_string();
    }
    let dir = out_dir(&cfg, out)?;
    let train_cfg = cfg.train.build()?;
    let dataset_name = cfg.data.dataset.clone();

    if cfg.network.arch == "toy_c2" || dataset_name == "toy" {
        return train_toy(&cfg, &train_cfg, &dir);
    }

    let train_ds = {
        let ds = data::load_mnist_idx(&data_dir(&cfg, "mnist"), Split::Train)?;
        if cfg.data.train_subset > 0 && cfg.data.train_subset < ds.len() {
            ds.subset_stratified(cfg.data.train_subset, cfg.data.subset_seed)?
        } else {
            ds
        }
    };
    let test_ds = load_eval_dataset(&cfg, "mnist", cfg.data.subset_seed)?;
    eprintln!(
        "training on {} samples, evaluating on {} ({} members, {} epochs, seed {})",
        train_ds.len(),
        test_ds.len(),
        cfg.ensemble.members,
        cfg.train.epochs,
        cfg.train.seed
    );

    let mut metrics = CsvWriter::create(&dir.join("metrics.csv"), report::METRICS_HEADER)?;
    for model in cfg.models()? {
        match train_cfg.dtype {
            DType::F32 => train_model::<f32>(&cfg, &train_cfg, model, &train_ds, &test_ds, &dir, &mut metrics)?,
            DType::F64 => train_model::<f64>(&cfg, &train_cfg, model, &train_ds, &test_ds, &dir, &mut metrics)?,
        }
    }
    eprintln!("metrics written to {}", dir.join("metrics.csv").display());
    Ok(0)
}

fn train_model<F: Scalar>(
    cfg: &Config,
    train_cfg: &TrainConfig,
    model: Model,
    train_ds: &Dataset,
    test_ds: &Dataset,
    dir: &Path,
    metrics: &mut CsvWriter,
) -> Result<()> {
    let (eff, spec) = effective_config(cfg, model)?;
    let spec = Arc::new(spec);
    let images: Batch<F> = train_ds.images.cast();
    let targets: Targets<F> = train_ds.targets();
    let shared = matches!(train_cfg.mode, TrainMode::FullAugmentGd);
    let start = Instant::now();
    let (ens, outcomes) = crate::ensemble::train_ensemble(
        &spec,
        train_cfg,
        &images,
        &targets,
        LossKind::CrossEntropy,
        model.init(),
        cfg.ensemble.members,
        shared,
        None,
    )?;
    let wall = start.elapsed().as_secs_f64();
    let epochs = outcomes.iter().map(|o| o.epoch_losses.len()).max().unwrap_or(0);
    for e in 0..epochs {
        let mean_loss = outcomes
            .iter()
            .filter_map(|o| o.epoch_losses.get(e))
            .sum::<f64>()
            / outcomes.len() as f64;
        eprintln!(
            "model={} epoch={}/{} loss={:.5} wall={:.1}s",
            model.name(),
            e + 1,
            epochs,
            mean_loss,
            wall * (e + 1) as f64 / epochs as f64
        );
    }
    let rep = spec.rotation_lifted_rep()?;
    for e in 0..epochs {
        let mut epoch_members = Vec::with_capacity(ens.members.len());
        for o in &outcomes {
            let coords = o.epoch_coords.get(e).cloned().unwrap_or_else(|| o.params.coords.clone());
            epoch_members.push(ParamPoint::from_coords(&spec.space, coords));
        }
        let mut epoch_ens = Ensemble::new(spec.clone(), epoch_members, ens.provenance.clone())?;
        if cfg.ensemble.symmetrize {
            epoch_ens = symmetrize(&epoch_ens, &rep)?;
        }
        let r = evaluate(&epoch_ens, &test_ds.images)?;
        metrics.row(&report::metrics_row(e + 1, model.name(), &test_ds.name, &r))?;
    }
    let final_ens = if cfg.ensemble.symmetrize {
        symmetrize(&ens, &rep)?
    } else {
        ens
    };
    let ckpt = dir.join(format!("checkpoint_{}.eqfw", model.name()));
    save_ensemble(&ckpt, &eff, &final_ens, train_cfg.dtype)?;
    eprintln!(
        "model={} members={} checkpoint={}",
        model.name(),
        final_ens.members.len(),
        ckpt.display()
    );
    Ok(())
}

fn save_ensemble<F: Scalar>(path: &Path, eff: &Config, ens: &Ensemble<F>, dtype: DType) -> Result<()> {
    let hash = eff.spec_hash();
    match dtype {
        DType::F32 => {
            let members: Vec<(MemberProvenance, Vec<f32>)> = ens
                .members
                .iter()
                .zip(&ens.provenance)
                .map(|(m, p)| (*p, m.coords.iter().map(|c| c.to_f64() as f32).collect()))
                .collect();
            checkpoint::save_f32(path, hash, &members)
        }
        DType::F64 => {
            let members: Vec<(MemberProvenance, Vec<f64>)> = ens
                .members
                .iter()
                .zip(&ens.provenance)
                .map(|(m, p)| (*p, m.coords.iter().map(|c| c.to_f64()).collect()))
                .collect();
            checkpoint::save_f64(path, hash, &members)
        }
    }
}

fn train_toy(cfg: &Config, train_cfg: &TrainConfig, dir: &Path) -> Result<i32> {
    let spec = Arc::new(crate::config::toy_c2_network()?);
    let ds = data::make_c2_toy(cfg.data.train_subset.max(64), cfg.data.subset_seed);
    let images: Batch<f64> = ds.images.cast();
    let targets: Targets<f64> = ds.targets();
    let (ens, outcomes) = crate::ensemble::train_ensemble(
        &spec,
        train_cfg,
        &images,
        &targets,
        LossKind::SquaredError,
        InitKind::Invariant,
        cfg.ensemble.members,
        false,
        None,
    )?;
    let mut csv = CsvWriter::create(&dir.join("toy_losses.csv"), "epoch,member,loss")?;
    for (mi, o) in outcomes.iter().enumerate() {
        for (e, l) in o.epoch_losses.iter().enumerate() {
            csv.row(&format!("{},{},{}", e + 1, mi, report::f17(*l)))?;
        }
    }
    let eff = cfg.clone();
    save_ensemble(&dir.join("checkpoint_toy.eqfw"), &eff, &ens, DType::F64)?;
    eprintln!("toy ensemble trained; losses in {}", dir.join("toy_losses.csv").display());
    Ok(0)
}

fn cmd_eval(
    config: Option<&Path>,
    ckpt_path: &Path,
    model: Option<&str>,
    dataset: Option<&str>,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<i32> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let model = match model {
        Some(m) => Model::parse(m)?,
        None => *cfg.models()?.first().unwrap_or(&Model::Sym),
    };
    let (eff, spec) = effective_config(&cfg, model)?;
    let spec = Arc::new(spec);
    let loaded = checkpoint::load(ckpt_path, Some(eff.spec_hash()))?;
    let members: Vec<ParamPoint<f64>> = match &loaded.raw_f32 {
        Some(raw) => raw
            .iter()
            .map(|bits| {
                ParamPoint::from_coords(&spec.space, bits.iter().map(|&b| b as f64).collect())
            })
            .collect(),
        None => loaded
            .members
            .iter()
            .map(|(_, coords)| ParamPoint::from_coords(&spec.space, coords.clone()))
            .collect(),
    };
    let provenance: Vec<MemberProvenance> = loaded.members.iter().map(|(p, _)| *p).collect();
    let ens = Ensemble::new(spec, members, provenance)?;
    let dataset_name = dataset.unwrap_or("mnist");
    let ds = load_eval_dataset(&cfg, dataset_name, cfg.data.subset_seed)?;
    let r = evaluate(&ens, &ds.images)?;
    let dir = out_dir(&cfg, out)?;
    let mut csv = CsvWriter::create(&dir.join("metrics_eval.csv"), report::METRICS_HEADER)?;
    csv.row(&report::metrics_row(0, model.name(), &ds.name, &r))?;
    report::write_json(&dir.join("metrics_eval.json"), &r)?;
    eprintln!(
        "model={} dataset={} osp={:.4} log10_kl={:.4}",
        model.name(),
        ds.name,
        r.osp,
        r.sym_kl_log10
    );
    Ok(0)
}

fn cmd_demo2d(
    config: Option<&Path>,
    out: Option<&Path>,
    seed: Option<u64>,
    members: Option<usize>,
    asym_init: bool,
) -> Result<i32> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(m) = members {
        cfg.ensemble.members = m;
    }
    let dir = out_dir(&cfg, out)?;
    let spec = crate::config::toy_c2_network()?;
    let ds = data::make_c2_toy(cfg.data.train_subset.max(128), cfg.data.subset_seed);
    let images: Batch<f64> = ds.images.cast();
    let targets: Targets<f64> = ds.targets();
    let steps = cfg.train.epochs.max(1);
    let lr = cfg.train.learning_rate;

    // paired init: every base point is accompanied by its mirror image
    let bases = cfg.ensemble.members.max(1);
    let mut points: Vec<ParamPoint<f64>> = Vec::new();
    for m in 0..bases as u64 {
        let mut s = Stream::new(cfg.train.seed, m, Purpose::Init);
        let w1 = s.next_gaussian();
        let w2 = s.next_gaussian();
        points.push(ParamPoint::from_coords(&spec.space, vec![w1, w2]));
        if !asym_init {
            points.push(ParamPoint::from_coords(&spec.space, vec![w1, -w2]));
        }
    }

    let mut csv = CsvWriter::create(&dir.join("demo2d.csv"), "t,member,w1,w2")?;
    for t in 0..=steps {
        let mut mean = [0.0f64; 2];
        for (mi, p) in points.iter().enumerate() {
            csv.row(&format!(
                "{t},{mi},{},{}",
                report::f17(p.coords[0].to_f64()),
                report::f17(p.coords[1].to_f64())
            ))?;
            mean[0] += p.coords[0];
            mean[1] += p.coords[1];
        }
        mean[0] /= points.len() as f64;
        mean[1] /= points.len() as f64;
        csv.row(&format!("{t},mean,{},{}", report::f17(mean[0]), report::f17(mean[1])))?;
        if t == steps {
            break;
        }
        for p in points.iter_mut() {
            *p = training::step_full_gd(&spec, p, &images, &targets, LossKind::SquaredError, lr)?;
        }
    }
    eprintln!("trajectories written to {}", dir.join("demo2d.csv").display());
    Ok(0)
}
