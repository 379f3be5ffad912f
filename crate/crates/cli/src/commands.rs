//! The seven experiment commands.

use std::time::Instant;

use genq_core::datasrc::{save_dataset, Dataset, Provenance};
use genq_core::error::Error;
use genq_core::filter::{run_pipeline, write_report, FilterCfg, FilterReport};
use genq_core::nnkit::io::{load_model, save_model};
use genq_core::nnkit::model::{Arch, Model};
use genq_core::nnkit::tensor::Tensor;
use genq_core::nnkit::train::{evaluate, train_float, TrainCfg};
use genq_core::quant::{
    self, calibrate_activations, reconstruct_all, save_quantized, QatCfg, QuantizedModel, ReconCfg,
};

use crate::config::ExperimentConfig;
use crate::pool::{build_pool, derive_seed, eval_set, train_set, BuiltPool};
use crate::report::ReportRow;

/// Command failures, split by exit-code class: config errors exit 2,
/// runtime errors exit 3.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Runtime(e) => write!(f, "runtime error: {e}"),
        }
    }
}

pub type CmdResult = Result<Vec<ReportRow>, CliError>;

fn row(
    experiment: impl Into<String>,
    seed: u64,
    stage: &str,
    metric: impl Into<String>,
    value: f64,
    started: Instant,
) -> ReportRow {
    ReportRow {
        experiment: experiment.into(),
        seed,
        stage: stage.into(),
        metric: metric.into(),
        value,
        seconds: started.elapsed().as_secs_f64(),
    }
}

/// Train the float baseline for each seed and save it.
pub fn cmd_train(cfg: &ExperimentConfig) -> CmdResult {
    let arch = cfg.arch();
    let eval_ds = eval_set(cfg)?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let t0 = Instant::now();
        let train_ds = train_set(cfg, seed)?;
        let mut model = Model::new(arch, seed);
        let tcfg = TrainCfg {
            epochs: cfg.train.epochs,
            lr: cfg.train.lr,
            momentum: cfg.train.momentum,
            batch: cfg.train.batch,
            seed,
        };
        let log = train_float(
            &mut model,
            &train_ds.images,
            &train_ds.labels,
            Some((&eval_ds.images, &eval_ds.labels)),
            &tcfg,
        )?;
        let path = cfg.model_path(arch, seed);
        save_model(&model, &path)?;
        let acc = log.final_eval_acc.expect("eval set was provided");
        let exp = format!("train-{}", arch.name());
        rows.push(row(&exp, seed, "float", "eval_accuracy", acc, t0));
        if let Some(loss) = log.epoch_losses.last() {
            rows.push(row(&exp, seed, "float", "final_train_loss", *loss, t0));
        }
    }
    Ok(rows)
}

/// Build and save the candidate pool for each seed.
pub fn cmd_synth(cfg: &ExperimentConfig) -> CmdResult {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let t0 = Instant::now();
        let built = build_pool(cfg, seed)?;
        let dataset = Dataset::new(
            built.pool.images.clone(),
            built.pool.labels.clone(),
            if cfg.endpoint().is_some() {
                Provenance::External
            } else {
                Provenance::Synthetic
            },
        )?;
        let path = format!("{}/pool-seed{}.gqd", cfg.paths.out_dir, seed);
        save_dataset(&dataset, &path)?;
        let corrupt_count = built.corrupt.iter().filter(|&&c| c).count();
        rows.push(row(
            "synth",
            seed,
            "pool",
            "pool_size",
            built.pool.len() as f64,
            t0,
        ));
        rows.push(row(
            "synth",
            seed,
            "pool",
            "pool_corrupt",
            corrupt_count as f64,
            t0,
        ));
    }
    Ok(rows)
}

fn load_arch_model(cfg: &ExperimentConfig, arch: Arch, seed: u64) -> Result<Model, CliError> {
    let path = cfg.model_path(arch, seed);
    let model = load_model(&path)
        .map_err(|e| CliError::Runtime(Error::Contract(format!("loading {path}: {e}"))))?;
    if model.arch != arch {
        return Err(CliError::Runtime(Error::Contract(format!(
            "{path} holds a {} model, expected {}",
            model.arch.name(),
            arch.name()
        ))));
    }
    Ok(model)
}

/// Filter a fresh candidate pool and emit the report artifacts.
pub fn cmd_filter(cfg: &ExperimentConfig) -> CmdResult {
    let arch = cfg.arch();
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let t0 = Instant::now();
        let model = load_arch_model(cfg, arch, seed)?;
        let built = build_pool(cfg, seed)?;
        let report = run_pipeline(&model, &built.pool, &cfg.filter_cfg())?;
        let stem = format!("{}/filter-seed{}", cfg.paths.out_dir, seed);
        write_report(
            &report,
            format!("{stem}.csv"),
            format!("{stem}.json"),
            format!("{stem}.manifest"),
        )?;
        let exp = format!("filter-{}", arch.name());
        rows.push(row(
            &exp,
            seed,
            "filter",
            "kept_count",
            report.kept_ids.len() as f64,
            t0,
        ));
        if cfg.pool.corrupt_fraction > 0.0 {
            let frac = built.clean_fraction_of(report.kept_ids.iter().copied());
            rows.push(row(&exp, seed, "filter", "kept_clean_fraction", frac, t0));
        }
    }
    Ok(rows)
}

/// Filtered calibration subset: the first `size` kept samples in
/// class-balanced order.
fn calib_subset(
    built: &BuiltPool,
    report: &FilterReport,
    size: usize,
) -> Result<(Tensor, Vec<u16>), CliError> {
    if report.kept_ids.len() < size {
        return Err(CliError::Runtime(Error::Contract(format!(
            "filter kept {} samples, calibration needs {size}",
            report.kept_ids.len()
        ))));
    }
    let ordered = crate::pool::class_balanced_order(&report.kept_ids, &built.pool.labels);
    // pool ids are positions by construction
    let indices: Vec<usize> = ordered[..size].iter().map(|&id| id as usize).collect();
    let images = built.pool.images.gather_batch(&indices)?;
    let labels: Vec<u16> = indices.iter().map(|&i| built.pool.labels[i]).collect();
    Ok((images, labels))
}

struct PtqOutcome {
    qm: QuantizedModel,
    ptq_acc: f64,
}

fn run_ptq(
    cfg: &ExperimentConfig,
    model: Model,
    calib_images: &Tensor,
    eval_ds: &Dataset,
    seed: u64,
) -> Result<PtqOutcome, CliError> {
    let mut qm = QuantizedModel::calibrate(model, cfg.bits.w, cfg.bits.a)?;
    calibrate_activations(&mut qm, calib_images)?;
    let rcfg = ReconCfg {
        iters: cfg.ptq.recon_iters,
        batch: cfg.ptq.recon_batch,
        lr: cfg.ptq.recon_lr,
        seed: derive_seed(seed, 0x7265636f), // "reco"
        ..ReconCfg::default()
    };
    reconstruct_all(&mut qm, calib_images, &rcfg)?;
    let ptq_acc = quant::evaluate(&qm, &eval_ds.images, &eval_ds.labels)?;
    Ok(PtqOutcome { qm, ptq_acc })
}

/// Calibrate, reconstruct, and evaluate PTQ for each seed (optionally over
/// a calibration-size sweep).
pub fn cmd_ptq(cfg: &ExperimentConfig) -> CmdResult {
    let arch = cfg.arch();
    let eval_ds = eval_set(cfg)?;
    let sizes = cfg
        .ptq
        .calib_sizes
        .clone()
        .unwrap_or_else(|| vec![cfg.pool.n_keep]);
    let sweep = cfg.ptq.calib_sizes.is_some();
    let exp = format!("ptq-{}-w{}a{}", arch.name(), cfg.bits.w, cfg.bits.a);
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let t0 = Instant::now();
        let model = load_arch_model(cfg, arch, seed)?;
        let float_acc = evaluate(&model, &eval_ds.images, &eval_ds.labels)?;
        rows.push(row(&exp, seed, "float", "float_accuracy", float_acc, t0));
        let built = build_pool(cfg, seed)?;
        let report = run_pipeline(&model, &built.pool, &cfg.filter_cfg())?;
        for &size in &sizes {
            let (calib_images, _) = calib_subset(&built, &report, size)?;
            let outcome = run_ptq(cfg, model.clone(), &calib_images, &eval_ds, seed)?;
            let metric = if sweep {
                format!("ptq_accuracy_calib{size}")
            } else {
                "ptq_accuracy".to_string()
            };
            rows.push(row(
                &exp,
                seed,
                "reconstructed",
                metric,
                outcome.ptq_acc,
                t0,
            ));
            if size == *sizes.last().unwrap() {
                let path = format!(
                    "{}/model-{}-w{}a{}-ptq-seed{}.gqm",
                    cfg.paths.out_dir,
                    arch.name(),
                    cfg.bits.w,
                    cfg.bits.a,
                    seed
                );
                save_quantized(&outcome.qm, &path)?;
            }
        }
    }
    Ok(rows)
}

/// PTQ followed by QAT finetuning on the filtered synthetic data.
pub fn cmd_qat(cfg: &ExperimentConfig) -> CmdResult {
    let arch = cfg.arch();
    let eval_ds = eval_set(cfg)?;
    let exp = format!("qat-{}-w{}a{}", arch.name(), cfg.bits.w, cfg.bits.a);
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let t0 = Instant::now();
        let model = load_arch_model(cfg, arch, seed)?;
        let float_acc = evaluate(&model, &eval_ds.images, &eval_ds.labels)?;
        rows.push(row(&exp, seed, "float", "float_accuracy", float_acc, t0));
        let built = build_pool(cfg, seed)?;
        let report = run_pipeline(&model, &built.pool, &cfg.filter_cfg())?;
        let (calib_images, calib_labels) = calib_subset(&built, &report, cfg.pool.n_keep)?;
        let mut outcome = run_ptq(cfg, model, &calib_images, &eval_ds, seed)?;
        rows.push(row(
            &exp,
            seed,
            "reconstructed",
            "ptq_accuracy",
            outcome.ptq_acc,
            t0,
        ));
        let qcfg = QatCfg {
            epochs: cfg.qat.epochs,
            lr: cfg.qat.lr,
            momentum: cfg.qat.momentum,
            batch: cfg.qat.batch,
            seed: derive_seed(seed, 0x71617466), // "qatf"
        };
        let log = quant::qat_finetune(&mut outcome.qm, &calib_images, &calib_labels, &qcfg)?;
        let qat_acc = quant::evaluate(&outcome.qm, &eval_ds.images, &eval_ds.labels)?;
        rows.push(row(
            &exp,
            seed,
            "qat-finetuned",
            "qat_accuracy",
            qat_acc,
            t0,
        ));
        for (epoch, loss) in log.epoch_losses.iter().enumerate() {
            rows.push(row(
                &exp,
                seed,
                "qat-finetuned",
                format!("train_loss_epoch{epoch:02}"),
                *loss,
                t0,
            ));
        }
        let path = format!(
            "{}/model-{}-w{}a{}-qat-seed{}.gqm",
            cfg.paths.out_dir,
            arch.name(),
            cfg.bits.w,
            cfg.bits.a,
            seed
        );
        save_quantized(&outcome.qm, &path)?;
    }
    Ok(rows)
}

const ABLATE_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

fn ablate_pool_demand(n_keep: usize, r_swept: f64, r_other: f64) -> usize {
    let total = (n_keep as f64 / ((1.0 - r_swept) * (1.0 - r_other))).ceil() as usize;
    total.div_ceil(10) * 10
}

/// Sweep each filter stage's ratio over {0.1, 0.3, 0.5, 0.7, 0.9} with the
/// other stage fixed at its configured value, holding the kept count
/// constant (pool size scales as n_keep / (1 − r)).
pub fn cmd_ablate(cfg: &ExperimentConfig) -> CmdResult {
    let arch = cfg.arch();
    // upfront pool-size check: the sweep must fit in the configured pool
    let mut demand = 0usize;
    for &r in &ABLATE_GRID {
        demand = demand
            .max(ablate_pool_demand(cfg.pool.n_keep, r, cfg.ratios.r2))
            .max(ablate_pool_demand(cfg.pool.n_keep, r, cfg.ratios.r1));
    }
    if demand > cfg.pool.n_gen {
        return Err(CliError::Config(format!(
            "insufficient pool for the highest ratio: need {demand} candidates, pool.n_gen is {}",
            cfg.pool.n_gen
        )));
    }
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let t0 = Instant::now();
        let model = load_arch_model(cfg, arch, seed)?;
        let master = build_pool(cfg, seed)?;
        for sweep in ["energy", "stage2"] {
            for &r in &ABLATE_GRID {
                let r_other = if sweep == "energy" {
                    cfg.ratios.r2
                } else {
                    cfg.ratios.r1
                };
                let (r1, r2) = if sweep == "energy" {
                    (r, r_other)
                } else {
                    (r_other, r)
                };
                let per_class = ablate_pool_demand(cfg.pool.n_keep, r, r_other) / 10;
                let sub = master.subset_per_class(per_class)?;
                let fcfg = FilterCfg {
                    r1,
                    r2,
                    ..cfg.filter_cfg()
                };
                let report = run_pipeline(&model, &sub.pool, &fcfg)?;
                let frac = master.clean_fraction_of(report.kept_ids.iter().copied());
                rows.push(row(
                    format!("ablate-{sweep}"),
                    seed,
                    "filter",
                    format!("kept_clean_fraction_r{r:.1}"),
                    frac,
                    t0,
                ));
            }
        }
    }
    Ok(rows)
}

/// Cross-model evaluation: one shared pool per seed, filtered by each
/// model, used to quantize each model; emits the 2x2 accuracy grid plus the
/// off-diagonal drop per target.
pub fn cmd_transfer(cfg: &ExperimentConfig) -> CmdResult {
    let eval_ds = eval_set(cfg)?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let t0 = Instant::now();
        let cnn_path = cfg
            .paths
            .model_cnn
            .clone()
            .unwrap_or_else(|| cfg.model_path(Arch::TinyCnn, seed));
        let vit_path = cfg
            .paths
            .model_vit
            .clone()
            .unwrap_or_else(|| cfg.model_path(Arch::TinyVit, seed));
        let cnn = load_model(&cnn_path)
            .map_err(|e| CliError::Runtime(Error::Contract(format!("loading {cnn_path}: {e}"))))?;
        let vit = load_model(&vit_path)
            .map_err(|e| CliError::Runtime(Error::Contract(format!("loading {vit_path}: {e}"))))?;
        if cnn.arch != Arch::TinyCnn || vit.arch != Arch::TinyVit {
            return Err(CliError::Runtime(Error::Contract(
                "transfer model paths point at the wrong architectures".into(),
            )));
        }
        let built = build_pool(cfg, seed)?;
        let sources = [("tiny-cnn", &cnn), ("tiny-vit", &vit)];
        let mut grid = [[0.0f64; 2]; 2];
        let mut reports = Vec::new();
        for (_, model) in &sources {
            reports.push(run_pipeline(model, &built.pool, &cfg.filter_cfg())?);
        }
        for (si, (src_name, _)) in sources.iter().enumerate() {
            let (calib_images, _) = calib_subset(&built, &reports[si], cfg.pool.n_keep)?;
            for (ti, (tgt_name, tgt_model)) in sources.iter().enumerate() {
                let outcome = run_ptq(cfg, (*tgt_model).clone(), &calib_images, &eval_ds, seed)?;
                grid[si][ti] = outcome.ptq_acc;
                rows.push(row(
                    "transfer",
                    seed,
                    "reconstructed",
                    format!("ptq_accuracy_src_{src_name}_tgt_{tgt_name}"),
                    outcome.ptq_acc,
                    t0,
                ));
            }
        }
        for (ti, (tgt_name, _)) in sources.iter().enumerate() {
            let diag = grid[ti][ti];
            let off = grid[1 - ti][ti];
            rows.push(row(
                "transfer",
                seed,
                "reconstructed",
                format!("transfer_drop_tgt_{tgt_name}"),
                diag - off,
                t0,
            ));
        }
    }
    Ok(rows)
}
