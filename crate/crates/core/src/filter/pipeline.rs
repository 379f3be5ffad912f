//! The two-stage filtering pipeline and its report artifacts.
//!
//! Stage 1 applies energy filtering regardless of the model type; stage 2
//! routes on the model category: BN sensitivity filtering for models with
//! BatchNorm layers, patch-similarity entropy filtering otherwise.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::filter::bn::bn_filter;
use crate::filter::energy::{energy_score, EnergyForm};
use crate::filter::patch::patch_filter;
use crate::filter::Pool;
use crate::nnkit::io::{fnv1a_hex, model_to_bytes};
use crate::nnkit::model::Model;
use crate::nnkit::train::eval_logits;

#[derive(Debug, Clone)]
pub struct FilterCfg {
    /// Stage-1 (energy) drop ratio.
    pub r1: f64,
    /// Stage-2 (BN sensitivity / patch entropy) drop ratio.
    pub r2: f64,
    /// Energy temperature.
    pub alpha: f64,
    pub form: EnergyForm,
    /// Batch size for BN sensitivity grouping, arrival order.
    pub bn_batch: usize,
}

impl Default for FilterCfg {
    fn default() -> Self {
        FilterCfg {
            r1: 0.5,
            r2: 0.5,
            alpha: 1.0,
            form: EnergyForm::Paper,
            bn_batch: 64,
        }
    }
}

/// One candidate image with its scores and keep/drop decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub id: u64,
    pub class: u16,
    pub energy: f64,
    /// BN sensitivity or patch entropy; absent for samples dropped at
    /// stage 1.
    pub stage2: Option<f64>,
    pub kept: bool,
}

#[derive(Debug, Clone)]
pub struct FilterReport {
    /// Per-sample records in pool order.
    pub samples: Vec<ScoredSample>,
    pub r1: f64,
    pub r2: f64,
    pub alpha: f64,
    pub form: EnergyForm,
    /// Median KDE bandwidth across scored samples (patch filtering only).
    pub bandwidth: Option<f64>,
    pub model_hash: String,
    /// Kept sample ids, ascending.
    pub kept_ids: Vec<u64>,
}

/// Keep the ⌈N(1−r)⌉ lowest-scoring samples of each class; ties break on
/// sample id ascending.
pub(crate) fn keep_lowest_per_class(
    ids: &[u64],
    classes: &[u16],
    scores: &[f64],
    r: f64,
) -> Vec<bool> {
    select_per_class(ids, classes, scores, r, false)
}

/// Keep the ⌈N(1−r)⌉ highest-scoring samples of each class; ties break on
/// sample id ascending.
pub(crate) fn keep_highest_per_class(
    ids: &[u64],
    classes: &[u16],
    scores: &[f64],
    r: f64,
) -> Vec<bool> {
    select_per_class(ids, classes, scores, r, true)
}

fn select_per_class(
    ids: &[u64],
    classes: &[u16],
    scores: &[f64],
    r: f64,
    highest: bool,
) -> Vec<bool> {
    let mut kept = vec![false; ids.len()];
    let mut class_list: Vec<u16> = classes.to_vec();
    class_list.sort_unstable();
    class_list.dedup();
    for class in class_list {
        let mut idx: Vec<usize> = (0..ids.len()).filter(|&i| classes[i] == class).collect();
        idx.sort_by(|&a, &b| {
            let ord = scores[a].partial_cmp(&scores[b]).expect("finite scores");
            let ord = if highest { ord.reverse() } else { ord };
            ord.then(ids[a].cmp(&ids[b]))
        });
        let keep = ((idx.len() as f64) * (1.0 - r)).ceil() as usize;
        for &i in idx.iter().take(keep.min(idx.len())) {
            kept[i] = true;
        }
    }
    kept
}

/// Run the two-stage filtering pipeline on a candidate pool with a frozen
/// eval-mode model.
pub fn run_pipeline(model: &Model, pool: &Pool, cfg: &FilterCfg) -> Result<FilterReport> {
    let n = pool.len();
    if n == 0 {
        return Err(Error::contract("filter pipeline on an empty pool"));
    }
    if pool.ids.len() != n || pool.images.shape()[0] != n {
        return Err(Error::contract(format!(
            "pool arrays disagree: {} labels, {} ids, {} images",
            n,
            pool.ids.len(),
            pool.images.shape()[0]
        )));
    }
    for r in [cfg.r1, cfg.r2] {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::contract(format!(
                "filter ratio must be in [0,1), got {r}"
            )));
        }
    }
    let model_hash = fnv1a_hex(&model_to_bytes(model));

    // stage 1: energy
    let logits = eval_logits(model, &pool.images)?;
    let classes = logits.shape()[1];
    let mut energies = Vec::with_capacity(n);
    for (i, row) in logits.data().chunks_exact(classes).enumerate() {
        let e = energy_score(row, cfg.alpha, cfg.form).map_err(|err| match err {
            Error::Scoring(msg) => Error::Scoring(format!("sample id {}: {msg}", pool.ids[i])),
            other => other,
        })?;
        energies.push(e.value);
    }
    let stage1_kept = keep_lowest_per_class(&pool.ids, &pool.labels, &energies, cfg.r1);

    // stage 2: routed on the model category
    let survivors: Vec<usize> = (0..n).filter(|&i| stage1_kept[i]).collect();
    let sub_images = pool.images.gather_batch(&survivors)?;
    let sub_ids: Vec<u64> = survivors.iter().map(|&i| pool.ids[i]).collect();
    let sub_classes: Vec<u16> = survivors.iter().map(|&i| pool.labels[i]).collect();
    let mut stage2_scores: Vec<Option<f64>> = vec![None; n];
    let mut final_kept = vec![false; n];
    let mut bandwidth = None;
    if model.has_bn() {
        let (scores, kept) = bn_filter(model, &sub_images, &sub_ids, cfg.r2, cfg.bn_batch)?;
        for (k, &i) in survivors.iter().enumerate() {
            stage2_scores[i] = Some(scores[k]);
            final_kept[i] = kept[k];
        }
    } else {
        let (entropies, bandwidths, kept) =
            patch_filter(model, &sub_images, &sub_ids, &sub_classes, cfg.r2)?;
        for (k, &i) in survivors.iter().enumerate() {
            stage2_scores[i] = Some(entropies[k]);
            final_kept[i] = kept[k];
        }
        if !bandwidths.is_empty() {
            let mut sorted = bandwidths;
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            bandwidth = Some(sorted[sorted.len() / 2]);
        }
    }

    let samples: Vec<ScoredSample> = (0..n)
        .map(|i| ScoredSample {
            id: pool.ids[i],
            class: pool.labels[i],
            energy: energies[i],
            stage2: stage2_scores[i],
            kept: final_kept[i],
        })
        .collect();
    let mut kept_ids: Vec<u64> = samples.iter().filter(|s| s.kept).map(|s| s.id).collect();
    kept_ids.sort_unstable();
    Ok(FilterReport {
        samples,
        r1: cfg.r1,
        r2: cfg.r2,
        alpha: cfg.alpha,
        form: cfg.form,
        bandwidth,
        model_hash,
        kept_ids,
    })
}

#[derive(Serialize)]
struct Sidecar<'a> {
    r1: f64,
    r2: f64,
    alpha: f64,
    energy_form: &'a str,
    bandwidth: Option<f64>,
    model_hash: &'a str,
}

/// Serialize the report: a CSV score table, a JSON sidecar with the run
/// parameters, and a newline-separated manifest of kept sample ids.
pub fn write_report(
    report: &FilterReport,
    csv_path: impl AsRef<Path>,
    sidecar_path: impl AsRef<Path>,
    manifest_path: impl AsRef<Path>,
) -> Result<()> {
    let mut csv = String::from("sample_id,class,energy,stage2_score,kept\n");
    for s in &report.samples {
        let stage2 = s.stage2.map(|v| format!("{v:.9}")).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{:.9},{},{}\n",
            s.id, s.class, s.energy, stage2, s.kept
        ));
    }
    std::fs::File::create(csv_path)?.write_all(csv.as_bytes())?;
    let sidecar = Sidecar {
        r1: report.r1,
        r2: report.r2,
        alpha: report.alpha,
        energy_form: report.form.name(),
        bandwidth: report.bandwidth,
        model_hash: &report.model_hash,
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Format(format!("sidecar serialization: {e}")))?;
    std::fs::File::create(sidecar_path)?.write_all(json.as_bytes())?;
    let mut manifest = String::new();
    for id in &report.kept_ids {
        manifest.push_str(&format!("{id}\n"));
    }
    std::fs::File::create(manifest_path)?.write_all(manifest.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::model::Arch;
    use crate::nnkit::rng::Rng;
    use crate::nnkit::tensor::Tensor;

    fn random_pool(n_per_class: usize, classes: u16, seed: u64) -> Pool {
        let mut rng = Rng::new(seed);
        let n = n_per_class * classes as usize;
        let mut images = Tensor::zeros(&[n, 3, 32, 32]);
        rng.fill_uniform(images.data_mut(), 0.0, 1.0);
        let labels: Vec<u16> = (0..n).map(|i| (i as u16) % classes).collect();
        let ids: Vec<u64> = (0..n as u64).collect();
        Pool {
            images,
            labels,
            ids,
        }
    }

    #[test]
    fn identity_ratios_keep_everything() {
        let model = Model::new(Arch::TinyCnn, 4);
        let pool = random_pool(4, 3, 1);
        let cfg = FilterCfg {
            r1: 0.0,
            r2: 0.0,
            ..FilterCfg::default()
        };
        let report = run_pipeline(&model, &pool, &cfg).unwrap();
        assert_eq!(report.kept_ids, pool.ids);
        assert!(report.samples.iter().all(|s| s.kept));
    }

    #[test]
    fn routing_and_counting() {
        // 40 per class at r1=r2=0.5 keeps 10 per class
        let cnn = Model::new(Arch::TinyCnn, 4);
        let pool = random_pool(40, 2, 3);
        let report = run_pipeline(&cnn, &pool, &FilterCfg::default()).unwrap();
        assert!(report.bandwidth.is_none(), "CNN routes to the BN filter");
        let kept = report.samples.iter().filter(|s| s.kept).count();
        assert_eq!(kept, 20, "10 kept per class");

        let vit = Model::new(Arch::TinyVit, 4);
        let pool = random_pool(8, 2, 5);
        let report = run_pipeline(&vit, &pool, &FilterCfg::default()).unwrap();
        assert!(report.bandwidth.is_some(), "ViT routes to the patch filter");
        for class in 0..2u16 {
            let kept = report
                .samples
                .iter()
                .filter(|s| s.class == class && s.kept)
                .count();
            assert_eq!(kept, 2, "ceil(8 * 0.5 * 0.5)");
        }
    }

    #[test]
    fn stage1_dropped_samples_have_no_stage2_score() {
        let model = Model::new(Arch::TinyCnn, 4);
        let pool = random_pool(8, 2, 7);
        let cfg = FilterCfg {
            r1: 0.5,
            r2: 0.0,
            ..FilterCfg::default()
        };
        let report = run_pipeline(&model, &pool, &cfg).unwrap();
        for s in &report.samples {
            if s.stage2.is_none() {
                assert!(!s.kept);
            }
        }
        let with_stage2 = report.samples.iter().filter(|s| s.stage2.is_some()).count();
        assert_eq!(with_stage2, 8);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let model = Model::new(Arch::TinyCnn, 4);
        let pool = random_pool(6, 3, 9);
        let a = run_pipeline(&model, &pool, &FilterCfg::default()).unwrap();
        let b = run_pipeline(&model, &pool, &FilterCfg::default()).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.kept_ids, b.kept_ids);
        assert_eq!(a.model_hash, b.model_hash);
    }

    #[test]
    fn empty_pool_is_contract_error() {
        let model = Model::new(Arch::TinyCnn, 4);
        let pool = Pool {
            images: Tensor::zeros(&[1, 3, 32, 32]),
            labels: vec![],
            ids: vec![],
        };
        assert!(matches!(
            run_pipeline(&model, &pool, &FilterCfg::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn energy_stage_rekeeps_a_prefix_of_itself() {
        // per-class lowest-k selection is idempotent on its own output
        let mut rng = Rng::new(12);
        let ids: Vec<u64> = (0..20).collect();
        let classes: Vec<u16> = (0..20).map(|i| (i % 2) as u16).collect();
        let scores: Vec<f64> = (0..20).map(|_| rng.uniform(-9.0, 0.0) as f64).collect();
        let kept = keep_lowest_per_class(&ids, &classes, &scores, 0.5);
        let sub: Vec<usize> = (0..20).filter(|&i| kept[i]).collect();
        let sub_ids: Vec<u64> = sub.iter().map(|&i| ids[i]).collect();
        let sub_classes: Vec<u16> = sub.iter().map(|&i| classes[i]).collect();
        let sub_scores: Vec<f64> = sub.iter().map(|&i| scores[i]).collect();
        let kept2 = keep_lowest_per_class(&sub_ids, &sub_classes, &sub_scores, 0.0);
        assert!(kept2.iter().all(|&k| k));
        // and with the same r, the re-kept set is the lowest prefix again
        let kept3 = keep_lowest_per_class(&sub_ids, &sub_classes, &sub_scores, 0.5);
        for c in 0..2u16 {
            let class_scores: Vec<f64> = (0..sub_ids.len())
                .filter(|&i| sub_classes[i] == c)
                .map(|i| sub_scores[i])
                .collect();
            let kept_scores: Vec<f64> = (0..sub_ids.len())
                .filter(|&i| sub_classes[i] == c && kept3[i])
                .map(|i| sub_scores[i])
                .collect();
            let max_kept = kept_scores
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let dropped_min = class_scores
                .iter()
                .filter(|v| !kept_scores.contains(v))
                .cloned()
                .fold(f64::INFINITY, f64::min);
            assert!(max_kept <= dropped_min);
        }
    }

    #[test]
    fn report_files_have_the_documented_shape() {
        let model = Model::new(Arch::TinyCnn, 4);
        let pool = random_pool(4, 2, 11);
        let report = run_pipeline(&model, &pool, &FilterCfg::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("r.csv");
        let json = dir.path().join("r.json");
        let mani = dir.path().join("r.manifest");
        write_report(&report, &csv, &json, &mani).unwrap();
        let csv_text = std::fs::read_to_string(&csv).unwrap();
        let mut lines = csv_text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "sample_id,class,energy,stage2_score,kept"
        );
        assert_eq!(csv_text.lines().count(), 1 + pool.len());
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(sidecar["r1"], 0.5);
        assert_eq!(sidecar["energy_form"], "paper");
        assert!(sidecar["model_hash"].is_string());
        let manifest = std::fs::read_to_string(&mani).unwrap();
        let listed: Vec<u64> = manifest.lines().map(|l| l.parse().unwrap()).collect();
        assert_eq!(listed, report.kept_ids);
    }
}
