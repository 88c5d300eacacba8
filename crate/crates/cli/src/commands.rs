//! Subcommand implementations. Every output lands under `paths.out_dir`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use vlpl_core::embedding_store::{load_embeddings, save_embeddings, synthesize, StoreError};
use vlpl_core::metrics::{write_report_csv, ReportFile};
use vlpl_core::probe::{evaluate, load_checkpoint, save_checkpoint, train, write_history_csv, CheckpointMeta};
use vlpl_core::pseudo_label::{pseudo_label_dataset, pseudo_label_quality, write_pseudo_labels, PseudoLabelQuality};
use vlpl_core::spml_dataset::{read_annotations, split_validation, write_annotations, SplitRecord};
use vlpl_core::sweep::{run_sweep, summarize, write_curve_files, SweepData};
use vlpl_core::{
    AnnotationMatrix, EmbeddingKind, EmbeddingMatrixF64, EvalSet, LossVariant, Manifest, PseudoLabelConfig,
    SyntheticSpec,
};

use crate::config::{
    ConfigError, ExperimentConfig, GROUND_TRUTH_FILE, IMAGES_FILE, LABELS_FILE, TEST_GROUND_TRUTH_FILE,
    TEST_IMAGES_FILE,
};

pub const SPLIT_FILE: &str = "split.json";
pub const OBSERVED_FILE: &str = "observed.jsonl";
pub const PSEUDO_FILE: &str = "pseudo_labels.jsonl";
pub const MODEL_FILE: &str = "model.vlmdl";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const PER_CLASS_FILE: &str = "per_class_ap.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";

pub const PROMPT_TEMPLATE: &str = "a photo of a {}.";

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    let dir = cfg.paths.out_dir.as_path();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn sample_ids(offset: usize, n: usize) -> Vec<String> {
    (offset..offset + n).map(|i| format!("img_{i:06}")).collect()
}

pub fn label_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("label_{i:02}")).collect()
}

/// Arguments of `synth`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub spec: SyntheticSpec,
    /// Extra rows written as a separate test split.
    pub test_samples: usize,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub files: Vec<PathBuf>,
    pub avg_positives: f64,
}

pub fn cmd_synth(opts: &SynthOptions, out_dir: &Path) -> Result<SynthOutput> {
    let n_train = opts.spec.n_samples;
    let spec = SyntheticSpec {
        n_samples: n_train + opts.test_samples,
        ..opts.spec.clone()
    };
    let data = synthesize::<f64>(&spec).map_err(|e| match e {
        StoreError::InvalidSpec(_) => config_err(e.to_string()),
        other => other.into(),
    })?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let names = label_names(spec.n_labels);
    let source = format!("synthetic seed={} noise={}", spec.seed, spec.noise_sigma);
    let manifest = Manifest::new(names, PROMPT_TEMPLATE, &source, spec.dim);
    let mut files = Vec::new();
    let save = |m: &EmbeddingMatrixF64, name: &str| -> Result<PathBuf> {
        let path = out_dir.join(name);
        save_embeddings(m, &manifest, &path).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    };
    files.push(save(&data.labels, LABELS_FILE)?);

    let train_rows: Vec<usize> = (0..n_train).collect();
    files.push(save(&data.images.select_rows(&train_rows)?, IMAGES_FILE)?);
    let train_truth = data.ground_truth.select_rows(&train_rows);
    let gt = out_dir.join(GROUND_TRUTH_FILE);
    write_annotations(&gt, &sample_ids(0, n_train), &train_truth)?;
    files.push(gt);

    if opts.test_samples > 0 {
        let test_rows: Vec<usize> = (n_train..spec.n_samples).collect();
        files.push(save(&data.images.select_rows(&test_rows)?, TEST_IMAGES_FILE)?);
        let path = out_dir.join(TEST_GROUND_TRUTH_FILE);
        write_annotations(
            &path,
            &sample_ids(n_train, opts.test_samples),
            &data.ground_truth.select_rows(&test_rows),
        )?;
        files.push(path);
    }
    let total: usize = train_truth.positive_lists().iter().map(Vec::len).sum();
    Ok(SynthOutput {
        files,
        avg_positives: total as f64 / n_train as f64,
    })
}

fn load_images(path: &Path, n_labels: usize) -> Result<EmbeddingMatrixF64> {
    let (m, manifest) = load_embeddings::<f64>(path).with_context(|| format!("loading {}", path.display()))?;
    if manifest.n_labels() != n_labels {
        bail!(
            "{}: manifest lists {} labels, label embeddings have {}",
            path.display(),
            manifest.n_labels(),
            n_labels
        );
    }
    Ok(m.normalize()?.with_kind(EmbeddingKind::Image))
}

fn load_truth(path: &Path, n_labels: usize, rows: usize) -> Result<(Vec<String>, AnnotationMatrix)> {
    let (ids, ann) = read_annotations(path, n_labels).with_context(|| format!("reading {}", path.display()))?;
    if ann.n_samples() != rows {
        bail!("{}: {} annotation rows for {rows} embeddings", path.display(), ann.n_samples());
    }
    Ok((ids, ann))
}

/// Loaded embeddings and labels, split into the training pool (single
/// positive), the validation hold-out and the optional test split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub label_names: Vec<String>,
    pub labels: EmbeddingMatrixF64,
    pub train_ids: Vec<String>,
    pub train_features: EmbeddingMatrixF64,
    pub train_observed: AnnotationMatrix,
    pub train_truth: AnnotationMatrix,
    pub val_features: EmbeddingMatrixF64,
    pub val_labels: AnnotationMatrix,
    pub test: Option<(EmbeddingMatrixF64, AnnotationMatrix)>,
    pub split: SplitRecord,
}

impl Prepared {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let paths = &cfg.paths;
        let labels_path = paths.labels();
        let (labels, manifest) =
            load_embeddings::<f64>(&labels_path).with_context(|| format!("loading {}", labels_path.display()))?;
        if labels.rows() != manifest.n_labels() {
            bail!(
                "{}: {} rows but {} label names",
                labels_path.display(),
                labels.rows(),
                manifest.n_labels()
            );
        }
        let labels = labels.normalize()?.with_kind(EmbeddingKind::Label);
        let l = labels.rows();

        let images = load_images(&paths.images(), l)?;
        if images.dim() != labels.dim() {
            bail!("image dim {} differs from label dim {}", images.dim(), labels.dim());
        }
        let (ids, full) = load_truth(&paths.ground_truth(), l, images.rows())?;
        let split = split_validation(&full, cfg.dataset.fraction, cfg.dataset.seed)?;

        let test = match paths.test() {
            Some((img, gt)) => {
                let m = load_images(&img, l)?;
                if m.dim() != labels.dim() {
                    bail!("test image dim {} differs from label dim {}", m.dim(), labels.dim());
                }
                let (_, ann) = load_truth(&gt, l, m.rows())?;
                Some((m, ann))
            }
            None => None,
        };
        Ok(Prepared {
            label_names: manifest.label_names,
            train_ids: split.train_indices.iter().map(|&i| ids[i].clone()).collect(),
            train_features: images.select_rows(&split.train_indices)?,
            train_truth: full.select_rows(&split.train_indices),
            val_features: images.select_rows(&split.val_indices)?,
            split: SplitRecord {
                train_indices: split.train_indices,
                val_indices: split.val_indices,
                seed: cfg.dataset.seed,
                fraction: cfg.dataset.fraction,
            },
            train_observed: split.train_annotations,
            val_labels: split.val_annotations,
            labels,
            test,
        })
    }

    pub fn validation(&self) -> EvalSet<'_, f64> {
        EvalSet {
            features: &self.val_features,
            labels: &self.val_labels,
        }
    }

    pub fn test_set(&self) -> Option<EvalSet<'_, f64>> {
        self.test.as_ref().map(|(features, labels)| EvalSet { features, labels })
    }

    /// Merged training annotations for `pseudo`, with their quality.
    pub fn pseudo_label(&self, pseudo: &PseudoLabelConfig) -> Result<(AnnotationMatrix, Vec<Vec<f64>>, PseudoLabelQuality)> {
        let (merged, probs) = pseudo_label_dataset(&self.train_features, &self.labels, &self.train_observed, pseudo)?;
        let quality = pseudo_label_quality(&merged, &self.train_truth)?;
        Ok((merged, probs, quality))
    }
}

#[derive(Debug, Clone)]
pub struct SimulateOutput {
    pub n_train: usize,
    pub n_val: usize,
    pub files: Vec<PathBuf>,
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<SimulateOutput> {
    let prep = Prepared::load(cfg)?;
    let dir = ensure_out_dir(cfg)?;
    let split_path = dir.join(SPLIT_FILE);
    fs::write(&split_path, serde_json::to_vec_pretty(&prep.split)?)?;
    let observed_path = dir.join(OBSERVED_FILE);
    write_annotations(&observed_path, &prep.train_ids, &prep.train_observed)?;
    Ok(SimulateOutput {
        n_train: prep.split.train_indices.len(),
        n_val: prep.split.val_indices.len(),
        files: vec![split_path, observed_path],
    })
}

#[derive(Debug, Clone)]
pub struct PseudoLabelOutput {
    pub quality: PseudoLabelQuality,
    pub file: PathBuf,
}

pub fn cmd_pseudolabel(cfg: &ExperimentConfig, include_probs: bool) -> Result<PseudoLabelOutput> {
    let prep = Prepared::load(cfg)?;
    let (merged, probs, quality) = prep.pseudo_label(&cfg.pseudo)?;
    let dir = ensure_out_dir(cfg)?;
    let file = dir.join(PSEUDO_FILE);
    write_pseudo_labels(&file, &prep.train_ids, &merged, include_probs.then_some(&probs[..]))?;
    Ok(PseudoLabelOutput { quality, file })
}

/// `report.json` written by `train`. mAP values on the 0–100 scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub loss: LossVariant,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_map: f64,
    /// Test mAP when a test split exists, otherwise validation mAP.
    pub map: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<ReportFile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_labels: Option<PseudoLabelQuality>,
}

fn uses_pseudo_labels(variant: LossVariant) -> bool {
    matches!(variant, LossVariant::VlplFull | LossVariant::VlplPositiveOnly)
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let prep = Prepared::load(cfg)?;
    let tcfg = cfg.train_config();
    let (annotations, quality) = if uses_pseudo_labels(tcfg.loss.variant) {
        let (merged, _, q) = prep.pseudo_label(&cfg.pseudo)?;
        (merged, Some(q))
    } else {
        (prep.train_observed.clone(), None)
    };
    let outcome = train(&prep.train_features, &annotations, Some(prep.validation()), &tcfg)?;
    let val = evaluate(&outcome.model, prep.validation())?;
    let test = prep.test_set().map(|set| evaluate(&outcome.model, set)).transpose()?;

    let dir = ensure_out_dir(cfg)?;
    write_history_csv(&dir.join(HISTORY_FILE), &outcome.history)?;
    let meta = CheckpointMeta {
        config: tcfg.clone(),
        best_epoch: outcome.best_epoch,
        best_val_map: Some(val.map),
    };
    save_checkpoint(&dir.join(MODEL_FILE), &outcome.model, &meta)?;
    let report = TrainReport {
        loss: tcfg.loss.variant,
        seed: tcfg.seed,
        best_epoch: outcome.best_epoch,
        val_map: val.map_pct(),
        map: test.as_ref().unwrap_or(&val).map_pct(),
        test: test.as_ref().map(ReportFile::from),
        pseudo_labels: quality,
    };
    fs::write(dir.join(REPORT_FILE), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub split: &'static str,
    pub report: ReportFile,
    pub files: Vec<PathBuf>,
}

/// Scores a checkpoint on the test split (validation split if there is none).
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>, per_class: bool) -> Result<EvalOutput> {
    let prep = Prepared::load(cfg)?;
    let default_ckpt = cfg.paths.out_dir.join(MODEL_FILE);
    let ckpt = checkpoint.unwrap_or(&default_ckpt);
    let (model, _) = load_checkpoint::<f64>(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let (split, set) = match prep.test_set() {
        Some(set) => ("test", set),
        None => ("validation", prep.validation()),
    };
    let report = evaluate(&model, set)?;
    let dir = ensure_out_dir(cfg)?;
    let json = dir.join(EVAL_REPORT_FILE);
    let file = ReportFile::from(&report);
    fs::write(&json, serde_json::to_vec_pretty(&file)?)?;
    let mut files = vec![json];
    if per_class {
        let csv = dir.join(PER_CLASS_FILE);
        write_report_csv(&csv, &report, &prep.label_names)?;
        files.push(csv);
    }
    Ok(EvalOutput {
        split,
        report: file,
        files,
    })
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub computed: usize,
    pub reused: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub files: Vec<PathBuf>,
    pub best: vlpl_core::sweep::CellSummary,
}

/// `workers = 0` uses one worker per core.
pub fn cmd_sweep(cfg: &ExperimentConfig, workers: usize) -> Result<SweepReport> {
    let spec = cfg
        .sweep_spec()
        .ok_or_else(|| config_err("sweep: config has no [sweep] section"))?;
    if !uses_pseudo_labels(spec.base.loss.variant) {
        return Err(config_err(format!(
            "sweep: loss variant {} does not use pseudo-labels",
            spec.base.loss.variant.name()
        )));
    }
    let prep = Prepared::load(cfg)?;
    let test = prep
        .test_set()
        .ok_or_else(|| config_err("sweep: no test split configured or found in out_dir"))?;
    let data = SweepData {
        label_embeddings: &prep.labels,
        train_features: &prep.train_features,
        train_observed: &prep.train_observed,
        train_truth: Some(&prep.train_truth),
        validation: prep.validation(),
        test,
    };
    let dir = ensure_out_dir(cfg)?;
    let journal = dir.join(RESULTS_FILE);
    let outcome = run_sweep(&spec, &data, Some(&journal), workers)?;
    for (cell, msg) in &outcome.result.failures {
        log::warn!("cell {cell:?} failed: {msg}");
    }
    if outcome.result.rows.is_empty() {
        bail!("every sweep cell failed");
    }
    let summary = summarize(&outcome.result)?;
    let summary_path = dir.join(SUMMARY_FILE);
    fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?)?;
    let mut files = vec![journal, summary_path];
    files.extend(write_curve_files(dir, &summary)?);
    Ok(SweepReport {
        computed: outcome.computed,
        reused: outcome.reused,
        succeeded: outcome.result.rows.len(),
        failed: outcome.result.failures.len(),
        files,
        best: summary.best_cell,
    })
}
