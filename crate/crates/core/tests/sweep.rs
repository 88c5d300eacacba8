use std::fs;

use vlpl_core::embedding_store::synthesize;
use vlpl_core::scalar::median;
use vlpl_core::spml_dataset::split_validation;
use vlpl_core::sweep::{run_sweep, summarize, SweepData, JOURNAL_HEADER};
use vlpl_core::{AnnotationMatrix, EmbeddingMatrix, EvalSet, SweepSpec, SyntheticSpec, TrainConfig};

struct Bench {
    labels: EmbeddingMatrix<f64>,
    train: EmbeddingMatrix<f64>,
    observed: AnnotationMatrix,
    truth: AnnotationMatrix,
    val: EmbeddingMatrix<f64>,
    val_labels: AnnotationMatrix,
    test: EmbeddingMatrix<f64>,
    test_labels: AnnotationMatrix,
}

impl Bench {
    fn new(n_train: usize, n_test: usize, seed: u64) -> Self {
        let data = synthesize::<f64>(&SyntheticSpec {
            n_samples: n_train + n_test,
            n_labels: 20,
            dim: 64,
            avg_positives: 2.5,
            noise_sigma: 0.3,
            seed,
            exclusive: false,
        })
        .unwrap();
        let tr: Vec<usize> = (0..n_train).collect();
        let te: Vec<usize> = (n_train..n_train + n_test).collect();
        let full = data.ground_truth.select_rows(&tr);
        let feats = data.images.select_rows(&tr).unwrap();
        let split = split_validation(&full, 0.2, seed).unwrap();
        Bench {
            train: feats.select_rows(&split.train_indices).unwrap(),
            truth: full.select_rows(&split.train_indices),
            val: feats.select_rows(&split.val_indices).unwrap(),
            observed: split.train_annotations,
            val_labels: split.val_annotations,
            test: data.images.select_rows(&te).unwrap(),
            test_labels: data.ground_truth.select_rows(&te),
            labels: data.labels,
        }
    }

    fn data(&self) -> SweepData<'_, f64> {
        SweepData {
            label_embeddings: &self.labels,
            train_features: &self.train,
            train_observed: &self.observed,
            train_truth: Some(&self.truth),
            validation: EvalSet {
                features: &self.val,
                labels: &self.val_labels,
            },
            test: EvalSet {
                features: &self.test,
                labels: &self.test_labels,
            },
        }
    }
}

fn small_spec() -> SweepSpec {
    SweepSpec {
        taus: vec![0.01, 0.03, 0.05],
        thetas: vec![0.1, 0.3],
        deltas: vec![0.0],
        smoothing: vec![true],
        repeats: 2,
        base: TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        },
    }
}

#[test]
fn resume_recomputes_only_missing_rows() {
    let bench = Bench::new(200, 60, 1);
    let spec = small_spec();
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("results.csv");

    let full = run_sweep(&spec, &bench.data(), Some(&journal), 2).unwrap();
    assert_eq!(full.computed, 12);
    let complete = fs::read_to_string(&journal).unwrap();

    // keep the header and seven rows, plus half of the eighth
    let lines: Vec<&str> = complete.lines().collect();
    assert_eq!(lines[0], JOURNAL_HEADER);
    let mut cut = lines[..8].join("\n");
    cut.push('\n');
    cut.push_str(&lines[8][..lines[8].len() / 2]);
    fs::write(&journal, cut).unwrap();

    let resumed = run_sweep(&spec, &bench.data(), Some(&journal), 3).unwrap();
    assert_eq!((resumed.reused, resumed.computed), (7, 5));
    assert_eq!(resumed.result, full.result);
    assert_eq!(fs::read_to_string(&journal).unwrap(), complete);

    let again = run_sweep(&spec, &bench.data(), Some(&journal), 1).unwrap();
    assert_eq!((again.reused, again.computed), (12, 0));
}

#[test]
fn worker_count_does_not_change_results() {
    let bench = Bench::new(150, 50, 2);
    let spec = small_spec();
    let one = run_sweep(&spec, &bench.data(), None, 1).unwrap();
    let four = run_sweep(&spec, &bench.data(), None, 4).unwrap();
    assert_eq!(one.result, four.result);
    let summary = summarize(&one.result).unwrap();
    assert_eq!(summary.curves.len(), 2);
    assert!(summary.curves.iter().all(|c| c.points.len() == 3));
}

#[test]
fn positives_only_not_worse_than_thirty_percent_negatives() {
    let bench = Bench::new(2000, 500, 0);
    let spec = SweepSpec {
        taus: vec![0.03],
        thetas: vec![0.3],
        deltas: vec![0.0, 30.0],
        smoothing: vec![true],
        repeats: 5,
        base: TrainConfig::default(),
    };
    let out = run_sweep(&spec, &bench.data(), None, 0).unwrap();
    assert!(out.result.failures.is_empty());
    let at = |d: f64| {
        let v: Vec<f64> = out.result.rows.iter().filter(|r| r.delta == d).map(|r| r.test_map).collect();
        median(&v).unwrap()
    };
    let (zero, thirty) = (at(0.0), at(30.0));
    assert!(zero >= thirty, "median test mAP: delta 0 {zero:.2}, delta 30 {thirty:.2}");
}
