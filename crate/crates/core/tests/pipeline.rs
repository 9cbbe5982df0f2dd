//! Data generation, enhancement plumbing and report tables on small inputs.

mod common;

use std::sync::atomic::{AtomicUsize, Ordering};

use bae::attribute::{read_labels, AttributeMode, Scorer};
use bae::harness::config::ExperimentConfig;
use bae::harness::data::{gen_synthetic_data, generate_corpora, label, load_corpora, Item};
use bae::harness::enhance::{
    enhance_image, EnhanceSettings, ImageReport, Method, MethodRun, Phase, Ranked, RankingModels, RunInfo, RunReport,
};
use bae::harness::report::{aggregate_rows, emit_report};
use bae::harness::synth::{hidden_memorability, hidden_scariness};
use bae::tensor::Tensor;
use bae::Error;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(dir: &std::path::Path, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::quick(AttributeMode::Regression);
    cfg.master_seed = seed;
    cfg.out_dir = dir.to_path_buf();
    cfg.data.contents = 6;
    cfg.data.styles = 5;
    cfg.data.labeled_per_split = 8;
    cfg.data.validation = 4;
    cfg.data.test = 3;
    cfg
}

#[test]
fn corpora_depend_only_on_the_master_seed() {
    let dir = std::path::Path::new("unused");
    let a = generate_corpora(&small(dir, 1)).unwrap();
    assert_eq!(a, generate_corpora(&small(dir, 1)).unwrap());
    let b = generate_corpora(&small(dir, 2)).unwrap();
    assert_ne!(a.test[0].image, b.test[0].image);
    assert_ne!(a.styles[0].image, b.styles[0].image);
}

#[test]
fn written_data_reloads_exactly_and_labels_recompute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 5);
    let made = gen_synthetic_data(&cfg, false).unwrap();
    let loaded = load_corpora(&cfg).unwrap();
    assert_eq!(made, loaded);

    let everything: Vec<&Item> = loaded
        .internal
        .iter()
        .chain(&loaded.external)
        .chain(&loaded.validation)
        .chain(&loaded.test)
        .collect();
    for (file, hidden) in [
        ("labels_regression.csv", hidden_memorability as fn(&Tensor) -> f64),
        ("labels_binary.csv", hidden_scariness),
    ] {
        let records = read_labels(&cfg.data_dir().join(file)).unwrap();
        assert_eq!(records.len(), everything.len());
        for (rec, item) in records.iter().zip(&everything) {
            assert_eq!(rec.id, item.id);
            assert_eq!(rec.value, hidden(&item.image));
        }
    }
    for item in &loaded.validation {
        assert!(matches!(label(&item.image, AttributeMode::Binary), v if v == 0.0 || v == 1.0));
    }
    let ids: std::collections::BTreeSet<&str> = loaded.internal.iter().map(|i| i.id.as_str()).collect();
    assert!(loaded.external.iter().all(|i| !ids.contains(i.id.as_str())));

    assert!(matches!(gen_synthetic_data(&cfg, false), Err(Error::OutputExists(_))));
    assert_eq!(gen_synthetic_data(&cfg, true).unwrap(), made);
}

struct CountingScorer<'a> {
    inner: &'a dyn Scorer,
    calls: AtomicUsize,
}

impl Scorer for CountingScorer<'_> {
    fn score(&self, image: &Tensor) -> bae::Result<f64> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.score(image)
    }
}

#[test]
fn ranking_never_consults_the_external_predictor() {
    let m = RandomModels::new(3, AttributeMode::Regression);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let styles: Vec<_> = (0..12)
        .map(|_| bae::nets::encode_style(&uniform(&[3, 16, 16], 0.0, 1.0, &mut rng), &m.stylizer.codec().encoder).unwrap())
        .collect();
    let models = RankingModels {
        stylizer: &m.stylizer,
        styles: &styles,
        generator: &m.generator,
        internal: &m.internal,
    };
    let mut cfg = ExperimentConfig::quick(AttributeMode::Regression);
    cfg.chain.samples = 12;
    cfg.chain.burn_in = 5;
    let settings = EnhanceSettings::from_config(&cfg, &Method::ALL);
    let external = CountingScorer {
        inner: &m.external,
        calls: AtomicUsize::new(0),
    };
    let item = Item {
        id: "probe".into(),
        seed: 0,
        image: uniform(&[3, 16, 16], 0.0, 1.0, &mut rng),
    };
    let mut at = vec![];
    let (ranking, report) = enhance_image(0, &item, models, &settings, &external, &mut |p: Phase| {
        at.push((p, external.calls.load(Ordering::SeqCst)))
    })
    .unwrap();
    assert_eq!(at[0], (Phase::Ranked, 0));
    assert_eq!(at[1].0, Phase::Evaluated);
    assert!(at[1].1 > 0);
    assert_eq!(ranking.methods.len(), 4);

    let original = m.external.score(&item.image).unwrap();
    assert_eq!(report.original_external, original);
    for run in &report.runs {
        for r in &run.ranked {
            assert_eq!(r.delta, r.external - original);
        }
    }
}

fn synthetic_report(seed: u64) -> RunReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..4)
        .map(|i| ImageReport {
            id: format!("test_{i:03}"),
            original_external: rng.random_range(0.0..1.0),
            runs: [Method::Baseline, Method::Bae]
                .into_iter()
                .map(|method| {
                    let mut internal: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
                    internal.sort_by(|a, b| b.total_cmp(a));
                    MethodRun {
                        method,
                        candidates: 12,
                        proposals: 30,
                        accepted: 12,
                        ranked: internal
                            .iter()
                            .enumerate()
                            .map(|(rank, &s)| {
                                let delta = rng.random_range(-0.5..0.5);
                                Ranked {
                                    rank,
                                    sample: rank,
                                    internal: s,
                                    external: delta,
                                    delta,
                                    alpha: 0.5,
                                }
                            })
                            .collect(),
                    }
                })
                .collect(),
        })
        .collect();
    RunReport {
        info: RunInfo::from_config(&ExperimentConfig::default()),
        images,
    }
}

#[test]
fn aggregate_rows_match_an_independent_pass() {
    let report = synthetic_report(8);
    let rows = aggregate_rows(&report);
    assert_eq!(rows.len(), 2 * report.info.top_n.len());
    for row in rows {
        let per_image: Vec<f64> = report
            .images
            .iter()
            .map(|img| {
                let run = img.runs.iter().find(|r| r.method == row.method).unwrap();
                run.ranked.iter().take(row.top_n).map(|r| r.delta).sum::<f64>() / row.top_n as f64
            })
            .collect();
        let expect = per_image.iter().sum::<f64>() / per_image.len() as f64;
        assert!((row.mean_delta - expect).abs() < 1e-12);
        assert_eq!(row.images, report.images.len());
    }
}

#[test]
fn emitted_reports_are_byte_identical() {
    let report = synthetic_report(9);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_report(&report, a.path()).unwrap();
    emit_report(&report, b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 5);
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap());
    }

    let mut rdr = csv::Reader::from_path(a.path().join("aggregate.csv")).unwrap();
    let parsed: Vec<f64> = rdr.records().map(|r| r.unwrap()[3].parse().unwrap()).collect();
    let rows = aggregate_rows(&report);
    assert_eq!(parsed, rows.iter().map(|r| r.mean_delta).collect::<Vec<_>>());
}
