//! The whole experiment in memory on a small synthetic problem: train the
//! codec, predictors and style generator, rank stylizations of a few test
//! images with the internal predictor, then score the ranked candidates with
//! the external one and print the top-n gains per method.
//!
//! cargo run --release --example enhance_pipeline -- [regression|binary] [test_images] [out_dir]

use std::path::PathBuf;

use bae::attribute::AttributeMode;
use bae::harness::config::ExperimentConfig;
use bae::harness::data::generate_corpora;
use bae::harness::enhance::{evaluate_all, rank_all, EnhanceSettings, Method, RunInfo, RunReport};
use bae::harness::pipeline::train_all;
use bae::harness::report::{emit_report, summarize};

fn main() -> bae::Result<()> {
    let mut args = std::env::args().skip(1);
    let mode = match args.next().as_deref() {
        Some("binary") => AttributeMode::Binary,
        _ => AttributeMode::Regression,
    };
    let test = args.next().and_then(|a| a.parse().ok()).unwrap_or(8);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/enhance_pipeline".into()));

    let mut cfg = ExperimentConfig::quick(mode);
    cfg.data.test = test;
    cfg.chain.samples = 50;
    let corpora = generate_corpora(&cfg)?;

    let start = std::time::Instant::now();
    let models = train_all(&cfg, &corpora)?;
    println!("models trained in {:.0}s", start.elapsed().as_secs_f64());

    let settings = EnhanceSettings::from_config(&cfg, &Method::ALL);
    let start = std::time::Instant::now();
    let rankings = rank_all(&corpora.test, models.ranking_view(), &settings)?;
    println!("{} images ranked in {:.0}s", rankings.len(), start.elapsed().as_secs_f64());

    let images = evaluate_all(&corpora.test, &rankings, &models.external)?;
    let report = RunReport {
        info: RunInfo::from_config(&cfg),
        images,
    };
    let summary = summarize(&report);
    for row in &summary.aggregate {
        println!("{:>8} top-{:<2} mean external gain {:+.4}", row.method.name(), row.top_n, row.mean_delta);
    }
    for m in &summary.methods {
        if let Some(rate) = m.acceptance_rate {
            println!("{:>8} acceptance rate {rate:.2}", m.method.name());
        }
    }
    emit_report(&report, &out)?;
    println!("tables and plots in {}", out.display());
    Ok(())
}
