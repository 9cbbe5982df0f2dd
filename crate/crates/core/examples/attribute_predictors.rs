//! Trains the internal and external predictors for both attributes on the
//! synthetic labelled splits, reports their rank correlation with the hidden
//! labels, and shows how lambda reshapes the normalised score.
//!
//! cargo run --release --example attribute_predictors -- [steps]

use bae::attribute::{normalize_score, AttributeMode, NormalizationSpec, Scorer};
use bae::harness::config::ExperimentConfig;
use bae::harness::data::generate_corpora;
use bae::harness::pipeline::train_predictors;

fn main() -> bae::Result<()> {
    let steps = std::env::args().nth(1).and_then(|a| a.parse().ok());
    for mode in [AttributeMode::Regression, AttributeMode::Binary] {
        let mut cfg = ExperimentConfig::quick(mode);
        cfg.data.contents = 1;
        cfg.data.styles = 1;
        cfg.data.test = 1;
        if let Some(s) = steps {
            cfg.predictor.steps = s;
        }
        let corpora = generate_corpora(&cfg)?;
        let start = std::time::Instant::now();
        let (internal, _, s) = train_predictors(&cfg, &corpora, mode)?;
        let fmt = |r: Option<f64>| r.map_or("n/a".into(), |v| format!("{v:.3}"));
        println!(
            "{mode:?}: validation Spearman internal {}, external {} ({:.0}s)",
            fmt(s.internal_spearman),
            fmt(s.external_spearman),
            start.elapsed().as_secs_f64()
        );

        let raw: Vec<f64> = corpora
            .validation
            .iter()
            .take(5)
            .map(|i| internal.score(&i.image))
            .collect::<bae::Result<_>>()?;
        print!("  raw scores        ");
        raw.iter().for_each(|r| print!(" {r:>9.4}"));
        println!();
        for lambda in [1.0, 10.0, 100.0, 1000.0] {
            let spec = match mode {
                AttributeMode::Regression => NormalizationSpec::sigmoid_power(lambda),
                AttributeMode::Binary => NormalizationSpec::power(lambda),
            };
            print!("  lambda {lambda:>6}     ");
            for &r in &raw {
                print!(" {:>9.2e}", normalize_score(r, &spec)?);
            }
            println!();
        }
    }
    Ok(())
}
