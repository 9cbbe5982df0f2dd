//! Trains a small encoder/decoder on synthetic scenes, then stylizes one test
//! image with a few style images at several strengths.
//!
//! Writes `adain_transfer.png` into the output directory: one row per style,
//! columns are the content, the style, then alpha = 0, 0.25, 0.5, 0.75, 1.
//!
//! cargo run --release --example adain_transfer -- [out_dir] [steps]

use std::path::PathBuf;

use bae::attribute::AttributeMode;
use bae::harness::config::ExperimentConfig;
use bae::harness::data::generate_corpora;
use bae::harness::imageio::save_png;
use bae::harness::pipeline::{psnr, train_codec};
use bae::nets::encode_style;
use bae::styletx::{StyleSource, Stylizer};
use bae::tensor::Tensor;

const ALPHAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Tiles equally sized `[3,H,W]` images into a grid, row-major.
fn grid(rows: &[Vec<Tensor>]) -> Tensor {
    let s = rows[0][0].shape().to_vec();
    let (h, w) = (s[1], s[2]);
    let cols = rows[0].len();
    let (gh, gw) = (rows.len() * h, cols * w);
    let mut data = vec![0.0; 3 * gh * gw];
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            for ch in 0..3 {
                for y in 0..h {
                    let dst = ch * gh * gw + (r * h + y) * gw + c * w;
                    data[dst..dst + w].copy_from_slice(&img.data()[ch * h * w + y * w..][..w]);
                }
            }
        }
    }
    Tensor::new(&[3, gh, gw], data).unwrap()
}

fn main() -> bae::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/adain_transfer".into()));
    let steps = args.next().and_then(|a| a.parse().ok()).unwrap_or(800);

    let mut cfg = ExperimentConfig::quick(AttributeMode::Regression);
    cfg.data.contents = 120;
    cfg.data.styles = 120;
    cfg.data.labeled_per_split = 10;
    cfg.data.validation = 10;
    cfg.data.test = 4;
    cfg.codec.autoencoder.steps = steps;
    cfg.codec.transfer.steps = steps;
    let corpora = generate_corpora(&cfg)?;

    let start = std::time::Instant::now();
    let (codec, summary) = train_codec(&cfg, &corpora)?;
    println!(
        "codec trained in {:.1}s: reconstruction {:.4} -> {:.4}, transfer {:.4} -> {:.4}",
        start.elapsed().as_secs_f64(),
        summary.autoencoder_initial,
        summary.autoencoder_final,
        summary.transfer_initial,
        summary.transfer_final
    );

    let stylizer = Stylizer::new(codec);
    let content = stylizer.content(&corpora.test[0].image)?;
    println!("reconstruction PSNR {:.2} dB", psnr(&content.image, &stylizer.reconstruct(&content)?));

    let mut rows = vec![];
    for item in corpora.styles.iter().take(4) {
        let style = encode_style(&item.image, &stylizer.codec().encoder)?;
        let t = stylizer.target_features(&content, &style, None)?;
        let got = feature_stats(&t);
        let err = got
            .iter()
            .zip(style.mu().data().iter().zip(style.sigma().data()))
            .map(|((m, s), (em, es))| (m - em).abs().max((s - es).abs()))
            .fold(0.0, f64::max);
        println!("{}: stylized feature statistics match the style within {err:.1e}", item.id);

        let mut row = vec![content.image.clone(), item.image.clone()];
        for a in ALPHAS {
            row.push(stylizer.stylize_alpha(&content, StyleSource::Vector(&style), a)?);
        }
        rows.push(row);
    }
    std::fs::create_dir_all(&out).map_err(|source| bae::Error::Io { path: out.clone(), source })?;
    let path = out.join("adain_transfer.png");
    save_png(&path, &grid(&rows).map(|v| v.clamp(0.0, 1.0)))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Per-channel mean and standard deviation of a `[C,H,W]` feature map, with
/// the same variance epsilon as the stylizer.
fn feature_stats(t: &Tensor) -> Vec<(f64, f64)> {
    let hw = t.shape()[1] * t.shape()[2];
    t.data()
        .chunks(hw)
        .map(|c| {
            let m = c.iter().sum::<f64>() / hw as f64;
            let v = c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / hw as f64;
            (m, (v + bae::tensor::EPS_STAT).sqrt())
        })
        .collect()
}
