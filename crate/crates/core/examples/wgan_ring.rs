//! Trains a WGAN-GP on eight Gaussians arranged on a circle and reports how
//! many of them the generator reaches.
//!
//! cargo run --release --example wgan_ring -- [iterations] [seed]

use bae::stylegan::{covered_modes, ring_samples, sample_points, train_wgan_gp_points, GanConfig, RingSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bae::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().and_then(|a| a.parse().ok()).unwrap_or(1500);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);

    let ring = RingSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = ring_samples(&ring, 4096, &mut rng);
    let cfg = GanConfig {
        batch: 64,
        iterations,
        z_dim: 2,
        generator_hidden: vec![128, 128],
        critic_hidden: vec![128, 128],
        lr_generator: 1e-3,
        lr_critic: 1e-3,
        seed,
        ..Default::default()
    };
    let start = std::time::Instant::now();
    let (gen, _critic, report) = train_wgan_gp_points(&data, &cfg)?;
    let samples = sample_points(&gen, 10_000, seed ^ 0x5eed)?;
    let covered = covered_modes(&samples, &ring);
    let w = report.wasserstein.iter().rev().take(50).sum::<f64>() / 50.0;
    println!(
        "{iterations} iterations in {:.1}s, wasserstein estimate {w:.4}, modes covered {covered}/{}",
        start.elapsed().as_secs_f64(),
        ring.modes
    );
    Ok(())
}
