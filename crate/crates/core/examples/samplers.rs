//! Runs the three chains on a standard 8-D Gaussian and on a correlated 2-D
//! Gaussian and prints the recovered moments next to the exact ones.
//!
//! cargo run --release --example samplers -- [samples]

use bae::sampler::diagnostics::{batch_means_se, covariance, mean, variance};
use bae::sampler::{run_chain, ChainConfig, CountMode, Energy, GaussianEnergy, SamplerKind};

fn config(sampler: SamplerKind, dim: usize, samples: usize) -> ChainConfig {
    ChainConfig {
        sampler,
        samples,
        count: CountMode::Proposals,
        tau: 0.45 / (dim as f64).sqrt(),
        proposal_std: 2.4 / (dim as f64).sqrt(),
        leapfrog_step: 0.25,
        leapfrog_steps: 5,
        burn_in: 1000,
        seed: 7,
        ..Default::default()
    }
}

fn report<E: Energy>(name: &str, energy: &E, samples: usize, rho: f64) -> bae::Result<()> {
    for sampler in [SamplerKind::MetropolisHastings, SamplerKind::Langevin, SamplerKind::Hamiltonian] {
        let start = std::time::Instant::now();
        let res = run_chain(energy, &config(sampler, energy.dim(), samples))?;
        let x0 = res.coordinate(0);
        let x1 = res.coordinate(1);
        println!(
            "{name:>9} {sampler:>8}: accept {:.2}  mean0 {:+.3} (se {:.3})  var0 {:.3}  cov01 {:+.3} (exact {rho:+.1})  {:.1}s",
            res.acceptance_rate(),
            mean(&x0),
            batch_means_se(&x0, 50),
            variance(&x0),
            covariance(&x0, &x1),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn main() -> bae::Result<()> {
    let samples = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(50_000);
    report("N(0, I8)", &GaussianEnergy::standard(8), samples, 0.0)?;
    report("rho=0.8", &GaussianEnergy::correlated_2d(0.8), samples, 0.8)?;
    Ok(())
}
