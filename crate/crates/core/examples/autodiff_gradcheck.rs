//! Differentiates a small conv + MLP network with the tape and compares every
//! input and weight gradient against central finite differences.
//!
//! cargo run --release --example autodiff_gradcheck -- [seed]

use bae::tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn loss(g: &mut Graph, v: &[Var]) -> bae::Result<Var> {
    let h = g.conv2d(v[0], v[1])?;
    let h = g.tanh(h);
    let h = g.avg_pool2(h)?;
    let n = g.shape(h)[0];
    let h = g.reshape(h, &[n, 36])?;
    let h = g.matmul(h, v[2])?;
    let h = g.add(h, v[3])?;
    let h = g.sigmoid(h);
    let sq = g.mul(h, h)?;
    Ok(g.mean(sq))
}

fn value(inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = loss(&mut g, &vars).unwrap();
    g.value(out).item().unwrap()
}

fn main() -> bae::Result<()> {
    let seed = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        Tensor::uniform(&[2, 3, 6, 6], 0.0, 1.0, &mut rng),
        Tensor::randn(&[4, 3, 3, 3], &mut rng).map(|x| 0.3 * x),
        Tensor::randn(&[36, 5], &mut rng).map(|x| 0.3 * x),
        Tensor::randn(&[5], &mut rng).map(|x| 0.1 * x),
    ];
    let names = ["image", "conv kernel", "dense weight", "dense bias"];

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = loss(&mut g, &vars)?;
    g.backward(out)?;
    println!("loss {:.6}", g.value(out).item()?);

    let mut work = inputs.clone();
    for (k, name) in names.iter().enumerate() {
        let analytic = g.grad(vars[k]);
        let mut worst = 0.0f64;
        for i in 0..inputs[k].numel() {
            let x = inputs[k].data()[i];
            work[k].data_mut()[i] = x + H;
            let up = value(&work);
            work[k].data_mut()[i] = x - H;
            let down = value(&work);
            work[k].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
        }
        println!("{name:>12} {:?}: worst relative error {worst:.2e}", inputs[k].shape());
    }
    Ok(())
}
