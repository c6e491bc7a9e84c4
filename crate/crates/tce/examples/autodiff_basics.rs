//! The differentiation core on its own: builds a least-squares fit with the
//! graph ops, checks the analytic gradient against finite differences, and
//! descends with ADAM.
//!
//!     cargo run --example autodiff_basics

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tce::gradcheck::{grad_check, GradCheckOptions};
use tce::graph::Graph;
use tce::params::{AdamConfig, ParamStore};
use tce::tensor::Tensor;

fn main() -> tce::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let truth = Tensor::uniform(&[4, 3], 1.0, &mut rng);
    let inputs = Tensor::uniform(&[3, 16], 1.0, &mut rng);
    let mut g = Graph::new();
    let t = g.constant(truth.clone())?;
    let x = g.constant(inputs.clone())?;
    let product = g.matmul(t, x)?;
    let targets = g.value(product).clone();

    let mut store = ParamStore::new();
    store.insert("weights", Tensor::uniform(&[4, 3], 0.5, &mut rng))?;

    let build = move |g: &mut Graph, s: &ParamStore| {
        let w = g.param(s, "weights")?;
        let x = g.constant(inputs.clone())?;
        let y = g.constant(targets.clone())?;
        let pred = g.matmul(w, x)?;
        let residual = g.sub(pred, y)?;
        let squared = g.mul(residual, residual)?;
        g.mean_all(squared)
    };

    let report = grad_check(&store, build.clone(), &GradCheckOptions::default())?;
    println!("gradient check: {report}");

    let adam = AdamConfig { lr: 0.05, ..Default::default() };
    for step in 0..200 {
        let mut g = Graph::new();
        let loss = build(&mut g, &store)?;
        if step % 40 == 0 {
            println!("step {step:3}  loss {:.6}", g.value(loss).item());
        }
        let grads = g.backward(loss)?;
        store.adam_step(&grads, &adam)?;
    }
    let mut g = Graph::new();
    let loss_node = build(&mut g, &store)?;
    println!("final loss {:.2e}", g.value(loss_node).item());

    let distance = store
        .get("weights")?
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    println!("distance to generating weights {distance:.2e}");
    Ok(())
}
