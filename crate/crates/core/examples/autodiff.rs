//! Builds a two-layer network on the tape, runs backward and checks every
//! gradient against central finite differences.
//!
//!     cargo run --release --example autodiff

use scalar_workbench::tensor::{grad_check, GradCheckConfig, RngState, Tape, Tensor};

fn loss_and_grads(p: &[Tensor<f64>], x: &Tensor<f64>, targets: &[usize]) -> scalar_workbench::Result<(f64, Vec<Tensor<f64>>)> {
    let mut tape = Tape::new();
    let w1 = tape.param(p[0].clone());
    let b1 = tape.param(p[1].clone());
    let w2 = tape.param(p[2].clone());
    let xv = tape.constant(x.clone());
    let h = tape.matmul(xv, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.gelu(h);
    let logits = tape.matmul(h, w2)?;
    let loss = tape.cross_entropy(logits, targets)?;
    let mut g = tape.backward(loss)?;
    let grads = [w1, b1, w2].iter().map(|&v| g.take(v).expect("every parameter is used")).collect();
    Ok((tape.value(loss).item(), grads))
}

fn main() -> anyhow::Result<()> {
    let mut rng = RngState::new(7);
    let params = vec![
        Tensor::randn([6, 16], 0.5, &mut rng),
        Tensor::randn([16], 0.1, &mut rng),
        Tensor::randn([16, 5], 0.5, &mut rng),
    ];
    let x = Tensor::randn([8, 6], 1.0, &mut rng);
    let targets: Vec<usize> = (0..8).map(|i| i % 5).collect();

    let (loss, _) = loss_and_grads(&params, &x, &targets)?;
    println!("cross-entropy {loss:.5}");
    let report = grad_check(&params, |p| loss_and_grads(p, &x, &targets), &GradCheckConfig::default())?;
    for b in &report.blocks {
        println!("block {}: {} coords, max rel err {:.2e}", b.block, b.coords, b.max_rel_err);
    }
    println!("passed: {}", report.passed());
    Ok(())
}
