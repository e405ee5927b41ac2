//! Builds a small graph, backpropagates and compares against central differences.

use duwmt::autodiff::{Graph, Var};
use duwmt::tensor::Tensor;

fn loss_of(w: &Tensor, x: &Tensor, b: &Tensor) -> duwmt::Result<(Graph, [Var; 2], f32)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.param(w.clone());
    let bv = g.param(b.clone());
    let y = g.conv2d(xv, wv, bv)?;
    let y = g.relu(y)?;
    let p = g.softmax_channel(y)?;
    let lp = g.log(p)?;
    let l = g.reduce_mean(lp)?;
    let l = g.scalar_mul(l, -1.0)?;
    let v = g.value(l).item();
    Ok((g, [wv, l], v))
}

fn main() -> duwmt::Result<()> {
    let x = Tensor::from_fn(&[1, 2, 5, 5], |i| ((i * 37 % 11) as f32 - 5.0) / 4.0);
    let w = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 13 % 7) as f32 - 3.0) / 10.0);
    let b = Tensor::from_fn(&[3], |i| 0.05 * i as f32);

    let (mut g, [wv, l], loss) = loss_of(&w, &x, &b)?;
    g.backward(l)?;
    let grad = g.grad(wv).expect("weight gradient").clone();
    println!("loss {loss:.6}, tape length {}", g.len());

    let eps = 1e-2;
    let mut worst = 0.0f32;
    for i in 0..w.len() {
        let mut plus = w.clone();
        plus.data_mut()[i] += eps;
        let mut minus = w.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (loss_of(&plus, &x, &b)?.2 - loss_of(&minus, &x, &b)?.2) / (2.0 * eps);
        worst = worst.max((numeric - grad.data()[i]).abs());
    }
    println!("max |analytic - numeric| over {} weights: {worst:.2e}", w.len());
    Ok(())
}
