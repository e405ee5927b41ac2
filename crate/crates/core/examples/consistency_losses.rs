//! The uncertainty-rectified consistency loss and the double-uncertainty weight.

use duwmt::autodiff::Graph;
use duwmt::losses::{consistency_loss, double_uncertainty_weight, modify_teacher, rampup_weight};
use duwmt::tensor::Tensor;

fn main() -> duwmt::Result<()> {
    // One pixel, two classes: the teacher says background, the student foreground.
    let teacher = Tensor::new(vec![2, 1, 1], vec![0.9, 0.1])?;
    println!("u     t'_fg   loss(beta=0.1)");
    for u in [0.0f32, 0.25, 0.5, 0.75, 0.99] {
        let mut g = Graph::new();
        let s = g.param(Tensor::new(vec![2, 1, 1], vec![0.2, 0.8])?);
        let u_v = Tensor::full(&[1, 1], u);
        let t = modify_teacher(&mut g, &teacher, s, &u_v)?;
        let l = consistency_loss(&mut g, t, s, &u_v, 0.1, 1e-6)?;
        println!("{u:<5} {:.4}  {:.4}", g.value(t).data()[1], g.value(l).item());
    }

    println!("\nstep   omega     lambda(U_f=0.1, U_s=0.5)");
    for step in [0, 200, 400, 800, 1600] {
        let omega = rampup_weight(step, 800, 0.1);
        let lambda = double_uncertainty_weight(omega, 0.1, 0.5, 1e-6, 1e-6);
        println!("{step:<6} {omega:.5}   {lambda:.5}");
    }

    println!("\nU_s    lambda at full ramp (U_f=0.1)");
    for u_s in [0.05, 0.2, 0.5, 0.9] {
        println!("{u_s:<6} {:.4}", double_uncertainty_weight(0.1, 0.1, u_s, 1e-6, 1e-6));
    }
    Ok(())
}
