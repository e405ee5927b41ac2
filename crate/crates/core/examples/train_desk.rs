//! Trains the student/teacher pair on a small synthetic corpus.
//!
//! `cargo run --release --example train_desk -- [mode] [steps]`
//! where `mode` is `paper`, `supervised`, `no_weight_ablation`, `mse_ablation` or `all`.

use duwmt::data::{generate_synthetic, split, Dataset};
use duwmt::trainer::{train, ConsistencyMode, Experiment};

fn main() -> duwmt::Result<()> {
    let mut args = std::env::args().skip(1);
    let mode = args.next().unwrap_or_else(|| "paper".into());
    let steps: usize = args.next().map(|s| s.parse().expect("steps is a number")).unwrap_or(1500);
    let modes: Vec<ConsistencyMode> = if mode == "all" {
        vec![
            ConsistencyMode::Supervised,
            ConsistencyMode::MseAblation,
            ConsistencyMode::NoWeightAblation,
            ConsistencyMode::Paper,
        ]
    } else {
        vec![mode.parse()?]
    };

    let samples = generate_synthetic(60, 32, 3)?;
    let manifest = split(&samples, 6, 20, 3, "desk")?;
    let ds = Dataset::assemble(samples, manifest)?;

    for mode in modes {
        let mut exp = Experiment::default();
        exp.model.base_channels = 8;
        exp.train.total_steps = steps;
        exp.train.mc_samples = 8;
        exp.train.mode = mode;
        exp.loss.ramp_len = steps * 2 / 5;
        exp.train.lr_period = steps * 2 / 5;
        println!("== {}", mode.as_str());
        let every = (steps / 6).max(1);
        let out = train(&exp, &ds, |l| {
            if l.step % every == 0 {
                println!(
                    "step {:>4}  loss {:.4}  lambda {:.4}  U_s {}  U_f {}",
                    l.step,
                    l.loss,
                    l.lambda,
                    l.u_s.map_or("-".into(), |v| format!("{v:.3}")),
                    l.u_f.map_or("-".into(), |v| format!("{v:.3}")),
                );
            }
        })?;
        let r = &out.report;
        println!("test dice: student {:.4}, teacher {:.4}\n", r.student.dice, r.teacher.dice);
    }
    Ok(())
}
