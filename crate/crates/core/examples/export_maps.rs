//! Runs a short training, then writes uncertainty maps for the test split.
//!
//! `cargo run --release --example export_maps -- [out_dir]`

use duwmt::config::RunConfig;
use duwmt::data::{generate_synthetic, split, Dataset};
use duwmt::export::{export_uncertainty_maps, run_training, TEACHER_FILE};
use duwmt::segnet::{Model, NoiseSpec};

fn main() -> duwmt::Result<()> {
    let root =
        std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("duwmt_export_maps"));
    let data = root.join("data");
    let samples = generate_synthetic(30, 32, 5)?;
    let manifest = split(&samples, 4, 3, 5, "maps")?;
    Dataset::assemble(samples, manifest)?.save(&data)?;

    let mut cfg = RunConfig::parse("base_channels = 8\ntotal_steps = 800\nmc_samples = 4\nramp_len = 300\n")?;
    cfg.data_dir = Some(data.clone());
    cfg.out_dir = Some(root.join("run"));
    let report = run_training(&cfg)?;
    println!("trained {} steps, teacher dice {:.4}", report.steps, report.teacher.dice);

    let teacher = Model::load(&root.join("run").join(TEACHER_FILE))?;
    let maps = root.join("maps");
    let summaries = export_uncertainty_maps(&teacher, &Dataset::load(&data)?, &maps, 8, 0, NoiseSpec::none())?;
    for s in &summaries {
        println!("{}: U_s {:.4}, U_f {:.4}, {} channel maps", s.id, s.u_s, s.u_f, s.u_c.len());
    }
    println!("maps written to {}", maps.display());
    Ok(())
}
