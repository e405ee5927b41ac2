//! Monte Carlo dropout sampling and the two uncertainty summaries.

use duwmt::data::generate_synthetic;
use duwmt::rng::StreamKey;
use duwmt::segnet::{Model, ModelConfig, NoiseSpec};
use duwmt::uncertainty;

fn main() -> duwmt::Result<()> {
    let model = Model::build(ModelConfig { base_channels: 8, ..Default::default() }, 4)?;
    let sample = generate_synthetic(1, 32, 9)?.remove(0);

    for passes in [2, 4, 8, 16] {
        let mc = model.mc_sample(&sample.image, passes, StreamKey::new(0, 1), NoiseSpec::default())?;
        let b = uncertainty::estimate(&mc, true)?;
        println!("T={passes:<2}  U_s {:.4}  U_f {:.4}", b.u_s, b.u_f);
    }

    let mc = model.mc_sample(&sample.image, 8, StreamKey::new(0, 1), NoiseSpec::none())?;
    let b = uncertainty::estimate(&mc, true)?;
    println!("\nwithout input noise: U_s {:.4}, U_f {:.4}", b.u_s, b.u_f);
    println!("per-channel U_c:");
    for (c, u) in b.u_c.iter().enumerate() {
        println!("  c{c:02} {u:.4}");
    }
    let (h, w) = (b.u_v_map.shape()[0], b.u_v_map.shape()[1]);
    let peak = b.u_v_map.data().iter().cloned().fold(0.0f32, f32::max);
    println!("voxel map {h}x{w}, peak normalized entropy {peak:.4}");
    Ok(())
}
