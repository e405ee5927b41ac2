//! Builds the U-Net, runs deterministic and dropout forwards, and round-trips weights.

use duwmt::rng::StreamKey;
use duwmt::segnet::{Mode, Model, ModelConfig};
use duwmt::tensor::Tensor;

fn main() -> duwmt::Result<()> {
    let config = ModelConfig { base_channels: 8, ..Default::default() };
    let model = Model::build(config, 1)?;
    println!("{} parameter tensors, {} weights", model.params().len(), model.param_count());
    for p in model.params().iter().take(4) {
        println!("  {:<16} {:?}", p.name, p.value.shape());
    }

    let image = Tensor::from_fn(&[1, 32, 32], |i| ((i % 32) as f32 / 31.0 - 0.5) * ((i / 32) as f32 / 31.0));
    let det = model.forward(&image, Mode::Deterministic)?;
    let drop = model.forward(&image, Mode::Stochastic(StreamKey::new(3, 0)))?;
    println!("logits {:?}, feature tap {:?}", det.logits.shape(), det.feature_tap.shape());
    let diff = det.logits.data().iter().zip(drop.logits.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    println!("max logit change under dropout: {diff:.4}");

    let probs = model.predict_probs(&image)?;
    let fg = probs.data()[probs.len() / 2..].iter().filter(|&&p| p > 0.5).count();
    println!("untrained model labels {fg} of {} pixels foreground", probs.len() / 2);

    let path = std::env::temp_dir().join("duwmt_segnet_forward.bin");
    model.save(&path)?;
    println!("weights round-trip: {}", Model::load(&path)? == model);
    Ok(())
}
