//! Rough timing of the batched training step at the perturbed-digits scale.
//!
//!     cargo run --release -p glimpse-core --example train_bench

use std::time::Instant;

use glimpse_core::data::synth_digits;
use glimpse_core::model::{Model, ModelConfig};
use glimpse_core::train::{train_step, OptState};

fn main() {
    let cfg = ModelConfig::sim2mnist(10, 1);
    let mut model = Model::<f32>::new(cfg, 1);
    let mut opt = OptState::new(&model, 1e-3, 1e-5);
    println!("params: {}", model.param_count());

    let base = synth_digits::<f32>(64, 96, 3);
    let images: Vec<_> = base.images.iter().collect();
    let labels = base.labels.clone();
    let glimpses = 20;

    // warmup
    train_step(&mut model, &mut opt, &images, &labels, glimpses, false, 0).unwrap();

    let steps = 5;
    let t0 = Instant::now();
    for s in 0..steps {
        train_step(&mut model, &mut opt, &images, &labels, glimpses, false, s as u64).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / steps as f64;
    let per_glimpse = dt / (images.len() * glimpses) as f64;
    println!(
        "batch {} x {glimpses} glimpses: {:.3} s/step ({:.1} us per glimpse fwd+bwd)",
        images.len(),
        dt,
        per_glimpse * 1e6
    );
    println!(
        "projected epoch over 10k examples: {:.1} s",
        dt * (10_000.0 / images.len() as f64)
    );
}
