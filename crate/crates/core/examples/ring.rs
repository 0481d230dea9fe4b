//! Trains the 2-D MLP velocity field on an 8-Gaussian ring and reports how
//! many samples land near a mode.
//!
//! Usage: `cargo run --release --example ring [steps]`

use std::time::Instant;

use tryon_core::flow::toy::{sample_field, train_ring, RingMixture, ToyTrainConfig};
use tryon_core::flow::SamplerConfig;

fn main() -> tryon_core::Result<()> {
    let defaults = ToyTrainConfig::default();
    let steps = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(defaults.steps);
    let ring = RingMixture::new(8, 2.0, 0.1);
    let cfg = ToyTrainConfig { steps, ..defaults };
    let start = Instant::now();
    let (field, losses) = train_ring(&ring, &cfg)?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    let loss = tail.iter().sum::<f64>() / tail.len() as f64;
    println!("trained {steps} steps in {:.1}s, final loss {loss:.4}", start.elapsed().as_secs_f64());
    for n in [50, 100, 200] {
        let pts = sample_field(&field, 1000, &SamplerConfig::new(n)?, 1)?;
        let near = pts.iter().filter(|p| ring.nearest_mode_distance(**p) <= 3.0 * ring.sigma).count();
        println!("{n} sampler steps: {near}/1000 within 3 sigma");
    }
    Ok(())
}
