//! Times the pieces of one training step on random inputs.

use ndarray::Array4;
use s2c::frontend::{FrontendParams, Mode};
use s2c::model::{BackboneSpec, ModelConfig, S2CModel};
use s2c::nn::{Adam, Parameterized};
use s2c::trainer::{loss_and_grad, Labels};
use std::time::Instant;

fn main() -> s2c::Result<()> {
    let size: usize = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(56);
    let name = std::env::args().nth(2).unwrap_or_else(|| "small".into());
    let cfg = ModelConfig::new(BackboneSpec::desk(&name)?, size);
    let kws = (0..10).map(|k| k.to_string()).collect();
    let mut model = S2CModel::new(cfg, &[1, 2, 3, 4, 5], kws, Mode::Mel, FrontendParams::default().with_image_size(size), 0)?;
    println!("{name} @ {size}px: {} parameters, C = {}", model.param_count(), model.channels());
    let x = Array4::from_shape_fn((16, 3, size, size), |(b, c, i, j)| ((b + c + i * j) % 7) as f32 / 7.0);
    let labels = Labels { subjects: (0..16).map(|i| i % 5).collect(), keywords: (0..16).map(|i| i % 10).collect() };
    let mut adam = Adam::new();
    let reps = 5;
    let mut t = [0f64; 5];
    for _ in 0..reps {
        let s = Instant::now();
        let (f, bc) = model.backbone.forward_train(&x)?;
        t[0] += s.elapsed().as_secs_f64();
        let s = Instant::now();
        let (logits, hc) = model.heads.forward(f)?;
        let (_, d) = loss_and_grad(&logits, &labels)?;
        t[1] += s.elapsed().as_secs_f64();
        let s = Instant::now();
        model.zero_grad();
        let df = model.heads.backward(&hc, &d, true).unwrap();
        t[2] += s.elapsed().as_secs_f64();
        let s = Instant::now();
        model.backbone.backward(bc, df);
        t[3] += s.elapsed().as_secs_f64();
        let s = Instant::now();
        adam.step(&mut model, 1e-4, &|_| true);
        t[4] += s.elapsed().as_secs_f64();
    }
    for (n, v) in ["backbone fwd", "heads fwd+loss", "heads bwd", "backbone bwd", "adam"].iter().zip(t) {
        println!("{n:>16}: {:7.2} ms / batch of 16", v * 1e3 / reps as f64);
    }
    Ok(())
}
