//! Writes a synthetic scene and several augmented draws of it as PNGs.
//!
//! ```text
//! cargo run --example augment_preview -- [OUT_DIR] [DRAWS]
//! ```

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scalpel_seg::augment::{augment_sample, AugmentConfig};
use scalpel_seg::coco::write_image;
use scalpel_seg::synth::{generate, ShiftSpec};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/augment-preview".into()));
    let draws: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(6);
    std::fs::create_dir_all(&out)?;

    let sample = generate(1, [3, 4], 64, &ShiftSpec::none(21))?.samples.remove(0);
    write_image(&out.join("original.png"), &sample.image)?;
    let cfg = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for k in 0..draws {
        let mut aug = augment_sample(&sample, &cfg, &mut rng);
        aug.image.clamp();
        let flipped = aug.instances.first().zip(sample.instances.first()).is_some_and(|(a, b)| a.bbox != b.bbox);
        let mean = aug.image.data.iter().sum::<f32>() / aug.image.data.len() as f32;
        println!("draw {k}: mean intensity {mean:.3}{}", if flipped { ", flipped" } else { "" });
        write_image(&out.join(format!("draw_{k}.png")), &aug.image)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
