//! Trains a small combined model on freshly generated data and prints the
//! validation curves.
//!
//! `cargo run --release -p xmtl-core --example quickstart`

use xmtl::dml::DmlKind;
use xmtl::harness::{train, ExperimentConfig, TrainMode};
use xmtl::synth::{gen_dataset, DatasetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = gen_dataset(&DatasetConfig {
        classes: 5,
        per_class: 40,
        val_per_class: 10,
        image_noise: 0.5,
        seed: 3,
        ..DatasetConfig::default()
    })?;
    let config = ExperimentConfig {
        mode: TrainMode::Combined,
        dml: DmlKind::Cs,
        batch_size: 50,
        seed: 3,
        ..ExperimentConfig::default()
    }
    .with_epochs(10);
    let out = train(&config, &data)?;
    let s = &out.summary;
    println!("ts val acc per epoch:    {:?}", s.val_curve);
    println!("image val acc per epoch: {:?}", s.image_val_curve);
    println!("best {:.3} at epoch {}", s.best_val_acc, s.best_epoch);
    Ok(())
}
