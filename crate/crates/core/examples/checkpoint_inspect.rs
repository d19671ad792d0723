//! Write a freshly initialised desk model to a checkpoint, then read the
//! header and compare a full load with an inference-only load. Pass a path
//! to inspect an existing checkpoint instead.

use std::path::PathBuf;

use crossdiff::checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle, LoadOptions};
use crossdiff::training::{TrainConfig, TrainState};
use crossdiff::{CrossDiff, ModelConfig};

fn main() -> crossdiff::Result<()> {
    let path = match std::env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => {
            let p = std::env::temp_dir().join("crossdiff_init.ckpt");
            let (model, store) = CrossDiff::new::<f32>(ModelConfig::desk(), 0)?;
            let cfg = TrainConfig::desk();
            let state = TrainState::new(store, &cfg)?;
            save_checkpoint(&CheckpointBundle::from_state(&model, &state, &cfg), &p)?;
            p
        }
    };
    let full = load_checkpoint(&path, LoadOptions::default())?;
    for (k, v) in &full.header {
        println!("{k} = {v}");
    }
    let lean = load_checkpoint(&path, LoadOptions { inference_only: true })?;
    let count = |b: &CheckpointBundle| b.arrays.values().map(|t| t.numel()).sum::<usize>();
    println!("full load: {} arrays, {} values", full.arrays.len(), count(&full));
    println!("inference-only: {} arrays, {} values", lean.arrays.len(), count(&lean));
    let (model, store) = lean.restore_model(true)?;
    println!("restored {} parameters at step {}, preset {}", store.len(), lean.step()?, model.config.preset);
    Ok(())
}
