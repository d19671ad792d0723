//! Train the desk-scale model on synthetic cracks and write a checkpoint,
//! the JSONL loss log and the resolved configuration.
//!
//! ```text
//! cargo run --release --example train_desk -- runs/desk 300
//! ```

use std::path::PathBuf;

use crossdiff::cli::{cmd_synth, cmd_train};
use crossdiff::run::RunConfig;

fn main() -> crossdiff::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/desk".into()));
    let steps = args.next().unwrap_or_else(|| "300".into());
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let cfg = RunConfig::resolve(
        Some("desk"),
        None,
        &[
            ("train.total_steps".into(), steps),
            ("train.log_every".into(), "25".into()),
            ("train.checkpoint_every".into(), "100".into()),
        ],
    )?;
    let data = out.join("data");
    cmd_synth(&cfg, &data)?;
    let run = cmd_train(&cfg, Some(&data), &out, None)?;

    let first = run.records.first();
    let last = run.records.last();
    if let (Some(a), Some(b)) = (first, last) {
        println!("loss {:.4} at step {} -> {:.4} at step {}", a.total, a.step, b.total, b.step);
    }
    println!("checkpoint {}\nlog {}", run.checkpoint.display(), run.log.display());
    Ok(())
}
