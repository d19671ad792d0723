//! Overfit the desk model on eight synthetic samples and score the fused
//! five-chain prediction on the same images.
//!
//! ```text
//! cargo run --release --example overfit_synthetic -- runs/overfit 4000
//! ```

use std::path::PathBuf;

use crossdiff::cli::{cmd_eval, cmd_predict, cmd_synth, cmd_train};
use crossdiff::run::RunConfig;

fn main() -> crossdiff::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/overfit".into()));
    let steps = args.next().unwrap_or_else(|| "4000".into());
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let cfg = RunConfig::resolve(
        Some("desk"),
        None,
        &[
            ("synth.n".into(), "8".into()),
            ("train.total_steps".into(), steps),
            ("train.log_every".into(), "100".into()),
        ],
    )?;
    let data = out.join("data");
    cmd_synth(&cfg, &data)?;
    let run = cmd_train(&cfg, Some(&data), &out, None)?;
    let mean = |r: &[crossdiff::training::TrainRecord]| r.iter().map(|x| x.total).sum::<f64>() / r.len().max(1) as f64;
    let w = 50.min(run.records.len());
    println!(
        "moving-average loss {:.4} (first {w} steps) -> {:.4} (last {w})",
        mean(&run.records[..w]),
        mean(&run.records[run.records.len() - w..])
    );
    cmd_predict(&cfg, &run.checkpoint, &data, &out.join("pred"), true)?;
    print!("{}", cmd_eval(&out.join("pred"), &data, true)?.to_text('\t'));
    Ok(())
}
