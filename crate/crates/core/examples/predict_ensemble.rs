//! Ensemble prediction with STAPLE fusion from a trained checkpoint.
//!
//! ```text
//! cargo run --release --example predict_ensemble -- runs/desk/checkpoint.ckpt runs/desk/data runs/desk/pred
//! ```

use std::path::PathBuf;

use crossdiff::cli::cmd_predict;
use crossdiff::run::RunConfig;

fn main() -> crossdiff::Result<()> {
    let args: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    let [ckpt, input, out] = args.as_slice() else {
        eprintln!("usage: predict_ensemble CHECKPOINT INPUT_DIR OUT_DIR");
        std::process::exit(1);
    };
    let cfg = RunConfig::resolve(None, None, &[("predict.ensemble".into(), "5".into())])?;
    // the decoder is only needed for training
    let preds = cmd_predict(&cfg, ckpt, input, out, true)?;
    for p in &preds {
        let fg = p.fused.mask.data().iter().filter(|&&v| v == 1.0).count();
        match &p.fused.staple {
            Some(s) => println!(
                "{}\t{fg} px\tSTAPLE {} iterations, sensitivities {:?}",
                p.item.id(),
                s.iterations,
                s.sensitivity.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>()
            ),
            None => println!("{}\t{fg} px", p.item.id()),
        }
    }
    Ok(())
}
