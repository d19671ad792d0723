//! Dice/IoU per dataset and the threshold sweep over soft consensus masks.
//!
//! ```text
//! cargo run --release --example evaluate_sweep -- runs/desk/pred runs/desk/data
//! ```

use std::path::PathBuf;

use crossdiff::cli::cmd_eval;

fn main() -> crossdiff::Result<()> {
    let args: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    let [pred, gt] = args.as_slice() else {
        eprintln!("usage: evaluate_sweep PRED_DIR GT_DIR");
        std::process::exit(1);
    };
    let report = cmd_eval(pred, gt, true)?;
    print!("{}", report.to_text('\t'));
    Ok(())
}
