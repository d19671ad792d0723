//! Generate a synthetic slender-crack dataset on disk.
//!
//! ```text
//! cargo run --release --example synth_dataset -- /tmp/cracks 16
//! ```

use std::path::PathBuf;

use crossdiff::data::{load_dataset, synth_dataset, write_dataset, SynthConfig};

fn main() -> crossdiff::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synth_data".into()));
    let n: usize = args.next().map(|s| s.parse().expect("N")).unwrap_or(8);

    let cfg = SynthConfig::desk();
    let samples = synth_dataset(&cfg, n, 0)?;
    write_dataset(&out, &samples)?;

    // read it back the way training does
    let back = load_dataset(&out, cfg.side, cfg.diff_side, None)?;
    for s in &back {
        println!("{}\tforeground {:.2}%", s.id, 100.0 * s.foreground_fraction());
    }
    println!("{} pairs under {}", back.len(), out.display());
    Ok(())
}
