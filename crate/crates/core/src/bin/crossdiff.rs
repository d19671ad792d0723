use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crossdiff::cli;
use crossdiff::metrics::dice;
use crossdiff::run::RunConfig;
use crossdiff::Error;

#[derive(Parser)]
#[command(name = "crossdiff", version, about = "Cross-conditional diffusion for slender-crack segmentation")]
struct Cli {
    /// Flat `section.key=value` file layered over the preset defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// desk | full
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Root seed of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and write checkpoint, loss log and resolved config.
    Train {
        /// Dataset root; defaults to data.root or CROSSDIFF_DATA_ROOT.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        total_steps: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Ensemble-predict masks for a directory of images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        ensemble: Option<usize>,
        /// Skip loading the training-only decoder.
        #[arg(long)]
        inference_only: bool,
    },
    /// Dice/IoU tables for predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Add the metric-by-threshold table.
        #[arg(long)]
        sweep: bool,
        /// Separate columns with commas instead of tabs.
        #[arg(long)]
        csv: bool,
    },
    /// Seeded label propagation on a grayscale image.
    Oracle {
        #[arg(long, required_unless_present = "demo")]
        image: Option<PathBuf>,
        #[arg(long, required_unless_present = "demo")]
        seeds: Option<PathBuf>,
        #[arg(long, required_unless_present = "demo")]
        out: Option<PathBuf>,
        /// Write the bright-line instance into this directory and segment it.
        #[arg(long, conflicts_with_all = ["image", "seeds", "out"])]
        demo: Option<PathBuf>,
    },
    /// Write a synthetic slender-crack dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        side: Option<usize>,
    },
    /// STAPLE-fuse binary masks.
    Fuse {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(required = true, num_args = 2..)]
        masks: Vec<PathBuf>,
    },
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>, Error> {
    let mut o = Vec::new();
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
        o.push((k.to_string(), v.to_string()));
    }
    let seed_key = match &cli.cmd {
        Cmd::Train { .. } => Some("train.seed"),
        Cmd::Predict { .. } => Some("predict.seed"),
        Cmd::Synth { .. } => Some("synth.seed"),
        _ => None,
    };
    if let (Some(k), Some(s)) = (seed_key, cli.seed) {
        o.push((k.into(), s.to_string()));
    }
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            o.push((k.into(), v));
        }
    };
    match &cli.cmd {
        Cmd::Train { total_steps, .. } => put("train.total_steps", total_steps.map(|v| v.to_string())),
        Cmd::Predict { theta, ensemble, .. } => {
            put("predict.theta", theta.map(|v| v.to_string()));
            put("predict.ensemble", ensemble.map(|v| v.to_string()));
        }
        Cmd::Synth { n, side, .. } => {
            put("synth.n", n.map(|v| v.to_string()));
            put("synth.side", side.map(|v| v.to_string()));
        }
        Cmd::Fuse { theta, .. } => put("predict.theta", theta.map(|v| v.to_string())),
        _ => {}
    }
    Ok(o)
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = RunConfig::resolve(cli.preset.as_deref(), cli.config.as_deref(), &overrides(&cli)?)?;
    match cli.cmd {
        Cmd::Train { data, out, resume, .. } => {
            let r = cli::cmd_train(&cfg, data.as_deref(), &out, resume.as_deref())?;
            if let Some(last) = r.records.last() {
                println!("step {} total {:.6}", last.step, last.total);
            }
            println!("checkpoint {}", r.checkpoint.display());
        }
        Cmd::Predict {
            checkpoint,
            input,
            out,
            inference_only,
            ..
        } => {
            let preds = cli::cmd_predict(&cfg, &checkpoint, &input, &out, inference_only)?;
            for p in preds {
                println!("{}\t{}", p.item.id(), p.mask_path.display());
            }
        }
        Cmd::Eval { pred, gt, sweep, csv } => {
            let report = cli::cmd_eval(&pred, &gt, sweep)?;
            print!("{}", report.to_text(if csv { ',' } else { '\t' }));
        }
        Cmd::Oracle { image, seeds, out, demo } => {
            if let Some(dir) = demo {
                let (ip, gp, sp) = cli::write_bright_line_demo(&dir, 32)?;
                let mask_path = dir.join("mask.png");
                let res = cli::cmd_oracle(&cfg, &ip, &sp, &mask_path)?;
                let gt = crossdiff::data::read_mask_native(&gp)?;
                println!("dice {:.4}\t{}", dice(&res.mask, gt.data())?, mask_path.display());
            } else {
                let (image, seeds, out) = (image.expect("required"), seeds.expect("required"), out.expect("required"));
                let res = cli::cmd_oracle(&cfg, &image, &seeds, &out)?;
                let fg = res.mask.iter().filter(|&&v| v == 1.0).count();
                println!("{} foreground pixels\t{}", fg, out.display());
            }
        }
        Cmd::Synth { out, .. } => {
            let s = cli::cmd_synth(&cfg, &out)?;
            println!("{} samples under {}", s.len(), out.display());
        }
        Cmd::Fuse { out, masks, .. } => {
            let f = cli::cmd_fuse(&cfg, &masks, &out)?;
            if let Some(st) = f.staple {
                println!("iterations {} converged {}", st.iterations, st.converged);
            }
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
