//! STAPLE on simulated raters of known quality. The estimated
//! sensitivities and specificities should track the true ones, and the
//! fused mask should beat majority voting.

use crossdiff::data::{synth_dataset, SynthConfig};
use crossdiff::metrics::dice;
use crossdiff::staple::{staple_fuse, StapleParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> crossdiff::Result<()> {
    let truth: Vec<f32> = synth_dataset(&SynthConfig::desk(), 1, 5)?[0].mask_full.data().to_vec();
    let quality = [(0.95, 0.99), (0.9, 0.995), (0.6, 0.98), (0.8, 0.9)];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let raters: Vec<Vec<f32>> = quality
        .iter()
        .map(|&(sens, spec)| {
            truth
                .iter()
                .map(|&t| {
                    let keep = if t == 1.0 { sens } else { spec };
                    if rng.random::<f64>() < keep { t } else { 1.0 - t }
                })
                .collect()
        })
        .collect();
    let refs: Vec<&[f32]> = raters.iter().map(|r| r.as_slice()).collect();
    let res = staple_fuse(&refs, &StapleParams::default())?;

    println!("rater\ttrue p\test p\ttrue q\test q\tdice");
    for (j, &(sens, spec)) in quality.iter().enumerate() {
        println!(
            "{j}\t{sens:.3}\t{:.3}\t{spec:.3}\t{:.3}\t{:.3}",
            res.sensitivity[j],
            res.specificity[j],
            dice(&raters[j], &truth)?
        );
    }
    let fused: Vec<f32> = res.consensus.iter().map(|&w| (w >= 0.5) as u8 as f32).collect();
    let vote: Vec<f32> = (0..truth.len())
        .map(|i| (raters.iter().map(|r| r[i]).sum::<f32>() > 2.0) as u8 as f32)
        .collect();
    println!("STAPLE dice {:.3} after {} iterations", dice(&fused, &truth)?, res.iterations);
    println!("majority dice {:.3}", dice(&vote, &truth)?);
    Ok(())
}
