//! Seeded label propagation on two images: the bright-line instance, and a
//! synthetic crack with a handful of seeds taken from the ground truth.

use crossdiff::data::{synth_dataset, SynthConfig};
use crossdiff::metrics::dice;
use crossdiff::propagation::{bright_line_instance, segment_by_propagation, PropagationParams, Seed};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> crossdiff::Result<()> {
    let params = PropagationParams::default();
    let (img, gt, seeds) = bright_line_instance(32);
    let r = segment_by_propagation(&img, 32, 32, &seeds, &params)?;
    println!("bright line: {} seeds, dice {:.4}", seeds.len(), dice(&r.mask, &gt)?);

    let s = &synth_dataset(&SynthConfig::desk(), 1, 2)?[0];
    let side = s.side();
    // grayscale from the red channel, back in [0, 1]
    let gray: Vec<f64> = s.image.data()[..side * side].iter().map(|&v| (v as f64 + 1.0) / 2.0).collect();
    let gt = s.mask_full.data();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fg: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] == 1.0).collect();
    let bg: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] == 0.0).collect();
    for n in [2, 8, 32] {
        let pick = |from: &[usize], label: u8, rng: &mut ChaCha8Rng| -> Vec<Seed> {
            from.choose_multiple(rng, n)
                .map(|&i| Seed { x: i % side, y: i / side, label })
                .collect()
        };
        let mut seeds = pick(&fg, 1, &mut rng);
        seeds.extend(pick(&bg, 0, &mut rng));
        let r = segment_by_propagation(&gray, side, side, &seeds, &params)?;
        println!("crack, {n} seeds per class: dice {:.4}", dice(&r.mask, gt)?);
    }
    Ok(())
}
