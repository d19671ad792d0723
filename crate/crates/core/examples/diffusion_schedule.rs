//! The linear noise schedule on a crack mask: forward noising at a few
//! steps, then a full reverse chain driven by the exact noise, which must
//! land back on the mask.

use crossdiff::data::{synth_dataset, SynthConfig};
use crossdiff::metrics::dice;
use crossdiff::schedule::{to_probability, NoiseSchedule};
use crossdiff::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn noise(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![1, 1, n.isqrt(), n.isqrt()], v).unwrap()
}

fn main() -> crossdiff::Result<()> {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let sample = &synth_dataset(&SynthConfig::desk(), 1, 3)?[0];
    let m: Vec<f64> = sample.mask_diff.data().iter().map(|&v| v as f64).collect();
    let x0 = Tensor::<f64>::from_f64(vec![1, 1, 32, 32], &m)?;
    let gt: Vec<f32> = sample.mask_diff.data().iter().map(|&v| (v > 0.0) as u8 as f32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    println!("t\talpha_bar\tdice(x_t > 0)");
    for t in [0, 50, 200, 500, 999] {
        let x_t = s.forward_noise(&x0, &noise(1024, &mut rng), t)?;
        let p: Vec<f32> = to_probability(&x_t).data().iter().map(|&v| (v > 0.5) as u8 as f32).collect();
        println!("{t}\t{:.5}\t{:.3}", s.alpha_bar(t)?, dice(&p, &gt)?);
    }

    // reverse chain with the true noise each step gives back x0
    let mut x = noise(1024, &mut rng);
    for t in (0..s.steps()).rev() {
        let eps = {
            let ab = s.alpha_bar(t)?;
            let d: Vec<f64> = x
                .data()
                .iter()
                .zip(x0.data())
                .map(|(&xt, &x0)| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt())
                .collect();
            Tensor::new(x.shape().to_vec(), d)?
        };
        let z = (t > 0).then(|| noise(1024, &mut rng));
        x = s.reverse_step(&x, &eps, t, z.as_ref())?;
    }
    println!("oracle chain max |x - x0| = {:.2e}", x.max_abs_diff(&x0));
    Ok(())
}
