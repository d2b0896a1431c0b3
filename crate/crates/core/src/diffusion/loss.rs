use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::networks::Model;
use crate::numerics::{Real, Tape, Tensor, Var};

/// Noise-prediction MSE for one batch.
///
/// `z0: [N, c, h, w]` are scaled clean latents, `t` holds 1-based timesteps
/// and `eps` the injected noise. The text encoder and U-Net are recorded on
/// the tape, so whichever of their parameters are trainable get gradients.
pub fn diffusion_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    sched: &NoiseSchedule,
    z0: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    ids: &[Vec<usize>],
) -> Result<Var> {
    if z0.shape() != eps.shape() {
        return Err(Error::dim("diffusion_loss", z0.shape(), eps.shape()));
    }
    let n = z0.shape()[0];
    if t.len() != n || ids.len() != n {
        return Err(Error::Arity(format!("{n} latents, {} timesteps, {} prompts", t.len(), ids.len())));
    }
    let per = z0.numel() / n;
    let mut xt = Vec::with_capacity(z0.numel());
    for (i, &ti) in t.iter().enumerate() {
        if ti == 0 {
            return Err(Error::Timestep {
                t: 0,
                lo: 1,
                hi: sched.t_max(),
            });
        }
        let r = i * per..(i + 1) * per;
        xt.extend(sched.q_sample(&z0.data()[r.clone()], ti, &eps.data()[r])?);
    }
    let xt = tape.constant(z0.shape(), xt)?;
    let target = tape.input(eps);
    let ctx = model.text.forward(tape, &model.store, ids)?;
    let idx: Vec<usize> = t.iter().map(|&v| v - 1).collect();
    let eps_hat = model.unet.forward(tape, &model.store, xt, &idx, ctx)?;
    let loss = tape.mse(eps_hat, target)?;
    if !tape.value(loss)[0].is_finite() {
        return Err(Error::NonFinite(format!("diffusion loss at timesteps {t:?}")));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{ModelConfig, BOS, EOS, PAD};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_flat_mse_oracle() {
        let cfg = ModelConfig::tiny(12, 20);
        let model = Model::<f64>::new(cfg.clone(), 1).unwrap();
        let sched = NoiseSchedule::default_for(20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z0 = Tensor::<f64>::randn(&[2, 2, 4, 4], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[2, 2, 4, 4], 1.0, &mut rng);
        let ids = vec![vec![BOS, 5, EOS, PAD, PAD], vec![BOS, EOS, PAD, PAD, PAD]];
        let t = [3, 17];
        let mut tape = Tape::new();
        let loss = diffusion_loss(&mut tape, &model, &sched, &z0, &t, &eps, &ids).unwrap();

        // Oracle: noise every element by hand, run the network once, then a
        // single flat mean of squared differences.
        let mut xt = Vec::new();
        for (i, &ti) in t.iter().enumerate() {
            let ab = sched.alpha_bar(ti);
            for j in 0..32 {
                xt.push(ab.sqrt() * z0.data()[i * 32 + j] + (1.0 - ab).sqrt() * eps.data()[i * 32 + j]);
            }
        }
        let mut tape2 = Tape::new();
        let x = tape2.constant(&[2, 2, 4, 4], xt).unwrap();
        let ctx = model.text.forward(&mut tape2, &model.store, &ids).unwrap();
        let out = model.unet.forward(&mut tape2, &model.store, x, &[2, 16], ctx).unwrap();
        let flat: f64 = tape2
            .value(out)
            .iter()
            .zip(eps.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 64.0;
        assert!((tape.value(loss)[0] - flat).abs() <= 1e-6);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(&[3], vec![0.1, -0.4, 2.0]).unwrap();
        let l = tape.mse(e, e).unwrap();
        assert_eq!(tape.value(l)[0], 0.0);
    }
}
