use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{finite_diff_check, finite_diff_check_params, Tape, Tensor};

fn ids_for(cfg: &ModelConfig, seqs: &[&[usize]]) -> Vec<Vec<usize>> {
    seqs.iter()
        .map(|s| {
            let mut v = s.to_vec();
            v.resize(cfg.text.context_len, PAD);
            v
        })
        .collect()
}

/// Larger weights than the 0.02 init so every path carries gradients well
/// above finite-difference roundoff.
fn reinit_weights(m: &mut Model<f64>, rng: &mut ChaCha8Rng) {
    for p in m.store.iter_mut() {
        if p.name.ends_with(".weight") || p.name.ends_with("token_emb") {
            let shape = p.value.shape().to_vec();
            p.value = Tensor::randn(&shape, 0.3, rng);
        }
    }
}

#[test]
fn parameter_names_are_unique_and_prefixed() {
    let m = Model::<f32>::new(ModelConfig::desk(40, 1000), 0).unwrap();
    let mut seen = HashSet::new();
    for (_, p) in m.store.iter() {
        assert!(seen.insert(p.name.clone()));
        assert!(p.name.starts_with("text.") || p.name.starts_with("vae.") || p.name.starts_with("unet."), "{}", p.name);
    }
}

#[test]
fn desk_unet_has_32_attention_projections() {
    let m = Model::<f32>::new(ModelConfig::desk(40, 1000), 0).unwrap();
    let n = m
        .store
        .iter()
        .filter(|(_, p)| {
            p.name.starts_with("unet.")
                && p.name.contains("_attn.")
                && [".q.weight", ".k.weight", ".v.weight", ".out.weight"].iter().any(|s| p.name.ends_with(s))
        })
        .count();
    assert_eq!(n, 32);
    assert_eq!(m.unet.transformers().count(), 4);
}

#[test]
fn unet_output_matches_latent_shape_and_checks_timestep() {
    let cfg = ModelConfig::desk(40, 1000);
    let m = Model::<f32>::new(cfg.clone(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let [c, h, w] = cfg.latent_shape();
    assert_eq!([c, h, w], [4, 8, 8]);
    let mut tape = Tape::new();
    let z = tape.input(&Tensor::<f32>::randn(&[2, c, h, w], 1.0, &mut rng));
    let ids = ids_for(&cfg, &[&[BOS, 5, EOS], &[BOS, EOS]]);
    let ctx = m.text.forward(&mut tape, &m.store, &ids).unwrap();
    assert_eq!(tape.shape(ctx), &[2, cfg.text.context_len, 64]);
    let out = m.unet.forward(&mut tape, &m.store, z, &[0, 999], ctx).unwrap();
    assert_eq!(tape.shape(out), &[2, c, h, w]);
    assert!(matches!(
        m.unet.forward(&mut tape, &m.store, z, &[0, 1000], ctx),
        Err(Error::Timestep { t: 1000, .. })
    ));
}

#[test]
fn text_encoder_is_deterministic_and_checks_ids() {
    let cfg = ModelConfig::desk(40, 1000);
    let m = Model::<f32>::new(cfg.clone(), 1).unwrap();
    let ids = ids_for(&cfg, &[&[BOS, 7, 9, EOS]]);
    let run = |ids: &[Vec<usize>]| {
        let mut tape = Tape::new();
        let v = m.text.forward(&mut tape, &m.store, ids)?;
        Ok::<_, Error>(tape.value(v).to_vec())
    };
    assert_eq!(run(&ids).unwrap(), run(&ids).unwrap());
    let bad = ids_for(&cfg, &[&[BOS, 40, EOS]]);
    assert!(matches!(run(&bad), Err(Error::Index { index: 40, .. })));
}

#[test]
fn vae_shapes_sample_and_kl() {
    let cfg = ModelConfig::desk(40, 1000);
    let m = Model::<f64>::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let x = tape.input(&Tensor::<f64>::randn(&[1, 3, 32, 32], 0.5, &mut rng));
    let (mean, logvar) = m.vae.encode(&mut tape, &m.store, x).unwrap();
    assert_eq!(tape.shape(mean), &[1, 4, 8, 8]);
    let zero = tape.input(&Tensor::zeros(&[1, 4, 8, 8]));
    let z = m.vae.sample(&mut tape, mean, logvar, zero).unwrap();
    assert_eq!(tape.value(z), tape.value(mean));
    let img = m.vae.decode(&mut tape, &m.store, z).unwrap();
    assert_eq!(tape.shape(img), &[1, 3, 32, 32]);
    assert!(tape.value(img).iter().all(|v| v.abs() < 1.0));

    let mu = tape.input(&Tensor::zeros(&[1, 4, 8, 8]));
    let lv = tape.input(&Tensor::zeros(&[1, 4, 8, 8]));
    let kl = kl_divergence(&mut tape, mu, lv).unwrap();
    assert_eq!(tape.value(kl)[0], 0.0);

    let wrong = tape.input(&Tensor::<f64>::zeros(&[1, 3, 16, 16]));
    assert!(matches!(m.vae.encode(&mut tape, &m.store, wrong), Err(Error::Dimension { .. })));
}

#[test]
fn config_validation() {
    let mut cfg = ModelConfig::desk(40, 1000);
    cfg.image_side = 30;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = ModelConfig::desk(40, 1000);
    cfg.unet.attention.pop();
    assert!(cfg.validate().is_err());
    assert!(ModelConfig::tiny(12, 10).validate().is_ok());
}

#[test]
fn text_encoder_gradient_check() {
    let cfg = ModelConfig::tiny(12, 10);
    let mut m = Model::<f64>::new(cfg.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    reinit_weights(&mut m, &mut rng);
    m.store.set_trainable_all(false);
    m.store.set_trainable_prefix("text.", true);
    let ids = ids_for(&cfg, &[&[BOS, 4, 7, EOS], &[BOS, 11, EOS]]);
    let weights = Tensor::<f64>::randn(&[2, cfg.text.context_len, cfg.text.d_model], 1.0, &mut rng);
    let text = m.text.clone();
    let report = finite_diff_check_params(
        &mut m.store,
        |tape, store| {
            let e = text.forward(tape, store, &ids)?;
            let w = tape.input(&weights);
            let p = tape.mul(e, w)?;
            Ok(tape.sum(p))
        },
        1e-5,
        6,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn full_model_gradient_check_on_one_step_loss() {
    let cfg = ModelConfig::tiny(12, 10);
    let mut m = Model::<f64>::new(cfg.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    reinit_weights(&mut m, &mut rng);
    m.store.set_trainable_all(true);
    let ids = ids_for(&cfg, &[&[BOS, 4, EOS]]);
    let x0 = Tensor::<f64>::randn(&[1, 3, 8, 8], 0.5, &mut rng);
    let noise = Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
    let (text, vae, unet) = (m.text.clone(), m.vae.clone(), m.unet.clone());
    let report = finite_diff_check_params(
        &mut m.store,
        |tape, store| {
            let x = tape.input(&x0);
            let (mean, _) = vae.encode(tape, store, x)?;
            let ctx = text.forward(tape, store, &ids)?;
            // one noising step at t index 3 with a fixed ᾱ
            let ab: f64 = 0.7;
            let zs = tape.scale(mean, ab.sqrt());
            let n = tape.input(&noise);
            let ns = tape.scale(n, (1.0 - ab).sqrt());
            let zt = tape.add(zs, ns)?;
            let eps = unet.forward(tape, store, zt, &[3], ctx)?;
            let l = tape.mse(eps, n)?;
            let rec = vae.decode(tape, store, mean)?;
            let r = tape.mse(rec, x)?;
            tape.add(l, r)
        },
        1e-5,
        3,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
    assert!(report.checked > 100);
}

#[test]
fn attention_input_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
    let k = Tensor::<f64>::randn(&[2, 5, 4], 1.0, &mut rng);
    let v = Tensor::<f64>::randn(&[2, 5, 3], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(&[2, 3, 3], 1.0, &mut rng);
    let r = finite_diff_check(
        |tape, vs| {
            let a = tape.attention(vs[0], vs[1], vs[2])?;
            let w = tape.input(&w);
            let p = tape.mul(a, w)?;
            Ok(tape.sum(p))
        },
        &[q, k, v],
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-6, "{r:?}");
}
