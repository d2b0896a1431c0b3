use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::networks::{Linear, Model, ModelConfig, BOS, EOS, PAD};
use crate::numerics::Tape;

fn unet_out<T: Real>(m: &Model<T>, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = m.config.latent_shape();
    let z = Tensor::<T>::randn(&[2, c, h, w], 1.0, &mut rng);
    let mut ids = vec![vec![BOS, 4, 5, EOS], vec![BOS, EOS]];
    for v in &mut ids {
        v.resize(m.config.text.context_len, PAD);
    }
    let mut tape = Tape::new();
    let zv = tape.input(&z);
    let ctx = m.text.forward(&mut tape, &m.store, &ids).unwrap();
    let out = m.unet.forward(&mut tape, &m.store, zv, &[3, 40], ctx).unwrap();
    tape.value(out).to_vec()
}

#[test]
fn desk_model_gets_32_rank_4_adapters() {
    let mut m = Model::<f32>::new(ModelConfig::desk(30, 200), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let state = inject(&mut m.store, &LoraConfig::default(), &mut rng).unwrap();
    assert_eq!(state.len(), 32);
    assert!(state.ranks().iter().all(|&r| r == 4));

    let report = trainable_report(&m.store);
    let formula: usize = state
        .adapters
        .iter()
        .map(|a| {
            let s = m.store.get(a.target).value.shape();
            a.binding.rank * (s[0] + s[1])
        })
        .sum();
    assert_eq!(report.adapters, 32);
    assert_eq!(report.theta_count, formula);
    assert_eq!(report.theta_count + report.phi0_count, m.store.numel());
    assert!(report.ratio < 0.1, "{}", report.ratio);

    // every parameter is in exactly one of Θ and Φ₀, and trainable iff in Θ
    let mut theta_ids = Vec::new();
    for a in &state.adapters {
        theta_ids.push(a.binding.a);
        theta_ids.push(a.binding.b);
    }
    for (id, p) in m.store.iter() {
        assert_eq!(p.trainable, theta_ids.contains(&id), "{}", p.name);
    }
}

#[test]
fn zero_init_injection_is_bit_exact() {
    let base = Model::<f32>::new(ModelConfig::desk(30, 200), 5).unwrap();
    let before = unet_out(&base, 9);
    let mut m = base.clone();
    inject(&mut m.store, &LoraConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let after = unet_out(&m, 9);
    assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn single_adapter_census() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Linear::new(&mut store, "p", 64, 64, true, &mut rng).unwrap();
    let cfg = LoraConfig {
        targets: vec!["p.weight".into()],
        rank: 4,
        alpha: 4.0,
    };
    inject(&mut store, &cfg, &mut rng).unwrap();
    let r = trainable_report(&store);
    assert_eq!(r.theta_count, 512);
    assert_eq!(r.phi0_count, 4096 + 64);
    assert_eq!(trainable_report(&ParamStore::<f64>::new()).theta_count, 0);
}

#[test]
fn injection_errors() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Linear::new(&mut store, "p", 8, 8, true, &mut rng).unwrap();
    let cfg = |t: &str| LoraConfig {
        targets: vec![t.into()],
        rank: 2,
        alpha: 2.0,
    };
    assert!(matches!(inject(&mut store, &cfg("nothing.*"), &mut rng), Err(Error::Target(_))));
    assert!(matches!(inject(&mut store, &cfg("p.bias"), &mut rng), Err(Error::Target(_))));
    let too_big = LoraConfig { rank: 9, ..cfg("p.weight") };
    assert!(matches!(inject(&mut store, &too_big, &mut rng), Err(Error::Config(_))));
    // failed injections leave everything trainable and unbound
    assert!(store.iter().all(|(_, p)| p.trainable));
    inject(&mut store, &cfg("p.weight"), &mut rng).unwrap();
    assert!(matches!(inject(&mut store, &cfg("p.weight"), &mut rng), Err(Error::Duplicate(_))));
}

fn random_adapter_layer(seed: u64) -> (ParamStore<f64>, Linear) {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lin = Linear::new(&mut store, "w", 8, 8, true, &mut rng).unwrap();
    let cfg = LoraConfig {
        targets: vec!["w.weight".into()],
        rank: 3,
        alpha: 1.5,
    };
    let st = inject(&mut store, &cfg, &mut rng).unwrap();
    let b = st.adapters[0].binding.b;
    store.get_mut(b).value = Tensor::randn(&[8, 3], 0.5, &mut rng);
    (store, lin)
}

fn linear_out(store: &ParamStore<f64>, lin: &Linear, x: &Tensor<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let y = lin.forward(&mut tape, store, xv).unwrap();
    tape.value(y).to_vec()
}

#[test]
fn merged_forward_matches_wrapped() {
    let (mut store, lin) = random_adapter_layer(3);
    let x = Tensor::<f64>::randn(&[5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let wrapped = linear_out(&store, &lin, &x);
    let original = store.get(lin.weight).value.clone();
    merge(&mut store).unwrap();
    let merged = linear_out(&store, &lin, &x);
    let diff = wrapped.iter().zip(&merged).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-12, "{diff}");
    assert!(matches!(merge(&mut store), Err(Error::State(_))));
    unmerge(&mut store).unwrap();
    assert!(store.get(lin.weight).value.max_abs_diff(&original).unwrap() <= 1e-12);
    let back = linear_out(&store, &lin, &x);
    assert!(wrapped.iter().zip(&back).all(|(a, b)| (a - b).abs() <= 1e-12));
    assert!(matches!(unmerge(&mut store), Err(Error::State(_))));
}

#[test]
fn merge_with_zero_b_is_a_byte_no_op() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lin = Linear::new(&mut store, "w", 6, 4, false, &mut rng).unwrap();
    let cfg = LoraConfig {
        targets: vec!["w.weight".into()],
        rank: 2,
        alpha: 2.0,
    };
    inject(&mut store, &cfg, &mut rng).unwrap();
    let before: Vec<u32> = store.get(lin.weight).value.data().iter().map(|v| v.to_bits()).collect();
    merge(&mut store).unwrap();
    let after: Vec<u32> = store.get(lin.weight).value.data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after);
}

#[test]
fn freeze_snapshot_flags_drift_and_adapter_change() {
    let (mut store, lin) = random_adapter_layer(7);
    let snap = FreezeSnapshot::capture(&store);
    assert_eq!(snap.adapters.len(), 2);
    let a = store.lora_binding(lin.weight).unwrap().a;
    store.get_mut(a).value.data_mut()[0] += 1.0;
    let v = snap.verify(&store).unwrap();
    assert_eq!(v.adapters_changed, vec!["w.lora_a".to_string()]);
    store.get_mut(lin.weight).value.data_mut()[3] += 1e-3;
    match snap.verify(&store) {
        Err(Error::FrozenDrift(name)) => assert_eq!(name, "w.weight"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn adapter_file_round_trip_and_errors() {
    let (store, lin) = random_adapter_layer(11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.lora");
    save_adapters(&path, &store).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut fresh = ParamStore::<f64>::new();
    Linear::new(&mut fresh, "w", 8, 8, true, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    assert_eq!(load_adapters(&path, &mut fresh).unwrap(), 1);
    let x = Tensor::<f64>::randn(&[3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    // payloads are stored in 32-bit
    let (a, b) = (linear_out(&store, &lin, &x), linear_out(&fresh, &lin, &x));
    assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-5));
    let p2 = dir.path().join("b.lora");
    save_adapters(&p2, &fresh).unwrap();
    assert_eq!(std::fs::read(&p2).unwrap(), bytes);

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(read_adapters(&bad), Err(Error::Corruption { offset: 0, .. })));
    let mut ver = bytes.clone();
    ver[4] = 9;
    assert!(matches!(read_adapters(&ver), Err(Error::Version { found: 9, .. })));
    assert!(matches!(read_adapters(&bytes[..bytes.len() - 3]), Err(Error::Corruption { .. })));
}
