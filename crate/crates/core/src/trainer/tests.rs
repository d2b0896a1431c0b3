use std::path::Path;

use super::*;
use crate::dataset::{synth_toy_dataset, Style};
use crate::lora::FreezeSnapshot;

fn toy_data() -> TrainData {
    let ex = synth_toy_dataset(6, 3, 8, Style::Paper).unwrap();
    let vocab = Vocab::build(ex.iter().map(|e| e.record.caption.as_str()));
    TrainData::new(&ex, vocab).unwrap()
}

fn cfg(stage: Stage, steps: usize, every: usize) -> TrainConfig {
    TrainConfig {
        stage,
        total_steps: steps,
        batch_size: 3,
        lr: 1e-3,
        checkpoint_every: every,
        preview_count: 4,
        preview_prompt: "a garden scene".into(),
        preview_steps: 4,
        seed: 17,
        kl_weight: 1e-3,
        latent_sampling: stage == Stage::Diffusion,
        lora: (stage == Stage::Lora).then(|| LoraConfig {
            targets: vec!["unet.*_attn.q.weight".into(), "unet.*_attn.v.weight".into()],
            rank: 2,
            alpha: 2.0,
        }),
    }
}

fn fresh(data: &TrainData) -> Start {
    Start::Fresh {
        config: ModelConfig::tiny(data.vocab.len(), 20),
        init_seed: 5,
    }
}

fn losses(dir: &Path) -> Vec<(u64, u32)> {
    read_loss_log(&dir.join(LOSS_LOG_FILE))
        .unwrap()
        .iter()
        .map(|r| (r.step, r.loss.to_bits()))
        .collect()
}

/// Final states of the three stages trained back to back in `dir`.
fn pipeline(data: &TrainData, dir: &Path) -> [Checkpoint; 3] {
    let vae = train(&cfg(Stage::Vae, 4, 2), data, fresh(data), &dir.join("vae")).unwrap().state;
    let diff = train(&cfg(Stage::Diffusion, 4, 2), data, Start::Init(Box::new(vae.clone())), &dir.join("diffusion"))
        .unwrap()
        .state;
    let lora = train(&cfg(Stage::Lora, 4, 2), data, Start::Init(Box::new(diff.clone())), &dir.join("lora"))
        .unwrap()
        .state;
    [vae, diff, lora]
}

#[test]
fn cadence_previews_and_log_rows() {
    let data = toy_data();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg(Stage::Vae, 10, 5), &data, fresh(&data), dir.path()).unwrap();
    assert_eq!(out.checkpoints.len(), 2);
    assert!(dir.path().join("step5.ckpt").exists() && dir.path().join("step10.ckpt").exists());
    for p in &out.previews {
        let grid = ImageTensor::load_png(p).unwrap();
        assert_eq!((grid.height(), grid.width()), (8, 4 * 8));
    }
    let rows = read_loss_log(&dir.path().join(LOSS_LOG_FILE)).unwrap();
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
    assert!(out.state.latent_scale.unwrap() > 0.0);

    let diff = train(
        &cfg(Stage::Diffusion, 10, 5),
        &data,
        Start::Init(Box::new(out.state)),
        &dir.path().join("d"),
    )
    .unwrap();
    assert_eq!(diff.previews.len(), 2);
    let grid = ImageTensor::load_png(&diff.previews[0]).unwrap();
    assert_eq!(grid.width(), 32);
}

#[test]
fn identical_seeds_give_identical_logs_and_checkpoints() {
    let data = toy_data();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = pipeline(&data, a.path());
    let sb = pipeline(&data, b.path());
    for (x, y) in sa.iter().zip(&sb) {
        assert_eq!(x.to_bytes(), y.to_bytes());
    }
    for stage in ["vae", "diffusion", "lora"] {
        assert_eq!(losses(&a.path().join(stage)), losses(&b.path().join(stage)));
        assert_eq!(
            std::fs::read(a.path().join(stage).join("step4.ckpt")).unwrap(),
            std::fs::read(b.path().join(stage).join("step4.ckpt")).unwrap()
        );
    }
}

#[test]
fn split_runs_resume_bit_exactly_in_every_stage() {
    let data = toy_data();
    let root = tempfile::tempdir().unwrap();
    let [vae, diff, _] = pipeline(&data, &root.path().join("ref"));
    let inits = [
        (Stage::Vae, None),
        (Stage::Diffusion, Some(vae)),
        (Stage::Lora, Some(diff)),
    ];
    for (stage, init) in inits {
        let start = |init: &Option<Checkpoint>| match init {
            None => fresh(&data),
            Some(c) => Start::Init(Box::new(c.clone())),
        };
        let whole_dir = root.path().join(format!("{}-whole", stage.as_str()));
        let whole = train(&cfg(stage, 6, 3), &data, start(&init), &whole_dir).unwrap();

        let split_dir = root.path().join(format!("{}-split", stage.as_str()));
        train(&cfg(stage, 3, 3), &data, start(&init), &split_dir).unwrap();
        let mid = Checkpoint::load(&split_dir.join("step3.ckpt")).unwrap();
        let resumed = train(&cfg(stage, 6, 3), &data, Start::Resume(Box::new(mid)), &split_dir).unwrap();

        assert_eq!(whole.state.to_bytes(), resumed.state.to_bytes(), "{stage:?}");
        assert_eq!(
            std::fs::read(whole_dir.join("step6.ckpt")).unwrap(),
            std::fs::read(split_dir.join("step6.ckpt")).unwrap()
        );
        assert_eq!(losses(&whole_dir), losses(&split_dir));
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let data = toy_data();
    let dir = tempfile::tempdir().unwrap();
    let [_, _, lora] = pipeline(&data, dir.path());
    let bytes = lora.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    for ((_, p), (_, q)) in lora.model.store.iter().zip(back.model.store.iter()) {
        assert_eq!(p.name, q.name);
        assert_eq!(p.trainable, q.trainable);
        assert!(p.value.data().iter().zip(q.value.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    // q and v of both attention layers in four transformers
    assert_eq!(back.model.store.lora_bindings().count(), 16);

    let mut flipped = bytes.clone();
    flipped[..4].copy_from_slice(b"KCDG");
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Corruption { offset: 0, .. })));
    let mut ver = bytes.clone();
    ver[4] = 7;
    assert!(matches!(Checkpoint::from_bytes(&ver), Err(Error::Version { found: 7, .. })));
    match Checkpoint::from_bytes(&bytes[..bytes.len() - 10]) {
        Err(Error::Corruption { offset, .. }) => assert!(offset > 16),
        other => panic!("{other:?}"),
    }
}

#[test]
fn lora_stage_keeps_base_frozen_between_checkpoints() {
    let data = toy_data();
    let dir = tempfile::tempdir().unwrap();
    pipeline(&data, dir.path());
    let lora_dir = dir.path().join("lora");
    let c2 = Checkpoint::load(&lora_dir.join("step2.ckpt")).unwrap();
    let c4 = Checkpoint::load(&lora_dir.join("step4.ckpt")).unwrap();
    let (f2, f4) = (FreezeSnapshot::capture(&c2.model.store), FreezeSnapshot::capture(&c4.model.store));
    assert_eq!(f2.frozen, f4.frozen);
    assert_ne!(f2.adapters, f4.adapters);
    assert!(lora_dir.join("adapters_step4.lora").exists());
}

#[test]
fn lora_stage_requires_adapter_config_and_prior_stage() {
    let data = toy_data();
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg(Stage::Lora, 4, 2);
    c.lora = None;
    assert!(matches!(train(&c, &data, fresh(&data), dir.path()), Err(Error::Config(_))));
    assert!(matches!(
        train(&cfg(Stage::Diffusion, 4, 2), &data, fresh(&data), dir.path()),
        Err(Error::State(_))
    ));
}

#[test]
fn non_finite_loss_writes_crash_checkpoint() {
    let data = toy_data();
    let dir = tempfile::tempdir().unwrap();
    let ok = train(&cfg(Stage::Vae, 2, 2), &data, fresh(&data), dir.path()).unwrap();
    let mut broken = ok.state;
    let id = broken.model.store.id("vae.enc.conv_in.weight").unwrap();
    broken.model.store.get_mut(id).value.data_mut()[0] = f32::NAN;
    let err = train(&cfg(Stage::Vae, 4, 2), &data, Start::Resume(Box::new(broken)), dir.path()).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let crash = Checkpoint::load(&dir.path().join("crash_step2.ckpt")).unwrap();
    assert_eq!(crash.step, 2);
}

#[test]
fn batches_cover_each_epoch_once() {
    let n = 7;
    let mut seen: Vec<usize> = (0..7).flat_map(|s| batch_indices(3, n, 2, s)).collect();
    seen.truncate(14);
    let (mut e1, mut e2) = (seen[..7].to_vec(), seen[7..].to_vec());
    e1.sort();
    e2.sort();
    assert_eq!(e1, (0..7).collect::<Vec<_>>());
    assert_eq!(e2, (0..7).collect::<Vec<_>>());
    assert_eq!(batch_indices(3, n, 2, 4), batch_indices(3, n, 2, 4));
}

#[test]
fn config_validation() {
    let mut c = TrainConfig::default();
    assert!(c.validate().is_ok());
    c.checkpoint_every = c.total_steps + 1;
    assert!(c.validate().is_err());
    let parsed: TrainConfig = serde_json::from_str(r#"{"stage": "lora_finetune", "lora": {"targets": ["x"], "rank": 1, "alpha": 1.0}}"#).unwrap();
    assert_eq!(parsed.stage, Stage::Lora);
}
