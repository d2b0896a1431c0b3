use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use garden_core::image::ImageTensor;
use garden_core::panorama::read_meta;

fn garden(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_garden"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(workdir: &Path, args: &[&str]) -> String {
    let out = garden(workdir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Toy data plus vae and diffusion checkpoints for the tiny model.
fn trained(w: &Path) {
    ok(w, &["prepare-data", "--root", "data", "--synth", "24", "--side", "8"]);
    let common = ["--data", "data", "--checkpoint-every", "5", "--preview-count", "2", "--preview-steps", "4"];
    let mut vae = vec!["train", "--stage", "vae", "--out", "vae", "--model", "tiny", "--timesteps", "40", "--steps", "10"];
    vae.extend(common);
    ok(w, &vae);
    let mut diff = vec!["train", "--stage", "diffusion", "--init", "vae/final.ckpt", "--out", "diff", "--steps", "10"];
    diff.extend(common);
    ok(w, &diff);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    assert_eq!(code(&garden(w, &["frobnicate"])), 1);
    assert_eq!(code(&garden(w, &["sample", "--prompt", "x"])), 1);
    assert_eq!(code(&garden(w, &["--help"])), 0);

    let out = garden(w, &["train", "--stage", "lora", "--data", "data", "--out", "lora"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--lora-rank"));
    assert!(!w.join("lora").exists(), "validation failure wrote outputs");

    let out = garden(w, &["prepare-data", "--root", "d", "--synth", "4", "--ingest", "src"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    ok(w, &["prepare-data", "--root", "data", "--synth", "4", "--side", "8"]);
    fs::write(w.join("bad.ckpt"), b"not a checkpoint").unwrap();
    fs::copy(w.join("data/vocab.txt"), w.join("vocab.txt")).unwrap();
    let out = garden(w, &["sample", "--ckpt", "bad.ckpt", "--prompt", "a pond", "--steps", "4", "--out", "x.png"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!w.join("x.png").exists());
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    ok(w, &["prepare-data", "--root", "data", "--synth", "12", "--side", "8"]);
    fs::write(
        w.join("vae.toml"),
        "stage = \"vae\"\ndata = \"data\"\nmodel = \"tiny\"\ntimesteps = 40\ntotal_steps = 6\ncheckpoint_every = 3\nlr = 0.01\nbatch_size = 2\n",
    )
    .unwrap();
    ok(w, &["train", "--config", "vae.toml", "--out", "vae", "--lr", "0.005", "--preview-count", "1"]);
    let run = json(&w.join("vae/run.json"));
    assert_eq!(run["command"], "train");
    let cfg = &run["config"];
    assert_eq!(cfg["train"]["lr"], 0.005);
    assert_eq!(cfg["train"]["batch_size"], 2);
    assert_eq!(cfg["train"]["total_steps"], 6);
    assert_eq!(cfg["train"]["kl_weight"], 1e-3, "defaults are materialized");
    assert_eq!(cfg["timesteps"], 40);
    assert_eq!(run["seed"], 0);
    assert!(run["inputs"].as_object().unwrap().keys().any(|k| k.ends_with("vae.toml")));
    for f in ["final.ckpt", "step3.ckpt", "step6.ckpt", "loss.csv", "preview_step6.png", "split.json"] {
        assert!(w.join("vae").join(f).exists(), "{f}");
    }
    let split = json(&w.join("vae/split.json"));
    assert_eq!(split["train"].as_array().unwrap().len(), 10);
    assert_eq!(split["held_out"].as_array().unwrap().len(), 2);

    fs::write(w.join("bad.toml"), "stage = \"vae\"\nlearning_rate = 1.0\n").unwrap();
    let out = garden(w, &["train", "--config", "bad.toml", "--out", "bad"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn full_tiny_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    trained(w);
    let data_before = fs::read(w.join("data/metadata.jsonl")).unwrap();
    ok(w, &[
        "train", "--stage", "lora", "--data", "data", "--init", "diff/final.ckpt", "--out", "lora", "--steps", "6",
        "--checkpoint-every", "3", "--lora-rank", "2", "--preview-count", "1", "--preview-steps", "4",
    ]);
    assert!(w.join("lora/final.lora").exists() && w.join("lora/adapters_step6.lora").exists());
    assert_eq!(fs::read(w.join("data/metadata.jsonl")).unwrap(), data_before, "inputs untouched");

    let sample = |out: &str, adapter: bool| {
        let mut args = vec!["sample", "--ckpt", "diff/final.ckpt", "--prompt", "a pond", "--steps", "5", "--seed", "3", "--out", out];
        if adapter {
            args.extend(["--adapter", "lora/final.lora"]);
        }
        ok(w, &args);
        fs::read(w.join(out)).unwrap()
    };
    let a = sample("gen/a.png", false);
    let b = sample("gen/b.png", false);
    assert_eq!(a, b, "same flags give identical bytes");
    sample("gen/c.png", true);
    let run = json(&w.join("gen/c.run.json"));
    assert!(run["inputs"].as_object().unwrap().keys().any(|k| k.ends_with("final.lora")));
    let run = json(&w.join("gen/a.run.json"));
    assert_eq!(run["config"]["sampler"], "pndm");
    assert_eq!(run["outputs"][0], w.join("gen/a.png").display().to_string());

    fs::write(w.join("gen/a.png"), b"").unwrap();
    ok(w, &["replay", "--manifest", "gen/a.run.json"]);
    assert_eq!(fs::read(w.join("gen/a.png")).unwrap(), a, "replay reproduces the output");

    let mut mask = ImageTensor::filled(8, 8, [-1.0; 3]);
    for y in 0..8 {
        for x in 4..8 {
            for c in 0..3 {
                mask.set(c, y, x, 1.0);
            }
        }
    }
    mask.save_png(&w.join("mask.png")).unwrap();
    ok(w, &[
        "inpaint", "--ckpt", "diff/final.ckpt", "--prompt", "a pine", "--image", "data/000000.png", "--mask", "mask.png",
        "--steps", "5", "--out", "gen/in.png",
    ]);
    assert!(w.join("gen/in.run.json").exists());

    ok(w, &["prepare-data", "--root", "held", "--synth", "12", "--start", "24", "--side", "8"]);
    ok(w, &["train-encoder", "--data", "data", "--held-out", "held", "--out", "enc", "--model", "tiny", "--steps", "20", "--batch-size", "8"]);
    let metrics = json(&w.join("enc/metrics.json"));
    assert_eq!(metrics["trained_steps"].as_u64().unwrap() + metrics["skipped_steps"].as_u64().unwrap(), 20);
    assert_eq!(metrics["retrieval"]["distractors"], 8);

    fs::copy(w.join("data/000001.png"), w.join("gen/ref.png")).unwrap();
    fs::create_dir(w.join("refs")).unwrap();
    fs::copy(w.join("data/000001.png"), w.join("refs/ref.png")).unwrap();
    fs::copy(w.join("data/000002.png"), w.join("refs/b.png")).unwrap();
    fs::write(w.join("prompts.tsv"), "ref.png\ta pine\nb.png\ta pond\n").unwrap();
    ok(w, &["evaluate", "--encoder", "enc/encoder.gdev", "--images", "gen", "--prompts", "prompts.tsv", "--refs", "refs", "--out", "report.json"]);
    let report = json(&w.join("report.json"));
    assert_eq!(report["records"].as_array().unwrap().len(), 2);
    assert_eq!(report["records"][0]["image_image_cos"], 1.0);
    assert!(report["aggregate"].is_object());

    fs::write(w.join("seams.txt"), "a bridge over water\n").unwrap();
    ok(w, &[
        "panorama", "--ckpt", "diff/final.ckpt", "--scenes", "data/000003.png", "data/000004.png", "--seam-prompts",
        "seams.txt", "--steps", "5", "--gap", "4", "--height", "32", "--out", "pano",
    ]);
    let meta = read_meta(&w.join("pano/panorama.json")).unwrap();
    assert_eq!((meta.width, meta.height), (64, 32));
    assert_eq!(meta.scene_order, vec!["000003.png", "000004.png"]);
    let png = ImageTensor::load_png(&w.join("pano/panorama.png")).unwrap();
    assert_eq!((png.width(), png.height()), (64, 32));
    let strip = ImageTensor::load_png(&w.join("pano/strip.png")).unwrap();
    assert_eq!(strip.width(), 2 * 8 + 4);

    let out = garden(w, &[
        "panorama", "--ckpt", "diff/final.ckpt", "--scenes", "data/000003.png", "data/000004.png", "--seam-prompts",
        "prompts.tsv", "--out", "pano2",
    ]);
    assert_eq!(code(&out), 1, "two seam prompts for two scenes");
}

#[test]
fn ingest_applies_the_filter() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    let src = w.join("src");
    fs::create_dir(&src).unwrap();
    ImageTensor::filled(2000, 3000, [0.1, 0.2, 0.3]).save_png(&src.join("big.png")).unwrap();
    for n in ["big_nocap.png", "big_noarch.png"] {
        fs::copy(src.join("big.png"), src.join(n)).unwrap();
    }
    ImageTensor::filled(100, 100, [0.0; 3]).save_png(&src.join("small.png")).unwrap();
    fs::write(
        src.join("candidates.jsonl"),
        concat!(
            "{\"file_name\": \"big.png\", \"additional_feature\": \"a pavilion by the pond\", \"has_architecture\": true}\n",
            "{\"file_name\": \"big_nocap.png\", \"additional_feature\": \"\", \"has_architecture\": true}\n",
            "{\"file_name\": \"big_noarch.png\", \"additional_feature\": \"a pine\", \"has_architecture\": false}\n",
            "{\"file_name\": \"small.png\", \"additional_feature\": \"a bridge\", \"has_architecture\": true}\n",
        ),
    )
    .unwrap();
    ok(w, &["prepare-data", "--root", "data", "--ingest", "src", "--side", "16"]);
    let report = json(&w.join("data/filter_report.json"));
    assert_eq!(report["accepted"], serde_json::json!(["big.png"]));
    let reasons: Vec<&str> = report["rejected"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["reason"].as_str().unwrap())
        .collect();
    assert_eq!(reasons, vec!["missing_caption", "missing_architecture", "resolution"]);
    let manifest = fs::read_to_string(w.join("data/metadata.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 1);
    let img = ImageTensor::load_png(&w.join("data/big.png")).unwrap();
    assert_eq!((img.width(), img.height()), (16, 16));
}
