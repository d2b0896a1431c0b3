use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use garden_core::image::ImageTensor;
use garden_core::panorama::{
    abutment_gradient, seam_gradient, stitch, to_equirectangular, write_bundle, EquirectOptions, PanoramaMeta,
    SceneSequence, DEFAULT_BAND_FRACTION, DEFAULT_WRAP_FRACTION, PANORAMA_JSON, PANORAMA_PNG,
};
use serde::Serialize;

use super::generate::ModelArgs;
use crate::manifest::RUN_FILE;
use crate::{usage, Ctx};

pub const STRIP_PNG: &str = "strip.png";
pub const SEAMS_JSON: &str = "seams.json";

#[derive(clap::Args, Debug)]
pub struct Args {
    #[command(flatten)]
    model: ModelArgs,
    /// Scene PNGs, left to right, at the model's resolution.
    #[arg(long, num_args = 2.., required = true)]
    scenes: Vec<PathBuf>,
    /// One prompt per seam, one per line.
    #[arg(long)]
    seam_prompts: PathBuf,
    /// Output bundle directory.
    #[arg(long)]
    out: PathBuf,
    /// Panorama height; the width is twice this.
    #[arg(long, default_value_t = 256)]
    height: usize,
    /// Columns generated between neighbouring scenes; defaults to half a scene.
    #[arg(long)]
    gap: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_BAND_FRACTION)]
    band_fraction: f64,
    #[arg(long, default_value_t = DEFAULT_WRAP_FRACTION)]
    wrap_fraction: f64,
}

#[derive(Serialize)]
struct Settings<'a> {
    #[serde(flatten)]
    model: &'a ModelArgs,
    scenes: Vec<PathBuf>,
    seam_prompts: PathBuf,
    out: PathBuf,
    height: usize,
    gap: usize,
    equirect: EquirectOptions,
}

#[derive(Serialize)]
struct SeamReport {
    /// Mean horizontal gradient over the generated seam columns.
    stitched: f64,
    /// Mean gradient across the hard edges of plain concatenation.
    naive: f64,
}

pub fn run(ctx: &Ctx, a: Args) -> Result<()> {
    let model = a.model.absolute(ctx);
    model.validate()?;
    let scenes: Vec<PathBuf> = a.scenes.iter().map(|p| ctx.path(p)).collect();
    for p in &scenes {
        super::require_file(p, "scene")?;
    }
    let prompts_path = ctx.path(&a.seam_prompts);
    super::require_file(&prompts_path, "seam prompt file")?;
    let prompts = super::read_lines(&prompts_path)?;
    if prompts.len() + 1 != scenes.len() {
        return Err(usage(format!(
            "{} scenes need {} seam prompts, {} given",
            scenes.len(),
            scenes.len() - 1,
            prompts.len()
        )));
    }
    let opts = EquirectOptions {
        band_fraction: a.band_fraction,
        wrap_fraction: a.wrap_fraction,
        ..EquirectOptions::default()
    };
    opts.validate().map_err(|e| usage(e.to_string()))?;
    if a.height == 0 || a.height % 2 == 1 {
        return Err(usage(format!("--height {} must be even and positive", a.height)));
    }

    let loaded = model.load()?;
    let side = loaded.side();
    let images = scenes
        .iter()
        .map(|p| {
            let im = ImageTensor::load_png(p)?;
            if im.width() != side || im.height() != side {
                return Err(usage(format!(
                    "scene {} is {}×{}; the model works at {side}×{side}",
                    p.display(),
                    im.width(),
                    im.height()
                )));
            }
            Ok(im)
        })
        .collect::<Result<Vec<_>>>()?;
    let seq = SceneSequence::new(images, prompts.clone(), a.gap).map_err(|e| usage(e.to_string()))?;
    let cell = loaded.model.config.vae.downsample_factor();
    garden_core::panorama::StripLayout::new(scenes.len(), side, seq.gap_width(), cell)
        .map_err(|e| usage(e.to_string()))?;

    let out = ctx.path(&a.out);
    let settings = Settings {
        model: &model,
        scenes: scenes.clone(),
        seam_prompts: prompts_path.clone(),
        out: out.clone(),
        height: a.height,
        gap: seq.gap_width(),
        equirect: opts,
    };
    let mut m = ctx.manifest("panorama").config(&settings, model.seed)?;
    model.record_inputs(&mut m)?;
    for p in scenes.iter().chain([&prompts_path]) {
        m.input(p)?;
    }
    for name in [RUN_FILE, PANORAMA_PNG, PANORAMA_JSON, STRIP_PNG, SEAMS_JSON] {
        m.output(&out.join(name));
    }
    m.write(&out.join(RUN_FILE))?;

    let options = model.options();
    let st = loaded.with_pipeline(|p| {
        Ok(stitch(&seq, cell, options.seed, &mut |task, seed| {
            p.inpaint(task, &garden_core::diffusion::SampleOptions { seed, ..options })
        })?)
    })?;
    st.strip.save_png(&out.join(STRIP_PNG))?;
    let pano = to_equirectangular(&st.strip, a.height, &opts)?;
    let names = scenes
        .iter()
        .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    let meta = PanoramaMeta::new(&pano, &st, names, prompts, &opts, options.seed)?;
    write_bundle(&out, &pano, &meta)?;
    let seams = SeamReport {
        stitched: seam_gradient(&st),
        naive: abutment_gradient(seq.images())?,
    };
    fs::write(out.join(SEAMS_JSON), serde_json::to_string_pretty(&seams)? + "\n").context("writing seam report")?;
    println!(
        "panorama {}×{} written to {} (seam gradient {:.4}, naive {:.4})",
        pano.width(),
        pano.height(),
        out.display(),
        seams.stitched,
        seams.naive
    );
    Ok(())
}
