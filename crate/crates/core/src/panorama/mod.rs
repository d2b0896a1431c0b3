//! Scene strips stitched with inpainted seams, and their 2:1
//! equirectangular projection.

use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::InpaintTask;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const PANORAMA_PNG: &str = "panorama.png";
pub const PANORAMA_JSON: &str = "panorama.json";
pub const DEFAULT_BAND_FRACTION: f64 = 0.5;
pub const DEFAULT_WRAP_FRACTION: f64 = 0.02;

/// Ordered square scenes and the prompts for the gaps between them.
#[derive(Debug, Clone)]
pub struct SceneSequence {
    images: Vec<ImageTensor>,
    seam_prompts: Vec<String>,
    gap_width: usize,
}

impl SceneSequence {
    /// `gap_width` defaults to half the scene side.
    pub fn new(images: Vec<ImageTensor>, seam_prompts: Vec<String>, gap_width: Option<usize>) -> Result<Self> {
        if images.len() < 2 {
            return Err(Error::Config(format!("a scene sequence needs at least 2 images, got {}", images.len())));
        }
        let s = images[0].height();
        if let Some(bad) = images.iter().find(|im| im.height() != s || im.width() != s) {
            return Err(Error::dim("scene sequence", &[bad.height(), bad.width()], &[s, s]));
        }
        if seam_prompts.len() != images.len() - 1 {
            return Err(Error::Arity(format!(
                "{} scenes need {} seam prompts, got {}",
                images.len(),
                images.len() - 1,
                seam_prompts.len()
            )));
        }
        Ok(SceneSequence {
            gap_width: gap_width.unwrap_or(s / 2),
            images,
            seam_prompts,
        })
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn seam_prompts(&self) -> &[String] {
        &self.seam_prompts
    }

    pub fn gap_width(&self) -> usize {
        self.gap_width
    }

    pub fn side(&self) -> usize {
        self.images[0].height()
    }
}

/// Column geometry of a stitched strip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StripLayout {
    pub width: usize,
    pub side: usize,
    pub gap_width: usize,
    pub margin: usize,
    /// Left edge of each scene.
    pub scene_x: Vec<usize>,
    /// Blank columns between scenes `k` and `k+1`.
    pub gaps: Vec<Range<usize>>,
    /// Gap plus `margin` columns into each neighbour.
    pub masks: Vec<Range<usize>>,
    /// `side`-wide inpainting window around each mask.
    pub windows: Vec<Range<usize>>,
}

/// `n·S + (n−1)·gap`.
pub fn strip_width(n: usize, side: usize, gap: usize) -> usize {
    n * side + n.saturating_sub(1) * gap
}

/// Columns each seam mask reaches into the neighbouring scenes.
pub fn seam_margin(side: usize, gap: usize) -> usize {
    (side / 8).min(gap / 2)
}

impl StripLayout {
    /// `cell` is the latent cell size of the inpainting model.
    pub fn new(n: usize, side: usize, gap: usize, cell: usize) -> Result<Self> {
        if gap < cell {
            return Err(Error::Config(format!("gap width {gap} is narrower than the latent cell size {cell}")));
        }
        let margin = seam_margin(side, gap);
        if gap + 2 * margin > side {
            return Err(Error::Config(format!(
                "seam band of {} columns does not fit the {side}-wide inpainting window",
                gap + 2 * margin
            )));
        }
        let scene_x: Vec<usize> = (0..n).map(|k| k * (side + gap)).collect();
        let mut gaps = Vec::with_capacity(n - 1);
        let mut masks = Vec::with_capacity(n - 1);
        let mut windows = Vec::with_capacity(n - 1);
        for k in 0..n.saturating_sub(1) {
            let g0 = scene_x[k] + side;
            gaps.push(g0..g0 + gap);
            masks.push(g0 - margin..g0 + gap + margin);
            let w0 = g0 - (side - gap) / 2;
            windows.push(w0..w0 + side);
        }
        Ok(StripLayout {
            width: strip_width(n, side, gap),
            side,
            gap_width: gap,
            margin,
            scene_x,
            gaps,
            masks,
            windows,
        })
    }

    pub fn in_mask(&self, x: usize) -> bool {
        self.masks.iter().any(|m| m.contains(&x))
    }

    /// Yaw in degrees of strip column `x` (pixel centre) once the strip
    /// spans the full circle.
    pub fn yaw(&self, x: f64) -> f64 {
        (360.0 * (x + 0.5) / self.width as f64).rem_euclid(360.0)
    }

    pub fn scene_yaws(&self) -> Vec<f64> {
        self.scene_x.iter().map(|&x| self.yaw(x as f64 + self.side as f64 / 2.0 - 0.5)).collect()
    }

    pub fn seam_yaws(&self) -> Vec<f64> {
        self.gaps
            .iter()
            .map(|g| self.yaw((g.start + g.end) as f64 / 2.0 - 0.5))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Stitched {
    pub strip: ImageTensor,
    pub layout: StripLayout,
}

/// Lays scenes out with blank gaps, then fills the gaps left to right.
///
/// Each fill sees the strip as left by the previous one. `inpaint` gets a
/// `side`-wide window with the seam mask and the seam's seed `seed + k`;
/// only masked columns of its result are written back, so every other
/// pixel keeps its source bits.
pub fn stitch(
    seq: &SceneSequence,
    cell: usize,
    seed: u64,
    inpaint: &mut dyn FnMut(&InpaintTask, u64) -> Result<ImageTensor>,
) -> Result<Stitched> {
    let side = seq.side();
    let layout = StripLayout::new(seq.images.len(), side, seq.gap_width, cell)?;
    let mut strip = ImageTensor::filled(side, layout.width, [0.0; 3]);
    for (im, &x) in seq.images.iter().zip(&layout.scene_x) {
        strip.paste_columns(im, x)?;
    }
    for (k, prompt) in seq.seam_prompts.iter().enumerate() {
        let win = &layout.windows[k];
        let source = strip.crop_columns(win.start, side)?;
        let mask_cols = layout.masks[k].start - win.start..layout.masks[k].end - win.start;
        let mut mask = vec![0u8; side * side];
        for y in 0..side {
            for x in mask_cols.clone() {
                mask[y * side + x] = 1;
            }
        }
        let task = InpaintTask::new(source, mask, prompt.clone())?;
        let filled = inpaint(&task, seed.wrapping_add(k as u64))?;
        if filled.height() != side || filled.width() != side {
            return Err(Error::dim("stitch inpaint", &[filled.height(), filled.width()], &[side, side]));
        }
        let band = filled.crop_columns(mask_cols.start, mask_cols.len())?;
        strip.paste_columns(&band, layout.masks[k].start)?;
    }
    Ok(Stitched { strip, layout })
}

/// Scenes butted together with no gap, for comparing seam roughness.
pub fn naive_concat(images: &[ImageTensor]) -> Result<ImageTensor> {
    ImageTensor::tile_horizontal(images)
}

/// Mean absolute horizontal difference between neighbouring columns whose
/// left member lies in `cols` (all channels and rows).
pub fn horizontal_gradient(img: &ImageTensor, cols: Range<usize>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..3 {
        for y in 0..img.height() {
            for x in cols.clone() {
                if x + 1 < img.width() {
                    sum += (img.get(c, y, x + 1) - img.get(c, y, x)).abs() as f64;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean horizontal gradient over every seam band of a stitched strip.
pub fn seam_gradient(st: &Stitched) -> f64 {
    let g: Vec<f64> = st.layout.masks.iter().map(|m| horizontal_gradient(&st.strip, m.start..m.end - 1)).collect();
    g.iter().sum::<f64>() / g.len() as f64
}

/// Mean horizontal gradient across each raw scene boundary.
pub fn abutment_gradient(images: &[ImageTensor]) -> Result<f64> {
    let joined = naive_concat(images)?;
    let s = images[0].width();
    let g: Vec<f64> = (1..images.len()).map(|k| horizontal_gradient(&joined, k * s - 1..k * s)).collect();
    Ok(g.iter().sum::<f64>() / g.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquirectOptions {
    /// Share of the output height holding the strip, centred vertically.
    pub band_fraction: f64,
    pub sky: [f32; 3],
    pub ground: [f32; 3],
    /// Share of the width used to blend the wrap seam.
    pub wrap_fraction: f64,
}

impl Default for EquirectOptions {
    fn default() -> Self {
        EquirectOptions {
            band_fraction: DEFAULT_BAND_FRACTION,
            sky: [0.55, 0.7, 0.85],
            ground: [-0.35, -0.4, -0.5],
            wrap_fraction: DEFAULT_WRAP_FRACTION,
        }
    }
}

impl EquirectOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.band_fraction > 0.0 && self.band_fraction <= 1.0) {
            return Err(Error::Config(format!("band fraction {} outside (0, 1]", self.band_fraction)));
        }
        if !(self.wrap_fraction > 0.0 && self.wrap_fraction <= 0.5) {
            return Err(Error::Config(format!("wrap fraction {} outside (0, 0.5]", self.wrap_fraction)));
        }
        if self.sky.iter().chain(&self.ground).any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Config("sky and ground tones must lie in [-1, 1]".into()));
        }
        Ok(())
    }
}

/// `W = 2H` image whose first and last columns agree.
#[derive(Debug, Clone, PartialEq)]
pub struct PanoramaImage {
    pub image: ImageTensor,
    /// Rows `band.start..band.end` hold the resampled strip.
    pub band: Range<usize>,
    pub wrap: bool,
}

impl PanoramaImage {
    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    /// Largest per-channel difference between column 0 and column W−1.
    pub fn wrap_error(&self) -> f32 {
        let (h, w) = (self.height(), self.width());
        let mut worst = 0.0f32;
        for c in 0..3 {
            for y in 0..h {
                worst = worst.max((self.image.get(c, y, 0) - self.image.get(c, y, w - 1)).abs());
            }
        }
        worst
    }
}

/// Bilinear sample with pixel-centre alignment and edge clamping.
fn resample(src: &ImageTensor, h: usize, w: usize) -> Vec<f32> {
    let (sh, sw) = (src.height(), src.width());
    let coord = |i: usize, n: usize, sn: usize| -> (usize, usize, f32) {
        let p = ((i as f64 + 0.5) * sn as f64 / n as f64 - 0.5).clamp(0.0, (sn - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(sn - 1);
        (lo, hi, (p - lo as f64) as f32)
    };
    let xs: Vec<_> = (0..w).map(|x| coord(x, w, sw)).collect();
    let mut out = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h, sh);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let top = src.get(c, y0, x0) * (1.0 - fx) + src.get(c, y0, x1) * fx;
                let bot = src.get(c, y1, x0) * (1.0 - fx) + src.get(c, y1, x1) * fx;
                out[(c * h + y) * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Places the strip, resampled to `2·h_out` wide, in the central band;
/// extends its edge rows into flat sky (above) and ground (below) tones,
/// then blends the wrap seam so columns 0 and W−1 match exactly.
pub fn to_equirectangular(strip: &ImageTensor, h_out: usize, opts: &EquirectOptions) -> Result<PanoramaImage> {
    opts.validate()?;
    if h_out == 0 || !h_out.is_multiple_of(2) {
        return Err(Error::Config(format!("panorama height {h_out} must be even and positive")));
    }
    if strip.height() < 8 {
        return Err(Error::Config(format!("strip height {} is below 8", strip.height())));
    }
    let w = 2 * h_out;
    let band_h = ((h_out as f64 * opts.band_fraction).round() as usize).clamp(1, h_out);
    let top = (h_out - band_h) / 2;
    let band = top..top + band_h;
    let body = resample(strip, band_h, w);
    let mut data = vec![0.0f32; 3 * h_out * w];
    for c in 0..3 {
        for y in 0..h_out {
            let row = (c * h_out + y) * w;
            if band.contains(&y) {
                let src = (c * band_h + (y - top)) * w;
                data[row..row + w].copy_from_slice(&body[src..src + w]);
                continue;
            }
            let (edge, tone, t) = if y < top {
                (0, opts.sky[c], (top - y) as f32 / top as f32)
            } else {
                let below = h_out - band.end;
                (band_h - 1, opts.ground[c], (y + 1 - band.end) as f32 / below as f32)
            };
            let src = (c * band_h + edge) * w;
            for x in 0..w {
                data[row + x] = body[src + x] * (1.0 - t) + tone * t;
            }
        }
    }
    // Half the window on each side, pulled toward the mean of the two edge
    // columns; the outermost columns land on that mean exactly.
    let half = ((w as f64 * opts.wrap_fraction / 2.0).round() as usize).clamp(1, w / 2);
    for c in 0..3 {
        for y in 0..h_out {
            let row = (c * h_out + y) * w;
            let m = 0.5 * (data[row] + data[row + w - 1]);
            for j in 0..half {
                let a = 1.0 - j as f32 / half as f32;
                for x in [j, w - 1 - j] {
                    let v = data[row + x];
                    data[row + x] = if j == 0 { m } else { v * (1.0 - a) + m * a };
                }
            }
        }
    }
    Ok(PanoramaImage {
        image: ImageTensor::new(h_out, w, data)?,
        band,
        wrap: true,
    })
}

/// Contents of `panorama.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanoramaMeta {
    pub image: String,
    pub width: usize,
    pub height: usize,
    /// Scene identifiers, left to right.
    pub scene_order: Vec<String>,
    pub seam_prompts: Vec<String>,
    /// Yaw of each scene centre, degrees in `[0, 360)`.
    pub scene_yaws: Vec<f64>,
    /// Yaw of each seam band centre, degrees in `[0, 360)`.
    pub seam_yaws: Vec<f64>,
    pub band_fraction: f64,
    pub gap_width: usize,
    pub seed: u64,
    pub initial_yaw: f64,
    pub initial_pitch: f64,
}

impl PanoramaMeta {
    pub fn new(pano: &PanoramaImage, st: &Stitched, scene_order: Vec<String>, seam_prompts: Vec<String>, opts: &EquirectOptions, seed: u64) -> Result<Self> {
        if scene_order.len() != st.layout.scene_x.len() || seam_prompts.len() != st.layout.gaps.len() {
            return Err(Error::Arity("scene names or seam prompts do not match the strip".into()));
        }
        let scene_yaws = st.layout.scene_yaws();
        Ok(PanoramaMeta {
            image: PANORAMA_PNG.into(),
            width: pano.width(),
            height: pano.height(),
            scene_order,
            seam_prompts,
            initial_yaw: scene_yaws[0],
            scene_yaws,
            seam_yaws: st.layout.seam_yaws(),
            band_fraction: opts.band_fraction,
            gap_width: st.layout.gap_width,
            seed,
            initial_pitch: 0.0,
        })
    }
}

/// Writes `panorama.png` and `panorama.json` into `dir`.
pub fn write_bundle(dir: &Path, pano: &PanoramaImage, meta: &PanoramaMeta) -> Result<(PathBuf, PathBuf)> {
    if pano.width() != 2 * pano.height() {
        return Err(Error::Image(format!("panorama is {}x{}, not 2:1", pano.width(), pano.height())));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let png = dir.join(PANORAMA_PNG);
    let json = dir.join(PANORAMA_JSON);
    pano.image.save_png(&png)?;
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok((png, json))
}

pub fn read_meta(path: &Path) -> Result<PanoramaMeta> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests;
