use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::Tensor;

fn noise_image(h: usize, w: usize, seed: u64) -> ImageTensor {
    let t = Tensor::<f32>::randn(&[3 * h * w], 0.4, &mut ChaCha8Rng::seed_from_u64(seed));
    ImageTensor::new(h, w, t.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect()).unwrap()
}

fn scenes(n: usize, s: usize) -> Vec<ImageTensor> {
    (0..n).map(|k| noise_image(s, s, k as u64)).collect()
}

/// Ignores the source and returns a flat image tinted by the seed.
fn garbage_inpaint(task: &InpaintTask, seed: u64) -> Result<ImageTensor> {
    let s = task.source.height();
    Ok(ImageTensor::filled(s, s, [(seed % 7) as f32 / 7.0, -0.5, 0.25]))
}

#[test]
fn layout_arithmetic() {
    assert_eq!(strip_width(2, 32, 16), 80);
    assert_eq!(strip_width(4, 32, 16), 176);
    let l = StripLayout::new(2, 32, 16, 4).unwrap();
    assert_eq!(l.width, 80);
    assert_eq!(l.margin, 4);
    assert_eq!(l.gaps, vec![32..48]);
    assert_eq!(l.masks, vec![28..52]);
    assert_eq!(l.windows, vec![24..56]);
    assert!(matches!(StripLayout::new(2, 32, 3, 4), Err(Error::Config(_))));
    assert!(matches!(StripLayout::new(2, 32, 40, 4), Err(Error::Config(_))));
}

#[test]
fn sequence_validation() {
    assert!(matches!(SceneSequence::new(scenes(1, 8), vec![], None), Err(Error::Config(_))));
    assert!(matches!(SceneSequence::new(scenes(3, 8), vec!["a".into()], None), Err(Error::Arity(_))));
    let mut odd = scenes(2, 8);
    odd[1] = noise_image(8, 16, 1);
    assert!(matches!(SceneSequence::new(odd, vec!["a".into()], None), Err(Error::Dimension { .. })));
    assert_eq!(SceneSequence::new(scenes(2, 32), vec!["a".into()], None).unwrap().gap_width(), 16);
}

#[test]
fn stitch_keeps_unmasked_pixels_and_fills_in_order() {
    let imgs = scenes(3, 16);
    let seq = SceneSequence::new(imgs.clone(), vec!["left seam".into(), "right seam".into()], Some(8)).unwrap();
    let mut seen = Vec::new();
    let st = stitch(&seq, 2, 10, &mut |task, seed| {
        seen.push((task.prompt.clone(), seed));
        garbage_inpaint(task, seed)
    })
    .unwrap();
    assert_eq!(seen, vec![("left seam".to_string(), 10), ("right seam".to_string(), 11)]);
    assert_eq!(st.strip.width(), 3 * 16 + 2 * 8);
    for (k, im) in imgs.iter().enumerate() {
        let x0 = st.layout.scene_x[k];
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    if !st.layout.in_mask(x0 + x) {
                        assert_eq!(st.strip.get(c, y, x0 + x).to_bits(), im.get(c, y, x).to_bits());
                    }
                }
            }
        }
    }
    for (k, m) in st.layout.masks.iter().enumerate() {
        let tint = ((10 + k as u64) % 7) as f32 / 7.0;
        assert!(m.clone().all(|x| st.strip.get(0, 3, x) == tint));
    }
}

#[test]
fn equirect_shape_and_errors() {
    let strip = noise_image(16, 64, 3);
    let p = to_equirectangular(&strip, 256, &EquirectOptions::default()).unwrap();
    assert_eq!((p.width(), p.height()), (512, 256));
    assert_eq!(p.band, 64..192);
    assert!(matches!(to_equirectangular(&strip, 255, &EquirectOptions::default()), Err(Error::Config(_))));
    let short = noise_image(4, 64, 3);
    assert!(matches!(to_equirectangular(&short, 64, &EquirectOptions::default()), Err(Error::Config(_))));
}

#[test]
fn constant_strip_gives_constant_band_and_tones_outside() {
    let color = [0.2f32, -0.1, 0.6];
    let strip = ImageTensor::filled(16, 48, color);
    let opts = EquirectOptions::default();
    let p = to_equirectangular(&strip, 64, &opts).unwrap();
    for c in 0..3 {
        for y in p.band.clone() {
            for x in 0..p.width() {
                assert!((p.image.get(c, y, x) - color[c]).abs() < 1e-6);
            }
        }
        assert_eq!(p.image.get(c, 0, 10), opts.sky[c]);
        assert_eq!(p.image.get(c, p.height() - 1, 10), opts.ground[c]);
        // blending moves monotonically from the band edge to the tone
        let above: Vec<f32> = (0..p.band.start).map(|y| p.image.get(c, y, 10)).collect();
        let toward_sky = if opts.sky[c] > color[c] { 1.0 } else { -1.0 };
        assert!(above.windows(2).all(|w| (w[0] - w[1]) * toward_sky >= -1e-6));
    }
}

#[test]
fn bundle_round_trip() {
    let imgs = scenes(4, 16);
    let seq = SceneSequence::new(imgs, vec!["a".into(), "b".into(), "c".into()], None).unwrap();
    let st = stitch(&seq, 2, 0, &mut garbage_inpaint).unwrap();
    let opts = EquirectOptions::default();
    let p = to_equirectangular(&st.strip, 32, &opts).unwrap();
    let names: Vec<String> = (0..4).map(|k| format!("scene{k}.png")).collect();
    let meta = PanoramaMeta::new(&p, &st, names, seq.seam_prompts().to_vec(), &opts, 9).unwrap();
    assert!(meta.scene_yaws.iter().chain(&meta.seam_yaws).all(|y| (0.0..360.0).contains(y)));
    assert!(meta.scene_yaws.windows(2).all(|w| w[0] < w[1]));
    let dir = tempfile::tempdir().unwrap();
    let (png, json) = write_bundle(dir.path(), &p, &meta).unwrap();
    assert_eq!(read_meta(&json).unwrap(), meta);
    let back = ImageTensor::load_png(&png).unwrap();
    assert_eq!((back.width(), back.height()), (64, 32));
    let bytes = back.to_rgb8();
    let (w, h) = (64, 32);
    for y in 0..h {
        for c in 0..3 {
            assert_eq!(bytes[(y * w) * 3 + c], bytes[(y * w + w - 1) * 3 + c]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn strip_width_formula_holds(n in 2usize..6, side_cells in 2usize..6, gap_cells in 1usize..4) {
        let side = 8 * side_cells;
        let gap = 2 * gap_cells;
        prop_assume!(gap + 2 * seam_margin(side, gap) <= side);
        let seq = SceneSequence::new(scenes(n, side), vec!["s".into(); n - 1], Some(gap)).unwrap();
        let st = stitch(&seq, 2, 1, &mut garbage_inpaint).unwrap();
        prop_assert_eq!(st.strip.width(), n * side + (n - 1) * gap);
    }

    #[test]
    fn panorama_is_two_to_one_and_wraps(h_half in 4usize..40, w in 8usize..120, seed in 0u64..1000, band in 0.2f64..1.0) {
        let strip = noise_image(8, w, seed);
        let opts = EquirectOptions { band_fraction: band, ..EquirectOptions::default() };
        let p = to_equirectangular(&strip, 2 * h_half, &opts).unwrap();
        prop_assert_eq!(p.width(), 2 * p.height());
        prop_assert!(p.wrap_error() <= 1.0 / 255.0);
        let again = to_equirectangular(&strip, 2 * h_half, &opts).unwrap();
        prop_assert_eq!(again.image.to_rgb8(), p.image.to_rgb8());
    }
}
