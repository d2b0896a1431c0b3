use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Area-average weights mapping `src` samples onto `dst` samples.
///
/// Output sample `j` covers the source interval `[j·r, (j+1)·r)` with
/// `r = src/dst`; each source sample contributes its overlap with that
/// interval, divided by `r`.
fn box_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let r = src as f64 / dst as f64;
    (0..dst)
        .map(|j| {
            let lo = j as f64 * r;
            let hi = lo + r;
            let mut taps = Vec::new();
            let mut i = lo.floor() as usize;
            while i < src && (i as f64) < hi {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, overlap / r));
                }
                i += 1;
            }
            taps
        })
        .collect()
}

/// Center-crops to a square on the short side, then box-resamples to
/// `side`×`side`.
pub fn scale_image(img: &ImageTensor, side: usize) -> Result<ImageTensor> {
    if side < 8 || !side.is_multiple_of(2) {
        return Err(Error::Config(format!("target side {side} must be even and at least 8")));
    }
    let (h, w) = (img.height(), img.width());
    if h < 2 || w < 2 {
        return Err(Error::Image(format!("{w}x{h} image is too small to scale")));
    }
    let sq = h.min(w);
    let (y0, x0) = ((h - sq) / 2, (w - sq) / 2);
    if sq == side {
        let cropped = img.crop_columns(x0, sq)?;
        let mut data = Vec::with_capacity(3 * sq * sq);
        for c in 0..3 {
            for y in y0..y0 + sq {
                for x in 0..sq {
                    data.push(cropped.get(c, y, x));
                }
            }
        }
        return ImageTensor::new(sq, sq, data);
    }
    let taps = box_weights(sq, side);
    let mut out = vec![0.0f32; 3 * side * side];
    let mut rows = vec![0.0f64; side * sq];
    for c in 0..3 {
        // horizontal pass: sq rows × side columns
        for y in 0..sq {
            for (j, t) in taps.iter().enumerate() {
                rows[y * side + j] = t.iter().map(|&(i, wt)| wt * img.get(c, y0 + y, x0 + i) as f64).sum();
            }
        }
        for (i, t) in taps.iter().enumerate() {
            for j in 0..side {
                let v: f64 = t.iter().map(|&(y, wt)| wt * rows[y * side + j]).sum();
                out[(c * side + i) * side + j] = v as f32;
            }
        }
    }
    ImageTensor::new(side, side, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> ImageTensor {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = (x as f32 / w as f32) * 0.9 - (y as f32 / h as f32) * 0.7 + c as f32 * 0.1;
                    data.push(v);
                }
            }
        }
        ImageTensor::new(h, w, data).unwrap()
    }

    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 { a } else { gcd(b, a % b) }
    }

    /// Independent oracle: integrate the piecewise-constant source over each
    /// destination cell by sub-sampling at a fine grid aligned to both.
    fn box_oracle(img: &ImageTensor, side: usize) -> Vec<f64> {
        let (h, w) = (img.height(), img.width());
        let sq = h.min(w);
        let (y0, x0) = ((h - sq) / 2, (w - sq) / 2);
        // Refine both grids to their common multiple: every fine cell lies
        // inside exactly one source pixel and one destination cell.
        let g = gcd(sq, side);
        let (per_dst, per_src) = (sq / g, side / g);
        let mut out = vec![0.0; 3 * side * side];
        for c in 0..3 {
            for i in 0..side {
                for j in 0..side {
                    let mut acc = 0.0;
                    for fy in i * per_dst..(i + 1) * per_dst {
                        for fx in j * per_dst..(j + 1) * per_dst {
                            acc += img.get(c, y0 + fy / per_src, x0 + fx / per_src) as f64;
                        }
                    }
                    out[(c * side + i) * side + j] = acc / (per_dst * per_dst) as f64;
                }
            }
        }
        out
    }

    #[test]
    fn square_input_of_target_side_is_unchanged() {
        let img = gradient(32, 32);
        assert_eq!(scale_image(&img, 32).unwrap(), img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = ImageTensor::filled(64, 64, [0.25, -0.5, 0.75]);
        let out = scale_image(&img, 32).unwrap();
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    assert!((out.get(c, y, x) - img.get(c, 0, 0)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn matches_box_filter_oracle_on_gradient() {
        let img = gradient(768, 1024);
        let side = 40; // 768/40 is fractional, exercising partial overlaps
        let out = scale_image(&img, side).unwrap();
        let oracle = box_oracle(&img, side);
        let worst = out
            .data()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (*a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1.0 / 255.0, "max diff {worst}");
    }

    #[test]
    fn degenerate_inputs_are_errors() {
        let tiny = ImageTensor::filled(1, 10, [0.0; 3]);
        assert!(matches!(scale_image(&tiny, 8), Err(Error::Image(_))));
        let img = gradient(16, 16);
        assert!(matches!(scale_image(&img, 9), Err(Error::Config(_))));
        assert!(matches!(scale_image(&img, 6), Err(Error::Config(_))));
    }
}
