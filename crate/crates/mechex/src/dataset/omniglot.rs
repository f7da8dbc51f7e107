//! Omniglot-style ingestion: a directory tree of PNG letters, resized to
//! 46x46 with polarity normalized to bright strokes on dark background.

use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use super::{ImageSet, Source, OMNIGLOT_SIDE};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Load every readable PNG under `dir` (any nesting), sorted by path.
/// Unreadable files are skipped with a warning on stderr; zero readable
/// files is an error.
pub fn ingest_omniglot(dir: &Path) -> Result<ImageSet> {
    let mut paths: Vec<PathBuf> = WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();

    let mut planes = Vec::new();
    for path in &paths {
        match load_one(path) {
            Ok(plane) => planes.push(plane),
            Err(e) => eprintln!("warning: skipping {}: {e}", path.display()),
        }
    }
    if planes.is_empty() {
        return Err(Error::Data {
            path: dir.to_path_buf(),
            detail: "no readable PNG files".into(),
        });
    }
    let n = planes.len();
    let mut data = Vec::with_capacity(n * OMNIGLOT_SIDE * OMNIGLOT_SIDE);
    for p in planes {
        data.extend_from_slice(&p);
    }
    ImageSet::new(
        Tensor::new(vec![n, 1, OMNIGLOT_SIDE, OMNIGLOT_SIDE], data)?,
        None,
        Source::Omniglot,
    )
}

fn load_one(path: &Path) -> Result<Vec<Real>> {
    let img = image::open(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let pixels: Vec<Real> = gray.as_raw().iter().map(|&b| b as Real / 255.0).collect();
    let resized = bilinear_resize(&pixels, h, w, OMNIGLOT_SIDE, OMNIGLOT_SIDE);
    Ok(normalize_polarity(resized)
        .into_iter()
        .map(crate::mechanisms::quantize_intensity)
        .collect())
}

/// Invert so strokes are bright on dark (matching MNIST digits) when the
/// image is mostly bright. Uniform images are left untouched.
pub fn normalize_polarity(mut pixels: Vec<Real>) -> Vec<Real> {
    let min = pixels.iter().cloned().fold(Real::INFINITY, Real::min);
    let max = pixels.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    if max - min < 1e-6 {
        return pixels;
    }
    let mean = pixels.iter().sum::<Real>() / pixels.len() as Real;
    if mean > 0.5 {
        for p in &mut pixels {
            *p = 1.0 - *p;
        }
    }
    pixels
}

/// Standard bilinear resampling (half-pixel centers).
pub fn bilinear_resize(src: &[Real], h: usize, w: usize, oh: usize, ow: usize) -> Vec<Real> {
    let mut out = vec![0.0; oh * ow];
    let sy = h as Real / oh as Real;
    let sx = w as Real / ow as Real;
    for y in 0..oh {
        let fy = ((y as Real + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as Real);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as Real;
        for x in 0..ow {
            let fx = ((x as Real + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as Real);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as Real;
            let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
            let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
            out[y * ow + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma};

    fn write_png(path: &Path, pixels: impl Fn(u32, u32) -> u8, side: u32) {
        let img = GrayImage::from_fn(side, side, |x, y| Luma([pixels(x, y)]));
        img.save(path).unwrap();
    }

    #[test]
    fn uniform_black_image_stays_dark() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), |_, _| 0, 105);
        let set = ingest_omniglot(dir.path()).unwrap();
        assert_eq!(set.images.shape(), &[1, 1, 46, 46]);
        assert!(set.images.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn white_cross_on_black_resizes_to_full_intensity_cross() {
        let dir = tempfile::tempdir().unwrap();
        // thick solid cross through the center of a 105x105 black field
        write_png(
            &dir.path().join("cross.png"),
            |x, y| {
                if (45..60).contains(&x) || (45..60).contains(&y) {
                    255
                } else {
                    0
                }
            },
            105,
        );
        let set = ingest_omniglot(dir.path()).unwrap();
        let data = set.images.data();
        let max = data.iter().cloned().fold(0.0, Real::max);
        assert!((max - 1.0).abs() < 1e-6, "max {max}");

        // compare against an independent nested-loop bilinear oracle
        let mut src = vec![0.0; 105 * 105];
        for y in 0..105 {
            for x in 0..105 {
                if (45..60).contains(&x) || (45..60).contains(&y) {
                    src[y * 105 + x] = 1.0;
                }
            }
        }
        let expect = bilinear_oracle(&src, 105, 105, 46, 46);
        // ingestion quantizes to the 8-bit lattice, so allow half a step
        for (a, b) in data.iter().zip(&expect) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-4, "{a} vs {b}");
        }
    }

    // Direct per-pixel bilinear interpolation, written independently of the
    // implementation above.
    fn bilinear_oracle(src: &[Real], h: usize, w: usize, oh: usize, ow: usize) -> Vec<Real> {
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let fy = (((y as f64 + 0.5) * h as f64 / oh as f64) - 0.5).clamp(0.0, h as f64 - 1.0);
                let fx = (((x as f64 + 0.5) * w as f64 / ow as f64) - 0.5).clamp(0.0, w as f64 - 1.0);
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
                let v = src[y0 * w + x0] as f64 * (1.0 - dy) * (1.0 - dx)
                    + src[y0 * w + x1] as f64 * (1.0 - dy) * dx
                    + src[y1 * w + x0] as f64 * dy * (1.0 - dx)
                    + src[y1 * w + x1] as f64 * dy * dx;
                out[y * ow + x] = v as Real;
            }
        }
        out
    }

    #[test]
    fn mostly_white_image_gets_inverted() {
        let dir = tempfile::tempdir().unwrap();
        // black stroke on white: typical letter scan
        write_png(
            &dir.path().join("letter.png"),
            |x, y| if x == y { 0 } else { 255 },
            60,
        );
        let set = ingest_omniglot(dir.path()).unwrap();
        // after inversion, mean must be low (mostly dark)
        assert!(set.images.mean() < 0.5);
    }

    #[test]
    fn output_order_is_path_sorted() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("zz")).unwrap();
        write_png(&dir.path().join("zz/late.png"), |_, _| 0, 10);
        write_png(&dir.path().join("aa.png"), |_, _| 51, 10);
        let set = ingest_omniglot(dir.path()).unwrap();
        assert_eq!(set.len(), 2);
        // aa.png (value 0.2 everywhere) sorts before zz/late.png (zeros)
        let first = &set.images.data()[..46 * 46];
        assert!(first.iter().all(|&v| (v - 0.2).abs() < 1e-2));
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest_omniglot(dir.path()),
            Err(Error::Data { .. })
        ));
    }
}
