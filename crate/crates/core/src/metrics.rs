//! PSNR and SSIM on the BT.601 luma channel, and directory evaluation.
//!
//! Every reduction sums its terms in a canonical order that does not depend
//! on pixel positions: per-pixel terms are sorted before summation, and SSIM
//! window sums group offsets into orbits of the square's symmetry group.
//! Applying the same flip/rotation to both inputs therefore leaves both
//! metrics unchanged to the last bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{bicubic_resize, luma_255, DatasetIndex, ImageF};
use crate::models::{Module, SrNetwork};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Order-independent sum.
fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Y planes on the 0-255 scale, cropped by `shave` on every side.
fn shaved_luma(a: &ImageF, b: &ImageF, shave: usize, op: &'static str) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height()),
        ));
    }
    let (w, h) = (a.width(), a.height());
    if 2 * shave >= w.min(h) {
        return Err(Error::shape(op, format!("shave {shave} too large for {w}x{h}")));
    }
    let crop = |img: &ImageF| -> Vec<f64> {
        let y = luma_255(img);
        (shave..h - shave)
            .flat_map(|r| y[r * w + shave..r * w + w - shave].to_vec())
            .collect()
    };
    Ok((crop(a), crop(b), h - 2 * shave, w - 2 * shave))
}

/// PSNR in dB with peak 255; identical images give `f64::INFINITY`.
pub fn psnr_y(a: &ImageF, b: &ImageF, shave: usize) -> Result<f64> {
    let (ya, yb, _, _) = shaved_luma(a, b, shave, "psnr_y")?;
    let mut sq: Vec<f64> = ya.iter().zip(&yb).map(|(p, q)| (p - q) * (p - q)).collect();
    let mse = sorted_sum(&mut sq) / sq.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

/// Window offsets grouped by orbit under the 8 symmetries of the square, each
/// orbit carrying its (shared) Gaussian weight.
struct OrbitWindow {
    orbits: Vec<(f64, Vec<(usize, usize)>)>,
}

impl OrbitWindow {
    fn new() -> Self {
        let r = SSIM_WINDOW / 2;
        let g: Vec<f64> = (0..SSIM_WINDOW)
            .map(|i| {
                let d = i as f64 - r as f64;
                (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
            })
            .collect();
        let total: f64 = g.iter().sum();
        let g: Vec<f64> = g.iter().map(|v| v / total).collect();
        let mut orbits = Vec::new();
        for a in 0..=r {
            for b in a..=r {
                let members: Vec<(usize, usize)> = (0..SSIM_WINDOW)
                    .flat_map(|i| (0..SSIM_WINDOW).map(move |j| (i, j)))
                    .filter(|&(i, j)| {
                        let (di, dj) = (i.abs_diff(r), j.abs_diff(r));
                        (di.min(dj), di.max(dj)) == (a, b)
                    })
                    .collect();
                orbits.push((g[r - a] * g[r - b], members));
            }
        }
        OrbitWindow { orbits }
    }

    /// Weighted window sum of `plane` with top-left corner `(y, x)`.
    fn weighted_sum(&self, plane: &[f64], width: usize, y: usize, x: usize, scratch: &mut Vec<f64>) -> f64 {
        let mut acc = 0.0;
        for (w, members) in &self.orbits {
            scratch.clear();
            scratch.extend(members.iter().map(|&(i, j)| plane[(y + i) * width + x + j]));
            acc += w * sorted_sum(scratch);
        }
        acc
    }
}

/// Mean SSIM over all valid 11x11 windows of the shaved Y planes.
pub fn ssim_y(a: &ImageF, b: &ImageF, shave: usize) -> Result<f64> {
    let (x, y, h, w) = shaved_luma(a, b, shave, "ssim_y")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim_y",
            format!("{w}x{h} after shaving is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let win = OrbitWindow::new();
    let mut scratch = Vec::with_capacity(8);
    let mut map = Vec::with_capacity((h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1));
    for r in 0..=h - SSIM_WINDOW {
        for c in 0..=w - SSIM_WINDOW {
            let mut stat = |p: &[f64]| win.weighted_sum(p, w, r, c, &mut scratch);
            let (mu1, mu2) = (stat(&x), stat(&y));
            let s1 = stat(&xx) - mu1 * mu1;
            let s2 = stat(&yy) - mu2 * mu2;
            let s12 = stat(&xy) - mu1 * mu2;
            map.push(ssim_formula(mu1, mu2, s1, s2, s12));
        }
    }
    Ok(sorted_sum(&mut map) / map.len() as f64)
}

fn ssim_formula(mu1: f64, mu2: f64, s1: f64, s2: f64, s12: f64) -> f64 {
    ((2.0 * mu1 * mu2 + SSIM_C1) * (2.0 * s12 + SSIM_C2)) / ((mu1 * mu1 + mu2 * mu2 + SSIM_C1) * (s1 + s2 + SSIM_C2))
}

/// What produces the SR image in an evaluation.
pub enum Upscaler {
    Bicubic { scale: usize },
    Network(SrNetwork<f32>),
}

impl Upscaler {
    pub fn scale(&self) -> usize {
        match self {
            Upscaler::Bicubic { scale } => *scale,
            Upscaler::Network(n) => n.config().scale,
        }
    }

    pub fn upscale(&self, lr: &ImageF) -> Result<ImageF> {
        let s = self.scale();
        match self {
            Upscaler::Bicubic { .. } => bicubic_resize(lr, lr.height() * s, lr.width() * s),
            Upscaler::Network(net) => ImageF::from_tensor(&net.infer(&lr.to_tensor())?, 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub shave: usize,
    /// Round the SR output to 8 bits before scoring.
    pub quantize: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scores: Vec<ImageScore>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub shave: usize,
}

impl EvalReport {
    pub fn from_scores(scores: Vec<ImageScore>, shave: usize) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Dataset("empty dataset: nothing to evaluate".into()));
        }
        let n = scores.len() as f64;
        let mean_psnr_db = scores.iter().map(|s| s.psnr_db).sum::<f64>() / n;
        let mean_ssim = scores.iter().map(|s| s.ssim).sum::<f64>() / n;
        Ok(EvalReport {
            scores,
            mean_psnr_db,
            mean_ssim,
            shave,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,psnr_db,ssim\n");
        for s in &self.scores {
            let _ = writeln!(out, "{},{:.6},{:.6}", s.name, s.psnr_db, s.ssim);
        }
        let _ = writeln!(out, "MEAN,{:.6},{:.6}", self.mean_psnr_db, self.mean_ssim);
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Scores `(name, lr, hr)` triples in order.
pub fn evaluate_pairs(upscaler: &Upscaler, pairs: &[(String, ImageF, ImageF)], opts: EvalOptions) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(pairs.len());
    for (name, lr, hr) in pairs {
        let mut sr = upscaler.upscale(lr)?;
        if (sr.width(), sr.height()) != (hr.width(), hr.height()) {
            return Err(Error::shape(
                "evaluate",
                format!("{name}: SR {}x{} vs HR {}x{}", sr.width(), sr.height(), hr.width(), hr.height()),
            ));
        }
        sr = if opts.quantize { sr.to_u8().to_float() } else { sr.clamped() };
        scores.push(ImageScore {
            name: name.clone(),
            psnr_db: psnr_y(&sr, hr, opts.shave)?,
            ssim: ssim_y(&sr, hr, opts.shave)?,
        });
    }
    EvalReport::from_scores(scores, opts.shave)
}

pub fn evaluate_dir(upscaler: &Upscaler, lr_dir: &Path, hr_dir: &Path, opts: EvalOptions) -> Result<EvalReport> {
    let pairs = DatasetIndex::from_dirs(lr_dir, hr_dir, upscaler.scale())?.load()?;
    evaluate_pairs(upscaler, &pairs, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::DihedralOp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageF {
        ImageF::new(w, h, (0..3 * w * h).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn noisy(img: &ImageF, rng: &mut ChaCha8Rng, amp: f32) -> ImageF {
        ImageF::new(
            img.width(),
            img.height(),
            img.data().iter().map(|v| v + amp * (rng.random::<f32>() - 0.5)).collect(),
        )
        .unwrap()
    }

    fn luma(img: &ImageF) -> Vec<f64> {
        let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
        (0..r.len())
            .map(|i| 16.0 + 65.481 * r[i] as f64 + 128.553 * g[i] as f64 + 24.966 * b[i] as f64)
            .collect()
    }

    fn oracle_psnr(a: &ImageF, b: &ImageF, shave: usize) -> f64 {
        let (w, h) = (a.width(), a.height());
        let (ya, yb) = (luma(a), luma(b));
        let mut acc = 0.0;
        let mut n = 0.0;
        for r in shave..h - shave {
            for c in shave..w - shave {
                let d = ya[r * w + c] - yb[r * w + c];
                acc += d * d;
                n += 1.0;
            }
        }
        10.0 * (65025.0 / (acc / n)).log10()
    }

    fn oracle_ssim(a: &ImageF, b: &ImageF) -> f64 {
        let (w, h) = (a.width(), a.height());
        let (x, y) = (luma(a), luma(b));
        let mut k = [[0.0f64; 11]; 11];
        let mut total = 0.0;
        for (i, row) in k.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / 4.5).exp();
                total += *v;
            }
        }
        let mut acc = 0.0;
        let mut count = 0.0;
        for r in 0..=h - 11 {
            for c in 0..=w - 11 {
                let (mut m1, mut m2, mut e11, mut e22, mut e12) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = k[i][j] / total;
                        let (p, q) = (x[(r + i) * w + c + j], y[(r + i) * w + c + j]);
                        m1 += wt * p;
                        m2 += wt * q;
                        e11 += wt * p * p;
                        e22 += wt * q * q;
                        e12 += wt * p * q;
                    }
                }
                let (v1, v2, cv) = (e11 - m1 * m1, e22 - m2 * m2, e12 - m1 * m2);
                let c1 = 6.5025;
                let c2 = 58.5225;
                acc += (2.0 * m1 * m2 + c1) * (2.0 * cv + c2) / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2));
                count += 1.0;
            }
        }
        acc / count
    }

    #[test]
    fn psnr_of_unit_mse() {
        // grey step of 1/219 moves Y by exactly one level
        let a = ImageF::new(8, 8, vec![0.5; 192]).unwrap();
        let b = ImageF::new(8, 8, vec![0.5 + 1.0 / 219.0; 192]).unwrap();
        let p = psnr_y(&a, &b, 0).unwrap();
        assert!((p - 48.1308).abs() < 1e-3, "{p}");
        assert!((psnr_from_mse(1.0) - 10.0 * 65025f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn identical_images() {
        let img = random_image(&mut ChaCha8Rng::seed_from_u64(1), 20, 16);
        assert_eq!(psnr_y(&img, &img, 2).unwrap(), f64::INFINITY);
        assert_eq!(ssim_y(&img, &img, 0).unwrap(), 1.0);
        assert_eq!(ssim_y(&img, &img, 2).unwrap(), 1.0);
    }

    #[test]
    fn random_pairs_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let a = random_image(&mut rng, 17, 14);
            let b = noisy(&a, &mut rng, 0.3);
            assert!((psnr_y(&a, &b, 2).unwrap() - oracle_psnr(&a, &b, 2)).abs() < 1e-4);
            assert!((ssim_y(&a, &b, 0).unwrap() - oracle_ssim(&a, &b)).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_offset_closed_form() {
        let a = ImageF::new(12, 12, vec![0.3; 432]).unwrap();
        let b = ImageF::new(12, 12, vec![0.3 + 50.0 / 219.0; 432]).unwrap();
        let (m1, m2) = (16.0 + 219.0 * 0.3f32 as f64, 16.0 + 219.0 * 0.3f32 as f64 + 50.0);
        let expect = (2.0 * m1 * m2 + SSIM_C1) / (m1 * m1 + m2 * m2 + SSIM_C1);
        assert!((ssim_y(&a, &b, 0).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn dihedral_invariance_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 16, 16);
        let b = noisy(&a, &mut rng, 0.2);
        let p0 = psnr_y(&a, &b, 2).unwrap();
        let s0 = ssim_y(&a, &b, 2).unwrap();
        for op in DihedralOp::ALL {
            let t = |img: &ImageF| {
                let out = op.apply(&img.to_tensor()).unwrap();
                ImageF::from_tensor(&out, 0).unwrap()
            };
            let (ta, tb) = (t(&a), t(&b));
            assert_eq!(psnr_y(&ta, &tb, 2).unwrap().to_bits(), p0.to_bits(), "{op}");
            assert_eq!(ssim_y(&ta, &tb, 2).unwrap().to_bits(), s0.to_bits(), "{op}");
        }
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_image(&mut rng, 24, 24);
        let noise: Vec<f32> = (0..a.data().len()).map(|_| rng.random::<f32>() - 0.5).collect();
        let scores: Vec<f64> = [0.01f32, 0.02, 0.05, 0.1, 0.2]
            .iter()
            .map(|&amp| {
                let b = ImageF::new(24, 24, a.data().iter().zip(&noise).map(|(v, n)| v + amp * n).collect()).unwrap();
                psnr_y(&a, &b, 2).unwrap()
            })
            .collect();
        assert!(scores.windows(2).all(|p| p[1] < p[0]), "{scores:?}");
    }

    #[test]
    fn shape_errors() {
        let a = ImageF::new(10, 10, vec![0.0; 300]).unwrap();
        let b = ImageF::new(12, 10, vec![0.0; 360]).unwrap();
        assert!(psnr_y(&a, &b, 0).is_err());
        assert!(psnr_y(&a, &a, 5).is_err());
        assert!(ssim_y(&a, &a, 0).is_err());
    }

    #[test]
    fn ssim_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_image(&mut rng, 14, 14);
        let inv = ImageF::new(14, 14, a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let s = ssim_y(&a, &inv, 0).unwrap();
        assert!((-1.0..=1.0).contains(&s) && s < 0.0, "{s}");
    }

    #[test]
    fn report_means_and_csv() {
        let scores = vec![
            ImageScore { name: "a".into(), psnr_db: 30.0, ssim: 0.8 },
            ImageScore { name: "b".into(), psnr_db: 32.0, ssim: 0.9 },
        ];
        let r = EvalReport::from_scores(scores, 2).unwrap();
        assert_eq!(r.mean_psnr_db, 31.0);
        assert!((r.mean_ssim - 0.85).abs() < 1e-15);
        assert_eq!(
            r.to_csv(),
            "name,psnr_db,ssim\na,30.000000,0.800000\nb,32.000000,0.900000\nMEAN,31.000000,0.850000\n"
        );
        assert!(EvalReport::from_scores(vec![], 2).is_err());
    }
}
