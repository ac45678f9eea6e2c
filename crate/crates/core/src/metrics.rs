//! PSNR, multi-scale SSIM and bit rate.

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Reported in place of an infinite dB value.
pub const DB_CAP: f64 = 99.0;

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const LEVEL_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Floor applied to the per-level terms before the weighted power.
const TERM_FLOOR: f64 = 1e-6;

pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let sq = a.zip_map(b, "psnr", |x, y| (x - y) * (x - y))?;
    let mse = sq.sum() / sq.numel() as f64;
    if mse == 0.0 {
        return Ok(DB_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(DB_CAP))
}

/// `-10 log10(1 - v)`, capped at [`DB_CAP`].
pub fn ms_ssim_db(v: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!("MS-SSIM {v} outside [0, 1]")));
    }
    if v == 1.0 {
        return Ok(DB_CAP);
    }
    Ok((-10.0 * (1.0 - v).log10()).min(DB_CAP))
}

pub fn bpp(total_bits: u64, height: usize, width: usize) -> f64 {
    total_bits as f64 / (height * width) as f64
}

/// `min(5, floor(log2(min(H, W) / 8)))`.
pub fn ms_ssim_levels(height: usize, width: usize) -> usize {
    let side = height.min(width) / 8;
    if side == 0 {
        return 0;
    }
    (usize::BITS - 1 - side.leading_zeros()).min(5) as usize
}

fn gaussian_window() -> Tensor {
    let c = (WINDOW / 2) as f64;
    let g: Vec<f64> = (0..WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut k = Vec::with_capacity(WINDOW * WINDOW);
    for y in &g {
        for x in &g {
            k.push(y * x / (s * s));
        }
    }
    Tensor::new(&[WINDOW, WINDOW], k).expect("window shape")
}

/// Mean luminance and contrast-structure terms at one scale.
fn level_terms(g: &mut Graph, x: Var, y: Var, win: &Tensor) -> Result<(Var, Var)> {
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mx = g.filter2d_valid(x, win)?;
    let my = g.filter2d_valid(y, win)?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let exx = g.filter2d_valid(xx, win)?;
    let eyy = g.filter2d_valid(yy, win)?;
    let exy = g.filter2d_valid(xy, win)?;
    let mx2 = g.mul(mx, mx)?;
    let my2 = g.mul(my, my)?;
    let mxy = g.mul(mx, my)?;
    let vx = g.sub(exx, mx2)?;
    let vy = g.sub(eyy, my2)?;
    let cov = g.sub(exy, mxy)?;

    let ln = g.mul_scalar(mxy, 2.0)?;
    let ln = g.add_scalar(ln, c1)?;
    let ld = g.add(mx2, my2)?;
    let ld = g.add_scalar(ld, c1)?;
    let l = g.div(ln, ld)?;

    let cn = g.mul_scalar(cov, 2.0)?;
    let cn = g.add_scalar(cn, c2)?;
    let cd = g.add(vx, vy)?;
    let cd = g.add_scalar(cd, c2)?;
    let cs = g.div(cn, cd)?;
    Ok((g.mean(l)?, g.mean(cs)?))
}

/// Differentiable MS-SSIM of two `[C, H, W]` images with values in `[0, 1]`.
pub fn ms_ssim_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.value(a).shape().to_vec(), g.value(b).shape().to_vec());
    if sa != sb || sa.len() != 3 {
        return Err(shape_err("ms_ssim", format!("{sa:?} vs {sb:?}")));
    }
    let levels = ms_ssim_levels(sa[1], sa[2]);
    if levels == 0 {
        return Err(shape_err("ms_ssim", format!("image {}x{} below 16 pixels", sa[1], sa[2])));
    }
    let wsum: f64 = LEVEL_WEIGHTS[..levels].iter().sum();
    let win = gaussian_window();
    let (mut x, mut y) = (a, b);
    let mut acc: Option<Var> = None;
    for (lvl, &lw) in LEVEL_WEIGHTS[..levels].iter().enumerate() {
        let (l, cs) = level_terms(g, x, y, &win)?;
        let w = lw / wsum;
        let mut terms = vec![cs];
        if lvl + 1 == levels {
            terms.push(l);
        } else {
            x = g.avg_pool2(x)?;
            y = g.avg_pool2(y)?;
        }
        for t in terms {
            let t = g.clamp_min(t, TERM_FLOOR)?;
            let t = g.log(t)?;
            let t = g.mul_scalar(t, w)?;
            acc = Some(match acc {
                Some(s) => g.add(s, t)?,
                None => t,
            });
        }
    }
    g.exp(acc.expect("at least one level"))
}

pub fn ms_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    let v = ms_ssim_var(&mut g, x, y)?;
    Ok(g.value(v).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{finite_difference_check, FdOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn smooth(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Tensor::rand_uniform(&[3, h, w], -0.1, 0.1, &mut rng);
        let mut t = Tensor::zeros(&[3, h, w]);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let k = (c * h + y) * w + x;
                    let base = 0.5 + 0.3 * ((x as f64 * 0.4 + c as f64).sin() * (y as f64 * 0.3).cos());
                    t.data_mut()[k] = base + noise.data()[k];
                }
            }
        }
        t
    }

    #[test]
    fn psnr_examples() {
        let a = smooth(8, 8, 1);
        assert_eq!(psnr(&a, &a).unwrap(), DB_CAP);
        let b = Tensor::full(&[3, 4, 4], 0.5);
        let c = Tensor::full(&[3, 4, 4], 0.6);
        assert!((psnr(&b, &c).unwrap() - 20.0).abs() < 1e-9);
        let d = smooth(8, 8, 2);
        assert_eq!(psnr(&a, &d).unwrap(), psnr(&d, &a).unwrap());
        assert!(psnr(&a, &Tensor::zeros(&[3, 8, 9])).is_err());
    }

    #[test]
    fn db_transform() {
        assert!((ms_ssim_db(0.9).unwrap() - 10.0).abs() < 1e-9);
        assert!((ms_ssim_db(0.9651).unwrap() - 14.57).abs() < 5e-3);
        assert_eq!(ms_ssim_db(0.0).unwrap(), 0.0);
        assert_eq!(ms_ssim_db(1.0).unwrap(), DB_CAP);
        assert!(ms_ssim_db(1.5).is_err());
        assert!(ms_ssim_db(-0.1).is_err());
        let mut prev = -1.0;
        for k in 0..1000 {
            let v = ms_ssim_db(k as f64 / 1000.0).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn bpp_examples() {
        assert_eq!(bpp(8192, 32, 32), 8.0);
        assert_eq!(bpp(2 * 4000, 32, 32), 2.0 * bpp(4000, 32, 32));
        assert!(bpp(96, 32, 32) > 0.0);
    }

    #[test]
    fn level_count() {
        assert_eq!(ms_ssim_levels(15, 64), 0);
        assert_eq!(ms_ssim_levels(16, 16), 1);
        assert_eq!(ms_ssim_levels(32, 40), 2);
        assert_eq!(ms_ssim_levels(64, 64), 3);
        assert_eq!(ms_ssim_levels(256, 256), 5);
        assert_eq!(ms_ssim_levels(4096, 4096), 5);
    }

    #[test]
    fn identical_images_score_one() {
        for s in [16, 32, 64] {
            let a = smooth(s, s, 3);
            assert_eq!(ms_ssim(&a, &a).unwrap(), 1.0);
        }
        let a = smooth(32, 32, 4);
        let b = smooth(32, 32, 5);
        let v = ms_ssim(&a, &b).unwrap();
        assert!(v > 0.0 && v < 1.0 - 1e-9);
    }

    #[test]
    fn inverted_checkerboard_scores_low() {
        let a = Tensor::new(&[1, 16, 16], (0..256).map(|k| ((k / 16 + k % 16) % 2) as f64).collect()).unwrap();
        let b = a.map(|v| 1.0 - v);
        assert!(ms_ssim(&a, &b).unwrap() < 0.5);
    }

    #[test]
    fn too_small_rejected() {
        let a = Tensor::zeros(&[3, 8, 32]);
        assert!(ms_ssim(&a, &a).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = smooth(16, 16, 6);
        let b = smooth(16, 16, 7);
        let opts = FdOptions { tol: 1e-3, ..FdOptions::default() };
        let rep = finite_difference_check(
            |g, y| {
                let x = g.constant(a.clone());
                ms_ssim_var(g, x, y)
            },
            &b,
            &opts,
        )
        .unwrap();
        assert!(rep.passed, "{}", rep.max_rel_error);

        let a = smooth(32, 32, 8);
        let b = smooth(32, 32, 9);
        let opts = FdOptions { tol: 1e-3, max_elements: Some(60), ..FdOptions::default() };
        let rep = finite_difference_check(
            |g, y| {
                let x = g.constant(a.clone());
                ms_ssim_var(g, x, y)
            },
            &b,
            &opts,
        )
        .unwrap();
        assert!(rep.passed, "{}", rep.max_rel_error);
    }
}
