//! Space-to-channel rearrangement and its inverse.
//!
//! Layout (zero-based): output channel `c*d*d + i*d + j` of the inverse shuffle
//! at `(h, w)` holds input `(c, d*h + i, d*w + j)`.

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

fn ips_shapes(shape: &[usize], d: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 || d == 0 || !shape[1].is_multiple_of(d) || !shape[2].is_multiple_of(d) {
        return Err(shape_err(
            "inverse_pixel_shuffle",
            format!("{shape:?} not divisible by factor {d}"),
        ));
    }
    Ok((shape[0], shape[1] / d, shape[2] / d))
}

fn ps_shapes(shape: &[usize], d: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 || d == 0 || !shape[0].is_multiple_of(d * d) {
        return Err(shape_err(
            "pixel_shuffle",
            format!("channels of {shape:?} not divisible by {}", d * d),
        ));
    }
    Ok((shape[0] / (d * d), shape[1], shape[2]))
}

/// `[C, H, W] -> [d²C, H/d, W/d]`.
pub fn inverse_pixel_shuffle(x: &Tensor, d: usize) -> Result<Tensor> {
    let (c, h, w) = ips_shapes(x.shape(), d)?;
    x.reshape(&[c, h, d, w, d])?
        .permute(&[0, 2, 4, 1, 3])?
        .reshape(&[c * d * d, h, w])
}

/// `[d²C, H, W] -> [C, dH, dW]`.
pub fn pixel_shuffle(x: &Tensor, d: usize) -> Result<Tensor> {
    let (c, h, w) = ps_shapes(x.shape(), d)?;
    x.reshape(&[c, d, d, h, w])?
        .permute(&[0, 3, 1, 4, 2])?
        .reshape(&[c, h * d, w * d])
}

pub fn inverse_pixel_shuffle_var(g: &mut Graph, x: Var, d: usize) -> Result<Var> {
    let (c, h, w) = ips_shapes(g.value(x).shape(), d)?;
    let r = g.reshape(x, &[c, h, d, w, d])?;
    let p = g.permute(r, &[0, 2, 4, 1, 3])?;
    g.reshape(p, &[c * d * d, h, w])
}

pub fn pixel_shuffle_var(g: &mut Graph, x: Var, d: usize) -> Result<Var> {
    let (c, h, w) = ps_shapes(g.value(x).shape(), d)?;
    let r = g.reshape(x, &[c, d, d, h, w])?;
    let p = g.permute(r, &[0, 3, 1, 4, 2])?;
    g.reshape(p, &[c, h * d, w * d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shape_arithmetic() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let y = inverse_pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[4, 2, 2]);
        assert_eq!(y.numel(), 16);
    }

    #[test]
    fn two_by_two_to_four_channels() {
        let x = Tensor::new(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let y = inverse_pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[4, 1, 1]);
        assert_eq!(y.data(), &[1., 2., 3., 4.]);
        let back = pixel_shuffle(&y, 2).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn index_mapping_matches_layout() {
        let (c, h, w, d) = (2, 6, 9, 3);
        let x = Tensor::new(&[c, h, w], (0..c * h * w).map(|v| v as f64).collect()).unwrap();
        let y = inverse_pixel_shuffle(&x, d).unwrap();
        let (ho, wo) = (h / d, w / d);
        for ch in 0..c {
            for i in 0..d {
                for j in 0..d {
                    for hh in 0..ho {
                        for ww in 0..wo {
                            let oc = ch * d * d + i * d + j;
                            assert_eq!(
                                y.data()[(oc * ho + hh) * wo + ww],
                                x.data()[(ch * h + d * hh + i) * w + d * ww + j]
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn factor_one_is_identity() {
        let x = Tensor::new(&[2, 3, 1], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(inverse_pixel_shuffle(&x, 1).unwrap(), x);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
    }

    #[test]
    fn rejects_indivisible() {
        assert!(inverse_pixel_shuffle(&Tensor::zeros(&[1, 3, 4]), 2).is_err());
        assert!(pixel_shuffle(&Tensor::zeros(&[3, 2, 2]), 2).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_both_ways(c in 1usize..4, h in 1usize..4, w in 1usize..4, d in 1usize..5, seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::rand_uniform(&[c, h * d, w * d], -1.0, 1.0, &mut rng);
            let y = inverse_pixel_shuffle(&x, d).unwrap();
            prop_assert_eq!(&pixel_shuffle(&y, d).unwrap(), &x);
            let mut a = x.data().to_vec();
            let mut b = y.data().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);

            let z = Tensor::rand_uniform(&[c * d * d, h, w], -1.0, 1.0, &mut rng);
            prop_assert_eq!(&inverse_pixel_shuffle(&pixel_shuffle(&z, d).unwrap(), d).unwrap(), &z);
        }
    }
}
