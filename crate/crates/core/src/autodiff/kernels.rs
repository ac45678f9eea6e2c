//! Forward and backward loops for the spatial primitives.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Raster-scan causal mask for 3D convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskType {
    /// Strictly earlier voxels only (center excluded).
    A,
    /// Earlier voxels plus the center.
    B,
}

pub(crate) fn conv2d_shapes(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Result<[usize; 7]> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 3 || ws.len() != 4 || ws[2] != ws[3] || xs[0] != ws[1] || b.shape() != [ws[0]] {
        return Err(shape_err(
            "conv2d",
            format!("input {xs:?}, weight {ws:?}, bias {:?}", b.shape()),
        ));
    }
    let k = ws[2];
    if xs[1] + 2 * pad < k || xs[2] + 2 * pad < k {
        return Err(shape_err("conv2d", format!("kernel {k} larger than padded input {xs:?}")));
    }
    let ho = xs[1] + 2 * pad - k + 1;
    let wo = xs[2] + 2 * pad - k + 1;
    Ok([xs[0], xs[1], xs[2], ws[0], k, ho, wo])
}

/// Range of output columns `ox` for which `ox + off - pad` lands inside `[0, n)`.
#[inline]
fn valid_range(off: usize, pad: usize, n: usize, out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(off);
    let hi = (n + pad).saturating_sub(off).min(out);
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Result<Tensor> {
    let [cin, h, wd, cout, k, ho, wo] = conv2d_shapes(x, w, b, pad)?;
    let (xd, wdta) = (x.data(), w.data());
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        plane.fill(b.data()[co]);
        for ci in 0..cin {
            let xp = &xd[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ky, pad, h, ho);
                for kx in 0..k {
                    let wv = wdta[((co * cin + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(kx, pad, wd, wo);
                    for oy in oy0..oy1 {
                        let iy = oy + ky - pad;
                        let orow = &mut plane[oy * wo + ox0..oy * wo + ox1];
                        let irow = &xp[iy * wd + ox0 + kx - pad..iy * wd + ox1 + kx - pad];
                        for (o, &i) in orow.iter_mut().zip(irow) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[cout, ho, wo], out)
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    pad: usize,
    go: &Tensor,
) -> Result<[Tensor; 3]> {
    let [cin, h, wd, cout, k, ho, wo] = conv2d_shapes(x, w, b, pad)?;
    let (xd, wdta, god) = (x.data(), w.data(), go.data());
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; cout];
    for co in 0..cout {
        let gplane = &god[co * ho * wo..(co + 1) * ho * wo];
        gb[co] = gplane.iter().sum();
        for ci in 0..cin {
            let xp = &xd[ci * h * wd..(ci + 1) * h * wd];
            let gxp = &mut gx[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ky, pad, h, ho);
                for kx in 0..k {
                    let widx = ((co * cin + ci) * k + ky) * k + kx;
                    let wv = wdta[widx];
                    let (ox0, ox1) = valid_range(kx, pad, wd, wo);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy + ky - pad;
                        let grow = &gplane[oy * wo + ox0..oy * wo + ox1];
                        let (s0, s1) = (iy * wd + ox0 + kx - pad, iy * wd + ox1 + kx - pad);
                        let irow = &xp[s0..s1];
                        for (&g, &i) in grow.iter().zip(irow) {
                            acc += g * i;
                        }
                        let gxrow = &mut gxp[s0..s1];
                        for (gxv, &g) in gxrow.iter_mut().zip(grow) {
                            *gxv += wv * g;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok([
        Tensor::new(x.shape(), gx)?,
        Tensor::new(w.shape(), gw)?,
        Tensor::new(b.shape(), gb)?,
    ])
}

/// Kernel taps `(dz, dy, dx)` (zero-based, center at `k/2`) admitted by the mask.
pub(crate) fn causal_taps(k: usize, mask: MaskType) -> Vec<(usize, usize, usize)> {
    let c = k / 2;
    let mut taps = Vec::new();
    for dz in 0..k {
        for dy in 0..k {
            for dx in 0..k {
                let rel = (dz.cmp(&c), dy.cmp(&c), dx.cmp(&c));
                use std::cmp::Ordering::*;
                let earlier = match rel {
                    (Less, _, _) => true,
                    (Equal, Less, _) => true,
                    (Equal, Equal, Less) => true,
                    (Equal, Equal, Equal) => mask == MaskType::B,
                    _ => false,
                };
                if earlier {
                    taps.push((dz, dy, dx));
                }
            }
        }
    }
    taps
}

pub(crate) fn conv3d_shapes(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<[usize; 6]> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4
        || ws.len() != 5
        || ws[2] != ws[3]
        || ws[3] != ws[4]
        || xs[0] != ws[1]
        || b.shape() != [ws[0]]
    {
        return Err(shape_err(
            "masked_conv3d",
            format!("input {xs:?}, weight {ws:?}, bias {:?}", b.shape()),
        ));
    }
    if ws[2] % 2 == 0 {
        return Err(shape_err("masked_conv3d", format!("even filter size {}", ws[2])));
    }
    Ok([xs[0], xs[1], xs[2], xs[3], ws[0], ws[2]])
}

pub(crate) fn masked_conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor, mask: MaskType) -> Result<Tensor> {
    let [cin, d, h, wd, cout, k] = conv3d_shapes(x, w, b)?;
    let pad = k / 2;
    let taps = causal_taps(k, mask);
    let vol = d * h * wd;
    let (xd, wdta) = (x.data(), w.data());
    let mut out = vec![0.0; cout * vol];
    for co in 0..cout {
        let ovol = &mut out[co * vol..(co + 1) * vol];
        ovol.fill(b.data()[co]);
        for ci in 0..cin {
            let xv = &xd[ci * vol..(ci + 1) * vol];
            for &(dz, dy, dx) in &taps {
                let wv = wdta[(((co * cin + ci) * k + dz) * k + dy) * k + dx];
                if wv == 0.0 {
                    continue;
                }
                let (oz0, oz1) = valid_range(dz, pad, d, d);
                let (oy0, oy1) = valid_range(dy, pad, h, h);
                let (ox0, ox1) = valid_range(dx, pad, wd, wd);
                for oz in oz0..oz1 {
                    let iz = oz + dz - pad;
                    for oy in oy0..oy1 {
                        let iy = oy + dy - pad;
                        let obase = (oz * h + oy) * wd;
                        let (s0, s1) = ((iz * h + iy) * wd + ox0 + dx - pad, (iz * h + iy) * wd + ox1 + dx - pad);
                        let orow = &mut ovol[obase + ox0..obase + ox1];
                        let irow = &xv[s0..s1];
                        for (o, &i) in orow.iter_mut().zip(irow) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[cout, d, h, wd], out)
}

/// Output of [`masked_conv3d_forward`] at one voxel, summed in the same order
/// so the two agree bit for bit.
pub(crate) fn masked_conv3d_at(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    mask: MaskType,
    voxel: (usize, usize, usize),
) -> Result<Vec<f64>> {
    let [cin, d, h, wd, cout, k] = conv3d_shapes(x, w, b)?;
    let pad = k / 2;
    let taps = causal_taps(k, mask);
    let vol = d * h * wd;
    let (oz, oy, ox) = voxel;
    let (xd, wdta) = (x.data(), w.data());
    let mut out = Vec::with_capacity(cout);
    for co in 0..cout {
        let mut acc = b.data()[co];
        for ci in 0..cin {
            for &(dz, dy, dx) in &taps {
                let wv = wdta[(((co * cin + ci) * k + dz) * k + dy) * k + dx];
                let (iz, iy, ix) = (oz + dz, oy + dy, ox + dx);
                if wv == 0.0 || iz < pad || iy < pad || ix < pad || iz - pad >= d || iy - pad >= h || ix - pad >= wd {
                    continue;
                }
                acc += wv * xd[ci * vol + ((iz - pad) * h + iy - pad) * wd + ix - pad];
            }
        }
        out.push(acc);
    }
    Ok(out)
}

pub(crate) fn masked_conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    mask: MaskType,
    go: &Tensor,
) -> Result<[Tensor; 3]> {
    let [cin, d, h, wd, cout, k] = conv3d_shapes(x, w, b)?;
    let pad = k / 2;
    let taps = causal_taps(k, mask);
    let vol = d * h * wd;
    let (xd, wdta, god) = (x.data(), w.data(), go.data());
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; cout];
    for co in 0..cout {
        let gvol = &god[co * vol..(co + 1) * vol];
        gb[co] = gvol.iter().sum();
        for ci in 0..cin {
            let xv = &xd[ci * vol..(ci + 1) * vol];
            let gxv = &mut gx[ci * vol..(ci + 1) * vol];
            for &(dz, dy, dx) in &taps {
                let widx = (((co * cin + ci) * k + dz) * k + dy) * k + dx;
                let wv = wdta[widx];
                let (oz0, oz1) = valid_range(dz, pad, d, d);
                let (oy0, oy1) = valid_range(dy, pad, h, h);
                let (ox0, ox1) = valid_range(dx, pad, wd, wd);
                let mut acc = 0.0;
                for oz in oz0..oz1 {
                    let iz = oz + dz - pad;
                    for oy in oy0..oy1 {
                        let iy = oy + dy - pad;
                        let obase = (oz * h + oy) * wd;
                        let (s0, s1) = ((iz * h + iy) * wd + ox0 + dx - pad, (iz * h + iy) * wd + ox1 + dx - pad);
                        let grow = &gvol[obase + ox0..obase + ox1];
                        for (&g, &i) in grow.iter().zip(&xv[s0..s1]) {
                            acc += g * i;
                        }
                        for (gi, &g) in gxv[s0..s1].iter_mut().zip(grow) {
                            *gi += wv * g;
                        }
                    }
                }
                gw[widx] += acc;
            }
        }
    }
    Ok([
        Tensor::new(x.shape(), gx)?,
        Tensor::new(w.shape(), gw)?,
        Tensor::new(b.shape(), gb)?,
    ])
}

/// Per-channel "valid" correlation with a fixed square kernel.
pub(crate) fn filter2d_valid(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (xs, ks) = (x.shape(), kernel.shape());
    if xs.len() != 3 || ks.len() != 2 || ks[0] != ks[1] || xs[1] < ks[0] || xs[2] < ks[0] {
        return Err(shape_err("filter2d", format!("input {xs:?}, kernel {ks:?}")));
    }
    let (c, h, w, k) = (xs[0], xs[1], xs[2], ks[0]);
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let xp = &x.data()[ch * h * w..(ch + 1) * h * w];
        let op = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for ky in 0..k {
            for kx in 0..k {
                let kv = kernel.data()[ky * k + kx];
                for oy in 0..ho {
                    let irow = &xp[(oy + ky) * w + kx..(oy + ky) * w + kx + wo];
                    for (o, &i) in op[oy * wo..(oy + 1) * wo].iter_mut().zip(irow) {
                        *o += kv * i;
                    }
                }
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

pub(crate) fn filter2d_valid_backward(x_shape: &[usize], kernel: &Tensor, go: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let k = kernel.shape()[0];
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let gp = &go.data()[ch * ho * wo..(ch + 1) * ho * wo];
        let gxp = &mut gx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let kv = kernel.data()[ky * k + kx];
                for oy in 0..ho {
                    let dst = &mut gxp[(oy + ky) * w + kx..(oy + ky) * w + kx + wo];
                    for (d, &g) in dst.iter_mut().zip(&gp[oy * wo..(oy + 1) * wo]) {
                        *d += kv * g;
                    }
                }
            }
        }
    }
    Tensor::new(x_shape, gx)
}

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub(crate) fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 3 || xs[1] < 2 || xs[2] < 2 {
        return Err(shape_err("avg_pool2", format!("input {xs:?}")));
    }
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let at = |y: usize, xx: usize| x.data()[(ch * h + y) * w + xx];
                let s = at(2 * oy, 2 * ox)
                    + at(2 * oy, 2 * ox + 1)
                    + at(2 * oy + 1, 2 * ox)
                    + at(2 * oy + 1, 2 * ox + 1);
                out.push(0.25 * s);
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

pub(crate) fn avg_pool2_backward(x_shape: &[usize], go: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (ho, wo) = (h / 2, w / 2);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = 0.25 * go.data()[(ch * ho + oy) * wo + ox];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    gx[(ch * h + 2 * oy + dy) * w + 2 * ox + dx] += g;
                }
            }
        }
    }
    Tensor::new(x_shape, gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_all_ones_center_is_nine() {
        let x = Tensor::ones(&[1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        // corners see four taps
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn conv2d_matches_naive_loop() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_uniform(&[2, 5, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[3], -1.0, 1.0, &mut rng);
        let y = conv2d_forward(&x, &w, &b, 1).unwrap();
        for co in 0..3 {
            for oy in 0..5i64 {
                for ox in 0..4i64 {
                    let mut s = b.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                                if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                    s += w.data()[((co * 2 + ci) * 3 + ky as usize) * 3 + kx as usize]
                                        * x.data()[(ci * 5 + iy as usize) * 4 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = y.data()[(co * 5 + oy as usize) * 4 + ox as usize];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn causal_tap_counts() {
        // 27 taps: 13 strictly before the center, center itself, 13 after.
        assert_eq!(causal_taps(3, MaskType::A).len(), 13);
        assert_eq!(causal_taps(3, MaskType::B).len(), 14);
        assert_eq!(causal_taps(1, MaskType::A).len(), 0);
    }

    #[test]
    fn masked_conv3d_single_voxel_matches_batched() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::rand_uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(&[3, 2, 3, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[3], -1.0, 1.0, &mut rng);
        for mask in [MaskType::A, MaskType::B] {
            let full = masked_conv3d_forward(&x, &w, &b, mask).unwrap();
            for z in 0..3 {
                for y in 0..4 {
                    for xx in 0..5 {
                        let at = masked_conv3d_at(&x, &w, &b, mask, (z, y, xx)).unwrap();
                        for (co, v) in at.iter().enumerate() {
                            assert_eq!(v.to_bits(), full.data()[co * 60 + (z * 4 + y) * 5 + xx].to_bits());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn masked_conv3d_ones_interior_type_b() {
        // Interior voxel of a 3x3x3 all-ones input: 13 causal taps + center = 14.
        let x = Tensor::ones(&[1, 3, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        let y = masked_conv3d_forward(&x, &w, &b, MaskType::B).unwrap();
        assert_eq!(y.data()[13], 14.0);
        let ya = masked_conv3d_forward(&x, &w, &b, MaskType::A).unwrap();
        assert_eq!(ya.data()[13], 13.0);
    }

    #[test]
    fn masked_conv3d_rejects_even_kernel() {
        let x = Tensor::ones(&[1, 2, 2, 2]);
        let w = Tensor::ones(&[1, 1, 2, 2, 2]);
        assert!(masked_conv3d_forward(&x, &w, &Tensor::zeros(&[1]), MaskType::A).is_err());
    }

    #[test]
    fn avg_pool_halves() {
        let x = Tensor::new(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(avg_pool2(&x).unwrap().data(), &[2.5]);
    }
}
