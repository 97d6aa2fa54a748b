//! Primitive operators and their hand-derived vector-Jacobian products.
//!
//! Every forward op here is a pure function. Backward functions take the
//! upstream gradient and return gradients for each differentiable input.

use crate::error::{arg, Result};
use crate::tensor::Tensor;

fn axis_split(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// Softmax along `axis`, max-shifted for stability.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.ndim() {
        return arg(format!("softmax axis {axis} out of range for {:?}", x.dims()));
    }
    let (outer, n, inner) = axis_split(x.dims(), axis);
    let src = x.data();
    let mut out = Tensor::zeros(x.dims());
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let m = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..n {
                let e = (src[at(k)] - m).exp();
                dst[at(k)] = e;
                z += e;
            }
            for k in 0..n {
                dst[at(k)] /= z;
            }
        }
    }
    Ok(out)
}

/// Gradient of softmax given its output `y` and upstream `dy`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Result<Tensor> {
    y.expect_same_dims(dy, "softmax_backward")?;
    if axis >= y.ndim() {
        return arg(format!("softmax axis {axis} out of range"));
    }
    let (outer, n, inner) = axis_split(y.dims(), axis);
    let (ys, gs) = (y.data(), dy.data());
    let mut dx = Tensor::zeros(y.dims());
    let d = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let dot: f64 = (0..n).map(|k| ys[at(k)] * gs[at(k)]).sum();
            for k in 0..n {
                d[at(k)] = ys[at(k)] * (gs[at(k)] - dot);
            }
        }
    }
    Ok(dx)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Gradient of sigmoid expressed through its output.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    y.zip_map(dy, |s, g| g * s * (1.0 - s))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU expressed through its input.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.zip_map(dy, |v, g| if v > 0.0 { g } else { 0.0 })
}

/// `y = x W + b` applied to every trailing `K`-vector of `x`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = affine_shapes(x, w, b)?;
    let rows = x.len() / k;
    let (xs, ws, bs) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; rows * m];
    for r in 0..rows {
        let xr = &xs[r * k..(r + 1) * k];
        let yr = &mut out[r * m..(r + 1) * m];
        yr.copy_from_slice(bs);
        for (i, &xv) in xr.iter().enumerate() {
            let wr = &ws[i * m..(i + 1) * m];
            for (y, &wv) in yr.iter_mut().zip(wr) {
                *y += xv * wv;
            }
        }
    }
    let mut dims = x.dims().to_vec();
    *dims.last_mut().unwrap() = m;
    Tensor::new(dims, out)
}

pub struct AffineGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn affine_backward(x: &Tensor, w: &Tensor, b: &Tensor, dy: &Tensor) -> Result<AffineGrads> {
    let (k, m) = affine_shapes(x, w, b)?;
    let rows = x.len() / k;
    if dy.len() != rows * m {
        return arg("affine_backward: upstream gradient has wrong size");
    }
    let (xs, ws, gs) = (x.data(), w.data(), dy.data());
    let mut dx = Tensor::zeros(x.dims());
    let mut dw = Tensor::zeros(w.dims());
    let mut db = Tensor::zeros(b.dims());
    for r in 0..rows {
        let g = &gs[r * m..(r + 1) * m];
        for (d, gv) in db.data_mut().iter_mut().zip(g) {
            *d += gv;
        }
        for i in 0..k {
            let xv = xs[r * k + i];
            let wr = &ws[i * m..(i + 1) * m];
            dx.data_mut()[r * k + i] = wr.iter().zip(g).map(|(a, b)| a * b).sum();
            let dwr = &mut dw.data_mut()[i * m..(i + 1) * m];
            for (d, gv) in dwr.iter_mut().zip(g) {
                *d += xv * gv;
            }
        }
    }
    Ok(AffineGrads { dx, dw, db })
}

fn affine_shapes(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if w.ndim() != 2 {
        return arg(format!("affine weight must be 2-D, got {:?}", w.dims()));
    }
    let (k, m) = (w.dims()[0], w.dims()[1]);
    if x.dims().last() != Some(&k) {
        return arg(format!(
            "affine: input trailing extent {:?} does not match weight rows {k}",
            x.dims().last()
        ));
    }
    if b.dims() != [m] {
        return arg(format!("affine: bias dims {:?}, expected [{m}]", b.dims()));
    }
    Ok((k, m))
}

struct ConvShape {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

fn conv_shapes(x: &Tensor, k: &Tensor, b: &Tensor) -> Result<ConvShape> {
    if x.ndim() != 3 || k.ndim() != 4 {
        return arg(format!(
            "conv2d expects [C,H,W] input and [Co,Ci,kh,kw] kernel, got {:?} and {:?}",
            x.dims(),
            k.dims()
        ));
    }
    let (cin, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (cout, kcin, kh, kw) = (k.dims()[0], k.dims()[1], k.dims()[2], k.dims()[3]);
    if kcin != cin {
        return arg(format!("conv2d: input has {cin} channels, kernel expects {kcin}"));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return arg(format!("conv2d: kernel {kh}x{kw} must have odd extents"));
    }
    if b.dims() != [cout] {
        return arg(format!("conv2d: bias dims {:?}, expected [{cout}]", b.dims()));
    }
    Ok(ConvShape {
        cin,
        h,
        w,
        cout,
        kh,
        kw,
    })
}

/// Stride-1 cross-correlation with zero "same" padding.
pub fn conv2d(x: &Tensor, k: &Tensor, b: &Tensor) -> Result<Tensor> {
    let s = conv_shapes(x, k, b)?;
    let (ph, pw) = (s.kh / 2, s.kw / 2);
    let (xs, ks) = (x.data(), k.data());
    let mut out = Tensor::zeros(&[s.cout, s.h, s.w]);
    let o = out.data_mut();
    for co in 0..s.cout {
        let plane = &mut o[co * s.h * s.w..(co + 1) * s.h * s.w];
        plane.fill(b.data()[co]);
        for ci in 0..s.cin {
            let xin = &xs[ci * s.h * s.w..(ci + 1) * s.h * s.w];
            for dy in 0..s.kh {
                for dx in 0..s.kw {
                    let kv = ks[((co * s.cin + ci) * s.kh + dy) * s.kw + dx];
                    if kv == 0.0 {
                        continue;
                    }
                    for r in 0..s.h {
                        let sr = r as isize + dy as isize - ph as isize;
                        if sr < 0 || sr >= s.h as isize {
                            continue;
                        }
                        let sr = sr as usize;
                        for c in 0..s.w {
                            let sc = c as isize + dx as isize - pw as isize;
                            if sc < 0 || sc >= s.w as isize {
                                continue;
                            }
                            plane[r * s.w + c] += kv * xin[sr * s.w + sc as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads {
    pub dx: Tensor,
    pub dk: Tensor,
    pub db: Tensor,
}

pub fn conv2d_backward(x: &Tensor, k: &Tensor, b: &Tensor, dy: &Tensor) -> Result<ConvGrads> {
    let s = conv_shapes(x, k, b)?;
    dy.expect_dims(&[s.cout, s.h, s.w], "conv2d_backward upstream")?;
    let (ph, pw) = (s.kh / 2, s.kw / 2);
    let (xs, ks, gs) = (x.data(), k.data(), dy.data());
    let mut dx = Tensor::zeros(x.dims());
    let mut dk = Tensor::zeros(k.dims());
    let mut db = Tensor::zeros(b.dims());
    let hw = s.h * s.w;
    for co in 0..s.cout {
        let g = &gs[co * hw..(co + 1) * hw];
        db.data_mut()[co] = g.iter().sum();
        for ci in 0..s.cin {
            let xin = &xs[ci * hw..(ci + 1) * hw];
            for ky in 0..s.kh {
                for kx in 0..s.kw {
                    let kidx = ((co * s.cin + ci) * s.kh + ky) * s.kw + kx;
                    let kv = ks[kidx];
                    let mut acc = 0.0;
                    for r in 0..s.h {
                        let sr = r as isize + ky as isize - ph as isize;
                        if sr < 0 || sr >= s.h as isize {
                            continue;
                        }
                        let sr = sr as usize;
                        for c in 0..s.w {
                            let sc = c as isize + kx as isize - pw as isize;
                            if sc < 0 || sc >= s.w as isize {
                                continue;
                            }
                            let src = sr * s.w + sc as usize;
                            let gv = g[r * s.w + c];
                            acc += gv * xin[src];
                            dx.data_mut()[ci * hw + src] += gv * kv;
                        }
                    }
                    dk.data_mut()[kidx] = acc;
                }
            }
        }
    }
    Ok(ConvGrads { dx, dk, db })
}

/// Elementwise maximum over a set of `channels`-vectors, plus the index of
/// the winning vector per channel (first maximum on ties). The empty set
/// pools to the zero vector with no winners.
pub fn channel_max_pool_argmax(vectors: &[&[f64]], channels: usize) -> Result<(Tensor, Vec<Option<usize>>)> {
    if let Some(bad) = vectors.iter().find(|v| v.len() != channels) {
        return arg(format!(
            "channel_max_pool: vector of length {} in a set of {channels}-vectors",
            bad.len()
        ));
    }
    let mut out = vec![0.0; channels];
    let mut winners = vec![None; channels];
    for (i, v) in vectors.iter().enumerate() {
        for c in 0..channels {
            if winners[c].is_none() || v[c] > out[c] {
                out[c] = v[c];
                winners[c] = Some(i);
            }
        }
    }
    Ok((Tensor::new(vec![channels], out)?, winners))
}

pub fn channel_max_pool(vectors: &[Tensor], channels: usize) -> Result<Tensor> {
    let slices: Vec<&[f64]> = vectors.iter().map(|t| t.data()).collect();
    channel_max_pool_argmax(&slices, channels).map(|(t, _)| t)
}

/// Bilinear read of a `[C,H,W]` map at column `u`, row `v`. Corners outside
/// the map read zero.
pub fn bilinear_sample(map: &Tensor, u: f64, v: f64) -> Result<Tensor> {
    let (c, h, w) = map3(map)?;
    let mut out = vec![0.0; c];
    for (r, col, wt) in bilinear_corners(u, v, h, w).into_iter().flatten() {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += wt * map.data()[(ch * h + r) * w + col];
        }
    }
    Tensor::new(vec![c], out)
}

/// Backward of [`bilinear_sample`]: accumulates into `dmap` and returns
/// `(d/du, d/dv)`.
pub fn bilinear_sample_backward(
    map: &Tensor,
    u: f64,
    v: f64,
    dy: &[f64],
    dmap: Option<&mut Tensor>,
) -> Result<(f64, f64)> {
    let (c, h, w) = map3(map)?;
    if dy.len() != c {
        return arg("bilinear_sample_backward: upstream length mismatch");
    }
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let read = |ch: usize, r: i64, col: i64| -> f64 {
        if r < 0 || col < 0 || r >= h as i64 || col >= w as i64 {
            0.0
        } else {
            map.data()[(ch * h + r as usize) * w + col as usize]
        }
    };
    let mut du = 0.0;
    let mut dv = 0.0;
    for (ch, &g) in dy.iter().enumerate() {
        let m00 = read(ch, y0, x0);
        let m01 = read(ch, y0, x0 + 1);
        let m10 = read(ch, y0 + 1, x0);
        let m11 = read(ch, y0 + 1, x0 + 1);
        du += g * ((1.0 - fy) * (m01 - m00) + fy * (m11 - m10));
        dv += g * ((1.0 - fx) * (m10 - m00) + fx * (m11 - m01));
    }
    if let Some(dmap) = dmap {
        dmap.expect_same_dims(map, "bilinear_sample_backward")?;
        for (r, col, wt) in bilinear_corners(u, v, h, w).into_iter().flatten() {
            for (ch, &g) in dy.iter().enumerate() {
                dmap.data_mut()[(ch * h + r) * w + col] += wt * g;
            }
        }
    }
    Ok((du, dv))
}

fn map3(map: &Tensor) -> Result<(usize, usize, usize)> {
    if map.ndim() != 3 {
        return arg(format!("expected a [C,H,W] map, got {:?}", map.dims()));
    }
    Ok((map.dims()[0], map.dims()[1], map.dims()[2]))
}

/// In-bounds corners `(row, col, weight)` of a bilinear footprint.
pub(crate) fn bilinear_corners(u: f64, v: f64, h: usize, w: usize) -> [Option<(usize, usize, f64)>; 4] {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let corner = |r: i64, c: i64, wt: f64| {
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 || wt == 0.0 {
            None
        } else {
            Some((r as usize, c as usize, wt))
        }
    };
    [
        corner(y0, x0, (1.0 - fx) * (1.0 - fy)),
        corner(y0, x0 + 1, fx * (1.0 - fy)),
        corner(y0 + 1, x0, (1.0 - fx) * fy),
        corner(y0 + 1, x0 + 1, fx * fy),
    ]
}

/// `out[i, d] = c[i] * p[d]`.
pub fn outer_scale(c: &Tensor, p: &Tensor) -> Result<Tensor> {
    if c.ndim() != 1 || p.ndim() != 1 {
        return arg("outer_scale expects two vectors");
    }
    let data = c
        .data()
        .iter()
        .flat_map(|&ci| p.data().iter().map(move |&pd| ci * pd))
        .collect();
    Tensor::new(vec![c.len(), p.len()], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let y = softmax(&Tensor::from_vec(vec![0.0; 3]), 0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax(&Tensor::from_vec(vec![2f64.ln(), 0.0]), 0).unwrap();
        assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_bad_axis() {
        assert!(softmax(&Tensor::zeros(&[2, 2]), 2).is_err());
    }

    #[test]
    fn softmax_sums_against_compensated_sum() {
        let mut r = rng(11);
        for _ in 0..1000 {
            let x = Tensor::uniform(&[8], -20.0, 20.0, &mut r);
            let y = softmax(&x, 0).unwrap();
            let s = oracle::kahan_sum(y.data());
            assert!((s - 1.0).abs() <= 1e-12, "sum {s}");
            assert!(y.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn softmax_middle_axis() {
        let mut r = rng(3);
        let x = Tensor::uniform(&[2, 5, 3], -3.0, 3.0, &mut r);
        let y = softmax(&x, 1).unwrap();
        for a in 0..2 {
            for c in 0..3 {
                let s: f64 = (0..5).map(|k| y.at(&[a, k, c])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((1.0 - sigmoid_scalar(40.0)).abs() < 1e-12);
        // 1 / (1 + e^-1) to 12 digits
        assert!((sigmoid_scalar(1.0) - 0.731_058_578_630).abs() < 1e-9);
        assert!(sigmoid_scalar(-800.0) >= 0.0);
    }

    #[test]
    fn affine_identity_and_constant() {
        let mut r = rng(5);
        let x = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut r);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.set(&[i, i], 1.0);
        }
        let y = affine(&x, &eye, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
        let y = affine(&x, &Tensor::zeros(&[3, 2]), &Tensor::from_vec(vec![0.25, -4.0])).unwrap();
        for row in 0..4 {
            assert_eq!(y.at(&[row, 0]), 0.25);
            assert_eq!(y.at(&[row, 1]), -4.0);
        }
    }

    #[test]
    fn affine_matches_triple_loop() {
        let mut r = rng(9);
        let x = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[4], -1.0, 1.0, &mut r);
        let got = affine(&x, &w, &b).unwrap();
        let want = oracle::affine_naive(&x, &w, &b);
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn affine_shape_mismatch() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(affine(&x, &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[2])).is_err());
        assert!(affine(&x, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn conv_identity_and_box_filter() {
        let mut r = rng(1);
        let x = Tensor::uniform(&[2, 5, 4], -1.0, 1.0, &mut r);
        let mut k = Tensor::zeros(&[2, 2, 1, 1]);
        k.set(&[0, 0, 0, 0], 1.0);
        k.set(&[1, 1, 0, 0], 1.0);
        assert_eq!(conv2d(&x, &k, &Tensor::zeros(&[2])).unwrap(), x);

        let c = 0.7;
        let x = Tensor::full(&[1, 5, 5], c);
        let y = conv2d(&x, &Tensor::full(&[1, 1, 3, 3], 1.0), &Tensor::zeros(&[1])).unwrap();
        for row in 1..4 {
            for col in 1..4 {
                assert!((y.at(&[0, row, col]) - 9.0 * c).abs() < 1e-12);
            }
        }
        assert!((y.at(&[0, 0, 0]) - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn conv_even_kernel_rejected() {
        let x = Tensor::zeros(&[1, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 2, 3]), &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn conv_matches_naive_on_random_shapes() {
        let mut r = rng(21);
        for _ in 0..100 {
            let cin = r.gen_range(1..=4);
            let cout = r.gen_range(1..=4);
            let h = r.gen_range(1..=8);
            let w = r.gen_range(1..=8);
            let kh = [1, 3, 5][r.gen_range(0..3)];
            let kw = [1, 3, 5][r.gen_range(0..3)];
            let x = Tensor::uniform(&[cin, h, w], -1.0, 1.0, &mut r);
            let k = Tensor::uniform(&[cout, cin, kh, kw], -1.0, 1.0, &mut r);
            let b = Tensor::uniform(&[cout], -1.0, 1.0, &mut r);
            let got = conv2d(&x, &k, &b).unwrap();
            let want = oracle::conv2d_naive(&x, &k, &b);
            assert!(got.max_abs_diff(&want) <= 1e-10);
        }
    }

    #[test]
    fn max_pool_cases() {
        let v = Tensor::from_vec(vec![1.0, -2.0]);
        assert_eq!(channel_max_pool(std::slice::from_ref(&v), 2).unwrap(), v);
        let got = channel_max_pool(&[Tensor::from_vec(vec![1.0, 5.0]), Tensor::from_vec(vec![3.0, 2.0])], 2).unwrap();
        assert_eq!(got.data(), &[3.0, 5.0]);
        assert_eq!(channel_max_pool(&[], 3).unwrap().data(), &[0.0; 3]);
        assert!(channel_max_pool(&[Tensor::from_vec(vec![1.0])], 2).is_err());
    }

    #[test]
    fn max_pool_brute_force_and_idempotent() {
        let mut r = rng(8);
        let vs: Vec<Tensor> = (0..64).map(|_| Tensor::uniform(&[6], -5.0, 5.0, &mut r)).collect();
        let got = channel_max_pool(&vs, 6).unwrap();
        for c in 0..6 {
            let m = vs.iter().map(|v| v.data()[c]).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(got.data()[c], m);
        }
        let again = channel_max_pool(std::slice::from_ref(&got), 6).unwrap();
        assert_eq!(again, got);
    }

    #[test]
    fn bilinear_exact_and_midpoint() {
        let mut r = rng(4);
        let m = Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
        for row in 0..3 {
            for col in 0..4 {
                let s = bilinear_sample(&m, col as f64, row as f64).unwrap();
                assert_eq!(s.data(), &[m.at(&[0, row, col]), m.at(&[1, row, col])]);
            }
        }
        let s = bilinear_sample(&m, 1.5, 2.0).unwrap();
        let want = (m.at(&[0, 2, 1]) + m.at(&[0, 2, 2])) / 2.0;
        assert!((s.data()[0] - want).abs() < 1e-15);
        let s = bilinear_sample(&m, -3.0, 10.0).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0]);
    }

    #[test]
    fn bilinear_matches_closed_form() {
        let mut r = rng(12);
        let m = Tensor::uniform(&[3, 5, 6], -1.0, 1.0, &mut r);
        for _ in 0..200 {
            let u = r.gen_range(-1.5..6.5);
            let v = r.gen_range(-1.5..5.5);
            let got = bilinear_sample(&m, u, v).unwrap();
            let want = oracle::bilinear_closed_form(&m, u, v);
            assert!(got.max_abs_diff(&want) <= 1e-12);
        }
    }

    #[test]
    fn outer_scale_cases() {
        let c = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        let y = outer_scale(&c, &Tensor::from_vec(vec![0.0, 1.0, 0.0, 0.0])).unwrap();
        for i in 0..3 {
            for d in 0..4 {
                let want = if d == 1 { c.data()[i] } else { 0.0 };
                assert_eq!(y.at(&[i, d]), want);
            }
        }
        let y = outer_scale(&c, &Tensor::full(&[4], 0.25)).unwrap();
        for i in 0..3 {
            for d in 0..4 {
                assert_eq!(y.at(&[i, d]), c.data()[i] / 4.0);
            }
        }
        let mut r = rng(2);
        let c = Tensor::uniform(&[5], -1.0, 1.0, &mut r);
        let p = Tensor::uniform(&[7], -1.0, 1.0, &mut r);
        let got = outer_scale(&c, &p).unwrap();
        for i in 0..5 {
            for d in 0..7 {
                assert!((got.at(&[i, d]) - c.data()[i] * p.data()[d]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn backward_passes_match_finite_differences() {
        use crate::objective::finite_diff_grad;
        let mut r = rng(31);
        let x = Tensor::uniform(&[2, 4, 5], -1.0, 1.0, &mut r);
        let k = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        let probe = Tensor::uniform(&[3, 4, 5], -1.0, 1.0, &mut r);
        let dot = |y: &Tensor| y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();
        let g = conv2d_backward(&x, &k, &b, &probe).unwrap();
        let fx = finite_diff_grad(|t| Ok(dot(&conv2d(t, &k, &b)?)), &x, 1e-5).unwrap();
        let fk = finite_diff_grad(|t| Ok(dot(&conv2d(&x, t, &b)?)), &k, 1e-5).unwrap();
        let fb = finite_diff_grad(|t| Ok(dot(&conv2d(&x, &k, t)?)), &b, 1e-5).unwrap();
        assert!(g.dx.max_abs_diff(&fx) < 1e-8);
        assert!(g.dk.max_abs_diff(&fk) < 1e-8);
        assert!(g.db.max_abs_diff(&fb) < 1e-8);

        let s = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut r);
        let probe = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
        let y = softmax(&s, 1).unwrap();
        let pdot = |y: &Tensor| y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();
        let ds = softmax_backward(&y, &probe, 1).unwrap();
        let fs = finite_diff_grad(|t| Ok(pdot(&softmax(t, 1)?)), &s, 1e-5).unwrap();
        assert!(ds.max_abs_diff(&fs) < 1e-9);

        let x = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[2], -1.0, 1.0, &mut r);
        let probe = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut r);
        let adot = |y: &Tensor| y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();
        let g = affine_backward(&x, &w, &b, &probe).unwrap();
        let fw = finite_diff_grad(|t| Ok(adot(&affine(&x, t, &b)?)), &w, 1e-5).unwrap();
        let fx = finite_diff_grad(|t| Ok(adot(&affine(t, &w, &b)?)), &x, 1e-5).unwrap();
        assert!(g.dw.max_abs_diff(&fw) < 1e-9);
        assert!(g.dx.max_abs_diff(&fx) < 1e-9);
    }

    #[test]
    fn bilinear_backward_matches_finite_differences() {
        let mut r = rng(17);
        let m = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut r);
        let probe = [0.3, -1.1];
        for _ in 0..50 {
            let u = r.gen_range(-0.9..3.9);
            let v = r.gen_range(-0.9..3.9);
            let f = |u: f64, v: f64| {
                let s = bilinear_sample(&m, u, v).unwrap();
                s.data()[0] * probe[0] + s.data()[1] * probe[1]
            };
            let h = 1e-6;
            let nu = (f(u + h, v) - f(u - h, v)) / (2.0 * h);
            let nv = (f(u, v + h) - f(u, v - h)) / (2.0 * h);
            let (du, dv) = bilinear_sample_backward(&m, u, v, &probe, None).unwrap();
            assert!((du - nu).abs() < 1e-7, "{du} vs {nu}");
            assert!((dv - nv).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..16)) {
            let y = softmax(&Tensor::from_vec(v), 0).unwrap();
            prop_assert!((y.sum() - 1.0).abs() < 1e-12);
            prop_assert!(y.data().iter().all(|&p| p > 0.0 && p <= 1.0));
        }

        #[test]
        fn ops_are_deterministic(seed in any::<u64>()) {
            let mut r = rng(seed);
            let x = Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut r);
            let k = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut r);
            let b = Tensor::uniform(&[2], -1.0, 1.0, &mut r);
            let a = conv2d(&x, &k, &b).unwrap();
            let c = conv2d(&x, &k, &b).unwrap();
            prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            c.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
