//! Brute-force reference implementations.
//!
//! These deliberately avoid the production helpers: cell lookup is a linear
//! scan over cell edges, geometry uses polar coordinates, and every loop is
//! written out in the plainest order.

use std::collections::BTreeMap;

use rand::Rng;

use crate::camera::CameraConfig;
use crate::fusion::{Fusion, FusionConfig};
use crate::grid::{BevGridSpec, VoxelSpec};
use crate::head::{Box3D, HeadOutput, NUM_CLASSES};
use crate::intensity::{IntensityCoeffs, LidarPoint};
use crate::params::ParamStore;
use crate::radar::{RadarNorm, RadarPoint};
use crate::tensor::Tensor;

/// Compensated summation.
pub fn kahan_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &x in xs {
        let y = x - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

/// `||a - n|| / max(||a||, ||n||)`, 0 when both vanish.
pub fn rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    if analytic.dims() != numeric.dims() {
        return f64::INFINITY;
    }
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.norm().max(numeric.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Linear scan for the 1-D bin holding `v`; the last bin is closed.
fn scan_axis(v: f64, lo: f64, hi: f64, n: usize) -> Option<usize> {
    let step = (hi - lo) / n as f64;
    for i in 0..n {
        let a = lo + i as f64 * step;
        let b = if i + 1 == n { hi } else { lo + (i + 1) as f64 * step };
        if v >= a && (v < b || (i + 1 == n && v <= b)) {
            return Some(i);
        }
    }
    None
}

pub fn scan_cell(grid: &BevGridSpec, x: f64, y: f64) -> Option<(usize, usize)> {
    let col = scan_axis(x, grid.x_min, grid.x_max, grid.cols)?;
    let row = scan_axis(y, grid.y_min, grid.y_max, grid.rows)?;
    Some((row, col))
}

pub fn affine_naive(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let k = w.dims()[0];
    let m = w.dims()[1];
    let rows = x.len() / k;
    let mut out = Vec::with_capacity(rows * m);
    for r in 0..rows {
        for j in 0..m {
            let mut acc = b.data()[j];
            for i in 0..k {
                acc += x.data()[r * k + i] * w.data()[i * m + j];
            }
            out.push(acc);
        }
    }
    let mut dims = x.dims().to_vec();
    *dims.last_mut().unwrap() = m;
    Tensor::new(dims, out).unwrap()
}

pub fn conv2d_naive(x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
    let (cin, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (cout, kh, kw) = (k.dims()[0], k.dims()[2], k.dims()[3]);
    let mut out = Tensor::zeros(&[cout, h, w]);
    for co in 0..cout {
        for r in 0..h {
            for c in 0..w {
                let mut acc = b.data()[co];
                for ci in 0..cin {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let sr = r as i64 + dy as i64 - (kh / 2) as i64;
                            let sc = c as i64 + dx as i64 - (kw / 2) as i64;
                            if sr >= 0 && sc >= 0 && sr < h as i64 && sc < w as i64 {
                                acc += k.at(&[co, ci, dy, dx]) * x.at(&[ci, sr as usize, sc as usize]);
                            }
                        }
                    }
                }
                out.set(&[co, r, c], acc);
            }
        }
    }
    out
}

/// Bilinear interpolation written as the weighted sum over the four
/// surrounding lattice points with zero outside the map.
pub fn bilinear_closed_form(map: &Tensor, u: f64, v: f64) -> Tensor {
    let (c, h, w) = (map.dims()[0], map.dims()[1], map.dims()[2]);
    let mut out = vec![0.0; c];
    let (i0, j0) = (v.floor() as i64, u.floor() as i64);
    for (ch, o) in out.iter_mut().enumerate() {
        for di in 0..2i64 {
            for dj in 0..2i64 {
                let (i, j) = (i0 + di, j0 + dj);
                let wy = 1.0 - (v - i as f64).abs();
                let wx = 1.0 - (u - j as f64).abs();
                if i >= 0 && j >= 0 && i < h as i64 && j < w as i64 {
                    *o += wx * wy * map.at(&[ch, i as usize, j as usize]);
                }
            }
        }
    }
    Tensor::from_vec(out)
}

/// Splats `[N,C,D,H,W]` frustum features through an explicit point list,
/// locating each ray sample in polar form.
pub fn splat_point_list(f: &Tensor, cfg: &CameraConfig, grid: &BevGridSpec) -> Tensor {
    let (n, c, d, h, w) = (f.dims()[0], f.dims()[1], f.dims()[2], f.dims()[3], f.dims()[4]);
    let focal = (w as f64 / 2.0) / (cfg.fov_deg.to_radians() / 2.0).tan();
    let bin = (cfg.d_max - cfg.d_min) / d as f64;
    let mut points: Vec<(usize, usize, usize, usize, f64, f64)> = Vec::new();
    for vi in 0..n {
        let pose = cfg.views[vi];
        for k in 0..d {
            let depth = cfg.d_min + bin * (k as f64 + 0.5);
            for row in 0..h {
                for col in 0..w {
                    let lateral = (col as f64 + 0.5 - w as f64 / 2.0) / focal * depth;
                    let bearing = pose.yaw - lateral.atan2(depth);
                    let range = depth.hypot(lateral);
                    points.push((
                        vi,
                        k,
                        row,
                        col,
                        pose.tx + range * bearing.cos(),
                        pose.ty + range * bearing.sin(),
                    ));
                }
            }
        }
    }
    let mut bev = Tensor::zeros(&[c, grid.rows, grid.cols]);
    for (vi, k, row, col, x, y) in points {
        if let Some((r, cc)) = scan_cell(grid, x, y) {
            for ch in 0..c {
                let v = f.at(&[vi, ch, k, row, col]);
                bev.set(&[ch, r, cc], bev.at(&[ch, r, cc]) + v);
            }
        }
    }
    bev
}

pub fn random_radar_points<R: Rng + ?Sized>(rng: &mut R, n: usize, half: f64) -> Vec<RadarPoint> {
    (0..n)
        .map(|_| RadarPoint {
            x: rng.gen_range(-1.1 * half..1.1 * half),
            y: rng.gen_range(-1.1 * half..1.1 * half),
            z: rng.gen_range(-1.0..2.0),
            vx: rng.gen_range(-15.0..15.0),
            vy: rng.gen_range(-15.0..15.0),
            rcs: rng.gen_range(-15.0..35.0),
        })
        .collect()
}

pub fn random_lidar_points<R: Rng + ?Sized>(rng: &mut R, n: usize, half: f64, zmax: f64) -> Vec<LidarPoint> {
    (0..n)
        .map(|_| LidarPoint {
            x: rng.gen_range(-1.1 * half..1.1 * half),
            y: rng.gen_range(-1.1 * half..1.1 * half),
            z: rng.gen_range(-zmax..zmax),
            intensity: rng.gen_range(0.0..1.0),
            t: 0.0,
        })
        .collect()
}

/// `relu(x W1 + b1) W2 + b2` with explicit loops.
pub fn mlp2_naive(x: &[f64; 5], w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Tensor {
    let hidden = w1.dims()[1];
    let out = w2.dims()[1];
    let mut h = vec![0.0; hidden];
    for (j, hj) in h.iter_mut().enumerate() {
        let mut acc = b1.data()[j];
        for (i, xi) in x.iter().enumerate() {
            acc += xi * w1.data()[i * hidden + j];
        }
        *hj = if acc > 0.0 { acc } else { 0.0 };
    }
    let mut y = vec![0.0; out];
    for (j, yj) in y.iter_mut().enumerate() {
        let mut acc = b2.data()[j];
        for (i, hi) in h.iter().enumerate() {
            acc += hi * w2.data()[i * out + j];
        }
        *yj = acc;
    }
    Tensor::from_vec(y)
}

/// Per-cell channel max by scanning every point for every cell.
pub fn radar_grid_brute_force(
    points: &[RadarPoint],
    embeddings: &[Tensor],
    grid: &BevGridSpec,
    channels: usize,
) -> Tensor {
    let mut out = Tensor::zeros(&[channels, grid.rows, grid.cols]);
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            for ch in 0..channels {
                let mut best: Option<f64> = None;
                for (p, e) in points.iter().zip(embeddings) {
                    if scan_cell(grid, p.x, p.y) == Some((row, col)) {
                        let v = e.data()[ch];
                        best = Some(best.map_or(v, |b| b.max(v)));
                    }
                }
                out.set(&[ch, row, col], best.unwrap_or(0.0));
            }
        }
    }
    out
}

pub fn radar_intensity_brute_force(
    points: &[RadarPoint],
    c: &IntensityCoeffs,
    norm: &RadarNorm,
    grid: &BevGridSpec,
) -> Tensor {
    let mut out = Tensor::zeros(&[1, grid.rows, grid.cols]);
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let mut best = 0.0f64;
            for p in points {
                if scan_cell(grid, p.x, p.y) != Some((row, col)) {
                    continue;
                }
                let rn = ((p.rcs - norm.rcs_min) / (norm.rcs_max - norm.rcs_min)).clamp(0.0, 1.0);
                let s = (p.vx * p.vx + p.vy * p.vy).sqrt();
                let v = 1.0 / (1.0 + (-(c.alpha_rcs * rn + c.beta_vel * s)).exp());
                best = best.max(v);
            }
            out.set(&[0, row, col], best);
        }
    }
    out
}

/// Groups points by voxel, averages within voxels, then averages voxel
/// means over the voxels whose centers fall in each cell.
pub fn lidar_intensity_brute_force(points: &[LidarPoint], voxel: &VoxelSpec, grid: &BevGridSpec) -> Tensor {
    let mut groups: BTreeMap<(i64, i64, i64), Vec<f64>> = BTreeMap::new();
    for p in points {
        if scan_cell(grid, p.x, p.y).is_none() || p.z < voxel.z_min || p.z > voxel.z_max {
            continue;
        }
        let key = (
            ((p.x - grid.x_min) / voxel.size[0]).floor() as i64,
            ((p.y - grid.y_min) / voxel.size[1]).floor() as i64,
            ((p.z - voxel.z_min) / voxel.size[2]).floor() as i64,
        );
        groups.entry(key).or_default().push(p.intensity);
    }
    let mut out = Tensor::zeros(&[1, grid.rows, grid.cols]);
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let mut means = Vec::new();
            for ((ix, iy, _), vals) in &groups {
                let cx = grid.x_min + (*ix as f64 + 0.5) * voxel.size[0];
                let cy = grid.y_min + (*iy as f64 + 0.5) * voxel.size[1];
                if scan_cell(grid, cx, cy) == Some((row, col)) {
                    means.push(vals.iter().sum::<f64>() / vals.len() as f64);
                }
            }
            if !means.is_empty() {
                out.set(&[0, row, col], means.iter().sum::<f64>() / means.len() as f64);
            }
        }
    }
    out
}

/// Offset-head and gate parameters read out of a store.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub w_off: Tensor,
    pub b_off: Tensor,
    pub gate_a: f64,
    pub gate_b: f64,
}

pub fn fusion_params(f: &Fusion, store: &ParamStore) -> FusionParams {
    FusionParams {
        w_off: store.value(&f.offsets.weight).unwrap().clone(),
        b_off: store.value(&f.offsets.bias).unwrap().clone(),
        gate_a: store.scalar(&f.gate_weight).unwrap(),
        gate_b: store.scalar(&f.gate_bias).unwrap(),
    }
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gated deformable attention, one query at a time, in closed form.
pub fn deform_attn_closed_form(
    fr: &Tensor,
    fc: &Tensor,
    ic: &Tensor,
    ir: &Tensor,
    p: &FusionParams,
    cfg: &FusionConfig,
) -> Tensor {
    attention_reference(fr, fc, cfg, p, |row, col, u, v| {
        let gr = sig(p.gate_a * ir.at(&[0, row, col]) + p.gate_b);
        let gc = |u: f64, v: f64| sig(p.gate_a * bilinear_closed_form(ic, u, v).data()[0] + p.gate_b);
        (gr, gc(u, v))
    })
}

/// Deformable attention without intensity gates: offsets are scaled by
/// `offset_factor` and logits by `logit_scale`, both constants.
pub fn deform_attn_ungated(
    fr: &Tensor,
    fc: &Tensor,
    p: &FusionParams,
    cfg: &FusionConfig,
    offset_factor: f64,
    logit_scale: f64,
) -> Tensor {
    attention_reference(fr, fc, cfg, p, |_, _, _, _| (offset_factor, logit_scale))
}

/// `gates(row, col, u, v)` returns `(offset factor, logit factor)`; the
/// offset factor must not depend on `(u, v)`.
fn attention_reference(
    fr: &Tensor,
    fc: &Tensor,
    cfg: &FusionConfig,
    p: &FusionParams,
    gates: impl Fn(usize, usize, f64, f64) -> (f64, f64),
) -> Tensor {
    let (c, h, w) = (fr.dims()[0], fr.dims()[1], fr.dims()[2]);
    let mut out = Tensor::zeros(&[c, h, w]);
    for row in 0..h {
        for col in 0..w {
            let q: Vec<f64> = (0..c).map(|ch| fr.at(&[ch, row, col])).collect();
            let (offset_factor, _) = gates(row, col, col as f64, row as f64);
            let mut keys = Vec::new();
            let mut logits = Vec::new();
            for pt in 0..cfg.points {
                let mut du = p.b_off.data()[2 * pt];
                let mut dv = p.b_off.data()[2 * pt + 1];
                for (i, qi) in q.iter().enumerate() {
                    du += qi * p.w_off.at(&[i, 2 * pt]);
                    dv += qi * p.w_off.at(&[i, 2 * pt + 1]);
                }
                let u = col as f64 + du * cfg.offset_scale * offset_factor;
                let v = row as f64 + dv * cfg.offset_scale * offset_factor;
                let k = bilinear_closed_form(fc, u, v);
                let dot: f64 = q.iter().zip(k.data()).map(|(a, b)| a * b).sum();
                let (_, logit_factor) = gates(row, col, u, v);
                logits.push(dot / (c as f64).sqrt() * logit_factor);
                keys.push(k);
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for ch in 0..c {
                let mut acc = if cfg.residual { q[ch] } else { 0.0 };
                for (ei, k) in e.iter().zip(&keys) {
                    acc += ei / z * k.data()[ch];
                }
                out.set(&[ch, row, col], acc);
            }
        }
    }
    out
}

/// Detection loss evaluated cell by cell from the boxes, with targets and
/// normalizers recomputed from scratch.
pub fn det_loss_literal(pred: &HeadOutput, boxes: &[Box3D], grid: &BevGridSpec) -> f64 {
    let (rows, cols) = (grid.rows, grid.cols);
    let cw = (grid.x_max - grid.x_min) / cols as f64;
    let ch = (grid.y_max - grid.y_min) / rows as f64;
    let mut target = vec![0.0f64; NUM_CLASSES * rows * cols];
    let mut centers = Vec::new();
    for b in boxes {
        let Some((br, bc)) = scan_cell(grid, b.x, b.y) else {
            continue;
        };
        centers.push((b, br, bc));
        let ex = b.l * b.yaw.cos().abs() + b.w * b.yaw.sin().abs();
        let ey = b.l * b.yaw.sin().abs() + b.w * b.yaw.cos().abs();
        let sx = (ex / 3.0).max(cw);
        let sy = (ey / 3.0).max(ch);
        for r in 0..rows {
            for c in 0..cols {
                let dx = (c as f64 - bc as f64) * cw;
                let dy = (r as f64 - br as f64) * ch;
                let g = (-(dx * dx / (sx * sx) + dy * dy / (sy * sy)) / 2.0).exp();
                let t = &mut target[(b.class * rows + r) * cols + c];
                if g > *t {
                    *t = g;
                }
            }
        }
    }
    let mut focal = 0.0;
    let mut npos = 0usize;
    for k in 0..NUM_CLASSES {
        for r in 0..rows {
            for c in 0..cols {
                let y = target[(k * rows + r) * cols + c];
                let p = pred.heatmap.at(&[k, r, c]);
                if y == 1.0 {
                    npos += 1;
                    focal += -(1.0 - p) * (1.0 - p) * p.max(1e-12).ln();
                } else {
                    focal += -(1.0 - y).powi(4) * p * p * (1.0 - p).max(1e-12).ln();
                }
            }
        }
    }
    let mut l1 = 0.0;
    for (b, r, c) in &centers {
        let cx = grid.x_min + (*c as f64 + 0.5) * cw;
        let cy = grid.y_min + (*r as f64 + 0.5) * ch;
        let t = [
            (b.x - cx) / cw,
            (b.y - cy) / ch,
            b.z,
            b.l.ln(),
            b.w.ln(),
            b.h.ln(),
            b.yaw.sin(),
            b.yaw.cos(),
        ];
        for (i, tv) in t.iter().enumerate() {
            l1 += (pred.bbox.at(&[i, *r, *c]) - tv).abs();
        }
    }
    focal / npos.max(1) as f64 + l1 / centers.len().max(1) as f64
}

/// `sum_i w_i v_i` in a single pass.
pub fn weighted_sum(weights: &[f64], values: &[f64]) -> f64 {
    weights.iter().zip(values).map(|(w, v)| w * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_agrees_with_edges() {
        let g = BevGridSpec::square(2.0, 4);
        assert_eq!(scan_cell(&g, -2.0, -2.0), Some((0, 0)));
        assert_eq!(scan_cell(&g, 2.0, 2.0), Some((3, 3)));
        assert_eq!(scan_cell(&g, -1.0, 0.999), Some((2, 1)));
        assert_eq!(scan_cell(&g, 2.01, 0.0), None);
    }

    #[test]
    fn rel_error_edges() {
        let z = Tensor::zeros(&[2]);
        assert_eq!(rel_error(&z, &z), 0.0);
        let a = Tensor::from_vec(vec![1.0, 0.0]);
        let b = Tensor::from_vec(vec![1.0, 1e-3]);
        assert!((rel_error(&a, &b) - 1e-3 / b.norm()).abs() < 1e-15);
        assert_eq!(rel_error(&a, &Tensor::zeros(&[3])), f64::INFINITY);
    }

    #[test]
    fn kahan_beats_naive() {
        let xs: Vec<f64> = std::iter::once(1.0).chain(std::iter::repeat_n(1e-16, 1000)).collect();
        assert!((kahan_sum(&xs) - (1.0 + 1e-13)).abs() < 1e-18);
    }
}
