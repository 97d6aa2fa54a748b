//! Center-based detection head, Gaussian center targets, and the supervised
//! detection and depth losses.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraConfig;
use crate::error::{arg, Result};
use crate::grid::BevGridSpec;
use crate::intensity::LidarPoint;
use crate::nn::{Conv, LINEAR_GAIN, RELU_GAIN};
use crate::ops;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 3;
/// `(dx, dy, z, ln l, ln w, ln h, sin yaw, cos yaw)`.
pub const REG_CHANNELS: usize = 8;

/// Focal-loss exponents: `alpha` on the prediction, `beta` on the
/// Gaussian penalty reduction.
pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    #[serde(rename = "cls")]
    pub class: usize,
}

impl Box3D {
    pub fn validate(&self) -> Result<()> {
        if !(self.l > 0.0 && self.w > 0.0 && self.h > 0.0) {
            return arg(format!("box sizes must be positive: {self:?}"));
        }
        if !(self.yaw > -PI && self.yaw <= PI) {
            return arg(format!("box yaw {} outside (-pi, pi]", self.yaw));
        }
        if self.class >= NUM_CLASSES {
            return arg(format!("box class {} >= {NUM_CLASSES}", self.class));
        }
        Ok(())
    }

    /// Axis-aligned footprint extents `(along x, along y)`.
    pub fn footprint(&self) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.l * c.abs() + self.w * s.abs(), self.l * s.abs() + self.w * c.abs())
    }

    /// Gaussian widths: footprint / 3 per axis, floored at one cell.
    pub fn sigma(&self, grid: &BevGridSpec) -> (f64, f64) {
        let (ex, ey) = self.footprint();
        ((ex / 3.0).max(grid.cell_w()), (ey / 3.0).max(grid.cell_h()))
    }

    /// Regression target at the box's center cell.
    pub fn reg_target(&self, grid: &BevGridSpec, row: usize, col: usize) -> [f64; REG_CHANNELS] {
        let (cx, cy) = grid.cell_center(row, col);
        [
            (self.x - cx) / grid.cell_w(),
            (self.y - cy) / grid.cell_h(),
            self.z,
            self.l.ln(),
            self.w.ln(),
            self.h.ln(),
            self.yaw.sin(),
            self.yaw.cos(),
        ]
    }
}

/// Gaussian of `b` evaluated at cell `(row, col)`, centered on the cell
/// that contains the box center so the peak is exactly 1. `None` when the
/// center lies outside the grid.
pub fn box_gaussian(b: &Box3D, grid: &BevGridSpec, row: usize, col: usize) -> Option<f64> {
    let (cr, cc) = grid.cell_of(b.x, b.y)?;
    Some(gaussian_at(b, grid, (cr, cc), row, col))
}

pub(crate) fn gaussian_at(b: &Box3D, grid: &BevGridSpec, center: (usize, usize), row: usize, col: usize) -> f64 {
    let (sx, sy) = b.sigma(grid);
    let dx = (col as f64 - center.1 as f64) * grid.cell_w() / sx;
    let dy = (row as f64 - center.0 as f64) * grid.cell_h() / sy;
    (-(dx * dx + dy * dy) / 2.0).exp()
}

/// Per-class heatmap target: cellwise max of box Gaussians.
pub fn heatmap_target(boxes: &[Box3D], grid: &BevGridSpec) -> Tensor {
    let mut t = Tensor::zeros(&[NUM_CLASSES, grid.rows, grid.cols]);
    for b in boxes {
        let Some(center) = grid.cell_of(b.x, b.y) else {
            continue;
        };
        for row in 0..grid.rows {
            for col in 0..grid.cols {
                let g = gaussian_at(b, grid, center, row, col);
                let slot = &mut t.data_mut()[(b.class * grid.rows + row) * grid.cols + col];
                *slot = slot.max(g);
            }
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub heatmap: Tensor,
    pub bbox: Tensor,
}

/// Per-element penalty-reduced focal loss and its derivative in `p`.
/// Targets exactly 1 are positives.
pub fn focal_term(p: f64, y: f64) -> (f64, f64) {
    let pc = p.clamp(LOG_EPS, 1.0 - LOG_EPS);
    if y == 1.0 {
        let om = 1.0 - p;
        let loss = -om.powi(FOCAL_ALPHA) * pc.ln();
        let d = FOCAL_ALPHA as f64 * om.powi(FOCAL_ALPHA - 1) * pc.ln() - om.powi(FOCAL_ALPHA) / pc;
        (loss, d)
    } else {
        let pen = (1.0 - y).powi(FOCAL_BETA);
        let l1p = (1.0 - pc).ln();
        let loss = -pen * p.powi(FOCAL_ALPHA) * l1p;
        let d = -pen * (FOCAL_ALPHA as f64 * p.powi(FOCAL_ALPHA - 1) * l1p - p.powi(FOCAL_ALPHA) / (1.0 - pc));
        (loss, d)
    }
}

#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub hm1: Conv,
    pub hm2: Conv,
    pub reg1: Conv,
    pub reg2: Conv,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Tensor,
    hm_pre: Tensor,
    reg_pre: Tensor,
}

/// Initial heatmap logit bias, so that the starting heatmap is ~0.1.
const HEATMAP_PRIOR_BIAS: f64 = -2.19;

impl DetectionHead {
    pub fn new(prefix: &str) -> Self {
        Self {
            hm1: Conv::new(&format!("{prefix}.hm1")),
            hm2: Conv::new(&format!("{prefix}.hm2")),
            reg1: Conv::new(&format!("{prefix}.reg1")),
            reg2: Conv::new(&format!("{prefix}.reg2")),
        }
    }

    pub fn init<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        channels: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Result<()> {
        self.hm1.init(store, channels, channels, 3, RELU_GAIN, trainable, rng)?;
        self.hm2
            .init(store, channels, NUM_CLASSES, 1, LINEAR_GAIN, trainable, rng)?;
        store.set_value(&self.hm2.bias, Tensor::full(&[NUM_CLASSES], HEATMAP_PRIOR_BIAS))?;
        self.reg1
            .init(store, channels, channels, 3, RELU_GAIN, trainable, rng)?;
        self.reg2
            .init(store, channels, REG_CHANNELS, 1, LINEAR_GAIN, trainable, rng)
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(HeadOutput, HeadCache)> {
        let hm_pre = self.hm1.forward(store, x)?;
        let heatmap = ops::sigmoid(&self.hm2.forward(store, &ops::relu(&hm_pre))?);
        let reg_pre = self.reg1.forward(store, x)?;
        let bbox = self.reg2.forward(store, &ops::relu(&reg_pre))?;
        let cache = HeadCache {
            input: x.clone(),
            hm_pre,
            reg_pre,
        };
        Ok((HeadOutput { heatmap, bbox }, cache))
    }

    /// Gradient with respect to the head input.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &HeadCache,
        out: &HeadOutput,
        d_heatmap: &Tensor,
        d_bbox: &Tensor,
    ) -> Result<Tensor> {
        let d_logit = ops::sigmoid_backward(&out.heatmap, d_heatmap)?;
        let d_act = self.hm2.backward(store, &ops::relu(&cache.hm_pre), &d_logit)?;
        let d_pre = ops::relu_backward(&cache.hm_pre, &d_act)?;
        let mut dx = self.hm1.backward(store, &cache.input, &d_pre)?;
        let d_act = self.reg2.backward(store, &ops::relu(&cache.reg_pre), d_bbox)?;
        let d_pre = ops::relu_backward(&cache.reg_pre, &d_act)?;
        dx.add_assign(&self.reg1.backward(store, &cache.input, &d_pre)?)?;
        Ok(dx)
    }
}

/// Precomputed supervision for [`det_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct DetTargets {
    pub heatmap: Tensor,
    /// `(row, col, regression target)` per box with its center in the grid.
    pub centers: Vec<(usize, usize, [f64; REG_CHANNELS])>,
}

impl DetTargets {
    pub fn new(boxes: &[Box3D], grid: &BevGridSpec) -> Self {
        let centers = boxes
            .iter()
            .filter_map(|b| grid.cell_of(b.x, b.y).map(|(r, c)| (r, c, b.reg_target(grid, r, c))))
            .collect();
        Self {
            heatmap: heatmap_target(boxes, grid),
            centers,
        }
    }
}

/// Loss value with gradients for the head outputs.
#[derive(Debug, Clone)]
pub struct HeadLoss {
    pub value: f64,
    pub d_heatmap: Tensor,
    pub d_bbox: Tensor,
}

/// Focal loss on the heatmap normalized by the positive count (at least 1),
/// plus L1 on the regression channels at box centers normalized by the box
/// count (at least 1).
pub fn det_loss(pred: &HeadOutput, boxes: &[Box3D], grid: &BevGridSpec) -> Result<HeadLoss> {
    det_loss_with_targets(pred, &DetTargets::new(boxes, grid))
}

pub fn det_loss_with_targets(pred: &HeadOutput, t: &DetTargets) -> Result<HeadLoss> {
    pred.heatmap.expect_same_dims(&t.heatmap, "det_loss heatmap")?;
    let (rows, cols) = (pred.bbox.dims()[1], pred.bbox.dims()[2]);
    let npos = t.heatmap.data().iter().filter(|&&y| y == 1.0).count().max(1) as f64;
    let mut d_heatmap = Tensor::zeros(pred.heatmap.dims());
    let mut focal = 0.0;
    for (i, (&p, &y)) in pred.heatmap.data().iter().zip(t.heatmap.data()).enumerate() {
        let (l, d) = focal_term(p, y);
        focal += l;
        d_heatmap.data_mut()[i] = d / npos;
    }
    let nbox = t.centers.len().max(1) as f64;
    let mut d_bbox = Tensor::zeros(pred.bbox.dims());
    let mut l1 = 0.0;
    for (r, c, target) in &t.centers {
        for (ch, tv) in target.iter().enumerate() {
            let idx = (ch * rows + r) * cols + c;
            let diff = pred.bbox.data()[idx] - tv;
            l1 += diff.abs();
            d_bbox.data_mut()[idx] += diff.signum() * f64::from(diff != 0.0) / nbox;
        }
    }
    Ok(HeadLoss {
        value: focal / npos + l1 / nbox,
        d_heatmap,
        d_bbox,
    })
}

/// Nearest-return depth bin per `(view, row, col)` pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthTargets {
    dims: [usize; 3],
    bins: Vec<Option<usize>>,
}

impl DepthTargets {
    pub fn new(lidar: &[LidarPoint], cfg: &CameraConfig) -> Self {
        let (n, h, w) = (cfg.n_views(), cfg.img_h, cfg.img_w);
        let mut nearest: Vec<Option<f64>> = vec![None; n * h * w];
        for p in lidar {
            for view in 0..n {
                let Some((row, col, d)) = cfg.project(view, p.x, p.y, p.z) else {
                    continue;
                };
                if cfg.bin_of(d).is_none() {
                    continue;
                }
                let slot = &mut nearest[(view * h + row) * w + col];
                if slot.is_none_or(|cur| d < cur) {
                    *slot = Some(d);
                }
            }
        }
        Self {
            dims: [n, h, w],
            bins: nearest.into_iter().map(|d| d.and_then(|d| cfg.bin_of(d))).collect(),
        }
    }

    pub fn supervised(&self) -> usize {
        self.bins.iter().flatten().count()
    }

    pub fn bin(&self, view: usize, row: usize, col: usize) -> Option<usize> {
        let [_, h, w] = self.dims;
        self.bins[(view * h + row) * w + col]
    }
}

/// Mean cross-entropy of the predicted depth distribution against the
/// one-hot bin of the nearest projected LiDAR return; unsupervised pixels
/// are skipped and no supervision gives 0.
pub fn depth_loss(depth: &Tensor, lidar: &[LidarPoint], cfg: &CameraConfig) -> Result<f64> {
    depth_loss_with_targets(depth, &DepthTargets::new(lidar, cfg)).map(|(v, _)| v)
}

pub fn depth_loss_with_targets(depth: &Tensor, t: &DepthTargets) -> Result<(f64, Tensor)> {
    let [n, h, w] = t.dims;
    if depth.ndim() != 4 || depth.dims()[0] != n || depth.dims()[2] != h || depth.dims()[3] != w {
        return arg(format!("depth_loss: depth {:?} vs targets {:?}", depth.dims(), t.dims));
    }
    let d = depth.dims()[1];
    let count = t.supervised();
    let mut grad = Tensor::zeros(depth.dims());
    if count == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for view in 0..n {
        for row in 0..h {
            for col in 0..w {
                let Some(k) = t.bins[(view * h + row) * w + col] else {
                    continue;
                };
                if k >= d {
                    return arg("depth target bin exceeds depth channels");
                }
                let idx = ((view * d + k) * h + row) * w + col;
                let p = depth.data()[idx].max(LOG_EPS);
                total -= p.ln();
                grad.data_mut()[idx] = -1.0 / (p * count as f64);
            }
        }
    }
    Ok((total / count as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid8() -> BevGridSpec {
        BevGridSpec::square(16.0, 8)
    }

    fn bx(x: f64, y: f64, class: usize) -> Box3D {
        Box3D {
            x,
            y,
            z: 0.8,
            l: 4.5,
            w: 1.9,
            h: 1.6,
            yaw: 0.3,
            class,
        }
    }

    #[test]
    fn zero_head_gives_half_heatmap() {
        let head = DetectionHead::new("head");
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        head.init(&mut s, 4, true, &mut rng).unwrap();
        for name in [&head.hm2.weight, &head.hm2.bias] {
            let z = Tensor::zeros(s.value(name).unwrap().dims());
            s.set_value(name, z).unwrap();
        }
        let x = Tensor::uniform(&[4, 5, 5], -1.0, 1.0, &mut rng);
        let (out, _) = head.forward(&s, &x).unwrap();
        assert!(out.heatmap.data().iter().all(|&v| v == 0.5));
        assert_eq!(out.bbox.dims(), &[REG_CHANNELS, 5, 5]);
    }

    #[test]
    fn head_rerun_is_bit_identical_and_in_range() {
        let head = DetectionHead::new("head");
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        head.init(&mut s, 4, true, &mut rng).unwrap();
        let x = Tensor::uniform(&[4, 5, 5], -3.0, 3.0, &mut rng);
        let (a, _) = head.forward(&s, &x).unwrap();
        let (b, _) = head.forward(&s, &x).unwrap();
        assert_eq!(a, b);
        assert!(a.heatmap.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn exact_prediction_on_one_hot_targets_costs_nothing() {
        let g = grid8();
        // tiny boxes: the floored sigma makes neighbours ~0.6, so use a
        // hand-built one-hot target instead of the Gaussian
        let t = DetTargets {
            heatmap: {
                let mut h = Tensor::zeros(&[NUM_CLASSES, 8, 8]);
                h.set(&[1, 3, 4], 1.0);
                h
            },
            centers: vec![(3, 4, bx(1.0, -3.0, 1).reg_target(&g, 3, 4))],
        };
        let mut bbox = Tensor::zeros(&[REG_CHANNELS, 8, 8]);
        for (ch, v) in t.centers[0].2.iter().enumerate() {
            bbox.set(&[ch, 3, 4], *v);
        }
        let pred = HeadOutput {
            heatmap: t.heatmap.clone(),
            bbox,
        };
        let l = det_loss_with_targets(&pred, &t).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn empty_boxes_small_heatmap_vanishes() {
        let g = grid8();
        let mut last = f64::INFINITY;
        for eps in [1e-1, 1e-2, 1e-3, 1e-4] {
            let pred = HeadOutput {
                heatmap: Tensor::full(&[NUM_CLASSES, 8, 8], eps),
                bbox: Tensor::zeros(&[REG_CHANNELS, 8, 8]),
            };
            let l = det_loss(&pred, &[], &g).unwrap().value;
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-5);
    }

    #[test]
    fn det_loss_matches_per_cell_formula() {
        let g = grid8();
        let boxes = [bx(3.0, 5.0, 0), bx(-7.0, -1.0, 2)];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pred = HeadOutput {
            heatmap: Tensor::uniform(&[NUM_CLASSES, 8, 8], 0.01, 0.99, &mut rng),
            bbox: Tensor::uniform(&[REG_CHANNELS, 8, 8], -2.0, 2.0, &mut rng),
        };
        let got = det_loss(&pred, &boxes, &g).unwrap().value;
        let want = oracle::det_loss_literal(&pred, &boxes, &g);
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }

    #[test]
    fn gaussian_peak_and_decay() {
        let g = BevGridSpec::square(51.2, 64);
        let b = bx(0.3, 0.2, 0);
        let (r, c) = g.cell_of(b.x, b.y).unwrap();
        assert_eq!(box_gaussian(&b, &g, r, c), Some(1.0));
        let (sx, _) = b.sigma(&g);
        let far = ((6.0 * sx / g.cell_w()).ceil() as usize) + 1;
        assert!(box_gaussian(&b, &g, r, c + far).unwrap() < 1e-7);
    }

    #[test]
    fn depth_loss_cases() {
        let cfg = CameraConfig {
            views: CameraConfig::ring(1),
            img_h: 4,
            img_w: 4,
            ..Default::default()
        };
        // a point straight ahead at 10.5 m, at mount height
        let p = LidarPoint {
            x: 10.5,
            y: 0.01,
            z: cfg.mount_height,
            intensity: 0.5,
            t: 0.0,
        };
        let t = DepthTargets::new(&[p], &cfg);
        assert_eq!(t.supervised(), 1);
        let uniform = Tensor::full(&[1, 16, 4, 4], 1.0 / 16.0);
        let (l, _) = depth_loss_with_targets(&uniform, &t).unwrap();
        assert!((l - 16f64.ln()).abs() < 1e-12);
        assert!((l - 2.7726).abs() < 1e-4);

        let k = cfg.bin_of(10.5).unwrap();
        let mut exact = Tensor::zeros(&[1, 16, 4, 4]);
        for row in 0..4 {
            for col in 0..4 {
                exact.set(&[0, k, row, col], 1.0);
            }
        }
        assert_eq!(depth_loss(&exact, &[p], &cfg).unwrap(), 0.0);

        let behind = LidarPoint { x: -10.0, ..p };
        assert_eq!(depth_loss(&uniform, &[behind], &cfg).unwrap(), 0.0);
        assert_eq!(depth_loss(&uniform, &[], &cfg).unwrap(), 0.0);
        // points outside every frustum do not change the loss
        let with = depth_loss(&uniform, &[p, behind], &cfg).unwrap();
        assert_eq!(with, depth_loss(&uniform, &[p], &cfg).unwrap());
    }

    #[test]
    fn box_validation() {
        assert!(bx(0.0, 0.0, 0).validate().is_ok());
        assert!(Box3D {
            l: 0.0,
            ..bx(0.0, 0.0, 0)
        }
        .validate()
        .is_err());
        assert!(Box3D {
            yaw: -PI,
            ..bx(0.0, 0.0, 0)
        }
        .validate()
        .is_err());
        assert!(bx(0.0, 0.0, 3).validate().is_err());
    }
}
