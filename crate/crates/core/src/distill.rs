//! Distillation losses: intensity-guided radar enhancement, spatially
//! weighted feature and response imitation, and label distillation under a
//! soft Gaussian mask.
//!
//! Every teacher-side input (LiDAR features, teacher head, label features)
//! is a constant; backward functions only return student-side gradients.

use rand::Rng;

use crate::error::{arg, Result};
use crate::grid::BevGridSpec;
use crate::head::{focal_term, gaussian_at, Box3D, HeadLoss, HeadOutput, NUM_CLASSES};
use crate::intensity::IntensityMap;
use crate::nn::{Conv, LINEAR_GAIN};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Default guard in the label-distillation denominator.
pub const LD_EPS: f64 = 1e-6;

/// Per-box attributes splatted by [`label_encode`]: class one-hot, log sizes
/// and yaw sine/cosine.
pub const LABEL_ATTRS: usize = NUM_CLASSES + 5;

#[derive(Debug, Clone, PartialEq)]
pub struct BlendWeights {
    /// `clamp(lambda * I_lidar, 0, 1)`, shape `[1, H, W]`.
    pub w_lidar: Tensor,
    pub lambda_blend: f64,
}

impl BlendWeights {
    pub fn w_radar(&self) -> Tensor {
        self.w_lidar.map(|w| 1.0 - w)
    }
}

fn expect_map(f: &Tensor, il: &IntensityMap, op: &str) -> Result<(usize, usize, usize)> {
    if f.ndim() != 3 || f.dims()[1] != il.rows() || f.dims()[2] != il.cols() {
        return arg(format!(
            "{op}: features {:?} vs intensity [1, {}, {}]",
            f.dims(),
            il.rows(),
            il.cols()
        ));
    }
    Ok((f.dims()[0], f.dims()[1], f.dims()[2]))
}

/// Convex per-cell blend of LiDAR and radar features.
pub fn blend(fl: &Tensor, fr: &Tensor, il: &IntensityMap, lambda_blend: f64) -> Result<(Tensor, BlendWeights)> {
    fl.expect_same_dims(fr, "blend")?;
    let (c, h, w) = expect_map(fl, il, "blend")?;
    let w_lidar = il.tensor().map(|i| (lambda_blend * i).clamp(0.0, 1.0));
    let mut out = Tensor::zeros(fl.dims());
    let hw = h * w;
    for ch in 0..c {
        for cell in 0..hw {
            let wl = w_lidar.data()[cell];
            let i = ch * hw + cell;
            // exact endpoints so the limits reproduce either input bit for bit
            out.data_mut()[i] = if wl == 0.0 {
                fr.data()[i]
            } else if wl == 1.0 {
                fl.data()[i]
            } else {
                wl * fl.data()[i] + (1.0 - wl) * fr.data()[i]
            };
        }
    }
    Ok((out, BlendWeights { w_lidar, lambda_blend }))
}

#[derive(Debug, Clone)]
pub struct BlendGrads {
    pub d_radar: Tensor,
    pub d_lambda: f64,
}

/// Gradients of [`blend`] for the radar input and the blend scale. The
/// clamp passes gradient to `lambda` only where `0 < lambda * I < 1`.
pub fn blend_backward(
    fl: &Tensor,
    fr: &Tensor,
    il: &IntensityMap,
    bw: &BlendWeights,
    d_out: &Tensor,
) -> Result<BlendGrads> {
    d_out.expect_same_dims(fl, "blend_backward")?;
    let (c, h, w) = expect_map(fl, il, "blend_backward")?;
    let hw = h * w;
    let mut d_radar = Tensor::zeros(fl.dims());
    let mut d_lambda = 0.0;
    for cell in 0..hw {
        let wl = bw.w_lidar.data()[cell];
        let intensity = il.tensor().data()[cell];
        let raw = bw.lambda_blend * intensity;
        let interior = raw > 0.0 && raw < 1.0;
        for ch in 0..c {
            let i = ch * hw + cell;
            d_radar.data_mut()[i] = (1.0 - wl) * d_out.data()[i];
            if interior {
                d_lambda += intensity * d_out.data()[i] * (fl.data()[i] - fr.data()[i]);
            }
        }
    }
    Ok(BlendGrads { d_radar, d_lambda })
}

fn mean_sq_diff(a: &Tensor, b: &Tensor, op: &str) -> Result<f64> {
    a.expect_same_dims(b, op)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// `mean((Fr - Fl)^2)`.
pub fn align_loss(fr: &Tensor, fl: &Tensor) -> Result<f64> {
    mean_sq_diff(fr, fl, "align_loss")
}

/// `mean((Fr - F~)^2)`.
pub fn consist_loss(fr: &Tensor, f_tilde: &Tensor) -> Result<f64> {
    mean_sq_diff(fr, f_tilde, "consist_loss")
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return arg(format!("igfm alpha {alpha} outside [0, 1]"));
    }
    Ok(())
}

pub fn igfm_loss(fr: &Tensor, fl: &Tensor, f_tilde: &Tensor, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * align_loss(fr, fl)? + (1.0 - alpha) * consist_loss(fr, f_tilde)?)
}

/// Partial gradients of [`igfm_loss`] with respect to `Fr` and `F~`, each
/// treated as a free input. Chain the second through [`blend_backward`].
pub fn igfm_backward(fr: &Tensor, fl: &Tensor, f_tilde: &Tensor, alpha: f64) -> Result<(Tensor, Tensor)> {
    check_alpha(alpha)?;
    fr.expect_same_dims(fl, "igfm_backward")?;
    fr.expect_same_dims(f_tilde, "igfm_backward")?;
    let n = fr.len() as f64;
    let mut d_fr = Tensor::zeros(fr.dims());
    let mut d_ft = Tensor::zeros(fr.dims());
    for i in 0..fr.len() {
        let a = 2.0 * alpha * (fr.data()[i] - fl.data()[i]) / n;
        let b = 2.0 * (1.0 - alpha) * (fr.data()[i] - f_tilde.data()[i]) / n;
        d_fr.data_mut()[i] = a + b;
        d_ft.data_mut()[i] = -b;
    }
    Ok((d_fr, d_ft))
}

/// The 1x1 conv that maps fused features into the LiDAR feature space.
#[derive(Debug, Clone)]
pub struct SwfdAdapter(pub Conv);

impl Default for SwfdAdapter {
    fn default() -> Self {
        Self(Conv::new("distill.adapter"))
    }
}

impl SwfdAdapter {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, channels: usize, rng: &mut R) -> Result<()> {
        self.0.init(store, channels, channels, 1, LINEAR_GAIN, true, rng)
    }
}

/// `mean_cells Il * ||Fl - A||^2` where `A` is the adapted student map.
pub fn swfd_value(fl: &Tensor, adapted: &Tensor, il: &IntensityMap) -> Result<f64> {
    fl.expect_same_dims(adapted, "swfd_loss")?;
    let (c, h, w) = expect_map(fl, il, "swfd_loss")?;
    let hw = h * w;
    let mut total = 0.0;
    for cell in 0..hw {
        let sq: f64 = (0..c)
            .map(|ch| {
                let d = fl.data()[ch * hw + cell] - adapted.data()[ch * hw + cell];
                d * d
            })
            .sum();
        total += il.tensor().data()[cell] * sq;
    }
    Ok(total / hw as f64)
}

/// Gradient of [`swfd_value`] with respect to the adapted map.
pub fn swfd_value_backward(fl: &Tensor, adapted: &Tensor, il: &IntensityMap) -> Result<Tensor> {
    fl.expect_same_dims(adapted, "swfd_loss")?;
    let (_, h, w) = expect_map(fl, il, "swfd_loss")?;
    let hw = h * w;
    let mut g = Tensor::zeros(fl.dims());
    for (i, slot) in g.data_mut().iter_mut().enumerate() {
        *slot = -2.0 * il.tensor().data()[i % hw] * (fl.data()[i] - adapted.data()[i]) / hw as f64;
    }
    Ok(g)
}

pub fn swfd_loss(
    store: &ParamStore,
    adapter: &SwfdAdapter,
    fl: &Tensor,
    fused: &Tensor,
    il: &IntensityMap,
) -> Result<f64> {
    swfd_value(fl, &adapter.0.forward(store, fused)?, il)
}

/// Accumulates the adapter gradients and returns the gradient for `fused`.
pub fn swfd_backward(
    store: &mut ParamStore,
    adapter: &SwfdAdapter,
    fl: &Tensor,
    fused: &Tensor,
    il: &IntensityMap,
    scale: f64,
) -> Result<Tensor> {
    let adapted = adapter.0.forward(store, fused)?;
    let d_adapted = swfd_value_backward(fl, &adapted, il)?.scale(scale);
    adapter.0.backward(store, fused, &d_adapted)
}

/// Intensity-weighted mean over cells of the focal term (teacher heatmap as
/// the soft target) plus L1 between the box maps. The returned gradients
/// are for the student head.
pub fn swrd_loss(teacher: &HeadOutput, student: &HeadOutput, il: &IntensityMap) -> Result<HeadLoss> {
    teacher.heatmap.expect_same_dims(&student.heatmap, "swrd_loss")?;
    teacher.bbox.expect_same_dims(&student.bbox, "swrd_loss")?;
    let (k, h, w) = expect_map(&student.heatmap, il, "swrd_loss")?;
    let r = student.bbox.dims()[0];
    let hw = h * w;
    let n = hw as f64;
    let mut d_heatmap = Tensor::zeros(student.heatmap.dims());
    let mut d_bbox = Tensor::zeros(student.bbox.dims());
    let mut total = 0.0;
    for cell in 0..hw {
        let wgt = il.tensor().data()[cell];
        let mut cell_loss = 0.0;
        for ch in 0..k {
            let i = ch * hw + cell;
            let (l, d) = focal_term(student.heatmap.data()[i], teacher.heatmap.data()[i]);
            cell_loss += l;
            d_heatmap.data_mut()[i] = wgt * d / n;
        }
        for ch in 0..r {
            let i = ch * hw + cell;
            let diff = student.bbox.data()[i] - teacher.bbox.data()[i];
            cell_loss += diff.abs();
            d_bbox.data_mut()[i] = wgt * diff.signum() * f64::from(diff != 0.0) / n;
        }
        total += wgt * cell_loss;
    }
    Ok(HeadLoss {
        value: total / n,
        d_heatmap,
        d_bbox,
    })
}

/// The bbox part of [`swrd_loss`] alone.
pub fn swrd_bbox_term(teacher: &HeadOutput, student: &HeadOutput, il: &IntensityMap) -> Result<f64> {
    teacher.bbox.expect_same_dims(&student.bbox, "swrd_loss")?;
    let (r, h, w) = expect_map(&student.bbox, il, "swrd_loss")?;
    let hw = h * w;
    let mut total = 0.0;
    for cell in 0..hw {
        let l1: f64 = (0..r)
            .map(|ch| (student.bbox.data()[ch * hw + cell] - teacher.bbox.data()[ch * hw + cell]).abs())
            .sum();
        total += il.tensor().data()[cell] * l1;
    }
    Ok(total / hw as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMask {
    /// `[1, H, W]`, values in `[0, 1]`.
    pub mask: Tensor,
    pub eps: f64,
}

/// Cellwise max over boxes of each box's center Gaussian.
pub fn soft_label_mask(boxes: &[Box3D], grid: &BevGridSpec, eps: f64) -> Result<SoftLabelMask> {
    if !(eps > 0.0) {
        return arg(format!("soft mask guard must be positive, got {eps}"));
    }
    let mut mask = Tensor::zeros(&[1, grid.rows, grid.cols]);
    for b in boxes {
        let Some(center) = grid.cell_of(b.x, b.y) else {
            continue;
        };
        for row in 0..grid.rows {
            for col in 0..grid.cols {
                let g = gaussian_at(b, grid, center, row, col);
                let slot = &mut mask.data_mut()[row * grid.cols + col];
                *slot = slot.max(g);
            }
        }
    }
    Ok(SoftLabelMask { mask, eps })
}

fn expect_mask(f: &Tensor, m: &SoftLabelMask, op: &str) -> Result<(usize, usize)> {
    if f.ndim() != 3 || f.dims()[1..] != m.mask.dims()[1..] {
        return arg(format!("{op}: features {:?} vs mask {:?}", f.dims(), m.mask.dims()));
    }
    Ok((f.dims()[0], f.dims()[1] * f.dims()[2]))
}

/// `sum(||F_label - F_fused||^2 * M) / (sum(M) + eps)`.
pub fn ld_loss(f_label: &Tensor, fused: &Tensor, mask: &SoftLabelMask) -> Result<f64> {
    f_label.expect_same_dims(fused, "ld_loss")?;
    let (c, hw) = expect_mask(fused, mask, "ld_loss")?;
    let mut num = 0.0;
    for cell in 0..hw {
        let m = mask.mask.data()[cell];
        for ch in 0..c {
            let d = f_label.data()[ch * hw + cell] - fused.data()[ch * hw + cell];
            num += d * d * m;
        }
    }
    Ok(num / (mask.mask.sum() + mask.eps))
}

pub fn ld_backward(f_label: &Tensor, fused: &Tensor, mask: &SoftLabelMask) -> Result<Tensor> {
    f_label.expect_same_dims(fused, "ld_loss")?;
    let (_, hw) = expect_mask(fused, mask, "ld_loss")?;
    let denom = mask.mask.sum() + mask.eps;
    let mut g = Tensor::zeros(fused.dims());
    for (i, slot) in g.data_mut().iter_mut().enumerate() {
        *slot = -2.0 * (f_label.data()[i] - fused.data()[i]) * mask.mask.data()[i % hw] / denom;
    }
    Ok(g)
}

/// Frozen 1x1 conv that turns splatted box attributes into label features.
#[derive(Debug, Clone)]
pub struct LabelEncoder(pub Conv);

impl Default for LabelEncoder {
    fn default() -> Self {
        Self(Conv::new("label_encoder"))
    }
}

impl LabelEncoder {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, channels: usize, rng: &mut R) -> Result<()> {
        self.0.init(store, LABEL_ATTRS, channels, 1, LINEAR_GAIN, false, rng)
    }
}

fn label_attrs(b: &Box3D) -> [f64; LABEL_ATTRS] {
    let mut a = [0.0; LABEL_ATTRS];
    a[b.class] = 1.0;
    a[NUM_CLASSES] = b.l.ln();
    a[NUM_CLASSES + 1] = b.w.ln();
    a[NUM_CLASSES + 2] = b.h.ln();
    a[NUM_CLASSES + 3] = b.yaw.sin();
    a[NUM_CLASSES + 4] = b.yaw.cos();
    a
}

/// Box attributes weighted by each box's Gaussian, truncated at 3 sigma.
/// Where boxes overlap the one with the larger weight wins.
pub fn label_splat(boxes: &[Box3D], grid: &BevGridSpec) -> Tensor {
    let hw = grid.num_cells();
    let mut out = Tensor::zeros(&[LABEL_ATTRS, grid.rows, grid.cols]);
    let mut best = vec![0.0f64; hw];
    for b in boxes {
        let Some(center) = grid.cell_of(b.x, b.y) else {
            continue;
        };
        let attrs = label_attrs(b);
        for row in 0..grid.rows {
            for col in 0..grid.cols {
                let g = gaussian_at(b, grid, center, row, col);
                // exp(-9/2) is the value on the 3-sigma ellipse
                let cell = row * grid.cols + col;
                if g < (-4.5f64).exp() || g <= best[cell] {
                    continue;
                }
                best[cell] = g;
                for (a, v) in attrs.iter().enumerate() {
                    out.data_mut()[a * hw + cell] = g * v;
                }
            }
        }
    }
    out
}

pub fn label_encode(store: &ParamStore, encoder: &LabelEncoder, boxes: &[Box3D], grid: &BevGridSpec) -> Result<Tensor> {
    encoder.0.forward(store, &label_splat(boxes, grid))
}
