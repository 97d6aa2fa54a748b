//! Intensity-gated deformable cross-attention from radar queries onto the
//! camera BEV map.
//!
//! For a query cell `i` with radar feature `q`:
//!
//! ```text
//! raw      = q W_off + b_off                      (2P values)
//! off_p    = raw_p * offset_scale * g(I_radar[i])
//! k_p      = bilinear(F_cam, i + off_p)
//! s_p      = (q . k_p) / sqrt(C) * g(bilinear(I_cam, i + off_p))
//! w        = softmax(s)
//! out_i    = sum_p w_p k_p  (+ q when the residual path is on)
//! ```
//!
//! `g(x) = sigmoid(a x + b)` is a scalar gate shared by both uses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::intensity::IntensityMap;
use crate::nn::Affine;
use crate::ops::{self, sigmoid_scalar};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Sampling points per query.
    pub points: usize,
    /// Offset magnitude, in cells, for a unit raw offset.
    pub offset_scale: f64,
    pub residual: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            points: 4,
            offset_scale: 1.0,
            residual: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points == 0 {
            return arg("fusion needs at least one sampling point");
        }
        if !self.offset_scale.is_finite() {
            return arg("fusion offset scale must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub offsets: Affine,
    pub gate_weight: String,
    pub gate_bias: String,
}

impl Default for Fusion {
    fn default() -> Self {
        Self {
            offsets: Affine::new("fusion.offsets"),
            gate_weight: "fusion.gate.weight".into(),
            gate_bias: "fusion.gate.bias".into(),
        }
    }
}

/// Scalar gate parameters `(a, b)` of `g(x) = sigmoid(a x + b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateParams {
    pub weight: f64,
    pub bias: f64,
}

/// `sigmoid(weight * intensity + bias)`.
pub fn gate(intensity: f64, p: GateParams) -> f64 {
    sigmoid_scalar(p.weight * intensity + p.bias)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub fused: Tensor,
    /// Attention weights `[rows, cols, P]`.
    pub weights: Tensor,
}

/// Gradients of [`Fusion::forward`] with respect to its tensor inputs.
#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub d_radar: Tensor,
    pub d_camera: Tensor,
    pub d_camera_intensity: Tensor,
}

struct Sample {
    u: f64,
    v: f64,
    key: Tensor,
    cam_intensity: f64,
    gate: f64,
    dot: f64,
}

struct Query {
    q: Tensor,
    raw: Vec<f64>,
    radar_gate: f64,
    samples: Vec<Sample>,
    weights: Vec<f64>,
}

impl Fusion {
    pub fn init<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        channels: usize,
        cfg: &FusionConfig,
        rng: &mut R,
    ) -> Result<()> {
        self.offsets.init(store, channels, 2 * cfg.points, 0.5, true, rng)?;
        store.insert(&self.gate_weight, Tensor::new(vec![1, 1], vec![1.0])?, true)?;
        store.insert(&self.gate_bias, Tensor::from_vec(vec![0.0]), true)
    }

    pub fn gate_params(&self, store: &ParamStore) -> Result<GateParams> {
        Ok(GateParams {
            weight: store.scalar(&self.gate_weight)?,
            bias: store.scalar(&self.gate_bias)?,
        })
    }

    fn check_dims(
        radar: &Tensor,
        camera: &Tensor,
        ic: &IntensityMap,
        ir: &IntensityMap,
    ) -> Result<(usize, usize, usize)> {
        if radar.ndim() != 3 {
            return arg(format!("fusion expects [C,H,W] radar features, got {:?}", radar.dims()));
        }
        radar.expect_same_dims(camera, "fusion radar vs camera")?;
        let (c, h, w) = (radar.dims()[0], radar.dims()[1], radar.dims()[2]);
        for (name, m) in [("camera intensity", ic), ("radar intensity", ir)] {
            if m.rows() != h || m.cols() != w {
                return arg(format!(
                    "fusion: {name} is {:?}, features are {h}x{w}",
                    m.tensor().dims()
                ));
            }
        }
        Ok((c, h, w))
    }

    #[allow(clippy::too_many_arguments)]
    fn query(
        &self,
        store: &ParamStore,
        cfg: &FusionConfig,
        radar: &Tensor,
        camera: &Tensor,
        ic: &IntensityMap,
        ir: &IntensityMap,
        row: usize,
        col: usize,
    ) -> Result<Query> {
        let (c, h, w) = (radar.dims()[0], radar.dims()[1], radar.dims()[2]);
        let gp = self.gate_params(store)?;
        let q = Tensor::from_vec((0..c).map(|ch| radar.data()[(ch * h + row) * w + col]).collect());
        let raw = self.offsets.forward(store, &q)?.into_data();
        let radar_gate = gate(ir.at(row, col), gp);
        let scale = cfg.offset_scale * radar_gate;
        let inv_sqrt_c = 1.0 / (c as f64).sqrt();
        let mut samples = Vec::with_capacity(cfg.points);
        let mut logits = Vec::with_capacity(cfg.points);
        for p in 0..cfg.points {
            let u = col as f64 + raw[2 * p] * scale;
            let v = row as f64 + raw[2 * p + 1] * scale;
            let key = ops::bilinear_sample(camera, u, v)?;
            let cam_intensity = ops::bilinear_sample(ic.tensor(), u, v)?.data()[0];
            let g = gate(cam_intensity, gp);
            let dot = q.data().iter().zip(key.data()).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt_c;
            logits.push(dot * g);
            samples.push(Sample {
                u,
                v,
                key,
                cam_intensity,
                gate: g,
                dot,
            });
        }
        let weights = ops::softmax(&Tensor::from_vec(logits), 0)?.into_data();
        Ok(Query {
            q,
            raw,
            radar_gate,
            samples,
            weights,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        cfg: &FusionConfig,
        radar: &Tensor,
        camera: &Tensor,
        camera_intensity: &IntensityMap,
        radar_intensity: &IntensityMap,
    ) -> Result<FusionOutput> {
        cfg.validate()?;
        let (c, h, w) = Self::check_dims(radar, camera, camera_intensity, radar_intensity)?;
        let mut fused = Tensor::zeros(&[c, h, w]);
        let mut weights = Tensor::zeros(&[h, w, cfg.points]);
        for row in 0..h {
            for col in 0..w {
                let qr = self.query(store, cfg, radar, camera, camera_intensity, radar_intensity, row, col)?;
                for ch in 0..c {
                    let mut acc: f64 = qr
                        .samples
                        .iter()
                        .zip(&qr.weights)
                        .map(|(s, wt)| wt * s.key.data()[ch])
                        .sum();
                    if cfg.residual {
                        acc += qr.q.data()[ch];
                    }
                    fused.data_mut()[(ch * h + row) * w + col] = acc;
                }
                let base = (row * w + col) * cfg.points;
                weights.data_mut()[base..base + cfg.points].copy_from_slice(&qr.weights);
            }
        }
        Ok(FusionOutput { fused, weights })
    }

    /// Accumulates offset-head and gate gradients; returns input gradients.
    /// The radar intensity map is treated as a constant.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cfg: &FusionConfig,
        radar: &Tensor,
        camera: &Tensor,
        camera_intensity: &IntensityMap,
        radar_intensity: &IntensityMap,
        d_fused: &Tensor,
    ) -> Result<FusionGrads> {
        let (c, h, w) = Self::check_dims(radar, camera, camera_intensity, radar_intensity)?;
        d_fused.expect_dims(&[c, h, w], "fusion backward upstream")?;
        let gp = self.gate_params(store)?;
        let w_off = store.value(&self.offsets.weight)?.clone();
        let inv_sqrt_c = 1.0 / (c as f64).sqrt();

        let mut d_radar = Tensor::zeros(radar.dims());
        let mut d_camera = Tensor::zeros(camera.dims());
        let mut d_ic = Tensor::zeros(camera_intensity.tensor().dims());
        let mut d_w_off = Tensor::zeros(w_off.dims());
        let mut d_b_off = Tensor::zeros(&[2 * cfg.points]);
        let mut d_gate_w = 0.0;
        let mut d_gate_b = 0.0;

        for row in 0..h {
            for col in 0..w {
                let qr = self.query(store, cfg, radar, camera, camera_intensity, radar_intensity, row, col)?;
                let g_out: Vec<f64> = (0..c).map(|ch| d_fused.data()[(ch * h + row) * w + col]).collect();
                let mut dq = if cfg.residual { g_out.clone() } else { vec![0.0; c] };

                // attention weights
                let dw: Vec<f64> = qr
                    .samples
                    .iter()
                    .map(|s| s.key.data().iter().zip(&g_out).map(|(a, b)| a * b).sum())
                    .collect();
                let mix: f64 = qr.weights.iter().zip(&dw).map(|(a, b)| a * b).sum();

                let mut d_raw = vec![0.0; 2 * cfg.points];
                let mut d_radar_gate = 0.0;
                let scale = cfg.offset_scale * qr.radar_gate;
                for (p, s) in qr.samples.iter().enumerate() {
                    let ds = qr.weights[p] * (dw[p] - mix);
                    let d_dot = ds * s.gate;
                    let d_gate = ds * s.dot;
                    let mut dk: Vec<f64> = g_out.iter().map(|g| qr.weights[p] * g).collect();
                    for ch in 0..c {
                        dk[ch] += d_dot * inv_sqrt_c * qr.q.data()[ch];
                        dq[ch] += d_dot * inv_sqrt_c * s.key.data()[ch];
                    }
                    let dz = d_gate * s.gate * (1.0 - s.gate);
                    d_gate_w += dz * s.cam_intensity;
                    d_gate_b += dz;
                    let d_cam_int = dz * gp.weight;

                    let (du_k, dv_k) = ops::bilinear_sample_backward(camera, s.u, s.v, &dk, Some(&mut d_camera))?;
                    let (du_i, dv_i) = ops::bilinear_sample_backward(
                        camera_intensity.tensor(),
                        s.u,
                        s.v,
                        &[d_cam_int],
                        Some(&mut d_ic),
                    )?;
                    let (du, dv) = (du_k + du_i, dv_k + dv_i);
                    d_raw[2 * p] += du * scale;
                    d_raw[2 * p + 1] += dv * scale;
                    d_radar_gate += (du * qr.raw[2 * p] + dv * qr.raw[2 * p + 1]) * cfg.offset_scale;
                }
                let dz = d_radar_gate * qr.radar_gate * (1.0 - qr.radar_gate);
                d_gate_w += dz * radar_intensity.at(row, col);
                d_gate_b += dz;

                for (j, &dr) in d_raw.iter().enumerate() {
                    d_b_off.data_mut()[j] += dr;
                    for ch in 0..c {
                        d_w_off.data_mut()[ch * 2 * cfg.points + j] += qr.q.data()[ch] * dr;
                        dq[ch] += w_off.data()[ch * 2 * cfg.points + j] * dr;
                    }
                }
                for (ch, g) in dq.iter().enumerate() {
                    d_radar.data_mut()[(ch * h + row) * w + col] += g;
                }
            }
        }
        store.accumulate(&self.offsets.weight, &d_w_off)?;
        store.accumulate(&self.offsets.bias, &d_b_off)?;
        store.accumulate(&self.gate_weight, &Tensor::new(vec![1, 1], vec![d_gate_w])?)?;
        store.accumulate(&self.gate_bias, &Tensor::from_vec(vec![d_gate_b]))?;
        Ok(FusionGrads {
            d_radar,
            d_camera,
            d_camera_intensity: d_ic,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(c: usize, cfg: &FusionConfig, seed: u64) -> (Fusion, ParamStore) {
        let f = Fusion::default();
        let mut s = ParamStore::new();
        f.init(&mut s, c, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (f, s)
    }

    fn maps(h: usize, w: usize, rng: &mut ChaCha8Rng) -> (IntensityMap, IntensityMap) {
        (
            IntensityMap::new(Tensor::uniform(&[1, h, w], 0.0, 1.0, rng)).unwrap(),
            IntensityMap::new(Tensor::uniform(&[1, h, w], 0.0, 1.0, rng)).unwrap(),
        )
    }

    #[test]
    fn gate_values() {
        assert_eq!(gate(3.7, GateParams { weight: 0.0, bias: 0.0 }), 0.5);
        assert!((gate(2.0, GateParams { weight: 1.0, bias: 0.0 }) - 0.880_797_077_977_882_4).abs() < 1e-6);
    }

    #[test]
    fn single_point_zero_offset_reads_its_own_cell() {
        let cfg = FusionConfig {
            points: 1,
            offset_scale: 1.0,
            residual: false,
        };
        let (f, mut s) = setup(3, &cfg, 1);
        s.set_value(&f.offsets.weight, Tensor::zeros(&[3, 2])).unwrap();
        s.set_value(&f.offsets.bias, Tensor::zeros(&[2])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fr = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let fc = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let (ic, ir) = maps(4, 4, &mut rng);
        let out = f.forward(&s, &cfg, &fr, &fc, &ic, &ir).unwrap();
        assert_eq!(out.fused, fc);
        assert!(out.weights.data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn equal_logits_average_values() {
        let cfg = FusionConfig {
            points: 2,
            offset_scale: 1.0,
            residual: false,
        };
        let (f, mut s) = setup(2, &cfg, 1);
        // both samples land on the query cell with identical keys
        s.set_value(&f.offsets.weight, Tensor::zeros(&[2, 4])).unwrap();
        s.set_value(&f.offsets.bias, Tensor::zeros(&[4])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fr = Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng);
        let fc = Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng);
        let (ic, ir) = maps(3, 3, &mut rng);
        let out = f.forward(&s, &cfg, &fr, &fc, &ic, &ir).unwrap();
        assert!(out.weights.data().iter().all(|&w| (w - 0.5).abs() < 1e-15));
        assert!(out.fused.max_abs_diff(&fc) < 1e-15);
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let cfg = FusionConfig::default();
        let (f, s) = setup(2, &cfg, 1);
        let fr = Tensor::zeros(&[2, 3, 3]);
        let fc = Tensor::zeros(&[2, 3, 4]);
        let m = IntensityMap::new(Tensor::zeros(&[1, 3, 3])).unwrap();
        assert!(f.forward(&s, &cfg, &fr, &fc, &m, &m).is_err());
    }

    #[test]
    fn matches_closed_form_oracle() {
        let cfg = FusionConfig {
            points: 2,
            offset_scale: 1.3,
            residual: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for seed in 0..20 {
            let (f, s) = setup(3, &cfg, seed);
            let fr = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
            let fc = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
            let (ic, ir) = maps(4, 4, &mut rng);
            let got = f.forward(&s, &cfg, &fr, &fc, &ic, &ir).unwrap();
            let want = oracle::deform_attn_closed_form(
                &fr,
                &fc,
                ic.tensor(),
                ir.tensor(),
                &oracle::fusion_params(&f, &s),
                &cfg,
            );
            assert!(got.fused.max_abs_diff(&want) <= 1e-10);
            for q in 0..16 {
                let sum: f64 = got.weights.data()[q * 2..q * 2 + 2].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
}
