//! Confidence maps in `[0, 1]`: radar intensity from RCS and Doppler,
//! camera intensity from a conv over the camera BEV map, and voxel-averaged
//! LiDAR intensity projected to BEV.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::grid::{BevGridSpec, VoxelSpec};
use crate::nn::{Conv, LINEAR_GAIN};
use crate::ops::{self, sigmoid_scalar};
use crate::params::ParamStore;
use crate::radar::{RadarNorm, RadarPoint};
use crate::tensor::Tensor;

/// Full-scale value of raw LiDAR intensity.
pub const RAW_INTENSITY_MAX: f64 = 255.0;

/// One LiDAR return. `intensity` is normalized to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    #[serde(rename = "i")]
    pub intensity: f64,
    pub t: f64,
}

impl LidarPoint {
    /// Ingests a raw 0..=255 sensor intensity.
    pub fn from_raw(x: f64, y: f64, z: f64, raw_intensity: f64, t: f64) -> Self {
        Self {
            x,
            y,
            z,
            intensity: (raw_intensity / RAW_INTENSITY_MAX).clamp(0.0, 1.0),
            t,
        }
    }
}

/// `[1, rows, cols]` map with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityMap(Tensor);

impl IntensityMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.ndim() != 3 || t.dims()[0] != 1 {
            return arg(format!("intensity map must be [1,H,W], got {:?}", t.dims()));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return arg(format!("intensity value {v} outside [0, 1]"));
        }
        Ok(Self(t))
    }

    pub fn zeros(grid: &BevGridSpec) -> Self {
        Self(Tensor::zeros(&[1, grid.rows, grid.cols]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn cols(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.0.data()[row * self.cols() + col]
    }
}

/// Fixed weights on normalized RCS and Doppler magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntensityCoeffs {
    pub alpha_rcs: f64,
    pub beta_vel: f64,
}

impl Default for IntensityCoeffs {
    fn default() -> Self {
        Self {
            alpha_rcs: 2.0,
            beta_vel: 0.5,
        }
    }
}

/// `sigmoid(alpha_rcs * rcs_norm + beta_vel * |v|)` with the RCS already
/// normalized.
pub fn radar_intensity_normalized(rcs_norm: f64, vx: f64, vy: f64, c: &IntensityCoeffs) -> f64 {
    sigmoid_scalar(c.alpha_rcs * rcs_norm + c.beta_vel * vx.hypot(vy))
}

pub fn radar_intensity(p: &RadarPoint, c: &IntensityCoeffs, norm: &RadarNorm) -> f64 {
    radar_intensity_normalized(norm.rcs_norm(p.rcs), p.vx, p.vy, c)
}

/// Per-cell maximum of point intensities; empty cells are 0.
pub fn radar_intensity_bev(
    points: &[RadarPoint],
    c: &IntensityCoeffs,
    norm: &RadarNorm,
    grid: &BevGridSpec,
) -> IntensityMap {
    let mut map = Tensor::zeros(&[1, grid.rows, grid.cols]);
    for p in points {
        if let Some(cell) = grid.flat_cell_of(p.x, p.y) {
            let v = radar_intensity(p, c, norm);
            let slot = &mut map.data_mut()[cell];
            *slot = slot.max(v);
        }
    }
    IntensityMap(map)
}

/// Camera intensity head: one `C -> 1` conv followed by a sigmoid, applied
/// to the camera BEV map.
#[derive(Debug, Clone)]
pub struct CameraIntensity {
    pub conv: Conv,
}

impl Default for CameraIntensity {
    fn default() -> Self {
        Self {
            conv: Conv::new("camera_intensity"),
        }
    }
}

impl CameraIntensity {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, channels: usize, rng: &mut R) -> Result<()> {
        self.conv.init(store, channels, 1, 3, LINEAR_GAIN, true, rng)
    }

    pub fn forward(&self, store: &ParamStore, camera_bev: &Tensor) -> Result<IntensityMap> {
        Ok(IntensityMap(ops::sigmoid(&self.conv.forward(store, camera_bev)?)))
    }

    /// Gradient with respect to the camera BEV map.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        camera_bev: &Tensor,
        out: &IntensityMap,
        d_out: &Tensor,
    ) -> Result<Tensor> {
        let d_pre = ops::sigmoid_backward(out.tensor(), d_out)?;
        self.conv.backward(store, camera_bev, &d_pre)
    }
}

/// Mean intensity per voxel, then the mean of voxel means per BEV cell
/// (denominator clamped to 1). Voxels are assigned to cells by their
/// center.
pub fn lidar_intensity_bev(points: &[LidarPoint], voxel: &VoxelSpec, grid: &BevGridSpec) -> Result<IntensityMap> {
    voxel.validate()?;
    let mut voxels: BTreeMap<[i64; 3], (f64, usize)> = BTreeMap::new();
    for p in points {
        if grid.cell_of(p.x, p.y).is_none() {
            continue;
        }
        if let Some(key) = voxel.key(grid, p.x, p.y, p.z) {
            let e = voxels.entry(key).or_insert((0.0, 0));
            e.0 += p.intensity;
            e.1 += 1;
        }
    }
    let cells = grid.num_cells();
    let mut sum = vec![0.0; cells];
    let mut count = vec![0usize; cells];
    for (key, (s, n)) in &voxels {
        let [cx, cy, _] = voxel.center(grid, *key);
        if let Some(cell) = grid.flat_cell_of(cx, cy) {
            sum[cell] += s / *n as f64;
            count[cell] += 1;
        }
    }
    let data = sum
        .iter()
        .zip(&count)
        .map(|(s, &n)| (s / n.max(1) as f64).clamp(0.0, 1.0))
        .collect();
    Ok(IntensityMap(Tensor::new(vec![1, grid.rows, grid.cols], data)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lp(x: f64, y: f64, i: f64) -> LidarPoint {
        LidarPoint {
            x,
            y,
            z: 0.05,
            intensity: i,
            t: 0.0,
        }
    }

    #[test]
    fn radar_intensity_values() {
        let c = IntensityCoeffs {
            alpha_rcs: 3.0,
            beta_vel: 1.0,
        };
        assert_eq!(radar_intensity_normalized(0.0, 0.0, 0.0, &c), 0.5);
        // sigmoid(5) = 0.99330714907...
        assert!((radar_intensity_normalized(0.0, 3.0, 4.0, &c) - 0.993_307_149_1).abs() < 1e-6);
        let neg = IntensityCoeffs {
            alpha_rcs: -1e4,
            beta_vel: 0.0,
        };
        assert!(radar_intensity_normalized(1.0, 0.0, 0.0, &neg) < 1e-12);
    }

    #[test]
    fn radar_bev_single_and_empty() {
        let g = BevGridSpec::square(10.0, 4);
        let norm = RadarNorm::default();
        let c = IntensityCoeffs::default();
        assert_eq!(radar_intensity_bev(&[], &c, &norm, &g).tensor().sum(), 0.0);
        let p = RadarPoint {
            x: 1.0,
            y: 1.0,
            z: 0.0,
            vx: 0.0,
            vy: 0.0,
            rcs: 0.0,
        };
        let want = radar_intensity(&p, &c, &norm);
        let m = radar_intensity_bev(&[p], &c, &norm, &g);
        let (r, col) = g.cell_of(1.0, 1.0).unwrap();
        assert_eq!(m.at(r, col), want);
        assert_eq!(m.tensor().sum(), want);
    }

    #[test]
    fn radar_bev_matches_brute_force() {
        let g = BevGridSpec::square(10.0, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = IntensityCoeffs::default();
        let norm = RadarNorm::default();
        for _ in 0..20 {
            let pts = oracle::random_radar_points(&mut rng, 40, 11.0);
            let got = radar_intensity_bev(&pts, &c, &norm, &g);
            let want = oracle::radar_intensity_brute_force(&pts, &c, &norm, &g);
            assert!(got.tensor().max_abs_diff(&want) <= 1e-12);
        }
    }

    #[test]
    fn camera_intensity_zero_conv_is_half() {
        let head = CameraIntensity::default();
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        head.init(&mut s, 3, &mut rng).unwrap();
        let x = Tensor::uniform(&[3, 5, 4], -5.0, 5.0, &mut rng);
        let m = head.forward(&s, &x).unwrap();
        assert_eq!(m.tensor().dims(), &[1, 5, 4]);
        assert!(m.tensor().data().iter().all(|&v| v > 0.0 && v < 1.0));
        s.set_value(&head.conv.weight, Tensor::zeros(&[1, 3, 3, 3])).unwrap();
        s.set_value(&head.conv.bias, Tensor::zeros(&[1])).unwrap();
        let m = head.forward(&s, &x).unwrap();
        assert!(m.tensor().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn lidar_voxel_mean_then_cell_mean() {
        let g = BevGridSpec::square(10.0, 4);
        let v = VoxelSpec::default();
        let m = lidar_intensity_bev(&[lp(1.01, 1.01, 0.2), lp(1.02, 1.02, 0.4)], &v, &g).unwrap();
        let (r, c) = g.cell_of(1.0, 1.0).unwrap();
        assert!((m.at(r, c) - 0.3).abs() < 1e-15);
        assert_eq!(m.tensor().sum(), m.at(r, c));
        let empty = lidar_intensity_bev(&[], &v, &g).unwrap();
        assert_eq!(empty.tensor().sum(), 0.0);
        // two voxels in one cell: mean of means, not of points
        let m = lidar_intensity_bev(&[lp(1.01, 1.01, 0.2), lp(1.02, 1.02, 0.2), lp(2.01, 2.01, 0.8)], &v, &g).unwrap();
        assert!((m.at(r, c) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn lidar_bev_matches_two_stage_oracle() {
        let g = BevGridSpec::square(4.0, 8);
        let v = VoxelSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let pts = oracle::random_lidar_points(&mut rng, 200, 4.5, 0.6);
            let got = lidar_intensity_bev(&pts, &v, &g).unwrap();
            let want = oracle::lidar_intensity_brute_force(&pts, &v, &g);
            assert!(got.tensor().max_abs_diff(&want) <= 1e-12);
        }
    }

    #[test]
    fn raw_ingest_divides_by_255() {
        let p = LidarPoint::from_raw(0.0, 0.0, 0.0, 51.0, 0.0);
        assert!((p.intensity - 0.2).abs() < 1e-15);
        assert_eq!(LidarPoint::from_raw(0.0, 0.0, 0.0, 400.0, 0.0).intensity, 1.0);
    }

    proptest! {
        #[test]
        fn lidar_map_in_unit_range_and_order_invariant(seed in any::<u64>()) {
            let g = BevGridSpec::square(3.0, 4);
            let v = VoxelSpec::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pts = oracle::random_lidar_points(&mut rng, 60, 3.5, 0.4);
            let a = lidar_intensity_bev(&pts, &v, &g).unwrap();
            prop_assert!(a.tensor().data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            pts.reverse();
            let b = lidar_intensity_bev(&pts, &v, &g).unwrap();
            prop_assert!(a.tensor().max_abs_diff(b.tensor()) <= 1e-15);
        }

        #[test]
        fn duplicating_a_point_at_its_voxel_mean_is_invariant(seed in any::<u64>()) {
            let g = BevGridSpec::square(3.0, 4);
            let v = VoxelSpec::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = oracle::random_lidar_points(&mut rng, 1, 2.5, 0.4);
            let mut dup = pts.clone();
            dup.push(pts[0]);
            let a = lidar_intensity_bev(&pts, &v, &g).unwrap();
            let b = lidar_intensity_bev(&dup, &v, &g).unwrap();
            prop_assert!(a.tensor().max_abs_diff(b.tensor()) <= 1e-15);
        }

        #[test]
        fn radar_intensity_in_unit_interval(rcs in -100.0f64..100.0, vx in -50.0f64..50.0, vy in -50.0f64..50.0) {
            let p = RadarPoint { x: 0.0, y: 0.0, z: 0.0, vx, vy, rcs };
            let i = radar_intensity(&p, &IntensityCoeffs::default(), &RadarNorm::default());
            prop_assert!((0.0..=1.0).contains(&i));
        }
    }
}
