//! Frozen LiDAR teacher: a seeded conv encoder over voxel occupancy and
//! intensity, followed by a head with the student's architecture.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;

use crate::error::{arg, Result};
use crate::grid::{BevGridSpec, VoxelSpec};
use crate::head::{DetectionHead, HeadOutput};
use crate::intensity::{lidar_intensity_bev, LidarPoint};
use crate::nn::{Conv, LINEAR_GAIN, RELU_GAIN};
use crate::ops;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherBundle {
    pub f_lidar: Tensor,
    pub head: HeadOutput,
}

#[derive(Debug, Clone)]
pub struct Teacher {
    pub enc1: Conv,
    pub enc2: Conv,
    pub head: DetectionHead,
}

impl Default for Teacher {
    fn default() -> Self {
        Self {
            enc1: Conv::new("teacher.enc1"),
            enc2: Conv::new("teacher.enc2"),
            head: DetectionHead::new("teacher.head"),
        }
    }
}

/// 1 where any occupied voxel has its center in the cell.
pub fn occupancy_bev(points: &[LidarPoint], voxel: &VoxelSpec, grid: &BevGridSpec) -> Tensor {
    let keys: BTreeSet<[i64; 3]> = points
        .iter()
        .filter(|p| grid.cell_of(p.x, p.y).is_some())
        .filter_map(|p| voxel.key(grid, p.x, p.y, p.z))
        .collect();
    let mut occ = Tensor::zeros(&[1, grid.rows, grid.cols]);
    for key in keys {
        let [cx, cy, _] = voxel.center(grid, key);
        if let Some(cell) = grid.flat_cell_of(cx, cy) {
            occ.data_mut()[cell] = 1.0;
        }
    }
    occ
}

impl Teacher {
    /// All teacher parameters are registered frozen, with small random
    /// biases so the empty-cloud response is not trivially zero.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, channels: usize, rng: &mut R) -> Result<()> {
        self.enc1.init(store, 2, channels, 3, RELU_GAIN, false, rng)?;
        self.enc2.init(store, channels, channels, 3, LINEAR_GAIN, false, rng)?;
        for conv in [&self.enc1, &self.enc2] {
            let b = Tensor::uniform(&[channels], -0.1, 0.1, rng);
            store.set_value(&conv.bias, b)?;
        }
        self.head.init(store, channels, false, rng)
    }

    pub fn encode(
        &self,
        store: &ParamStore,
        lidar: &[LidarPoint],
        voxel: &VoxelSpec,
        grid: &BevGridSpec,
    ) -> Result<Tensor> {
        let occ = occupancy_bev(lidar, voxel, grid);
        let inten = lidar_intensity_bev(lidar, voxel, grid)?.into_tensor();
        let mut data = occ.into_data();
        data.extend(inten.into_data());
        let input = Tensor::new(vec![2, grid.rows, grid.cols], data)?;
        let hidden = ops::relu(&self.enc1.forward(store, &input)?);
        self.enc2.forward(store, &hidden)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        lidar: &[LidarPoint],
        voxel: &VoxelSpec,
        grid: &BevGridSpec,
    ) -> Result<TeacherBundle> {
        let f_lidar = self.encode(store, lidar, voxel, grid)?;
        self.from_features(store, f_lidar)
    }

    /// Runs only the frozen head on externally supplied features.
    pub fn from_features(&self, store: &ParamStore, f_lidar: Tensor) -> Result<TeacherBundle> {
        let (head, _) = self.head.forward(store, &f_lidar)?;
        Ok(TeacherBundle { f_lidar, head })
    }

    /// Loads `[C, H, W]` teacher features from a tensor dump.
    pub fn from_dump(&self, store: &ParamStore, path: impl AsRef<Path>, dims: &[usize]) -> Result<TeacherBundle> {
        let (t, _) = Tensor::load(path)?;
        if t.dims() != dims {
            return arg(format!("teacher dump has dims {:?}, expected {dims:?}", t.dims()));
        }
        self.from_features(store, t)
    }
}

pub fn teacher_forward(
    store: &ParamStore,
    lidar: &[LidarPoint],
    voxel: &VoxelSpec,
    grid: &BevGridSpec,
) -> Result<TeacherBundle> {
    Teacher::default().forward(store, lidar, voxel, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Teacher, ParamStore) {
        let t = Teacher::default();
        let mut s = ParamStore::new();
        t.init(&mut s, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (t, s)
    }

    #[test]
    fn params_are_frozen() {
        let (_, s) = setup();
        assert!(s.iter().all(|(n, p)| n.starts_with("teacher.") && !p.trainable));
    }

    #[test]
    fn empty_cloud_is_bias_response() {
        let (t, s) = setup();
        let g = BevGridSpec::square(8.0, 6);
        let f = t.encode(&s, &[], &VoxelSpec::default(), &g).unwrap();
        let b1 = ops::relu(s.value(&t.enc1.bias).unwrap());
        let hidden = Tensor::new(
            vec![4, 6, 6],
            (0..4).flat_map(|c| std::iter::repeat_n(b1.data()[c], 36)).collect(),
        )
        .unwrap();
        let want = t.enc2.forward(&s, &hidden).unwrap();
        assert_eq!(f, want);
    }

    #[test]
    fn rerun_is_bit_identical() {
        let (t, s) = setup();
        let g = BevGridSpec::square(8.0, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = crate::oracle::random_lidar_points(&mut rng, 50, 8.0, 2.0);
        let a = t.forward(&s, &pts, &VoxelSpec::default(), &g).unwrap();
        let b = teacher_forward(&s, &pts, &VoxelSpec::default(), &g).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loads_features_from_dump() {
        let (t, s) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let f = Tensor::uniform(&[4, 6, 6], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        f.save(&path, Precision::F64).unwrap();
        let b = t.from_dump(&s, &path, &[4, 6, 6]).unwrap();
        assert_eq!(b.f_lidar, f);
        assert!(t.from_dump(&s, &path, &[4, 5, 6]).is_err());
    }
}
