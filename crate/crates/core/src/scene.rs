//! Seeded synthetic scenes: boxes, LiDAR with intensity, radar with RCS and
//! Doppler, and a per-view camera feature image.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraConfig;
use crate::error::{arg, Result};
use crate::head::{Box3D, NUM_CLASSES};
use crate::intensity::LidarPoint;
use crate::radar::RadarPoint;
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Scene extent: every point satisfies `|x|, |y| <= half_range`.
    pub half_range: f64,
    pub n_objects: usize,
    pub lidar_per_object: usize,
    pub lidar_clutter: usize,
    pub radar_per_object: usize,
    pub radar_clutter: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            half_range: 51.2,
            n_objects: 6,
            lidar_per_object: 120,
            lidar_clutter: 300,
            radar_per_object: 4,
            radar_clutter: 8,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.half_range > 2.0 && self.half_range.is_finite()) {
            return arg(format!("scene half range must exceed 2 m, got {}", self.half_range));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// `[N, C_in, H, W]`.
    pub camera_input: Tensor,
    pub radar: Vec<RadarPoint>,
    pub lidar: Vec<LidarPoint>,
    pub boxes: Vec<Box3D>,
    pub seed: u64,
}

/// Nominal `(l, w, h)`, speed range and RCS range per class.
const CLASS_PROFILES: [([f64; 3], (f64, f64), (f64, f64)); NUM_CLASSES] = [
    ([4.5, 1.9, 1.6], (0.0, 12.0), (10.0, 25.0)),
    ([0.8, 0.7, 1.8], (0.0, 2.0), (-5.0, 5.0)),
    ([1.8, 0.7, 1.5], (1.0, 6.0), (0.0, 10.0)),
];

pub const OBJECT_INTENSITY: (f64, f64) = (0.6, 0.9);
pub const CLUTTER_INTENSITY: (f64, f64) = (0.05, 0.3);

fn clamp_xy(v: f64, half: f64) -> f64 {
    v.clamp(-half, half)
}

/// A point on the side faces or the top of `b`.
fn surface_point<R: Rng + ?Sized>(b: &Box3D, rng: &mut R) -> (f64, f64, f64) {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.l / 2.0, b.w / 2.0);
    let (lx, ly, z) = match rng.gen_range(0..5) {
        0 => (hl, rng.gen_range(-hw..=hw), rng.gen_range(0.0..b.h)),
        1 => (-hl, rng.gen_range(-hw..=hw), rng.gen_range(0.0..b.h)),
        2 => (rng.gen_range(-hl..=hl), hw, rng.gen_range(0.0..b.h)),
        3 => (rng.gen_range(-hl..=hl), -hw, rng.gen_range(0.0..b.h)),
        _ => (rng.gen_range(-hl..=hl), rng.gen_range(-hw..=hw), b.h),
    };
    (b.x + lx * c - ly * s, b.y + lx * s + ly * c, b.z - b.h / 2.0 + z)
}

pub fn generate_scene(seed: u64, cfg: &SceneConfig, camera: &CameraConfig) -> Result<SceneSample> {
    cfg.validate()?;
    camera.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = cfg.half_range;
    let mut boxes = Vec::with_capacity(cfg.n_objects);
    let mut velocities = Vec::with_capacity(cfg.n_objects);
    for _ in 0..cfg.n_objects {
        let class = rng.gen_range(0..NUM_CLASSES);
        let (size, speed, _) = CLASS_PROFILES[class];
        let jitter = |rng: &mut ChaCha8Rng, v: f64| v * rng.gen_range(0.9..1.1);
        let (l, w, h) = (
            jitter(&mut rng, size[0]),
            jitter(&mut rng, size[1]),
            jitter(&mut rng, size[2]),
        );
        let yaw = rng.gen_range(-PI..PI);
        let x = rng.gen_range(-0.8 * half..0.8 * half);
        let y = rng.gen_range(-0.8 * half..0.8 * half);
        boxes.push(Box3D {
            x,
            y,
            z: h / 2.0,
            l,
            w,
            h,
            yaw,
            class,
        });
        let v = rng.gen_range(speed.0..=speed.1);
        velocities.push((v * yaw.cos(), v * yaw.sin()));
    }

    let mut lidar = Vec::new();
    for b in &boxes {
        for _ in 0..cfg.lidar_per_object {
            let (x, y, z) = surface_point(b, &mut rng);
            lidar.push(LidarPoint {
                x: clamp_xy(x, half),
                y: clamp_xy(y, half),
                z,
                intensity: rng.gen_range(OBJECT_INTENSITY.0..OBJECT_INTENSITY.1),
                t: rng.gen_range(0.0..0.1),
            });
        }
    }
    let n_object_lidar = lidar.len();
    for _ in 0..cfg.lidar_clutter {
        lidar.push(LidarPoint {
            x: rng.gen_range(-half..=half),
            y: rng.gen_range(-half..=half),
            z: rng.gen_range(-0.1..0.1),
            intensity: rng.gen_range(CLUTTER_INTENSITY.0..CLUTTER_INTENSITY.1),
            t: rng.gen_range(0.0..0.1),
        });
    }

    let mut radar = Vec::new();
    for (b, &(vx, vy)) in boxes.iter().zip(&velocities) {
        let (_, _, rcs) = CLASS_PROFILES[b.class];
        for _ in 0..cfg.radar_per_object {
            radar.push(RadarPoint {
                x: clamp_xy(b.x + rng.gen_range(-0.5..0.5) * b.l, half),
                y: clamp_xy(b.y + rng.gen_range(-0.5..0.5) * b.l, half),
                z: rng.gen_range(0.0..b.h),
                vx: vx + rng.gen_range(-0.3..0.3),
                vy: vy + rng.gen_range(-0.3..0.3),
                rcs: rng.gen_range(rcs.0..rcs.1),
            });
        }
    }
    for _ in 0..cfg.radar_clutter {
        radar.push(RadarPoint {
            x: rng.gen_range(-half..=half),
            y: rng.gen_range(-half..=half),
            z: rng.gen_range(0.0..1.0),
            vx: rng.gen_range(-0.2..0.2),
            vy: rng.gen_range(-0.2..0.2),
            rcs: rng.gen_range(-10.0..5.0),
        });
    }

    let camera_input = render_camera(&lidar, n_object_lidar, &boxes, camera)?;
    Ok(SceneSample {
        camera_input,
        radar,
        lidar,
        boxes,
        seed,
    })
}

/// Per-view features of every projected LiDAR return: hit flag, depth over
/// `d_max`, class code (0 for clutter) and intensity, averaged per pixel.
/// The first `n_object` points belong to `boxes`
/// in equal runs.
fn render_camera(points: &[LidarPoint], n_object: usize, boxes: &[Box3D], cfg: &CameraConfig) -> Result<Tensor> {
    let (n, cin, h, w) = (cfg.n_views(), cfg.in_channels, cfg.img_h, cfg.img_w);
    let mut raw = Tensor::zeros(&[n, cin, h, w]);
    let per_box = if boxes.is_empty() { 1 } else { n_object / boxes.len() };
    for view in 0..n {
        let mut count = vec![0.0; h * w];
        let mut acc = vec![[0.0f64; 4]; h * w];
        for (i, p) in points.iter().enumerate() {
            let Some((row, col, d)) = cfg.project(view, p.x, p.y, p.z) else {
                continue;
            };
            let class = if i < n_object {
                boxes.get(i / per_box.max(1)).map_or(0, |b| b.class + 1)
            } else {
                0
            };
            let px = row * w + col;
            count[px] += 1.0;
            let feats = [1.0, d / cfg.d_max, class as f64 / NUM_CLASSES as f64, p.intensity];
            for (a, f) in acc[px].iter_mut().zip(feats) {
                *a += f;
            }
        }
        for ch in 0..cin {
            for px in 0..h * w {
                if count[px] > 0.0 {
                    let v = if ch == 0 { 1.0 } else { acc[px][ch % 4] / count[px] };
                    raw.set(&[view, ch, px / w, px % w], v);
                }
            }
        }
    }
    Ok(raw)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    seed: u64,
    radar: Vec<RadarPoint>,
    lidar: Vec<LidarPoint>,
    boxes: Vec<Box3D>,
    /// File name of the camera tensor dump, relative to the scene file.
    camera_input: String,
}

/// Sidecar path for the camera tensor of a scene file.
pub fn camera_sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".camera.bin");
    path.with_file_name(name)
}

impl SceneSample {
    pub fn to_json(&self, camera_file: &str) -> Result<String> {
        let file = SceneFile {
            seed: self.seed,
            radar: self.radar.clone(),
            lidar: self.lidar.clone(),
            boxes: self.boxes.clone(),
            camera_input: camera_file.to_owned(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Writes the JSON document and its camera sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let sidecar = camera_sidecar(path);
        let name = sidecar
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_owned();
        fs::write(path, self.to_json(&name)?)?;
        self.camera_input.save(&sidecar, Precision::F64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file: SceneFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        for b in &file.boxes {
            b.validate()?;
        }
        let (camera_input, _) = Tensor::load(path.with_file_name(&file.camera_input))?;
        Ok(Self {
            camera_input,
            radar: file.radar,
            lidar: file.lidar,
            boxes: file.boxes,
            seed: file.seed,
        })
    }
}
