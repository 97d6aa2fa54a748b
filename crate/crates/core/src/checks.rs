//! Named check suites behind the `check` command.
//!
//! Every check is deterministic in the seed, so two runs with the same seed
//! print identical reports.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{splat_to_bev, CameraConfig, FrustumFeatures, SplatIndex};
use crate::distill::{self, LD_EPS};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig};
use crate::grid::{BevGridSpec, VoxelSpec};
use crate::head::{self, Box3D, DepthTargets, HeadOutput, NUM_CLASSES, REG_CHANNELS};
use crate::intensity::{lidar_intensity_bev, radar_intensity_bev, IntensityCoeffs, IntensityMap};
use crate::model::{Model, ModelConfig, PreparedScene};
use crate::objective::{finite_diff_grad, term_weights, train_step, LossWeights, LAMBDA3_PARAM};
use crate::ops;
use crate::oracle;
use crate::params::ParamStore;
use crate::radar::{build_grid, RadarNorm};
use crate::scene::{generate_scene, SceneConfig};
use crate::tensor::{Precision, Tensor};

/// Oracle comparisons use this many random instances per kernel.
pub const ORACLE_INSTANCES: usize = 100;
pub const ORACLE_TOL: f64 = 1e-10;
pub const FD_STEP: f64 = 1e-5;
pub const LOSS_GRAD_TOL: f64 = 1e-5;
pub const MODEL_GRAD_TOL: f64 = 1e-4;
pub const SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Oracles,
    Gradients,
    Invariants,
    All,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Oracles => "oracles",
            Suite::Gradients => "gradients",
            Suite::Invariants => "invariants",
            Suite::All => "all",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracles" => Ok(Suite::Oracles),
            "gradients" => Ok(Suite::Gradients),
            "invariants" => Ok(Suite::Invariants),
            "all" => Ok(Suite::All),
            other => Err(Error::Argument(format!(
                "unknown suite `{other}` (expected oracles, gradients, invariants or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub seed: u64,
    pub checks: Vec<CheckOutcome>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(4).max(4);
        writeln!(f, "{:<10}  {:<width$}  {:<6}  detail", "suite", "check", "result")?;
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{:<10}  {:<width$}  {:<6}  {}", c.suite, c.name, verdict, c.detail)?;
        }
        let failed = self.failures().count();
        write!(f, "seed {}: {} checks, {} failed", self.seed, self.checks.len(), failed)
    }
}

/// Maps the grid handed to the production kernels. Oracles always see the
/// unmodified grid, so anything but the identity should make them disagree.
pub type GridMap = fn(&BevGridSpec) -> BevGridSpec;

pub fn same_grid(g: &BevGridSpec) -> BevGridSpec {
    *g
}

pub fn run_suite(suite: Suite, seed: u64) -> Report {
    let mut checks = Vec::new();
    if matches!(suite, Suite::Oracles | Suite::All) {
        checks.extend(oracle_checks(seed, same_grid));
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        checks.extend(loss_gradient_checks(seed));
        checks.extend(model_gradient_checks(seed));
    }
    if matches!(suite, Suite::Invariants | Suite::All) {
        checks.extend(invariant_checks(seed));
    }
    Report { seed, checks }
}

fn outcome(suite: &'static str, name: &str, r: Result<(bool, String)>) -> CheckOutcome {
    let (passed, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        suite,
        name: name.to_string(),
        passed,
        detail,
    }
}

fn within(value: f64, tol: f64, what: &str) -> (bool, String) {
    (value <= tol, format!("{what} {value:.3e} (tol {tol:.0e})"))
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

// ---------------------------------------------------------------- oracles

pub fn oracle_checks(seed: u64, map: GridMap) -> Vec<CheckOutcome> {
    let s = "oracles";
    vec![
        outcome(s, "build_grid", oracle_build_grid(seed, map)),
        outcome(s, "radar_intensity_bev", oracle_radar_intensity(seed, map)),
        outcome(s, "lidar_intensity_bev", oracle_lidar_intensity(seed, map)),
        outcome(s, "conv2d", oracle_conv2d(seed)),
        outcome(s, "splat_to_bev", oracle_splat(seed, map)),
        outcome(s, "deform_attn_fuse", oracle_deform_attn(seed)),
    ]
}

fn max_diff_over(mut each: impl FnMut(usize) -> Result<f64>) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for i in 0..ORACLE_INSTANCES {
        let d = each(i)?;
        worst = if d.is_nan() { f64::NAN } else { worst.max(d) };
    }
    let (ok, msg) = within(worst, ORACLE_TOL, "max abs diff");
    Ok((
        ok && !worst.is_nan(),
        format!("{msg} over {ORACLE_INSTANCES} instances"),
    ))
}

fn oracle_build_grid(seed: u64, map: GridMap) -> Result<(bool, String)> {
    let g = BevGridSpec::square(10.0, 8);
    let mut rng = rng_for(seed, 1);
    max_diff_over(|_| {
        let n = rng.gen_range(0..40);
        let c = rng.gen_range(1..=4);
        let pts = oracle::random_radar_points(&mut rng, n, 11.0);
        let emb: Vec<Tensor> = pts.iter().map(|_| Tensor::uniform(&[c], -2.0, 2.0, &mut rng)).collect();
        let got = crate::radar::build_grid_with_channels(&pts, &emb, &map(&g), c)?;
        let want = oracle::radar_grid_brute_force(&pts, &emb, &g, c);
        if n > 0 {
            build_grid(&pts, &emb, &map(&g))?;
        }
        Ok(got.features.max_abs_diff(&want))
    })
}

fn oracle_radar_intensity(seed: u64, map: GridMap) -> Result<(bool, String)> {
    let g = BevGridSpec::square(10.0, 8);
    let coeffs = IntensityCoeffs::default();
    let norm = RadarNorm::default();
    let mut rng = rng_for(seed, 2);
    max_diff_over(|_| {
        let n = rng.gen_range(0..40);
        let pts = oracle::random_radar_points(&mut rng, n, 11.0);
        let got = radar_intensity_bev(&pts, &coeffs, &norm, &map(&g));
        let want = oracle::radar_intensity_brute_force(&pts, &coeffs, &norm, &g);
        Ok(got.tensor().max_abs_diff(&want))
    })
}

fn oracle_lidar_intensity(seed: u64, map: GridMap) -> Result<(bool, String)> {
    let g = BevGridSpec::square(4.0, 8);
    let v = VoxelSpec::default();
    let mut rng = rng_for(seed, 3);
    max_diff_over(|_| {
        let n = rng.gen_range(0..200);
        let pts = oracle::random_lidar_points(&mut rng, n, 4.5, 0.6);
        let got = lidar_intensity_bev(&pts, &v, &map(&g))?;
        let want = oracle::lidar_intensity_brute_force(&pts, &v, &g);
        Ok(got.tensor().max_abs_diff(&want))
    })
}

fn oracle_conv2d(seed: u64) -> Result<(bool, String)> {
    let mut rng = rng_for(seed, 4);
    max_diff_over(|_| {
        let cin = rng.gen_range(1..=4);
        let cout = rng.gen_range(1..=4);
        let h = rng.gen_range(1..=8);
        let w = rng.gen_range(1..=8);
        let kh = [1, 3, 5][rng.gen_range(0..3)];
        let kw = [1, 3, 5][rng.gen_range(0..3)];
        let x = Tensor::uniform(&[cin, h, w], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform(&[cout, cin, kh, kw], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[cout], -1.0, 1.0, &mut rng);
        Ok(ops::conv2d(&x, &k, &b)?.max_abs_diff(&oracle::conv2d_naive(&x, &k, &b)))
    })
}

fn oracle_splat(seed: u64, map: GridMap) -> Result<(bool, String)> {
    let cfg = CameraConfig {
        views: CameraConfig::ring(2),
        in_channels: 3,
        channels: 3,
        img_h: 2,
        img_w: 4,
        depth_bins: 16,
        ..CameraConfig::default()
    };
    let g = BevGridSpec::square(20.0, 8);
    let index = SplatIndex::new(&cfg, &map(&g));
    let mut rng = rng_for(seed, 5);
    max_diff_over(|_| {
        let f = Tensor::uniform(&[2, 3, 16, 2, 4], -1.0, 1.0, &mut rng);
        let got = splat_to_bev(&FrustumFeatures(f.clone()), &index)?;
        Ok(got.bev.max_abs_diff(&oracle::splat_point_list(&f, &cfg, &g)))
    })
}

fn random_maps<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Result<(IntensityMap, IntensityMap)> {
    Ok((
        IntensityMap::new(Tensor::uniform(&[1, h, w], 0.0, 1.0, rng))?,
        IntensityMap::new(Tensor::uniform(&[1, h, w], 0.0, 1.0, rng))?,
    ))
}

fn oracle_deform_attn(seed: u64) -> Result<(bool, String)> {
    let mut rng = rng_for(seed, 6);
    max_diff_over(|_| {
        let cfg = FusionConfig {
            points: rng.gen_range(1..=2),
            offset_scale: rng.gen_range(0.2..2.0),
            residual: rng.gen_bool(0.5),
        };
        let c = rng.gen_range(1..=4);
        let f = Fusion::default();
        let mut s = ParamStore::new();
        f.init(&mut s, c, &cfg, &mut rng)?;
        s.set_value(&f.gate_weight, Tensor::new(vec![1, 1], vec![rng.gen_range(-3.0..3.0)])?)?;
        s.set_value(&f.gate_bias, Tensor::from_vec(vec![rng.gen_range(-1.0..1.0)]))?;
        let fr = Tensor::uniform(&[c, 4, 4], -1.0, 1.0, &mut rng);
        let fc = Tensor::uniform(&[c, 4, 4], -1.0, 1.0, &mut rng);
        let (ic, ir) = random_maps(4, 4, &mut rng)?;
        let got = f.forward(&s, &cfg, &fr, &fc, &ic, &ir)?;
        let want =
            oracle::deform_attn_closed_form(&fr, &fc, ic.tensor(), ir.tensor(), &oracle::fusion_params(&f, &s), &cfg);
        Ok(got.fused.max_abs_diff(&want))
    })
}

// -------------------------------------------------------------- gradients

/// The 8x8, C=8 model used by the end-to-end gradient check.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        grid: BevGridSpec::square(16.0, 8),
        camera: CameraConfig {
            channels: 8,
            img_h: 4,
            img_w: 8,
            depth_bins: 8,
            d_max: 17.0,
            ..CameraConfig::default()
        },
        fusion: FusionConfig {
            points: 2,
            ..FusionConfig::default()
        },
        radar_hidden: 8,
        precision: Precision::F64,
        ..ModelConfig::default()
    }
}

pub fn toy_scene_config() -> SceneConfig {
    SceneConfig {
        half_range: 16.0,
        n_objects: 3,
        lidar_per_object: 40,
        lidar_clutter: 60,
        radar_per_object: 3,
        radar_clutter: 3,
    }
}

/// Toy model, its parameters and a prepared scene, all derived from `seed`.
pub fn toy_setup(cfg: ModelConfig, seed: u64) -> Result<(Model, ParamStore, PreparedScene)> {
    let model = Model::new(cfg)?;
    let store = model.init_params(seed)?;
    let scene = generate_scene(seed.wrapping_add(1), &toy_scene_config(), &model.cfg.camera)?;
    let prep = model.prepare(&store, scene, None)?;
    Ok((model, store, prep))
}

fn fd_rel(analytic: &Tensor, f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor) -> Result<f64> {
    let num = finite_diff_grad(f, x, FD_STEP)?;
    Ok(oracle::rel_error(analytic, &num))
}

fn worst_of(errs: &[f64], tol: f64) -> (bool, String) {
    let worst = errs.iter().cloned().fold(0.0f64, f64::max);
    within(worst, tol, "max rel error")
}

/// Each loss against its direct inputs on small random instances.
pub fn loss_gradient_checks(seed: u64) -> Vec<CheckOutcome> {
    let s = "gradients";
    vec![
        outcome(s, "grad_det", grad_det(seed)),
        outcome(s, "grad_depth", grad_depth(seed)),
        outcome(s, "grad_igfm", grad_igfm(seed)),
        outcome(s, "grad_swfd", grad_swfd(seed)),
        outcome(s, "grad_swrd", grad_swrd(seed)),
        outcome(s, "grad_ld", grad_ld(seed)),
    ]
}

fn random_boxes<R: Rng + ?Sized>(rng: &mut R, n: usize, half: f64) -> Vec<Box3D> {
    (0..n)
        .map(|_| Box3D {
            x: rng.gen_range(-half..half),
            y: rng.gen_range(-half..half),
            z: rng.gen_range(0.0..1.0),
            l: rng.gen_range(1.0..5.0),
            w: rng.gen_range(0.8..2.5),
            h: rng.gen_range(1.0..2.0),
            yaw: rng.gen_range(-3.0..3.0),
            class: rng.gen_range(0..NUM_CLASSES),
        })
        .collect()
}

fn random_head<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize) -> HeadOutput {
    HeadOutput {
        heatmap: Tensor::uniform(&[NUM_CLASSES, h, w], 0.05, 0.95, rng),
        bbox: Tensor::uniform(&[REG_CHANNELS, h, w], -2.0, 2.0, rng),
    }
}

fn grad_det(seed: u64) -> Result<(bool, String)> {
    let mut rng = rng_for(seed, 11);
    let g = BevGridSpec::square(8.0, 6);
    let boxes = random_boxes(&mut rng, 3, 7.0);
    let pred = random_head(&mut rng, 6, 6);
    let an = head::det_loss(&pred, &boxes, &g)?;
    let eh = fd_rel(
        &an.d_heatmap,
        |x| {
            Ok(head::det_loss(
                &HeadOutput {
                    heatmap: x.clone(),
                    bbox: pred.bbox.clone(),
                },
                &boxes,
                &g,
            )?
            .value)
        },
        &pred.heatmap,
    )?;
    let eb = fd_rel(
        &an.d_bbox,
        |x| {
            Ok(head::det_loss(
                &HeadOutput {
                    heatmap: pred.heatmap.clone(),
                    bbox: x.clone(),
                },
                &boxes,
                &g,
            )?
            .value)
        },
        &pred.bbox,
    )?;
    Ok(worst_of(&[eh, eb], LOSS_GRAD_TOL))
}

fn grad_depth(seed: u64) -> Result<(bool, String)> {
    let mut rng = rng_for(seed, 12);
    let cfg = CameraConfig {
        views: CameraConfig::ring(2),
        img_h: 4,
        img_w: 6,
        depth_bins: 8,
        d_max: 17.0,
        ..CameraConfig::default()
    };
    let lidar = oracle::random_lidar_points(&mut rng, 300, 16.0, 3.0);
    let targets = DepthTargets::new(&lidar, &cfg);
    let logits = Tensor::uniform(&[2, 8, 4, 6], -2.0, 2.0, &mut rng);
    let depth = ops::softmax(&logits, 1)?;
    let (value, an) = head::depth_loss_with_targets(&depth, &targets)?;
    let e = fd_rel(&an, |x| Ok(head::depth_loss_with_targets(x, &targets)?.0), &depth)?;
    let (ok, msg) = within(e, LOSS_GRAD_TOL, "rel error");
    Ok((
        ok && targets.supervised() > 0,
        format!("{msg}, {} pixels, loss {value:.4}", targets.supervised()),
    ))
}

fn rand_feats(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    Tensor::uniform(dims, -1.0, 1.0, rng)
}

fn rand_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<IntensityMap> {
    IntensityMap::new(Tensor::uniform(&[1, h, w], 0.0, 1.0, rng))
}

/// IG-FM through the blend: `L(Fr, lambda) = igfm(Fr, Fl, blend(Fl, Fr, I, lambda))`.
fn grad_igfm(seed: u64) -> Result<(bool, String)> {
    let mut rng = rng_for(seed, 13);
    let dims = [3, 4, 4];
    let (fl, fr) = (rand_feats(&mut rng, &dims), rand_feats(&mut rng, &dims));
    let il = rand_map(&mut rng, 4, 4)?;
    let (alpha, lambda) = (0.5, 1.3);
    let full = |fr: &Tensor, lambda: f64| -> Result<f64> {
        let (ft, _) = distill::blend(&fl, fr, &il, lambda)?;
        distill::igfm_loss(fr, &fl, &ft, alpha)
    };
    let (ft, bw) = distill::blend(&fl, &fr, &il, lambda)?;
    let (mut d_fr, d_ft) = distill::igfm_backward(&fr, &fl, &ft, alpha)?;
    let bg = distill::blend_backward(&fl, &fr, &il, &bw, &d_ft)?;
    d_fr.add_assign(&bg.d_radar)?;
    let e_fr = fd_rel(&d_fr, |x| full(x, lambda), &fr)?;
    let e_l = fd_rel(
        &Tensor::scalar(bg.d_lambda),
        |x| full(&fr, x.data()[0]),
        &Tensor::scalar(lambda),
    )?;
    Ok(worst_of(&[e_fr, e_l], LOSS_GRAD_TOL))
}

fn grad_swfd(seed: u64) -> Result<(bool, String)> {
    let mut rng = rng_for(seed, 14);
    let dims = [3, 4, 4];
    let (fl, fused) = (rand_feats(&mut rng, &dims), rand_feats(&mut rng, &dims));
    let il = rand_map(&mut rng, 4, 4)?;
    let adapter = distill::SwfdAdapter::default();
    let mut store = ParamStore::new();
    adapter.init(&mut store, 3, &mut rng)?;
    let frozen = store.clone();
    let d_fused = distill::swfd_backward(&mut store, &adapter, &fl, &fused, &il, 1.0)?;
    let e_x = fd_rel(&d_fused, |x| distill::swfd_loss(&frozen, &adapter, &fl, x, &il), &fused)?;
    let mut errs = vec![e_x];
    for name in [&adapter.0.weight, &adapter.0.bias] {
        let e = fd_rel(
            store.grad(name)?,
            |v| {
                let mut t = frozen.clone();
                t.set_value(name, v.clone())?;
                distill::swfd_loss(&t, &adapter, &fl, &fused, &il)
            },
            frozen.value(name)?,
        )?;
        errs.push(e);
    }
    Ok(worst_of(&errs, LOSS_GRAD_TOL))
}

fn grad_swrd(seed: u64) -> Result<(bool, String)> {
    let mut rng = rng_for(seed, 15);
    let teacher = random_head(&mut rng, 4, 4);
    let student = random_head(&mut rng, 4, 4);
    let il = rand_map(&mut rng, 4, 4)?;
    let an = distill::swrd_loss(&teacher, &student, &il)?;
    let eh = fd_rel(
        &an.d_heatmap,
        |x| {
            Ok(distill::swrd_loss(
                &teacher,
                &HeadOutput {
                    heatmap: x.clone(),
                    bbox: student.bbox.clone(),
                },
                &il,
            )?
            .value)
        },
        &student.heatmap,
    )?;
    let eb = fd_rel(
        &an.d_bbox,
        |x| {
            Ok(distill::swrd_loss(
                &teacher,
                &HeadOutput {
                    heatmap: student.heatmap.clone(),
                    bbox: x.clone(),
                },
                &il,
            )?
            .value)
        },
        &student.bbox,
    )?;
    Ok(worst_of(&[eh, eb], LOSS_GRAD_TOL))
}

fn grad_ld(seed: u64) -> Result<(bool, String)> {
    let mut rng = rng_for(seed, 16);
    let g = BevGridSpec::square(8.0, 4);
    let boxes = random_boxes(&mut rng, 2, 7.0);
    let mask = distill::soft_label_mask(&boxes, &g, LD_EPS)?;
    let (fl, fused) = (rand_feats(&mut rng, &[3, 4, 4]), rand_feats(&mut rng, &[3, 4, 4]));
    let an = distill::ld_backward(&fl, &fused, &mask)?;
    let e = fd_rel(&an, |x| distill::ld_loss(&fl, x, &mask), &fused)?;
    Ok(within(e, LOSS_GRAD_TOL, "rel error"))
}

/// Loss weights that keep only term `k` (0-based, in objective order).
fn isolate(k: usize) -> LossWeights {
    let mut w = LossWeights {
        l1: 0.0,
        l2: 0.0,
        l3: 0.0,
        l4: 0.0,
        l5: 0.0,
        l6: 0.0,
        ..LossWeights::default()
    };
    match k {
        0 => w.l1 = 1.0,
        1 => w.l2 = 1.0,
        2 => w.l3 = 1.0,
        3 => w.l4 = 1.0,
        4 => w.l5 = 1.0,
        _ => w.l6 = 1.0,
    }
    w
}

const TERM_NAMES: [&str; 6] = ["det", "depth", "igfm", "swfd", "swrd", "ld"];

/// Worst per-tensor relative error of one objective.
#[derive(Debug, Clone, PartialEq)]
struct GradError {
    err: f64,
    tensor: String,
    /// Norm of the analytic gradient of `tensor`.
    norm: f64,
}

impl GradError {
    fn record(&mut self, name: &str, analytic: &Tensor, numeric: &Tensor) {
        let e = oracle::rel_error(analytic, numeric);
        if e > self.err || e.is_nan() {
            self.err = e;
            self.tensor = name.to_string();
            self.norm = analytic.norm();
        }
    }
}

/// One central-difference sweep over every trainable scalar of `store`
/// evaluating all objectives at once. `analytic[j]` holds the gradients of
/// objective `j`; `skip[j]` lists tensors left out for that objective.
fn sweep(
    store: &ParamStore,
    analytic: &[ParamStore],
    skip: &[&[&str]],
    mut f: impl FnMut(&ParamStore) -> Result<Vec<f64>>,
) -> Result<(Vec<GradError>, usize)> {
    let n_obj = analytic.len();
    let mut errors = vec![
        GradError {
            err: 0.0,
            tensor: "-".into(),
            norm: 0.0,
        };
        n_obj
    ];
    let mut probe = store.clone();
    let mut scalars = 0;
    for name in store.trainable_names() {
        let x0 = store.value(&name)?.clone();
        let mut numeric = vec![Tensor::zeros(x0.dims()); n_obj];
        for i in 0..x0.len() {
            probe.value_mut(&name)?.data_mut()[i] = x0.data()[i] + FD_STEP;
            let fp = f(&probe)?;
            probe.value_mut(&name)?.data_mut()[i] = x0.data()[i] - FD_STEP;
            let fm = f(&probe)?;
            probe.value_mut(&name)?.data_mut()[i] = x0.data()[i];
            for j in 0..n_obj {
                if !fp[j].is_finite() || !fm[j].is_finite() {
                    return Err(Error::Oracle(format!("non-finite objective perturbing {name}[{i}]")));
                }
                numeric[j].data_mut()[i] = (fp[j] - fm[j]) / (2.0 * FD_STEP);
            }
        }
        scalars += x0.len();
        for j in 0..n_obj {
            if !skip[j].contains(&name.as_str()) {
                errors[j].record(&name, analytic[j].grad(&name)?, &numeric[j]);
            }
        }
    }
    Ok((errors, scalars))
}

/// End-to-end checks on the toy model: the total and each unweighted term
/// against every trainable scalar, from one finite-difference sweep.
///
/// Term gradients come from a copy of the store whose weights keep only
/// that term, with the learnable IG-FM multiplier pinned to 1 or 0. That
/// multiplier is skipped for the terms: its derivative is the IG-FM value,
/// not part of any term's own gradient.
pub fn model_gradient_checks(seed: u64) -> Vec<CheckOutcome> {
    let s = "gradients";
    let mut names = vec!["grad_total_all_params".to_string()];
    names.extend(TERM_NAMES.iter().map(|t| format!("grad_model_{t}")));
    match model_gradient_errors(seed) {
        Ok((errors, scalars)) => errors
            .into_iter()
            .zip(&names)
            .map(|(e, name)| {
                let (ok, msg) = within(e.err, MODEL_GRAD_TOL, "max rel error");
                let detail = format!("{msg} at {} (|g| {:.2e}), {scalars} scalars", e.tensor, e.norm);
                outcome(s, name, Ok((ok, detail)))
            })
            .collect(),
        Err(e) => names
            .iter()
            .map(|n| outcome(s, n, Err(Error::Oracle(e.to_string()))))
            .collect(),
    }
}

fn model_gradient_errors(seed: u64) -> Result<(Vec<GradError>, usize)> {
    let (model, mut store, prep) = toy_setup(toy_model_config(), seed)?;
    let mut analytic = Vec::with_capacity(7);
    model.gradients(&mut store, &prep)?;
    analytic.push(store.clone());
    for k in 0..TERM_NAMES.len() {
        let term = Model::new(ModelConfig {
            weights: isolate(k),
            ..model.cfg.clone()
        })?;
        let mut s = store.clone();
        s.set_value(LAMBDA3_PARAM, Tensor::scalar(if k == 2 { 1.0 } else { 0.0 }))?;
        term.gradients(&mut s, &prep)?;
        analytic.push(s);
    }
    let mut skip: Vec<&[&str]> = vec![&[]];
    skip.extend(std::iter::repeat_n(&[LAMBDA3_PARAM][..], TERM_NAMES.len()));
    sweep(&store, &analytic, &skip, |p| {
        let l = model.forward(p, &prep)?.losses;
        Ok(vec![l.total, l.det, l.depth, l.igfm, l.swfd, l.swrd, l.ld])
    })
}

// ------------------------------------------------------------- invariants

pub fn invariant_checks(seed: u64) -> Vec<CheckOutcome> {
    let s = "invariants";
    vec![
        outcome(s, "depth_sums_to_one", inv_depth_normalized(seed)),
        outcome(s, "attention_sums_to_one", inv_attention_normalized(seed)),
        outcome(s, "intensity_in_unit_range", inv_intensity_range(seed)),
        outcome(s, "loss_identities", inv_loss_identities(seed)),
        outcome(s, "igfm_fixture", inv_igfm_fixture()),
        outcome(s, "blend_limits", inv_blend_limits(seed)),
        outcome(s, "objective_linearity", inv_linearity(seed)),
        outcome(s, "frozen_params_unchanged", inv_frozen(seed)),
        outcome(s, "gate_equal_is_ungated", inv_gate_equal(seed)),
        outcome(s, "gate_monotone", inv_gate_monotone()),
        outcome(s, "forward_rerun_identical", inv_rerun(seed)),
    ]
}

/// Largest `|sum - 1|` over slices of `t` along `axis` for a 4-D tensor.
fn max_sum_dev(t: &Tensor, axis: usize) -> f64 {
    let d = t.dims();
    let (outer, n, inner): (usize, usize, usize) =
        (d[..axis].iter().product(), d[axis], d[axis + 1..].iter().product());
    let mut worst = 0.0f64;
    for o in 0..outer {
        for i in 0..inner {
            let s: f64 = (0..n).map(|k| t.data()[(o * n + k) * inner + i]).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    worst
}

fn inv_depth_normalized(seed: u64) -> Result<(bool, String)> {
    let (model, store, prep) = toy_setup(toy_model_config(), seed)?;
    let fw = model.forward(&store, &prep)?;
    Ok(within(max_sum_dev(&fw.depth, 1), SUM_TOL, "max |sum - 1|"))
}

fn inv_attention_normalized(seed: u64) -> Result<(bool, String)> {
    let (model, store, prep) = toy_setup(toy_model_config(), seed)?;
    let fw = model.forward(&store, &prep)?;
    Ok(within(max_sum_dev(&fw.attention, 2), SUM_TOL, "max |sum - 1|"))
}

fn inv_intensity_range(seed: u64) -> Result<(bool, String)> {
    let (model, store, prep) = toy_setup(toy_model_config(), seed)?;
    let fw = model.forward(&store, &prep)?;
    let maps = [
        ("camera", fw.camera_intensity.tensor()),
        ("radar", prep.radar_intensity.tensor()),
        ("lidar", prep.lidar_intensity.tensor()),
    ];
    let bad: Vec<&str> = maps
        .iter()
        .filter(|(_, t)| !t.data().iter().all(|v| (0.0..=1.0).contains(v)))
        .map(|(n, _)| *n)
        .collect();
    Ok((
        bad.is_empty(),
        if bad.is_empty() {
            "camera, radar, lidar in [0, 1]".into()
        } else {
            format!("out of range: {bad:?}")
        },
    ))
}

fn inv_loss_identities(seed: u64) -> Result<(bool, String)> {
    let mut rng = rng_for(seed, 21);
    let dims = [3, 4, 4];
    let f = rand_feats(&mut rng, &dims);
    let il = rand_map(&mut rng, 4, 4)?;
    let g = BevGridSpec::square(8.0, 4);
    let mask = distill::soft_label_mask(&random_boxes(&mut rng, 2, 7.0), &g, LD_EPS)?;
    let heads = (random_head(&mut rng, 4, 4), random_head(&mut rng, 4, 4));
    let same_box = HeadOutput {
        heatmap: heads.1.heatmap.clone(),
        bbox: heads.0.bbox.clone(),
    };
    let values = [
        ("align", distill::align_loss(&f, &f)?),
        ("consist", distill::consist_loss(&f, &f)?),
        ("swfd", distill::swfd_value(&f, &f, &il)?),
        ("ld", distill::ld_loss(&f, &f, &mask)?),
        ("swrd_bbox", distill::swrd_bbox_term(&heads.0, &same_box, &il)?),
    ];
    let nonzero: Vec<String> = values
        .iter()
        .filter(|(_, v)| *v != 0.0)
        .map(|(n, v)| format!("{n}={v:e}"))
        .collect();
    Ok((
        nonzero.is_empty(),
        if nonzero.is_empty() {
            "align, consist, swfd, ld, swrd bbox all exactly 0".into()
        } else {
            nonzero.join(", ")
        },
    ))
}

/// 2x2, one channel, alpha 0.5, checked against a hand-computed value.
pub fn igfm_fixture_value() -> Result<f64> {
    let fr = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 0.0, -1.0])?;
    let fl = Tensor::new(vec![1, 2, 2], vec![0.0, 0.0, 1.0, 1.0])?;
    let ft = Tensor::new(vec![1, 2, 2], vec![0.5, 1.0, 0.5, 0.0])?;
    distill::igfm_loss(&fr, &fl, &ft, 0.5)
}

fn inv_igfm_fixture() -> Result<(bool, String)> {
    // align = (1 + 4 + 1 + 4) / 4 = 2.5, consist = (0.25 + 1 + 0.25 + 1) / 4 = 0.625
    let want = 0.5 * 2.5 + 0.5 * 0.625;
    let got = igfm_fixture_value()?;
    Ok(within((got - want).abs(), 1e-12, "abs diff"))
}

fn inv_blend_limits(seed: u64) -> Result<(bool, String)> {
    let mut rng = rng_for(seed, 22);
    let dims = [3, 4, 4];
    let (fl, fr) = (rand_feats(&mut rng, &dims), rand_feats(&mut rng, &dims));
    let il = rand_map(&mut rng, 4, 4)?;
    let (radar_only, _) = distill::blend(&fl, &fr, &il, 0.0)?;
    let ones = IntensityMap::new(Tensor::full(&[1, 4, 4], 1.0))?;
    let (lidar_only, _) = distill::blend(&fl, &fr, &ones, 1.0)?;
    let (saturated, _) = distill::blend(&fl, &fr, &ones, 7.5)?;
    let ok = radar_only == fr && lidar_only == fl && saturated == fl;
    Ok((
        ok,
        "lambda=0 gives F_radar, clamp(lambda I)=1 gives F_lidar, bit-exact".into(),
    ))
}

fn inv_linearity(seed: u64) -> Result<(bool, String)> {
    let cfg = toy_model_config();
    let (model, store, prep) = toy_setup(cfg, seed)?;
    let fw = model.forward(&store, &prep)?;
    let l = fw.losses;
    let w = term_weights(&model.cfg.weights, store.scalar(LAMBDA3_PARAM)?);
    let want = oracle::weighted_sum(&w, &[l.det, l.depth, l.igfm, l.swfd, l.swrd, l.ld]);
    let defaults = model.cfg.weights == LossWeights::default() && w[2] == 100.0;
    let (ok, msg) = within((l.total - want).abs(), 1e-12, "abs diff");
    Ok((ok && defaults, msg))
}

fn inv_frozen(seed: u64) -> Result<(bool, String)> {
    let (model, mut store, prep) = toy_setup(toy_model_config(), seed)?;
    let initial = store.clone();
    for _ in 0..3 {
        model.gradients(&mut store, &prep)?;
        train_step(&mut store, 0.01)?;
    }
    let frozen: Vec<&str> = initial.iter().filter(|(_, p)| !p.trainable).map(|(n, _)| n).collect();
    let changed = frozen
        .iter()
        .filter(|n| store.value(n).ok() != initial.value(n).ok())
        .count();
    let moved = initial
        .trainable_names()
        .iter()
        .any(|n| store.value(n).ok() != initial.value(n).ok());
    let covers =
        frozen.iter().any(|n| n.starts_with("teacher.")) && frozen.iter().any(|n| n.starts_with("label_encoder"));
    Ok((
        changed == 0 && moved && covers,
        format!("{} frozen tensors, {changed} changed after 3 steps", frozen.len()),
    ))
}

/// With the gate slope at 0 every gate equals sigmoid(b), so the fusion is
/// ungated attention with that constant on offsets and logits.
fn inv_gate_equal(seed: u64) -> Result<(bool, String)> {
    let mut rng = rng_for(seed, 23);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let cfg = FusionConfig {
            points: 2,
            offset_scale: 1.5,
            residual: rng.gen_bool(0.5),
        };
        let f = Fusion::default();
        let mut s = ParamStore::new();
        f.init(&mut s, 3, &cfg, &mut rng)?;
        let b = rng.gen_range(-2.0..2.0);
        s.set_value(&f.gate_weight, Tensor::new(vec![1, 1], vec![0.0])?)?;
        s.set_value(&f.gate_bias, Tensor::from_vec(vec![b]))?;
        let fr = rand_feats(&mut rng, &[3, 4, 4]);
        let fc = rand_feats(&mut rng, &[3, 4, 4]);
        let (ic, ir) = random_maps(4, 4, &mut rng)?;
        let got = f.forward(&s, &cfg, &fr, &fc, &ic, &ir)?;
        let g = ops::sigmoid_scalar(b);
        let want = oracle::deform_attn_ungated(&fr, &fc, &oracle::fusion_params(&f, &s), &cfg, g, g);
        worst = worst.max(got.fused.max_abs_diff(&want));
    }
    Ok(within(worst, ORACLE_TOL, "max abs diff"))
}

/// Two samples, one at the query cell and one two cells to the right, with the
/// camera features equal to the query so both similarities are positive.
/// Raising the camera intensity under the second sample raises its gate and
/// must raise its weight.
fn inv_gate_monotone() -> Result<(bool, String)> {
    let cfg = FusionConfig {
        points: 2,
        offset_scale: 1.0,
        residual: false,
    };
    let f = Fusion::default();
    let mut s = ParamStore::new();
    f.init(&mut s, 2, &cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    s.set_value(&f.offsets.weight, Tensor::zeros(&[2, 4]))?;
    s.set_value(&f.offsets.bias, Tensor::from_vec(vec![0.0, 0.0, 4.0, 0.0]))?;
    s.set_value(&f.gate_weight, Tensor::new(vec![1, 1], vec![2.0])?)?;
    let fr = Tensor::full(&[2, 3, 3], 0.7);
    let fc = fr.clone();
    let ir = IntensityMap::new(Tensor::zeros(&[1, 3, 3]))?;
    let mut last = f64::NEG_INFINITY;
    let mut increasing = true;
    let mut trace = Vec::new();
    for level in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let mut ic = Tensor::zeros(&[1, 3, 3]);
        ic.set(&[0, 0, 2], level);
        let out = f.forward(&s, &cfg, &fr, &fc, &IntensityMap::new(ic)?, &ir)?;
        // query (0, 0): sample 0 stays at (0, 0), sample 1 lands on (0, 2)
        let w1 = out.weights.at(&[0, 0, 1]);
        increasing &= w1 > last;
        last = w1;
        trace.push(format!("{w1:.4}"));
    }
    Ok((increasing, format!("weight of boosted key: {}", trace.join(" < "))))
}

fn inv_rerun(seed: u64) -> Result<(bool, String)> {
    let (model, store, prep) = toy_setup(toy_model_config(), seed)?;
    let a = model.forward(&store, &prep)?;
    let b = model.forward(&store, &prep)?;
    let same = a.losses == b.losses && a.fused == b.fused && a.depth == b.depth && a.head == b.head;
    Ok((same, "two forward passes bit-identical".into()))
}
