//! The full student pipeline with its frozen teacher, the six loss terms and
//! a single hand-written backward pass over all of them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::{
    lift_backward, lift_to_frustum, splat_backward, splat_to_bev, CameraBranch, CameraCache, CameraConfig, SplatIndex,
};
use crate::distill::{self, LabelEncoder, SoftLabelMask, SwfdAdapter, LD_EPS};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig};
use crate::grid::{BevGridSpec, VoxelSpec};
use crate::head::{self, DepthTargets, DetTargets, DetectionHead, HeadCache, HeadOutput};
use crate::intensity::{lidar_intensity_bev, radar_intensity_bev, CameraIntensity, IntensityCoeffs, IntensityMap};
use crate::objective::{
    term_weights, total_loss, LossBreakdown, LossComponents, LossWeights, LAMBDA3_PARAM, LAMBDA_BLEND_PARAM,
};
use crate::params::ParamStore;
use crate::radar::{
    build_grid_backward, build_grid_with_channels, EmbedCache, EncodeCache, RadarBranch, RadarGrid, RadarNorm,
};
use crate::scene::SceneSample;
use crate::teacher::{Teacher, TeacherBundle};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub grid: BevGridSpec,
    pub voxel: VoxelSpec,
    pub camera: CameraConfig,
    pub fusion: FusionConfig,
    pub radar_norm: RadarNorm,
    pub radar_hidden: usize,
    pub intensity: IntensityCoeffs,
    pub weights: LossWeights,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: BevGridSpec::default(),
            voxel: VoxelSpec::default(),
            camera: CameraConfig::default(),
            fusion: FusionConfig::default(),
            radar_norm: RadarNorm::default(),
            radar_hidden: 16,
            intensity: IntensityCoeffs::default(),
            weights: LossWeights::default(),
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.voxel.validate()?;
        self.camera.validate()?;
        self.fusion.validate()?;
        self.radar_norm.validate()?;
        self.weights.validate()?;
        if self.radar_hidden == 0 {
            return Err(Error::Argument("radar_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.camera.channels
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub camera: CameraBranch,
    pub camera_intensity: CameraIntensity,
    pub radar: RadarBranch,
    pub fusion: Fusion,
    pub adapter: SwfdAdapter,
    pub head: DetectionHead,
    pub teacher: Teacher,
    pub label_encoder: LabelEncoder,
    splat: SplatIndex,
}

/// Per-scene constants: sensor intensity maps, teacher outputs and targets.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scene: SceneSample,
    pub radar_intensity: IntensityMap,
    pub lidar_intensity: IntensityMap,
    pub teacher: TeacherBundle,
    pub label_features: Tensor,
    pub mask: SoftLabelMask,
    pub det_targets: DetTargets,
    pub depth_targets: DepthTargets,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub context: Tensor,
    pub depth: Tensor,
    pub camera_bev: Tensor,
    pub camera_intensity: IntensityMap,
    pub radar_grid: RadarGrid,
    pub radar_bev: Tensor,
    pub fused: Tensor,
    pub attention: Tensor,
    pub head: HeadOutput,
    pub blended: Tensor,
    pub blend_weights: distill::BlendWeights,
    pub losses: LossBreakdown,
    camera_cache: CameraCache,
    embed_cache: EmbedCache,
    encode_cache: EncodeCache,
    head_cache: HeadCache,
}

fn emit(mut t: Tensor, p: Precision) -> Tensor {
    t.round_to(p);
    t
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let splat = SplatIndex::new(&cfg.camera, &cfg.grid);
        Ok(Self {
            cfg,
            camera: CameraBranch::default(),
            camera_intensity: CameraIntensity::default(),
            radar: RadarBranch::default(),
            fusion: Fusion::default(),
            adapter: SwfdAdapter::default(),
            head: DetectionHead::new("head"),
            teacher: Teacher::default(),
            label_encoder: LabelEncoder::default(),
            splat,
        })
    }

    /// Student and frozen parameters, all drawn from one seeded stream.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let c = self.cfg.channels();
        self.camera.init(&mut s, &self.cfg.camera, &mut rng)?;
        self.camera_intensity.init(&mut s, c, &mut rng)?;
        self.radar.init(&mut s, self.cfg.radar_hidden, c, &mut rng)?;
        self.fusion.init(&mut s, c, &self.cfg.fusion, &mut rng)?;
        self.adapter.init(&mut s, c, &mut rng)?;
        self.head.init(&mut s, c, true, &mut rng)?;
        self.teacher.init(&mut s, c, &mut rng)?;
        self.label_encoder.init(&mut s, c, &mut rng)?;
        s.insert(LAMBDA3_PARAM, Tensor::scalar(self.cfg.weights.l3), true)?;
        s.insert(LAMBDA_BLEND_PARAM, Tensor::scalar(self.cfg.weights.lambda_blend), true)?;
        if self.cfg.precision == Precision::F32 {
            for (_, p) in s.iter_mut() {
                p.value.round_to(Precision::F32);
            }
        }
        Ok(s)
    }

    /// Computes everything that does not depend on student parameters.
    /// `teacher_features` replaces the teacher encoder output when given.
    pub fn prepare(
        &self,
        store: &ParamStore,
        scene: SceneSample,
        teacher_features: Option<Tensor>,
    ) -> Result<PreparedScene> {
        let cfg = &self.cfg;
        let radar_intensity = radar_intensity_bev(&scene.radar, &cfg.intensity, &cfg.radar_norm, &cfg.grid);
        let lidar_intensity = lidar_intensity_bev(&scene.lidar, &cfg.voxel, &cfg.grid)?;
        let teacher = match teacher_features {
            Some(f) => {
                f.expect_dims(&[cfg.channels(), cfg.grid.rows, cfg.grid.cols], "teacher features")?;
                self.teacher.from_features(store, f)?
            }
            None => self.teacher.forward(store, &scene.lidar, &cfg.voxel, &cfg.grid)?,
        };
        let label_features = distill::label_encode(store, &self.label_encoder, &scene.boxes, &cfg.grid)?;
        let mask = distill::soft_label_mask(&scene.boxes, &cfg.grid, LD_EPS)?;
        let det_targets = DetTargets::new(&scene.boxes, &cfg.grid);
        let depth_targets = DepthTargets::new(&scene.lidar, &cfg.camera);
        Ok(PreparedScene {
            scene,
            radar_intensity,
            lidar_intensity,
            teacher,
            label_features,
            mask,
            det_targets,
            depth_targets,
        })
    }

    pub fn forward(&self, store: &ParamStore, prep: &PreparedScene) -> Result<Forward> {
        let cfg = &self.cfg;
        let p = cfg.precision;
        let (context, depth, camera_cache) =
            self.camera
                .context_and_depth(store, &cfg.camera, &prep.scene.camera_input)?;
        let frustum = lift_to_frustum(&context, &depth)?;
        let camera_bev = emit(splat_to_bev(&frustum, &self.splat)?.bev, p);
        let camera_intensity = self.camera_intensity.forward(store, &camera_bev)?;

        let (embeddings, embed_cache) = self.radar.embed_points(store, &cfg.radar_norm, &prep.scene.radar)?;
        let radar_grid = build_grid_with_channels(&prep.scene.radar, &embeddings, &cfg.grid, cfg.channels())?;
        let (radar_bev, encode_cache) = self.radar.encode(store, &radar_grid.features)?;
        let radar_bev = emit(radar_bev, p);

        let fo = self.fusion.forward(
            store,
            &cfg.fusion,
            &radar_bev,
            &camera_bev,
            &camera_intensity,
            &prep.radar_intensity,
        )?;
        let fused = emit(fo.fused, p);
        let (head, head_cache) = self.head.forward(store, &fused)?;

        let lambda_blend = store.scalar(LAMBDA_BLEND_PARAM)?;
        let fl = &prep.teacher.f_lidar;
        let (blended, blend_weights) = distill::blend(fl, &radar_bev, &prep.lidar_intensity, lambda_blend)?;

        let comps = LossComponents {
            det: head::det_loss_with_targets(&head, &prep.det_targets)?.value,
            depth: head::depth_loss_with_targets(&depth, &prep.depth_targets)?.0,
            igfm: distill::igfm_loss(&radar_bev, fl, &blended, cfg.weights.alpha_igfm)?,
            swfd: distill::swfd_loss(store, &self.adapter, fl, &fused, &prep.lidar_intensity)?,
            swrd: distill::swrd_loss(&prep.teacher.head, &head, &prep.lidar_intensity)?.value,
            ld: distill::ld_loss(&prep.label_features, &fused, &prep.mask)?,
        };
        let losses = total_loss(&comps, &cfg.weights, store.scalar(LAMBDA3_PARAM)?)?;
        Ok(Forward {
            context,
            depth,
            camera_bev,
            camera_intensity,
            radar_grid,
            radar_bev,
            fused,
            attention: fo.weights,
            head,
            blended,
            blend_weights,
            losses,
            camera_cache,
            embed_cache,
            encode_cache,
            head_cache,
        })
    }

    /// Total loss alone.
    pub fn loss(&self, store: &ParamStore, prep: &PreparedScene) -> Result<f64> {
        Ok(self.forward(store, prep)?.losses.total)
    }

    /// Accumulates the gradient of the total loss into every trainable
    /// entry of `store`. Gradients are not zeroed first.
    pub fn backward(&self, store: &mut ParamStore, prep: &PreparedScene, fw: &Forward) -> Result<()> {
        let cfg = &self.cfg;
        let lambda3 = store.scalar(LAMBDA3_PARAM)?;
        let [l_det, l_depth, l_igfm, l_swfd, l_swrd, l_ld] = term_weights(&cfg.weights, lambda3);
        let fl = &prep.teacher.f_lidar;
        let il = &prep.lidar_intensity;

        store.accumulate(LAMBDA3_PARAM, &Tensor::scalar(fw.losses.igfm))?;

        // head: detection and response distillation
        let det = head::det_loss_with_targets(&fw.head, &prep.det_targets)?;
        let swrd = distill::swrd_loss(&prep.teacher.head, &fw.head, il)?;
        let mut d_hm = det.d_heatmap.scale(l_det);
        d_hm.add_assign(&swrd.d_heatmap.scale(l_swrd))?;
        let mut d_bbox = det.d_bbox.scale(l_det);
        d_bbox.add_assign(&swrd.d_bbox.scale(l_swrd))?;
        let mut d_fused = self.head.backward(store, &fw.head_cache, &fw.head, &d_hm, &d_bbox)?;

        // feature distillation on the fused map
        d_fused.add_assign(&distill::swfd_backward(
            store,
            &self.adapter,
            fl,
            &fw.fused,
            il,
            l_swfd,
        )?)?;
        d_fused.add_assign(&distill::ld_backward(&prep.label_features, &fw.fused, &prep.mask)?.scale(l_ld))?;

        let fg = self.fusion.backward(
            store,
            &cfg.fusion,
            &fw.radar_bev,
            &fw.camera_bev,
            &fw.camera_intensity,
            &prep.radar_intensity,
            &d_fused,
        )?;

        // radar enhancement through the blend
        let (d_fr, d_ft) = distill::igfm_backward(&fw.radar_bev, fl, &fw.blended, cfg.weights.alpha_igfm)?;
        let bg = distill::blend_backward(fl, &fw.radar_bev, il, &fw.blend_weights, &d_ft.scale(l_igfm))?;
        store.accumulate(LAMBDA_BLEND_PARAM, &Tensor::scalar(bg.d_lambda))?;
        let mut d_radar = fg.d_radar;
        d_radar.add_assign(&d_fr.scale(l_igfm))?;
        d_radar.add_assign(&bg.d_radar)?;
        let d_grid = self.radar.encode_backward(store, &fw.encode_cache, &d_radar)?;
        if let Some(d_embed) = build_grid_backward(&fw.radar_grid, &d_grid, prep.scene.radar.len())? {
            self.radar.embed_backward(store, &fw.embed_cache, &d_embed)?;
        }

        // camera
        let mut d_cam = fg.d_camera;
        d_cam.add_assign(&self.camera_intensity.backward(
            store,
            &fw.camera_bev,
            &fw.camera_intensity,
            &fg.d_camera_intensity,
        )?)?;
        let d_frustum = splat_backward(&d_cam, &self.splat)?;
        let (d_ctx, mut d_depth) = lift_backward(&fw.context, &fw.depth, &d_frustum)?;
        let (_, depth_grad) = head::depth_loss_with_targets(&fw.depth, &prep.depth_targets)?;
        d_depth.add_assign(&depth_grad.scale(l_depth))?;
        self.camera
            .backward(store, &fw.camera_cache, &fw.depth, &d_ctx, &d_depth)?;
        Ok(())
    }

    /// Zeroes gradients, runs forward and backward, and checks finiteness.
    pub fn gradients(&self, store: &mut ParamStore, prep: &PreparedScene) -> Result<Forward> {
        store.zero_grads();
        let fw = self.forward(store, prep)?;
        self.backward(store, prep, &fw)?;
        for (name, p) in store.iter() {
            if p.trainable && !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        Ok(fw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Model, ParamStore, PreparedScene) {
        crate::checks::toy_setup(crate::checks::toy_model_config(), 1).unwrap()
    }

    #[test]
    fn forward_is_finite_and_deterministic() {
        let (m, s, prep) = toy();
        let a = m.forward(&s, &prep).unwrap();
        let b = m.forward(&s, &prep).unwrap();
        assert_eq!(a.losses, b.losses);
        assert!(a.losses.total.is_finite() && a.losses.total > 0.0);
        assert!(a.fused.is_finite());
    }

    #[test]
    fn gradient_of_selected_scalars_matches_finite_differences() {
        let (m, mut s, prep) = toy();
        m.gradients(&mut s, &prep).unwrap();
        for name in [
            LAMBDA3_PARAM,
            LAMBDA_BLEND_PARAM,
            "fusion.gate.weight",
            "fusion.gate.bias",
            "head.hm2.bias",
            "radar.embed2.bias",
        ] {
            let x0 = s.value(name).unwrap().clone();
            let num = crate::objective::finite_diff_grad(
                |x| {
                    let mut t = s.clone();
                    t.set_value(name, x.clone())?;
                    m.loss(&t, &prep)
                },
                &x0,
                1e-5,
            )
            .unwrap();
            let err = crate::oracle::rel_error(s.grad(name).unwrap(), &num);
            assert!(err <= 1e-4, "{name}: {err}");
        }
    }
}
