//! Shared fixtures for the kernel benchmarks.

use bevkd_core::{Forward, Model, ParamStore, PreparedScene, RunConfig};

/// The default configuration, initialized and run forward once.
pub struct Fixture {
    pub cfg: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    pub prep: PreparedScene,
    pub fw: Forward,
}

impl Fixture {
    pub fn new(cfg: RunConfig) -> Self {
        let model = Model::new(cfg.model()).expect("valid config");
        let store = model.init_params(cfg.seed).expect("init");
        let scene = bevkd_core::generate_scene(cfg.seed, &cfg.scene, &cfg.camera).expect("scene");
        let prep = model.prepare(&store, scene, None).expect("prepare");
        let fw = model.forward(&store, &prep).expect("forward");
        Self {
            cfg,
            model,
            store,
            prep,
            fw,
        }
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Self::new(RunConfig::default())
    }
}
