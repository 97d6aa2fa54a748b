//! Deterministic training loop over one generated scene.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Forward, Model, PreparedScene};
use crate::objective::train_step;
use crate::params::ParamStore;
use crate::scene::generate_scene;
use crate::tensor::{Precision, Tensor};

/// One metrics line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub det: f64,
    pub depth: f64,
    pub igfm: f64,
    pub swfd: f64,
    pub swrd: f64,
    pub ld: f64,
    pub total: f64,
}

impl StepRecord {
    fn new(step: usize, fw: &Forward) -> Self {
        let l = fw.losses;
        Self {
            step,
            det: l.det,
            depth: l.depth,
            igfm: l.igfm,
            swfd: l.swfd,
            swrd: l.swrd,
            ld: l.ld,
            total: l.total,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub initial: ParamStore,
    pub store: ParamStore,
    pub prep: PreparedScene,
    /// Forward pass after the last update.
    pub last: Forward,
    pub records: Vec<StepRecord>,
}

/// Runs `cfg.steps` updates and reports `steps + 1` records: the state
/// before any update, then after each one.
pub fn train(
    cfg: &RunConfig,
    teacher_features: Option<Tensor>,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::new(cfg.model())?;
    let mut store = model.init_params(cfg.seed)?;
    let initial = store.clone();
    let scene = generate_scene(cfg.seed, &cfg.scene, &cfg.camera)?;
    let prep = model.prepare(&store, scene, teacher_features)?;
    let mut records = Vec::with_capacity(cfg.steps + 1);
    let mut step = 0;
    let last = loop {
        let fw = if step < cfg.steps {
            model.gradients(&mut store, &prep)?
        } else {
            model.forward(&store, &prep)?
        };
        if !fw.losses.total.is_finite() {
            return Err(Error::NonFinite(format!("total loss at step {step}")));
        }
        let rec = StepRecord::new(step, &fw);
        on_step(&rec)?;
        records.push(rec);
        if step == cfg.steps {
            break fw;
        }
        train_step(&mut store, cfg.lr)?;
        if cfg.precision == Precision::F32 {
            for (_, p) in store.iter_mut().filter(|(_, p)| p.trainable) {
                p.value.round_to(Precision::F32);
            }
        }
        step += 1;
    };
    Ok(TrainOutcome {
        model,
        initial,
        store,
        prep,
        last,
        records,
    })
}
