//! Radar branch: per-point MLP embedding, max-pooled BEV grid, and a small
//! residual conv encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::grid::BevGridSpec;
use crate::nn::{Affine, Conv, LINEAR_GAIN, RELU_GAIN};
use crate::ops;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// One radar return: position (m), ego-compensated Doppler components (m/s)
/// and radar cross-section (dBsm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub vx: f64,
    pub vy: f64,
    pub rcs: f64,
}

impl RadarPoint {
    /// Doppler magnitude `sqrt(vx^2 + vy^2)`.
    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }
}

/// Input scaling applied before the point MLP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadarNorm {
    pub rcs_min: f64,
    pub rcs_max: f64,
    /// Divides x, y and z.
    pub position_scale: f64,
    /// Divides the Doppler magnitude.
    pub speed_scale: f64,
}

impl Default for RadarNorm {
    fn default() -> Self {
        Self {
            rcs_min: -10.0,
            rcs_max: 30.0,
            position_scale: 51.2,
            speed_scale: 10.0,
        }
    }
}

impl RadarNorm {
    pub fn validate(&self) -> Result<()> {
        if !(self.rcs_max > self.rcs_min) || !(self.position_scale > 0.0) || !(self.speed_scale > 0.0) {
            return arg(format!("invalid radar normalization {self:?}"));
        }
        Ok(())
    }

    /// RCS mapped affinely from `[rcs_min, rcs_max]` onto `[0, 1]`, clamped.
    pub fn rcs_norm(&self, rcs: f64) -> f64 {
        ((rcs - self.rcs_min) / (self.rcs_max - self.rcs_min)).clamp(0.0, 1.0)
    }

    /// MLP input `(x, y, z, v, rcs)`.
    pub fn features(&self, p: &RadarPoint) -> [f64; 5] {
        [
            p.x / self.position_scale,
            p.y / self.position_scale,
            p.z / self.position_scale,
            p.speed() / self.speed_scale,
            self.rcs_norm(p.rcs),
        ]
    }
}

pub const RADAR_INPUTS: usize = 5;

/// Max-pooled radar grid with occupancy and per-entry winning point.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarGrid {
    pub features: Tensor,
    pub occupancy: Tensor,
    /// For every entry of `features`, the index of the point whose
    /// embedding won the max (None for empty cells).
    pub winners: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct RadarBranch {
    pub embed1: Affine,
    pub embed2: Affine,
    pub blocks: Vec<(Conv, Conv)>,
}

impl Default for RadarBranch {
    fn default() -> Self {
        Self {
            embed1: Affine::new("radar.embed1"),
            embed2: Affine::new("radar.embed2"),
            blocks: (0..2)
                .map(|i| {
                    (
                        Conv::new(&format!("radar.block{i}.conv_a")),
                        Conv::new(&format!("radar.block{i}.conv_b")),
                    )
                })
                .collect(),
        }
    }
}

/// Intermediates of [`RadarBranch::embed_points`].
#[derive(Debug, Clone)]
pub struct EmbedCache {
    input: Option<Tensor>,
    hidden_pre: Option<Tensor>,
    hidden: Option<Tensor>,
}

/// Intermediates of [`RadarBranch::encode`].
#[derive(Debug, Clone)]
pub struct EncodeCache {
    /// Per block: block input and conv_a pre-activation.
    blocks: Vec<(Tensor, Tensor)>,
}

impl RadarBranch {
    pub fn init<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        hidden: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<()> {
        self.embed1.init(store, RADAR_INPUTS, hidden, RELU_GAIN, true, rng)?;
        self.embed2.init(store, hidden, channels, LINEAR_GAIN, true, rng)?;
        for (a, b) in &self.blocks {
            a.init(store, channels, channels, 3, RELU_GAIN, true, rng)?;
            b.init(store, channels, channels, 3, 0.5, true, rng)?;
        }
        Ok(())
    }

    /// One `C`-vector per point: `affine -> ReLU -> affine` on the
    /// normalized `(x, y, z, v, rcs)`.
    pub fn embed_points(
        &self,
        store: &ParamStore,
        norm: &RadarNorm,
        points: &[RadarPoint],
    ) -> Result<(Vec<Tensor>, EmbedCache)> {
        if points.is_empty() {
            let cache = EmbedCache {
                input: None,
                hidden_pre: None,
                hidden: None,
            };
            return Ok((Vec::new(), cache));
        }
        let data = points.iter().flat_map(|p| norm.features(p)).collect();
        let input = Tensor::new(vec![points.len(), RADAR_INPUTS], data)?;
        let hidden_pre = self.embed1.forward(store, &input)?;
        let hidden = ops::relu(&hidden_pre);
        let out = self.embed2.forward(store, &hidden)?;
        let embeddings = (0..points.len()).map(|i| out.index0(i)).collect();
        let cache = EmbedCache {
            input: Some(input),
            hidden_pre: Some(hidden_pre),
            hidden: Some(hidden),
        };
        Ok((embeddings, cache))
    }

    /// `d_embed` is `[M, C]`.
    pub fn embed_backward(&self, store: &mut ParamStore, cache: &EmbedCache, d_embed: &Tensor) -> Result<()> {
        let (Some(input), Some(pre), Some(hidden)) = (&cache.input, &cache.hidden_pre, &cache.hidden) else {
            return Ok(());
        };
        let d_hidden = self.embed2.backward(store, hidden, d_embed)?;
        let d_pre = ops::relu_backward(pre, &d_hidden)?;
        self.embed1.backward(store, input, &d_pre)?;
        Ok(())
    }

    /// Residual blocks `x + conv_b(relu(conv_a(x)))`; spatial dims preserved.
    pub fn encode(&self, store: &ParamStore, grid: &Tensor) -> Result<(Tensor, EncodeCache)> {
        let mut x = grid.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (a, b) in &self.blocks {
            let pre = a.forward(store, &x)?;
            let branch = b.forward(store, &ops::relu(&pre))?;
            let mut next = x.clone();
            next.add_assign(&branch)?;
            blocks.push((x, pre));
            x = next;
        }
        Ok((x, EncodeCache { blocks }))
    }

    /// Returns the gradient with respect to the input grid.
    pub fn encode_backward(&self, store: &mut ParamStore, cache: &EncodeCache, d_out: &Tensor) -> Result<Tensor> {
        let mut g = d_out.clone();
        for ((a, b), (x, pre)) in self.blocks.iter().zip(&cache.blocks).rev() {
            let d_act = b.backward(store, &ops::relu(pre), &g)?;
            let d_pre = ops::relu_backward(pre, &d_act)?;
            let dx = a.backward(store, x, &d_pre)?;
            g.add_assign(&dx)?;
        }
        Ok(g)
    }
}

/// Per-cell channel-wise max over the embeddings of the points in each
/// cell. Out-of-range points are dropped; empty cells hold zeros.
pub fn build_grid(points: &[RadarPoint], embeddings: &[Tensor], grid: &BevGridSpec) -> Result<RadarGrid> {
    if points.len() != embeddings.len() {
        return arg(format!(
            "build_grid: {} points but {} embeddings",
            points.len(),
            embeddings.len()
        ));
    }
    let channels = embeddings.first().map_or(1, |e| e.len());
    build_grid_with_channels(points, embeddings, grid, channels)
}

pub fn build_grid_with_channels(
    points: &[RadarPoint],
    embeddings: &[Tensor],
    grid: &BevGridSpec,
    channels: usize,
) -> Result<RadarGrid> {
    if points.len() != embeddings.len() {
        return arg("build_grid: points and embeddings differ in length");
    }
    let cells = grid.num_cells();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cells];
    for (i, p) in points.iter().enumerate() {
        if let Some(cell) = grid.flat_cell_of(p.x, p.y) {
            members[cell].push(i);
        }
    }
    let mut features = Tensor::zeros(&[channels, grid.rows, grid.cols]);
    let mut occupancy = Tensor::zeros(&[1, grid.rows, grid.cols]);
    let mut winners = vec![None; channels * cells];
    for (cell, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let vecs: Vec<&[f64]> = idx.iter().map(|&i| embeddings[i].data()).collect();
        let (pooled, win) = ops::channel_max_pool_argmax(&vecs, channels)?;
        for c in 0..channels {
            features.data_mut()[c * cells + cell] = pooled.data()[c];
            winners[c * cells + cell] = win[c].map(|k| idx[k]);
        }
        occupancy.data_mut()[cell] = 1.0;
    }
    Ok(RadarGrid {
        features,
        occupancy,
        winners,
    })
}

/// Routes grid gradients to the winning embeddings; returns `[M, C]`.
pub fn build_grid_backward(grid: &RadarGrid, d_grid: &Tensor, n_points: usize) -> Result<Option<Tensor>> {
    d_grid.expect_same_dims(&grid.features, "build_grid_backward")?;
    if n_points == 0 {
        return Ok(None);
    }
    let channels = grid.features.dims()[0];
    let cells = grid.features.len() / channels;
    let mut d = Tensor::zeros(&[n_points, channels]);
    for (flat, w) in grid.winners.iter().enumerate() {
        if let Some(i) = w {
            let c = flat / cells;
            d.data_mut()[i * channels + c] += d_grid.data()[flat];
        }
    }
    Ok(Some(d))
}
