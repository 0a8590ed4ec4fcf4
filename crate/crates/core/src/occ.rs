//! Domain data model: occupancy grids, triplane latents, actions, obstacle
//! boxes, scene sequences, and the shared model configuration.
//!
//! Axis convention: grid shape is `(H, W, L)` where `H` indexes z (vertical),
//! `W` indexes x, `L` indexes y. Labels are stored x-major, then y, then z
//! (z fastest), matching the on-disk frame layout. Plane `xy` spans the
//! downsampled `(w', l')` bird's-eye extent; height is never downsampled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

/// Dense semantic occupancy grid. Category 0 is free space.
#[derive(Clone, Debug, PartialEq)]
pub struct OccGrid {
    dims: GridDims,
    pub voxel_size: f32,
    pub num_categories: usize,
    labels: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    /// z extent (vertical), in voxels.
    pub h: usize,
    /// x extent, in voxels.
    pub w: usize,
    /// y extent, in voxels.
    pub l: usize,
}

impl GridDims {
    pub fn voxels(&self) -> usize {
        self.h * self.w * self.l
    }
}

impl OccGrid {
    pub fn new(dims: GridDims, voxel_size: f32, num_categories: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != dims.voxels() {
            return Err(Error::shape(format!(
                "grid {:?} wants {} labels, got {}",
                dims,
                dims.voxels(),
                labels.len()
            )));
        }
        let grid = OccGrid {
            dims,
            voxel_size,
            num_categories,
            labels,
        };
        grid.check_invariants()?;
        Ok(grid)
    }

    pub fn filled(dims: GridDims, voxel_size: f32, num_categories: usize, label: u8) -> Result<Self> {
        Self::new(dims, voxel_size, num_categories, vec![label; dims.voxels()])
    }

    pub fn check_invariants(&self) -> Result<()> {
        for (&d, name) in [self.dims.h, self.dims.w, self.dims.l].iter().zip(["H", "W", "L"]) {
            if d < 4 || d % 2 != 0 {
                return Err(Error::data(format!("{name}={d} must be >= 4 and even")));
            }
        }
        if self.num_categories < 2 || self.num_categories > 256 {
            return Err(Error::data(format!(
                "num_categories {} out of range",
                self.num_categories
            )));
        }
        if !(self.voxel_size > 0.0) {
            return Err(Error::data("voxel_size must be positive"));
        }
        if let Some(bad) = self
            .labels
            .iter()
            .position(|&v| v as usize >= self.num_categories)
        {
            return Err(Error::data(format!(
                "label {} at flat index {bad} exceeds {} categories",
                self.labels[bad], self.num_categories
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[(x * self.dims.l + y) * self.dims.h + z]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u8) {
        debug_assert!((label as usize) < self.num_categories);
        self.labels[(x * self.dims.l + y) * self.dims.h + z] = label;
    }

    /// Flat label slab, x-major then y then z.
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn occupied_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v != 0).count()
    }

    pub fn free_fraction(&self) -> f64 {
        1.0 - self.occupied_count() as f64 / self.labels.len() as f64
    }
}

/// Three orthogonal latent feature planes with a shared channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplane<S> {
    /// `[c, w', l']`
    pub xy: Tensor<S>,
    /// `[c, h, w']`
    pub xz: Tensor<S>,
    /// `[c, h, l']`
    pub yz: Tensor<S>,
    /// Source grid extents.
    pub dims: GridDims,
}

/// Sparse change signal; shape-identical to the triplane it modifies.
pub type DeltaTriplane<S> = Triplane<S>;

impl<S: Scalar> Triplane<S> {
    pub fn channels(&self) -> usize {
        self.xy.shape()[0]
    }

    /// Expected plane shapes for a grid compressed with downsample `ds`.
    pub fn plane_shapes(dims: GridDims, c: usize, ds: usize) -> [[usize; 3]; 3] {
        let (wp, lp) = (dims.w / ds, dims.l / ds);
        [[c, wp, lp], [c, dims.h, wp], [c, dims.h, lp]]
    }

    pub fn check_shapes(&self, c: usize, ds: usize) -> Result<()> {
        let want = Self::plane_shapes(self.dims, c, ds);
        for (plane, (got, want)) in ["xy", "xz", "yz"].iter().zip(
            [&self.xy, &self.xz, &self.yz]
                .iter()
                .map(|t| t.shape())
                .zip(want.iter()),
        ) {
            if got != want {
                return Err(Error::shape(format!(
                    "plane {plane} has shape {got:?}, expected {want:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Triplane {
            xy: Tensor::zeros(self.xy.shape()),
            xz: Tensor::zeros(self.xz.shape()),
            yz: Tensor::zeros(self.yz.shape()),
            dims: self.dims,
        }
    }

    pub fn planes(&self) -> [&Tensor<S>; 3] {
        [&self.xy, &self.xz, &self.yz]
    }

    /// Total number of latent values across the three planes.
    pub fn latent_size(&self) -> usize {
        self.xy.len() + self.xz.len() + self.yz.len()
    }

    /// Elementwise difference `self - other`, the change signal.
    pub fn delta_from(&self, other: &Self) -> DeltaTriplane<S> {
        Triplane {
            xy: self.xy.sub(&other.xy),
            xz: self.xz.sub(&other.xz),
            yz: self.yz.sub(&other.yz),
            dims: self.dims,
        }
    }

    pub fn cast<T: Scalar>(&self) -> Triplane<T> {
        Triplane {
            xy: self.xy.cast(),
            xz: self.xz.cast(),
            yz: self.yz.cast(),
            dims: self.dims,
        }
    }
}

/// Ego displacement over one frame, in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dx: f32,
    pub dy: f32,
}

impl Action {
    pub const MAX_PER_FRAME: f32 = 50.0;

    pub fn new(dx: f32, dy: f32) -> Self {
        Action { dx, dy }
    }

    pub fn check(&self) -> Result<()> {
        if !self.dx.is_finite() || !self.dy.is_finite() {
            return Err(Error::data("non-finite action"));
        }
        if self.dx.abs() >= Self::MAX_PER_FRAME || self.dy.abs() >= Self::MAX_PER_FRAME {
            return Err(Error::data(format!(
                "action ({}, {}) exceeds {} m per frame",
                self.dx,
                self.dy,
                Self::MAX_PER_FRAME
            )));
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        ((self.dx as f64).powi(2) + (self.dy as f64).powi(2)).sqrt()
    }
}

/// Oriented box pose in the ego frame of its own timestep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPose {
    pub x: f32,
    pub y: f32,
    pub ex: f32,
    pub ey: f32,
    pub heading: f32,
}

/// Traffic participant with a per-frame pose track.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleBox {
    pub category: u8,
    pub poses: Vec<BoxPose>,
}

impl ObstacleBox {
    pub fn check(&self) -> Result<()> {
        for p in &self.poses {
            if !(p.ex > 0.0 && p.ey > 0.0) {
                return Err(Error::data("box half-extents must be positive"));
            }
        }
        Ok(())
    }
}

/// Time-ordered grids + actions + obstacle tracks; the dataset unit.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSequence {
    pub grids: Vec<OccGrid>,
    pub actions: Vec<Action>,
    pub boxes: Vec<ObstacleBox>,
    pub frame_hz: f32,
}

impl SceneSequence {
    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }
}

/// First invariant violation in a sequence, if any, with the frame it
/// occurred in.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceIssue {
    pub frame: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for SequenceIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.frame {
            Some(fr) => write!(f, "frame {fr}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

/// Check every type invariant; returns the first violation as a diagnostic.
pub fn validate_sequence(seq: &SceneSequence) -> std::result::Result<(), SequenceIssue> {
    if seq.grids.is_empty() {
        return Err(SequenceIssue {
            frame: None,
            message: "sequence has no frames".into(),
        });
    }
    if seq.actions.len() != seq.grids.len() {
        return Err(SequenceIssue {
            frame: None,
            message: format!(
                "grids length {} vs actions length {}",
                seq.grids.len(),
                seq.actions.len()
            ),
        });
    }
    if !(seq.frame_hz > 0.0) {
        return Err(SequenceIssue {
            frame: None,
            message: "frame_hz must be positive".into(),
        });
    }
    let dims0 = seq.grids[0].dims();
    for (i, g) in seq.grids.iter().enumerate() {
        if g.dims() != dims0 {
            return Err(SequenceIssue {
                frame: Some(i),
                message: format!("grid dims {:?} differ from frame 0 {:?}", g.dims(), dims0),
            });
        }
        if let Err(e) = g.check_invariants() {
            return Err(SequenceIssue {
                frame: Some(i),
                message: e.to_string(),
            });
        }
    }
    for (i, a) in seq.actions.iter().enumerate() {
        if let Err(e) = a.check() {
            return Err(SequenceIssue {
                frame: Some(i),
                message: e.to_string(),
            });
        }
    }
    for (bi, b) in seq.boxes.iter().enumerate() {
        if b.poses.len() != seq.grids.len() {
            return Err(SequenceIssue {
                frame: None,
                message: format!(
                    "box {bi} track length {} vs {} frames",
                    b.poses.len(),
                    seq.grids.len()
                ),
            });
        }
        if let Err(e) = b.check() {
            return Err(SequenceIssue {
                frame: None,
                message: format!("box {bi}: {e}"),
            });
        }
    }
    Ok(())
}

/// Model hyperparameters shared across the pipeline.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// History length in frames.
    pub tau_p: usize,
    /// Forecast length in frames.
    pub tau_f: usize,
    /// Latent channels per plane.
    pub c: usize,
    /// Spatial downsample factor on w and l.
    pub ds: usize,
    /// Number of forecaster scales (V).
    pub scales: usize,
    /// Transformer depth (layers per encoder/decoder stack).
    pub depth: usize,
    /// Attention heads.
    pub heads: usize,
    /// Planning token dimension.
    pub d_act: usize,
    /// Codec loss trade-off (cross-entropy + lambda * Lovasz).
    pub lambda: f64,
    /// Forecast loss trade-off (latent loss + xi * occupancy loss).
    pub xi: f64,
    /// Positional-encoding octaves per axis in the point decoder.
    pub n_freq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tau_p: 4,
            tau_f: 6,
            c: 8,
            ds: 2,
            scales: 3,
            depth: 2,
            heads: 4,
            d_act: 50,
            lambda: 1.0,
            xi: 1.0,
            n_freq: 6,
        }
    }
}

impl ModelConfig {
    /// The operating point used at full scale: V=5 scales, depth 4, 16 heads.
    pub fn full_scale() -> Self {
        ModelConfig {
            scales: 5,
            depth: 4,
            heads: 16,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau_p < 1 || self.tau_f < 1 {
            return Err(Error::config("tau_p and tau_f must be >= 1"));
        }
        if self.scales < 1 {
            return Err(Error::config("scales must be >= 1"));
        }
        if self.d_act < 2 {
            return Err(Error::config("d_act must be >= 2"));
        }
        if self.c < 1 || self.ds < 1 || self.depth < 1 || self.heads < 1 || self.n_freq < 1 {
            return Err(Error::config("c, ds, depth, heads, n_freq must be >= 1"));
        }
        if !(self.lambda >= 0.0 && self.xi >= 0.0) {
            return Err(Error::config("lambda and xi must be >= 0"));
        }
        Ok(())
    }
}

/// Desk-scale grid default: (16, 64, 64) voxels, 6 categories, 0.4 m voxels.
pub const DESK_DIMS: GridDims = GridDims { h: 16, w: 64, l: 64 };
pub const DESK_CATEGORIES: usize = 6;
pub const DESK_VOXEL_SIZE: f32 = 0.4;

#[cfg(test)]
mod tests {
    use super::*;

    fn small_seq(frames: usize) -> SceneSequence {
        let dims = GridDims { h: 4, w: 6, l: 8 };
        SceneSequence {
            grids: (0..frames)
                .map(|_| OccGrid::filled(dims, 0.4, 3, 1).unwrap())
                .collect(),
            actions: vec![Action::new(1.0, 0.0); frames],
            boxes: vec![],
            frame_hz: 2.0,
        }
    }

    #[test]
    fn well_formed_sequence_passes() {
        assert!(validate_sequence(&small_seq(10)).is_ok());
    }

    #[test]
    fn label_overflow_reports_frame() {
        let mut seq = small_seq(10);
        let idx = 0;
        seq.grids[3].labels_mut()[idx] = 3; // == num_categories
        let issue = validate_sequence(&seq).unwrap_err();
        assert_eq!(issue.frame, Some(3));
    }

    #[test]
    fn length_mismatch_diagnosed() {
        let mut seq = small_seq(10);
        seq.actions.pop();
        let issue = validate_sequence(&seq).unwrap_err();
        assert!(issue.message.contains("length"));
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(OccGrid::filled(GridDims { h: 5, w: 6, l: 8 }, 0.4, 3, 0).is_err());
        assert!(OccGrid::filled(GridDims { h: 2, w: 6, l: 8 }, 0.4, 3, 0).is_err());
    }

    #[test]
    fn plane_shapes_desk_scale() {
        let shapes = Triplane::<f32>::plane_shapes(DESK_DIMS, 8, 2);
        assert_eq!(shapes, [[8, 32, 32], [8, 16, 32], [8, 16, 32]]);
        // total latent size at desk scale
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        assert_eq!(total, 16_384);
    }

    #[test]
    fn plane_shapes_full_scale() {
        let dims = GridDims { h: 16, w: 200, l: 200 };
        let shapes = Triplane::<f32>::plane_shapes(dims, 8, 2);
        assert_eq!(shapes, [[8, 100, 100], [8, 16, 100], [8, 16, 100]]);
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        assert_eq!(total, 105_600);
    }
}
