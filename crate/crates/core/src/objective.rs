//! Masked L1 comparison of an observation with rendered channels.
//!
//! Color, depth and edge terms are averaged over the active pixels of the
//! dilated mask (color additionally over its three channels); the optional
//! silhouette term is averaged over the whole frame. Upstream gradients are
//! per-pixel subgradients (`sign(0) = 0`) of the weighted total with respect
//! to the rendered color, depth and silhouette. The edge term is folded into
//! the color gradient, with the rendered edge map normalized by the
//! observation's edge scale so the scale is a constant of the optimization.

use serde::{Deserialize, Serialize};

use crate::error::ObjectiveError;
use crate::geometry::CameraIntrinsics;
use crate::imageproc::{edge_map_fixed_scale, edge_map_with_scale, mask_dilate, EdgeCrop, Rect};
use crate::pixels::ImageF;
use crate::render::{FrameBuffers, FrameGradients};

/// Per-pixel cap on the depth residual, meters.
pub const DEPTH_RESIDUAL_CLAMP: f64 = 0.5;
/// Reach of the edge filter outside the rendered bounding box, pixels.
const EDGE_REACH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub lambda_e: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_c: 1.0, lambda_d: 1.0, lambda_e: 1.0, lambda_s: 0.0 }
    }
}

impl LossWeights {
    pub fn new(lambda_c: f64, lambda_d: f64, lambda_e: f64, lambda_s: f64) -> Self {
        Self { lambda_c, lambda_d, lambda_e, lambda_s }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let all = [self.lambda_c, self.lambda_d, self.lambda_e, self.lambda_s];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ObjectiveError::InvalidObservation(format!("loss weights must be finite and >= 0, got {all:?}")));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(ObjectiveError::ZeroWeights);
        }
        Ok(())
    }
}

/// Unweighted terms and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub color: f64,
    pub depth: f64,
    pub edge: f64,
    pub silhouette: f64,
}

impl LossBreakdown {
    pub fn weighted(color: f64, depth: f64, edge: f64, silhouette: f64, w: &LossWeights) -> Self {
        let total = w.lambda_c * color + w.lambda_d * depth + w.lambda_e * edge + w.lambda_s * silhouette;
        Self { total, color, depth, edge, silhouette }
    }

    pub fn add(&self, o: &LossBreakdown) -> LossBreakdown {
        LossBreakdown {
            total: self.total + o.total,
            color: self.color + o.color,
            depth: self.depth + o.depth,
            edge: self.edge + o.edge,
            silhouette: self.silhouette + o.silhouette,
        }
    }
}

/// Observed frame with everything the loss needs precomputed.
#[derive(Clone, Debug)]
pub struct Observation {
    pub color: ImageF,
    /// Meters, 0 where invalid.
    pub depth: ImageF,
    pub edges: ImageF,
    pub mask: ImageF,
    pub intrinsics: CameraIntrinsics,
    edge_scale: f64,
    mask_eff: ImageF,
    mask_rect: Rect,
    active: Vec<usize>,
    depth_active: Vec<usize>,
}

impl Observation {
    /// `depth = None` marks every pixel as having no depth. The mask is
    /// dilated by `dilation_radius` pixels to form the active region.
    pub fn new(
        color: ImageF,
        depth: Option<ImageF>,
        mask: ImageF,
        intrinsics: CameraIntrinsics,
        dilation_radius: f64,
    ) -> Result<Self, ObjectiveError> {
        let (w, h) = color.dims();
        if color.channels != 3 || mask.channels != 1 {
            return Err(ObjectiveError::InvalidObservation("color must have 3 channels, mask 1".into()));
        }
        let depth = depth.unwrap_or_else(|| ImageF::new(w, h, 1));
        if depth.dims() != (w, h) || mask.dims() != (w, h) || depth.channels != 1 {
            return Err(ObjectiveError::InvalidObservation(format!(
                "color {:?}, depth {:?}, mask {:?} differ in size",
                color.dims(),
                depth.dims(),
                mask.dims()
            )));
        }
        if (intrinsics.width, intrinsics.height) != (w, h) {
            return Err(ObjectiveError::InvalidObservation(format!(
                "intrinsics are for {}x{}, images are {w}x{h}",
                intrinsics.width, intrinsics.height
            )));
        }
        if !(dilation_radius >= 0.0) {
            return Err(ObjectiveError::InvalidObservation(format!("dilation radius {dilation_radius} < 0")));
        }
        let (edges, edge_scale) = edge_map_with_scale(&color);
        let mask_eff = mask_dilate(&mask, dilation_radius);
        let active: Vec<usize> = (0..w * h).filter(|&i| mask_eff.data[i] > 0.5).collect();
        let depth_active: Vec<usize> = active.iter().copied().filter(|&i| depth.data[i] > 0.0).collect();
        let mask_rect = bbox_of(w, (0..w * h).filter(|&i| mask.data[i] != 0.0));
        Ok(Self { color, depth, edges, mask, intrinsics, edge_scale, mask_eff, mask_rect, active, depth_active })
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    pub fn edge_scale(&self) -> f64 {
        self.edge_scale
    }

    /// Dilated mask actually used by the loss.
    pub fn effective_mask(&self) -> &ImageF {
        &self.mask_eff
    }

    pub fn active_pixels(&self) -> usize {
        self.active.len()
    }

    pub fn has_depth(&self) -> bool {
        !self.depth_active.is_empty()
    }

    /// Bounding box of the effective mask.
    pub fn mask_bbox(&self) -> Rect {
        bbox_of(self.width(), self.active.iter().copied())
    }
}

fn bbox_of(width: usize, pixels: impl Iterator<Item = usize>) -> Rect {
    let mut r = Rect { x0: usize::MAX, y0: usize::MAX, x1: 0, y1: 0 };
    for i in pixels {
        let (x, y) = (i % width, i / width);
        r.x0 = r.x0.min(x);
        r.y0 = r.y0.min(y);
        r.x1 = r.x1.max(x + 1);
        r.y1 = r.y1.max(y + 1);
    }
    if r.x1 == 0 {
        Rect { x0: 0, y0: 0, x1: 0, y1: 0 }
    } else {
        r
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Edge map of the rendered color, normalized by the observation's scale.
/// Only the region that can be nonzero is filtered.
pub fn rendered_edges(obs: &Observation, fb: &FrameBuffers) -> (ImageF, Rect) {
    let rect = edge_rect(fb);
    (edge_map_fixed_scale(&fb.color, obs.edge_scale, rect), rect)
}

fn edge_rect(fb: &FrameBuffers) -> Rect {
    if fb.empty {
        Rect { x0: 0, y0: 0, x1: 0, y1: 0 }
    } else {
        fb.bbox.expand(EDGE_REACH, fb.width(), fb.height())
    }
}

fn check_dims(obs: &Observation, fb: &FrameBuffers) -> Result<(), ObjectiveError> {
    if (obs.width(), obs.height()) != (fb.width(), fb.height()) {
        return Err(ObjectiveError::SizeMismatch { obs: obs.color.dims(), rendered: fb.color.dims() });
    }
    if obs.active.is_empty() {
        return Err(ObjectiveError::EmptyMask);
    }
    Ok(())
}

/// Loss only, without upstream gradients.
pub fn loss_value(obs: &Observation, fb: &FrameBuffers, w: &LossWeights) -> Result<LossBreakdown, ObjectiveError> {
    evaluate(obs, fb, w, None)
}

/// Loss and per-pixel gradients of the weighted total with respect to the
/// rendered channels.
pub fn compute_loss(
    obs: &Observation,
    fb: &FrameBuffers,
    w: &LossWeights,
) -> Result<(LossBreakdown, FrameGradients), ObjectiveError> {
    let mut scratch = LossScratch::new(obs);
    let l = compute_loss_with(obs, fb, w, &mut scratch)?;
    Ok((l, scratch.grads))
}

/// Gradient buffers reused across evaluations against one observation.
/// Only the region written by the previous evaluation is cleared.
pub struct LossScratch {
    grads: FrameGradients,
    dirty: Rect,
}

impl LossScratch {
    pub fn new(obs: &Observation) -> Self {
        Self { grads: FrameGradients::zeros(obs.width(), obs.height()), dirty: Rect { x0: 0, y0: 0, x1: 0, y1: 0 } }
    }

    pub fn grads(&self) -> &FrameGradients {
        &self.grads
    }

    fn clear(&mut self) {
        let r = self.dirty;
        let w = self.grads.depth.width;
        for y in r.y0..r.y1 {
            let row = y * w;
            self.grads.color.data[(row + r.x0) * 3..(row + r.x1) * 3].fill(0.0);
            self.grads.depth.data[row + r.x0..row + r.x1].fill(0.0);
            self.grads.silhouette.data[row + r.x0..row + r.x1].fill(0.0);
        }
        self.dirty = Rect { x0: 0, y0: 0, x1: 0, y1: 0 };
    }
}

/// Same as [`compute_loss`], writing the gradients into `scratch`.
pub fn compute_loss_with(
    obs: &Observation,
    fb: &FrameBuffers,
    w: &LossWeights,
    scratch: &mut LossScratch,
) -> Result<LossBreakdown, ObjectiveError> {
    check_dims(obs, fb)?;
    if scratch.grads.depth.dims() != (obs.width(), obs.height()) {
        *scratch = LossScratch::new(obs);
    }
    scratch.clear();
    evaluate(obs, fb, w, Some(scratch))
}

fn evaluate(
    obs: &Observation,
    fb: &FrameBuffers,
    w: &LossWeights,
    mut scratch: Option<&mut LossScratch>,
) -> Result<LossBreakdown, ObjectiveError> {
    check_dims(obs, fb)?;
    let width = obs.width();
    let n = obs.active.len() as f64;
    if let Some(s) = scratch.as_mut() {
        s.dirty = obs.mask_bbox();
    }

    let mut color = 0.0;
    if w.lambda_c > 0.0 {
        let k = w.lambda_c / (3.0 * n);
        for &i in &obs.active {
            for c in 0..3 {
                let r = obs.color.data[i * 3 + c] - fb.color.data[i * 3 + c];
                color += r.abs();
                if let Some(s) = scratch.as_mut() {
                    s.grads.color.data[i * 3 + c] = -sign(r) * k;
                }
            }
        }
        color /= 3.0 * n;
    }

    let mut depth = 0.0;
    if w.lambda_d > 0.0 && !obs.depth_active.is_empty() {
        let nd = obs.depth_active.len() as f64;
        for &i in &obs.depth_active {
            let r = obs.depth.data[i] - fb.depth.data[i];
            if r.abs() >= DEPTH_RESIDUAL_CLAMP {
                depth += DEPTH_RESIDUAL_CLAMP;
            } else {
                depth += r.abs();
                if let Some(s) = scratch.as_mut() {
                    s.grads.depth.data[i] = -sign(r) * w.lambda_d / nd;
                }
            }
        }
        depth /= nd;
    }

    let mut edge = 0.0;
    if w.lambda_e > 0.0 {
        let crop = EdgeCrop::new(&fb.color, obs.edge_scale, edge_rect(fb));
        let rect = crop.rect();
        let mut up = scratch.is_some().then(|| vec![0.0; rect.width() * rect.height()]);
        let k = w.lambda_e / n;
        for &i in &obs.active {
            let (x, y) = (i % width, i / width);
            let r = obs.edges.data[i] - crop.value(x, y);
            edge += r.abs();
            if let Some(up) = up.as_mut() {
                if x >= rect.x0 && x < rect.x1 && y >= rect.y0 && y < rect.y1 {
                    up[(y - rect.y0) * rect.width() + x - rect.x0] = -sign(r) * k;
                }
            }
        }
        edge /= n;
        if let (Some(s), Some(up)) = (scratch.as_mut(), up) {
            crop.backward_add(&up, &mut s.grads.color);
            s.dirty = s.dirty.union(&rect);
        }
    }

    let mut silhouette = 0.0;
    if w.lambda_s > 0.0 {
        let total = (width * obs.height()) as f64;
        // outside both the mask and the render the residual is exactly 0
        let region = if fb.empty { obs.mask_rect } else { obs.mask_rect.union(&fb.bbox) };
        for y in region.y0..region.y1 {
            for x in region.x0..region.x1 {
                let i = y * width + x;
                let r = obs.mask.data[i] - fb.silhouette.data[i];
                silhouette += r.abs();
                if let Some(s) = scratch.as_mut() {
                    s.grads.silhouette.data[i] = -sign(r) * w.lambda_s / total;
                }
            }
        }
        silhouette /= total;
        if let Some(s) = scratch.as_mut() {
            s.dirty = s.dirty.union(&region);
        }
    }

    Ok(LossBreakdown::weighted(color, depth, edge, silhouette, w))
}
