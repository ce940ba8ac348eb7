//! Differentiable soft rasterizer.
//!
//! Triangle interiors are hard z-buffered; color and depth come from
//! perspective-correct barycentric interpolation (bilinear, clamp-to-edge
//! texture lookups). The outer contour of the projected mesh carries a soft
//! band: every pixel within `3·sigma` of a contour segment gets
//! `silhouette = ramp(d)`, where `d` is the signed distance to the nearest
//! contour segment (positive inside) and `ramp` is a logistic of `d / sigma`
//! rescaled to reach exactly 0 and 1 at `∓3·sigma`. Color and depth are
//! premultiplied by the silhouette; pixels in the outer half of the band
//! take their attributes from the closest point of the nearest contour
//! segment. The result is continuous in the pose wherever the texture is
//! continuous across triangle edges, which is what makes the analytic
//! backward pass agree with finite differences.
//!
//! Contour segments are mesh edges whose adjacent triangles project with
//! opposite orientations (or that have a single adjacent triangle) and
//! whose outward side is not covered by any other triangle. Interior
//! occlusion boundaries get no band.
//!
//! The backward pass recomputes this per-pixel state rather than keeping a
//! tape; [`Raster`] exposes the state for callers that need the forward
//! buffers and the gradient from one rasterization.

use nalgebra::{Matrix3, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, Pose};
use crate::imageproc::Rect;
use crate::mesh::TexturedMesh;
use crate::pixels::ImageF;

/// Half-width of the soft band in units of `sigma`.
pub const BAND_SIGMAS: f64 = 3.0;
const NONE: u32 = u32::MAX;
const MIN_SCREEN_AREA: f64 = 1e-9;

/// Renderer settings that do not depend on the image size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderOptions {
    /// Softness of silhouette edges, pixels.
    pub sigma: f64,
    /// Depth written where nothing is rendered, meters.
    pub depth_background: f64,
    /// Triangles with a vertex closer than this are culled, meters.
    pub near_clip: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { sigma: 1.0, depth_background: 0.0, near_clip: 1e-3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub sigma: f64,
    pub depth_background: f64,
    pub near_clip: f64,
}

impl RenderConfig {
    pub fn new(width: usize, height: usize, opts: RenderOptions) -> Self {
        Self {
            width,
            height,
            sigma: opts.sigma,
            depth_background: opts.depth_background,
            near_clip: opts.near_clip,
        }
    }

    pub fn for_camera(k: &CameraIntrinsics, opts: RenderOptions) -> Self {
        Self::new(k.width, k.height, opts)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.sigma > 0.0) {
            return Err(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.width < 8 || self.height < 8 {
            return Err(format!("image must be at least 8x8, got {}x{}", self.width, self.height));
        }
        if !(self.near_clip > 0.0) {
            return Err(format!("near_clip must be positive, got {}", self.near_clip));
        }
        Ok(())
    }
}

/// Rendered channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBuffers {
    /// Linear RGB, premultiplied by the silhouette.
    pub color: ImageF,
    /// Meters; `depth_background` where the silhouette is 0.
    pub depth: ImageF,
    pub silhouette: ImageF,
    /// Nothing was rendered (mesh culled or outside the image).
    pub empty: bool,
    /// Bounding box of the rendered pixels.
    pub bbox: Rect,
}

impl FrameBuffers {
    pub fn new_empty(width: usize, height: usize, depth_background: f64) -> Self {
        Self {
            color: ImageF::new(width, height, 3),
            depth: ImageF::filled(width, height, 1, depth_background),
            silhouette: ImageF::new(width, height, 1),
            empty: true,
            bbox: Rect { x0: 0, y0: 0, x1: 0, y1: 0 },
        }
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }
}

/// Per-pixel gradients of a scalar loss with respect to the rendered
/// channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameGradients {
    pub color: ImageF,
    pub depth: ImageF,
    pub silhouette: ImageF,
}

impl FrameGradients {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: ImageF::new(width, height, 3),
            depth: ImageF::new(width, height, 1),
            silhouette: ImageF::new(width, height, 1),
        }
    }

    pub fn is_zero(&self) -> bool {
        [&self.color, &self.depth, &self.silhouette].iter().all(|i| i.data.iter().all(|v| *v == 0.0))
    }
}

/// Gradient of a loss with respect to the 7 pose parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseGradient {
    pub d_translation: Vector3<f64>,
    /// With respect to the raw (unnormalized) quaternion, order `w, x, y, z`.
    pub d_quaternion: Vector4<f64>,
    /// The silhouette was empty, so the gradient is zero.
    pub silhouette_empty: bool,
}

impl PoseGradient {
    pub fn zero(silhouette_empty: bool) -> Self {
        Self { d_translation: Vector3::zeros(), d_quaternion: Vector4::zeros(), silhouette_empty }
    }

    /// `[tx, ty, tz, qw, qx, qy, qz]`.
    pub fn as_array(&self) -> [f64; 7] {
        let t = self.d_translation;
        let q = self.d_quaternion;
        [t.x, t.y, t.z, q[0], q[1], q[2], q[3]]
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &PoseGradient) -> PoseGradient {
        PoseGradient {
            d_translation: self.d_translation + other.d_translation,
            d_quaternion: self.d_quaternion + other.d_quaternion,
            silhouette_empty: self.silhouette_empty && other.silhouette_empty,
        }
    }
}

#[inline]
fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Silhouette value and its derivative for signed distance `d` (pixels).
#[inline]
fn band_ramp(d: f64, sigma: f64) -> (f64, f64) {
    let half = BAND_SIGMAS * sigma;
    if d >= half {
        return (1.0, 0.0);
    }
    if d <= -half {
        return (0.0, 0.0);
    }
    let lo = logistic(-BAND_SIGMAS);
    let span = logistic(BAND_SIGMAS) - lo;
    let s = logistic(d / sigma);
    ((s - lo) / span, s * (1.0 - s) / (sigma * span))
}

/// Weight of the interior attributes of a covered pixel at signed distance
/// `d` inside the contour, with its derivative. Rises smoothly (C2) from 0
/// on the contour to 1 at the inner edge of the band, so the thin slivers of
/// faces seen at grazing angles next to the contour do not dominate.
#[inline]
fn interior_blend(d: f64, sigma: f64) -> (f64, f64) {
    let half = BAND_SIGMAS * sigma;
    let t = (d / half).clamp(0.0, 1.0);
    (t * t * t * (t * (t * 6.0 - 15.0) + 10.0), 30.0 * t * t * (t - 1.0) * (t - 1.0) / half)
}

/// Bilinear lookup with clamp-to-edge addressing. `v = 0` is the bottom row
/// of the image. Returns the color and its derivatives in `u` and `v`.
#[inline]
pub(crate) fn sample_texture(tex: &ImageF, uv: &Vector2<f64>) -> ([f64; 3], [f64; 3], [f64; 3]) {
    let (w, h) = (tex.width, tex.height);
    let tx = uv.x * w as f64 - 0.5;
    let ty = (1.0 - uv.y) * h as f64 - 0.5;
    let fx0 = tx.floor();
    let fy0 = ty.floor();
    let ax = tx - fx0;
    let ay = ty - fy0;
    let cl = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
    let (x0, x1) = (cl(fx0, w), cl(fx0 + 1.0, w));
    let (y0, y1) = (cl(fy0, h), cl(fy0 + 1.0, h));
    let px = |x: usize, y: usize| {
        let o = (y * w + x) * 3;
        [tex.data[o], tex.data[o + 1], tex.data[o + 2]]
    };
    let (c00, c10, c01, c11) = (px(x0, y0), px(x1, y0), px(x0, y1), px(x1, y1));
    let mut c = [0.0; 3];
    let mut du = [0.0; 3];
    let mut dv = [0.0; 3];
    for k in 0..3 {
        let top = c00[k] + ax * (c10[k] - c00[k]);
        let bot = c01[k] + ax * (c11[k] - c01[k]);
        c[k] = top + ay * (bot - top);
        let d_tx = (1.0 - ay) * (c10[k] - c00[k]) + ay * (c11[k] - c01[k]);
        let d_ty = bot - top;
        du[k] = d_tx * w as f64;
        dv[k] = -d_ty * h as f64;
    }
    (c, du, dv)
}

/// Edge function `E(a, b, p)`: twice the signed area of `(a, b, p)`.
#[inline]
fn edge_fn(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Partials of [`edge_fn`] with respect to `a`, `b` and `p`.
#[inline]
fn edge_fn_grads(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> [Vector2<f64>; 3] {
    [
        Vector2::new(b.y - p.y, p.x - b.x),
        Vector2::new(p.y - a.y, a.x - p.x),
        Vector2::new(a.y - b.y, b.x - a.x),
    ]
}

/// Screen-space barycentrics of `p`.
#[inline]
fn barycentrics(a: &[Vector2<f64>; 3], p: &Vector2<f64>) -> ([f64; 3], f64) {
    let area = edge_fn(&a[0], &a[1], &a[2]);
    let inv = 1.0 / area;
    (
        [edge_fn(&a[1], &a[2], p) * inv, edge_fn(&a[2], &a[0], p) * inv, edge_fn(&a[0], &a[1], p) * inv],
        area,
    )
}

/// Closest point parameter on segment `a→b` and the distance to it.
#[inline]
fn segment_distance(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> (f64, f64) {
    let d = b - a;
    let len2 = d.norm_squared();
    let s = if len2 > 0.0 { ((p - a).dot(&d) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let c = a + d * s;
    (s, (p - c).norm())
}

#[derive(Clone, Copy, Debug)]
struct Fragment {
    tri: u32,
    bary: [f64; 3],
    depth: f64,
    edge: u32,
    dist: f64,
    s: f64,
}

impl Default for Fragment {
    fn default() -> Self {
        Self { tri: NONE, bary: [0.0; 3], depth: f64::INFINITY, edge: NONE, dist: f64::INFINITY, s: 0.0 }
    }
}

/// A contour segment with the triangle that supplies its attributes.
#[derive(Clone, Copy, Debug)]
struct Contour {
    v: [usize; 2],
    tri: usize,
    /// Corner index within `tri` of each endpoint.
    corner: [usize; 2],
}

/// Rasterized per-pixel state of one render.
pub struct Raster<'m> {
    mesh: &'m TexturedMesh,
    pose: Pose,
    k: CameraIntrinsics,
    cfg: RenderConfig,
    cam: Vec<Vector3<f64>>,
    screen: Vec<Vector2<f64>>,
    rect: Rect,
    frags: Vec<Fragment>,
    /// Shading of each fragment, shared by the forward and backward passes.
    shades: Vec<Option<Shade>>,
    contours: Vec<Contour>,
    empty: bool,
}

impl<'m> Raster<'m> {
    pub fn new(mesh: &'m TexturedMesh, pose: &Pose, k: &CameraIntrinsics, cfg: &RenderConfig) -> Self {
        let rot = pose.rotation_matrix();
        let cam: Vec<Vector3<f64>> = mesh.vertices().iter().map(|p| rot * p + pose.translation).collect();
        let k_render = if (k.width, k.height) == (cfg.width, cfg.height) { *k } else { k.scaled_to(cfg.width, cfg.height) };
        let screen: Vec<Vector2<f64>> = cam
            .iter()
            .map(|p| {
                if p.z >= cfg.near_clip {
                    k_render.project_unchecked(p)
                } else {
                    Vector2::new(f64::NAN, f64::NAN)
                }
            })
            .collect();
        let mut raster = Raster {
            mesh,
            pose: *pose,
            k: k_render,
            cfg: *cfg,
            cam,
            screen,
            rect: Rect { x0: 0, y0: 0, x1: 0, y1: 0 },
            frags: Vec::new(),
            shades: Vec::new(),
            contours: Vec::new(),
            empty: true,
        };
        raster.rasterize();
        raster.shades = raster.frags.iter().map(|f| raster.shade(f)).collect();
        raster
    }

    fn tri_valid(&self, t: usize) -> bool {
        let tri = self.mesh.triangles()[t];
        tri.iter().all(|&i| self.cam[i].z >= self.cfg.near_clip)
    }

    fn tri_screen(&self, t: usize) -> [Vector2<f64>; 3] {
        let tri = self.mesh.triangles()[t];
        [self.screen[tri[0]], self.screen[tri[1]], self.screen[tri[2]]]
    }

    fn rasterize(&mut self) {
        let (w, h) = (self.cfg.width, self.cfg.height);
        let ntri = self.mesh.triangles().len();
        let valid: Vec<bool> = (0..ntri)
            .map(|t| self.tri_valid(t) && edge_fn_area(&self.tri_screen(t)).abs() > MIN_SCREEN_AREA)
            .collect();
        let margin = (BAND_SIGMAS * self.cfg.sigma).ceil() + 1.0;
        let (mut lo, mut hi) = (Vector2::new(f64::INFINITY, f64::INFINITY), Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
        for (t, ok) in valid.iter().enumerate() {
            if !ok {
                continue;
            }
            for &i in &self.mesh.triangles()[t] {
                lo = lo.inf(&self.screen[i]);
                hi = hi.sup(&self.screen[i]);
            }
        }
        if !lo.x.is_finite() {
            return;
        }
        let clampf = |v: f64, n: usize| v.clamp(0.0, n as f64) as usize;
        let rect = Rect {
            x0: clampf((lo.x - margin).floor(), w),
            y0: clampf((lo.y - margin).floor(), h),
            x1: clampf((hi.x + margin).ceil(), w),
            y1: clampf((hi.y + margin).ceil(), h),
        };
        if rect.is_empty() {
            return;
        }
        self.rect = rect;
        let rw = rect.width();
        self.frags = vec![Fragment::default(); rw * rect.height()];

        // hard coverage with a z-buffer
        for t in 0..ntri {
            if !valid[t] {
                continue;
            }
            let a = self.tri_screen(t);
            let tri = self.mesh.triangles()[t];
            let iz = [1.0 / self.cam[tri[0]].z, 1.0 / self.cam[tri[1]].z, 1.0 / self.cam[tri[2]].z];
            let bx0 = clampf(a.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).floor(), w).max(rect.x0);
            let by0 = clampf(a.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).floor(), h).max(rect.y0);
            let bx1 = clampf(a.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max).ceil() + 1.0, w).min(rect.x1);
            let by1 = clampf(a.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max).ceil() + 1.0, h).min(rect.y1);
            for y in by0..by1 {
                for x in bx0..bx1 {
                    let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                    let (b, _) = barycentrics(&a, &p);
                    if b[0] < 0.0 || b[1] < 0.0 || b[2] < 0.0 {
                        continue;
                    }
                    let depth = 1.0 / (b[0] * iz[0] + b[1] * iz[1] + b[2] * iz[2]);
                    let f = &mut self.frags[(y - rect.y0) * rw + (x - rect.x0)];
                    if depth < f.depth {
                        f.tri = t as u32;
                        f.bary = b;
                        f.depth = depth;
                    }
                }
            }
        }

        self.contours = self.find_contours(&valid);

        // soft band: nearest contour segment within reach
        let reach = BAND_SIGMAS * self.cfg.sigma;
        for (ci, c) in self.contours.iter().enumerate() {
            let (a, b) = (self.screen[c.v[0]], self.screen[c.v[1]]);
            let bx0 = clampf((a.x.min(b.x) - reach).floor(), w).max(rect.x0);
            let by0 = clampf((a.y.min(b.y) - reach).floor(), h).max(rect.y0);
            let bx1 = clampf((a.x.max(b.x) + reach).ceil() + 1.0, w).min(rect.x1);
            let by1 = clampf((a.y.max(b.y) + reach).ceil() + 1.0, h).min(rect.y1);
            for y in by0..by1 {
                for x in bx0..bx1 {
                    let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                    let (s, dist) = segment_distance(&a, &b, &p);
                    if dist >= reach {
                        continue;
                    }
                    let f = &mut self.frags[(y - rect.y0) * rw + (x - rect.x0)];
                    if dist < f.dist {
                        f.edge = ci as u32;
                        f.dist = dist;
                        f.s = s;
                    }
                }
            }
        }
        self.empty = !self.frags.iter().any(|f| f.tri != NONE || f.edge != NONE);
    }

    fn covered_by_any(&self, valid: &[bool], p: &Vector2<f64>) -> bool {
        (0..valid.len()).any(|t| {
            if !valid[t] {
                return false;
            }
            let (b, _) = barycentrics(&self.tri_screen(t), p);
            b[0] >= 0.0 && b[1] >= 0.0 && b[2] >= 0.0
        })
    }

    fn find_contours(&self, valid: &[bool]) -> Vec<Contour> {
        let tris = self.mesh.triangles();
        let mut out = Vec::new();
        for e in self.mesh.edges() {
            let adj: Vec<usize> = e.triangles.iter().copied().filter(|&t| valid[t]).collect();
            if adj.is_empty() {
                continue;
            }
            if adj.len() >= 2 {
                let s0 = edge_fn_area(&self.tri_screen(adj[0])).signum();
                if adj.iter().all(|&t| edge_fn_area(&self.tri_screen(t)).signum() == s0) {
                    continue;
                }
            }
            let (a, b) = (self.screen[e.vertices[0]], self.screen[e.vertices[1]]);
            let dir = b - a;
            let len = dir.norm();
            if !(len > 0.0) {
                continue;
            }
            let normal = Vector2::new(-dir.y, dir.x) / len;
            let mid = (a + b) * 0.5;
            let third = |t: usize| {
                let tri = tris[t];
                let k = tri.iter().position(|&v| v != e.vertices[0] && v != e.vertices[1]).unwrap_or(0);
                self.screen[tri[k]]
            };
            let inward = if normal.dot(&(third(adj[0]) - mid)) >= 0.0 { normal } else { -normal };
            let offset = (0.1 * len).min(0.25);
            if self.covered_by_any(valid, &(mid - inward * offset)) {
                continue;
            }
            // attributes from whichever adjacent triangle is in front just inside the edge
            let probe = mid + inward * offset;
            let mut best = (f64::INFINITY, adj[0]);
            for &t in &adj {
                let (bc, _) = barycentrics(&self.tri_screen(t), &probe);
                let tri = tris[t];
                let s: f64 = (0..3).map(|i| bc[i] / self.cam[tri[i]].z).sum();
                let depth = if s > 0.0 { 1.0 / s } else { f64::INFINITY };
                if depth < best.0 {
                    best = (depth, t);
                }
            }
            let tri = tris[best.1];
            let corner = [
                tri.iter().position(|&v| v == e.vertices[0]).expect("edge vertex in triangle"),
                tri.iter().position(|&v| v == e.vertices[1]).expect("edge vertex in triangle"),
            ];
            out.push(Contour { v: e.vertices, tri: best.1, corner });
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.empty
    }

    /// Intrinsics in render-image pixels.
    pub fn render_intrinsics(&self) -> &CameraIntrinsics {
        &self.k
    }

    fn signed_distance(&self, f: &Fragment) -> f64 {
        if f.tri != NONE {
            f.dist
        } else {
            -f.dist
        }
    }

    /// Interior color and depth of fragment `f` from its covering triangle.
    fn interior_attrs(&self, f: &Fragment) -> ([f64; 3], f64) {
        let t = f.tri as usize;
        let tri = self.mesh.triangles()[t];
        let uvs = &self.mesh.uvs()[t];
        let beta: [f64; 3] = std::array::from_fn(|i| f.bary[i] / self.cam[tri[i]].z);
        let sum: f64 = beta.iter().sum();
        let uv = (uvs[0] * beta[0] + uvs[1] * beta[1] + uvs[2] * beta[2]) / sum;
        (sample_texture(self.mesh.texture(), &uv).0, 1.0 / sum)
    }

    /// Color and depth at the closest point of the fragment's contour segment.
    fn contour_attrs(&self, f: &Fragment) -> ([f64; 3], f64) {
        let c = &self.contours[f.edge as usize];
        let uvs = &self.mesh.uvs()[c.tri];
        let (z0, z1) = (self.cam[c.v[0]].z, self.cam[c.v[1]].z);
        let s = f.s;
        let den = (1.0 - s) * z1 + s * z0;
        let w1 = s * z0 / den;
        let uv = uvs[c.corner[0]] * (1.0 - w1) + uvs[c.corner[1]] * w1;
        (sample_texture(self.mesh.texture(), &uv).0, z0 * z1 / den)
    }

    fn shade(&self, f: &Fragment) -> Option<Shade> {
        let d = self.signed_distance(f);
        let (sil, dsil) = band_ramp(d, self.cfg.sigma);
        if sil <= 0.0 && dsil == 0.0 {
            return None;
        }
        let interior = (f.tri != NONE).then(|| self.interior_attrs(f));
        let contour = (f.edge != NONE).then(|| self.contour_attrs(f));
        let (gamma, dgamma) = match (interior, contour) {
            (Some(_), Some(_)) => interior_blend(d, self.cfg.sigma),
            (Some(_), None) => (1.0, 0.0),
            _ => (0.0, 0.0),
        };
        let (ci, zi) = interior.unwrap_or(([0.0; 3], 0.0));
        let (ce, ze) = contour.unwrap_or(([0.0; 3], 0.0));
        let color = std::array::from_fn(|k| gamma * ci[k] + (1.0 - gamma) * ce[k]);
        let depth = gamma * zi + (1.0 - gamma) * ze;
        Some(Shade { sil, dsil, gamma, dgamma, interior, contour, color, depth })
    }

    pub fn buffers(&self) -> FrameBuffers {
        let mut fb = FrameBuffers::new_empty(self.cfg.width, self.cfg.height, self.cfg.depth_background);
        self.buffers_into(&mut fb);
        fb
    }

    /// Writes the render into `fb`, which must hold a previous render (or an
    /// empty frame) of the same size. Only its old bounding box is cleared.
    pub fn buffers_into(&self, fb: &mut FrameBuffers) {
        let (w, h) = (self.cfg.width, self.cfg.height);
        if (fb.width(), fb.height()) != (w, h) {
            *fb = FrameBuffers::new_empty(w, h, self.cfg.depth_background);
        } else {
            let old = fb.bbox;
            for y in old.y0..old.y1 {
                let row = y * w;
                fb.color.data[(row + old.x0) * 3..(row + old.x1) * 3].fill(0.0);
                fb.depth.data[row + old.x0..row + old.x1].fill(self.cfg.depth_background);
                fb.silhouette.data[row + old.x0..row + old.x1].fill(0.0);
            }
            fb.empty = true;
            fb.bbox = Rect { x0: 0, y0: 0, x1: 0, y1: 0 };
        }
        if self.empty {
            return;
        }
        let rect = self.rect;
        let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                let Some(sh) = &self.shades[(y - rect.y0) * rect.width() + (x - rect.x0)] else { continue };
                if sh.sil <= 0.0 {
                    continue;
                }
                let i = y * w + x;
                fb.silhouette.data[i] = sh.sil;
                fb.depth.data[i] = sh.sil * sh.depth;
                for k in 0..3 {
                    fb.color.data[i * 3 + k] = sh.sil * sh.color[k];
                }
                bx0 = bx0.min(x);
                by0 = by0.min(y);
                bx1 = bx1.max(x + 1);
                by1 = by1.max(y + 1);
            }
        }
        if bx1 > 0 {
            fb.empty = false;
            fb.bbox = Rect { x0: bx0, y0: by0, x1: bx1, y1: by1 };
        }
    }

    /// Backpropagates gradients on the interior color and depth of `f`.
    fn interior_backward(&self, f: &Fragment, p: &Vector2<f64>, gc: [f64; 3], gz: f64, acc: &mut Accum) {
        let t = f.tri as usize;
        let tri = self.mesh.triangles()[t];
        let uvs = &self.mesh.uvs()[t];
        let a = self.tri_screen(t);
        let z = [self.cam[tri[0]].z, self.cam[tri[1]].z, self.cam[tri[2]].z];
        let beta: [f64; 3] = std::array::from_fn(|k| f.bary[k] / z[k]);
        let sum: f64 = beta.iter().sum();
        let wts: [f64; 3] = std::array::from_fn(|k| beta[k] / sum);
        let uv = uvs[0] * wts[0] + uvs[1] * wts[1] + uvs[2] * wts[2];
        let (_, cdu, cdv) = sample_texture(self.mesh.texture(), &uv);
        let depth = 1.0 / sum;
        let g_uv = Vector2::new(
            gc[0] * cdu[0] + gc[1] * cdu[1] + gc[2] * cdu[2],
            gc[0] * cdv[0] + gc[1] * cdv[1] + gc[2] * cdv[2],
        );
        // uv = Σ w_k uv_k with w = β / Σβ, depth = 1 / Σβ, β_k = b_k / z_k
        let g_w: [f64; 3] = std::array::from_fn(|k| g_uv.dot(&uvs[k]));
        let g_w_dot: f64 = (0..3).map(|k| g_w[k] * wts[k]).sum();
        let d_inv = -gz * depth * depth;
        let mut g_b = [0.0; 3];
        for k in 0..3 {
            let g_beta = (g_w[k] - g_w_dot) / sum + d_inv;
            g_b[k] = g_beta / z[k];
            acc.depth[tri[k]] -= g_beta * f.bary[k] / (z[k] * z[k]);
        }
        // b0 = E(a1,a2,p)/A, b1 = E(a2,a0,p)/A, b2 = E(a0,a1,p)/A
        let area = edge_fn(&a[0], &a[1], &a[2]);
        let gb_dot: f64 = (0..3).map(|k| g_b[k] * f.bary[k]).sum();
        let e0 = edge_fn_grads(&a[1], &a[2], p);
        let e1 = edge_fn_grads(&a[2], &a[0], p);
        let e2 = edge_fn_grads(&a[0], &a[1], p);
        let ea = edge_fn_grads(&a[0], &a[1], &a[2]);
        acc.screen[tri[0]] += (e1[1] * g_b[1] + e2[0] * g_b[2] - ea[0] * gb_dot) / area;
        acc.screen[tri[1]] += (e0[0] * g_b[0] + e2[1] * g_b[2] - ea[1] * gb_dot) / area;
        acc.screen[tri[2]] += (e0[1] * g_b[0] + e1[0] * g_b[1] - ea[2] * gb_dot) / area;
    }

    /// Backpropagates gradients on the contour-point color and depth of `f`.
    fn contour_backward(&self, f: &Fragment, p: &Vector2<f64>, gc: [f64; 3], gz: f64, acc: &mut Accum) {
        let c = &self.contours[f.edge as usize];
        let uvs = &self.mesh.uvs()[c.tri];
        let (ea, eb) = (self.screen[c.v[0]], self.screen[c.v[1]]);
        let (z0, z1) = (self.cam[c.v[0]].z, self.cam[c.v[1]].z);
        let s = f.s;
        let den = (1.0 - s) * z1 + s * z0;
        let w1 = s * z0 / den;
        let (uv0, uv1) = (uvs[c.corner[0]], uvs[c.corner[1]]);
        let (_, cdu, cdv) = sample_texture(self.mesh.texture(), &(uv0 * (1.0 - w1) + uv1 * w1));
        let g_uv = Vector2::new(
            gc[0] * cdu[0] + gc[1] * cdu[1] + gc[2] * cdu[2],
            gc[0] * cdv[0] + gc[1] * cdv[1] + gc[2] * cdv[2],
        );
        let g_w1 = g_uv.dot(&(uv1 - uv0));
        let den2 = den * den;
        // w1 = s z0 / D and depth = z0 z1 / D with D = (1 - s) z1 + s z0
        let g_s = g_w1 * z0 * z1 / den2 - gz * z0 * z1 * (z0 - z1) / den2;
        acc.depth[c.v[0]] += g_w1 * s * (1.0 - s) * z1 / den2 + gz * (1.0 - s) * z1 * z1 / den2;
        acc.depth[c.v[1]] += -g_w1 * s * (1.0 - s) * z0 / den2 + gz * s * z0 * z0 / den2;
        if s > 0.0 && s < 1.0 {
            let dir = eb - ea;
            let len2 = dir.norm_squared();
            let ds_db = (p - ea - dir * (2.0 * s)) / len2;
            let ds_da = -ds_db - dir / len2;
            acc.screen[c.v[0]] += ds_da * g_s;
            acc.screen[c.v[1]] += ds_db * g_s;
        }
    }

    /// Backpropagates a gradient on the signed contour distance of `f`.
    fn distance_backward(&self, f: &Fragment, p: &Vector2<f64>, g_d: f64, acc: &mut Accum) {
        if f.edge == NONE || !(f.dist > 0.0) || g_d == 0.0 {
            return;
        }
        let c = &self.contours[f.edge as usize];
        let (ea, eb) = (self.screen[c.v[0]], self.screen[c.v[1]]);
        let n = (ea + (eb - ea) * f.s - p) / f.dist;
        let g = if f.tri != NONE { g_d } else { -g_d };
        acc.screen[c.v[0]] += n * (g * (1.0 - f.s));
        acc.screen[c.v[1]] += n * (g * f.s);
    }

    /// Chain rule from per-pixel upstream gradients to the pose.
    pub fn backward(&self, up: &FrameGradients) -> PoseGradient {
        if self.empty {
            return PoseGradient::zero(true);
        }
        let w = self.cfg.width;
        let nv = self.mesh.vertices().len();
        let mut acc = Accum { screen: vec![Vector2::zeros(); nv], depth: vec![0.0; nv] };
        let rect = self.rect;
        let mut any_visible = false;
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                let j = (y - rect.y0) * rect.width() + (x - rect.x0);
                let Some(sh) = &self.shades[j] else { continue };
                let f = &self.frags[j];
                any_visible = true;
                let i = y * w + x;
                let gc = [up.color.data[i * 3], up.color.data[i * 3 + 1], up.color.data[i * 3 + 2]];
                let gz = up.depth.data[i];
                let gs = up.silhouette.data[i];
                if gc == [0.0; 3] && gz == 0.0 && gs == 0.0 {
                    continue;
                }
                let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
                let mut g_d = sh.dsil * (dot(gc, sh.color) + gz * sh.depth + gs);
                if sh.gamma > 0.0 {
                    let k = sh.sil * sh.gamma;
                    self.interior_backward(f, &p, gc.map(|v| v * k), gz * k, &mut acc);
                }
                if sh.gamma < 1.0 {
                    let k = sh.sil * (1.0 - sh.gamma);
                    self.contour_backward(f, &p, gc.map(|v| v * k), gz * k, &mut acc);
                }
                if let (Some((ci, zi)), Some((ce, ze))) = (sh.interior, sh.contour) {
                    let diff = std::array::from_fn(|k| ci[k] - ce[k]);
                    g_d += sh.sil * sh.dgamma * (dot(gc, diff) + gz * (zi - ze));
                }
                self.distance_backward(f, &p, g_d, &mut acc);
            }
        }
        if !any_visible {
            return PoseGradient::zero(true);
        }

        let mut d_t = Vector3::zeros();
        let mut d_rot = Matrix3::zeros();
        for v in 0..nv {
            let (gs, gz) = (acc.screen[v], acc.depth[v]);
            if gs == Vector2::zeros() && gz == 0.0 {
                continue;
            }
            let jac = self.k.project_jacobian(&self.cam[v]);
            let g_cam = jac.transpose() * gs + Vector3::new(0.0, 0.0, gz);
            d_t += g_cam;
            d_rot += g_cam * self.mesh.vertices()[v].transpose();
        }
        PoseGradient {
            d_translation: d_t,
            d_quaternion: self.pose.rotation_matrix_grad_to_quaternion(&d_rot),
            silhouette_empty: false,
        }
    }
}

/// Per-vertex gradient accumulators in screen space and camera depth.
struct Accum {
    screen: Vec<Vector2<f64>>,
    depth: Vec<f64>,
}

/// Everything the forward pass computes for one pixel.
struct Shade {
    sil: f64,
    dsil: f64,
    /// Weight of the interior attributes against the contour attributes.
    gamma: f64,
    dgamma: f64,
    interior: Option<([f64; 3], f64)>,
    contour: Option<([f64; 3], f64)>,
    color: [f64; 3],
    depth: f64,
}

#[inline]
fn edge_fn_area(a: &[Vector2<f64>; 3]) -> f64 {
    edge_fn(&a[0], &a[1], &a[2])
}

/// Renders color, depth and silhouette of `mesh` at `pose`.
pub fn render_channels(mesh: &TexturedMesh, pose: &Pose, k: &CameraIntrinsics, cfg: &RenderConfig) -> FrameBuffers {
    Raster::new(mesh, pose, k, cfg).buffers()
}

/// Gradient of a loss with per-pixel gradients `upstream` with respect to the
/// pose, recomputing the rasterization.
pub fn render_backward(
    mesh: &TexturedMesh,
    pose: &Pose,
    k: &CameraIntrinsics,
    cfg: &RenderConfig,
    upstream: &FrameGradients,
) -> PoseGradient {
    Raster::new(mesh, pose, k, cfg).backward(upstream)
}
