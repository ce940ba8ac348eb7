//! Textured triangle meshes: validation, OBJ I/O and procedural primitives.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};

use crate::error::MeshError;
use crate::pixels::{read_color_png, srgb_to_linear, write_color_png, ImageF};

/// Maximum number of vertices used when estimating the diameter.
pub const DIAMETER_SAMPLE: usize = 1024;
const MIN_TRIANGLE_AREA: f64 = 1e-12;

/// A unique undirected mesh edge and the triangles sharing it.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshEdge {
    pub vertices: [usize; 2],
    pub triangles: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TexturedMesh {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[usize; 3]>,
    uvs: Vec<[Vector2<f64>; 3]>,
    texture: ImageF,
    diameter: f64,
    edges: Vec<MeshEdge>,
}

impl TexturedMesh {
    /// Builds and validates a mesh. `uvs` holds one entry per triangle
    /// corner; `texture` is linear RGB.
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        triangles: Vec<[usize; 3]>,
        uvs: Vec<[Vector2<f64>; 3]>,
        texture: ImageF,
    ) -> Result<Self, MeshError> {
        if triangles.is_empty() {
            return Err(MeshError::Empty);
        }
        if uvs.len() != triangles.len() {
            return Err(MeshError::UvMismatch { uvs: uvs.len() * 3, corners: triangles.len() * 3 });
        }
        if texture.channels != 3 || texture.data.len() != texture.width * texture.height * 3 || texture.width == 0 {
            return Err(MeshError::TextureSize {
                got: texture.data.len(),
                expected: texture.width * texture.height * 3,
            });
        }
        for (t, tri) in triangles.iter().enumerate() {
            for &i in tri {
                if i >= vertices.len() {
                    return Err(MeshError::IndexOutOfRange { triangle: t, index: i, count: vertices.len() });
                }
            }
            if triangle_area(&vertices, tri) <= MIN_TRIANGLE_AREA {
                return Err(MeshError::DegenerateTriangle(t));
            }
        }
        let diameter = subsampled_diameter(&vertices);
        let edges = build_edges(&triangles);
        Ok(Self { vertices, triangles, uvs, texture, diameter, edges })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn uvs(&self) -> &[[Vector2<f64>; 3]] {
        &self.uvs
    }

    pub fn texture(&self) -> &ImageF {
        &self.texture
    }

    /// Max pairwise distance over a deterministic vertex subsample.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn edges(&self) -> &[MeshEdge] {
        &self.edges
    }

    /// Every k-th vertex, at most `max_points` of them.
    pub fn sample_points(&self, max_points: usize) -> Vec<Vector3<f64>> {
        subsample(&self.vertices, max_points)
    }

    /// Same mesh with vertices mapped through `pose` (object frame change).
    pub fn transformed(&self, pose: &crate::geometry::Pose) -> Self {
        let vertices = pose.apply(&self.vertices);
        Self {
            vertices,
            triangles: self.triangles.clone(),
            uvs: self.uvs.clone(),
            texture: self.texture.clone(),
            diameter: self.diameter,
            edges: self.edges.clone(),
        }
    }

    pub fn with_texture(&self, texture: ImageF) -> Result<Self, MeshError> {
        Self::new(self.vertices.clone(), self.triangles.clone(), self.uvs.clone(), texture)
    }

    /// Loads a Wavefront OBJ (polygons are fan-triangulated). The diffuse
    /// texture comes from `texture` when given, otherwise from the first
    /// material's `map_Kd`; without either the mesh is a flat mid-gray.
    /// Degenerate triangles are dropped.
    pub fn load_obj(path: &Path, texture: Option<&Path>) -> Result<Self, MeshError> {
        let opts = tobj::LoadOptions { triangulate: true, single_index: false, ..Default::default() };
        let (models, materials) =
            tobj::load_obj(path, &opts).map_err(|source| MeshError::Obj { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));

        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        let mut uvs = Vec::new();
        for model in &models {
            let m = &model.mesh;
            let offset = vertices.len();
            vertices.extend(
                m.positions.chunks_exact(3).map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)),
            );
            let tex: Vec<Vector2<f64>> =
                m.texcoords.chunks_exact(2).map(|t| Vector2::new(t[0] as f64, t[1] as f64)).collect();
            let has_uv = !m.texcoord_indices.is_empty() && !tex.is_empty();
            for (f, corner) in m.indices.chunks_exact(3).enumerate() {
                let tri = [
                    corner[0] as usize + offset,
                    corner[1] as usize + offset,
                    corner[2] as usize + offset,
                ];
                if tri.iter().any(|&i| i >= vertices.len()) || triangle_area(&vertices, &tri) <= MIN_TRIANGLE_AREA {
                    continue;
                }
                let uv = if has_uv {
                    let ti = &m.texcoord_indices[f * 3..f * 3 + 3];
                    [tex[ti[0] as usize], tex[ti[1] as usize], tex[ti[2] as usize]]
                } else {
                    [Vector2::zeros(); 3]
                };
                triangles.push(tri);
                uvs.push(uv);
            }
        }

        let tex_path: Option<PathBuf> = match texture {
            Some(t) => Some(t.to_path_buf()),
            None => materials
                .ok()
                .and_then(|mats| mats.into_iter().find_map(|m| m.diffuse_texture))
                .map(|t| base.join(t)),
        };
        let texture = match tex_path {
            Some(p) => read_color_png(&p).map_err(|e| match e {
                crate::error::ImageIoError::Decode { path, source } => MeshError::Texture { path, source },
                other => MeshError::Io { path: p.clone(), source: std::io::Error::other(other.to_string()) },
            })?,
            None => ImageF::filled(1, 1, 3, srgb_to_linear(0.5)),
        };
        Self::new(vertices, triangles, uvs, texture)
    }

    /// Writes `<dir>/<stem>.obj`, `<stem>.mtl` and `<stem>.png`; returns the
    /// OBJ path.
    pub fn write_obj(&self, dir: &Path, stem: &str) -> Result<PathBuf, MeshError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| MeshError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let obj_path = dir.join(format!("{stem}.obj"));
        let mtl_path = dir.join(format!("{stem}.mtl"));
        let png_path = dir.join(format!("{stem}.png"));

        let mut obj = String::new();
        let _ = writeln!(obj, "mtllib {stem}.mtl");
        let _ = writeln!(obj, "usemtl textured");
        for v in &self.vertices {
            let _ = writeln!(obj, "v {:.9} {:.9} {:.9}", v.x, v.y, v.z);
        }
        for uv in self.uvs.iter().flatten() {
            let _ = writeln!(obj, "vt {:.9} {:.9}", uv.x, uv.y);
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            let _ = writeln!(
                obj,
                "f {}/{} {}/{} {}/{}",
                tri[0] + 1,
                3 * t + 1,
                tri[1] + 1,
                3 * t + 2,
                tri[2] + 1,
                3 * t + 3
            );
        }
        std::fs::write(&obj_path, obj).map_err(io(&obj_path))?;
        let mtl = format!("newmtl textured\nKd 1 1 1\nmap_Kd {stem}.png\n");
        std::fs::write(&mtl_path, mtl).map_err(io(&mtl_path))?;
        write_color_png(&png_path, &self.texture)
            .map_err(|e| MeshError::Io { path: png_path.clone(), source: std::io::Error::other(e.to_string()) })?;
        Ok(obj_path)
    }
}

fn triangle_area(vertices: &[Vector3<f64>], tri: &[usize; 3]) -> f64 {
    let a = vertices[tri[0]];
    (vertices[tri[1]] - a).cross(&(vertices[tri[2]] - a)).norm() * 0.5
}

fn subsample(points: &[Vector3<f64>], max_points: usize) -> Vec<Vector3<f64>> {
    if points.is_empty() || max_points == 0 {
        return Vec::new();
    }
    let step = points.len().div_ceil(max_points);
    points.iter().step_by(step).copied().collect()
}

fn subsampled_diameter(vertices: &[Vector3<f64>]) -> f64 {
    let pts = subsample(vertices, DIAMETER_SAMPLE);
    let mut best = 0.0f64;
    for (i, a) in pts.iter().enumerate() {
        for b in &pts[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

fn build_edges(triangles: &[[usize; 3]]) -> Vec<MeshEdge> {
    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    let mut edges: Vec<MeshEdge> = Vec::new();
    for (t, tri) in triangles.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            let slot = *index.entry(key).or_insert_with(|| {
                edges.push(MeshEdge { vertices: [key.0, key.1], triangles: Vec::new() });
                edges.len() - 1
            });
            edges[slot].triangles.push(t);
        }
    }
    edges
}

/// Procedurally textured convex primitives used for synthetic scenes and
/// tests. Each planar face gets its own atlas chart; every chart is framed
/// by a shared border color, so texture lookups stay continuous across the
/// seams between faces.
pub mod primitives {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Chart size in texels.
    const CHART: usize = 64;
    const BORDER: usize = 6;
    const BORDER_RGB: [u8; 3] = [110, 110, 118];

    fn palette(rng: &mut rand_chacha::ChaCha8Rng) -> [[u8; 3]; 2] {
        let mut c = || [rng.gen_range(20..235u8), rng.gen_range(20..235u8), rng.gen_range(20..235u8)];
        let a = c();
        let mut b = c();
        // keep the two checker colors distinguishable
        while a.iter().zip(&b).map(|(x, y)| (*x as i32 - *y as i32).abs()).sum::<i32>() < 180 {
            b = c();
        }
        [a, b]
    }

    /// Region outside which a chart is painted in the uniform frame color.
    #[derive(Clone, Copy)]
    enum Frame {
        Square,
        /// Circle of this radius (texels) around the chart center.
        Disc(f64),
    }

    /// Fills chart `(cx, cy)` of an atlas with a smooth two-color checker and a
    /// soft diagonal stripe, blended into the uniform frame near the chart
    /// edge. Smooth texels keep bilinear lookups free of sharp slope changes.
    fn paint_chart(atlas: &mut [u8], atlas_w: usize, cx: usize, cy: usize, colors: [[u8; 3]; 2], checks: usize, frame: Frame) {
        let inner = (CHART - 2 * BORDER) as f64;
        let period = 2.0 * inner / checks as f64;
        let tau = 2.0 * std::f64::consts::PI;
        for y in 0..CHART {
            for x in 0..CHART {
                let edge = match frame {
                    Frame::Square => x.min(y).min(CHART - 1 - x).min(CHART - 1 - y) as f64,
                    Frame::Disc(inradius) => {
                        let c = CHART as f64 / 2.0;
                        let r = ((x as f64 + 0.5 - c).powi(2) + (y as f64 + 0.5 - c).powi(2)).sqrt();
                        inradius - r
                    }
                };
                // fully uniform for the outer half of the frame
                let r = ((edge - BORDER as f64 / 2.0) / (BORDER as f64 / 2.0 + 2.0)).clamp(0.0, 1.0);
                let blend = r * r * (3.0 - 2.0 * r);
                let (ix, iy) = (x as f64 - BORDER as f64 + 0.5, y as f64 - BORDER as f64 + 0.5);
                let m = 0.5 + 0.5 * (tau * ix / period).sin() * (tau * iy / period).sin();
                let d = (iy - 2.0 * ix) / 5f64.sqrt();
                let stripe = (-d * d / 32.0).exp();
                let mut rgb = [0u8; 3];
                for k in 0..3 {
                    let pat = colors[0][k] as f64 * (1.0 - m) + colors[1][k] as f64 * m;
                    let pat = pat * (1.0 - stripe) + 240.0 * stripe;
                    let v = BORDER_RGB[k] as f64 * (1.0 - blend) + pat * blend;
                    rgb[k] = v.round().clamp(0.0, 255.0) as u8;
                }
                let o = ((cy * CHART + y) * atlas_w + cx * CHART + x) * 3;
                atlas[o..o + 3].copy_from_slice(&rgb);
            }
        }
    }

    fn srgb8_to_image(w: usize, h: usize, bytes: &[u8]) -> ImageF {
        ImageF { width: w, height: h, channels: 3, data: bytes.iter().map(|&b| srgb_to_linear(b as f64 / 255.0)).collect() }
    }

    /// Accumulates geometry while deduplicating shared vertex positions.
    #[derive(Default)]
    struct Builder {
        vertices: Vec<Vector3<f64>>,
        lookup: HashMap<[i64; 3], usize>,
        triangles: Vec<[usize; 3]>,
        uvs: Vec<[Vector2<f64>; 3]>,
    }

    impl Builder {
        fn vertex(&mut self, p: Vector3<f64>) -> usize {
            let key = [(p.x * 1e9).round() as i64, (p.y * 1e9).round() as i64, (p.z * 1e9).round() as i64];
            if let Some(&i) = self.lookup.get(&key) {
                return i;
            }
            self.vertices.push(p);
            self.lookup.insert(key, self.vertices.len() - 1);
            self.vertices.len() - 1
        }

        /// Planar quad `origin + s*du + t*dv`, subdivided `nu × nv`, with
        /// outward normal `du × dv`. `chart` is the uv rectangle
        /// `(u0, v0, u1, v1)`.
        fn quad(
            &mut self,
            origin: Vector3<f64>,
            du: Vector3<f64>,
            dv: Vector3<f64>,
            (nu, nv): (usize, usize),
            chart: [f64; 4],
        ) {
            let uv_at = |s: f64, t: f64| Vector2::new(chart[0] + s * (chart[2] - chart[0]), chart[1] + t * (chart[3] - chart[1]));
            for j in 0..nv {
                for i in 0..nu {
                    let s0 = i as f64 / nu as f64;
                    let s1 = (i + 1) as f64 / nu as f64;
                    let t0 = j as f64 / nv as f64;
                    let t1 = (j + 1) as f64 / nv as f64;
                    let p = |s: f64, t: f64| origin + du * s + dv * t;
                    let a = self.vertex(p(s0, t0));
                    let b = self.vertex(p(s1, t0));
                    let c = self.vertex(p(s1, t1));
                    let d = self.vertex(p(s0, t1));
                    self.triangles.push([a, b, c]);
                    self.uvs.push([uv_at(s0, t0), uv_at(s1, t0), uv_at(s1, t1)]);
                    self.triangles.push([a, c, d]);
                    self.uvs.push([uv_at(s0, t0), uv_at(s1, t1), uv_at(s0, t1)]);
                }
            }
        }

        fn finish(self, texture: ImageF) -> TexturedMesh {
            TexturedMesh::new(self.vertices, self.triangles, self.uvs, texture).expect("procedural mesh is valid")
        }
    }

    fn chart_rect(index: usize, cols: usize, rows: usize) -> [f64; 4] {
        let (cx, cy) = (index % cols, index / cols);
        // v grows upward in OBJ convention while texture rows grow downward
        let u0 = cx as f64 / cols as f64;
        let u1 = (cx + 1) as f64 / cols as f64;
        let v1 = 1.0 - cy as f64 / rows as f64;
        let v0 = 1.0 - (cy + 1) as f64 / rows as f64;
        [u0, v0, u1, v1]
    }

    fn atlas(charts: usize, cols: usize, seed: u64, checks: usize, frame: impl Fn(usize) -> Frame) -> (ImageF, usize) {
        let rows = charts.div_ceil(cols);
        let (w, h) = (cols * CHART, rows * CHART);
        let mut bytes = vec![0u8; w * h * 3];
        for px in bytes.chunks_exact_mut(3) {
            px.copy_from_slice(&BORDER_RGB);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for c in 0..charts {
            let colors = palette(&mut rng);
            paint_chart(&mut bytes, w, c % cols, c / cols, colors, checks, frame(c));
        }
        (srgb8_to_image(w, h, &bytes), rows)
    }

    /// Axis-aligned box centered at the origin with side lengths `size`,
    /// each face subdivided `subdiv × subdiv`.
    pub fn textured_box(size: Vector3<f64>, subdiv: usize, seed: u64) -> TexturedMesh {
        let h = size * 0.5;
        let (cols, charts) = (3, 6);
        let (texture, rows) = atlas(charts, cols, seed, 2, |_| Frame::Square);
        let mut b = Builder::default();
        let x = Vector3::new(size.x, 0.0, 0.0);
        let y = Vector3::new(0.0, size.y, 0.0);
        let z = Vector3::new(0.0, 0.0, size.z);
        let n = subdiv.max(1);
        // (origin, du, dv) with du × dv pointing outward
        let faces = [
            (Vector3::new(h.x, -h.y, -h.z), y, z),
            (Vector3::new(-h.x, -h.y, -h.z), z, y),
            (Vector3::new(-h.x, h.y, -h.z), z, x),
            (Vector3::new(-h.x, -h.y, -h.z), x, z),
            (Vector3::new(-h.x, -h.y, h.z), x, y),
            (Vector3::new(-h.x, -h.y, -h.z), y, x),
        ];
        for (i, (o, du, dv)) in faces.into_iter().enumerate() {
            b.quad(o, du, dv, (n, n), chart_rect(i, cols, rows));
        }
        b.finish(texture)
    }

    pub fn textured_cube(side: f64, subdiv: usize, seed: u64) -> TexturedMesh {
        textured_box(Vector3::new(side, side, side), subdiv, seed)
    }

    /// Right prism over a regular `sides`-gon of circumradius `radius`, axis
    /// along z, centered at the origin.
    pub fn textured_prism(sides: usize, radius: f64, height: f64, subdiv: usize, seed: u64) -> TexturedMesh {
        let sides = sides.max(3);
        let cols = 4;
        // cap polygons are inscribed in their charts; frame them with a disc just
        // inside the polygon so the cap boundary samples only the frame color
        let cap_frame = Frame::Disc(CHART as f64 / 2.0 * (std::f64::consts::PI / sides as f64).cos() + 1.5);
        let (texture, rows) = atlas(sides + 2, cols, seed, 2, |c| if c >= sides { cap_frame } else { Frame::Square });
        let mut b = Builder::default();
        let hz = height * 0.5;
        let corner = |k: usize| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / sides as f64;
            Vector3::new(radius * a.cos(), radius * a.sin(), 0.0)
        };
        for k in 0..sides {
            let p0 = corner(k);
            let p1 = corner(k + 1);
            let origin = Vector3::new(p0.x, p0.y, -hz);
            // split only along the axis so the cap fans share the side edges
            b.quad(origin, p1 - p0, Vector3::new(0.0, 0.0, height), (1, subdiv.max(1)), chart_rect(k, cols, rows));
        }
        for (cap, z, sign) in [(sides, hz, 1.0), (sides + 1, -hz, -1.0)] {
            let rect = chart_rect(cap, cols, rows);
            let (uc, vc) = ((rect[0] + rect[2]) * 0.5, (rect[1] + rect[3]) * 0.5);
            let (ru, rv) = ((rect[2] - rect[0]) * 0.5, (rect[3] - rect[1]) * 0.5);
            let uv = |p: Vector3<f64>| Vector2::new(uc + ru * p.x / radius, vc + rv * p.y / radius);
            let center = Vector3::new(0.0, 0.0, z);
            let ci = b.vertex(center);
            for k in 0..sides {
                let (p0, p1) = (corner(k), corner(k + 1));
                let a = b.vertex(Vector3::new(p0.x, p0.y, z));
                let c = b.vertex(Vector3::new(p1.x, p1.y, z));
                if sign > 0.0 {
                    b.triangles.push([ci, a, c]);
                    b.uvs.push([uv(center), uv(p0), uv(p1)]);
                } else {
                    b.triangles.push([ci, c, a]);
                    b.uvs.push([uv(center), uv(p1), uv(p0)]);
                }
            }
        }
        b.finish(texture)
    }

    /// Square of side `size` in the z = 0 plane, centered at the origin,
    /// mapped to the full texture.
    pub fn textured_quad(size: f64, texture: ImageF) -> TexturedMesh {
        let h = size * 0.5;
        let vertices = vec![
            Vector3::new(-h, -h, 0.0),
            Vector3::new(h, -h, 0.0),
            Vector3::new(h, h, 0.0),
            Vector3::new(-h, h, 0.0),
        ];
        let uv = [Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0), Vector2::new(1.0, 1.0), Vector2::new(0.0, 1.0)];
        TexturedMesh::new(vertices, vec![[0, 1, 2], [0, 2, 3]], vec![[uv[0], uv[1], uv[2]], [uv[0], uv[2], uv[3]]], texture)
            .expect("quad is valid")
    }

    /// `cells × cells` checkerboard texture of two linear colors.
    pub fn checkerboard(texels: usize, cells: usize, a: [f64; 3], b: [f64; 3]) -> ImageF {
        let mut img = ImageF::new(texels, texels, 3);
        for y in 0..texels {
            for x in 0..texels {
                let c = if (x * cells / texels + y * cells / texels) % 2 == 0 { a } else { b };
                for (ch, v) in c.iter().enumerate() {
                    img.set(x, y, ch, *v);
                }
            }
        }
        img
    }
}
