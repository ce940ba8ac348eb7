use nalgebra::{Vector2, Vector3};
use posefit::geometry::Quaternion;
use posefit::imageproc::{resize, ResizeKind};
use posefit::mesh::primitives::{checkerboard, textured_box, textured_quad};
use posefit::render::{render_channels, RenderConfig, RenderOptions};
use posefit::{CameraIntrinsics, ImageF, Pose, TexturedMesh};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Ray through the pixel center hits the plane of the quad; the hit point's
/// in-plane coordinates give the texture coordinate directly.
fn quad_oracle(k: &CameraIntrinsics, pose: &Pose, size: f64, tex: &ImageF, px: usize, py: usize) -> Option<[f64; 3]> {
    let r = pose.rotation_matrix();
    let dir = Vector3::new((px as f64 + 0.5 - k.cx) / k.fx, (py as f64 + 0.5 - k.cy) / k.fy, 1.0);
    let n = r.column(2).into_owned();
    let s = n.dot(&pose.translation) / n.dot(&dir);
    let local = r.transpose() * (dir * s - pose.translation);
    let (u, v) = (local.x / size + 0.5, local.y / size + 0.5);
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return None;
    }
    // bilinear, clamp-to-edge, rows counted from the top
    let fx = u * tex.width as f64 - 0.5;
    let fy = (1.0 - v) * tex.height as f64 - 0.5;
    let (x0, y0) = (fx.floor(), fy.floor());
    let (ax, ay) = (fx - x0, fy - y0);
    let at = |x: f64, y: f64, c: usize| {
        let xi = x.clamp(0.0, (tex.width - 1) as f64) as usize;
        let yi = y.clamp(0.0, (tex.height - 1) as f64) as usize;
        tex.data[(yi * tex.width + xi) * 3 + c]
    };
    Some(std::array::from_fn(|c| {
        (1.0 - ax) * (1.0 - ay) * at(x0, y0, c)
            + ax * (1.0 - ay) * at(x0 + 1.0, y0, c)
            + (1.0 - ax) * ay * at(x0, y0 + 1.0, c)
            + ax * ay * at(x0 + 1.0, y0 + 1.0, c)
    }))
}

#[test]
fn checkerboard_quad_matches_ray_plane_oracle() {
    let tex = checkerboard(64, 8, [0.9, 0.2, 0.1], [0.1, 0.3, 0.8]);
    let size = 1.0;
    let mesh = textured_quad(size, tex.clone());
    let k = CameraIntrinsics::new(100.0, 100.0, 64.0, 48.0, 128, 96).unwrap();
    let pose = Pose::new(Quaternion::from_axis_angle(&Vector3::new(1.0, 0.5, 0.0), 0.5), Vector3::new(0.05, -0.02, 1.6));
    let fb = render_channels(&mesh, &pose, &k, &RenderConfig::for_camera(&k, RenderOptions::default()));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    while checked < 50 {
        let (x, y) = (rng.gen_range(0..k.width), rng.gen_range(0..k.height));
        let i = y * k.width + x;
        // interior pixels only; the soft band premultiplies color
        if fb.silhouette.data[i] < 1.0 {
            continue;
        }
        let expect = quad_oracle(&k, &pose, size, &tex, x, y).expect("pixel is on the quad");
        for c in 0..3 {
            assert!((fb.color.data[i * 3 + c] - expect[c]).abs() < 1e-6, "({x}, {y}) channel {c}");
        }
        checked += 1;
    }
}

#[test]
fn nearer_triangle_wins() {
    let tex = ImageF::filled(2, 2, 3, 0.5);
    let verts = vec![
        Vector3::new(-1.0, -1.0, 2.0),
        Vector3::new(1.0, -1.0, 2.0),
        Vector3::new(0.0, 1.0, 2.0),
        Vector3::new(-0.8, -0.6, 1.2),
        Vector3::new(0.9, -0.9, 1.5),
        Vector3::new(0.1, 0.9, 1.0),
    ];
    let uv = [Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0), Vector2::new(0.5, 1.0)];
    let mesh = TexturedMesh::new(verts.clone(), vec![[0, 1, 2], [3, 4, 5]], vec![uv, uv], tex).unwrap();
    let k = CameraIntrinsics::new(60.0, 60.0, 40.0, 30.0, 80, 60).unwrap();
    let fb = render_channels(&mesh, &Pose::identity(), &k, &RenderConfig::for_camera(&k, RenderOptions::default()));
    // min-depth oracle: intersect the pixel ray with each triangle's plane
    let ray_depth = |tri: [usize; 3], x: usize, y: usize| -> Option<f64> {
        let d = Vector3::new((x as f64 + 0.5 - k.cx) / k.fx, (y as f64 + 0.5 - k.cy) / k.fy, 1.0);
        let (a, b, c) = (verts[tri[0]], verts[tri[1]], verts[tri[2]]);
        let n = (b - a).cross(&(c - a));
        let s = n.dot(&a) / n.dot(&d);
        let p = d * s;
        let inside = [(a, b), (b, c), (c, a)].iter().map(|(u, v)| (v - u).cross(&(p - u)).dot(&n)).collect::<Vec<_>>();
        (inside.iter().all(|v| *v >= 0.0) || inside.iter().all(|v| *v <= 0.0)).then_some(p.z)
    };
    let mut overlap = 0;
    for y in 0..k.height {
        for x in 0..k.width {
            let i = y * k.width + x;
            if fb.silhouette.data[i] < 1.0 {
                continue;
            }
            let hits: Vec<f64> = [[0, 1, 2], [3, 4, 5]].iter().filter_map(|t| ray_depth(*t, x, y)).collect();
            if hits.len() == 2 {
                overlap += 1;
            }
            let expect = hits.iter().copied().fold(f64::INFINITY, f64::min);
            assert!((fb.depth.data[i] - expect).abs() < 1e-9, "({x}, {y}): {} vs {expect}", fb.depth.data[i]);
        }
    }
    assert!(overlap > 100);
}

#[test]
fn double_resolution_downsamples_to_single() {
    let mesh = textured_box(Vector3::new(0.12, 0.08, 0.05), 3, 7);
    let k = CameraIntrinsics::new(320.0, 320.0, 160.0, 120.0, 320, 240).unwrap();
    let pose = Pose::new(Quaternion::from_axis_angle(&Vector3::new(0.3, 1.0, 0.4), 0.9), Vector3::new(0.0, 0.01, 0.45));
    let opts = RenderOptions::default();
    let hi = render_channels(&mesh, &pose, &k, &RenderConfig::new(640, 480, opts));
    let lo = render_channels(&mesh, &pose, &k, &RenderConfig::new(320, 240, opts));
    let down = resize(&hi.color, 0.5, ResizeKind::Smooth);
    let mae = down.mean_abs_diff(&lo.color);
    assert!(mae < 0.05, "mae {mae}");
    // restricted to the object the agreement is still good
    let mut err = 0.0;
    let mut n = 0;
    for i in 0..lo.silhouette.data.len() {
        if lo.silhouette.data[i] > 0.0 {
            err += (0..3).map(|c| (down.data[i * 3 + c] - lo.color.data[i * 3 + c]).abs()).sum::<f64>() / 3.0;
            n += 1;
        }
    }
    assert!(err / (n as f64) < 0.05, "object mae {}", err / n as f64);
}
