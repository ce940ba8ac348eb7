//! Edge extraction, mask morphology, depth decoding and resizing.
//!
//! The edge map is a smooth edge-strength signal: Gaussian blur
//! (σ = 1.4 px, 5×5), Rec. 709 luminance, Sobel gradient magnitude, then a
//! division by the 99th percentile of the nonzero magnitudes and a clamp to
//! `[0, 1]`. Both linear stages use replicate padding; luminance is taken
//! before the blur, which is equivalent because both are linear.

use crate::pixels::{DepthRaw, ImageF};

pub const EDGE_BLUR_SIGMA: f64 = 1.4;
pub const EDGE_PERCENTILE: f64 = 0.99;
const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

fn gaussian_taps() -> [f64; 5] {
    let mut k = [0.0; 5];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - 2.0;
        *v = (-x * x / (2.0 * EDGE_BLUR_SIGMA * EDGE_BLUR_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn full(width: usize, height: usize) -> Self {
        Self { x0: 0, y0: 0, x1: width, y1: height }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn union(&self, other: &Rect) -> Rect {
        if self.is_empty() {
            return *other;
        }
        if other.is_empty() {
            return *self;
        }
        Rect {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn expand(&self, margin: usize, width: usize, height: usize) -> Rect {
        Rect {
            x0: self.x0.saturating_sub(margin),
            y0: self.y0.saturating_sub(margin),
            x1: (self.x1 + margin).min(width),
            y1: (self.y1 + margin).min(height),
        }
    }
}

/// Sobel components and magnitude over a rectangle of the blurred luminance.
struct EdgeStages {
    gx: Vec<f64>,
    gy: Vec<f64>,
    mag: Vec<f64>,
}

/// 5-tap separable blur with replicate padding inside `rect`; input and
/// output are rect-local.
fn blur(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_taps();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = (x as isize + i as isize - 2).clamp(0, w as isize - 1) as usize;
                acc += kv * row[xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = (y as isize + i as isize - 2).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Adjoint of [`blur`].
fn blur_adjoint(grad: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_taps();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = grad[y * w + x];
            if g == 0.0 {
                continue;
            }
            for (i, kv) in k.iter().enumerate() {
                let yy = (y as isize + i as isize - 2).clamp(0, h as isize - 1) as usize;
                tmp[yy * w + x] += kv * g;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = tmp[y * w + x];
            if g == 0.0 {
                continue;
            }
            for (i, kv) in k.iter().enumerate() {
                let xx = (x as isize + i as isize - 2).clamp(0, w as isize - 1) as usize;
                out[y * w + xx] += kv * g;
            }
        }
    }
    out
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[inline]
fn clamp_idx(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}


fn edge_stages(img: &ImageF, rect: Rect) -> EdgeStages {
    assert_eq!(img.channels, 3, "edge map needs a 3-channel image");
    let (w, h) = (rect.width(), rect.height());
    let mut luma = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let o = ((y + rect.y0) * img.width + x + rect.x0) * 3;
            luma[y * w + x] = LUMA[0] * img.data[o] + LUMA[1] * img.data[o + 1] + LUMA[2] * img.data[o + 2];
        }
    }
    let b = blur(&luma, w, h);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let mut mag = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut sx, mut sy) = (0.0, 0.0);
            for (j, (rx, ry)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                let yy = clamp_idx(y as isize + j as isize - 1, h);
                for i in 0..3 {
                    let xx = clamp_idx(x as isize + i as isize - 1, w);
                    let v = b[yy * w + xx];
                    sx += rx[i] * v;
                    sy += ry[i] * v;
                }
            }
            let i = y * w + x;
            gx[i] = sx;
            gy[i] = sy;
            mag[i] = (sx * sx + sy * sy).sqrt();
        }
    }
    EdgeStages { gx, gy, mag }
}

/// 99th percentile of the nonzero gradient magnitudes; 0 when there are none.
fn percentile_scale(mag: &[f64]) -> f64 {
    let mut nz: Vec<f64> = mag.iter().copied().filter(|m| *m > 1e-12).collect();
    if nz.is_empty() {
        return 0.0;
    }
    nz.sort_by(|a, b| a.total_cmp(b));
    let idx = ((nz.len() - 1) as f64 * EDGE_PERCENTILE).round() as usize;
    nz[idx]
}

/// Normalized edge strength of a linear RGB image, with the normalization
/// scale it used.
pub fn edge_map_with_scale(img: &ImageF) -> (ImageF, f64) {
    let st = edge_stages(img, Rect::full(img.width, img.height));
    let scale = percentile_scale(&st.mag);
    let mut out = ImageF::new(img.width, img.height, 1);
    if scale > 0.0 {
        for (o, m) in out.data.iter_mut().zip(&st.mag) {
            *o = (m / scale).clamp(0.0, 1.0);
        }
    }
    (out, scale)
}

pub fn edge_map(img: &ImageF) -> ImageF {
    edge_map_with_scale(img).0
}

/// Edge map with a fixed normalization scale over a rectangle, keeping the
/// intermediate stages for the backward pass.
pub struct EdgeCrop {
    rect: Rect,
    scale: f64,
    stages: Option<EdgeStages>,
}

impl EdgeCrop {
    pub fn new(img: &ImageF, scale: f64, rect: Rect) -> Self {
        let stages = (!rect.is_empty() && scale > 0.0).then(|| edge_stages(img, rect));
        Self { rect, scale, stages }
    }

    pub fn rect(&self) -> Rect {
        self.rect
    }

    /// Value at full-frame pixel `(x, y)`; zero outside the rectangle.
    #[inline]
    pub fn value(&self, x: usize, y: usize) -> f64 {
        let Some(st) = &self.stages else { return 0.0 };
        let r = self.rect;
        if x < r.x0 || x >= r.x1 || y < r.y0 || y >= r.y1 {
            return 0.0;
        }
        (st.mag[(y - r.y0) * r.width() + x - r.x0] / self.scale).clamp(0.0, 1.0)
    }

    /// Adds d loss / d color into `color_grad` (3 channels, full frame)
    /// given rect-local upstream gradients on the edge values.
    pub fn backward_add(&self, upstream: &[f64], color_grad: &mut ImageF) {
        let Some(st) = &self.stages else { return };
        let rect = self.rect;
        let (w, h) = (rect.width(), rect.height());
        let mut d_gx = vec![0.0; w * h];
        let mut d_gy = vec![0.0; w * h];
        let mut any = false;
        for i in 0..w * h {
            let (g, m) = (upstream[i], st.mag[i]);
            if g == 0.0 || m <= 0.0 || m >= self.scale {
                continue;
            }
            let dm = g / self.scale;
            d_gx[i] = dm * st.gx[i] / m;
            d_gy[i] = dm * st.gy[i] / m;
            any = true;
        }
        if !any {
            return;
        }
        let mut d_blur = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (a, b) = (d_gx[i], d_gy[i]);
                if a == 0.0 && b == 0.0 {
                    continue;
                }
                for (j, (rx, ry)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                    let yy = clamp_idx(y as isize + j as isize - 1, h);
                    for k in 0..3 {
                        let xx = clamp_idx(x as isize + k as isize - 1, w);
                        d_blur[yy * w + xx] += rx[k] * a + ry[k] * b;
                    }
                }
            }
        }
        let d_luma = blur_adjoint(&d_blur, w, h);
        let iw = color_grad.width;
        for y in 0..h {
            for x in 0..w {
                let g = d_luma[y * w + x];
                let o = ((y + rect.y0) * iw + x + rect.x0) * 3;
                for c in 0..3 {
                    color_grad.data[o + c] += LUMA[c] * g;
                }
            }
        }
    }
}

/// Edge map with an externally fixed normalization scale, evaluated only
/// inside `rect` (values outside stay zero). Equal to the full-frame result
/// wherever the image is zero within 3 px outside `rect`.
pub fn edge_map_fixed_scale(img: &ImageF, scale: f64, rect: Rect) -> ImageF {
    let mut out = ImageF::new(img.width, img.height, 1);
    let crop = EdgeCrop::new(img, scale, rect);
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            out.data[y * img.width + x] = crop.value(x, y);
        }
    }
    out
}

/// Backpropagates `upstream` (d loss / d edge, full frame) through
/// [`edge_map_fixed_scale`] and returns d loss / d color (3 channels,
/// full frame). The scale is a constant.
pub fn edge_map_backward(img: &ImageF, scale: f64, rect: Rect, upstream: &ImageF) -> ImageF {
    let mut out = ImageF::new(img.width, img.height, 3);
    let crop = EdgeCrop::new(img, scale, rect);
    let mut local = vec![0.0; rect.width() * rect.height()];
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            local[(y - rect.y0) * rect.width() + x - rect.x0] = upstream.data[y * img.width + x];
        }
    }
    crop.backward_add(&local, &mut out);
    out
}

/// Dilation of a binary mask with a disc of `radius` pixels
/// (`dx² + dy² ≤ radius²`).
pub fn mask_dilate(mask: &ImageF, radius: f64) -> ImageF {
    let r = radius.max(0.0);
    let ri = r.floor() as isize;
    let offsets: Vec<(isize, isize)> = (-ri..=ri)
        .flat_map(|dy| (-ri..=ri).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| ((dx * dx + dy * dy) as f64) <= r * r + 1e-9)
        .collect();
    let (w, h) = (mask.width as isize, mask.height as isize);
    let mut out = ImageF::new(mask.width, mask.height, 1);
    for y in 0..h {
        for x in 0..w {
            if mask.data[(y * w + x) as usize] <= 0.5 {
                continue;
            }
            for (dx, dy) in &offsets {
                let (xx, yy) = (x + dx, y + dy);
                if xx >= 0 && yy >= 0 && xx < w && yy < h {
                    out.data[(yy * w + xx) as usize] = 1.0;
                }
            }
        }
    }
    out
}

/// Metric depth from raw sensor units; 0 stays 0 (invalid).
pub fn decode_depth(raw: &DepthRaw, scale: f64) -> ImageF {
    let data = raw.data.iter().map(|&v| v as f64 * scale).collect();
    ImageF { width: raw.width, height: raw.height, channels: 1, data }
}

/// How a resize treats pixel values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeKind {
    /// Plain area average / bilinear.
    Smooth,
    /// Zero is an invalid sentinel: any zero in the source footprint gives 0.
    Depth,
    /// Area average re-binarized at 0.5.
    Mask,
}

pub fn resized_dims(width: usize, height: usize, factor: f64) -> (usize, usize) {
    (((width as f64 * factor).round() as usize).max(1), ((height as f64 * factor).round() as usize).max(1))
}

/// Resizes by `factor`: area average when shrinking, bilinear when growing.
pub fn resize(img: &ImageF, factor: f64, kind: ResizeKind) -> ImageF {
    let (w, h) = resized_dims(img.width, img.height, factor);
    resize_to(img, w, h, kind)
}

pub fn resize_to(img: &ImageF, w: usize, h: usize, kind: ResizeKind) -> ImageF {
    if w == img.width && h == img.height {
        return img.clone();
    }
    if w <= img.width && h <= img.height {
        area_resize(img, w, h, kind)
    } else {
        bilinear_resize(img, w, h, kind)
    }
}

/// Source spans `(index, overlap weight)` covered by each destination pixel.
fn spans(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let (a, b) = (d as f64 * ratio, (d + 1) as f64 * ratio);
            let mut v = Vec::new();
            let mut s = a.floor() as usize;
            while (s as f64) < b && s < src {
                let w = (b.min((s + 1) as f64) - a.max(s as f64)).max(0.0);
                if w > 1e-12 {
                    v.push((s, w));
                }
                s += 1;
            }
            v
        })
        .collect()
}

fn area_resize(img: &ImageF, w: usize, h: usize, kind: ResizeKind) -> ImageF {
    let xs = spans(img.width, w);
    let ys = spans(img.height, h);
    let mut out = ImageF::new(w, h, img.channels);
    for (oy, ysp) in ys.iter().enumerate() {
        for (ox, xsp) in xs.iter().enumerate() {
            for c in 0..img.channels {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                let mut invalid = false;
                for &(sy, wy) in ysp {
                    for &(sx, wx) in xsp {
                        let v = img.get(sx, sy, c);
                        if kind == ResizeKind::Depth && v == 0.0 {
                            invalid = true;
                        }
                        acc += v * wx * wy;
                        wsum += wx * wy;
                    }
                }
                let mut v = if invalid { 0.0 } else { acc / wsum };
                if kind == ResizeKind::Mask {
                    v = if v >= 0.5 { 1.0 } else { 0.0 };
                }
                out.set(ox, oy, c, v);
            }
        }
    }
    out
}

fn bilinear_resize(img: &ImageF, w: usize, h: usize, kind: ResizeKind) -> ImageF {
    let mut out = ImageF::new(w, h, img.channels);
    let sx = img.width as f64 / w as f64;
    let sy = img.height as f64 / h as f64;
    for oy in 0..h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let ty = fy - y0 as f64;
        for ox in 0..w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let tx = fx - x0 as f64;
            for c in 0..img.channels {
                let taps = [
                    (img.get(x0, y0, c), (1.0 - tx) * (1.0 - ty)),
                    (img.get(x1, y0, c), tx * (1.0 - ty)),
                    (img.get(x0, y1, c), (1.0 - tx) * ty),
                    (img.get(x1, y1, c), tx * ty),
                ];
                let invalid = kind == ResizeKind::Depth && taps.iter().any(|(v, wt)| *v == 0.0 && *wt > 0.0);
                let mut v = if invalid { 0.0 } else { taps.iter().map(|(v, wt)| v * wt).sum() };
                if kind == ResizeKind::Mask {
                    v = if v >= 0.5 { 1.0 } else { 0.0 };
                }
                out.set(ox, oy, c, v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn step_image(w: usize, h: usize, at: usize) -> ImageF {
        let mut img = ImageF::new(w, h, 3);
        for y in 0..h {
            for x in at..w {
                for c in 0..3 {
                    img.set(x, y, c, 1.0);
                }
            }
        }
        img
    }

    #[test]
    fn constant_image_has_no_edges() {
        let e = edge_map(&ImageF::filled(16, 12, 3, 0.4));
        assert!(e.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn step_edge_peaks_at_the_step() {
        let e = edge_map(&step_image(24, 10, 12));
        let y = 5;
        let row: Vec<f64> = (0..24).map(|x| e.get(x, y, 0)).collect();
        let peak = row.iter().cloned().fold(0.0, f64::max);
        assert!(peak > 0.99);
        // the step lies between columns 11 and 12
        assert!(row[11] == peak || row[12] == peak);
        assert_eq!(row[2], 0.0);
        assert_eq!(row[21], 0.0);
    }

    #[test]
    fn edge_map_commutes_with_flip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut img = ImageF::new(17, 11, 3);
        img.data.iter_mut().for_each(|v| *v = rng.gen());
        let a = edge_map(&img.flip_horizontal());
        let b = edge_map(&img).flip_horizontal();
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn edge_map_in_unit_range() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut img = ImageF::new(20, 20, 3);
        img.data.iter_mut().for_each(|v| *v = rng.gen());
        let e = edge_map(&img);
        assert!(e.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn fixed_scale_crop_matches_full_frame() {
        let mut img = ImageF::new(30, 20, 3);
        for y in 8..13 {
            for x in 10..18 {
                for c in 0..3 {
                    img.set(x, y, c, 0.2 + 0.05 * c as f64 + 0.01 * x as f64);
                }
            }
        }
        let (_, scale) = edge_map_with_scale(&img);
        let full = edge_map_fixed_scale(&img, scale, Rect::full(30, 20));
        let crop = edge_map_fixed_scale(&img, scale, Rect { x0: 7, y0: 5, x1: 21, y1: 16 });
        assert!(full.data.iter().zip(&crop.data).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    // d sum(E) / d pixel against central differences, away from the clamp
    #[test]
    fn edge_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut img = ImageF::new(12, 10, 3);
        img.data.iter_mut().for_each(|v| *v = rng.gen_range(0.2..0.8));
        let (_, s) = edge_map_with_scale(&img);
        // a large fixed scale keeps every pixel below the clamp
        let scale = s * 10.0;
        let rect = Rect::full(12, 10);
        let ones = ImageF::filled(12, 10, 1, 1.0);
        let grad = edge_map_backward(&img, scale, rect, &ones);
        let f = |im: &ImageF| edge_map_fixed_scale(im, scale, rect).data.iter().sum::<f64>();
        let h = 1e-6;
        let gmax = grad.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for idx in (0..img.data.len()).step_by(7) {
            let mut a = img.clone();
            let mut b = img.clone();
            a.data[idx] += h;
            b.data[idx] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let denom = fd.abs().max(grad.data[idx].abs()).max(1e-3 * gmax);
            assert!((fd - grad.data[idx]).abs() / denom < 1e-3, "pixel {idx}: fd {fd} vs {}", grad.data[idx]);
        }
    }

    #[test]
    fn dilation_examples() {
        let mut m = ImageF::new(7, 7, 1);
        m.set(3, 3, 0, 1.0);
        assert_eq!(mask_dilate(&m, 0.0), m);
        let d = mask_dilate(&m, 1.0);
        let on: Vec<(usize, usize)> =
            (0..7).flat_map(|y| (0..7).map(move |x| (x, y))).filter(|&(x, y)| d.get(x, y, 0) == 1.0).collect();
        assert_eq!(on, vec![(3, 2), (2, 3), (3, 3), (4, 3), (3, 4)]);
        let ones = ImageF::filled(5, 4, 1, 1.0);
        assert_eq!(mask_dilate(&ones, 3.0), ones);
    }

    #[test]
    fn depth_and_resize_examples() {
        let raw = DepthRaw { width: 2, height: 1, data: vec![1000, 0] };
        let d = decode_depth(&raw, 0.001);
        assert_eq!(d.data, vec![1.0, 0.0]);

        let img = ImageF::filled(4, 4, 3, 0.3);
        assert_eq!(resize(&img, 1.0, ResizeKind::Smooth), img);
        let small = resize(&img, 0.5, ResizeKind::Smooth);
        assert_eq!(small.dims(), (2, 2));
        assert!(small.data.iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn depth_downscale_never_mixes_sentinels() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut d = ImageF::new(20, 14, 1);
        d.data.iter_mut().for_each(|v| *v = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.3..2.0) });
        for factor in [0.5, 0.3, 0.25, 0.7] {
            let (w, h) = resized_dims(20, 14, factor);
            let out = resize(&d, factor, ResizeKind::Depth);
            let xs = spans(20, w);
            let ys = spans(14, h);
            for (oy, ysp) in ys.iter().enumerate() {
                for (ox, xsp) in xs.iter().enumerate() {
                    let any_zero = ysp.iter().any(|&(sy, _)| xsp.iter().any(|&(sx, _)| d.get(sx, sy, 0) == 0.0));
                    if any_zero {
                        assert_eq!(out.get(ox, oy, 0), 0.0);
                    } else {
                        assert!(out.get(ox, oy, 0) > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn upscale_is_bilinear() {
        let img = ImageF::from_data(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let up = resize(&img, 2.0, ResizeKind::Smooth);
        assert_eq!(up.dims(), (4, 2));
        let row: Vec<f64> = (0..4).map(|x| up.get(x, 0, 0)).collect();
        assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
    }
}
