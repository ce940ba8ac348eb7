//! Pose-error metrics: ADD, ADD-S and the area under the threshold curve.

use nalgebra::Vector3;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::Pose;

/// Default maximum threshold for the AUC, meters.
pub const AUC_MAX_THRESHOLD: f64 = 0.05;
/// Evaluation points drawn from the mesh vertices.
pub const EVAL_POINTS: usize = 2048;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no errors to summarize")]
    Empty,
    #[error("max threshold must be > 0, got {0}")]
    BadThreshold(f64),
    #[error("error values must be finite and >= 0")]
    BadError,
}

/// Mean distance between corresponding points under the two poses.
pub fn add(points: &[Vector3<f64>], gt: &Pose, est: &Pose) -> f64 {
    assert!(!points.is_empty(), "add needs at least one point");
    let (ra, rb) = (gt.rotation_matrix(), est.rotation_matrix());
    let sum: f64 = points.iter().map(|p| ((ra * p + gt.translation) - (rb * p + est.translation)).norm()).sum();
    sum / points.len() as f64
}

/// Mean distance from each ground-truth point to the closest estimated
/// point. Brute force, `O(N^2)`.
///
/// A nearest distance below the rounding noise of the coordinates counts
/// as zero, so a symmetry that maps the point set onto itself scores
/// exactly 0 even when the rotation is irrational (an eighth turn, say).
pub fn add_s(points: &[Vector3<f64>], gt: &Pose, est: &Pose) -> f64 {
    assert!(!points.is_empty(), "add_s needs at least one point");
    let a = gt.apply(points);
    let b = est.apply(points);
    let sum: f64 = a
        .iter()
        .map(|p| {
            let (d2, q) = b.iter().map(|q| ((p - q).norm_squared(), q)).fold((f64::INFINITY, p), |m, c| if c.0 < m.0 { c } else { m });
            let noise = ROUNDOFF_ULPS * f64::EPSILON * (p.norm() + q.norm());
            if d2.sqrt() <= noise {
                0.0
            } else {
                d2.sqrt()
            }
        })
        .sum();
    sum / points.len() as f64
}

const ROUNDOFF_ULPS: f64 = 16.0;

/// Fraction of poses at or under each threshold, and the normalized area
/// below that step curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdCurve {
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
    pub auc: f64,
    pub max_threshold: f64,
}

impl ThresholdCurve {
    /// Fraction of errors at or below `t`.
    pub fn fraction_at(&self, t: f64) -> f64 {
        match self.thresholds.iter().rposition(|x| *x <= t) {
            Some(i) => self.fractions[i],
            None => 0.0,
        }
    }

    /// Curve resampled on `n + 1` evenly spaced thresholds.
    pub fn sampled(&self, n: usize) -> Vec<(f64, f64)> {
        (0..=n)
            .map(|i| {
                let t = self.max_threshold * i as f64 / n as f64;
                (t, self.fraction_at(t))
            })
            .collect()
    }
}

/// Threshold curve of `errors` over `[0, max_threshold]`.
///
/// The curve is a right-continuous step function with a breakpoint at every
/// distinct error, so integrating piece by piece is exact.
pub fn auc(errors: &[f64], max_threshold: f64) -> Result<ThresholdCurve, MetricError> {
    if errors.is_empty() {
        return Err(MetricError::Empty);
    }
    if !(max_threshold > 0.0 && max_threshold.is_finite()) {
        return Err(MetricError::BadThreshold(max_threshold));
    }
    if errors.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(MetricError::BadError);
    }
    let n = errors.len() as f64;
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));

    let mut thresholds = vec![0.0];
    let mut fractions = vec![sorted.iter().filter(|e| **e <= 0.0).count() as f64 / n];
    for (i, e) in sorted.iter().enumerate() {
        if *e <= 0.0 || *e > max_threshold {
            continue;
        }
        // last occurrence of a repeated value carries the count
        if sorted.get(i + 1) == Some(e) {
            continue;
        }
        thresholds.push(*e);
        fractions.push((i + 1) as f64 / n);
    }
    if *thresholds.last().expect("nonempty") < max_threshold {
        thresholds.push(max_threshold);
        fractions.push(*fractions.last().expect("nonempty"));
    }

    let mut area = 0.0;
    for k in 1..thresholds.len() {
        let (t0, t1) = (thresholds[k - 1], thresholds[k]);
        // flat at fractions[k - 1] on [t0, t1)
        area += fractions[k - 1] * (t1 - t0);
    }
    Ok(ThresholdCurve { thresholds, fractions, auc: (area / max_threshold).clamp(0.0, 1.0), max_threshold })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quaternion;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let q = Quaternion::from_axis_angle(&axis, rng.gen_range(0.0..3.1));
        Pose::new(q, Vector3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(0.2..1.0)))
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n).map(|_| Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1))).collect()
    }

    /// Rotation applied component by component from the unit quaternion.
    fn apply_by_hand(pose: &Pose, p: &Vector3<f64>) -> [f64; 3] {
        let q = pose.rotation.normalize().unwrap();
        let (w, x, y, z) = (q.w, q.x, q.y, q.z);
        // v' = v + 2w (u x v) + 2 u x (u x v)
        let u = [x, y, z];
        let v = [p.x, p.y, p.z];
        let cross = |a: [f64; 3], b: [f64; 3]| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
        let c1 = cross(u, v);
        let c2 = cross(u, c1);
        let t = pose.translation;
        [v[0] + 2.0 * w * c1[0] + 2.0 * c2[0] + t.x, v[1] + 2.0 * w * c1[1] + 2.0 * c2[1] + t.y, v[2] + 2.0 * w * c1[2] + 2.0 * c2[2] + t.z]
    }

    fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    #[test]
    fn trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 50);
        let p = random_pose(&mut rng);
        assert_eq!(add(&pts, &p, &p), 0.0);
        assert_eq!(add_s(&pts, &p, &p), 0.0);
        let shifted = Pose::new(p.rotation, p.translation + Vector3::new(0.03, 0.0, 0.0));
        assert!((add(&pts, &p, &shifted) - 0.03).abs() < 1e-12);
    }

    #[test]
    fn add_and_add_s_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let pts = random_points(&mut rng, 100);
            let (gt, est) = (random_pose(&mut rng), random_pose(&mut rng));
            let a: Vec<[f64; 3]> = pts.iter().map(|p| apply_by_hand(&gt, p)).collect();
            let b: Vec<[f64; 3]> = pts.iter().map(|p| apply_by_hand(&est, p)).collect();
            let want_add = a.iter().zip(&b).map(|(x, y)| dist(*x, *y)).sum::<f64>() / 100.0;
            let mut want_s = 0.0;
            for x in &a {
                let mut best = f64::INFINITY;
                for y in &b {
                    best = best.min(dist(*x, *y));
                }
                want_s += best / 100.0;
            }
            let (got_add, got_s) = (add(&pts, &gt, &est), add_s(&pts, &gt, &est));
            assert!((got_add - want_add).abs() < 1e-9);
            assert!((got_s - want_s).abs() < 1e-9);
            assert!(got_s <= got_add + 1e-12);
            assert!((add(&pts, &est, &gt) - got_add).abs() < 1e-12);
        }
    }

    #[test]
    fn octagon_is_symmetric_under_eighth_turn() {
        let pts: Vec<Vector3<f64>> = (0..8)
            .map(|i| {
                let a = i as f64 * std::f64::consts::FRAC_PI_4;
                Vector3::new(0.05 * a.cos(), 0.05 * a.sin(), 0.0)
            })
            .collect();
        let gt = Pose::new(Quaternion::IDENTITY, Vector3::new(0.0, 0.0, 0.5));
        let turn = Quaternion::from_axis_angle(&Vector3::z(), std::f64::consts::FRAC_PI_4);
        let est = Pose::new(turn, gt.translation);
        assert_eq!(add_s(&pts, &gt, &est), 0.0);
        assert!(add(&pts, &gt, &est) > 0.03);
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(auc(&[0.0; 5], 0.05).unwrap().auc, 1.0);
        assert_eq!(auc(&[0.06, 0.1, 1.0], 0.05).unwrap().auc, 0.0);
        assert_eq!(auc(&[], 0.05), Err(MetricError::Empty));
        assert!(auc(&[0.01], 0.0).is_err());
        assert!(auc(&[f64::NAN], 0.05).is_err());
    }

    /// Midpoint-rule integration of the fraction-below curve.
    fn numeric_auc(errors: &[f64], max_t: f64, steps: usize) -> f64 {
        let dt = max_t / steps as f64;
        let mut area = 0.0;
        for s in 0..steps {
            let t = (s as f64 + 0.5) * dt;
            area += errors.iter().filter(|e| **e <= t).count() as f64 / errors.len() as f64 * dt;
        }
        area / max_t
    }

    #[test]
    fn auc_matches_numeric_integration() {
        let errs = [0.01, 0.02, 0.03, 0.04];
        let c = auc(&errs, 0.05).unwrap();
        // frozen from numeric_auc(&errs, 0.05, 1_000_000)
        assert!((c.auc - 0.5).abs() < 1e-12);
        assert!((numeric_auc(&errs, 0.05, 1_000_000) - 0.5).abs() < 1e-6);
        assert_eq!(c.thresholds, vec![0.0, 0.01, 0.02, 0.03, 0.04, 0.05]);
        assert_eq!(c.fractions, vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.gen_range(1..40);
            let errs: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..0.08) }).collect();
            let exact = errs.iter().map(|e| (0.05 - e.min(0.05)) / 0.05).sum::<f64>() / n as f64;
            let got = auc(&errs, 0.05).unwrap();
            assert!((got.auc - exact).abs() < 1e-9, "{} vs {exact}", got.auc);
            assert!((got.auc - numeric_auc(&errs, 0.05, 20_000)).abs() < 1e-3);
        }
    }

    #[test]
    fn repeated_errors_collapse() {
        let c = auc(&[0.02, 0.02, 0.01], 0.05).unwrap();
        assert_eq!(c.thresholds, vec![0.0, 0.01, 0.02, 0.05]);
        assert!((c.fraction_at(0.015) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.fraction_at(0.02), 1.0);
    }

    proptest! {
        #[test]
        fn curve_invariants(errs in prop::collection::vec(0.0f64..0.1, 1..50), k in 1.0f64..4.0) {
            let c = auc(&errs, 0.05).unwrap();
            prop_assert!(c.fractions.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!((0.0..=1.0).contains(&c.auc));
            let scaled: Vec<f64> = errs.iter().map(|e| e * k).collect();
            prop_assert!(auc(&scaled, 0.05).unwrap().auc <= c.auc + 1e-12);
        }
    }
}
