//! Measurement functions and their Jacobians.

use nalgebra::{Matrix2x3, Matrix3};

use super::{MeasurementModel, Point2, Pose2};

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}

/// Predicted odometry from pose `a` to pose `b`, with Jacobians with
/// respect to `a` and `b`.
pub fn odometry(model: MeasurementModel, a: &Pose2, b: &Pose2) -> ([f64; 3], Matrix3<f64>, Matrix3<f64>) {
    match model {
        MeasurementModel::Linear => (
            [b[0] - a[0], b[1] - a[1], b[2] - a[2]],
            -Matrix3::identity(),
            Matrix3::identity(),
        ),
        MeasurementModel::Nonlinear2d => {
            let (c, s) = (a[2].cos(), a[2].sin());
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let z = [c * dx + s * dy, -s * dx + c * dy, wrap_angle(b[2] - a[2])];
            #[rustfmt::skip]
            let ja = Matrix3::new(
                -c, -s, -s * dx + c * dy,
                 s, -c, -c * dx - s * dy,
                0.0, 0.0, -1.0,
            );
            #[rustfmt::skip]
            let jb = Matrix3::new(
                 c, s, 0.0,
                -s, c, 0.0,
                0.0, 0.0, 1.0,
            );
            (z, ja, jb)
        }
    }
}

/// Pose `a` moved by odometry `u`.
pub fn compose(model: MeasurementModel, a: &Pose2, u: &[f64; 3]) -> Pose2 {
    match model {
        MeasurementModel::Linear => [a[0] + u[0], a[1] + u[1], a[2] + u[2]],
        MeasurementModel::Nonlinear2d => {
            let (c, s) = (a[2].cos(), a[2].sin());
            [a[0] + c * u[0] - s * u[1], a[1] + s * u[0] + c * u[1], wrap_angle(a[2] + u[2])]
        }
    }
}

/// Predicted observation of landmark `f` from pose `p`, with Jacobians with
/// respect to `p` and `f`.
pub fn observation(model: MeasurementModel, p: &Pose2, f: &Point2) -> ([f64; 2], Matrix2x3<f64>, nalgebra::Matrix2<f64>) {
    let (dx, dy) = (f[0] - p[0], f[1] - p[1]);
    match model {
        MeasurementModel::Linear => {
            #[rustfmt::skip]
            let jp = Matrix2x3::new(
                -1.0, 0.0, 0.0,
                0.0, -1.0, 0.0,
            );
            ([dx, dy], jp, nalgebra::Matrix2::identity())
        }
        MeasurementModel::Nonlinear2d => {
            let q = dx * dx + dy * dy;
            let r = q.sqrt();
            let z = [r, wrap_angle(dy.atan2(dx) - p[2])];
            #[rustfmt::skip]
            let jf = nalgebra::Matrix2::new(
                dx / r, dy / r,
                -dy / q, dx / q,
            );
            #[rustfmt::skip]
            let jp = Matrix2x3::new(
                -dx / r, -dy / r, 0.0,
                dy / q, -dx / q, -1.0,
            );
            (z, jp, jf)
        }
    }
}

/// Landmark position implied by observation `z` from pose `p`.
pub fn invert_observation(model: MeasurementModel, p: &Pose2, z: &[f64; 2]) -> Point2 {
    match model {
        MeasurementModel::Linear => [p[0] + z[0], p[1] + z[1]],
        MeasurementModel::Nonlinear2d => {
            let a = p[2] + z[1];
            [p[0] + z[0] * a.cos(), p[1] + z[0] * a.sin()]
        }
    }
}

/// Difference `z − h` with angle components wrapped under the nonlinear model.
pub fn innovation<const N: usize>(model: MeasurementModel, z: &[f64; N], h: &[f64; N], angle: Option<usize>) -> [f64; N] {
    let mut d = [0.0; N];
    for i in 0..N {
        d[i] = z[i] - h[i];
    }
    if let (MeasurementModel::Nonlinear2d, Some(i)) = (model, angle) {
        d[i] = wrap_angle(d[i]);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd<const N: usize, const M: usize>(f: impl Fn(&[f64; N]) -> [f64; M], x: &[f64; N], angle: Option<usize>) -> [[f64; N]; M] {
        let h = 1e-6;
        let mut j = [[0.0; N]; M];
        for k in 0..N {
            let (mut a, mut b) = (*x, *x);
            a[k] += h;
            b[k] -= h;
            let (fa, fb) = (f(&a), f(&b));
            for i in 0..M {
                let mut d = fa[i] - fb[i];
                if Some(i) == angle {
                    d = wrap_angle(d);
                }
                j[i][k] = d / (2.0 * h);
            }
        }
        j
    }

    #[test]
    fn wrapping_is_half_open() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = MeasurementModel::Nonlinear2d;
        for _ in 0..100 {
            let mut draw = || rng.random_range(-3.0..3.0);
            let a: Pose2 = [draw(), draw(), draw()];
            let b: Pose2 = [draw(), draw(), draw()];
            let f: Point2 = [a[0] + 0.5 + draw().abs(), a[1] + draw()];
            let (_, ja, jb) = odometry(m, &a, &b);
            let na = fd(|x| odometry(m, x, &b).0, &a, Some(2));
            let nb = fd(|x| odometry(m, &a, x).0, &b, Some(2));
            let (_, jp, jf) = observation(m, &a, &f);
            let np = fd(|x| observation(m, x, &f).0, &a, Some(1));
            let nf = fd(|x| observation(m, &a, x).0, &f, Some(1));
            for i in 0..3 {
                for k in 0..3 {
                    assert!((ja[(i, k)] - na[i][k]).abs() < 1e-6);
                    assert!((jb[(i, k)] - nb[i][k]).abs() < 1e-6);
                }
            }
            for i in 0..2 {
                for k in 0..3 {
                    assert!((jp[(i, k)] - np[i][k]).abs() < 1e-6);
                }
                for k in 0..2 {
                    assert!((jf[(i, k)] - nf[i][k]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn compose_and_invert_undo_the_predictions() {
        for m in [MeasurementModel::Linear, MeasurementModel::Nonlinear2d] {
            let a = [1.0, -2.0, 0.7];
            let b = [1.5, -1.0, 1.9];
            let (u, _, _) = odometry(m, &a, &b);
            let c = compose(m, &a, &u);
            assert!(c.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
            let f = [3.0, 0.5];
            let (z, _, _) = observation(m, &a, &f);
            let g = invert_observation(m, &a, &z);
            assert!((g[0] - f[0]).abs() < 1e-12 && (g[1] - f[1]).abs() < 1e-12);
        }
    }
}
