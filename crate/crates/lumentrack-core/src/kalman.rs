//! Constant-velocity Kalman filter over box state `[cx, cy, h, a, vx, vy, vh]`.
//!
//! Positions and height carry velocities; the aspect ratio `a = w / h` is a
//! random walk. Noise scales follow the usual tracking-by-detection
//! convention: position standard deviations are `pos_weight * h` and velocity
//! standard deviations `vel_weight * h` per step, both for the process noise
//! and for initialization, with a fixed small standard deviation for the
//! aspect channel.

use crate::geometry::BoundingBox;
use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

type State = SVector<f64, 7>;
type Cov = SMatrix<f64, 7, 7>;
type Meas = SVector<f64, 4>;
type MeasCov = SMatrix<f64, 4, 4>;
type Obs = SMatrix<f64, 4, 7>;

/// Lower clamp applied to height and aspect after each update.
pub const MIN_EXTENT: f64 = 1e-3;

/// Kalman failure cases.
#[derive(Debug, Error, PartialEq)]
pub enum KalmanError {
    /// The innovation covariance was not invertible.
    #[error("singular innovation covariance")]
    SingularInnovation,
}

/// Noise scales for the motion filter.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanParams {
    /// Position / height std per step, as a fraction of box height.
    pub pos_weight: f64,
    /// Velocity std per step, as a fraction of box height.
    pub vel_weight: f64,
    /// Fixed std for the aspect channel.
    pub aspect_std: f64,
}

impl Default for KalmanParams {
    fn default() -> Self {
        Self {
            pos_weight: 1.0 / 20.0,
            vel_weight: 1.0 / 160.0,
            aspect_std: 1e-2,
        }
    }
}

/// Constant-velocity box motion filter.
#[derive(Debug, Clone)]
pub struct MotionFilter {
    pub(crate) x: State,
    pub(crate) p: Cov,
    params: KalmanParams,
}

fn transition() -> Cov {
    let mut f = Cov::identity();
    f[(0, 4)] = 1.0;
    f[(1, 5)] = 1.0;
    f[(2, 6)] = 1.0;
    f
}

fn observation() -> Obs {
    let mut h = Obs::zeros();
    h[(0, 0)] = 1.0;
    h[(1, 1)] = 1.0;
    h[(2, 2)] = 1.0;
    h[(3, 3)] = 1.0;
    h
}

fn measurement_of(b: &BoundingBox) -> Meas {
    Meas::new(b.cx, b.cy, b.h, b.w / b.h)
}

impl MotionFilter {
    /// Initialize from a first measurement with zero velocities.
    pub fn init(b: &BoundingBox, params: KalmanParams) -> Self {
        let z = measurement_of(b);
        let mut x = State::zeros();
        x.fixed_rows_mut::<4>(0).copy_from(&z);
        let h = b.h;
        let sp = params.pos_weight * h;
        let sv = params.vel_weight * h;
        let stds = [sp, sp, sp, params.aspect_std, sv, sv, sv];
        let mut p = Cov::zeros();
        for (i, s) in stds.iter().enumerate() {
            p[(i, i)] = s * s;
        }
        Self { x, p, params }
    }

    fn process_noise(&self) -> Cov {
        let h = self.x[2];
        let sp = self.params.pos_weight * h;
        let sv = self.params.vel_weight * h;
        let stds = [sp, sp, sp, self.params.aspect_std, sv, sv, sv];
        let mut q = Cov::zeros();
        for (i, s) in stds.iter().enumerate() {
            q[(i, i)] = s * s;
        }
        q
    }

    fn measurement_noise(&self) -> MeasCov {
        let h = self.x[2];
        let sp = self.params.pos_weight * h;
        let stds = [sp, sp, sp, self.params.aspect_std];
        let mut r = MeasCov::zeros();
        for (i, s) in stds.iter().enumerate() {
            r[(i, i)] = s * s;
        }
        r
    }

    fn symmetrize(&mut self) {
        self.p = (self.p + self.p.transpose()) * 0.5;
    }

    /// Advance one step under the constant-velocity model.
    pub fn predict(&mut self) {
        let q = self.process_noise();
        let f = transition();
        self.x = f * self.x;
        self.p = f * self.p * f.transpose() + q;
        self.symmetrize();
    }

    /// Fold in a measurement. On a singular innovation covariance the state
    /// is left untouched and an error returned.
    pub fn update(&mut self, b: &BoundingBox) -> Result<(), KalmanError> {
        let h = observation();
        let r = self.measurement_noise();
        let s = h * self.p * h.transpose() + r;
        let chol = s.cholesky().ok_or(KalmanError::SingularInnovation)?;
        // K = P H^T S^-1, computed as (S^-1 (H P^T))^T.
        let k = chol.solve(&(h * self.p.transpose())).transpose();
        let y = measurement_of(b) - h * self.x;
        self.x += k * y;
        self.p = (Cov::identity() - k * h) * self.p;
        self.symmetrize();
        self.x[2] = self.x[2].max(MIN_EXTENT);
        self.x[3] = self.x[3].max(MIN_EXTENT);
        Ok(())
    }

    /// Current state rendered as a box (used as the motion prediction).
    pub fn predicted_box(&self) -> BoundingBox {
        let h = self.x[2];
        BoundingBox::new(self.x[0], self.x[1], self.x[3] * h, h)
    }

    /// Position part of the state: `[cx, cy, h, a]`.
    pub fn position(&self) -> [f64; 4] {
        [self.x[0], self.x[1], self.x[2], self.x[3]]
    }

    /// Velocity part of the state: `[vx, vy, vh]`.
    pub fn velocity(&self) -> [f64; 3] {
        [self.x[4], self.x[5], self.x[6]]
    }

    /// Largest absolute asymmetry in the covariance (diagnostic).
    pub fn covariance_asymmetry(&self) -> f64 {
        let d = self.p - self.p.transpose();
        d.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params() -> KalmanParams {
        KalmanParams::default()
    }

    #[test]
    fn init_copies_measurement_with_zero_velocity() {
        let f = MotionFilter::init(&BoundingBox::new(10.0, 20.0, 30.0, 15.0), params());
        assert_eq!(f.position(), [10.0, 20.0, 15.0, 2.0]);
        assert_eq!(f.velocity(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn predict_advances_position_by_velocity() {
        let mut f = MotionFilter::init(&BoundingBox::new(0.0, 0.0, 10.0, 10.0), params());
        f.x[4] = 2.0;
        f.x[5] = 3.0;
        f.x[2] = 10.0;
        f.x[3] = 1.0;
        f.predict();
        let [cx, cy, h, a] = f.position();
        assert_abs_diff_eq!(cx, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cy, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(h, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn stationary_box_is_a_fixed_point_of_prediction() {
        let b = BoundingBox::new(50.0, 60.0, 20.0, 10.0);
        let mut f = MotionFilter::init(&b, params());
        for _ in 0..5 {
            f.predict();
            let p = f.predicted_box();
            assert_abs_diff_eq!(p.cx, b.cx, epsilon = 1e-12);
            assert_abs_diff_eq!(p.cy, b.cy, epsilon = 1e-12);
            assert_abs_diff_eq!(p.w, b.w, epsilon = 1e-12);
            assert_abs_diff_eq!(p.h, b.h, epsilon = 1e-12);
        }
    }

    #[test]
    fn equal_prior_and_measurement_variance_average_the_mean() {
        // Scalar analog: prior mean 0 with variance 1, measurement 1 with
        // variance 1 -> posterior mean 0.5. Realized by forcing P and R to
        // the identity on the cx channel.
        let b = BoundingBox::new(0.0, 0.0, 20.0, 20.0);
        let mut f = MotionFilter::init(&b, KalmanParams {
            pos_weight: 1.0 / 20.0, // h = 20 -> std 1 -> variance 1
            vel_weight: 1e-12,
            aspect_std: 1e-2,
        });
        f.update(&BoundingBox::new(1.0, 0.0, 20.0, 20.0)).unwrap();
        let [cx, ..] = f.position();
        assert_abs_diff_eq!(cx, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn update_with_predicted_measurement_leaves_position_unchanged() {
        let b = BoundingBox::new(12.0, 34.0, 40.0, 20.0);
        let mut f = MotionFilter::init(&b, params());
        f.predict();
        let before = f.position();
        f.update(&f.predicted_box().clone()).unwrap();
        let after = f.position();
        for (x, y) in before.iter().zip(after.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn covariance_stays_symmetric() {
        let mut f = MotionFilter::init(&BoundingBox::new(0.0, 0.0, 16.0, 16.0), params());
        for k in 0..50 {
            f.predict();
            assert!(f.covariance_asymmetry() < 1e-9);
            let z = BoundingBox::new(k as f64 * 1.5, k as f64 * 0.5, 16.0, 16.0);
            f.update(&z).unwrap();
            assert!(f.covariance_asymmetry() < 1e-9);
        }
    }

    #[test]
    fn stays_locked_on_noiseless_constant_velocity_track() {
        // True motion: constant velocity (1.2, -0.8) px/frame, fixed size.
        // Started on-model, the filter must not drift off the exact track.
        let truth = |t: f64| BoundingBox::new(10.0 + 1.2 * t, 90.0 - 0.8 * t, 24.0, 24.0);
        let mut f = MotionFilter::init(&truth(0.0), params());
        f.x[4] = 1.2;
        f.x[5] = -0.8;
        for t in 1..=20 {
            f.predict();
            f.update(&truth(t as f64)).unwrap();
        }
        let b = f.predicted_box();
        let want = truth(20.0);
        let err = ((b.cx - want.cx).powi(2) + (b.cy - want.cy).powi(2)).sqrt();
        assert!(err < 1e-6, "position error {err} after 20 steps");
    }

    #[test]
    fn velocity_estimate_converges_from_cold_start() {
        let truth = |t: f64| BoundingBox::new(10.0 + 1.2 * t, 90.0 - 0.8 * t, 24.0, 24.0);
        let mut f = MotionFilter::init(&truth(0.0), params());
        let err_at = |f: &MotionFilter, t: f64| {
            let b = f.predicted_box();
            let w = truth(t);
            ((b.cx - w.cx).powi(2) + (b.cy - w.cy).powi(2)).sqrt()
        };
        let mut early = 0.0;
        for t in 1..=120 {
            f.predict();
            f.update(&truth(t as f64)).unwrap();
            if t == 5 {
                early = err_at(&f, 5.0);
            }
        }
        let late = err_at(&f, 120.0);
        assert!(
            late < early / 10.0 && late < 0.05,
            "tracking error should shrink: early {early}, late {late}"
        );
    }

    #[test]
    fn height_and_aspect_are_clamped_after_update() {
        let mut f = MotionFilter::init(&BoundingBox::new(0.0, 0.0, 1.0, 1.0), params());
        // Drive the height toward zero with shrinking measurements.
        for _ in 0..200 {
            f.predict();
            f.update(&BoundingBox::new(0.0, 0.0, 1e-6, 1e-6)).unwrap();
        }
        let [.., h, a] = f.position();
        assert!(h >= MIN_EXTENT);
        assert!(a > 0.0);
    }

    #[test]
    fn zero_noise_scales_yield_singular_innovation() {
        let degenerate = KalmanParams {
            pos_weight: 0.0,
            vel_weight: 0.0,
            aspect_std: 0.0,
        };
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let mut f = MotionFilter::init(&b, degenerate);
        assert_eq!(f.update(&b), Err(KalmanError::SingularInnovation));
    }
}
