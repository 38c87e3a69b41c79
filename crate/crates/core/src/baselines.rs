//! Reference motion models: a constant-velocity Kalman filter over
//! `(cx, cy, aspect, h)` in the SORT/ByteTrack lineage, and the no-motion
//! predictor that repeats the last box.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

type Vec8 = SVector<f64, 8>;
type Mat8 = SMatrix<f64, 8, 8>;
type Vec4 = SVector<f64, 4>;
type Mat4 = SMatrix<f64, 4, 4>;
type Mat48 = SMatrix<f64, 4, 8>;

/// Noise scales. Position and velocity standard deviations are proportional
/// to the box height; the aspect ratio gets fixed small deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KalmanConfig {
    pub std_weight_position: f64,
    pub std_weight_velocity: f64,
    pub std_aspect: f64,
    pub std_aspect_velocity: f64,
    pub std_aspect_measurement: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            std_weight_position: 1.0 / 20.0,
            std_weight_velocity: 1.0 / 160.0,
            std_aspect: 1e-2,
            std_aspect_velocity: 1e-5,
            std_aspect_measurement: 1e-1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanState {
    /// `(cx, cy, a, h, vcx, vcy, va, vh)`
    pub mean: Vec8,
    pub covariance: Mat8,
}

impl KalmanState {
    pub fn bbox(&self) -> BBox {
        let (cx, cy, a, h) = (self.mean[0], self.mean[1], self.mean[2], self.mean[3]);
        BBox { cx, cy, w: (a * h).max(crate::geometry::MIN_DIM), h: h.max(crate::geometry::MIN_DIM) }
    }

    /// Whether the covariance admits a Cholesky factorization (after
    /// symmetrization), i.e. is positive definite.
    pub fn covariance_is_pd(&self) -> bool {
        let sym = 0.5 * (self.covariance + self.covariance.transpose());
        sym.cholesky().is_some()
    }
}

fn measurement(b: &BBox) -> Vec4 {
    Vec4::new(b.cx, b.cy, b.aspect(), b.h)
}

fn transition() -> Mat8 {
    let mut f = Mat8::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

fn observation() -> Mat48 {
    let mut h = Mat48::zeros();
    for i in 0..4 {
        h[(i, i)] = 1.0;
    }
    h
}

impl KalmanConfig {
    pub fn init(&self, b: &BBox) -> KalmanState {
        let mut mean = Vec8::zeros();
        mean.fixed_rows_mut::<4>(0).copy_from(&measurement(b));
        let (p, v) = (self.std_weight_position * b.h, self.std_weight_velocity * b.h);
        let std = [2.0 * p, 2.0 * p, self.std_aspect, 2.0 * p, 10.0 * v, 10.0 * v, self.std_aspect_velocity, 10.0 * v];
        KalmanState { mean, covariance: Mat8::from_diagonal(&Vec8::from_iterator(std.iter().map(|s| s * s))) }
    }

    /// Advance one frame under constant velocity. Returns the new state and its box.
    pub fn predict(&self, s: &KalmanState) -> (KalmanState, BBox) {
        let h = s.mean[3];
        let (p, v) = (self.std_weight_position * h, self.std_weight_velocity * h);
        let std = [p, p, self.std_aspect, p, v, v, self.std_aspect_velocity, v];
        let q = Mat8::from_diagonal(&Vec8::from_iterator(std.iter().map(|s| s * s)));
        let f = transition();
        let mean = f * s.mean;
        let cov = f * s.covariance * f.transpose() + q;
        let next = KalmanState { mean, covariance: 0.5 * (cov + cov.transpose()) };
        (next, next.bbox())
    }

    /// Correct the state with a measured box.
    pub fn update(&self, s: &KalmanState, z: &BBox) -> Result<KalmanState> {
        let h = s.mean[3];
        let p = self.std_weight_position * h;
        let std = [p, p, self.std_aspect_measurement, p];
        let r = Mat4::from_diagonal(&Vec4::from_iterator(std.iter().map(|s| s * s)));
        let hm = observation();
        let innov_cov = hm * s.covariance * hm.transpose() + r;
        let chol = innov_cov.cholesky().ok_or_else(|| {
            Error::Numerical(format!(
                "innovation covariance not positive definite; diag = {:?}, state mean = {:?}",
                innov_cov.diagonal().as_slice(),
                s.mean.as_slice()
            ))
        })?;
        // K = P Hᵀ S⁻¹, computed as (S⁻¹ H P)ᵀ since S and P are symmetric.
        let gain = chol.solve(&(hm * s.covariance)).transpose();
        let innovation = measurement(z) - hm * s.mean;
        let mean = s.mean + gain * innovation;
        let cov = s.covariance - gain * innov_cov * gain.transpose();
        Ok(KalmanState { mean, covariance: 0.5 * (cov + cov.transpose()) })
    }
}

pub fn no_motion_predict(last: &BBox) -> BBox {
    *last
}
