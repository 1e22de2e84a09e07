use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::CameraError;

/// Upper bound on the half field of view of any fisheye lens (170 degrees).
pub const THETA_CAP: f64 = std::f64::consts::PI * 170.0 / 180.0;

/// Step used when sampling the distortion polynomial for monotonicity.
const MONOTONICITY_STEP: f64 = 1e-3;

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraKind {
    /// Equidistant fisheye with a four-term odd radial polynomial.
    FisheyeEquidistantPoly,
    Pinhole,
}

/// Camera intrinsics for the equidistant-polynomial fisheye and pinhole models.
///
/// Pixel centers sit at integer coordinates, so the image covers
/// `[-0.5, width - 0.5) x [-0.5, height - 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Intrinsics {
    model: CameraKind,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    k: [f64; 4],
    width: u32,
    height: u32,
    theta_max: f64,
}

impl Intrinsics {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: CameraKind,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        k: [f64; 4],
        width: u32,
        height: u32,
    ) -> Result<Self, CameraError> {
        let bad = |msg: String| Err(CameraError::InvalidIntrinsics(msg));
        let all = [fx, fy, cx, cy, k[0], k[1], k[2], k[3]];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter".into());
        }
        if !(fx > 0.0 && fy > 0.0) {
            return bad(format!("focal lengths must be positive, got fx={fx} fy={fy}"));
        }
        if width == 0 || height == 0 {
            return bad(format!("empty sensor {width}x{height}"));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return bad(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} sensor"
            ));
        }
        if model == CameraKind::Pinhole && k != [0.0; 4] {
            return bad("pinhole model must have zero distortion".into());
        }
        let mut intr = Intrinsics {
            model,
            fx,
            fy,
            cx,
            cy,
            k,
            width,
            height,
            theta_max: std::f64::consts::FRAC_PI_2,
        };
        if model == CameraKind::FisheyeEquidistantPoly {
            intr.theta_max = intr.compute_theta_max()?;
        }
        Ok(intr)
    }

    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, CameraError> {
        Self::new(CameraKind::Pinhole, fx, fy, cx, cy, [0.0; 4], width, height)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn fisheye(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        k: [f64; 4],
        width: u32,
        height: u32,
    ) -> Result<Self, CameraError> {
        Self::new(CameraKind::FisheyeEquidistantPoly, fx, fy, cx, cy, k, width, height)
    }

    pub fn model(&self) -> CameraKind {
        self.model
    }
    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn distortion(&self) -> [f64; 4] {
        self.k
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }

    /// Largest admissible angle from the optical axis. For fisheye lenses
    /// this is the half diagonal field of view; for pinholes it is 90 degrees
    /// (exclusive).
    pub fn theta_max(&self) -> f64 {
        self.theta_max
    }

    /// Distortion polynomial `d(theta) = theta (1 + k1 t^2 + k2 t^4 + k3 t^6 + k4 t^8)`.
    pub fn distort_theta(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        let [k1, k2, k3, k4] = self.k;
        theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))
    }

    fn distort_theta_derivative(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        let [k1, k2, k3, k4] = self.k;
        1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)))
    }

    /// Whether a pixel lies inside the sensor.
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= -0.5
            && pixel.y >= -0.5
            && pixel.x < self.width as f64 - 0.5
            && pixel.y < self.height as f64 - 0.5
    }

    fn corner_radius(&self) -> f64 {
        let xs = [-0.5, self.width as f64 - 0.5];
        let ys = [-0.5, self.height as f64 - 0.5];
        let mut r: f64 = 0.0;
        for x in xs {
            for y in ys {
                r = r.max(((x - self.cx) / self.fx).hypot((y - self.cy) / self.fy));
            }
        }
        r
    }

    /// Walks `d(theta)` from the axis until it reaches the farthest sensor
    /// corner, rejecting any non-increasing stretch on the way.
    fn compute_theta_max(&self) -> Result<f64, CameraError> {
        let r_corner = self.corner_radius();
        let mut prev_theta = 0.0;
        let mut prev_d = 0.0;
        let steps = (THETA_CAP / MONOTONICITY_STEP).ceil() as usize;
        for i in 1..=steps {
            let theta = (i as f64 * MONOTONICITY_STEP).min(THETA_CAP);
            let d = self.distort_theta(theta);
            if d <= prev_d || self.distort_theta_derivative(theta) <= 0.0 {
                return Err(CameraError::NonMonotoneDistortion { theta });
            }
            if d >= r_corner {
                // Bisect inside the last bracket for the exact crossing.
                let (mut lo, mut hi) = (prev_theta, theta);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if self.distort_theta(mid) < r_corner {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Ok(hi);
            }
            prev_theta = theta;
            prev_d = d;
        }
        Ok(THETA_CAP)
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(&self, point: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        match self.model {
            CameraKind::Pinhole => {
                if point.z <= 0.0 {
                    return Err(CameraError::PointBehindCamera);
                }
                Ok(Vector2::new(
                    self.cx + self.fx * point.x / point.z,
                    self.cy + self.fy * point.y / point.z,
                ))
            }
            CameraKind::FisheyeEquidistantPoly => {
                let rho = point.x.hypot(point.y);
                if rho == 0.0 {
                    if point.z > 0.0 {
                        return Ok(Vector2::new(self.cx, self.cy));
                    }
                    return Err(CameraError::OutsideFieldOfView);
                }
                let theta = rho.atan2(point.z);
                if theta >= self.theta_max {
                    return Err(CameraError::OutsideFieldOfView);
                }
                let scale = self.distort_theta(theta) / rho;
                Ok(Vector2::new(
                    self.cx + self.fx * scale * point.x,
                    self.cy + self.fy * scale * point.y,
                ))
            }
        }
    }

    /// Lifts a pixel to a unit bearing ray in the camera frame.
    pub fn unproject(&self, pixel: &Vector2<f64>) -> Result<Vector3<f64>, CameraError> {
        if !pixel.x.is_finite() || !pixel.y.is_finite() || !self.contains(pixel) {
            return Err(CameraError::OutsideImage);
        }
        let mx = (pixel.x - self.cx) / self.fx;
        let my = (pixel.y - self.cy) / self.fy;
        match self.model {
            CameraKind::Pinhole => Ok(Vector3::new(mx, my, 1.0).normalize()),
            CameraKind::FisheyeEquidistantPoly => {
                let r = mx.hypot(my);
                if r == 0.0 {
                    return Ok(Vector3::z());
                }
                if r > self.distort_theta(self.theta_max) {
                    return Err(CameraError::OutsideFieldOfView);
                }
                let theta = self.invert_distortion(r)?;
                let s = theta.sin() / r;
                Ok(Vector3::new(s * mx, s * my, theta.cos()))
            }
        }
    }

    /// Solves `d(theta) = r` on `[0, theta_max]` by Newton iteration kept
    /// inside a shrinking bracket.
    pub fn invert_distortion(&self, r: f64) -> Result<f64, CameraError> {
        let (mut lo, mut hi) = (0.0, self.theta_max);
        let mut theta = r.clamp(lo, hi);
        for _ in 0..NEWTON_MAX_ITERS {
            let f = self.distort_theta(theta) - r;
            if f == 0.0 {
                return Ok(theta);
            }
            if f < 0.0 {
                lo = theta;
            } else {
                hi = theta;
            }
            let slope = self.distort_theta_derivative(theta);
            let mut next = theta - f / slope;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            let step = (next - theta).abs();
            theta = next;
            if step < NEWTON_TOL {
                return Ok(theta);
            }
        }
        Err(CameraError::NoConvergence { radius: r })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_4, PI};

    fn fisheye_plain() -> Intrinsics {
        Intrinsics::fisheye(200.0, 200.0, 512.0, 512.0, [0.0; 4], 1024, 1024).unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let p = Vector3::new(0.0, 0.0, 1.0);
        for intr in [
            fisheye_plain(),
            Intrinsics::pinhole(100.0, 100.0, 128.0, 128.0, 256, 256).unwrap(),
        ] {
            assert_eq!(intr.project(&p).unwrap(), Vector2::new(intr.cx(), intr.cy()));
        }
    }

    #[test]
    fn pinhole_behind_camera() {
        let intr = Intrinsics::pinhole(100.0, 100.0, 128.0, 128.0, 256, 256).unwrap();
        assert!(matches!(
            intr.project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(CameraError::PointBehindCamera)
        ));
    }

    #[test]
    fn fisheye_forty_five_degrees() {
        let intr = fisheye_plain();
        let px = intr.project(&Vector3::new(1.0, 0.0, 1.0)).unwrap();
        // 512 + 200 * pi / 4
        assert!((px.x - 669.079_632_679_489_7).abs() < 1e-9);
        assert!((px.y - 512.0).abs() < 1e-12);

        let ray = intr.unproject(&Vector2::new(512.0 + 200.0 * FRAC_PI_4, 512.0)).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((ray - Vector3::new(h, 0.0, h)).norm() < 1e-12);
    }

    #[test]
    fn principal_point_unprojects_to_axis() {
        let intr = fisheye_plain();
        assert_eq!(intr.unproject(&Vector2::new(512.0, 512.0)).unwrap(), Vector3::z());
    }

    #[test]
    fn outside_image_rejected() {
        let intr = fisheye_plain();
        assert!(matches!(
            intr.unproject(&Vector2::new(-3.0, 10.0)),
            Err(CameraError::OutsideImage)
        ));
    }

    #[test]
    fn fov_limit_enforced() {
        let intr = Intrinsics::fisheye(150.0, 150.0, 100.0, 100.0, [0.0; 4], 200, 200).unwrap();
        // Farthest corner at hypot(100.5, 100.5) / 150 rad.
        let expected = (100.5f64).hypot(100.5) / 150.0;
        assert!((intr.theta_max() - expected).abs() < 1e-12);
        let beyond = expected + 0.01;
        let p = Vector3::new(beyond.sin(), 0.0, beyond.cos());
        assert!(matches!(intr.project(&p), Err(CameraError::OutsideFieldOfView)));
    }

    #[test]
    fn wide_lens_capped() {
        let intr = fisheye_plain();
        assert_eq!(intr.theta_max(), THETA_CAP);
        assert!(intr.theta_max() < PI);
    }

    #[test]
    fn non_monotone_distortion_rejected() {
        // d'(theta) = 1 - 3 theta^2 vanishes near 0.577 rad.
        let err = Intrinsics::fisheye(300.0, 300.0, 640.0, 512.0, [-1.0, 0.0, 0.0, 0.0], 1280, 1024)
            .unwrap_err();
        assert!(matches!(err, CameraError::NonMonotoneDistortion { .. }));
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(Intrinsics::pinhole(-1.0, 100.0, 10.0, 10.0, 20, 20).is_err());
        assert!(Intrinsics::pinhole(100.0, 100.0, 30.0, 10.0, 20, 20).is_err());
        assert!(Intrinsics::new(CameraKind::Pinhole, 1.0, 1.0, 1.0, 1.0, [0.1, 0.0, 0.0, 0.0], 4, 4).is_err());
    }

    #[test]
    fn projection_continuous_at_axis() {
        let intr = Intrinsics::fisheye(300.0, 310.0, 640.0, 512.0, [0.02, -0.005, 0.0008, 0.0], 1280, 1024)
            .unwrap();
        for eps in [1e-3, 1e-6, 1e-9, 1e-12] {
            let px = intr.project(&Vector3::new(eps, -eps, 1.0)).unwrap();
            assert!((px - Vector2::new(640.0, 512.0)).norm() < 400.0 * eps * 2.0);
        }
    }
}
