use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// Pinhole camera. Camera space follows the usual vision convention:
/// x right, y down, z forward; pixel centers sit at half-integer
/// coordinates so the image center is `(w/2, h/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vector3<f64>,
    pub look_at: Vector3<f64>,
    pub up: Vector3<f64>,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CameraError {
    #[error("fov_y must lie in (0, pi), got {0}")]
    Fov(f64),
    #[error("resolution must be at least 8x8, got {0}x{1}")]
    Resolution(usize, usize),
    #[error("near ({0}) must be positive and below far ({1})")]
    Clip(f64, f64),
    #[error("view direction is degenerate (zero length or parallel to up)")]
    Degenerate,
}

impl Camera {
    pub fn new(
        position: Vector3<f64>,
        look_at: Vector3<f64>,
        up: Vector3<f64>,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Self {
        Camera {
            position,
            look_at,
            up,
            fov_y,
            width,
            height,
            near: 0.01,
            far: 100.0,
        }
    }

    /// Camera on a z-up orbit around `center`. Azimuth 0 looks from -y
    /// toward +y; positive elevation is above the center.
    pub fn orbit(
        center: Vector3<f64>,
        radius: f64,
        azimuth_deg: f64,
        elevation_deg: f64,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let offset = Vector3::new(el.cos() * az.sin(), -el.cos() * az.cos(), el.sin()) * radius;
        Camera::new(center + offset, center, Vector3::z(), fov_y, width, height)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(CameraError::Fov(self.fov_y));
        }
        if self.width < 8 || self.height < 8 {
            return Err(CameraError::Resolution(self.width, self.height));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(CameraError::Clip(self.near, self.far));
        }
        let f = self.look_at - self.position;
        if f.norm() == 0.0 || f.cross(&self.up).norm() < 1e-12 * f.norm() * self.up.norm() {
            return Err(CameraError::Degenerate);
        }
        Ok(())
    }

    /// World-to-camera rotation; rows are the right, down and forward axes.
    pub fn rotation(&self) -> Matrix3<f64> {
        let forward = (self.look_at - self.position).normalize();
        let right = forward.cross(&self.up).normalize();
        let down = forward.cross(&right);
        Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()])
    }

    /// Focal length in pixels (square pixels).
    pub fn focal(&self) -> f64 {
        self.height as f64 / 2.0 / (self.fov_y / 2.0).tan()
    }

    pub fn principal_point(&self) -> Vector2<f64> {
        Vector2::new(self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * (p - self.position)
    }

    /// Pixel coordinates of a camera-space point with `z > 0`.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Vector2<f64> {
        let f = self.focal();
        self.principal_point() + Vector2::new(f * p_cam.x / p_cam.z, f * p_cam.y / p_cam.z)
    }

    pub fn with_resolution(mut self, width: usize, height: usize) -> Self {
        self.width = width;
        self.height = height;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_is_orthonormal_and_looks_forward() {
        let cam = Camera::orbit(Vector3::new(0.5, 0.5, 0.5), 2.2, 37.0, 20.0, 0.8, 32, 32);
        let r = cam.rotation();
        assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        let c = cam.world_to_camera(&cam.look_at);
        assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12 && (c.z - 2.2).abs() < 1e-12);
    }

    #[test]
    fn up_projects_upward_in_the_image() {
        let cam = Camera::orbit(Vector3::zeros(), 2.0, 0.0, 0.0, 0.8, 32, 32);
        let above = cam.project(&cam.world_to_camera(&Vector3::new(0.0, 0.0, 0.3)));
        assert!(above.y < 16.0);
        let right = cam.project(&cam.world_to_camera(&Vector3::new(0.3, 0.0, 0.0)));
        assert!(right.x > 16.0);
    }

    #[test]
    fn invalid_cameras() {
        let mut cam = Camera::orbit(Vector3::zeros(), 2.0, 0.0, 0.0, 0.8, 32, 32);
        cam.fov_y = 3.2;
        assert_eq!(cam.validate(), Err(CameraError::Fov(3.2)));
        let cam = Camera::orbit(Vector3::zeros(), 2.0, 0.0, 0.0, 0.8, 4, 32);
        assert!(cam.validate().is_err());
        let cam = Camera::new(Vector3::zeros(), Vector3::z(), Vector3::z(), 0.8, 32, 32);
        assert_eq!(cam.validate(), Err(CameraError::Degenerate));
    }
}
