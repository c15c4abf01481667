//! Pinhole camera model. Depth is z-depth along the optical axis, and pixel
//! `(u, v)` is sampled at its center `(u + 0.5, v + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self::desk()
    }
}

impl Intrinsics {
    /// 160×120 main camera.
    pub fn desk() -> Self {
        Self { width: 160, height: 120, fx: 160.0, fy: 160.0, cx: 80.0, cy: 60.0 }
    }

    /// 640×480 main camera with the same field of view as [`Intrinsics::desk`].
    pub fn paper_scale() -> Self {
        Self { width: 640, height: 480, fx: 640.0, fy: 640.0, cx: 320.0, cy: 240.0 }
    }

    /// Square camera with the given full field of view.
    pub fn square(size: usize, fov_rad: f64) -> Self {
        let f = size as f64 / 2.0 / (fov_rad / 2.0).tan();
        let c = size as f64 / 2.0;
        Self { width: size, height: size, fx: f, fy: f, cx: c, cy: c }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Ray direction through the center of pixel `(u, v)`, scaled so its z
    /// component is 1; the hit parameter is then the z-depth.
    pub fn ray(&self, u: usize, v: usize) -> Vec3 {
        Vec3::new((u as f64 + 0.5 - self.cx) / self.fx, (v as f64 + 0.5 - self.cy) / self.fy, 1.0)
    }

    pub fn backproject(&self, u: usize, v: usize, depth: f64) -> Vec3 {
        self.ray(u, v) * depth
    }

    /// Pixel containing the projection of `p`, if in front and inside the image.
    pub fn project(&self, p: &Vec3) -> Option<(usize, usize)> {
        if p.z <= 0.0 {
            return None;
        }
        let u = (self.fx * p.x / p.z + self.cx).floor();
        let v = (self.fy * p.y / p.z + self.cy).floor();
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some((u as usize, v as usize))
    }
}
