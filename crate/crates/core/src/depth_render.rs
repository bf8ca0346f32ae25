//! Pinhole-camera z-buffer rendering of meshes into depth buffers, and the
//! 8-bit "black is close, white is far" quantization.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Vec3};
use crate::mesh_io::{morph_mesh, Mesh, MeshError, MorphParams};

pub const DISTANCE_RANGE: (f64, f64) = (1.8, 3.5);
pub const FOV_RANGE: (f64, f64) = (30.0, 60.0);
pub const DEFAULT_RESOLUTION: usize = 128;
/// Gray level of the farthest object pixel.
pub const OBJECT_MAX_GRAY: u8 = 230;
pub const BACKGROUND: u8 = 255;

const NEAR_PLANE: f64 = 1e-3;
const BUFFER_MAGIC: &[u8; 4] = b"DFDB";

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("render resolution must be non-zero, got {0}x{1}")]
    ZeroResolution(usize, usize),
    #[error("depth buffer has no finite pixel")]
    AllBackground,
    #[error("invalid camera config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("i/o error: {0}")]
    Io(String),
}

/// One point of the rendering configuration space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    /// Camera distance in multiples of the bounding-sphere radius.
    pub distance: f64,
    /// Vertical field of view in degrees.
    pub fov_deg: f64,
    /// Unit direction from the object origin to the camera.
    pub sphere_dir: Vec3,
    pub morph: MorphParams,
}

impl CameraConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |m: String| Err(RenderError::InvalidConfig(m));
        if !(DISTANCE_RANGE.0..=DISTANCE_RANGE.1).contains(&self.distance) {
            return bad(format!("distance {} outside {:?}", self.distance, DISTANCE_RANGE));
        }
        if !(FOV_RANGE.0..=FOV_RANGE.1).contains(&self.fov_deg) {
            return bad(format!("fov {} outside {:?}", self.fov_deg, FOV_RANGE));
        }
        if (geom::norm(self.sphere_dir) - 1.0).abs() > 1e-9 {
            return bad("sphere_dir is not a unit vector".into());
        }
        self.morph.validate()?;
        Ok(())
    }
}

/// Look-at camera with a symmetric perspective frustum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub position: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
    /// tan(fov / 2), the vertical half-extent of the image plane at depth 1.
    pub tan_half_fov: f64,
}

impl Camera {
    /// World-to-view rotation; rows are right, up, forward.
    pub fn rotation(&self) -> [Vec3; 3] {
        [self.right, self.up, self.forward]
    }

    /// View-space coordinates; the third component is depth along the view axis.
    #[inline]
    pub fn to_view(&self, p: Vec3) -> Vec3 {
        let d = geom::sub(p, self.position);
        [
            geom::dot(d, self.right),
            geom::dot(d, self.up),
            geom::dot(d, self.forward),
        ]
    }

    /// Continuous pixel coordinates of a view-space point with depth > 0.
    /// Pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
    #[inline]
    pub fn project(&self, view: Vec3, width: usize, height: usize) -> (f64, f64) {
        let t = self.tan_half_fov;
        let aspect = width as f64 / height as f64;
        let nx = view[0] / (view[2] * t * aspect);
        let ny = view[1] / (view[2] * t);
        (
            (nx + 1.0) * 0.5 * width as f64,
            (1.0 - ny) * 0.5 * height as f64,
        )
    }

    /// View-space direction (depth component 1) of the ray through a pixel center.
    pub fn pixel_ray(&self, px: usize, py: usize, width: usize, height: usize) -> Vec3 {
        let t = self.tan_half_fov;
        let aspect = width as f64 / height as f64;
        let nx = 2.0 * (px as f64 + 0.5) / width as f64 - 1.0;
        let ny = 1.0 - 2.0 * (py as f64 + 0.5) / height as f64;
        [nx * t * aspect, ny * t, 1.0]
    }
}

/// Places the camera at `distance * radius` along `sphere_dir`, looking at
/// the origin with world +Z up (+Y near the poles).
pub fn camera_from_config(cfg: &CameraConfig, radius: f64) -> Camera {
    let dir = geom::normalize(cfg.sphere_dir);
    let position = geom::scale(dir, cfg.distance * radius);
    let forward = geom::scale(dir, -1.0);
    let world_up = if dir[2].abs() > 0.999 {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let right = geom::normalize(geom::cross(forward, world_up));
    let up = geom::cross(right, forward);
    Camera {
        position,
        right,
        up,
        forward,
        tan_half_fov: (cfg.fov_deg.to_radians() / 2.0).tan(),
    }
}

/// Per-pixel view-axis depth; background pixels hold `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthBuffer {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
}

impl DepthBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        DepthBuffer {
            width,
            height,
            depth: vec![f64::INFINITY; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    pub fn finite_count(&self) -> usize {
        self.depth.iter().filter(|d| d.is_finite()).count()
    }

    /// Flat dump: 16-byte header (magic, width, height, reserved) followed by
    /// little-endian `f32` depths in row-major order.
    pub fn write_raw<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(BUFFER_MAGIC)?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        for &d in &self.depth {
            w.write_all(&(d as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_raw<R: Read>(mut r: R) -> Result<Self, RenderError> {
        let io = |e: std::io::Error| RenderError::Io(e.to_string());
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(io)?;
        if &header[0..4] != BUFFER_MAGIC {
            return Err(RenderError::Io("bad depth buffer magic".into()));
        }
        let width = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let mut bytes = vec![0u8; width * height * 4];
        r.read_exact(&mut bytes).map_err(io)?;
        let depth = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(DepthBuffer {
            width,
            height,
            depth,
        })
    }
}

/// 8-bit depth image. Object pixels are darker the closer they are; the
/// background is 255.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub gray: Vec<u8>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, gray: Vec<u8>) -> Self {
        assert_eq!(gray.len(), width * height, "gray buffer size mismatch");
        DepthImage {
            width,
            height,
            gray,
        }
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.gray[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.gray[y * self.width + x] = v;
    }

    pub fn object_pixels(&self) -> impl Iterator<Item = u8> + '_ {
        self.gray.iter().copied().filter(|&g| g < BACKGROUND)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RenderError> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.gray.clone())
            .expect("buffer size checked at construction");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| RenderError::Io(format!("{}: {e}", path.display())))
    }

    /// Loads any image file, converting to 8-bit luma.
    pub fn load(path: &Path) -> Result<Self, RenderError> {
        let img = image::open(path)
            .map_err(|e| RenderError::Io(format!("{}: {e}", path.display())))?
            .into_luma8();
        let (w, h) = img.dimensions();
        Ok(DepthImage::new(w as usize, h as usize, img.into_raw()))
    }
}

fn clip_near(poly: &[Vec3]) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(4);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let a_in = a[2] >= NEAR_PLANE;
        let b_in = b[2] >= NEAR_PLANE;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (NEAR_PLANE - a[2]) / (b[2] - a[2]);
            out.push(geom::add(a, geom::scale(geom::sub(b, a), t)));
        }
    }
    out
}

/// Rasterizes one view-space triangle (all depths ≥ near) into `buf`.
fn raster_triangle(buf: &mut DepthBuffer, cam: &Camera, tri: [Vec3; 3]) {
    let (w, h) = (buf.width, buf.height);
    let s: Vec<(f64, f64)> = tri.iter().map(|&p| cam.project(p, w, h)).collect();
    let inv_z = [1.0 / tri[0][2], 1.0 / tri[1][2], 1.0 / tri[2][2]];
    let area = (s[1].0 - s[0].0) * (s[2].1 - s[0].1) - (s[1].1 - s[0].1) * (s[2].0 - s[0].0);
    if area == 0.0 || !area.is_finite() {
        return;
    }
    let min_x = s.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_x = s.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = s.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_y = s.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    // Pixel centers inside [min, max] satisfy i + 0.5 >= min.
    let x0 = (min_x - 0.5).ceil().max(0.0);
    let x1 = (max_x - 0.5).floor().min(w as f64 - 1.0);
    let y0 = (min_y - 0.5).ceil().max(0.0);
    let y1 = (max_y - 0.5).floor().min(h as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return;
    }
    let inv_area = 1.0 / area;
    let edge = |a: (f64, f64), b: (f64, f64), px: f64, py: f64| {
        (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0)
    };
    for py in y0 as usize..=y1 as usize {
        let cy = py as f64 + 0.5;
        for px in x0 as usize..=x1 as usize {
            let cx = px as f64 + 0.5;
            let l0 = edge(s[1], s[2], cx, cy) * inv_area;
            let l1 = edge(s[2], s[0], cx, cy) * inv_area;
            let l2 = edge(s[0], s[1], cx, cy) * inv_area;
            if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                continue;
            }
            let iz = l0 * inv_z[0] + l1 * inv_z[1] + l2 * inv_z[2];
            let depth = 1.0 / iz;
            let slot = &mut buf.depth[py * w + px];
            if depth < *slot {
                *slot = depth;
            }
        }
    }
}

/// Z-buffer render of `mesh` (assumed normalized to unit radius) after
/// applying the config's morph. Depth is sampled at pixel centers with
/// perspective-correct interpolation; no back-face culling.
pub fn render_depth(
    mesh: &Mesh,
    cfg: &CameraConfig,
    width: usize,
    height: usize,
) -> Result<DepthBuffer, RenderError> {
    if width == 0 || height == 0 {
        return Err(RenderError::ZeroResolution(width, height));
    }
    let morphed;
    let mesh = if cfg.morph == MorphParams::IDENTITY {
        mesh
    } else {
        morphed = morph_mesh(mesh, &cfg.morph)?;
        &morphed
    };
    let cam = camera_from_config(cfg, 1.0);
    Ok(render_with_camera(mesh, &cam, width, height))
}

/// Renders with an explicit camera; used by tests that need cameras off the
/// configuration-space bounds.
pub fn render_with_camera(mesh: &Mesh, cam: &Camera, width: usize, height: usize) -> DepthBuffer {
    let mut buf = DepthBuffer::new(width, height);
    let view: Vec<Vec3> = mesh.vertices.iter().map(|&v| cam.to_view(v)).collect();
    for t in &mesh.triangles {
        let tri = [view[t[0] as usize], view[t[1] as usize], view[t[2] as usize]];
        if tri.iter().all(|p| p[2] >= NEAR_PLANE) {
            raster_triangle(&mut buf, cam, tri);
        } else if tri.iter().any(|p| p[2] >= NEAR_PLANE) {
            let poly = clip_near(&tri);
            for k in 1..poly.len().saturating_sub(1) {
                raster_triangle(&mut buf, cam, [poly[0], poly[k], poly[k + 1]]);
            }
        }
    }
    buf
}

/// Maps finite depths linearly onto `[0, 230]` (nearest = 0) and background
/// onto 255.
pub fn depth_to_image(buf: &DepthBuffer) -> Result<DepthImage, RenderError> {
    let (dmin, dmax) = buf
        .depth
        .iter()
        .filter(|d| d.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| {
            (lo.min(d), hi.max(d))
        });
    if !dmin.is_finite() {
        return Err(RenderError::AllBackground);
    }
    let span = dmax - dmin;
    let gray = buf
        .depth
        .iter()
        .map(|&d| {
            if !d.is_finite() {
                BACKGROUND
            } else if span > 0.0 {
                (OBJECT_MAX_GRAY as f64 * (d - dmin) / span).round() as u8
            } else {
                0
            }
        })
        .collect();
    Ok(DepthImage::new(buf.width, buf.height, gray))
}
