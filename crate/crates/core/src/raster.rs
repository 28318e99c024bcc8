//! Binary-mask rasterization of posed meshes and mask IoU.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose6DoF};
use crate::mesh::{CanonicalMesh, Face};

/// Triangles are clipped against this camera depth, meters.
pub const NEAR_PLANE: f64 = 0.01;

/// Default render size `(width, height)`.
pub const DEFAULT_RENDER_SIZE: (u32, u32) = (480, 360);

/// Default number of views for [`multiview_iou`].
pub const DEFAULT_VIEWS: usize = 100;

/// Camera distance from the view-sphere center, in bounding-sphere radii.
pub const VIEW_DISTANCE_RADII: f64 = 2.5;

/// View count and image size used by [`multiview_iou`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub views: usize,
    /// `(width, height)` in pixels.
    pub size: (u32, u32),
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            views: DEFAULT_VIEWS,
            size: DEFAULT_RENDER_SIZE,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::InvalidInput("views must be positive".into()));
        }
        if self.size.0 == 0 || self.size.1 == 0 {
            return Err(Error::ZeroSizeImage);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    pub width: u32,
    pub height: u32,
    /// Row-major, `width · height` entries.
    pub bits: Vec<bool>,
}

impl MaskImage {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroSizeImage);
        }
        Ok(Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        })
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Binary PGM (`P5`) with set pixels at 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.to_pgm())
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Binary PPM (`P6`) overlay: `a` only in red, `b` only in green, both in yellow.
pub fn overlay_ppm(a: &MaskImage, b: &MaskImage) -> Result<Vec<u8>> {
    check_same_size(a, b)?;
    let mut out = format!("P6\n{} {}\n255\n", a.width, a.height).into_bytes();
    for (&pa, &pb) in a.bits.iter().zip(&b.bits) {
        out.extend_from_slice(&[if pa { 255 } else { 0 }, if pb { 255 } else { 0 }, 0]);
    }
    Ok(out)
}

pub fn write_overlay_ppm(a: &MaskImage, b: &MaskImage, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &overlay_ppm(a, b)?)
}

fn check_same_size(a: &MaskImage, b: &MaskImage) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::DimensionMismatch {
            expected: a.bits.len(),
            got: b.bits.len(),
        });
    }
    Ok(())
}

/// `|a ∧ b| / |a ∨ b|`, or 1 when both masks are empty.
pub fn mask_iou(a: &MaskImage, b: &MaskImage) -> Result<f64> {
    check_same_size(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&pa, &pb) in a.bits.iter().zip(&b.bits) {
        inter += (pa && pb) as usize;
        union += (pa || pb) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// World-to-camera rigid transform `x_c = R · x_w + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`, image `y` pointing as close to
    /// world `+y` as possible.
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Self {
        let f = (target - eye).normalize();
        let mut right = Vector3::y().cross(&f);
        if right.norm() < 1e-9 {
            right = Vector3::z().cross(&f);
        }
        let right = right.normalize();
        let down = f.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), f.transpose()]);
        Self {
            rotation,
            translation: -(rotation * eye),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Renders `mesh` placed by `pose` as seen by a camera at the origin.
pub fn render_mask(
    mesh: &CanonicalMesh,
    pose: &Pose6DoF,
    cam: &CameraIntrinsics,
    size: (u32, u32),
) -> Result<MaskImage> {
    render_mask_from(mesh, pose, &Extrinsics::identity(), cam, size)
}

/// Renders `mesh` placed in the world by `pose`, seen through `view`.
pub fn render_mask_from(
    mesh: &CanonicalMesh,
    pose: &Pose6DoF,
    view: &Extrinsics,
    cam: &CameraIntrinsics,
    size: (u32, u32),
) -> Result<MaskImage> {
    mesh.validate()?;
    let rot = pose.rotation_matrix();
    let verts: Vec<Vector3<f64>> = mesh
        .vertices
        .iter()
        .map(|v| view.apply(&(rot * v + pose.translation)))
        .collect();
    rasterize(&verts, &mesh.faces, cam, size)
}

/// Scan-converts triangles given in camera coordinates.
pub fn rasterize(
    camera_points: &[Vector3<f64>],
    faces: &[Face],
    cam: &CameraIntrinsics,
    size: (u32, u32),
) -> Result<MaskImage> {
    let mut mask = MaskImage::new(size.0, size.1)?;
    cam.validate()?;
    let project = |p: &Vector3<f64>| Vector2::new(cam.fx * p.x / p.z + cam.px, cam.fy * p.y / p.z + cam.py);
    let mut poly: Vec<Vector3<f64>> = Vec::with_capacity(4);
    for f in faces {
        let tri = [camera_points[f[0]], camera_points[f[1]], camera_points[f[2]]];
        if tri.iter().all(|p| p.z > NEAR_PLANE) {
            fill_triangle(&mut mask, [project(&tri[0]), project(&tri[1]), project(&tri[2])]);
            continue;
        }
        clip_near(&tri, &mut poly);
        for k in 1..poly.len().saturating_sub(1) {
            fill_triangle(&mut mask, [project(&poly[0]), project(&poly[k]), project(&poly[k + 1])]);
        }
    }
    Ok(mask)
}

/// Sutherland-Hodgman clip of one triangle against `z ≥ NEAR_PLANE`.
fn clip_near(tri: &[Vector3<f64>; 3], out: &mut Vec<Vector3<f64>>) {
    out.clear();
    for i in 0..3 {
        let (a, b) = (tri[i], tri[(i + 1) % 3]);
        let (ina, inb) = (a.z >= NEAR_PLANE, b.z >= NEAR_PLANE);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (NEAR_PLANE - a.z) / (b.z - a.z);
            let mut p = a + (b - a) * t;
            p.z = NEAR_PLANE;
            out.push(p);
        }
    }
}

fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Whether a point exactly on edge `a → b` belongs to the triangle
/// (top-left rule for the positive orientation of [`edge`]).
fn owns_boundary(a: &Vector2<f64>, b: &Vector2<f64>) -> bool {
    let d = b - a;
    d.y < 0.0 || (d.y == 0.0 && d.x > 0.0)
}

/// Sets every pixel whose center `(x + ½, y + ½)` lies inside the triangle.
fn fill_triangle(mask: &mut MaskImage, mut v: [Vector2<f64>; 3]) {
    if v.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return;
    }
    let area = edge(&v[0], &v[1], &v[2]);
    if area == 0.0 {
        return;
    }
    if area < 0.0 {
        v.swap(1, 2);
    }
    let (w, h) = (mask.width as f64, mask.height as f64);
    let lo_x = v.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let hi_x = v.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let lo_y = v.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let hi_y = v.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    if hi_x < 0.0 || hi_y < 0.0 || lo_x > w || lo_y > h {
        return;
    }
    let x0 = (lo_x - 0.5).ceil().max(0.0) as u32;
    let x1 = ((hi_x - 0.5).floor().min(w - 1.0)).max(-1.0);
    let y0 = (lo_y - 0.5).ceil().max(0.0) as u32;
    let y1 = ((hi_y - 0.5).floor().min(h - 1.0)).max(-1.0);
    if x1 < 0.0 || y1 < 0.0 {
        return;
    }
    let (x1, y1) = (x1 as u32, y1 as u32);
    let edges = [(v[0], v[1]), (v[1], v[2]), (v[2], v[0])];
    let owns = edges.map(|(a, b)| owns_boundary(&a, &b));
    let width = mask.width as usize;
    for y in y0..=y1 {
        let py = y as f64 + 0.5;
        let row = y as usize * width;
        for x in x0..=x1 {
            let p = Vector2::new(x as f64 + 0.5, py);
            let inside = edges.iter().zip(&owns).all(|((a, b), &own)| {
                let e = edge(a, b, &p);
                e > 0.0 || (e == 0.0 && own)
            });
            if inside {
                mask.bits[row + x as usize] = true;
            }
        }
    }
}

/// Azimuth × elevation split of `views`: the elevation count is the largest
/// divisor of `views` not above its square root.
pub fn view_grid(views: usize) -> (usize, usize) {
    let n_el = (1..=views).take_while(|d| d * d <= views).filter(|d| views.is_multiple_of(*d)).last().unwrap_or(1);
    (views / n_el.max(1), n_el)
}

/// The virtual cameras of [`multiview_iou`] around a sphere of `radius` at
/// `center`, with intrinsics sized so the sphere fits in the image.
pub fn view_cameras(
    center: &Vector3<f64>,
    radius: f64,
    views: usize,
    size: (u32, u32),
) -> (CameraIntrinsics, Vec<Extrinsics>) {
    let (n_az, n_el) = view_grid(views);
    let half_angle = (1.0 / VIEW_DISTANCE_RADII).asin();
    let f = 0.45 * size.0.min(size.1) as f64 / half_angle.tan();
    let cam = CameraIntrinsics {
        fx: f,
        fy: f,
        px: size.0 as f64 / 2.0,
        py: size.1 as f64 / 2.0,
    };
    let dist = VIEW_DISTANCE_RADII * radius;
    let mut out = Vec::with_capacity(views);
    for i in 0..n_el {
        let el = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * (i as f64 + 0.5) / n_el as f64;
        for j in 0..n_az {
            let az = 2.0 * std::f64::consts::PI * j as f64 / n_az as f64;
            // Positive elevation is above the object, i.e. towards −y.
            let dir = Vector3::new(el.cos() * az.sin(), -el.sin(), el.cos() * az.cos());
            out.push(Extrinsics::look_at(&(center + dir * dist), center));
        }
    }
    (cam, out)
}

/// Mean mask IoU of two posed meshes over a grid of `views` virtual cameras.
///
/// The view sphere is centered on the bounding box of both posed meshes and
/// its radius is the largest vertex distance from that center, so the score
/// is symmetric in its arguments.
pub fn multiview_iou(
    pred: (&CanonicalMesh, &Pose6DoF),
    gt: (&CanonicalMesh, &Pose6DoF),
    views: usize,
    size: (u32, u32),
) -> Result<f64> {
    if views == 0 {
        return Err(Error::InvalidInput("views must be positive".into()));
    }
    if size.0 == 0 || size.1 == 0 {
        return Err(Error::ZeroSizeImage);
    }
    let posed = |(m, p): (&CanonicalMesh, &Pose6DoF)| -> Vec<Vector3<f64>> {
        m.vertices.iter().map(|v| p.transform_point(v)).collect()
    };
    let (a, b) = (posed(pred), posed(gt));
    let all: Vec<&Vector3<f64>> = a.iter().chain(&b).collect();
    if all.is_empty() {
        return Ok(1.0);
    }
    let lo = all.iter().fold(Vector3::repeat(f64::INFINITY), |m, v| m.inf(v));
    let hi = all.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |m, v| m.sup(v));
    let center = (lo + hi) / 2.0;
    let radius = all.iter().map(|v| (*v - center).norm()).fold(0.0, f64::max).max(1e-9);
    let (cam, extrinsics) = view_cameras(&center, radius, views, size);
    let mut sum = 0.0;
    for view in &extrinsics {
        let to_cam = |pts: &[Vector3<f64>]| pts.iter().map(|p| view.apply(p)).collect::<Vec<_>>();
        let ma = rasterize(&to_cam(&a), &pred.0.faces, &cam, size)?;
        let mb = rasterize(&to_cam(&b), &gt.0.faces, &cam, size)?;
        sum += mask_iou(&ma, &mb)?;
    }
    Ok(sum / extrinsics.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn square(depth: f64) -> (Vec<Vector3<f64>>, Vec<Face>) {
        let v = vec![
            Vector3::new(-0.5, -0.5, depth),
            Vector3::new(0.5, -0.5, depth),
            Vector3::new(0.5, 0.5, depth),
            Vector3::new(-0.5, 0.5, depth),
        ];
        (v, vec![[0, 1, 2], [0, 2, 3]])
    }

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 320.0, 240.0).unwrap()
    }

    #[test]
    fn unit_square_fills_exact_rectangle() {
        let (v, f) = square(10.0);
        let m = rasterize(&v, &f, &cam(), (640, 480)).unwrap();
        assert_eq!(m.count(), 100 * 100);
        assert!(m.get(270, 190) && m.get(369, 289));
        assert!(!m.get(269, 190) && !m.get(370, 289) && !m.get(300, 189) && !m.get(300, 290));
    }

    #[test]
    fn shared_edges_are_not_double_counted_or_missed() {
        // A fan of thin triangles around a center covers a convex polygon
        // exactly once: compare against the two-triangle square.
        let (v, f) = square(10.0);
        let mut fan_v = v.clone();
        fan_v.push(Vector3::new(0.1, 0.05, 10.0));
        let fan_f = vec![[4, 0, 1], [4, 1, 2], [4, 2, 3], [4, 3, 0]];
        let a = rasterize(&v, &f, &cam(), (640, 480)).unwrap();
        let b = rasterize(&fan_v, &fan_f, &cam(), (640, 480)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn behind_camera_is_empty() {
        let (v, f) = square(-10.0);
        assert_eq!(rasterize(&v, &f, &cam(), (64, 48)).unwrap().count(), 0);
        assert!(matches!(rasterize(&v, &f, &cam(), (0, 48)), Err(Error::ZeroSizeImage)));
    }

    #[test]
    fn near_plane_clipping_keeps_the_visible_part() {
        // A floor strip from behind the camera to z = 5, below the optical axis.
        let v = vec![
            Vector3::new(-1.0, 1.0, -2.0),
            Vector3::new(1.0, 1.0, -2.0),
            Vector3::new(1.0, 1.0, 5.0),
            Vector3::new(-1.0, 1.0, 5.0),
        ];
        let f = vec![[0, 1, 2], [0, 2, 3]];
        let m = rasterize(&v, &f, &cam(), (640, 480)).unwrap();
        assert!(m.count() > 0);
        // Everything visible is below the horizon row.
        assert!((0..480).filter(|&y| (0..640).any(|x| m.get(x, y))).all(|y| y >= 240));
        // Far edge projects to y = 240 + 1000/5 = 440.
        assert!(m.get(320, 441) && !m.get(320, 439));
    }

    #[test]
    fn area_shrinks_with_depth() {
        let mut last = usize::MAX;
        for d in [2.0, 4.0, 8.0, 16.0, 32.0] {
            let (v, f) = square(d);
            let n = rasterize(&v, &f, &cam(), (640, 480)).unwrap().count();
            assert!(n <= last);
            last = n;
        }
    }

    #[test]
    fn iou_examples() {
        let mut a = MaskImage::new(10, 10).unwrap();
        let mut b = MaskImage::new(10, 10).unwrap();
        assert_eq!(mask_iou(&a, &b).unwrap(), 1.0);
        for y in 0..4 {
            for x in 0..4 {
                a.bits[y * 10 + x] = true;
                b.bits[y * 10 + x + 2] = true;
            }
        }
        // Overlap 2×4 = 8, union 16 + 16 − 8 = 24.
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let mut c = MaskImage::new(10, 10).unwrap();
        c.bits[99] = true;
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        assert!(mask_iou(&a, &MaskImage::new(5, 5).unwrap()).is_err());
    }

    #[test]
    fn pgm_and_ppm_headers() {
        let mut a = MaskImage::new(3, 2).unwrap();
        a.bits[1] = true;
        let pgm = a.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 6..], &[0, 255, 0, 0, 0, 0]);
        let ppm = overlay_ppm(&a, &a).unwrap();
        assert!(ppm.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(ppm.len(), 11 + 18);
    }

    #[test]
    fn view_grid_layout() {
        assert_eq!(view_grid(100), (10, 10));
        assert_eq!(view_grid(12), (4, 3));
        assert_eq!(view_grid(7), (7, 1));
        let (_, ex) = view_cameras(&Vector3::zeros(), 1.0, 100, (480, 360));
        assert_eq!(ex.len(), 100);
        for e in &ex {
            // Orthonormal, and the center is straight ahead at 2.5 radii.
            assert!((e.rotation * e.rotation.transpose() - Matrix3::identity()).abs().max() < 1e-12);
            let c = e.apply(&Vector3::zeros());
            assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12 && (c.z - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn multiview_identity_and_empty() {
        let dirs = crate::mesh::sphere_directions(6, 8);
        let faces = crate::mesh::sphere_faces(6, 8);
        let m = CanonicalMesh::new(dirs.clone(), Arc::clone(&faces), "ball", 0).unwrap();
        let pose = Pose6DoF::new(Vector3::new(1.0, 2.0, 10.0), Vector3::new(0.1, 0.2, 0.3));
        assert_eq!(multiview_iou((&m, &pose), (&m, &pose), 100, (96, 72)).unwrap(), 1.0);
        let empty = CanonicalMesh::new(dirs, Arc::new(vec![]), "empty", 0).unwrap();
        assert_eq!(multiview_iou((&empty, &pose), (&m, &pose), 100, (96, 72)).unwrap(), 0.0);
    }
}
