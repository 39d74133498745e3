//! Capture-rig geometry: LED array, LCD mask plane, pinhole camera and the
//! cubic valid volume, plus the LED emission model.

use nalgebra::{Isometry3, Point3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{domain, Error, Result};

/// Rigid transform from a local frame to world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum Pose {
    /// Camera-style pose: local +z looks from `eye` at `target`, local +y
    /// points away from `up`.
    LookAt {
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
    },
    /// Translation plus XYZ Euler angles in degrees.
    Rigid {
        translation: [f64; 3],
        #[serde(default)]
        rotation_deg: [f64; 3],
    },
}

impl Pose {
    pub fn identity() -> Self {
        Pose::Rigid {
            translation: [0.0; 3],
            rotation_deg: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Pose::Rigid {
            translation: t,
            rotation_deg: [0.0; 3],
        }
    }

    pub fn to_isometry(&self) -> Result<Isometry3<f64>> {
        match self {
            Pose::Rigid {
                translation,
                rotation_deg,
            } => {
                let [rx, ry, rz] = rotation_deg.map(f64::to_radians);
                Ok(Isometry3::from_parts(
                    Translation3::new(translation[0], translation[1], translation[2]),
                    UnitQuaternion::from_euler_angles(rx, ry, rz),
                ))
            }
            Pose::LookAt { eye, target, up } => {
                let eye = Vector3::from(*eye);
                let fwd = Vector3::from(*target) - eye;
                let up = Vector3::from(*up);
                if fwd.norm() < 1e-12 || fwd.cross(&up).norm() < 1e-12 {
                    return Err(Error::Config("degenerate look-at pose".into()));
                }
                let z = fwd.normalize();
                let x = (-up).cross(&z).normalize();
                let y = z.cross(&x);
                let rot = nalgebra::Rotation3::from_basis_unchecked(&[x, y, z]);
                Ok(Isometry3::from_parts(
                    Translation3::from(eye),
                    UnitQuaternion::from_rotation_matrix(&rot),
                ))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigGeometry {
    pub led_rows: usize,
    pub led_cols: usize,
    pub led_pitch: f64,
    pub led_plane_pose: Pose,
    pub mask_res_w: usize,
    pub mask_res_h: usize,
    pub mask_phys_w: f64,
    pub mask_phys_h: f64,
    pub mask_plane_pose: Pose,
    pub cam_intrinsics: Intrinsics,
    pub cam_res_w: usize,
    pub cam_res_h: usize,
    pub cam_pose: Pose,
    pub volume_center: [f64; 3],
    pub volume_edge: f64,
}

impl Default for RigGeometry {
    /// Full-size layout: 64x48 LEDs 5 cm behind a 1920x1080 mask centred at
    /// the origin, camera above the mask aimed at the volume centre 15 cm in
    /// front of it.
    fn default() -> Self {
        Self {
            led_rows: 48,
            led_cols: 64,
            led_pitch: 0.005,
            led_plane_pose: Pose::translation([0.0, 0.0, -0.05]),
            mask_res_w: 1920,
            mask_res_h: 1080,
            mask_phys_w: 0.3,
            mask_phys_h: 0.16875,
            mask_plane_pose: Pose::identity(),
            cam_intrinsics: Intrinsics {
                fx: 686.0,
                fy: 686.0,
                cx: 635.0,
                cy: 320.0,
            },
            cam_res_w: 1270,
            cam_res_h: 640,
            cam_pose: Pose::LookAt {
                eye: [0.0, 0.16, 0.0],
                target: [0.0, 0.0, 0.15],
                up: [0.0, 1.0, 0.0],
            },
            volume_center: [0.0, 0.0, 0.15],
            volume_edge: 0.15,
        }
    }
}

impl RigGeometry {
    /// Reduced rig for desk-scale simulation: 8x8 LEDs at 2 cm pitch and a
    /// 256x256 mask over 20 cm, with a square `res`x`res` camera that frames
    /// the valid volume.
    pub fn desk(res: usize) -> Self {
        let half = res as f64 / 2.0;
        // half field of view of ~19 degrees
        let f = half / 0.35;
        Self {
            led_rows: 8,
            led_cols: 8,
            led_pitch: 0.02,
            mask_res_w: 256,
            mask_res_h: 256,
            mask_phys_w: 0.2,
            mask_phys_h: 0.2,
            cam_intrinsics: Intrinsics {
                fx: f,
                fy: f,
                cx: half,
                cy: half,
            },
            cam_res_w: res,
            cam_res_h: res,
            ..Self::default()
        }
    }

    /// Same rig with the camera resampled to `w`x`h` pixels.
    pub fn with_resolution(&self, w: usize, h: usize) -> Self {
        let sx = w as f64 / self.cam_res_w as f64;
        let sy = h as f64 / self.cam_res_h as f64;
        let k = &self.cam_intrinsics;
        Self {
            cam_intrinsics: Intrinsics {
                fx: k.fx * sx,
                fy: k.fy * sy,
                cx: k.cx * sx,
                cy: k.cy * sy,
            },
            cam_res_w: w,
            cam_res_h: h,
            ..self.clone()
        }
    }

    pub fn led_count(&self) -> usize {
        self.led_rows * self.led_cols
    }

    pub fn mask_len(&self) -> usize {
        self.mask_res_w * self.mask_res_h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LedModel {
    pub emit_half_w: f64,
    /// Row-major 5x5 emission kernel over the LED's square face.
    pub kernel: [f64; 25],
    pub angular_exponent: f64,
}

impl Default for LedModel {
    fn default() -> Self {
        Self {
            emit_half_w: 0.001,
            kernel: [1.0 / 25.0; 25],
            angular_exponent: 1.0,
        }
    }
}

impl LedModel {
    /// Angular falloff for an emission direction at `cos_theta` from the LED normal.
    #[inline]
    pub fn psi(&self, cos_theta: f64) -> f64 {
        if cos_theta <= 0.0 {
            0.0
        } else {
            cos_theta.min(1.0).powf(self.angular_exponent)
        }
    }

    /// Offsets of the 25 kernel sample points in the LED's local plane.
    pub fn sample_offsets(&self) -> [[f64; 2]; 25] {
        let step = 2.0 * self.emit_half_w / 5.0;
        let mut out = [[0.0; 2]; 25];
        for r in 0..5 {
            for c in 0..5 {
                out[r * 5 + c] = [(c as f64 - 2.0) * step, (r as f64 - 2.0) * step];
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraRay {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub px: [f64; 2],
}

/// A camera ray restricted to its valid-volume depth interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelRay {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub px: [f64; 2],
    pub z_min: f64,
    pub z_max: f64,
}

impl PixelRay {
    pub fn new(ray: CameraRay, (z_min, z_max): (f64, f64)) -> Self {
        Self {
            origin: ray.origin,
            direction: ray.direction,
            px: ray.px,
            z_min,
            z_max,
        }
    }

    #[inline]
    pub fn point(&self, depth: f64) -> Vector3<f64> {
        self.origin + self.direction * depth
    }

    /// Orthonormal frame whose +z points from the surface toward the camera.
    /// Normals and tangents of candidates on this ray are expressed in it.
    pub fn view_frame(&self) -> [Vector3<f64>; 3] {
        view_frame(&self.direction)
    }
}

pub fn view_frame(direction: &Vector3<f64>) -> [Vector3<f64>; 3] {
    let z = -direction.normalize();
    let helper = if z.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let y = z.cross(&helper).normalize();
    let x = y.cross(&z);
    [x, y, z]
}

/// Rig geometry with derived world-space quantities cached.
#[derive(Clone, Debug)]
pub struct Rig {
    pub geom: RigGeometry,
    pub led: LedModel,
    cam: Isometry3<f64>,
    mask: Isometry3<f64>,
    led_centers: Vec<Vector3<f64>>,
    led_normal: Vector3<f64>,
    /// 25 kernel sample points per LED, in mask-local coordinates.
    led_samples_mask: Vec<Vector3<f64>>,
    vol_lo: Vector3<f64>,
    vol_hi: Vector3<f64>,
}

impl Rig {
    pub fn new(geom: RigGeometry, led: LedModel) -> Result<Self> {
        validate(&geom, &led)?;
        let cam = geom.cam_pose.to_isometry()?;
        let mask = geom.mask_plane_pose.to_isometry()?;
        let led_pose = geom.led_plane_pose.to_isometry()?;
        let offsets = led.sample_offsets();

        let mut led_centers = Vec::with_capacity(geom.led_count());
        let mut led_samples_mask = Vec::with_capacity(geom.led_count() * 25);
        let x0 = -(geom.led_cols as f64 - 1.0) / 2.0 * geom.led_pitch;
        let y0 = -(geom.led_rows as f64 - 1.0) / 2.0 * geom.led_pitch;
        for r in 0..geom.led_rows {
            for c in 0..geom.led_cols {
                let lx = x0 + c as f64 * geom.led_pitch;
                let ly = y0 + r as f64 * geom.led_pitch;
                let center = led_pose * Point3::new(lx, ly, 0.0);
                if !center.coords.iter().all(|v| v.is_finite()) {
                    return Err(Error::Config(format!("LED ({r},{c}) is not finite")));
                }
                led_centers.push(center.coords);
                for o in &offsets {
                    let w = led_pose * Point3::new(lx + o[0], ly + o[1], 0.0);
                    led_samples_mask.push(mask.inverse_transform_point(&w).coords);
                }
            }
        }
        let led_normal = led_pose * Vector3::z();
        let center = Vector3::from(geom.volume_center);
        let half = Vector3::repeat(geom.volume_edge / 2.0);
        let rig = Self {
            vol_lo: center - half,
            vol_hi: center + half,
            geom,
            led,
            cam,
            mask,
            led_centers,
            led_normal,
            led_samples_mask,
        };
        let eye = rig.camera_center();
        if (0..3).all(|i| eye[i] >= rig.vol_lo[i] && eye[i] <= rig.vol_hi[i]) {
            return Err(Error::Config("camera centre lies inside the valid volume".into()));
        }
        Ok(rig)
    }

    /// Same rig with the camera resampled to `w`x`h`.
    pub fn at_resolution(&self, w: usize, h: usize) -> Result<Self> {
        Rig::new(self.geom.with_resolution(w, h), self.led.clone())
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.geom.cam_res_w, self.geom.cam_res_h)
    }

    pub fn led_count(&self) -> usize {
        self.led_centers.len()
    }

    pub fn led_centers(&self) -> &[Vector3<f64>] {
        &self.led_centers
    }

    pub fn led_normal(&self) -> Vector3<f64> {
        self.led_normal
    }

    pub(crate) fn led_samples_mask(&self, led: usize) -> &[Vector3<f64>] {
        &self.led_samples_mask[led * 25..(led + 1) * 25]
    }

    /// Camera-to-world transform; camera +z is the optical axis.
    pub fn camera_pose(&self) -> &Isometry3<f64> {
        &self.cam
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        self.cam.translation.vector
    }

    pub fn volume_bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        (self.vol_lo, self.vol_hi)
    }

    /// Ray through continuous pixel coordinates `px` (pixel `i` spans `[i, i+1)`).
    pub fn camera_ray(&self, px: [f64; 2]) -> Result<CameraRay> {
        let (w, h) = self.resolution();
        if !(px[0] >= 0.0 && px[0] <= w as f64 && px[1] >= 0.0 && px[1] <= h as f64) {
            return Err(domain(format!("pixel {px:?} outside {w}x{h} image")));
        }
        let k = &self.geom.cam_intrinsics;
        let d = Vector3::new((px[0] - k.cx) / k.fx, (px[1] - k.cy) / k.fy, 1.0);
        let direction = (self.cam.rotation * d).normalize();
        Ok(CameraRay {
            origin: self.camera_center(),
            direction,
            px,
        })
    }

    /// Ray through the centre of integer pixel (`col`, `row`).
    pub fn pixel_center_ray(&self, col: usize, row: usize) -> Result<CameraRay> {
        self.camera_ray([col as f64 + 0.5, row as f64 + 0.5])
    }

    /// Slab test against the valid-volume cube. Depth is distance along the ray.
    pub fn depth_range(&self, ray: &CameraRay) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            let o = ray.origin[i];
            let d = ray.direction[i];
            if d.abs() < 1e-15 {
                if o < self.vol_lo[i] || o > self.vol_hi[i] {
                    return None;
                }
                continue;
            }
            let a = (self.vol_lo[i] - o) / d;
            let b = (self.vol_hi[i] - o) / d;
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 < t1).then_some((t0, t1))
    }

    /// Ray and depth interval for integer pixel (`col`, `row`), if it sees the volume.
    pub fn pixel_ray(&self, col: usize, row: usize) -> Option<PixelRay> {
        let ray = self.pixel_center_ray(col, row).ok()?;
        self.depth_range(&ray).map(|r| PixelRay::new(ray, r))
    }

    /// Where the segment `x_l`-`x_k` crosses the mask, in continuous mask
    /// pixel coordinates. `None` when it misses the mask rectangle or runs
    /// parallel to it.
    pub fn mask_hit(&self, x_l: &Vector3<f64>, x_k: &Vector3<f64>) -> Option<[f64; 2]> {
        let a = self.mask.inverse_transform_point(&Point3::from(*x_l)).coords;
        let b = self.mask.inverse_transform_point(&Point3::from(*x_k)).coords;
        self.mask_hit_local(&a, &b)
    }

    #[inline]
    pub(crate) fn mask_hit_local(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> Option<[f64; 2]> {
        let dz = b.z - a.z;
        if dz.abs() < 1e-15 {
            return None;
        }
        let t = -a.z / dz;
        if !(0.0..=1.0).contains(&t) {
            return None;
        }
        let x = a.x + t * (b.x - a.x);
        let y = a.y + t * (b.y - a.y);
        self.mask_local_to_pixel(x, y)
    }

    #[inline]
    pub(crate) fn mask_local_to_pixel(&self, x: f64, y: f64) -> Option<[f64; 2]> {
        let g = &self.geom;
        let u = (x / g.mask_phys_w + 0.5) * g.mask_res_w as f64;
        let v = (y / g.mask_phys_h + 0.5) * g.mask_res_h as f64;
        let inside = u >= 0.0 && u <= g.mask_res_w as f64 && v >= 0.0 && v <= g.mask_res_h as f64;
        inside.then_some([u, v])
    }

    /// Point in mask-local coordinates.
    pub(crate) fn to_mask_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.mask.inverse_transform_point(&Point3::from(*p)).coords
    }

    /// Mask-local coordinates, as a column of partial derivatives, of a unit
    /// world-space displacement.
    pub(crate) fn to_mask_local_dir(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.mask.inverse_transform_vector(v)
    }

    /// Short stable fingerprint of the geometry and LED model.
    pub fn hash(&self) -> String {
        rig_hash(&self.geom, &self.led)
    }
}

pub fn rig_hash(geom: &RigGeometry, led: &LedModel) -> String {
    let json = serde_json::to_string(&(geom, led)).expect("rig serializes");
    let digest = Sha256::digest(json.as_bytes());
    hex::encode(&digest[..8])
}

fn validate(g: &RigGeometry, led: &LedModel) -> Result<()> {
    let bad = |m: &str| Err(Error::Config(m.to_string()));
    if g.led_rows * g.led_cols == 0 {
        return bad("LED array must be non-empty");
    }
    if !(g.led_pitch > 0.0) {
        return bad("led_pitch must be positive");
    }
    if g.mask_res_w == 0 || g.mask_res_h == 0 || !(g.mask_phys_w > 0.0) || !(g.mask_phys_h > 0.0) {
        return bad("mask resolution and size must be positive");
    }
    if g.cam_res_w == 0 || g.cam_res_h == 0 {
        return bad("camera resolution must be positive");
    }
    let k = &g.cam_intrinsics;
    if !(k.fx > 0.0 && k.fy > 0.0) {
        return bad("focal lengths must be positive");
    }
    if !(g.volume_edge > 0.0) {
        return bad("volume_edge must be positive");
    }
    if !(led.emit_half_w > 0.0) {
        return bad("emit_half_w must be positive");
    }
    if led.kernel.iter().any(|w| !(*w >= 0.0)) {
        return bad("LED kernel weights must be non-negative");
    }
    if (led.kernel.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return bad("LED kernel must sum to 1");
    }
    if !(led.angular_exponent >= 0.0) {
        return bad("angular_exponent must be >= 0");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn identity_cam_rig() -> Rig {
        let geom = RigGeometry {
            cam_pose: Pose::translation([0.0, 0.0, -0.3]),
            cam_intrinsics: Intrinsics {
                fx: 100.0,
                fy: 120.0,
                cx: 64.0,
                cy: 32.0,
            },
            cam_res_w: 256,
            cam_res_h: 256,
            ..RigGeometry::default()
        };
        Rig::new(geom, LedModel::default()).unwrap()
    }

    #[test]
    fn principal_point_looks_down_the_axis() {
        let rig = identity_cam_rig();
        let r = rig.camera_ray([64.0, 32.0]).unwrap();
        assert_abs_diff_eq!(r.direction, Vector3::z(), epsilon = 1e-15);
    }

    #[test]
    fn one_focal_length_off_axis_is_45_degrees() {
        let rig = identity_cam_rig();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let r = rig.camera_ray([164.0, 32.0]).unwrap();
        assert_abs_diff_eq!(r.direction, Vector3::new(s, 0.0, s), epsilon = 1e-15);
        let r = rig.camera_ray([64.0, 152.0]).unwrap();
        assert_abs_diff_eq!(r.direction, Vector3::new(0.0, s, s), epsilon = 1e-15);
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        let rig = identity_cam_rig();
        assert!(matches!(rig.camera_ray([-0.5, 3.0]), Err(Error::Domain(_))));
        assert!(rig.camera_ray([3.0, 256.5]).is_err());
    }

    #[test]
    fn axis_aligned_ray_through_center() {
        let rig = identity_cam_rig();
        // camera at z = -0.3, centre at z = 0.15: d = 0.45
        let r = rig.camera_ray([64.0, 32.0]).unwrap();
        let (a, b) = rig.depth_range(&r).unwrap();
        assert_abs_diff_eq!(a, 0.45 - 0.075, epsilon = 1e-12);
        assert_abs_diff_eq!(b, 0.45 + 0.075, epsilon = 1e-12);
    }

    #[test]
    fn ray_pointing_away_misses() {
        let rig = identity_cam_rig();
        let r = CameraRay {
            origin: rig.camera_center(),
            direction: -Vector3::z(),
            px: [0.0, 0.0],
        };
        assert!(rig.depth_range(&r).is_none());
    }

    #[test]
    fn symmetric_segment_hits_mask_center() {
        let rig = identity_cam_rig();
        let hit = rig
            .mask_hit(&Vector3::new(0.01, -0.02, -0.05), &Vector3::new(-0.01, 0.02, 0.05))
            .unwrap();
        assert_abs_diff_eq!(hit[0], 960.0, epsilon = 1e-9);
        assert_abs_diff_eq!(hit[1], 540.0, epsilon = 1e-9);
    }

    #[test]
    fn one_sided_segment_is_blocked() {
        let rig = identity_cam_rig();
        assert!(rig
            .mask_hit(&Vector3::new(0.0, 0.0, 0.05), &Vector3::new(0.0, 0.0, 0.2))
            .is_none());
        assert!(rig
            .mask_hit(&Vector3::new(0.0, 0.0, 0.0), &Vector3::new(0.1, 0.0, 0.0))
            .is_none());
    }

    #[test]
    fn default_camera_sees_volume_center() {
        let rig = Rig::new(RigGeometry::desk(16), LedModel::default()).unwrap();
        let valid = (0..16)
            .flat_map(|r| (0..16).map(move |c| (c, r)))
            .filter(|&(c, r)| rig.pixel_ray(c, r).is_some())
            .count();
        assert_eq!(valid, 256);
        let d = Vector3::from(rig.geom.volume_center) - rig.camera_center();
        let r = rig.camera_ray([8.0, 8.0]).unwrap();
        assert_abs_diff_eq!(r.direction, d.normalize(), epsilon = 1e-12);
    }

    #[test]
    fn camera_inside_volume_is_rejected() {
        let geom = RigGeometry {
            cam_pose: Pose::translation([0.0, 0.0, 0.15]),
            ..RigGeometry::default()
        };
        assert!(Rig::new(geom, LedModel::default()).is_err());
    }

    #[test]
    fn psi_is_a_cosine_lobe() {
        let led = LedModel {
            angular_exponent: 2.0,
            ..LedModel::default()
        };
        assert_eq!(led.psi(-0.2), 0.0);
        assert_abs_diff_eq!(led.psi(0.5), 0.25);
        assert_abs_diff_eq!(led.psi(1.0), 1.0);
    }
}
