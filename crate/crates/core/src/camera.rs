//! Pinhole multi-camera rig.
//!
//! Camera frame: +z along the optical axis, +x right, +y down. Extrinsics map
//! world to camera, `X_c = R(q) · X_w + t`.

use serde::{Deserialize, Serialize};

use crate::ad::Real;
use crate::error::{Error, Result};
use crate::geometry::{matrix_to_quaternion, quaternion_to_matrix, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Image size in pixels, used only to draw in-frame outliers.
    #[serde(default = "default_image_size")]
    pub image_size: [f64; 2],
}

fn default_image_size() -> [f64; 2] {
    [1920.0, 1080.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// Unit quaternion `[w, x, y, z]` of the world→camera rotation.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
    #[serde(skip)]
    matrix: Option<[[f64; 3]; 3]>,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, rotation: [f64; 4], translation: [f64; 3]) -> Result<Self> {
        let mut cam = Camera { intrinsics, rotation, translation, matrix: None };
        cam.validate()?;
        cam.matrix = Some(quaternion_to_matrix(rotation));
        Ok(cam)
    }

    /// Camera at `position` looking at `target` with world `up` pointing
    /// toward the top of the image.
    pub fn look_at(intrinsics: Intrinsics, position: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Result<Self> {
        let z = normalize(sub(target, position))
            .ok_or_else(|| Error::invalid("camera position coincides with its target"))?;
        let x = normalize(cross(z, up)).ok_or_else(|| Error::invalid("camera up vector is parallel to view"))?;
        let y = cross(z, x);
        let r = [x, y, z];
        let t = [-dot(r[0], position), -dot(r[1], position), -dot(r[2], position)];
        Camera::new(intrinsics, matrix_to_quaternion(r), t)
    }

    fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        let n = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("camera quaternion norm {n} is not 1")));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("camera translation must be finite"));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        self.matrix.unwrap_or_else(|| quaternion_to_matrix(self.rotation))
    }

    /// World point to camera frame.
    pub fn to_camera<T: Real>(&self, p: &Vec3<T>) -> Vec3<T> {
        let r = self.rotation_matrix();
        Vec3(std::array::from_fn(|i| T::affine(self.translation[i], &r[i], &p.0)))
    }

    pub fn center(&self) -> [f64; 3] {
        let r = self.rotation_matrix();
        let t = self.translation;
        // -Rᵀ t
        std::array::from_fn(|j| -(r[0][j] * t[0] + r[1][j] * t[1] + r[2][j] * t[2]))
    }

    /// Pixel of a camera-frame point; `None` when the depth is not positive.
    pub fn pixel<T: Real>(&self, pc: &Vec3<T>) -> Option<[T; 2]> {
        let [x, y, z] = pc.0;
        if z.value() <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        let u = x / z * k.fx + k.cx;
        let v = y / z * k.fy + k.cy;
        Some([u, v])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RigDocument {
    cameras: Vec<Camera>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RigDocument", into = "RigDocument")]
pub struct CameraRig {
    cameras: Vec<Camera>,
}

impl TryFrom<RigDocument> for CameraRig {
    type Error = Error;

    fn try_from(doc: RigDocument) -> Result<Self> {
        let cameras = doc
            .cameras
            .into_iter()
            .map(|c| Camera::new(c.intrinsics, c.rotation, c.translation))
            .collect::<Result<Vec<_>>>()?;
        CameraRig::new(cameras)
    }
}

impl From<CameraRig> for RigDocument {
    fn from(r: CameraRig) -> Self {
        RigDocument { cameras: r.cameras }
    }
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        if cameras.len() < 2 {
            return Err(Error::invalid(format!("a rig needs at least 2 cameras, got {}", cameras.len())));
        }
        for c in &cameras {
            c.validate()?;
        }
        Ok(Self { cameras })
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn camera(&self, index: usize) -> Result<&Camera> {
        self.cameras
            .get(index)
            .ok_or_else(|| Error::invalid(format!("camera index {index} out of range")))
    }

    /// `C` cameras evenly spaced on an ellipse around a walkway centred at
    /// `center`, each aimed at the centre from `height` metres.
    pub fn ring(count: usize, center: [f64; 3], radii: [f64; 2], height: f64, intrinsics: Intrinsics) -> Result<Self> {
        let cams = (0..count)
            .map(|i| {
                let a = std::f64::consts::TAU * (i as f64 + 0.5) / count as f64;
                let pos = [center[0] + radii[0] * a.cos(), center[1] + radii[1] * a.sin(), height];
                Camera::look_at(intrinsics.clone(), pos, center, [0.0, 0.0, 1.0])
            })
            .collect::<Result<Vec<_>>>()?;
        CameraRig::new(cams)
    }
}

/// Projects a world point through camera `camera` of the rig.
pub fn project(rig: &CameraRig, camera: usize, point: [f64; 3]) -> Result<[f64; 2]> {
    project_at(rig, camera, point, None)
}

/// As [`project`], tagging a behind-camera error with `frame`.
pub fn project_at(rig: &CameraRig, camera: usize, point: [f64; 3], frame: Option<usize>) -> Result<[f64; 2]> {
    let cam = rig.camera(camera)?;
    let pc = cam.to_camera(&Vec3(point));
    cam.pixel(&pc).ok_or(Error::BehindCamera { camera, frame, depth: pc.0[2] })
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(a, a).sqrt();
    (n > 1e-12).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> Intrinsics {
        Intrinsics { fx: 500.0, fy: 500.0, cx: 320.0, cy: 320.0, image_size: [640.0, 640.0] }
    }

    fn identity_rig() -> CameraRig {
        let a = Camera::new(intr(), [1.0, 0.0, 0.0, 0.0], [0.0; 3]).unwrap();
        let b = Camera::new(intr(), [1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
        CameraRig::new(vec![a, b]).unwrap()
    }

    #[test]
    fn principal_point_on_axis() {
        let rig = identity_rig();
        for z in [0.1, 3.0, 250.0] {
            let px = project(&rig, 0, [0.0, 0.0, z]).unwrap();
            assert_eq!(px, [320.0, 320.0]);
        }
    }

    #[test]
    fn formula_example() {
        let px = project(&identity_rig(), 0, [1.0, 0.0, 2.0]).unwrap();
        assert_eq!(px, [570.0, 320.0]);
    }

    #[test]
    fn zero_depth_is_behind_camera() {
        match project_at(&identity_rig(), 1, [0.0, 0.0, 0.0], Some(7)) {
            Err(Error::BehindCamera { camera: 1, frame: Some(7), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn look_at_centres_target() {
        let cam = Camera::look_at(intr(), [3.0, -4.0, 1.5], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]).unwrap();
        let rig = CameraRig::new(vec![cam.clone(), cam]).unwrap();
        let px = project(&rig, 0, [0.0, 0.0, 1.0]).unwrap();
        assert!((px[0] - 320.0).abs() < 1e-9 && (px[1] - 320.0).abs() < 1e-9);
        // Points above the target appear higher in the image (smaller v).
        let up = project(&rig, 0, [0.0, 0.0, 1.5]).unwrap();
        assert!(up[1] < 320.0);
        let c = rig.cameras()[0].center();
        assert!((c[0] - 3.0).abs() < 1e-9 && (c[1] + 4.0).abs() < 1e-9 && (c[2] - 1.5).abs() < 1e-9);
    }

    #[test]
    fn rig_validation() {
        let one = vec![Camera::new(intr(), [1.0, 0.0, 0.0, 0.0], [0.0; 3]).unwrap()];
        assert!(CameraRig::new(one).is_err());
        assert!(Camera::new(intr(), [1.0, 0.1, 0.0, 0.0], [0.0; 3]).is_err());
        let mut bad = intr();
        bad.fx = 0.0;
        assert!(Camera::new(bad, [1.0, 0.0, 0.0, 0.0], [0.0; 3]).is_err());
        let text = serde_json::to_string(&identity_rig()).unwrap();
        let back: CameraRig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.len(), 2);
    }
}
