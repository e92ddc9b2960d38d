use std::fmt;

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Vec3 = Vector3<f64>;

/// Frobenius drift of `RᵀR` from identity above which a composed rotation is
/// projected back onto SO(3).
const REORTHO_DRIFT: f64 = 1e-12;

/// Angles are reported at nano-degree resolution so that constructed boundary
/// cases (exactly 15°, exactly 90°) compare exactly against thresholds.
const ANGLE_DECIMALS: usize = 9;

/// Rigid transform in SE(3). Translation is in millimeters.
#[derive(Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.rotation;
        f.debug_struct("Pose")
            .field(
                "rotation",
                &[
                    [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                    [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                    [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
                ],
            )
            .field("translation", &[self.translation.x, self.translation.y, self.translation.z])
            .finish()
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    /// Builds a pose from a rotation matrix and translation. The rotation is
    /// projected onto SO(3) when it drifts from orthonormality; a matrix that is
    /// not close to a proper rotation at all is rejected.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Option<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return None;
        }
        let drift = orthonormality_drift(&rotation);
        if drift > 1e-3 || rotation.determinant() <= 0.0 {
            return None;
        }
        let rotation = if drift > REORTHO_DRIFT { project_to_so3(&rotation) } else { rotation };
        Some(Self { rotation, translation })
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    pub fn from_rotation(r: Rotation3<f64>) -> Self {
        Self { rotation: *r.matrix(), translation: Vec3::zeros() }
    }

    pub fn from_parts(r: Rotation3<f64>, t: Vec3) -> Self {
        Self { rotation: *r.matrix(), translation: t }
    }

    /// Rotation of `angle_deg` about `axis`, no translation.
    pub fn from_axis_angle(axis: &Vec3, angle_deg: f64) -> Self {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle_deg.to_radians());
        Self::from_rotation(r)
    }

    /// Rotation vector given in degrees (axis scaled by angle).
    pub fn from_rotation_vector_deg(rv: &Vec3, t: Vec3) -> Self {
        let r = Rotation3::new(rv.map(f64::to_radians));
        Self::from_parts(r, t)
    }

    pub fn rot_x(deg: f64) -> Self {
        Self::from_axis_angle(&Vec3::x(), deg)
    }

    pub fn rot_y(deg: f64) -> Self {
        Self::from_axis_angle(&Vec3::y(), deg)
    }

    pub fn rot_z(deg: f64) -> Self {
        Self::from_axis_angle(&Vec3::z(), deg)
    }

    /// Exact 180° rotation about y: `diag(-1, 1, -1)`.
    pub fn flip_y_rotation() -> Self {
        Self { rotation: Matrix3::from_diagonal(&Vec3::new(-1.0, 1.0, -1.0)), translation: Vec3::zeros() }
    }

    /// Uniformly distributed random rotation (Haar measure) with zero translation.
    pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let q = nalgebra::Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let uq = UnitQuaternion::from_quaternion(q);
        Self::from_rotation(uq.to_rotation_matrix())
    }

    /// Row-major rotation followed by translation, the 12-number layout used by
    /// every persisted format.
    pub fn from_row_major(v: &[f64; 12]) -> Option<Self> {
        let r = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        Self::new(r, Vec3::new(v[9], v[10], v[11]))
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
            t.x, t.y, t.z,
        ]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Object z-axis expressed in the parent frame.
    pub fn z_axis(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }

    pub fn with_translation(mut self, t: Vec3) -> Self {
        self.translation = t;
        self
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let rotation = self.rotation * other.rotation;
        let translation = self.rotation * other.translation + self.translation;
        let rotation = if orthonormality_drift(&rotation) > REORTHO_DRIFT {
            project_to_so3(&rotation)
        } else {
            rotation
        };
        Pose { rotation, translation }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { translation: -(rt * self.translation), rotation: rt }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn rotate_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Body-frame flip: rotation right-multiplied by `diag(-1, 1, -1)`, translation unchanged.
    pub fn flip_y(&self) -> Pose {
        let mut rotation = self.rotation;
        rotation.column_mut(0).neg_mut();
        rotation.column_mut(2).neg_mut();
        Pose { rotation, translation: self.translation }
    }

    /// Deviation of the stored rotation from orthonormality (Frobenius norm of `RᵀR − I`).
    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_drift(&self.rotation)
    }

    pub fn determinant(&self) -> f64 {
        self.rotation.determinant()
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<&Pose> for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn invert(p: &Pose) -> Pose {
    p.inverse()
}

pub fn flip_y(p: &Pose) -> Pose {
    p.flip_y()
}

/// Angle in degrees between the object z-axes of two poses, in `[0, 180]`.
pub fn angular_error_z(a: &Pose, b: &Pose) -> f64 {
    angle_between_deg(&a.z_axis(), &b.z_axis())
}

/// Angle in degrees of the relative rotation `aᵀ·b`, in `[0, 180]`.
pub fn rotation_geodesic(a: &Pose, b: &Pose) -> f64 {
    let rel = a.rotation.transpose() * b.rotation;
    let q = UnitQuaternion::from_matrix(&rel);
    // `angle()` is 2·atan2(|v|, |w|) which is stable near 0 and 180.
    quantize_deg(q.angle().to_degrees())
}

/// Angle between two (not necessarily unit) vectors in degrees.
pub fn angle_between_deg(a: &Vec3, b: &Vec3) -> f64 {
    let cross = a.cross(b).norm();
    let dot = a.dot(b);
    quantize_deg(cross.atan2(dot).to_degrees())
}

fn quantize_deg(deg: f64) -> f64 {
    // Decimal rounding, so the result is the double nearest to a 9-decimal literal.
    format!("{:.*}", ANGLE_DECIMALS, deg).parse().expect("formatted float parses")
}

/// Minimal rotation carrying unit vector `from` onto unit vector `to`.
/// Antipodal inputs rotate 180° about an axis perpendicular to `from`
/// (the y-axis when `from` is the z-axis).
pub fn rotation_between(from: &Vec3, to: &Vec3) -> Pose {
    let f = from.normalize();
    let t = to.normalize();
    match Rotation3::rotation_between(&f, &t) {
        Some(r) if r.matrix().iter().all(|v| v.is_finite()) => Pose::from_rotation(r),
        _ => {
            let axis = if f.cross(&Vec3::y()).norm() > 1e-6 {
                f.cross(&Vec3::y()).cross(&f)
            } else {
                f.cross(&Vec3::x())
            };
            Pose::from_axis_angle(&axis, 180.0)
        }
    }
}

/// Random small rigid perturbation: isotropic Gaussian translation whose RMS
/// length is `sigma_t` (per-axis deviation `sigma_t / √3`), and rotation about a
/// uniformly random axis by `|N(0, sigma_r)|` degrees.
pub fn random_perturbation<R: Rng + ?Sized>(sigma_t: f64, sigma_r_deg: f64, rng: &mut R) -> Pose {
    let s = sigma_t / 3f64.sqrt();
    let t = Vec3::new(
        s * rng.sample::<f64, _>(StandardNormal),
        s * rng.sample::<f64, _>(StandardNormal),
        s * rng.sample::<f64, _>(StandardNormal),
    );
    let axis = random_unit_vector(rng);
    let angle: f64 = StandardNormal.sample(rng);
    let angle = (angle * sigma_r_deg).abs();
    Pose::from_axis_angle(&axis, angle).with_translation(t)
}

pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn orthonormality_drift(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

/// Nearest proper rotation (polar decomposition via SVD).
pub(crate) fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}
