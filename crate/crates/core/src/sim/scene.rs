//! Bin scenes and the depth-sensor surrogate.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{ObjectModel, PointCloud, Pose, Vec3};
use crate::proposer::BinVolume;

use super::SimError;

/// Bin floor geometry in the camera frame. The camera sits at the origin
/// looking along +z; the floor is the plane `z = floor_z_mm`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinGeometry {
    pub extent_mm: [f64; 2],
    pub floor_z_mm: f64,
}

impl Default for BinGeometry {
    fn default() -> Self {
        Self { extent_mm: [500.0, 500.0], floor_z_mm: 700.0 }
    }
}

impl BinGeometry {
    pub fn invalid_field(&self) -> Option<&'static str> {
        if !self.extent_mm.iter().all(|v| v.is_finite() && *v > 0.0) {
            Some("extent_mm")
        } else if !(self.floor_z_mm.is_finite() && self.floor_z_mm > 0.0) {
            Some("floor_z_mm")
        } else {
            None
        }
    }

    pub fn contains_origin(&self, p: &Vec3) -> bool {
        p.x.abs() <= self.extent_mm[0] / 2.0 && p.y.abs() <= self.extent_mm[1] / 2.0
    }

    /// Box that gross proposals are drawn from: the bin footprint, one
    /// object diameter deep.
    pub fn volume(&self, model: &ObjectModel) -> BinVolume {
        let [hx, hy] = self.extent_mm.map(|e| e / 2.0);
        BinVolume {
            min: Vec3::new(-hx, -hy, self.floor_z_mm - model.diameter()),
            max: Vec3::new(hx, hy, self.floor_z_mm),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bin {
    A,
    B,
}

impl Bin {
    pub fn other(self) -> Bin {
        match self {
            Bin::A => Bin::B,
            Bin::B => Bin::A,
        }
    }
}

/// The bin under the camera holds `objects`; the other bin is tracked by count.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneState {
    pub objects: Vec<(u32, Pose)>,
    pub bin: BinGeometry,
    pub source: Bin,
    pub bin_a_count: usize,
    pub bin_b_count: usize,
}

impl SceneState {
    pub fn count(&self, bin: Bin) -> usize {
        match bin {
            Bin::A => self.bin_a_count,
            Bin::B => self.bin_b_count,
        }
    }

    pub fn count_mut(&mut self, bin: Bin) -> &mut usize {
        match bin {
            Bin::A => &mut self.bin_a_count,
            Bin::B => &mut self.bin_b_count,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.count(self.source) == self.objects.len()
            && self.objects.iter().all(|(_, p)| self.bin.contains_origin(p.translation()))
    }

    /// Removes an object by id, keeping the source count in step.
    pub fn remove(&mut self, id: u32) -> Option<Pose> {
        let i = self.objects.iter().position(|(o, _)| *o == id)?;
        let (_, pose) = self.objects.remove(i);
        *self.count_mut(self.source) -= 1;
        Some(pose)
    }
}

/// Stable lying pose: axis horizontal at heading `yaw`, free `spin` about the
/// axis, resting on the floor.
pub fn lying_pose(model: &ObjectModel, bin: &BinGeometry, x: f64, y: f64, yaw_deg: f64, spin_deg: f64) -> Pose {
    let r = Pose::rot_z(yaw_deg).compose(&Pose::rot_y(90.0)).compose(&Pose::rot_z(spin_deg));
    r.with_translation(Vec3::new(x, y, bin.floor_z_mm - model.stable_rest_height()))
}

const PLACEMENT_TRIES_PER_OBJECT: usize = 1000;

/// A fresh bin A scene of `n` objects with ids `0..n`; bin B is empty.
pub fn spawn_scene<R: Rng + ?Sized>(
    n: usize,
    model: &ObjectModel,
    bin: &BinGeometry,
    rng: &mut R,
) -> Result<SceneState, SimError> {
    let objects = place_objects(n, model, bin, 0, rng)?;
    Ok(SceneState { objects, bin: *bin, source: Bin::A, bin_a_count: n, bin_b_count: 0 })
}

/// Rejection-samples `n` lying objects with centers at least one diameter
/// apart. Ids run from `first_id`.
pub fn place_objects<R: Rng + ?Sized>(
    n: usize,
    model: &ObjectModel,
    bin: &BinGeometry,
    first_id: u32,
    rng: &mut R,
) -> Result<Vec<(u32, Pose)>, SimError> {
    let [hx, hy] = bin.extent_mm.map(|e| e / 2.0);
    let d = model.diameter();
    let mut objects: Vec<(u32, Pose)> = Vec::with_capacity(n);
    let mut tries = 0;
    while objects.len() < n {
        if tries >= PLACEMENT_TRIES_PER_OBJECT * n.max(1) {
            return Err(SimError::Overfull { requested: n, placed: objects.len() });
        }
        tries += 1;
        let x = rng.random_range(-hx..=hx);
        let y = rng.random_range(-hy..=hy);
        let c = Vec3::new(x, y, 0.0);
        let clear = objects.iter().all(|(_, p)| {
            let t = p.translation();
            (Vec3::new(t.x, t.y, 0.0) - c).norm() >= d
        });
        if !clear {
            continue;
        }
        let yaw = rng.random_range(0.0..360.0);
        let spin = rng.random_range(0.0..360.0);
        objects.push((first_id + objects.len() as u32, lying_pose(model, bin, x, y, yaw, spin)));
    }
    Ok(objects)
}

/// Posed model points facing the camera, with dropout and Gaussian noise,
/// tagged with their object id. There is no inter-object occlusion.
pub fn render_cloud<R: Rng + ?Sized>(
    objects: &[(u32, Pose)],
    model: &ObjectModel,
    sensor_sigma: f64,
    dropout: f64,
    rng: &mut R,
) -> PointCloud {
    let noise = Normal::new(0.0, sensor_sigma.max(0.0)).expect("finite sigma");
    let mut points = Vec::new();
    let mut ids = Vec::new();
    for (id, pose) in objects {
        for (p, n) in model.points().iter().zip(model.normals()) {
            let w = pose.transform_point(p);
            // Camera at the origin: visible iff the normal points back at it.
            if pose.rotate_vector(n).dot(&w) >= 0.0 {
                continue;
            }
            if dropout > 0.0 && rng.random_bool(dropout.min(1.0)) {
                continue;
            }
            let w = if sensor_sigma > 0.0 {
                w + Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng))
            } else {
                w
            };
            points.push(w);
            ids.push(*id);
        }
    }
    PointCloud::with_sources(points, ids)
}

/// Sensor noise and dropout of the bin camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorModel {
    pub sigma_mm: f64,
    pub dropout: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self { sigma_mm: 0.3, dropout: 0.1 }
    }
}

impl SensorModel {
    pub fn zero() -> Self {
        Self { sigma_mm: 0.0, dropout: 0.0 }
    }

    pub fn invalid_field(&self) -> Option<&'static str> {
        if !(self.sigma_mm.is_finite() && self.sigma_mm >= 0.0) {
            Some("sigma_mm")
        } else if !(0.0..=1.0).contains(&self.dropout) {
            Some("dropout")
        } else {
            None
        }
    }
}
