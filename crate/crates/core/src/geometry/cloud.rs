use super::{Pose, Vec3};

/// A set of 3-D points in millimeters, optionally tagged with the simulated
/// object each point was sampled from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub source_ids: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points, source_ids: None }
    }

    pub fn with_sources(points: Vec<Vec3>, ids: Vec<u32>) -> Self {
        assert_eq!(points.len(), ids.len(), "one source id per point");
        Self { points, source_ids: Some(ids) }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
        Some(sum / self.points.len() as f64)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vec3> {
        self.points.iter()
    }
}

impl FromIterator<Vec3> for PointCloud {
    fn from_iter<I: IntoIterator<Item = Vec3>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// Applies `p` to every point. Cardinality and source tags are preserved.
pub fn transform_points(p: &Pose, c: &PointCloud) -> PointCloud {
    PointCloud {
        points: c.points.iter().map(|x| p.transform_point(x)).collect(),
        source_ids: c.source_ids.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Vec3::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0))).collect()
    }

    #[test]
    fn identity_leaves_cloud_unchanged() {
        let c = random_cloud(100, 1);
        assert_eq!(transform_points(&Pose::identity(), &c), c);
    }

    #[test]
    fn translation_shifts_every_point() {
        let c = random_cloud(100, 2);
        let t = Vec3::new(1.5, -2.0, 40.0);
        let out = transform_points(&Pose::from_translation(t), &c);
        assert_eq!(out.len(), c.len());
        for (a, b) in out.iter().zip(c.iter()) {
            assert_eq!(*a, b + t);
        }
    }

    #[test]
    fn half_turn_about_y_twice_is_identity() {
        let c = random_cloud(100, 3);
        let r = Pose::rot_y(180.0);
        let out = transform_points(&r, &transform_points(&r, &c));
        for (a, b) in out.iter().zip(c.iter()) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn source_ids_survive_transform() {
        let c = PointCloud::with_sources(vec![Vec3::zeros(), Vec3::x()], vec![4, 9]);
        let out = transform_points(&Pose::rot_z(10.0), &c);
        assert_eq!(out.source_ids, Some(vec![4, 9]));
    }
}
