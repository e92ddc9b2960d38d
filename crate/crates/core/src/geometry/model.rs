use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GeometryError, PointCloud, Vec3};
use crate::numfmt::fmt_sig;
use crate::spatial::KdTree;

pub const DEFAULT_MODEL_POINTS: usize = 2048;
pub const DEFAULT_KEYPOINTS: usize = 8;
pub const MIN_MODEL_POINTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symmetry {
    None,
    ContinuousAboutZ,
}

impl Symmetry {
    pub fn as_str(&self) -> &'static str {
        match self {
            Symmetry::None => "none",
            Symmetry::ContinuousAboutZ => "continuous-about-z",
        }
    }
}

impl std::str::FromStr for Symmetry {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Symmetry::None),
            "continuous-about-z" => Ok(Symmetry::ContinuousAboutZ),
            other => Err(GeometryError::Parse { line: 1, message: format!("unknown symmetry `{other}`") }),
        }
    }
}

impl fmt::Display for Symmetry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Surface-sampled rigid part with the derived quantities every metric needs.
///
/// The surface cloud is indexed once at construction; all pose metrics work in
/// the model frame against that index.
#[derive(Clone)]
pub struct ObjectModel {
    id: String,
    surface: PointCloud,
    normals: Vec<Vec3>,
    diameter: f64,
    symmetry: Symmetry,
    keypoints: Vec<Vec3>,
    stable_rest_height: f64,
    centroid: Vec3,
    bounding_radius: f64,
    surface_area: f64,
    index: Arc<KdTree>,
}

impl fmt::Debug for ObjectModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObjectModel")
            .field("id", &self.id)
            .field("points", &self.surface.len())
            .field("diameter", &self.diameter)
            .field("symmetry", &self.symmetry)
            .field("keypoints", &self.keypoints.len())
            .finish()
    }
}

impl ObjectModel {
    /// Assembles a model from raw surface samples. Normals default to the
    /// direction away from the centroid when none are supplied.
    pub fn from_points(
        id: impl Into<String>,
        points: Vec<Vec3>,
        normals: Option<Vec<Vec3>>,
        symmetry: Symmetry,
        surface_area: Option<f64>,
    ) -> Result<Self, GeometryError> {
        let id = id.into();
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(GeometryError::InvalidId(id));
        }
        if points.is_empty() {
            return Err(GeometryError::TooFewPoints(points.len()));
        }
        let surface = PointCloud::new(points);
        if !surface.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        let centroid = surface.centroid().expect("non-empty");
        let normals = match normals {
            Some(n) if n.len() == surface.len() => n,
            Some(n) => return Err(GeometryError::NormalCount { points: surface.len(), normals: n.len() }),
            None => surface
                .iter()
                .map(|p| {
                    let d = p - centroid;
                    if d.norm() > 0.0 { d.normalize() } else { Vec3::z() }
                })
                .collect(),
        };
        let diameter = max_pairwise_distance(&surface.points);
        let bounding_radius = surface.iter().map(|p| p.norm()).fold(0.0, f64::max);
        let stable_rest_height = match symmetry {
            Symmetry::ContinuousAboutZ => surface.iter().map(|p| p.xy().norm()).fold(0.0, f64::max),
            Symmetry::None => {
                let mut lo = Vec3::repeat(f64::INFINITY);
                let mut hi = Vec3::repeat(f64::NEG_INFINITY);
                for p in surface.iter() {
                    lo = lo.inf(p);
                    hi = hi.sup(p);
                }
                (hi - lo).min() / 2.0
            }
        };
        // Without a known area, approximate it from the mean nearest-neighbour spacing.
        let surface_area = surface_area.unwrap_or_else(|| estimate_area(&surface.points));
        let keypoints = farthest_point_sampling(&surface.points, DEFAULT_KEYPOINTS);
        let index = Arc::new(KdTree::build(&surface.points).expect("non-empty"));
        Ok(Self {
            id,
            surface,
            normals,
            diameter,
            symmetry,
            keypoints,
            stable_rest_height,
            centroid,
            bounding_radius,
            surface_area,
            index,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn surface(&self) -> &PointCloud {
        &self.surface
    }

    pub fn points(&self) -> &[Vec3] {
        &self.surface.points
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    /// Largest distance between two surface samples (mm).
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn symmetry(&self) -> Symmetry {
        self.symmetry
    }

    pub fn keypoints(&self) -> &[Vec3] {
        &self.keypoints
    }

    /// Height of the object origin above a flat support when resting stably (mm).
    pub fn stable_rest_height(&self) -> f64 {
        self.stable_rest_height
    }

    pub fn centroid(&self) -> &Vec3 {
        &self.centroid
    }

    /// Largest distance of a surface sample from the model origin.
    pub fn bounding_radius(&self) -> f64 {
        self.bounding_radius
    }

    pub fn surface_area(&self) -> f64 {
        self.surface_area
    }

    /// Typical spacing between neighbouring surface samples, `sqrt(area / n)`.
    pub fn sampling_resolution(&self) -> f64 {
        (self.surface_area / self.surface.len() as f64).sqrt()
    }

    /// Tolerance for comparisons that rely on the discretised symmetry,
    /// `2 · diameter / sqrt(n)`.
    pub fn symmetry_tolerance(&self) -> f64 {
        2.0 * self.diameter / (self.surface.len() as f64).sqrt()
    }

    pub(crate) fn index(&self) -> &KdTree {
        &self.index
    }

    pub fn with_keypoints(mut self, keypoints: Vec<Vec3>) -> Self {
        self.keypoints = keypoints;
        self
    }

    /// Writes the point-list format: a `model <id> <n> <diameter_mm> <symmetry>`
    /// header followed by one `x y z` line per surface point.
    pub fn write_point_list<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "model {} {} {} {}", self.id, self.surface.len(), fmt_sig(self.diameter), self.symmetry)?;
        for p in self.surface.iter() {
            writeln!(w, "{} {} {}", fmt_sig(p.x), fmt_sig(p.y), fmt_sig(p.z))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_point_list(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Loads either the point-list format or an ASCII PLY file with vertex positions.
    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(b"ply") {
            let cloud = super::ply::read_ply(&bytes[..])?;
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .map(|s| s.replace(char::is_whitespace, "_"))
                .unwrap_or_else(|| "model".to_string());
            Self::from_points(id, cloud.points, None, Symmetry::None, None)
        } else {
            Self::read_point_list(&bytes[..])
        }
    }

    pub fn read_point_list<R: BufRead>(r: R) -> Result<Self, GeometryError> {
        let mut lines = r.lines().enumerate();
        let (_, header) = lines.next().ok_or(GeometryError::Parse { line: 1, message: "empty file".into() })?;
        let header = header?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "model" {
            return Err(GeometryError::Parse {
                line: 1,
                message: "expected `model <id> <n> <diameter_mm> <symmetry>`".into(),
            });
        }
        let id = fields[1].to_string();
        let n: usize = fields[2]
            .parse()
            .map_err(|_| GeometryError::Parse { line: 1, message: format!("bad point count `{}`", fields[2]) })?;
        let _diameter: f64 = fields[3]
            .parse()
            .map_err(|_| GeometryError::Parse { line: 1, message: format!("bad diameter `{}`", fields[3]) })?;
        let symmetry: Symmetry = fields[4].parse()?;
        let mut points = Vec::with_capacity(n);
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            points.push(parse_xyz(&line, i + 1)?);
        }
        if points.len() != n {
            return Err(GeometryError::Parse {
                line: 1,
                message: format!("header declares {n} points, file has {}", points.len()),
            });
        }
        Self::from_points(id, points, None, symmetry, None)
    }
}

pub(crate) fn parse_xyz(line: &str, line_no: usize) -> Result<Vec3, GeometryError> {
    let vals: Result<Vec<f64>, _> = line.split_whitespace().take(3).map(str::parse::<f64>).collect();
    match vals {
        Ok(v) if v.len() == 3 && v.iter().all(|x| x.is_finite()) => Ok(Vec3::new(v[0], v[1], v[2])),
        _ => Err(GeometryError::Parse { line: line_no, message: format!("expected `x y z`, got `{line}`") }),
    }
}

/// Area-uniform samples over the lateral surface and both caps of a cylinder
/// centred at the origin with its axis along z.
pub fn sample_cylinder_model(radius: f64, height: f64, n_points: usize, seed: u64) -> Result<ObjectModel, GeometryError> {
    if !(radius > 0.0 && radius.is_finite()) || !(height > 0.0 && height.is_finite()) {
        return Err(GeometryError::NonPositiveDimension { radius, height });
    }
    if n_points < MIN_MODEL_POINTS {
        return Err(GeometryError::TooFewPoints(n_points));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lateral = 2.0 * PI * radius * height;
    let cap = PI * radius * radius;
    let total = lateral + 2.0 * cap;
    let mut points = Vec::with_capacity(n_points);
    let mut normals = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let u = rng.random::<f64>() * total;
        let theta = rng.random::<f64>() * 2.0 * PI;
        let (s, c) = theta.sin_cos();
        if u < lateral {
            let z = (rng.random::<f64>() - 0.5) * height;
            points.push(Vec3::new(radius * c, radius * s, z));
            normals.push(Vec3::new(c, s, 0.0));
        } else {
            let r = radius * rng.random::<f64>().sqrt();
            let top = u < lateral + cap;
            let z = if top { height / 2.0 } else { -height / 2.0 };
            points.push(Vec3::new(r * c, r * s, z));
            normals.push(Vec3::new(0.0, 0.0, z.signum()));
        }
    }
    let id = format!("cylinder_r{}_h{}", fmt_sig(radius), fmt_sig(height));
    ObjectModel::from_points(id, points, Some(normals), Symmetry::ContinuousAboutZ, Some(total))
}

/// Greedy farthest-point sampling. Starts from the point farthest from the
/// centroid, so the result is a deterministic function of the input.
pub fn farthest_point_sampling(points: &[Vec3], k: usize) -> Vec<Vec3> {
    if points.is_empty() || k == 0 {
        return Vec::new();
    }
    let centroid = points.iter().fold(Vec3::zeros(), |a, p| a + p) / points.len() as f64;
    let first = argmax(points.iter().map(|p| (p - centroid).norm_squared()));
    let mut chosen = vec![first];
    let mut min_d: Vec<f64> = points.iter().map(|p| (p - points[first]).norm_squared()).collect();
    while chosen.len() < k.min(points.len()) {
        let next = argmax(min_d.iter().copied());
        chosen.push(next);
        for (d, p) in min_d.iter_mut().zip(points) {
            *d = d.min((p - points[next]).norm_squared());
        }
    }
    chosen.into_iter().map(|i| points[i]).collect()
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn max_pairwise_distance(points: &[Vec3]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

fn estimate_area(points: &[Vec3]) -> f64 {
    // Nearest-neighbour spacing of a uniform sample with density ρ is ≈ 0.5/√ρ.
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, p) in points.iter().enumerate() {
        let d = nearest_other(points, i, p);
        if d.is_finite() {
            sum += d;
            n += 1;
        }
    }
    let spacing = if n > 0 { sum / n as f64 } else { 1.0 };
    let density = 0.25 / (spacing * spacing).max(1e-12);
    points.len() as f64 / density
}

fn nearest_other(points: &[Vec3], i: usize, p: &Vec3) -> f64 {
    points
        .iter()
        .enumerate()
        .filter(|(j, q)| *j != i && (*q - p).norm_squared() > 0.0)
        .map(|(_, q)| (q - p).norm())
        .fold(f64::INFINITY, f64::min)
}
