//! Anisotropic normalization of points into a part's unit cube, its inverse,
//! analytic part shapes and occupancy sampling.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::types::{PoseSize, Vec3};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ShapeError {
    #[error("size component {0} too small to normalize")]
    SingularScale(f64),
}

/// Half-width of the normalized part cube.
pub const NORMALIZED_HALF_EXTENT: f64 = 0.5;
/// Occupancy samples per part.
pub const DEFAULT_OCCUPANCY_SAMPLES: usize = 128;

const MIN_SIZE: f64 = 1e-9;
const BOUNDARY_TOL: f64 = 1e-12;

/// Isosurface level of the occupancy field, `logistic(-0.5)`.
pub fn isosurface_threshold() -> f64 {
    1.0 / (1.0 + 0.5f64.exp())
}

pub fn is_inside(occupancy: f64) -> bool {
    occupancy > isosurface_threshold()
}

/// Maps world points into the part frame, `(R S)^-1 (p - c)`, keeping only
/// points with every coordinate in `[-0.5, 0.5]`.
///
/// Returns the retained points and a per-input retention mask.
pub fn normalize_points(points: &[Vec3], pose: &PoseSize) -> Result<(Vec<Vec3>, Vec<bool>), ShapeError> {
    check_scale(pose)?;
    let mut kept = Vec::new();
    let mask = points
        .iter()
        .map(|p| {
            let x = normalize_unchecked(p, pose);
            let keep = x.amax() <= NORMALIZED_HALF_EXTENT + BOUNDARY_TOL;
            if keep {
                kept.push(x);
            }
            keep
        })
        .collect();
    Ok((kept, mask))
}

/// Normalized coordinates of one point, without the retention test.
pub fn normalize_point(p: &Vec3, pose: &PoseSize) -> Result<Vec3, ShapeError> {
    check_scale(pose)?;
    Ok(normalize_unchecked(p, pose))
}

pub fn denormalize_point(x: &Vec3, pose: &PoseSize) -> Vec3 {
    pose.rotation * x.component_mul(&pose.size) + pose.center
}

fn check_scale(pose: &PoseSize) -> Result<(), ShapeError> {
    match pose.size.iter().find(|s| !(**s >= MIN_SIZE)) {
        Some(s) => Err(ShapeError::SingularScale(*s)),
        None => Ok(()),
    }
}

fn normalize_unchecked(p: &Vec3, pose: &PoseSize) -> Vec3 {
    (pose.rotation.transpose() * (p - pose.center)).component_div(&pose.size)
}

/// Axis-aligned box inside the normalized cube.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Block {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Block {
    pub const FULL: Block = Block { min: [-0.5; 3], max: [0.5; 3] };

    fn contains(&self, x: &Vec3) -> bool {
        (0..3).all(|i| x[i] >= self.min[i] && x[i] <= self.max[i])
    }

    fn face_area(&self, axis: usize) -> f64 {
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        (self.max[a] - self.min[a]) * (self.max[b] - self.min[b])
    }

    fn surface_area(&self) -> f64 {
        2.0 * (0..3).map(|i| self.face_area(i)).sum::<f64>()
    }

    fn volume(&self) -> f64 {
        (0..3).map(|i| (self.max[i] - self.min[i]).max(0.0)).product()
    }
}

/// Part shape in the normalized frame, as a union of axis-aligned blocks.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalyticShape {
    /// Fills the whole normalized cube.
    Solid,
    Empty,
    Block(Block),
    /// The cube with a notch removed along the y edge at `x, z > 0.5 - notch`.
    LShape { notch_x: f64, notch_z: f64 },
}

impl AnalyticShape {
    pub fn blocks(&self) -> Vec<Block> {
        match self {
            AnalyticShape::Solid => vec![Block::FULL],
            AnalyticShape::Empty => Vec::new(),
            AnalyticShape::Block(b) => vec![*b],
            AnalyticShape::LShape { notch_x, notch_z } => {
                let xs = 0.5 - notch_x;
                let zs = 0.5 - notch_z;
                vec![
                    Block { min: [-0.5, -0.5, -0.5], max: [xs, 0.5, 0.5] },
                    Block { min: [xs, -0.5, -0.5], max: [0.5, 0.5, zs] },
                ]
            }
        }
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        self.blocks().iter().any(|b| b.contains(x))
    }

    /// Binary occupancy at a normalized-space point.
    pub fn occupancy(&self, x: &Vec3) -> f64 {
        if self.contains(x) {
            1.0
        } else {
            0.0
        }
    }

    /// Fraction of the normalized cube that is occupied.
    pub fn volume_fraction(&self) -> f64 {
        // The blocks of every variant are disjoint up to shared faces.
        self.blocks().iter().map(Block::volume).sum()
    }

    /// Uniform sample on the shape surface with its outward normal, or
    /// `None` for an empty shape.
    pub fn sample_surface<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<(Vec3, Vec3)> {
        let blocks = self.blocks();
        let total: f64 = blocks.iter().map(Block::surface_area).sum();
        if blocks.is_empty() || total <= 0.0 {
            return None;
        }
        // Rejection keeps only points on the boundary of the union.
        for _ in 0..1000 {
            let mut pick = rng.random::<f64>() * total;
            let block = blocks
                .iter()
                .find(|b| {
                    pick -= b.surface_area();
                    pick <= 0.0
                })
                .unwrap_or(&blocks[blocks.len() - 1]);
            let mut pick = rng.random::<f64>() * block.surface_area() * 0.5;
            let axis = (0..3)
                .find(|&i| {
                    pick -= block.face_area(i);
                    pick <= 0.0
                })
                .unwrap_or(2);
            let positive = rng.random::<bool>();
            let mut p = Vec3::zeros();
            for i in 0..3 {
                p[i] = if i == axis {
                    if positive { block.max[i] } else { block.min[i] }
                } else {
                    rng.random_range(block.min[i]..=block.max[i])
                };
            }
            let mut normal = Vec3::zeros();
            normal[axis] = if positive { 1.0 } else { -1.0 };
            if !self.contains(&(p + normal * 1e-7)) && self.contains(&(p - normal * 1e-7)) {
                return Some((p, normal));
            }
        }
        None
    }
}

/// World-space occupancy query.
pub trait OccupancyField: Sync {
    fn occupancy(&self, p: &Vec3) -> f64;
}

/// An analytic shape placed in the world by a part pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedShape {
    pub shape: AnalyticShape,
    pub pose: PoseSize,
}

impl PlacedShape {
    pub fn new(shape: AnalyticShape, pose: PoseSize) -> Self {
        Self { shape, pose }
    }

    /// World-space surface sample.
    pub fn sample_surface<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Vec3> {
        self.shape.sample_surface(rng).map(|(x, _)| denormalize_point(&x, &self.pose))
    }
}

impl OccupancyField for PlacedShape {
    fn occupancy(&self, p: &Vec3) -> f64 {
        match normalize_point(p, &self.pose) {
            Ok(x) => self.shape.occupancy(&x),
            Err(_) => 0.0,
        }
    }
}

/// Union of placed part shapes (an instance).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ShapeUnion(pub Vec<PlacedShape>);

impl OccupancyField for ShapeUnion {
    fn occupancy(&self, p: &Vec3) -> f64 {
        self.0.iter().map(|s| s.occupancy(p)).fold(0.0, f64::max)
    }
}

impl ShapeUnion {
    /// `count` points on the union's outer surface (points of one part's
    /// surface buried inside another part are rejected).
    pub fn sample_surface<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Vec3> {
        let areas: Vec<f64> = self
            .0
            .iter()
            .map(|s| {
                let sz = s.pose.size;
                s.shape.blocks().iter().map(|b| {
                    let d = Vec3::new(b.max[0] - b.min[0], b.max[1] - b.min[1], b.max[2] - b.min[2]).component_mul(&sz);
                    2.0 * (d.x * d.y + d.y * d.z + d.z * d.x)
                }).sum()
            })
            .collect();
        let total: f64 = areas.iter().sum();
        let mut out = Vec::with_capacity(count);
        if total <= 0.0 {
            return out;
        }
        let mut attempts = 0;
        while out.len() < count && attempts < count * 100 {
            attempts += 1;
            let mut pick = rng.random::<f64>() * total;
            let idx = areas.iter().position(|a| {
                pick -= a;
                pick <= 0.0
            });
            let idx = idx.unwrap_or(self.0.len() - 1);
            let Some(p) = self.0[idx].sample_surface(rng) else { continue };
            let buried = self.0.iter().enumerate().any(|(j, other)| j != idx && interior(other, &p));
            if !buried {
                out.push(p);
            }
        }
        out
    }
}

fn interior(shape: &PlacedShape, p: &Vec3) -> bool {
    match normalize_point(p, &shape.pose) {
        Ok(x) => shape.shape.blocks().iter().any(|b| (0..3).all(|i| x[i] > b.min[i] + 1e-9 && x[i] < b.max[i] - 1e-9)),
        Err(_) => false,
    }
}

/// One labeled occupancy query in normalized space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancySample {
    pub point: Vec3,
    /// Predicted occupancy, kept strictly inside (0, 1).
    pub predicted: f64,
    pub truth: bool,
}

impl OccupancySample {
    pub const CLAMP: f64 = 1e-7;

    pub fn new(point: Vec3, predicted: f64, truth: bool) -> Self {
        Self { point, predicted: predicted.clamp(Self::CLAMP, 1.0 - Self::CLAMP), truth }
    }
}

/// Training-style occupancy queries for a part: half uniform in the
/// normalized cube, a quarter offset from the surface along its normal with
/// sigma 0.1 and a quarter with sigma 0.01. Labels come from `truth`,
/// predictions from `predicted`.
pub fn sample_occupancy_points<R: Rng + ?Sized>(
    truth: &AnalyticShape,
    predicted: &dyn Fn(&Vec3) -> f64,
    count: usize,
    rng: &mut R,
) -> Vec<OccupancySample> {
    let n_uniform = count / 2;
    let n_coarse = count / 4;
    let n_fine = count - n_uniform - n_coarse;
    let mut points = Vec::with_capacity(count);
    for _ in 0..n_uniform {
        points.push(uniform_cube(rng));
    }
    for (n, sigma) in [(n_coarse, 0.1), (n_fine, 0.01)] {
        let normal_dist = Normal::new(0.0, sigma).expect("positive sigma");
        for _ in 0..n {
            let p = match truth.sample_surface(rng) {
                Some((p, nrm)) => p + nrm * normal_dist.sample(rng),
                None => uniform_cube(rng),
            };
            points.push(p);
        }
    }
    points.into_iter().map(|p| OccupancySample::new(p, predicted(&p), truth.contains(&p))).collect()
}

fn uniform_cube<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, corner_signs, cuboid_corners};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> PoseSize {
        let axis = Vec3::new(rng.random(), rng.random(), rng.random::<f64>() + 0.1);
        PoseSize::new(
            axis_angle(&axis, rng.random_range(-3.0..3.0)),
            Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
            Vec3::new(rng.random_range(0.02..2.0), rng.random_range(0.02..2.0), rng.random_range(0.02..2.0)),
        )
    }

    #[test]
    fn isosurface_value() {
        assert!((isosurface_threshold() - 0.377_540_668_798_145_4).abs() < 1e-12);
        assert!(is_inside(0.5));
        assert!(!is_inside(0.3));
    }

    #[test]
    fn center_and_boundary() {
        let pose = PoseSize::axis_aligned(Vec3::new(1.0, 1.0, 1.0), Vec3::new(2.0, 4.0, 2.0));
        let (kept, mask) = normalize_points(&[pose.center, pose.center + Vec3::new(1.0, 2.0, 1.0)], &pose).unwrap();
        assert_eq!(mask, vec![true, true]);
        assert_eq!(kept[0], Vec3::zeros());
        assert_eq!(kept[1], Vec3::repeat(0.5));
        let (kept, mask) = normalize_points(&[pose.center + Vec3::new(1.1, 0.0, 0.0)], &pose).unwrap();
        assert!(kept.is_empty() && mask == vec![false]);
    }

    #[test]
    fn corners_map_to_half_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let (kept, _) = normalize_points(&cuboid_corners(&pose), &pose).unwrap();
            assert_eq!(kept.len(), 8);
            for (k, x) in kept.iter().enumerate() {
                assert!((x - corner_signs(k) * 0.5).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_and_anisotropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pose = random_pose(&mut rng);
        for _ in 0..100 {
            let x = uniform_cube(&mut rng);
            let p = denormalize_point(&x, &pose);
            let (back, _) = normalize_points(&[p], &pose).unwrap();
            assert!((back[0] - x).norm() < 1e-9);
        }
        assert_eq!(denormalize_point(&Vec3::zeros(), &pose), pose.center);
        let stretched = PoseSize::axis_aligned(Vec3::zeros(), Vec3::new(1.0, 10.0, 1.0));
        assert_eq!(denormalize_point(&Vec3::new(0.0, 0.1, 0.0), &stretched), Vec3::new(0.0, 1.0, 0.0));
    }

    #[test]
    fn singular_scale() {
        let pose = PoseSize::axis_aligned(Vec3::zeros(), Vec3::new(1.0, 1e-12, 1.0));
        assert!(matches!(normalize_points(&[Vec3::zeros()], &pose), Err(ShapeError::SingularScale(_))));
    }

    #[test]
    fn solid_and_empty_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = sample_occupancy_points(&AnalyticShape::Solid, &|_| 0.5, 128, &mut rng);
        assert_eq!(s.len(), 128);
        assert!(s[..64].iter().all(|o| o.truth));
        let e = sample_occupancy_points(&AnalyticShape::Empty, &|_| 0.5, 128, &mut rng);
        assert!(e.iter().all(|o| !o.truth));
    }

    #[test]
    fn half_cube_uniform_fraction_within_binomial_bound() {
        let half = AnalyticShape::Block(Block { min: [-0.5, -0.5, -0.5], max: [0.0, 0.5, 0.5] });
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut inside = 0usize;
        let mut total = 0usize;
        while total < 10_000 {
            for s in sample_occupancy_points(&half, &|_| 0.5, 128, &mut rng).iter().take(64) {
                inside += s.truth as usize;
                total += 1;
            }
        }
        let frac = inside as f64 / total as f64;
        let sigma = (0.25 / total as f64).sqrt();
        assert!((frac - 0.5).abs() <= 3.0 * sigma, "fraction {frac}");
    }

    #[test]
    fn near_surface_samples_hug_the_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = sample_occupancy_points(&AnalyticShape::Solid, &|_| 0.5, 128, &mut rng);
        // The fine band (sigma 0.01) stays within 5 sigma of a face.
        for o in &s[96..] {
            assert!((o.point.amax() - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn lshape_surface_samples_are_on_the_boundary() {
        let l = AnalyticShape::LShape { notch_x: 0.4, notch_z: 0.3 };
        assert!((l.volume_fraction() - (1.0 - 0.12)).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..500 {
            let (p, n) = l.sample_surface(&mut rng).unwrap();
            assert!(l.contains(&(p - n * 1e-6)));
            assert!(!l.contains(&(p + n * 1e-6)));
        }
        assert!(AnalyticShape::Empty.sample_surface(&mut rng).is_none());
    }

    #[test]
    fn placed_shape_occupancy() {
        let pose = PoseSize::new(axis_angle(&Vec3::z(), 0.3), Vec3::new(1.0, 0.0, 0.0), Vec3::new(1.0, 2.0, 0.5));
        let placed = PlacedShape::new(AnalyticShape::Solid, pose.clone());
        assert_eq!(placed.occupancy(&pose.center), 1.0);
        assert_eq!(placed.occupancy(&Vec3::new(5.0, 0.0, 0.0)), 0.0);
    }
}
