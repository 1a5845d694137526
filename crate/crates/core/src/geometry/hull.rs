use std::collections::HashSet;

use nalgebra::SymmetricEigen;

use super::GeomError;
use crate::types::{Mat3, Vec3};

/// Thickness added along rank-deficient directions by [`inflate_degenerate`].
pub const INFLATE_EPS: f64 = 1e-6;

/// Relative tolerance for "point lies on a plane".
const PLANE_TOL: f64 = 1e-10;
/// Relative tolerance under which an affine extent counts as zero.
const RANK_TOL: f64 = 1e-9;

/// A planar facet: outward unit normal, offset (`normal . x <= offset`
/// inside) and its vertices in counter-clockwise order seen from outside.
#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    pub normal: Vec3,
    pub offset: f64,
    pub polygon: Vec<Vec3>,
}

/// A bounded convex polytope stored as a set of facets.
#[derive(Debug, Clone)]
pub struct ConvexPolytope {
    vertices: Vec<Vec3>,
    faces: Vec<Face>,
    volume: f64,
    min: Vec3,
    max: Vec3,
}

impl ConvexPolytope {
    pub(crate) fn from_faces(faces: Vec<Face>) -> Self {
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for p in faces.iter().flat_map(|f| f.polygon.iter()) {
            min = min.inf(p);
            max = max.sup(p);
        }
        let scale = (max - min).amax().max(f64::MIN_POSITIVE);
        let vertices = dedup_points(faces.iter().flat_map(|f| f.polygon.iter().copied()), 1e-12 * scale);
        let volume = faces_volume(&faces, &vertices);
        Self { vertices, faces, volume, min, max }
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    /// Half-spaces `(normal, offset)` whose intersection is the polytope.
    pub fn facets(&self) -> impl Iterator<Item = (Vec3, f64)> + '_ {
        self.faces.iter().map(|f| (f.normal, f.offset))
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    /// Axis-aligned bounds as `(min, max)`.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        (self.min, self.max)
    }

    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        self.faces.iter().all(|f| f.normal.dot(p) - f.offset <= tol)
    }

    /// The polytope moved by `x -> rotation * x + translation`.
    pub fn transformed(&self, rotation: &Mat3, translation: &Vec3) -> Self {
        let faces = self
            .faces
            .iter()
            .map(|f| {
                let normal = rotation * f.normal;
                let polygon: Vec<Vec3> = f.polygon.iter().map(|p| rotation * p + translation).collect();
                Face { normal, offset: normal.dot(&polygon[0]), polygon }
            })
            .collect();
        Self::from_faces(faces)
    }
}

/// Convex hull of a point set.
///
/// Facets are found by enumerating candidate supporting planes through point
/// triples; coplanar facets come out merged. Cost grows as `O(n^4)` in the
/// worst case, which is fine for the handful of box corners this is used on.
pub fn convex_hull(points: &[Vec3]) -> Result<ConvexPolytope, GeomError> {
    if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(GeomError::NonFinite);
    }
    if points.len() < 4 {
        return Err(GeomError::DegenerateInput(format!("{} points, need at least 4", points.len())));
    }
    let scale = bbox_scale(points);
    let pts = dedup_points(points.iter().copied(), 1e-12 * scale);
    let rank = affine_rank(&pts, scale);
    if rank < 3 {
        return Err(GeomError::DegenerateInput(format!("affine rank {rank}")));
    }

    let eps = PLANE_TOL * scale;
    let n = pts.len();
    // Best-conditioned triples first, so that a facet is found through a wide
    // triangle before any sliver inside it can produce a tilted copy.
    let mut triples = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let raw = (pts[j] - pts[i]).cross(&(pts[k] - pts[i]));
                let len = raw.norm();
                if len > 1e-12 * scale * scale {
                    triples.push((len, [i, j, k], raw / len));
                }
            }
        }
    }
    triples.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut on_face: Vec<Vec<bool>> = Vec::new();
    let mut faces = Vec::new();
    for (_, [i, j, k], mut normal) in triples {
        if on_face.iter().any(|m| m[i] && m[j] && m[k]) {
            continue;
        }
        let mut offset = normal.dot(&pts[i]);
        let (mut above, mut below) = (false, false);
        for p in &pts {
            let s = normal.dot(p) - offset;
            above |= s > eps;
            below |= s < -eps;
            if above && below {
                break;
            }
        }
        if above && below {
            continue;
        }
        if above {
            normal = -normal;
            offset = -offset;
        }
        let on: Vec<usize> = (0..n).filter(|&m| (normal.dot(&pts[m]) - offset).abs() <= eps).collect();
        if !seen.insert(on.clone()) {
            continue;
        }
        let on_pts: Vec<Vec3> = on.iter().map(|&m| pts[m]).collect();
        if let Some(face) = planar_face(&on_pts, &normal, scale) {
            let mut mask = vec![false; n];
            for &m in &on {
                mask[m] = true;
            }
            on_face.push(mask);
            faces.push(face);
        }
    }
    if faces.len() < 4 {
        return Err(GeomError::DegenerateInput("fewer than four facets".into()));
    }
    Ok(ConvexPolytope::from_faces(faces))
}

/// Thickens a flat (or lower-rank) point set by [`INFLATE_EPS`] along each
/// vanishing affine direction so that it has a proper hull.
pub fn inflate_degenerate(points: &[Vec3]) -> Vec<Vec3> {
    let scale = bbox_scale(points);
    let mut out = points.to_vec();
    for (dir, extent) in affine_extents(points) {
        if extent <= RANK_TOL * scale {
            let off = dir * (INFLATE_EPS * 0.5);
            out = out.iter().flat_map(|p| [p - off, p + off]).collect();
        }
    }
    out
}

/// Face through coplanar points: their 2D hull ordered counter-clockwise
/// about `normal`, with the plane refit to the polygon.
fn planar_face(points: &[Vec3], normal: &Vec3, scale: f64) -> Option<Face> {
    let polygon = plane_polygon(points, normal, scale);
    if polygon.len() < 3 {
        return None;
    }
    let mut newell = Vec3::zeros();
    for (a, b) in polygon.iter().zip(polygon.iter().cycle().skip(1)) {
        newell += a.cross(b);
    }
    let area2 = newell.norm();
    if area2 <= 1e-14 * scale * scale {
        return None;
    }
    let mut fitted = newell / area2;
    if fitted.dot(normal) < 0.0 {
        fitted = -fitted;
    }
    let offset = polygon.iter().map(|p| fitted.dot(p)).sum::<f64>() / polygon.len() as f64;
    Some(Face { normal: fitted, offset, polygon })
}

/// Convex polygon (counter-clockwise about `normal`) spanned by points that
/// lie in one plane. Collinear and duplicate points are dropped.
pub(crate) fn plane_polygon(points: &[Vec3], normal: &Vec3, scale: f64) -> Vec<Vec3> {
    if points.len() < 3 {
        return Vec::new();
    }
    let helper = if normal.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = (helper - normal * normal.dot(&helper)).normalize();
    let v = normal.cross(&u);
    let origin = points[0];
    let mut pts: Vec<(f64, f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = p - origin;
            (d.dot(&u), d.dot(&v), i)
        })
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let tol = 1e-13 * scale * scale;
    let cross = |o: &(f64, f64, usize), a: &(f64, f64, usize), b: &(f64, f64, usize)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(f64, f64, usize)> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= tol {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<(f64, f64, usize)> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= tol {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() < 3 {
        return Vec::new();
    }
    lower.into_iter().map(|(_, _, i)| points[i]).collect()
}

fn faces_volume(faces: &[Face], vertices: &[Vec3]) -> f64 {
    if vertices.is_empty() {
        return 0.0;
    }
    let o = vertices.iter().sum::<Vec3>() / vertices.len() as f64;
    let mut six_v = 0.0;
    for f in faces {
        let p0 = f.polygon[0] - o;
        for w in f.polygon[1..].windows(2) {
            six_v += p0.dot(&(w[0] - o).cross(&(w[1] - o)));
        }
    }
    (six_v / 6.0).max(0.0)
}

pub(crate) fn bbox_scale(points: &[Vec3]) -> f64 {
    let mut min = Vec3::repeat(f64::INFINITY);
    let mut max = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        min = min.inf(p);
        max = max.sup(p);
    }
    let s = (max - min).amax();
    if s.is_finite() && s > 0.0 {
        s
    } else {
        1.0
    }
}

fn dedup_points(points: impl Iterator<Item = Vec3>, tol: f64) -> Vec<Vec3> {
    let mut out: Vec<Vec3> = Vec::new();
    for p in points {
        if !out.iter().any(|q| (q - p).amax() <= tol) {
            out.push(p);
        }
    }
    out
}

/// Principal directions of a point set and the point spread along each.
fn affine_extents(points: &[Vec3]) -> [(Vec3, f64); 3] {
    let n = points.len().max(1) as f64;
    let centroid = points.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / n);
    std::array::from_fn(|i| {
        let dir: Vec3 = eig.eigenvectors.column(i).into_owned();
        let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let t = dir.dot(&(p - centroid));
            (lo.min(t), hi.max(t))
        });
        (dir, if points.is_empty() { 0.0 } else { hi - lo })
    })
}

fn affine_rank(points: &[Vec3], scale: f64) -> usize {
    affine_extents(points).iter().filter(|(_, e)| *e > RANK_TOL * scale).count()
}
