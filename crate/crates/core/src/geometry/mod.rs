//! Cuboid corners, convex hulls, exact convex intersection volume, IoU and
//! projection onto SO(3).

mod clip;
mod hull;

pub use clip::intersection_volume;
pub use hull::{convex_hull, inflate_degenerate, ConvexPolytope, Face};

use nalgebra::SVD;

use crate::types::{Mat3, PoseSize, Vec3};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeomError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("matrix has two or more vanishing singular values")]
    SingularInput,
    #[error("non-finite coordinate")]
    NonFinite,
}

/// Sign pattern of corner `k`: x is the most significant bit, z the least,
/// a set bit meaning `+`.
pub fn corner_signs(k: usize) -> Vec3 {
    let s = |bit: usize| if k & bit != 0 { 1.0 } else { -1.0 };
    Vec3::new(s(4), s(2), s(1))
}

/// The eight box corners `center + R (sigma_k * size / 2)` in binary-count
/// order (see [`corner_signs`]).
pub fn cuboid_corners(pose: &PoseSize) -> [Vec3; 8] {
    let half = pose.size * 0.5;
    std::array::from_fn(|k| pose.center + pose.rotation * corner_signs(k).component_mul(&half))
}

pub fn box_polytope(pose: &PoseSize) -> Result<ConvexPolytope, GeomError> {
    convex_hull(&cuboid_corners(pose))
}

/// Volume IoU of two convex polytopes. Returns 0 when the union is empty.
pub fn iou(a: &ConvexPolytope, b: &ConvexPolytope) -> f64 {
    let inter = intersection_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Nearest rotation in Frobenius norm.
///
/// Uses the SVD `m = U S V^T` and returns `U diag(1, 1, +-1) V^T`, flipping
/// the direction of the smallest singular value when `det(U V^T) < 0`.
pub fn project_to_so3(m: &Mat3) -> Result<Mat3, GeomError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(GeomError::NonFinite);
    }
    let svd = SVD::new(*m, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeomError::SingularInput),
    };
    let sv = svd.singular_values;
    if sv.iter().filter(|&&s| s < 1e-9).count() >= 2 {
        return Err(GeomError::SingularInput);
    }
    let smallest = sv.imin();
    let mut d = Vec3::repeat(1.0);
    if (u * v_t).determinant() < 0.0 {
        d[smallest] = -1.0;
    }
    Ok(u * Mat3::from_diagonal(&d) * v_t)
}

/// Rotation matrix for `angle` radians about the unit vector `axis`.
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let k = axis.normalize();
    let kx = k.cross_matrix();
    Mat3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}
