//! Convex-convex intersection by successive half-space clipping.

use super::hull::{plane_polygon, ConvexPolytope, Face};
use crate::types::Vec3;

/// Volume of `a ∩ b`. Zero when the polytopes are disjoint or only touch.
pub fn intersection_volume(a: &ConvexPolytope, b: &ConvexPolytope) -> f64 {
    a.intersection(b).map_or(0.0, |p| p.volume())
}

impl ConvexPolytope {
    /// `self ∩ other`, or `None` when the intersection has no volume.
    pub fn intersection(&self, other: &ConvexPolytope) -> Option<ConvexPolytope> {
        let (amin, amax) = self.bounds();
        let (bmin, bmax) = other.bounds();
        if (0..3).any(|i| amin[i] > bmax[i] || bmin[i] > amax[i]) {
            return None;
        }
        let scale = (amax - amin).amax().max((bmax - bmin).amax());
        let eps = 1e-11 * scale;
        let mut faces = self.faces().to_vec();
        for f in other.faces() {
            faces = clip_faces(&faces, &f.normal, f.offset, eps, scale)?;
        }
        let out = ConvexPolytope::from_faces(faces);
        (out.volume() > 0.0).then_some(out)
    }

    /// The part of `self` with `normal . x <= offset`.
    pub fn clip(&self, normal: &Vec3, offset: f64) -> Option<ConvexPolytope> {
        let (min, max) = self.bounds();
        let scale = (max - min).amax();
        let faces = clip_faces(self.faces(), normal, offset, 1e-11 * scale, scale)?;
        let out = ConvexPolytope::from_faces(faces);
        (out.volume() > 0.0).then_some(out)
    }
}

/// Clips a closed set of facets against one half-space, closing the cut
/// with a cap facet lying in the clipping plane.
fn clip_faces(faces: &[Face], normal: &Vec3, offset: f64, eps: f64, scale: f64) -> Option<Vec<Face>> {
    let dist = |p: &Vec3| normal.dot(p) - offset;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in faces.iter().flat_map(|f| f.polygon.iter()) {
        let d = dist(p);
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if hi <= eps {
        return Some(faces.to_vec());
    }
    if lo >= -eps {
        return None;
    }

    let mut out = Vec::with_capacity(faces.len() + 1);
    let mut cap: Vec<Vec3> = Vec::new();
    for face in faces {
        let poly = &face.polygon;
        let mut clipped = Vec::with_capacity(poly.len() + 1);
        for (i, cur) in poly.iter().enumerate() {
            let next = &poly[(i + 1) % poly.len()];
            let (dc, dn) = (dist(cur), dist(next));
            let cur_in = dc <= eps;
            let next_in = dn <= eps;
            if cur_in {
                clipped.push(*cur);
                if dc.abs() <= eps {
                    cap.push(*cur);
                }
            }
            if cur_in != next_in && (dc.abs() > eps && dn.abs() > eps) {
                let t = dc / (dc - dn);
                let p = cur + (next - cur) * t;
                clipped.push(p);
                cap.push(p);
            }
        }
        let polygon = plane_polygon(&clipped, &face.normal, scale);
        if polygon.len() >= 3 {
            out.push(Face { normal: face.normal, offset: face.offset, polygon });
        }
    }
    let cap_polygon = plane_polygon(&cap, normal, scale);
    if cap_polygon.len() >= 3 {
        out.push(Face { normal: *normal, offset, polygon: cap_polygon });
    }
    (out.len() >= 4).then_some(out)
}
