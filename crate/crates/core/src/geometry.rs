//! Triangle-mesh queries used by the simulator and asset loading.

use nalgebra::{Matrix3, Rotation3};
use serde::{Deserialize, Serialize};

use crate::handmodel::Vec3;

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation matrix of a rotation vector (axis times angle).
pub fn rotvec_to_matrix(v: [f64; 3]) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(Vec3::from(v)).into_inner()
}

pub fn matrix_to_rotvec(m: &Matrix3<f64>) -> [f64; 3] {
    let v = Rotation3::from_matrix_unchecked(*m).scaled_axis();
    [v.x, v.y, v.z]
}

/// Rigid transform x -> R x + t.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

/// Closest point on a mesh surface.
#[derive(Clone, Copy, Debug)]
pub struct SurfaceHit {
    pub point: Vec3,
    pub distance: f64,
    pub face: usize,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Self {
        Self { vertices, faces }
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.triangle(f);
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vec3::zeros()
        }
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Every undirected edge used by exactly two faces with opposite orientation.
    pub fn is_watertight(&self) -> bool {
        use std::collections::HashMap;
        if self.faces.is_empty() {
            return false;
        }
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *directed.entry((a, b)).or_insert(0) += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    pub fn centroid(&self) -> Vec3 {
        let mut sum = Vec3::zeros();
        for v in &self.vertices {
            sum += v;
        }
        sum / self.vertices.len().max(1) as f64
    }

    /// Center of mass of the enclosed solid, assuming uniform density.
    /// Falls back to the vertex centroid for open or flat meshes.
    pub fn volume_centroid(&self) -> Vec3 {
        let mut vol = 0.0;
        let mut acc = Vec3::zeros();
        for f in 0..self.faces.len() {
            let [a, b, c] = self.triangle(f);
            let v = a.dot(&b.cross(&c)) / 6.0;
            vol += v;
            acc += (a + b + c) * (v / 4.0);
        }
        if vol.abs() < 1e-15 {
            self.centroid()
        } else {
            acc / vol
        }
    }

    pub fn bounding_sphere(&self) -> (Vec3, f64) {
        let c = self.centroid();
        let r = self
            .vertices
            .iter()
            .map(|v| (v - c).norm())
            .fold(0.0, f64::max);
        (c, r)
    }

    pub fn min_z(&self) -> f64 {
        self.vertices
            .iter()
            .map(|v| v.z)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn transformed(&self, pose: &Pose) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| pose.apply(v)).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn scaled(&self, s: f64) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| v * s).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn closest_point(&self, p: &Vec3) -> Option<SurfaceHit> {
        let mut best: Option<SurfaceHit> = None;
        for f in 0..self.faces.len() {
            let [a, b, c] = self.triangle(f);
            let q = closest_point_on_triangle(p, &a, &b, &c);
            let d = (q - p).norm();
            if best.map_or(true, |h| d < h.distance) {
                best = Some(SurfaceHit {
                    point: q,
                    distance: d,
                    face: f,
                });
            }
        }
        best
    }

    /// Generalized winding number; about 1 inside a closed outward-oriented mesh.
    pub fn winding_number(&self, p: &Vec3) -> f64 {
        let mut total = 0.0;
        for f in 0..self.faces.len() {
            let [a, b, c] = self.triangle(f);
            let (a, b, c) = (a - p, b - p, c - p);
            let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
            let num = a.dot(&b.cross(&c));
            let den = la * lb * lc + a.dot(&b) * lc + b.dot(&c) * la + c.dot(&a) * lb;
            total += 2.0 * num.atan2(den);
        }
        total / (4.0 * std::f64::consts::PI)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.winding_number(p) > 0.5
    }

    /// Distance to the solid: zero inside, surface distance outside.
    pub fn solid_distance(&self, p: &Vec3) -> Option<(f64, SurfaceHit)> {
        let hit = self.closest_point(p)?;
        if self.contains(p) {
            Some((0.0, hit))
        } else {
            Some((hit.distance, hit))
        }
    }

    /// Nearest ray hit distance along `dir` (unit), Möller–Trumbore.
    pub fn raycast(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for f in 0..self.faces.len() {
            let [a, b, c] = self.triangle(f);
            let e1 = b - a;
            let e2 = c - a;
            let h = dir.cross(&e2);
            let det = e1.dot(&h);
            if det.abs() < 1e-14 {
                continue;
            }
            let inv = 1.0 / det;
            let s = origin - a;
            let u = inv * s.dot(&h);
            if !(0.0..=1.0).contains(&u) {
                continue;
            }
            let q = s.cross(&e1);
            let v = inv * dir.dot(&q);
            if v < 0.0 || u + v > 1.0 {
                continue;
            }
            let t = inv * e2.dot(&q);
            if t > 1e-12 && best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, f));
            }
        }
        best
    }
}

/// Closest point on triangle abc to p (Ericson, Real-Time Collision Detection 5.1.5).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Axis-aligned box centered at the origin, outward-wound.
pub fn box_mesh(size: [f64; 3]) -> TriMesh {
    let [hx, hy, hz] = [size[0] / 2.0, size[1] / 2.0, size[2] / 2.0];
    let mut vertices = Vec::with_capacity(8);
    for i in 0..8 {
        vertices.push(Vec3::new(
            if i & 1 == 0 { -hx } else { hx },
            if i & 2 == 0 { -hy } else { hy },
            if i & 4 == 0 { -hz } else { hz },
        ));
    }
    let quads = [
        [0, 2, 3, 1], // -z
        [4, 5, 7, 6], // +z
        [0, 1, 5, 4], // -y
        [2, 6, 7, 3], // +y
        [0, 4, 6, 2], // -x
        [1, 3, 7, 5], // +x
    ];
    let mut faces = Vec::with_capacity(12);
    for q in quads {
        faces.push([q[0], q[1], q[2]]);
        faces.push([q[0], q[2], q[3]]);
    }
    TriMesh::new(vertices, faces)
}

/// Closed cylinder along z centered at the origin.
pub fn cylinder_mesh(radius: f64, height: f64, segments: usize) -> TriMesh {
    let n = segments.max(3);
    let hz = height / 2.0;
    let mut vertices = Vec::with_capacity(2 * n + 2);
    for i in 0..n {
        let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        vertices.push(Vec3::new(radius * a.cos(), radius * a.sin(), -hz));
        vertices.push(Vec3::new(radius * a.cos(), radius * a.sin(), hz));
    }
    let bottom = vertices.len();
    vertices.push(Vec3::new(0.0, 0.0, -hz));
    let top = vertices.len();
    vertices.push(Vec3::new(0.0, 0.0, hz));
    let mut faces = Vec::with_capacity(4 * n);
    for i in 0..n {
        let j = (i + 1) % n;
        let (b0, t0, b1, t1) = (2 * i, 2 * i + 1, 2 * j, 2 * j + 1);
        faces.push([b0, b1, t1]);
        faces.push([b0, t1, t0]);
        faces.push([bottom, b1, b0]);
        faces.push([top, t0, t1]);
    }
    TriMesh::new(vertices, faces)
}

/// Signed distance to a closed mesh with precomputed face planes.
///
/// Convex meshes answer inside queries and far-away outside queries from the
/// planes alone; other meshes fall back to closest point plus winding number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshQuery {
    pub mesh: TriMesh,
    planes: Vec<(Vec3, f64)>,
    pub convex: bool,
    pub center: Vec3,
    pub radius: f64,
}

/// Signed distance (negative inside) with the face it was measured against.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignedHit {
    pub distance: f64,
    pub face: usize,
    pub normal: Vec3,
}

impl MeshQuery {
    pub fn new(mesh: TriMesh) -> Self {
        let planes: Vec<(Vec3, f64)> = (0..mesh.faces.len())
            .map(|f| {
                let n = mesh.face_normal(f);
                (n, n.dot(&mesh.vertices[mesh.faces[f][0]]))
            })
            .collect();
        let (center, radius) = mesh.bounding_sphere();
        let eps = 1e-9 * radius.max(1e-12);
        let convex = mesh.is_watertight()
            && planes
                .iter()
                .all(|(n, d)| mesh.vertices.iter().all(|v| n.dot(v) - d <= eps));
        Self {
            mesh,
            planes,
            convex,
            center,
            radius,
        }
    }

    fn max_plane(&self, p: &Vec3) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (f, (n, d)) in self.planes.iter().enumerate() {
            let v = n.dot(p) - d;
            if v > best.0 {
                best = (v, f);
            }
        }
        best
    }

    /// Exact signed distance when it is at most `cutoff`, otherwise `None`.
    pub fn signed_distance_within(&self, p: &Vec3, cutoff: f64) -> Option<SignedHit> {
        if (p - self.center).norm() - self.radius > cutoff {
            return None;
        }
        if self.convex {
            let (m, f) = self.max_plane(p);
            if m > cutoff {
                return None;
            }
            if m <= 0.0 {
                return Some(SignedHit {
                    distance: m,
                    face: f,
                    normal: self.planes[f].0,
                });
            }
        }
        let hit = self.mesh.closest_point(p)?;
        let inside = if self.convex {
            false
        } else {
            self.mesh.contains(p)
        };
        let distance = if inside { -hit.distance } else { hit.distance };
        if distance > cutoff {
            return None;
        }
        Some(SignedHit {
            distance,
            face: hit.face,
            normal: self.planes[hit.face].0,
        })
    }

    pub fn signed_distance(&self, p: &Vec3) -> Option<SignedHit> {
        self.signed_distance_within(p, f64::INFINITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_are_watertight_and_outward() {
        for m in [box_mesh([0.1, 0.2, 0.3]), cylinder_mesh(0.05, 0.1, 16)] {
            assert!(m.is_watertight());
            assert!((m.winding_number(&Vec3::zeros()) - 1.0).abs() < 1e-9);
            assert!(m.winding_number(&Vec3::new(1.0, 1.0, 1.0)).abs() < 1e-9);
            let c = m.volume_centroid();
            assert!(c.norm() < 1e-12);
        }
    }

    #[test]
    fn open_mesh_is_flagged() {
        let mut m = box_mesh([1.0, 1.0, 1.0]);
        m.faces.pop();
        assert!(!m.is_watertight());
    }

    #[test]
    fn box_distances() {
        let m = box_mesh([0.1, 0.1, 0.1]);
        let (d, hit) = m.solid_distance(&Vec3::new(0.08, 0.0, 0.0)).unwrap();
        assert!((d - 0.03).abs() < 1e-12);
        assert!((m.face_normal(hit.face) - Vec3::x()).norm() < 1e-12);
        let (d, _) = m.solid_distance(&Vec3::new(0.01, 0.0, 0.0)).unwrap();
        assert_eq!(d, 0.0);
        let (t, _) = m.raycast(&Vec3::new(0.0, 0.0, 1.0), &-Vec3::z()).unwrap();
        assert!((t - 0.95).abs() < 1e-12);
    }

    #[test]
    fn pose_inverse_round_trip() {
        let p = Pose::new(rotvec_to_matrix([0.3, -0.2, 0.5]), Vec3::new(1.0, 2.0, 3.0));
        let x = Vec3::new(0.1, -0.4, 0.7);
        assert!((p.inverse().apply(&p.apply(&x)) - x).norm() < 1e-12);
        let r = matrix_to_rotvec(&p.rotation);
        assert!((Vec3::from(r) - Vec3::new(0.3, -0.2, 0.5)).norm() < 1e-12);
    }

    #[test]
    fn mesh_query_matches_brute_force() {
        let q = MeshQuery::new(box_mesh([0.1, 0.2, 0.3]));
        assert!(q.convex);
        let c = MeshQuery::new(cylinder_mesh(0.05, 0.1, 16));
        assert!(c.convex);
        for (mq, p) in [
            (&q, Vec3::new(0.0, 0.0, 0.15)),
            (&q, Vec3::new(0.01, 0.02, 0.1)),
            (&q, Vec3::new(0.2, 0.0, 0.15)),
            (&c, Vec3::new(0.0, 0.0, 0.05)),
            (&c, Vec3::new(0.06, 0.01, 0.05)),
            (&c, Vec3::new(0.0, 0.0, 0.3)),
        ] {
            let h = mq.signed_distance(&p).unwrap();
            let (sd, hit) = mq.mesh.solid_distance(&p).unwrap();
            if sd > 0.0 {
                assert!((h.distance - sd).abs() < 1e-12);
            } else {
                assert!(h.distance <= 0.0);
                assert!((h.distance + hit.distance).abs() < 1e-9);
            }
        }
        assert!(q
            .signed_distance_within(&Vec3::new(1.0, 0.0, 0.0), 0.01)
            .is_none());
    }
}
