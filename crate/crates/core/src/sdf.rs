//! Signed distance to a triangle mesh.
//!
//! Distances are exact point-triangle distances found through a bounding
//! volume hierarchy. The sign comes from the angle-weighted pseudo-normal of
//! the closest feature (face, edge or vertex), negative inside.

use std::collections::HashMap;

use nalgebra::Vector3;

type V = Vector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Feature {
    Face,
    Edge(u8),
    Vertex(u8),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdfHit {
    pub distance: f64,
    pub closest: V,
    pub face: u32,
    pub feature: Feature,
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: V,
    hi: V,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: V::repeat(f64::INFINITY),
            hi: V::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &V) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    fn dist2(&self, p: &V) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let v = (self.lo[k] - p[k]).max(0.0).max(p[k] - self.hi[k]);
            d += v * v;
        }
        d
    }
}

enum Node {
    Leaf { bounds: Aabb, start: u32, end: u32 },
    Inner { bounds: Aabb, left: u32, right: u32 },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

pub struct MeshSdf {
    vertices: Vec<V>,
    faces: Vec<[u32; 3]>,
    face_normals: Vec<V>,
    vertex_normals: Vec<V>,
    edge_normals: HashMap<(u32, u32), V>,
    order: Vec<u32>,
    nodes: Vec<Node>,
}

const LEAF_SIZE: usize = 4;

fn edge_key(a: u32, b: u32) -> (u32, u32) {
    (a.min(b), a.max(b))
}

impl MeshSdf {
    pub fn new(vertices: &[V], faces: &[[u32; 3]]) -> Self {
        let mut face_normals = Vec::with_capacity(faces.len());
        let mut vertex_normals = vec![V::zeros(); vertices.len()];
        let mut edge_normals: HashMap<(u32, u32), V> = HashMap::new();
        for f in faces {
            let p = f.map(|i| vertices[i as usize]);
            let n = (p[1] - p[0]).cross(&(p[2] - p[0]));
            let n = if n.norm() > 0.0 { n.normalize() } else { V::zeros() };
            face_normals.push(n);
            for k in 0..3 {
                let a = p[(k + 1) % 3] - p[k];
                let b = p[(k + 2) % 3] - p[k];
                let (la, lb) = (a.norm(), b.norm());
                if la > 0.0 && lb > 0.0 {
                    let angle = (a.dot(&b) / (la * lb)).clamp(-1.0, 1.0).acos();
                    vertex_normals[f[k] as usize] += angle * n;
                }
                *edge_normals.entry(edge_key(f[k], f[(k + 1) % 3])).or_insert_with(V::zeros) += n;
            }
        }
        let mut sdf = Self {
            vertices: vertices.to_vec(),
            faces: faces.to_vec(),
            face_normals,
            vertex_normals,
            edge_normals,
            order: (0..faces.len() as u32).collect(),
            nodes: Vec::new(),
        };
        if !faces.is_empty() {
            let centroids: Vec<V> = faces
                .iter()
                .map(|f| f.iter().map(|&i| vertices[i as usize]).sum::<V>() / 3.0)
                .collect();
            let n = faces.len();
            sdf.build(&centroids, 0, n);
        }
        sdf
    }

    fn face_bounds(&self, f: u32) -> Aabb {
        let mut b = Aabb::empty();
        for &i in &self.faces[f as usize] {
            b.grow(&self.vertices[i as usize]);
        }
        b
    }

    fn build(&mut self, centroids: &[V], start: usize, end: usize) -> u32 {
        let mut bounds = Aabb::empty();
        let mut cb = Aabb::empty();
        for &f in &self.order[start..end] {
            let fb = self.face_bounds(f);
            bounds.grow(&fb.lo);
            bounds.grow(&fb.hi);
            cb.grow(&centroids[f as usize]);
        }
        let id = self.nodes.len() as u32;
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf {
                bounds,
                start: start as u32,
                end: end as u32,
            });
            return id;
        }
        let ext = cb.hi - cb.lo;
        let axis = ext.imax();
        let mid = (start + end) / 2;
        self.order[start..end].sort_by(|&a, &b| {
            centroids[a as usize][axis]
                .total_cmp(&centroids[b as usize][axis])
                .then(a.cmp(&b))
        });
        self.nodes.push(Node::Leaf {
            bounds,
            start: 0,
            end: 0,
        });
        let left = self.build(centroids, start, mid);
        let right = self.build(centroids, mid, end);
        self.nodes[id as usize] = Node::Inner { bounds, left, right };
        id
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Closest surface point. Ties between faces go to the lower face index.
    pub fn closest(&self, p: &V) -> Option<SdfHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<SdfHit> = None;
        let mut best_d2 = f64::INFINITY;
        let mut stack = vec![0u32];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n as usize];
            if node.bounds().dist2(p) > best_d2 {
                continue;
            }
            match node {
                Node::Leaf { start, end, .. } => {
                    for &f in &self.order[*start as usize..*end as usize] {
                        let tri = self.faces[f as usize].map(|i| self.vertices[i as usize]);
                        let (c, feature) = closest_on_triangle(p, &tri);
                        let d2 = (p - c).norm_squared();
                        let better = match &best {
                            None => true,
                            Some(b) => d2 < best_d2 || (d2 == best_d2 && f < b.face),
                        };
                        if better {
                            best_d2 = d2;
                            best = Some(SdfHit {
                                distance: d2.sqrt(),
                                closest: c,
                                face: f,
                                feature,
                            });
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.nodes[*left as usize].bounds().dist2(p);
                    let dr = self.nodes[*right as usize].bounds().dist2(p);
                    if dl <= dr {
                        stack.push(*right);
                        stack.push(*left);
                    } else {
                        stack.push(*left);
                        stack.push(*right);
                    }
                }
            }
        }
        best
    }

    pub fn pseudo_normal(&self, hit: &SdfHit) -> V {
        let f = self.faces[hit.face as usize];
        match hit.feature {
            Feature::Face => self.face_normals[hit.face as usize],
            Feature::Edge(k) => {
                let k = k as usize;
                self.edge_normals[&edge_key(f[k], f[(k + 1) % 3])]
            }
            Feature::Vertex(k) => self.vertex_normals[f[k as usize] as usize],
        }
    }

    /// Signed distance and the closest-point record it came from.
    pub fn query_hit(&self, p: &V) -> Option<(f64, SdfHit)> {
        let hit = self.closest(p)?;
        let n = self.pseudo_normal(&hit);
        let sign = if (p - hit.closest).dot(&n) < 0.0 { -1.0 } else { 1.0 };
        Some((sign * hit.distance, hit))
    }

    /// Signed distance, `+inf` for an empty mesh.
    pub fn query(&self, p: &V) -> f64 {
        self.query_hit(p).map_or(f64::INFINITY, |(d, _)| d)
    }

    /// Signed distance and its gradient with respect to `p`.
    pub fn query_grad(&self, p: &V) -> Option<(f64, V, SdfHit)> {
        let (d, hit) = self.query_hit(p)?;
        let g = if d != 0.0 {
            (p - hit.closest) / d
        } else {
            let n = self.pseudo_normal(&hit);
            if n.norm() > 0.0 {
                n.normalize()
            } else {
                n
            }
        };
        Some((d, g, hit))
    }
}

/// Closest point on a triangle and the region it lies in.
fn closest_on_triangle(p: &V, t: &[V; 3]) -> (V, Feature) {
    let (a, b, c) = (t[0], t[1], t[2]);
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, Feature::Vertex(0));
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, Feature::Vertex(1));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, Feature::Edge(0));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, Feature::Vertex(2));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, Feature::Edge(2));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, Feature::Edge(1));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, Feature::Face)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procedural;

    #[test]
    fn cube_center_and_corner() {
        let (v, f) = procedural::unit_cube();
        let sdf = MeshSdf::new(&v, &f);
        assert!((sdf.query(&V::repeat(0.5)) + 0.5).abs() < 1e-12);
        assert!(sdf.query(&V::zeros()).abs() < 1e-12);
        assert!((sdf.query(&V::new(0.5, 0.5, 1.25)) - 0.25).abs() < 1e-12);
        // Outside past an edge and past a corner.
        assert!((sdf.query(&V::new(1.3, 0.5, 1.4)) - 0.5).abs() < 1e-12);
        assert!((sdf.query(&V::new(-1.0, -1.0, -1.0)) - 3f64.sqrt()).abs() < 1e-12);
        assert!((sdf.query(&V::new(0.9, 0.95, 0.5)) + 0.05).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_closest() {
        let (v, f) = procedural::icosphere(2);
        let sdf = MeshSdf::new(&v, &f);
        for k in 0..200 {
            let t = k as f64 * 0.37;
            let p = V::new(t.sin() * 1.3, (t * 1.7).cos() * 0.9, (t * 0.3).sin() * 1.1);
            let brute = f
                .iter()
                .map(|tri| {
                    let tri = tri.map(|i| v[i as usize]);
                    (p - closest_on_triangle(&p, &tri).0).norm()
                })
                .fold(f64::INFINITY, f64::min);
            let (d, _) = sdf.query_hit(&p).unwrap();
            assert!((d.abs() - brute).abs() < 1e-12);
            let r = p.norm();
            if !(0.9..=1.0).contains(&r) {
                assert_eq!(d < 0.0, r < 0.9, "r = {r}");
            }
        }
    }
}
