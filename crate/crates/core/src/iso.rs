//! Dual marching cubes over a per-vertex field with weighted dual-vertex placement.

use std::collections::HashMap;
use std::io::Write;
use std::rc::Rc;

use rand::Rng as _;
use triplane_tensor::{Array, Graph, Rng, Scalar, Var};

use crate::decode::{grid_vertices, FieldVars, FlexiField};
use crate::error::{CoreError, Result};

pub const MIN_FACE_AREA: f64 = 1e-12;

/// Triangle mesh with optional per-vertex RGB.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurfaceMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub colors: Option<Vec<[f64; 3]>>,
}

/// Area-weighted surface points with their triangle and barycentric coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSamples {
    pub points: Vec<[f64; 3]>,
    pub faces: Vec<usize>,
    pub barycentrics: Vec<[f64; 3]>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn len(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn triangle_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    0.5 * len(cross(sub(b, a), sub(c, a)))
}

impl SurfaceMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f];
        triangle_area(self.vertices[a], self.vertices[b], self.vertices[c])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Number of faces using each undirected edge.
    pub fn edge_face_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Every edge is shared by exactly two faces.
    pub fn is_watertight(&self) -> bool {
        !self.faces.is_empty() && self.edge_face_counts().values().all(|&c| c == 2)
    }

    /// `V - E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for f in &self.faces {
            for &v in f {
                used[v] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_face_counts().len() as i64 + self.faces.len() as i64
    }

    /// Outward-facing signed volume; positive for counter-clockwise winding seen from outside.
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|&[a, b, c]| {
                let (p, q, r) = (self.vertices[a], self.vertices[b], self.vertices[c]);
                let x = cross(q, r);
                (p[0] * x[0] + p[1] * x[1] + p[2] * x[2]) / 6.0
            })
            .sum()
    }

    pub fn surface_samples(&self, k: usize, rng: &mut Rng) -> Result<SurfaceSamples> {
        if self.faces.is_empty() {
            return Err(CoreError::Empty("mesh"));
        }
        let mut cdf = Vec::with_capacity(self.faces.len());
        let mut acc = 0.0;
        for f in 0..self.faces.len() {
            acc += self.face_area(f);
            cdf.push(acc);
        }
        if acc <= 0.0 {
            return Err(CoreError::Empty("mesh with positive area"));
        }
        let mut out = SurfaceSamples {
            points: Vec::with_capacity(k),
            faces: Vec::with_capacity(k),
            barycentrics: Vec::with_capacity(k),
        };
        for _ in 0..k {
            let u = rng.random::<f64>() * acc;
            let f = cdf.partition_point(|&c| c <= u).min(self.faces.len() - 1);
            let s = rng.random::<f64>().sqrt();
            let r2 = rng.random::<f64>();
            let bary = [1.0 - s, s * (1.0 - r2), s * r2];
            let [a, b, c] = self.faces[f];
            let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
            let p = std::array::from_fn(|d| bary[0] * pa[d] + bary[1] * pb[d] + bary[2] * pc[d]);
            out.points.push(p);
            out.faces.push(f);
            out.barycentrics.push(bary);
        }
        Ok(out)
    }

    fn color_bytes(&self, v: usize) -> Option<[u8; 3]> {
        self.colors
            .as_ref()
            .map(|c| c[v].map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8))
    }

    /// Wavefront OBJ; colors are appended to `v` lines when present.
    pub fn write_obj(&self, mut w: impl Write) -> std::io::Result<()> {
        for (i, p) in self.vertices.iter().enumerate() {
            match &self.colors {
                Some(c) => writeln!(w, "v {} {} {} {} {} {}", p[0], p[1], p[2], c[i][0], c[i][1], c[i][2])?,
                None => writeln!(w, "v {} {} {}", p[0], p[1], p[2])?,
            }
        }
        for f in &self.faces {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        Ok(())
    }

    /// ASCII PLY with optional `uchar` vertex colors.
    pub fn write_ply(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", self.vertices.len())?;
        writeln!(w, "property float x\nproperty float y\nproperty float z")?;
        if self.colors.is_some() {
            writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
        }
        writeln!(w, "element face {}\nproperty list uchar int vertex_indices\nend_header", self.faces.len())?;
        for (i, p) in self.vertices.iter().enumerate() {
            match self.color_bytes(i) {
                Some(c) => writeln!(w, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2])?,
                None => writeln!(w, "{} {} {}", p[0], p[1], p[2])?,
            }
        }
        for f in &self.faces {
            writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
        }
        Ok(())
    }
}

/// Sign-crossing structure of a field; fixed for any perturbation that keeps the sign pattern.
#[derive(Debug, Clone)]
pub struct Topology {
    pub grid: usize,
    /// Endpoint grid-vertex indices of each crossing edge.
    pub edge_a: Rc<Vec<usize>>,
    pub edge_b: Rc<Vec<usize>>,
    /// `(crossing edge, dual slot)` incidence pairs.
    pub inc_edge: Rc<Vec<usize>>,
    pub inc_slot: Rc<Vec<usize>>,
    pub num_slots: usize,
    /// Oriented quads over dual slots.
    pub quads: Vec<[usize; 4]>,
}

/// Sign used for topology; exact zeros count as positive.
#[inline]
fn inside(s: f64) -> bool {
    let s = if s == 0.0 { 1e-8 } else { s };
    s < 0.0
}

impl Topology {
    pub fn new(grid: usize, sdf: &[f64]) -> Result<Self> {
        let n = grid + 1;
        if sdf.len() != n * n * n {
            return Err(CoreError::Dimension(
                "Topology",
                format!("{} sdf values for grid {grid}", sdf.len()),
            ));
        }
        let vid = |i: usize, j: usize, k: usize| (i * n + j) * n + k;
        let cid = |i: usize, j: usize, k: usize| (i * grid + j) * grid + k;
        let mut edge_a = Vec::new();
        let mut edge_b = Vec::new();
        let mut edge_cubes: Vec<Vec<usize>> = Vec::new();
        let mut quad_cubes: Vec<Option<[usize; 4]>> = Vec::new();
        let mut flip = Vec::new();
        let mut cube_used = vec![false; grid * grid * grid];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let a = vid(i, j, k);
                    for axis in 0..3 {
                        let (bi, bj, bk) = match axis {
                            0 => (i + 1, j, k),
                            1 => (i, j + 1, k),
                            _ => (i, j, k + 1),
                        };
                        if bi >= n || bj >= n || bk >= n {
                            continue;
                        }
                        let b = vid(bi, bj, bk);
                        if inside(sdf[a]) == inside(sdf[b]) {
                            continue;
                        }
                        // the two axes orthogonal to the edge, in right-handed order
                        let (p, q) = match axis {
                            0 => (j, k),
                            1 => (k, i),
                            _ => (i, j),
                        };
                        let ring = [(0, 0), (1, 0), (1, 1), (0, 1)];
                        let mut cubes = Vec::with_capacity(4);
                        let mut ordered = [0usize; 4];
                        let mut complete = true;
                        for (slot, (dp, dq)) in ring.iter().enumerate() {
                            let (cp, cq) = (p + dp, q + dq);
                            if cp == 0 || cq == 0 || cp > grid || cq > grid {
                                complete = false;
                                continue;
                            }
                            let (cp, cq) = (cp - 1, cq - 1);
                            let c = match axis {
                                0 => (i, cp, cq),
                                1 => (cq, j, cp),
                                _ => (cp, cq, k),
                            };
                            let id = cid(c.0, c.1, c.2);
                            cube_used[id] = true;
                            cubes.push(id);
                            ordered[slot] = id;
                        }
                        edge_a.push(a);
                        edge_b.push(b);
                        edge_cubes.push(cubes);
                        quad_cubes.push(complete.then_some(ordered));
                        flip.push(!inside(sdf[a]));
                    }
                }
            }
        }
        let mut slot_of = vec![usize::MAX; cube_used.len()];
        let mut num_slots = 0;
        for (c, used) in cube_used.iter().enumerate() {
            if *used {
                slot_of[c] = num_slots;
                num_slots += 1;
            }
        }
        let mut inc_edge = Vec::new();
        let mut inc_slot = Vec::new();
        for (e, cubes) in edge_cubes.iter().enumerate() {
            for &c in cubes {
                inc_edge.push(e);
                inc_slot.push(slot_of[c]);
            }
        }
        let quads = quad_cubes
            .iter()
            .zip(&flip)
            .filter_map(|(q, &f)| {
                q.map(|q| {
                    let s = q.map(|c| slot_of[c]);
                    if f {
                        [s[3], s[2], s[1], s[0]]
                    } else {
                        s
                    }
                })
            })
            .collect();
        Ok(Topology {
            grid,
            edge_a: Rc::new(edge_a),
            edge_b: Rc::new(edge_b),
            inc_edge: Rc::new(inc_edge),
            inc_slot: Rc::new(inc_slot),
            num_slots,
            quads,
        })
    }

    pub fn num_crossings(&self) -> usize {
        self.edge_a.len()
    }
}

/// Graph-side mesh: differentiable vertex positions with fixed connectivity.
#[derive(Debug, Clone)]
pub struct MeshVars {
    /// `[M, 3]`, absent for an empty mesh.
    pub vertices: Option<Var>,
    pub faces: Vec<[usize; 3]>,
}

impl MeshVars {
    pub fn to_mesh<T: Scalar>(&self, g: &Graph<T>) -> SurfaceMesh {
        let vertices = self
            .vertices
            .map(|v| g.value(v).to_f64_vec().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
            .unwrap_or_default();
        SurfaceMesh {
            vertices,
            faces: self.faces.clone(),
            colors: None,
        }
    }
}

/// Builds dual vertices as weighted averages of edge crossings and
/// triangulates the oriented quads.
pub fn extract_mesh_vars<T: Scalar>(g: &mut Graph<T>, field: &FieldVars, grid: usize) -> Result<MeshVars> {
    let sdf_values = g.value(field.sdf).to_f64_vec();
    let topo = Topology::new(grid, &sdf_values)?;
    if topo.num_crossings() == 0 {
        return Ok(MeshVars {
            vertices: None,
            faces: Vec::new(),
        });
    }
    let base: Vec<T> = grid_vertices(grid).into_iter().flatten().map(T::of).collect();
    let nv = base.len() / 3;
    let pos = g.add_const(field.deform, Array::new(vec![nv, 3], base)?)?;

    let nudged = g.unary(
        "nudge_zero",
        field.sdf,
        |s| if s == T::zero() { T::of(1e-8) } else { s },
        |_, _| T::one(),
    )?;
    let sa = g.gather_rows(nudged, topo.edge_a.clone())?;
    let sb = g.gather_rows(nudged, topo.edge_b.clone())?;
    let pa = g.gather_rows(pos, topo.edge_a.clone())?;
    let pb = g.gather_rows(pos, topo.edge_b.clone())?;
    let denom = g.sub(sa, sb)?;
    let t = g.div(sa, denom)?;
    let dir = g.sub(pb, pa)?;
    let step = g.mul(t, dir)?;
    let crossing = g.add(pa, step)?;
    let wa = g.gather_rows(field.weight, topo.edge_a.clone())?;
    let wb = g.gather_rows(field.weight, topo.edge_b.clone())?;
    let w = g.mul(wa, wb)?;
    let wx = g.mul(w, crossing)?;

    let wx_i = g.gather_rows(wx, topo.inc_edge.clone())?;
    let num = g.scatter_add_rows(wx_i, topo.inc_slot.clone(), topo.num_slots)?;
    let w_i = g.gather_rows(w, topo.inc_edge.clone())?;
    let den = g.scatter_add_rows(w_i, topo.inc_slot.clone(), topo.num_slots)?;
    let dual = g.div(num, den)?;

    let dv = g.value(dual).to_f64_vec();
    let at = |s: usize| [dv[3 * s], dv[3 * s + 1], dv[3 * s + 2]];
    let mut tris = Vec::with_capacity(topo.quads.len() * 2);
    for q in &topo.quads {
        let d02 = len(sub(at(q[0]), at(q[2])));
        let d13 = len(sub(at(q[1]), at(q[3])));
        let tie = (d02 - d13).abs() <= 1e-9 * d02.max(d13);
        let split02 = if tie { q[0].min(q[2]) <= q[1].min(q[3]) } else { d02 < d13 };
        let pair = if split02 {
            [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
        } else {
            [[q[0], q[1], q[3]], [q[1], q[2], q[3]]]
        };
        for t in pair {
            if triangle_area(at(t[0]), at(t[1]), at(t[2])) >= MIN_FACE_AREA {
                tris.push(t);
            }
        }
    }
    if tris.is_empty() {
        return Ok(MeshVars {
            vertices: None,
            faces: Vec::new(),
        });
    }
    let mut remap = vec![usize::MAX; topo.num_slots];
    let mut keep = Vec::new();
    for t in &tris {
        for &s in t {
            if remap[s] == usize::MAX {
                remap[s] = keep.len();
                keep.push(s);
            }
        }
    }
    let faces = tris.iter().map(|t| t.map(|s| remap[s])).collect();
    let vertices = g.gather_rows(dual, Rc::new(keep))?;
    Ok(MeshVars {
        vertices: Some(vertices),
        faces,
    })
}

/// Non-differentiable extraction on plain arrays.
pub fn extract_mesh(field: &FlexiField) -> Result<SurfaceMesh> {
    let mut g = Graph::<f64>::new();
    let vars = field.to_vars(&mut g, false)?;
    let m = extract_mesh_vars(&mut g, &vars, field.grid)?;
    Ok(m.to_mesh(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::norm;
    use triplane_tensor::rng::seeded;

    #[test]
    fn constant_field_is_empty() {
        let m = extract_mesh(&FlexiField::from_sdf(6, |_| 1.0)).unwrap();
        assert!(m.is_empty());
        let m = extract_mesh(&FlexiField::from_sdf(6, |_| -1.0)).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn sphere_winds_outward() {
        let m = extract_mesh(&FlexiField::from_sdf(12, |p| norm(p) - 0.5)).unwrap();
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn single_triangle_samples_inside() {
        let m = SurfaceMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces: vec![[0, 1, 2]],
            colors: None,
        };
        let s = m.surface_samples(500, &mut seeded(1)).unwrap();
        for b in &s.barycentrics {
            assert!(b.iter().all(|&x| x >= 0.0));
            assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_mesh_cannot_be_sampled() {
        assert!(SurfaceMesh::default().surface_samples(3, &mut seeded(0)).is_err());
    }

    #[test]
    fn obj_and_ply_list_every_element() {
        let m = SurfaceMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces: vec![[0, 1, 2]],
            colors: Some(vec![[1.0, 0.0, 0.0]; 3]),
        };
        let mut obj = Vec::new();
        m.write_obj(&mut obj).unwrap();
        let obj = String::from_utf8(obj).unwrap();
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert!(obj.contains("f 1 2 3"));
        let mut ply = Vec::new();
        m.write_ply(&mut ply).unwrap();
        let ply = String::from_utf8(ply).unwrap();
        assert!(ply.contains("element vertex 3"));
        assert!(ply.contains("0 0 0 255 0 0"));
        assert!(ply.trim_end().ends_with("3 0 1 2"));
    }
}
