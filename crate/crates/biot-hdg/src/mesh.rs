//! Conforming triangulations of rectangles: connectivity, facet normals,
//! measures, boundary classification, uniform (red) refinement, and point
//! location.

use std::collections::BTreeMap;
use std::io::Write;

use thiserror::Error;

use crate::ref_elements::{ElementMap, FacetMap};

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("point ({0}, {1}) lies outside the mesh domain")]
    PointOutsideDomain(f64, f64),
}

/// Mesh edge with a globally fixed unit normal. `vertices` is sorted by
/// vertex id; the normal points from the lower-element-id side toward the
/// higher (outward on boundary facets).
#[derive(Debug, Clone, Copy)]
pub struct Facet {
    pub vertices: [usize; 2],
    pub normal: [f64; 2],
}

/// Reference from an element to one of its three facets; `sign` is +1 when
/// the element's outward normal equals the stored facet normal, -1 otherwise.
#[derive(Debug, Clone, Copy)]
pub struct FacetUse {
    pub facet: usize,
    pub sign: f64,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<[f64; 2]>,
    /// Vertex triples, counterclockwise.
    pub triangles: Vec<[usize; 3]>,
    pub facets: Vec<Facet>,
    /// (lower element id, Some(higher)) for interior facets, (elem, None) on boundary.
    pub facet_to_elements: Vec<(usize, Option<usize>)>,
    /// Local facet l of element e joins vertices (t[l], t[(l+1)%3]).
    pub element_to_facets: Vec<[FacetUse; 3]>,
    pub boundary_flags: Vec<bool>,
    pub h_per_element: Vec<f64>,
    pub h_global: f64,
}

fn signed_area(v0: [f64; 2], v1: [f64; 2], v2: [f64; 2]) -> f64 {
    0.5 * ((v1[0] - v0[0]) * (v2[1] - v0[1]) - (v2[0] - v0[0]) * (v1[1] - v0[1]))
}

/// Outward unit normal of a CCW triangle on the directed edge a -> b.
fn outward_normal(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len = d[0].hypot(d[1]);
    [d[1] / len, -d[0] / len]
}

impl Mesh {
    /// Builds full connectivity from vertices and triangles; enforces CCW
    /// orientation. Facet ids are assigned in sorted endpoint order, which
    /// makes the global numbering reproducible.
    pub fn from_raw(vertices: Vec<[f64; 2]>, mut triangles: Vec<[usize; 3]>) -> Mesh {
        for tri in triangles.iter_mut() {
            let [a, b, c] = *tri;
            if signed_area(vertices[a], vertices[b], vertices[c]) < 0.0 {
                tri.swap(1, 2);
            }
            assert!(
                signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]) > 0.0,
                "degenerate triangle {tri:?}"
            );
        }

        let mut edge_uses: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
        for (e, tri) in triangles.iter().enumerate() {
            for l in 0..3 {
                let a = tri[l];
                let b = tri[(l + 1) % 3];
                let key = (a.min(b), a.max(b));
                edge_uses.entry(key).or_default().push((e, l));
            }
        }

        let mut facets = Vec::with_capacity(edge_uses.len());
        let mut facet_to_elements = Vec::with_capacity(edge_uses.len());
        let mut boundary_flags = Vec::with_capacity(edge_uses.len());
        let mut element_to_facets =
            vec![[FacetUse { facet: 0, sign: 0.0 }; 3]; triangles.len()];

        for (f, (&(va, vb), uses)) in edge_uses.iter().enumerate() {
            assert!(
                uses.len() == 1 || uses.len() == 2,
                "facet ({va},{vb}) shared by {} elements",
                uses.len()
            );
            let lower = uses.iter().map(|&(e, _)| e).min().unwrap();
            let higher = if uses.len() == 2 {
                Some(uses.iter().map(|&(e, _)| e).max().unwrap())
            } else {
                None
            };
            // Normal = outward normal of the lower-id element on this edge.
            let (_, l_lower) = *uses.iter().find(|&&(e, _)| e == lower).unwrap();
            let ta = triangles[lower][l_lower];
            let tb = triangles[lower][(l_lower + 1) % 3];
            let normal = outward_normal(vertices[ta], vertices[tb]);
            facets.push(Facet {
                vertices: [va, vb],
                normal,
            });
            facet_to_elements.push((lower, higher));
            boundary_flags.push(higher.is_none());
            for &(e, l) in uses {
                let sign = if e == lower { 1.0 } else { -1.0 };
                element_to_facets[e][l] = FacetUse { facet: f, sign };
            }
        }

        let h_per_element: Vec<f64> = triangles
            .iter()
            .map(|tri| {
                let mut h: f64 = 0.0;
                for l in 0..3 {
                    let a = vertices[tri[l]];
                    let b = vertices[tri[(l + 1) % 3]];
                    h = h.max((b[0] - a[0]).hypot(b[1] - a[1]));
                }
                h
            })
            .collect();
        let h_global = h_per_element.iter().cloned().fold(0.0, f64::max);

        Mesh {
            vertices,
            triangles,
            facets,
            facet_to_elements,
            element_to_facets,
            boundary_flags,
            h_per_element,
            h_global,
        }
    }

    /// n x n squares on the unit square, each split along the bottom-left to
    /// top-right diagonal; 2n^2 triangles, h_global = sqrt(2)/n.
    pub fn build_uniform_unit_square(n: usize) -> Mesh {
        assert!(n >= 1);
        let np = n + 1;
        let mut vertices = Vec::with_capacity(np * np);
        for j in 0..np {
            for i in 0..np {
                vertices.push([i as f64 / n as f64, j as f64 / n as f64]);
            }
        }
        let vid = |i: usize, j: usize| j * np + i;
        let mut triangles = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                let v00 = vid(i, j);
                let v10 = vid(i + 1, j);
                let v01 = vid(i, j + 1);
                let v11 = vid(i + 1, j + 1);
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            }
        }
        Mesh::from_raw(vertices, triangles)
    }

    /// Regular red refinement: each triangle splits into 4 via edge
    /// midpoints. Children of element e are 4e..4e+3.
    pub fn refine_uniform(&self) -> Mesh {
        let mut vertices = self.vertices.clone();
        let mut midpoint = vec![0usize; self.facets.len()];
        for (f, facet) in self.facets.iter().enumerate() {
            let a = self.vertices[facet.vertices[0]];
            let b = self.vertices[facet.vertices[1]];
            midpoint[f] = vertices.len();
            vertices.push([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
        }
        let mut triangles = Vec::with_capacity(4 * self.triangles.len());
        for (e, tri) in self.triangles.iter().enumerate() {
            // Midpoint of local edge l = (v_l, v_{l+1}).
            let m = [
                midpoint[self.element_to_facets[e][0].facet],
                midpoint[self.element_to_facets[e][1].facet],
                midpoint[self.element_to_facets[e][2].facet],
            ];
            triangles.push([tri[0], m[0], m[2]]);
            triangles.push([m[0], tri[1], m[1]]);
            triangles.push([m[2], m[1], tri[2]]);
            triangles.push([m[0], m[1], m[2]]);
        }
        Mesh::from_raw(vertices, triangles)
    }

    /// All elements whose closure contains `x`: one id for interior points,
    /// several when `x` lies on a shared facet or vertex.
    pub fn locate_point(&self, x: [f64; 2]) -> Result<Vec<usize>, MeshError> {
        let tol = 1e-10;
        let mut hits = Vec::new();
        for e in 0..self.triangles.len() {
            let r = self.element_map(e).to_reference(x);
            if r[0] >= -tol && r[1] >= -tol && r[0] + r[1] <= 1.0 + tol {
                hits.push(e);
            }
        }
        if hits.is_empty() {
            Err(MeshError::PointOutsideDomain(x[0], x[1]))
        } else {
            Ok(hits)
        }
    }

    pub fn num_elements(&self) -> usize {
        self.triangles.len()
    }

    pub fn num_facets(&self) -> usize {
        self.facets.len()
    }

    pub fn element_vertices(&self, e: usize) -> [[f64; 2]; 3] {
        let tri = self.triangles[e];
        [
            self.vertices[tri[0]],
            self.vertices[tri[1]],
            self.vertices[tri[2]],
        ]
    }

    pub fn element_map(&self, e: usize) -> ElementMap {
        let [v0, v1, v2] = self.element_vertices(e);
        ElementMap::new(v0, v1, v2)
    }

    /// Facet parameterized from its lower vertex id, shared by both sides.
    pub fn facet_map(&self, f: usize) -> FacetMap {
        let [a, b] = self.facets[f].vertices;
        FacetMap::new(self.vertices[a], self.vertices[b])
    }

    pub fn area(&self, e: usize) -> f64 {
        let [v0, v1, v2] = self.element_vertices(e);
        signed_area(v0, v1, v2)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.num_elements()).map(|e| self.area(e)).sum()
    }

    pub fn num_boundary_facets(&self) -> usize {
        self.boundary_flags.iter().filter(|&&b| b).count()
    }

    pub fn num_interior_facets(&self) -> usize {
        self.num_facets() - self.num_boundary_facets()
    }

    /// Legacy ASCII VTK dump of points and triangle cells.
    pub fn write_vtk<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "# vtk DataFile Version 3.0")?;
        writeln!(w, "mesh")?;
        writeln!(w, "ASCII")?;
        writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
        writeln!(w, "POINTS {} double", self.vertices.len())?;
        for v in &self.vertices {
            writeln!(w, "{} {} 0.0", v[0], v[1])?;
        }
        writeln!(w, "CELLS {} {}", self.num_elements(), 4 * self.num_elements())?;
        for tri in &self.triangles {
            writeln!(w, "3 {} {} {}", tri[0], tri[1], tri[2])?;
        }
        writeln!(w, "CELL_TYPES {}", self.num_elements())?;
        for _ in 0..self.num_elements() {
            writeln!(w, "5")?;
        }
        Ok(())
    }
}
