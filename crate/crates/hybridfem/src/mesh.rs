//! Structured tetrahedral meshes of the unit box with full entity tables.
//!
//! The mesh is the combinatorial backbone of everything else in this crate:
//! every discrete field is a vector indexed by mesh entities (vertices,
//! edges, faces, cells), and every operator is assembled from cell-local
//! contributions through the entity maps stored here.
//!
//! Conventions (load-bearing, relied upon throughout the crate):
//!
//! - Every entity is identified by the **ascending** list of its global
//!   vertex ids. Cells store their four vertices in ascending order, edges
//!   their two, faces their three. This gives each entity one canonical
//!   orientation, so degrees of freedom attached to an entity are
//!   single-valued without any extra sign bookkeeping.
//! - Cell-local entities are enumerated in **lexicographic** order of local
//!   vertex indices: edges `(01, 02, 03, 12, 13, 23)`, faces
//!   `(012, 013, 023, 123)`.
//! - Global edge/face tables are sorted lexicographically by their vertex
//!   tuples, so ids are deterministic for a given mesh.

use std::collections::HashMap;

use crate::Error;

/// Local edges of the reference tetrahedron, lexicographic.
pub const CELL_EDGES: [[usize; 2]; 6] = [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]];

/// Local faces of the reference tetrahedron, lexicographic.
pub const CELL_FACES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];

/// Local edges of a reference triangle, lexicographic.
pub const FACE_EDGES: [[usize; 2]; 3] = [[0, 1], [0, 2], [1, 2]];

/// A conforming tetrahedral mesh with complete entity tables.
#[derive(Debug, Clone)]
pub struct Mesh {
    /// Vertex coordinates.
    pub vertices: Vec<[f64; 3]>,
    /// Cells as ascending global vertex ids.
    pub cells: Vec<[usize; 4]>,
    /// Edges as ascending global vertex pairs, lexicographically sorted.
    pub edges: Vec<[usize; 2]>,
    /// Faces as ascending global vertex triples, lexicographically sorted.
    pub faces: Vec<[usize; 3]>,
    /// For each cell, global ids of its six edges in local lex order.
    pub cell_edges: Vec<[usize; 6]>,
    /// For each cell, global ids of its four faces in local lex order.
    pub cell_faces: Vec<[usize; 4]>,
    /// Mesh size parameter (edge length of the structured grid), if built
    /// from the structured constructor.
    pub h: f64,
}

/// Incidence of a face with the cells it bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaceIncidence {
    /// Cell id and local face index of the first incident cell.
    pub inner: (usize, usize),
    /// Second incident cell, absent for boundary faces.
    pub outer: Option<(usize, usize)>,
}

impl FaceIncidence {
    /// Whether the face lies on the domain boundary.
    pub fn is_boundary(&self) -> bool {
        self.outer.is_none()
    }
}

/// Disjoint split of the boundary faces into a "first kind" part and its
/// complement: `gamma1` collects the faces selected by the tagging
/// predicate, `gamma2` the remaining boundary faces.
#[derive(Debug, Clone)]
pub struct BoundaryPartition {
    /// Face ids tagged by the predicate (sorted ascending).
    pub gamma1: Vec<usize>,
    /// Remaining boundary face ids (sorted ascending).
    pub gamma2: Vec<usize>,
}

impl Mesh {
    /// Number of entities of dimension `dim` (0 = vertices .. 3 = cells).
    pub fn entity_count(&self, dim: usize) -> usize {
        match dim {
            0 => self.vertices.len(),
            1 => self.edges.len(),
            2 => self.faces.len(),
            3 => self.cells.len(),
            _ => 0,
        }
    }

    /// Global entity ids of dimension `dim` attached to cell `c`, in local
    /// lexicographic order.
    pub fn cell_entities(&self, dim: usize, c: usize) -> Vec<usize> {
        match dim {
            0 => self.cells[c].to_vec(),
            1 => self.cell_edges[c].to_vec(),
            2 => self.cell_faces[c].to_vec(),
            3 => vec![c],
            _ => Vec::new(),
        }
    }

    /// Coordinates of the four vertices of cell `c`.
    pub fn cell_coords(&self, c: usize) -> [[f64; 3]; 4] {
        let ids = self.cells[c];
        [
            self.vertices[ids[0]],
            self.vertices[ids[1]],
            self.vertices[ids[2]],
            self.vertices[ids[3]],
        ]
    }

    /// Coordinates of the three vertices of face `f`.
    pub fn face_coords(&self, f: usize) -> [[f64; 3]; 3] {
        let ids = self.faces[f];
        [
            self.vertices[ids[0]],
            self.vertices[ids[1]],
            self.vertices[ids[2]],
        ]
    }

    /// All entity ids of dimension `dim` contained in the closure of the
    /// given faces (the faces themselves, their edges, or their vertices).
    /// Returns a sorted, deduplicated list.
    pub fn closure_of_faces(&self, faces: &[usize], dim: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for &f in faces {
            match dim {
                0 => out.extend_from_slice(&self.faces[f]),
                1 => {
                    let vs = self.faces[f];
                    for pair in FACE_EDGES {
                        let key = [vs[pair[0]], vs[pair[1]]];
                        out.push(self.edge_id(key).expect("face edge present"));
                    }
                }
                2 => out.push(f),
                _ => {}
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Global id of the edge with ascending vertex pair `key`.
    pub fn edge_id(&self, key: [usize; 2]) -> Option<usize> {
        self.edges.binary_search(&key).ok()
    }

    /// Global id of the face with ascending vertex triple `key`.
    pub fn face_id(&self, key: [usize; 3]) -> Option<usize> {
        self.faces.binary_search(&key).ok()
    }
}

/// Builds the entity tables of a mesh from vertices and ascending-ordered
/// cells. Exposed for hand-built meshes in tests and small experiments;
/// [`build_structured_box`] is the main entry point.
pub fn from_cells(vertices: Vec<[f64; 3]>, cells: Vec<[usize; 4]>, h: f64) -> Result<Mesh, Error> {
    for c in &cells {
        if !(c[0] < c[1] && c[1] < c[2] && c[2] < c[3]) {
            return Err(Error::InvalidMesh(format!(
                "cell {c:?} is not in ascending vertex order"
            )));
        }
        if c[3] >= vertices.len() {
            return Err(Error::InvalidMesh(format!("cell {c:?} references missing vertex")));
        }
    }
    let mut edges: Vec<[usize; 2]> = cells
        .iter()
        .flat_map(|c| CELL_EDGES.iter().map(|e| [c[e[0]], c[e[1]]]))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    let mut faces: Vec<[usize; 3]> = cells
        .iter()
        .flat_map(|c| CELL_FACES.iter().map(|f| [c[f[0]], c[f[1]], c[f[2]]]))
        .collect();
    faces.sort_unstable();
    faces.dedup();

    let edge_index: HashMap<[usize; 2], usize> =
        edges.iter().enumerate().map(|(i, e)| (*e, i)).collect();
    let face_index: HashMap<[usize; 3], usize> =
        faces.iter().enumerate().map(|(i, f)| (*f, i)).collect();

    let cell_edges = cells
        .iter()
        .map(|c| {
            let mut ids = [0usize; 6];
            for (l, e) in CELL_EDGES.iter().enumerate() {
                ids[l] = edge_index[&[c[e[0]], c[e[1]]]];
            }
            ids
        })
        .collect();
    let cell_faces = cells
        .iter()
        .map(|c| {
            let mut ids = [0usize; 4];
            for (l, f) in CELL_FACES.iter().enumerate() {
                ids[l] = face_index[&[c[f[0]], c[f[1]], c[f[2]]]];
            }
            ids
        })
        .collect();

    Ok(Mesh {
        vertices,
        cells,
        edges,
        faces,
        cell_edges,
        cell_faces,
        h,
    })
}

/// Builds a structured tetrahedral mesh of the unit box `[0,1]^3`.
///
/// The box is divided into `n^3` cubes of side `1/n`; each cube is split
/// into six tetrahedra that share the cube diagonal from its minimal to its
/// maximal corner. The six tetrahedra are the monotone lattice paths from
/// the minimal to the maximal corner (one per permutation of the three
/// axes), which makes neighbouring cubes agree on their shared faces and
/// yields a conforming mesh.
pub fn build_structured_box(n: usize) -> Result<Mesh, Error> {
    if n == 0 {
        return Err(Error::InvalidMesh("subdivision count must be positive".into()));
    }
    let np = n + 1;
    let h = 1.0 / n as f64;
    let vid = |i: usize, j: usize, k: usize| i + np * (j + np * k);

    let mut vertices = vec![[0.0; 3]; np * np * np];
    for k in 0..np {
        for j in 0..np {
            for i in 0..np {
                vertices[vid(i, j, k)] = [i as f64 * h, j as f64 * h, k as f64 * h];
            }
        }
    }

    // The six axis permutations, in a fixed order for determinism.
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];

    let mut cells = Vec::with_capacity(6 * n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                for perm in PERMS {
                    let mut corner = [i, j, k];
                    let mut tet = [vid(corner[0], corner[1], corner[2]), 0, 0, 0];
                    for (step, &axis) in perm.iter().enumerate() {
                        corner[axis] += 1;
                        tet[step + 1] = vid(corner[0], corner[1], corner[2]);
                    }
                    tet.sort_unstable();
                    cells.push(tet);
                }
            }
        }
    }

    from_cells(vertices, cells, h)
}

/// Computes, for every face, the cells it bounds together with the local
/// face index inside each cell. Interior faces have exactly two incident
/// cells, boundary faces exactly one; anything else is a non-conforming
/// mesh and reported as an error.
pub fn facet_adjacency(mesh: &Mesh) -> Result<Vec<FaceIncidence>, Error> {
    let mut slots: Vec<Vec<(usize, usize)>> = vec![Vec::new(); mesh.faces.len()];
    for (c, faces) in mesh.cell_faces.iter().enumerate() {
        for (local, &f) in faces.iter().enumerate() {
            slots[f].push((c, local));
        }
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(f, mut inc)| {
            inc.sort_unstable();
            match inc.len() {
                1 => Ok(FaceIncidence {
                    inner: inc[0],
                    outer: None,
                }),
                2 => Ok(FaceIncidence {
                    inner: inc[0],
                    outer: Some(inc[1]),
                }),
                k => Err(Error::InvalidMesh(format!(
                    "face {f} is incident to {k} cells"
                ))),
            }
        })
        .collect()
}

/// Splits the boundary faces into the part selected by `predicate` and its
/// complement. A boundary face is selected when **all three** of its
/// vertices satisfy the predicate; for structured meshes of the unit box
/// this tags exactly the faces lying inside the selected coordinate planes.
pub fn tag_boundary<P>(
    mesh: &Mesh,
    adjacency: &[FaceIncidence],
    predicate: P,
) -> BoundaryPartition
where
    P: Fn(&[f64; 3]) -> bool,
{
    let mut gamma1 = Vec::new();
    let mut gamma2 = Vec::new();
    for (f, inc) in adjacency.iter().enumerate() {
        if !inc.is_boundary() {
            continue;
        }
        let vs = mesh.faces[f];
        let selected = vs.iter().all(|&v| predicate(&mesh.vertices[v]));
        if selected {
            gamma1.push(f);
        } else {
            gamma2.push(f);
        }
    }
    BoundaryPartition { gamma1, gamma2 }
}

/// Convenience predicate selecting the three coordinate planes through the
/// origin, the default inhomogeneous-data part of the boundary.
pub fn origin_planes(p: &[f64; 3]) -> bool {
    let eps = 1e-12;
    p[0].abs() < eps || p[1].abs() < eps || p[2].abs() < eps
}
