//! Fine-grid P1 assembly with discrete-fracture line terms.
//!
//! Every fine triangle carries its own 3x3 stiffness and mass block. A
//! fracture edge contributes `(k_f / len) [[1, -1], [-1, 1]]`, split evenly
//! between the triangles sharing that edge, so restricting a global operator
//! to any union of triangles is a plain sum of their blocks.

use crate::error::{Error, Result};
use crate::geometry::{Edge, FineMesh, Point};
use crate::sparse::{SparseSymMatrix, SymTripletBuilder};

pub type Block3 = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssemblyParams {
    /// Matrix permeability.
    pub k_m: f64,
    /// Fracture conductivity.
    pub k_f: f64,
    /// Storage coefficient of the matrix.
    pub c_m: f64,
    /// Storage coefficient of fractures; multiplies a zero-measure term.
    pub c_f: f64,
    /// Constant source term.
    pub f: f64,
    /// Initial pressure.
    pub p0: f64,
    pub t_final: f64,
    pub n_t: usize,
}

impl Default for AssemblyParams {
    fn default() -> Self {
        Self {
            k_m: 1e-3,
            k_f: 1e2,
            c_m: 1.0,
            c_f: 1.0,
            f: 0.0,
            p0: 1.0,
            t_final: 10.0,
            n_t: 10,
        }
    }
}

impl AssemblyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_m > 0.0) || !(self.k_f > 0.0) {
            return Err(Error::InvalidArgument(
                "permeabilities k_m and k_f must be positive".into(),
            ));
        }
        if !(self.c_m > 0.0) || self.c_f < 0.0 {
            return Err(Error::InvalidArgument(
                "storage coefficients must satisfy c_m > 0, c_f >= 0".into(),
            ));
        }
        if self.n_t == 0 || !(self.t_final > 0.0) {
            return Err(Error::InvalidArgument(
                "time horizon needs T > 0 and n_t >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.n_t as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryHandling {
    /// Symmetric elimination of the `x = 0` rows and columns (unit diagonal).
    EliminateDirichlet,
    /// Pure natural boundary conditions.
    Natural,
}

/// P1 gradients of the three barycentric functions and the signed area.
pub fn p1_gradients(p: [Point; 3]) -> ([[f64; 2]; 3], f64) {
    let area = 0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]));
    let mut g = [[0.0; 2]; 3];
    for i in 0..3 {
        let j = (i + 1) % 3;
        let k = (i + 2) % 3;
        g[i] = [(p[j][1] - p[k][1]) / (2.0 * area), (p[k][0] - p[j][0]) / (2.0 * area)];
    }
    (g, area)
}

/// Unit-coefficient P1 stiffness block.
pub fn p1_stiffness(p: [Point; 3]) -> Result<Block3> {
    let (g, area) = p1_gradients(p);
    if !(area > 0.0) {
        return Err(Error::Assembly(format!("degenerate triangle with area {area:e}")));
    }
    let mut k = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k[i][j] = area * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
        }
    }
    Ok(k)
}

/// Unit-coefficient consistent P1 mass block `t/12 [[2,1,1],[1,2,1],[1,1,2]]`.
pub fn p1_mass(p: [Point; 3]) -> Result<Block3> {
    let (_, area) = p1_gradients(p);
    if !(area > 0.0) {
        return Err(Error::Assembly(format!("degenerate triangle with area {area:e}")));
    }
    let mut m = [[area / 12.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = area / 6.0;
    }
    Ok(m)
}

/// Per-triangle operator blocks of the fine problem.
#[derive(Debug, Clone)]
pub struct FineOperators {
    pub stiffness: Vec<Block3>,
    pub mass: Vec<Block3>,
    pub params: AssemblyParams,
}

/// Share of one fracture edge's line term owned by one triangle.
#[derive(Debug, Clone, Copy)]
pub struct FractureShare {
    pub element: usize,
    pub local: (usize, usize),
    /// Number of fractures on the edge divided by the number of triangles sharing it.
    pub fraction: f64,
    pub length: f64,
}

pub fn fracture_shares(mesh: &FineMesh) -> Vec<FractureShare> {
    if mesh.fracture_edges.is_empty() {
        return Vec::new();
    }
    let counts = mesh.fracture_edge_counts();
    let multiplicity = mesh.edge_multiplicity();
    let mut shares = Vec::new();
    for (e, tri) in mesh.elements.iter().enumerate() {
        for (la, lb) in [(0, 1), (1, 2), (2, 0)] {
            let edge = Edge::new(tri[la], tri[lb]);
            if let Some(&c) = counts.get(&edge) {
                let owners = multiplicity[&edge] as f64;
                shares.push(FractureShare {
                    element: e,
                    local: (la, lb),
                    fraction: c as f64 / owners,
                    length: mesh.edge_length(edge),
                });
            }
        }
    }
    shares
}

pub fn element_points(mesh: &FineMesh, e: usize) -> [Point; 3] {
    let t = mesh.elements[e];
    [mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]]
}

impl FineOperators {
    pub fn new(mesh: &FineMesh, params: &AssemblyParams) -> Result<Self> {
        params.validate()?;
        let mut stiffness = Vec::with_capacity(mesh.num_elements());
        let mut mass = Vec::with_capacity(mesh.num_elements());
        for e in 0..mesh.num_elements() {
            let p = element_points(mesh, e);
            let mut k = p1_stiffness(p)?;
            k.iter_mut().flatten().for_each(|v| *v *= params.k_m);
            let mut m = p1_mass(p)?;
            m.iter_mut().flatten().for_each(|v| *v *= params.c_m);
            stiffness.push(k);
            mass.push(m);
        }
        for s in fracture_shares(mesh) {
            let w = s.fraction * params.k_f / s.length;
            let (a, b) = s.local;
            let k = &mut stiffness[s.element];
            k[a][a] += w;
            k[b][b] += w;
            k[a][b] -= w;
            k[b][a] -= w;
        }
        Ok(Self {
            stiffness,
            mass,
            params: *params,
        })
    }

    pub fn global_stiffness(&self, mesh: &FineMesh, bc: BoundaryHandling) -> SparseSymMatrix {
        assemble_blocks(mesh, &self.stiffness, bc)
    }

    pub fn global_mass(&self, mesh: &FineMesh, bc: BoundaryHandling) -> SparseSymMatrix {
        assemble_blocks(mesh, &self.mass, bc)
    }

    /// Consistent load `(f, phi_m)`; zero at eliminated Dirichlet rows.
    pub fn load(&self, mesh: &FineMesh, bc: BoundaryHandling) -> Vec<f64> {
        let mut b = vec![0.0; mesh.num_vertices()];
        if self.params.f == 0.0 {
            return b;
        }
        for (e, tri) in mesh.elements.iter().enumerate() {
            let area = mesh.element_area(e);
            for &v in tri {
                b[v] += self.params.f * area / 3.0;
            }
        }
        if bc == BoundaryHandling::EliminateDirichlet {
            for (v, bv) in b.iter_mut().enumerate() {
                if mesh.is_dirichlet(v) {
                    *bv = 0.0;
                }
            }
        }
        b
    }
}

fn assemble_blocks(mesh: &FineMesh, blocks: &[Block3], bc: BoundaryHandling) -> SparseSymMatrix {
    let n = mesh.num_vertices();
    let eliminate = bc == BoundaryHandling::EliminateDirichlet;
    let mut builder = SymTripletBuilder::new(n);
    for (e, tri) in mesh.elements.iter().enumerate() {
        for a in 0..3 {
            for b in 0..3 {
                let (i, j) = (tri[a], tri[b]);
                if eliminate && (mesh.is_dirichlet(i) || mesh.is_dirichlet(j)) {
                    continue;
                }
                builder.add(i, j, blocks[e][a][b]);
            }
        }
    }
    if eliminate {
        for v in 0..n {
            if mesh.is_dirichlet(v) {
                builder.add(v, v, 1.0);
            }
        }
    }
    builder.build()
}

pub fn assemble_stiffness(
    mesh: &FineMesh,
    params: &AssemblyParams,
    bc: BoundaryHandling,
) -> Result<SparseSymMatrix> {
    Ok(FineOperators::new(mesh, params)?.global_stiffness(mesh, bc))
}

pub fn assemble_mass(
    mesh: &FineMesh,
    params: &AssemblyParams,
    bc: BoundaryHandling,
) -> Result<SparseSymMatrix> {
    Ok(FineOperators::new(mesh, params)?.global_mass(mesh, bc))
}
