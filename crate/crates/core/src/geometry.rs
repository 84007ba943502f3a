//! Nested structured triangulations of the unit square and discrete fracture networks.
//!
//! The coarse grid is an `n x n` array of squares, each split into two
//! triangles along the `(i, j) -> (i + 1, j + 1)` diagonal. The fine grid
//! refines every coarse square into `r x r` squares with the same split, so
//! every fine triangle lies inside exactly one coarse triangle. Fractures are
//! zero-width segments snapped onto chains of fine edges.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Undirected fine edge, stored with the smaller vertex index first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge(pub usize, pub usize);

impl Edge {
    pub fn new(a: usize, b: usize) -> Self {
        if a <= b {
            Edge(a, b)
        } else {
            Edge(b, a)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryTag {
    /// `x = 0`, homogeneous Dirichlet pressure.
    DirichletLeft,
    /// Remaining boundary, no flow.
    Neumann,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: Point,
    pub b: Point,
}

impl Segment {
    pub fn length(&self) -> f64 {
        ((self.b[0] - self.a[0]).powi(2) + (self.b[1] - self.a[1]).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FractureNetwork {
    pub segments: Vec<Segment>,
    /// Line conductivity of every segment.
    pub conductivity: f64,
}

impl FractureNetwork {
    pub fn new(segments: Vec<Segment>, conductivity: f64) -> Result<Self> {
        for (id, s) in segments.iter().enumerate() {
            for p in [s.a, s.b] {
                if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                    return Err(Error::InvalidArgument(format!(
                        "fracture {id} endpoint ({}, {}) lies outside the unit square",
                        p[0], p[1]
                    )));
                }
            }
            if !(s.length() > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "fracture {id} has zero length"
                )));
            }
        }
        if !(conductivity > 0.0) {
            return Err(Error::InvalidArgument(
                "fracture conductivity must be positive".into(),
            ));
        }
        Ok(Self {
            segments,
            conductivity,
        })
    }

    pub fn empty(conductivity: f64) -> Self {
        Self {
            segments: Vec::new(),
            conductivity,
        }
    }

    /// Parses `x1 y1 x2 y2` lines; `#` starts a comment.
    pub fn parse(text: &str, conductivity: f64) -> Result<Self> {
        let mut segments = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let values: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: lineno + 1,
                    message: format!("bad number in fracture line: {e}"),
                })?;
            if values.len() != 4 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("expected 4 numbers `x1 y1 x2 y2`, found {}", values.len()),
                });
            }
            segments.push(Segment {
                a: [values[0], values[1]],
                b: [values[2], values[3]],
            });
        }
        Self::new(segments, conductivity)
    }

    pub fn read(path: &Path, conductivity: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("cannot read fracture file {}: {e}", path.display()),
            ))
        })?;
        Self::parse(&text, conductivity)
    }
}

#[derive(Debug, Clone)]
pub struct CoarseMesh {
    /// Squares per side.
    pub n: usize,
    pub vertices: Vec<Point>,
    pub elements: Vec<[usize; 3]>,
    /// Coarse elements touching each vertex (the neighborhood of the vertex).
    pub vertex_neighborhoods: Vec<Vec<usize>>,
    /// Fine elements inside each coarse element; filled by [`build_fine_mesh`].
    pub element_to_fine: Vec<Vec<usize>>,
    pub h_coarse: f64,
}

impl CoarseMesh {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn element_area(&self, k: usize) -> f64 {
        triangle_area(&self.vertices, self.elements[k])
    }

    pub fn is_dirichlet_vertex(&self, v: usize) -> bool {
        self.vertices[v][0] == 0.0
    }

    pub fn element_centroid(&self, k: usize) -> Point {
        let [a, b, c] = self.elements[k];
        let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        [(pa[0] + pb[0] + pc[0]) / 3.0, (pa[1] + pb[1] + pc[1]) / 3.0]
    }
}

#[derive(Debug, Clone)]
pub struct FineMesh {
    /// Fine squares per side (`n * r`).
    pub n: usize,
    /// Refinement factor of each coarse square.
    pub r: usize,
    pub vertices: Vec<Point>,
    pub elements: Vec<[usize; 3]>,
    /// Coarse element containing each fine element.
    pub fine_to_coarse: Vec<usize>,
    pub boundary_tags: Vec<Option<BoundaryTag>>,
    /// Snapped fracture chains as `(edge, fracture id)`, in walk order per fracture.
    pub fracture_edges: Vec<(Edge, usize)>,
    /// Euclidean distance between each fracture endpoint and its snapped lattice vertex.
    pub snap_residuals: Vec<[f64; 2]>,
    pub fracture_conductivity: f64,
    pub h: f64,
}

impl FineMesh {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn vertex_index(&self, i: usize, j: usize) -> usize {
        j * (self.n + 1) + i
    }

    pub fn lattice(&self, v: usize) -> (usize, usize) {
        (v % (self.n + 1), v / (self.n + 1))
    }

    pub fn element_area(&self, e: usize) -> f64 {
        triangle_area(&self.vertices, self.elements[e])
    }

    pub fn is_dirichlet(&self, v: usize) -> bool {
        self.boundary_tags[v] == Some(BoundaryTag::DirichletLeft)
    }

    pub fn edge_length(&self, e: Edge) -> f64 {
        let (p, q) = (self.vertices[e.0], self.vertices[e.1]);
        ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt()
    }

    /// Number of fine triangles sharing each edge of the mesh.
    pub fn edge_multiplicity(&self) -> HashMap<Edge, usize> {
        let mut map = HashMap::with_capacity(3 * self.elements.len());
        for tri in &self.elements {
            for (a, b) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
                *map.entry(Edge::new(a, b)).or_insert(0) += 1;
            }
        }
        map
    }

    /// Number of fracture chains passing through each fracture edge.
    pub fn fracture_edge_counts(&self) -> HashMap<Edge, usize> {
        let mut map = HashMap::new();
        for &(e, _) in &self.fracture_edges {
            *map.entry(e).or_insert(0) += 1;
        }
        map
    }

    /// Plain-text export: vertex count, `x y` lines, element count, `a b c` lines.
    pub fn export(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.vertices.len());
        for p in &self.vertices {
            let _ = writeln!(out, "{} {}", p[0], p[1]);
        }
        let _ = writeln!(out, "{}", self.elements.len());
        for t in &self.elements {
            let _ = writeln!(out, "{} {} {}", t[0], t[1], t[2]);
        }
        out
    }
}

pub fn triangle_area(vertices: &[Point], tri: [usize; 3]) -> f64 {
    let (a, b, c) = (vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn structured_triangles(n: usize) -> (Vec<Point>, Vec<[usize; 3]>) {
    let side = n + 1;
    let mut vertices = Vec::with_capacity(side * side);
    for j in 0..=n {
        for i in 0..=n {
            vertices.push([i as f64 / n as f64, j as f64 / n as f64]);
        }
    }
    let mut elements = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let v00 = j * side + i;
            let v10 = v00 + 1;
            let v01 = v00 + side;
            let v11 = v01 + 1;
            elements.push([v00, v10, v11]);
            elements.push([v00, v11, v01]);
        }
    }
    (vertices, elements)
}

pub fn build_coarse_mesh(n: usize) -> Result<CoarseMesh> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "coarse grid needs at least one square per side".into(),
        ));
    }
    let (vertices, elements) = structured_triangles(n);
    let mut vertex_neighborhoods = vec![Vec::new(); vertices.len()];
    for (k, tri) in elements.iter().enumerate() {
        for &v in tri {
            vertex_neighborhoods[v].push(k);
        }
    }
    Ok(CoarseMesh {
        n,
        element_to_fine: vec![Vec::new(); elements.len()],
        vertices,
        elements,
        vertex_neighborhoods,
        h_coarse: 1.0 / n as f64,
    })
}

/// Refines `coarse` by `r` per side and snaps `fractures` onto fine edges.
///
/// Fills `coarse.element_to_fine`.
pub fn build_fine_mesh(
    coarse: &mut CoarseMesh,
    r: usize,
    fractures: &FractureNetwork,
) -> Result<FineMesh> {
    if r == 0 {
        return Err(Error::InvalidArgument(
            "refinement factor must be at least 1".into(),
        ));
    }
    let n = coarse.n * r;
    let (vertices, elements) = structured_triangles(n);

    let mut fine_to_coarse = Vec::with_capacity(elements.len());
    for e in 0..elements.len() {
        let square = e / 2;
        let (fi, fj) = (square % n, square / n);
        let (ci, cj) = (fi / r, fj / r);
        let (a, b) = (fi % r, fj % r);
        let lower = if e % 2 == 0 { a >= b } else { a > b };
        fine_to_coarse.push(2 * (cj * coarse.n + ci) + usize::from(!lower));
    }
    let mut element_to_fine = vec![Vec::new(); coarse.elements.len()];
    for (e, &k) in fine_to_coarse.iter().enumerate() {
        element_to_fine[k].push(e);
    }
    coarse.element_to_fine = element_to_fine;

    let boundary_tags = vertices
        .iter()
        .map(|p| {
            if p[0] == 0.0 {
                Some(BoundaryTag::DirichletLeft)
            } else if p[0] == 1.0 || p[1] == 0.0 || p[1] == 1.0 {
                Some(BoundaryTag::Neumann)
            } else {
                None
            }
        })
        .collect();

    let mut fracture_edges = Vec::new();
    let mut snap_residuals = Vec::with_capacity(fractures.segments.len());
    for (id, seg) in fractures.segments.iter().enumerate() {
        for p in [seg.a, seg.b] {
            if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                return Err(Error::InvalidArgument(format!(
                    "fracture {id} endpoint ({}, {}) lies outside the unit square",
                    p[0], p[1]
                )));
            }
        }
        let start = snap_point(seg.a, n);
        let end = snap_point(seg.b, n);
        let residual = |p: Point, q: (usize, usize)| {
            let (x, y) = (q.0 as f64 / n as f64, q.1 as f64 / n as f64);
            ((p[0] - x).powi(2) + (p[1] - y).powi(2)).sqrt()
        };
        snap_residuals.push([residual(seg.a, start), residual(seg.b, end)]);
        let chain = lattice_walk(start, end, n);
        if chain.len() < 2 {
            return Err(Error::DegenerateFracture {
                id,
                reason: format!(
                    "both endpoints snap to the same fine vertex at h = {}",
                    1.0 / n as f64
                ),
            });
        }
        for w in chain.windows(2) {
            let a = w[0].1 * (n + 1) + w[0].0;
            let b = w[1].1 * (n + 1) + w[1].0;
            fracture_edges.push((Edge::new(a, b), id));
        }
    }

    Ok(FineMesh {
        n,
        r,
        vertices,
        elements,
        fine_to_coarse,
        boundary_tags,
        fracture_edges,
        snap_residuals,
        fracture_conductivity: fractures.conductivity,
        h: 1.0 / n as f64,
    })
}

fn snap_point(p: Point, n: usize) -> (usize, usize) {
    let s = |x: f64| ((x * n as f64).round() as i64).clamp(0, n as i64) as usize;
    (s(p[0]), s(p[1]))
}

/// Steps available on the lattice: axis-aligned moves and the mesh diagonal.
const STEPS: [(i64, i64); 6] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1)];

fn steps_remaining(dx: i64, dy: i64) -> i64 {
    if dx.signum() * dy.signum() > 0 {
        dx.abs().max(dy.abs())
    } else {
        dx.abs() + dy.abs()
    }
}

/// Shortest chain of fine edges from `start` to `end` hugging the straight line.
///
/// Every step reduces the remaining step count by one; among admissible steps
/// the one closest to the line wins, ties going to the smaller vertex index.
pub fn lattice_walk(start: (usize, usize), end: (usize, usize), n: usize) -> Vec<(usize, usize)> {
    let (x0, y0) = (start.0 as i64, start.1 as i64);
    let (x1, y1) = (end.0 as i64, end.1 as i64);
    let (lx, ly) = ((x1 - x0) as f64, (y1 - y0) as f64);
    let norm = (lx * lx + ly * ly).sqrt();
    let line_dist = |x: i64, y: i64| {
        if norm == 0.0 {
            0.0
        } else {
            ((x - x0) as f64 * ly - (y - y0) as f64 * lx).abs() / norm
        }
    };

    let mut chain = vec![start];
    let (mut x, mut y) = (x0, y0);
    while (x, y) != (x1, y1) {
        let remaining = steps_remaining(x1 - x, y1 - y);
        let mut best: Option<(f64, i64, i64, i64)> = None;
        for (sx, sy) in STEPS {
            let (nx, ny) = (x + sx, y + sy);
            if nx < 0 || ny < 0 || nx > n as i64 || ny > n as i64 {
                continue;
            }
            if steps_remaining(x1 - nx, y1 - ny) != remaining - 1 {
                continue;
            }
            let d = line_dist(nx, ny);
            let index = ny * (n as i64 + 1) + nx;
            let better = match best {
                None => true,
                Some((bd, bi, _, _)) => d < bd - 1e-12 || ((d - bd).abs() <= 1e-12 && index < bi),
            };
            if better {
                best = Some((d, index, nx, ny));
            }
        }
        let (_, _, nx, ny) = best.expect("a shortest-path step always exists on the lattice");
        x = nx;
        y = ny;
        chain.push((x as usize, y as usize));
    }
    chain
}

/// Fine vertices on the boundary of the neighborhood of coarse vertex `i`,
/// sorted lexicographically by coordinates.
pub fn neighborhood_boundary(fine: &FineMesh, coarse: &CoarseMesh, i: usize) -> Result<Vec<usize>> {
    let elems = neighborhood_elements(fine, coarse, i)?;
    let mut counts: HashMap<Edge, usize> = HashMap::new();
    for &e in &elems {
        let t = fine.elements[e];
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            *counts.entry(Edge::new(a, b)).or_insert(0) += 1;
        }
    }
    let mut nodes = BTreeSet::new();
    for (edge, c) in counts {
        if c == 1 {
            nodes.insert(edge.0);
            nodes.insert(edge.1);
        }
    }
    let mut out: Vec<usize> = nodes.into_iter().collect();
    sort_lexicographic(fine, &mut out);
    Ok(out)
}

/// Fine elements inside the neighborhood of coarse vertex `i`, ascending.
pub fn neighborhood_elements(fine: &FineMesh, coarse: &CoarseMesh, i: usize) -> Result<Vec<usize>> {
    if i >= coarse.num_vertices() {
        return Err(Error::InvalidArgument(format!(
            "coarse vertex {i} out of range (mesh has {})",
            coarse.num_vertices()
        )));
    }
    let mut elems: Vec<usize> = coarse.vertex_neighborhoods[i]
        .iter()
        .flat_map(|&k| coarse.element_to_fine[k].iter().copied())
        .collect();
    elems.sort_unstable();
    debug_assert!(elems.iter().all(|&e| fine.fine_to_coarse[e] < coarse.num_elements()));
    Ok(elems)
}

pub fn sort_lexicographic(fine: &FineMesh, nodes: &mut [usize]) {
    nodes.sort_by_key(|&v| fine.lattice(v));
}
