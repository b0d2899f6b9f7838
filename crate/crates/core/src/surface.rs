//! Discrete closed surfaces, nodal scalar fields and mesh ingestion.
//!
//! Two backends: a flat periodic grid (the torus) and closed, oriented,
//! connected triangle meshes read from ASCII OFF files.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TopologyFault};
use crate::expr::{Bindings, Expr};

/// Content fingerprint of a surface. Two surfaces built from identical data
/// share an id, which is what the "same surface" checks compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SurfaceId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurfaceKind {
    TorusGrid,
    TriangleMesh,
}

/// Grid dimensions and periods of a flat torus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusDims {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

impl TorusDims {
    pub fn hx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        (self.lx * self.ly) / (self.nx * self.ny) as f64
    }

    /// Row-major node index: `x` varies fastest.
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshData {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
enum Geometry {
    Torus(TorusDims),
    Mesh(MeshData),
}

/// Counts reported by mesh validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TopologySummary {
    pub vertices: usize,
    pub edges: usize,
    pub faces: usize,
    pub euler_characteristic: i64,
    pub genus: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSurface {
    geometry: Geometry,
    id: SurfaceId,
}

/// Builds a flat torus of `nx × ny` nodes with periods `lx`, `ly`.
pub fn make_torus(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<DiscreteSurface> {
    if nx < 4 || ny < 4 {
        return Err(Error::DimensionTooSmall { nx, ny });
    }
    if !(lx > 0.0 && lx.is_finite() && ly > 0.0 && ly.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "torus periods must be positive and finite, got ({lx}, {ly})"
        )));
    }
    let dims = TorusDims { nx, ny, lx, ly };
    let mut h = DefaultHasher::new();
    0u8.hash(&mut h);
    (nx, ny, lx.to_bits(), ly.to_bits()).hash(&mut h);
    Ok(DiscreteSurface {
        geometry: Geometry::Torus(dims),
        id: SurfaceId(h.finish()),
    })
}

/// Reads and validates an OFF triangle mesh.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<DiscreteSurface> {
    let text = std::fs::read_to_string(path)?;
    let (vertices, triangles) = parse_off(&text)?;
    DiscreteSurface::from_mesh(vertices, triangles)
}

/// Parses ASCII OFF text into vertex coordinates and triangles. Comments
/// (`#` to end of line) and blank lines are ignored; only triangle faces are
/// accepted.
#[allow(clippy::type_complexity)]
pub fn parse_off(text: &str) -> Result<(Vec<[f64; 3]>, Vec<[usize; 3]>)> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let parse_err = |line: usize, message: String| Error::Parse { line, message };

    let (line_no, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?;
    let mut head_tokens = header.split_whitespace();
    if head_tokens.next() != Some("OFF") {
        return Err(parse_err(line_no, "missing OFF header".into()));
    }
    let mut counts: Vec<&str> = head_tokens.collect();
    let mut counts_line = line_no;
    if counts.is_empty() {
        let (n, l) = lines
            .next()
            .ok_or_else(|| parse_err(line_no, "missing element counts".into()))?;
        counts = l.split_whitespace().collect();
        counts_line = n;
    }
    if counts.len() < 2 {
        return Err(parse_err(
            counts_line,
            "expected vertex and face counts".into(),
        ));
    }
    let parse_count = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| parse_err(counts_line, format!("bad count '{s}'")))
    };
    let n_vertices = parse_count(counts[0])?;
    let n_faces = parse_count(counts[1])?;

    let mut vertices = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let (n, l) = lines
            .next()
            .ok_or_else(|| parse_err(counts_line, "unexpected end of vertex list".into()))?;
        let coords: Vec<f64> = l
            .split_whitespace()
            .take(3)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(n, "bad vertex coordinate".into()))?;
        if coords.len() != 3 || coords.iter().any(|c| !c.is_finite()) {
            return Err(parse_err(n, "vertex needs three finite coordinates".into()));
        }
        vertices.push([coords[0], coords[1], coords[2]]);
    }

    let mut triangles = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let (n, l) = lines
            .next()
            .ok_or_else(|| parse_err(counts_line, "unexpected end of face list".into()))?;
        let fields: Vec<usize> = l
            .split_whitespace()
            .take(4)
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(n, "bad face index".into()))?;
        if fields.first() != Some(&3) || fields.len() != 4 {
            return Err(parse_err(n, "only triangular faces are supported".into()));
        }
        let tri = [fields[1], fields[2], fields[3]];
        if let Some(&bad) = tri.iter().find(|&&v| v >= n_vertices) {
            return Err(parse_err(n, format!("vertex index {bad} out of range")));
        }
        triangles.push(tri);
    }
    if let Some((n, _)) = lines.next() {
        return Err(parse_err(n, "trailing data after face list".into()));
    }
    Ok((vertices, triangles))
}

/// Writes a triangle mesh as ASCII OFF.
pub fn write_off(
    mut out: impl std::io::Write,
    vertices: &[[f64; 3]],
    triangles: &[[usize; 3]],
) -> std::io::Result<()> {
    writeln!(out, "OFF")?;
    writeln!(out, "{} {} 0", vertices.len(), triangles.len())?;
    for v in vertices {
        writeln!(out, "{:?} {:?} {:?}", v[0], v[1], v[2])?;
    }
    for t in triangles {
        writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
    }
    Ok(())
}

fn validate_mesh(n_vertices: usize, triangles: &[[usize; 3]]) -> Result<TopologySummary> {
    let topo = |fault| Error::Topology(fault);

    // directed half-edge -> number of faces using it
    let mut directed: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (f, t) in triangles.iter().enumerate() {
        if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
            return Err(topo(TopologyFault::DegenerateFace { face: f }));
        }
        for k in 0..3 {
            *directed.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
        }
    }
    let mut undirected: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&(a, b), &count) in &directed {
        *undirected.entry((a.min(b), a.max(b))).or_default() += count;
    }
    for (&(a, b), &count) in &undirected {
        if count > 2 {
            return Err(topo(TopologyFault::NonManifoldEdge { from: a, to: b }));
        }
    }
    for (&(a, b), &count) in &directed {
        if count > 1 {
            return Err(topo(TopologyFault::InconsistentOrientation {
                from: a,
                to: b,
            }));
        }
        if !directed.contains_key(&(b, a)) {
            return Err(topo(TopologyFault::BoundaryEdge { from: a, to: b }));
        }
    }

    let mut parent: Vec<usize> = (0..n_vertices).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for t in triangles {
        for k in 0..3 {
            let a = find(&mut parent, t[k]);
            let b = find(&mut parent, t[(k + 1) % 3]);
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let components = (0..n_vertices)
        .filter(|&v| find(&mut parent, v) == v)
        .count();
    if components != 1 {
        return Err(topo(TopologyFault::Disconnected { components }));
    }

    let edges = undirected.len();
    let chi = n_vertices as i64 - edges as i64 + triangles.len() as i64;
    Ok(TopologySummary {
        vertices: n_vertices,
        edges,
        faces: triangles.len(),
        euler_characteristic: chi,
        genus: (2 - chi) / 2,
    })
}

impl DiscreteSurface {
    /// Builds a triangle-mesh surface, rejecting anything that is not a
    /// closed, connected, consistently oriented 2-manifold.
    pub fn from_mesh(vertices: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(
                "non-finite vertex coordinate".into(),
            ));
        }
        if let Some(t) = triangles
            .iter()
            .find(|t| t.iter().any(|&v| v >= vertices.len()))
        {
            return Err(Error::InvalidArgument(format!(
                "triangle {t:?} references a missing vertex"
            )));
        }
        validate_mesh(vertices.len(), &triangles)?;
        let mut h = DefaultHasher::new();
        1u8.hash(&mut h);
        for v in &vertices {
            v.map(f64::to_bits).hash(&mut h);
        }
        triangles.hash(&mut h);
        Ok(Self {
            geometry: Geometry::Mesh(MeshData {
                vertices,
                triangles,
            }),
            id: SurfaceId(h.finish()),
        })
    }

    pub fn id(&self) -> SurfaceId {
        self.id
    }

    pub fn kind(&self) -> SurfaceKind {
        match self.geometry {
            Geometry::Torus(_) => SurfaceKind::TorusGrid,
            Geometry::Mesh(_) => SurfaceKind::TriangleMesh,
        }
    }

    pub fn node_count(&self) -> usize {
        match &self.geometry {
            Geometry::Torus(d) => d.nx * d.ny,
            Geometry::Mesh(m) => m.vertices.len(),
        }
    }

    pub fn torus_dims(&self) -> Option<&TorusDims> {
        match &self.geometry {
            Geometry::Torus(d) => Some(d),
            Geometry::Mesh(_) => None,
        }
    }

    pub fn mesh_data(&self) -> Option<&MeshData> {
        match &self.geometry {
            Geometry::Mesh(m) => Some(m),
            Geometry::Torus(_) => None,
        }
    }

    /// Coordinates of node `i`. Torus nodes sit at `(i·hx, j·hy, 0)`.
    pub fn node_position(&self, node: usize) -> [f64; 3] {
        match &self.geometry {
            Geometry::Torus(d) => {
                let (i, j) = (node % d.nx, node / d.nx);
                [i as f64 * d.hx(), j as f64 * d.hy(), 0.0]
            }
            Geometry::Mesh(m) => m.vertices[node],
        }
    }

    /// Re-runs the constructor checks.
    pub fn validate(&self) -> Result<()> {
        match &self.geometry {
            Geometry::Torus(d) => make_torus(d.nx, d.ny, d.lx, d.ly).map(|_| ()),
            Geometry::Mesh(m) => validate_mesh(m.vertices.len(), &m.triangles).map(|_| ()),
        }
    }

    /// Euler characteristic and genus. The torus grid is reported through its
    /// quadrilateral cell complex (χ = 0).
    pub fn topology(&self) -> TopologySummary {
        match &self.geometry {
            Geometry::Torus(d) => {
                let v = d.nx * d.ny;
                TopologySummary {
                    vertices: v,
                    edges: 2 * v,
                    faces: v,
                    euler_characteristic: 0,
                    genus: 1,
                }
            }
            Geometry::Mesh(m) => validate_mesh(m.vertices.len(), &m.triangles)
                .expect("mesh validated at construction"),
        }
    }

    /// Exact surface area: `Lx·Ly` on the torus, the sum of triangle areas on
    /// meshes.
    pub fn area(&self) -> f64 {
        match &self.geometry {
            Geometry::Torus(d) => d.lx * d.ly,
            Geometry::Mesh(m) => m
                .triangles
                .iter()
                .map(|t| triangle_area(&m.vertices, t))
                .sum(),
        }
    }
}

pub(crate) fn triangle_area(vertices: &[[f64; 3]], t: &[usize; 3]) -> f64 {
    let [a, b, c] = t.map(|v| vertices[v]);
    let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let cross = [
        e1[1] * e2[2] - e1[2] * e2[1],
        e1[2] * e2[0] - e1[0] * e2[2],
        e1[0] * e2[1] - e1[1] * e2[0],
    ];
    0.5 * (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt()
}

/// Real-valued function sampled at the nodes of one surface.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    surface_id: SurfaceId,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(surface: &DiscreteSurface, values: Vec<f64>) -> Result<Self> {
        Self::on(surface.id(), surface.node_count(), values)
    }

    pub(crate) fn on(surface_id: SurfaceId, node_count: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != node_count {
            return Err(Error::FieldLength {
                expected: node_count,
                got: values.len(),
            });
        }
        if let Some(node) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { node });
        }
        Ok(Self { surface_id, values })
    }

    pub fn constant(surface: &DiscreteSurface, value: f64) -> Result<Self> {
        Self::new(surface, vec![value; surface.node_count()])
    }

    pub fn zeros(surface: &DiscreteSurface) -> Self {
        Self {
            surface_id: surface.id(),
            values: vec![0.0; surface.node_count()],
        }
    }

    pub fn surface_id(&self) -> SurfaceId {
        self.surface_id
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            surface_id: self.surface_id,
            values: self.values.iter().map(|v| s * v).collect(),
        }
    }

    /// Nodewise linear combination `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &ScalarField, b: f64) -> Result<Self> {
        if self.surface_id != other.surface_id {
            return Err(Error::SurfaceMismatch);
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(Self {
            surface_id: self.surface_id,
            values,
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Samples an expression (see [`crate::expr`]) at every node.
pub fn field_from_expression(surface: &DiscreteSurface, src: &str) -> Result<ScalarField> {
    let expr = Expr::parse(src)?;
    let periods = surface.torus_dims().map(|d| (d.lx, d.ly));
    if expr.uses_periods() && periods.is_none() {
        return Err(Error::UnsupportedExpression(
            "Lx/Ly are only defined on torus grids".into(),
        ));
    }
    let values = (0..surface.node_count())
        .map(|node| {
            expr.eval(&Bindings {
                point: surface.node_position(node),
                periods,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ScalarField::new(surface, values)
}

/// Which tensor the conformal series perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// `ḡ = ḡ⁽⁰⁾(1 + t f₁ + t² f₂)`
    InverseMetric,
    /// `g = g⁽⁰⁾(1 + t f₁)`
    Metric,
}

/// Conformal perturbation truncated at second order in `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConformalPerturbation {
    side: Side,
    f1: ScalarField,
    f2: Option<ScalarField>,
}

impl ConformalPerturbation {
    pub fn new(side: Side, f1: ScalarField, f2: Option<ScalarField>) -> Result<Self> {
        if let Some(f2) = &f2 {
            if f2.surface_id() != f1.surface_id() {
                return Err(Error::SurfaceMismatch);
            }
        }
        Ok(Self { side, f1, f2 })
    }

    pub fn inverse_metric(f1: ScalarField) -> Self {
        Self {
            side: Side::InverseMetric,
            f1,
            f2: None,
        }
    }

    pub fn metric(f1: ScalarField) -> Self {
        Self {
            side: Side::Metric,
            f1,
            f2: None,
        }
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn f1(&self) -> &ScalarField {
        &self.f1
    }

    pub fn f2(&self) -> Option<&ScalarField> {
        self.f2.as_ref()
    }

    pub fn surface_id(&self) -> SurfaceId {
        self.f1.surface_id()
    }

    /// Nodal conformal factor of the inverse metric at parameter `t`:
    /// `1 + t f₁ + t² f₂` on the inverse-metric side, `1/(1 + t f₁)` on the
    /// metric side. Fails on the first node where the factor is not positive.
    pub fn inverse_metric_factor(&self, t: f64) -> Result<Vec<f64>> {
        let f1 = self.f1.values();
        let mut out = Vec::with_capacity(f1.len());
        for (node, &a) in f1.iter().enumerate() {
            let base = match self.side {
                Side::InverseMetric => {
                    let b = self.f2.as_ref().map_or(0.0, |f2| f2.values()[node]);
                    1.0 + t * a + t * t * b
                }
                Side::Metric => 1.0 + t * a,
            };
            if !(base > 0.0) {
                return Err(Error::PositivityViolation { node, value: base });
            }
            out.push(match self.side {
                Side::InverseMetric => base,
                Side::Metric => 1.0 / base,
            });
        }
        Ok(out)
    }
}
