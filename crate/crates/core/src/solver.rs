//! Piecewise-linear minimization of the maximal-surface energy
//!
//! ```text
//! J(v) = sum_T |T| * f(|grad v|_T|),   f(r) = -sqrt(1 - r^2)
//! ```
//!
//! by damped Newton. Beyond `r0 = 1 - delta` the density continues as the
//! quadratic Taylor polynomial of `f` at `r0`, which keeps `J` finite, strictly
//! convex and twice continuously differentiable on all of `R^n`.
//!
//! Triangles with an edge whose two endpoints carry prescribed values that
//! already differ by at least `(1 - delta)` times the edge length are
//! *data-lightlike*: no choice of free values brings their gradient under the
//! cap. They stay in the energy through the continuation, which drives their
//! normal derivative to zero, and are excluded from every feasibility
//! statement.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{HandleParams, LayerParams, StripDomain};
use crate::error::{Error, Result};
use crate::geom::{self, Point};
use crate::mesh::{self, Locator, MeshParams, NodeTags, TriMesh};
use crate::sparse::Envelope;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Gradient cap `|g_T| <= 1 - delta`.
    pub delta: f64,
    /// Stop when the max-norm of the free gradient falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub backtrack: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { delta: 1e-6, tolerance: 1e-10, max_iterations: 200, backtrack: 0.5 }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 0.1) {
            return Err(Error::Data(format!("delta = {} outside (0, 0.1)", self.delta)));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) || !(self.tolerance > 0.0) {
            return Err(Error::Data("backtracking factor must lie in (0, 1) and tolerance be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
    pub energy: f64,
    /// `min_T (1 - delta - |g_T|)` over triangles that are not data-lightlike.
    pub feasibility_margin: f64,
    /// Number of data-lightlike triangles.
    pub lightlike_triangles: usize,
    pub min_value: f64,
    pub max_value: f64,
    /// Set when the final stage stopped because Newton steps fell to the
    /// rounding level of the values before the residual reached the tolerance.
    pub rounding_floor: bool,
}

/// Nodal field on a mesh with its per-triangle gradients and slacks.
#[derive(Clone, Debug)]
pub struct ScalarField {
    mesh: Arc<TriMesh>,
    pub values: Vec<f64>,
    pub gradients: Vec<Point>,
    /// `w_T = sqrt(1 - |g_T|^2)`, NaN where `|g_T| >= 1`.
    pub slack: Vec<f64>,
    /// Triangles whose prescribed values force `|g_T| >= 1 - delta`.
    pub data_lightlike: Vec<bool>,
    /// Cap the field was solved with; fixes the flux on data-lightlike triangles.
    pub delta: f64,
    pub stats: SolveStats,
}

/// JSON snapshot of a field: nodal values keyed to the mesh they live on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSnapshot {
    pub mesh_hash: String,
    pub values: Vec<f64>,
    pub stats: SolveStats,
}

impl ScalarField {
    /// Wraps given nodal values; no triangle is marked data-lightlike.
    pub fn from_values(mesh: Arc<TriMesh>, values: Vec<f64>) -> Self {
        let n_tri = mesh.triangles.len();
        let mut f = Self {
            mesh,
            values,
            gradients: Vec::new(),
            slack: Vec::new(),
            data_lightlike: vec![false; n_tri],
            delta: SolverOptions::default().delta,
            stats: SolveStats::default(),
        };
        f.update_derived();
        f
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> Arc<TriMesh> {
        Arc::clone(&self.mesh)
    }

    fn update_derived(&mut self) {
        let geo = Geometry::new(&self.mesh);
        self.gradients = (0..self.mesh.triangles.len()).map(|t| geo.gradient(&self.mesh, t, &self.values)).collect();
        self.slack = self.gradients.iter().map(|g| (1.0 - geom::dot(*g, *g)).sqrt()).collect();
    }

    pub fn snapshot(&self) -> FieldSnapshot {
        FieldSnapshot { mesh_hash: self.mesh.hash(), values: self.values.clone(), stats: self.stats.clone() }
    }

    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.mesh.hash().as_bytes());
        for v in &self.values {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Largest `|g_T|` over triangles that are not data-lightlike.
    pub fn max_gradient(&self) -> f64 {
        self.gradients
            .iter()
            .zip(&self.data_lightlike)
            .filter(|(_, &l)| !l)
            .map(|(g, _)| geom::norm(*g))
            .fold(0.0, f64::max)
    }

    /// `W_T = f'(|g_T|) / |g_T|`, equal to `1 / w_T` wherever the cap holds.
    /// Data-lightlike triangles use the continued density of the solve.
    pub fn flux_factor(&self, t: usize) -> Result<f64> {
        let r = geom::norm(self.gradients[t]);
        if self.data_lightlike[t] {
            return Ok(Density::lightlike(self.delta).flux_factor(r));
        }
        let w = self.slack[t];
        if !(w >= 10.0 * f64::EPSILON) {
            return Err(Error::DegenerateSlack { triangle: t, slack: w });
        }
        Ok(1.0 / w)
    }

    /// Piecewise-linear evaluation; `None` outside the mesh.
    pub fn eval(&self, locator: &Locator<'_>, p: Point) -> Option<f64> {
        locator.interpolate(&self.values, p)
    }
}

/// Per-triangle areas and basis-function gradients.
pub(crate) struct Geometry {
    pub area: Vec<f64>,
    pub basis: Vec<[Point; 3]>,
}

impl Geometry {
    pub fn new(mesh: &TriMesh) -> Self {
        let mut area = Vec::with_capacity(mesh.triangles.len());
        let mut basis = Vec::with_capacity(mesh.triangles.len());
        for &[a, b, c] in &mesh.triangles {
            let (pa, pb, pc) = (mesh.nodes[a], mesh.nodes[b], mesh.nodes[c]);
            let twice = geom::cross(geom::sub(pb, pa), geom::sub(pc, pa));
            // grad phi_k = perp(opposite edge) / (2|T|)
            let perp = |e: Point| [-e[1] / twice, e[0] / twice];
            basis.push([perp(geom::sub(pc, pb)), perp(geom::sub(pa, pc)), perp(geom::sub(pb, pa))]);
            area.push(0.5 * twice);
        }
        Self { area, basis }
    }

    pub fn gradient(&self, mesh: &TriMesh, t: usize, values: &[f64]) -> Point {
        let tri = mesh.triangles[t];
        let b = &self.basis[t];
        let mut g = [0.0, 0.0];
        for k in 0..3 {
            g = geom::add(g, geom::scale(b[k], values[tri[k]]));
        }
        g
    }
}

/// Energy density with its C^2 quadratic continuation past `r0`.
#[derive(Clone, Copy)]
struct Density {
    r0: f64,
    f0: f64,
    f1: f64,
    f2: f64,
}

impl Density {
    fn new(delta: f64) -> Self {
        let r0 = 1.0 - delta;
        let w0 = (1.0 - r0 * r0).sqrt();
        Self { r0, f0: -w0, f1: r0 / w0, f2: 1.0 / (w0 * w0 * w0) }
    }

    /// Density for data-lightlike triangles, where `r >= r0` always holds.
    /// The continuation keeps the slope at `r0` but uses curvature `f1`, which
    /// stays convex and avoids amplifying rounding in `r - r0` by `1/w0^3`.
    fn lightlike(delta: f64) -> Self {
        let d = Self::new(delta);
        Self { f2: d.f1, ..d }
    }

    fn value(&self, r: f64) -> f64 {
        if r <= self.r0 {
            -(1.0 - r * r).sqrt()
        } else {
            let d = r - self.r0;
            self.f0 + self.f1 * d + 0.5 * self.f2 * d * d
        }
    }

    /// `f'(r) / r`, the scalar factor in `dJ/dg = |T| f'(r)/r g`.
    fn flux_factor(&self, r: f64) -> f64 {
        if r <= self.r0 {
            1.0 / (1.0 - r * r).sqrt()
        } else {
            (self.f1 + self.f2 * (r - self.r0)) / r
        }
    }

    /// Symmetric 2x2 Hessian of `f(|g|)` with respect to `g`, as `[xx, xy, yy]`.
    fn hessian(&self, g: Point) -> [f64; 3] {
        let r2 = geom::dot(g, g);
        let r = r2.sqrt();
        if r <= self.r0 {
            let w2 = 1.0 - r2;
            let w = w2.sqrt();
            let w3 = w2 * w;
            [1.0 / w + g[0] * g[0] / w3, g[0] * g[1] / w3, 1.0 / w + g[1] * g[1] / w3]
        } else {
            let a = self.flux_factor(r);
            let (ux, uy) = (g[0] / r, g[1] / r);
            let b = self.f2 - a;
            [a + b * ux * ux, b * ux * uy, a + b * uy * uy]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Dof {
    Free(usize),
    Fixed(f64),
}

struct Problem<'a> {
    mesh: &'a TriMesh,
    geo: Geometry,
    dof: Vec<Dof>,
    n_free: usize,
    lightlike: Vec<bool>,
    density: Density,
    density_lightlike: Density,
}

impl<'a> Problem<'a> {
    fn density(&self, t: usize) -> &Density {
        if self.lightlike[t] {
            &self.density_lightlike
        } else {
            &self.density
        }
    }

    fn values(&self, x: &[f64]) -> Vec<f64> {
        self.dof
            .iter()
            .map(|d| match *d {
                Dof::Free(k) => x[k],
                Dof::Fixed(v) => v,
            })
            .collect()
    }

    fn energy(&self, v: &[f64]) -> f64 {
        let mut j = 0.0;
        for t in 0..self.mesh.triangles.len() {
            let g = self.geo.gradient(self.mesh, t, v);
            j += self.geo.area[t] * self.density(t).value(geom::norm(g));
        }
        j
    }

    fn gradient(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_free];
        for t in 0..self.mesh.triangles.len() {
            let g = self.geo.gradient(self.mesh, t, v);
            let q = geom::scale(g, self.geo.area[t] * self.density(t).flux_factor(geom::norm(g)));
            for k in 0..3 {
                if let Dof::Free(i) = self.dof[self.mesh.triangles[t][k]] {
                    out[i] += geom::dot(q, self.geo.basis[t][k]);
                }
            }
        }
        out
    }

    /// Hessian of the energy, or of the Dirichlet energy when `laplace` is set.
    fn assemble(&self, v: &[f64], laplace: bool, mat: &mut Envelope) {
        mat.clear();
        for t in 0..self.mesh.triangles.len() {
            let m = if laplace {
                [1.0, 0.0, 1.0]
            } else {
                self.density(t).hessian(self.geo.gradient(self.mesh, t, v))
            };
            let b = &self.geo.basis[t];
            let tri = self.mesh.triangles[t];
            for a in 0..3 {
                let Dof::Free(i) = self.dof[tri[a]] else { continue };
                let ma = [m[0] * b[a][0] + m[1] * b[a][1], m[1] * b[a][0] + m[2] * b[a][1]];
                for c in 0..3 {
                    let Dof::Free(j) = self.dof[tri[c]] else { continue };
                    mat.add(i, j, self.geo.area[t] * geom::dot(ma, b[c]));
                }
            }
        }
    }

    fn pattern(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for t in 0..self.mesh.triangles.len() {
            let free: Vec<usize> = self.mesh.triangles[t]
                .iter()
                .filter_map(|&n| match self.dof[n] {
                    Dof::Free(k) => Some(k),
                    Dof::Fixed(_) => None,
                })
                .collect();
            for &a in &free {
                for &b in &free {
                    if a < b {
                        out.push((a, b));
                    }
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Node-to-dof map honoring Dirichlet values, pins and the periodic pairing.
fn build_dofs(mesh: &TriMesh, fixed: &BTreeMap<usize, f64>) -> Result<(Vec<Dof>, usize)> {
    let n = mesh.nodes.len();
    // union the periodic partners onto their left representative
    let mut rep: Vec<usize> = (0..n).collect();
    if let Some(pairs) = &mesh.periodic {
        for &(l, r) in pairs {
            let (a, b) = (find(&mut rep, l), find(&mut rep, r));
            if a != b {
                rep[b.max(a)] = a.min(b);
            }
        }
    }
    let mut class_value: BTreeMap<usize, f64> = BTreeMap::new();
    for (&i, &v) in fixed {
        let root = find(&mut rep, i);
        if let Some(&old) = class_value.get(&root) {
            if (old - v).abs() > 1e-12 {
                return Err(Error::Data(format!("periodic partners of node {i} carry values {old} and {v}")));
            }
        } else {
            class_value.insert(root, v);
        }
    }
    let mut index: BTreeMap<usize, usize> = BTreeMap::new();
    let mut dof = Vec::with_capacity(n);
    for i in 0..n {
        let root = find(&mut rep, i);
        if let Some(&v) = fixed.get(&i) {
            dof.push(Dof::Fixed(v));
        } else if let Some(&v) = class_value.get(&root) {
            dof.push(Dof::Fixed(v));
        } else {
            let next = index.len();
            let k = *index.entry(root).or_insert(next);
            dof.push(Dof::Free(k));
        }
    }
    Ok((dof, index.len()))
}

fn find(rep: &mut [usize], mut i: usize) -> usize {
    while rep[i] != i {
        rep[i] = rep[rep[i]];
        i = rep[i];
    }
    i
}

const SAME_LINE: [u8; 4] = [NodeTags::BOTTOM, NodeTags::TOP, NodeTags::LEFT, NodeTags::RIGHT];

/// Rejects prescribed values that no spacelike field can interpolate.
///
/// Pairs on a common straight boundary line may be lightlike; pairs involving
/// a pin must be strictly spacelike.
fn check_data(mesh: &TriMesh, dirichlet: &BTreeMap<usize, f64>, pins: &BTreeMap<usize, f64>) -> Result<()> {
    let mut all: Vec<(usize, f64, bool)> = dirichlet.iter().map(|(&i, &v)| (i, v, false)).collect();
    all.extend(pins.iter().map(|(&i, &v)| (i, v, true)));
    let shifts: &[f64] = if mesh.periodic.is_some() { &[0.0, 2.0, -2.0] } else { &[0.0] };
    for a in 0..all.len() {
        let (i, vi, pin_i) = all[a];
        for &(j, vj, pin_j) in &all[a + 1..] {
            let dv = (vi - vj).abs();
            for &sx in shifts {
                let q = [mesh.nodes[j][0] + sx, mesh.nodes[j][1]];
                let dp = geom::dist(mesh.nodes[i], q);
                let same_line = sx == 0.0 && SAME_LINE.iter().any(|&f| mesh.tags[i].has(f) && mesh.tags[j].has(f));
                let bad = if pin_i || pin_j {
                    dv >= dp && dp > 0.0
                } else if same_line {
                    dv > dp + 1e-12
                } else {
                    dv > dp + 1e-9
                };
                if bad {
                    return Err(Error::Data(format!(
                        "values {vi} and {vj} at nodes {i} and {j} are {dp} apart",
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Minimizes the capped energy subject to Dirichlet values and pins.
pub fn solve(
    mesh: Arc<TriMesh>,
    dirichlet: &BTreeMap<usize, f64>,
    pins: &BTreeMap<usize, f64>,
    opts: &SolverOptions,
) -> Result<ScalarField> {
    opts.validate()?;
    check_data(&mesh, dirichlet, pins)?;
    let mut fixed = dirichlet.clone();
    for (&i, &v) in pins {
        if let Some(&d) = dirichlet.get(&i) {
            if (d - v).abs() > 1e-12 {
                return Err(Error::Data(format!("pin {v} at node {i} contradicts boundary value {d}")));
            }
        }
        fixed.insert(i, v);
    }
    let (dof, n_free) = build_dofs(&mesh, &fixed)?;
    let density = Density::new(opts.delta);
    let mut lightlike = vec![false; mesh.triangles.len()];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            if let (Dof::Fixed(va), Dof::Fixed(vb)) = (dof[a], dof[b]) {
                if (va - vb).abs() >= density.r0 * geom::dist(mesh.nodes[a], mesh.nodes[b]) {
                    lightlike[t] = true;
                }
            }
        }
    }
    let mut problem = Problem {
        mesh: &mesh,
        geo: Geometry::new(&mesh),
        dof,
        n_free,
        lightlike,
        density,
        density_lightlike: Density::lightlike(opts.delta),
    };
    let mut x = vec![0.0; n_free];
    let mut stats = SolveStats { lightlike_triangles: problem.lightlike.iter().filter(|a| **a).count(), ..Default::default() };

    if n_free > 0 {
        let mut mat = Envelope::new(n_free, &problem.pattern());
        // Laplace initial guess: one Newton step of the Dirichlet energy from zero
        let v0 = problem.values(&x);
        problem.assemble(&v0, true, &mut mat);
        let mut rhs = laplace_rhs(&problem, &v0);
        mat.factor().map_err(|i| solver_error(format!("Laplace matrix singular at node {i}"), &stats))?;
        mat.solve(&mut rhs);
        x = rhs;
        // tighten the cap by decades, warm-starting each stage
        let mut schedule = Vec::new();
        let mut d = CONTINUATION_START;
        while d > opts.delta * 1.5 {
            schedule.push(d);
            d *= 0.1;
        }
        schedule.push(opts.delta);
        for (k, &delta) in schedule.iter().enumerate() {
            problem.density = Density::new(delta);
            problem.density_lightlike = Density::lightlike(delta);
            let last = k + 1 == schedule.len();
            let tol = if last { opts.tolerance } else { opts.tolerance.max(STAGE_TOLERANCE) };
            newton(&problem, &mut x, tol, opts, &mut stats, &mut mat)?;
        }
    }

    let values = problem.values(&x);
    stats.energy = problem.energy(&values);
    let mut field = ScalarField {
        mesh: Arc::clone(&mesh),
        values,
        gradients: Vec::new(),
        slack: Vec::new(),
        data_lightlike: problem.lightlike.clone(),
        delta: opts.delta,
        stats: SolveStats::default(),
    };
    field.update_derived();
    stats.feasibility_margin = field
        .gradients
        .iter()
        .zip(&field.data_lightlike)
        .filter(|(_, &l)| !l)
        .map(|(g, _)| 1.0 - opts.delta - geom::norm(*g))
        .fold(f64::INFINITY, f64::min);
    stats.min_value = field.values.iter().copied().fold(f64::INFINITY, f64::min);
    stats.max_value = field.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    field.stats = stats;
    if field.stats.feasibility_margin < -1e-9 {
        return Err(solver_error(
            format!("gradient cap violated by {:.3e}", -field.stats.feasibility_margin),
            &field.stats,
        ));
    }
    Ok(field)
}

/// Cap of the first continuation stage.
const CONTINUATION_START: f64 = 1e-2;
/// Largest residual, in multiples of the tolerance, accepted at the rounding floor.
const ROUNDING_FLOOR_LIMIT: f64 = 1e3;
/// Residual target of intermediate continuation stages.
const STAGE_TOLERANCE: f64 = 1e-8;

/// Damped Newton with Armijo backtracking from `x` until the free gradient is below `tol`.
fn newton(
    problem: &Problem<'_>,
    x: &mut Vec<f64>,
    tol: f64,
    opts: &SolverOptions,
    stats: &mut SolveStats,
    mat: &mut Envelope,
) -> Result<()> {
    let mut v = problem.values(x);
    let mut energy = problem.energy(&v);
    let mut grad = problem.gradient(&v);
    let mut residual = max_abs(&grad);
    let mut local = 0;
    stats.rounding_floor = false;
    while residual > tol {
        if local >= opts.max_iterations {
            stats.residual = residual;
            stats.energy = energy;
            return Err(solver_error(format!("no convergence in {} iterations", opts.max_iterations), stats));
        }
        problem.assemble(&v, false, mat);
        mat.factor().map_err(|i| solver_error(format!("Hessian not positive definite at node {i}"), stats))?;
        let mut step: Vec<f64> = grad.iter().map(|g| -g).collect();
        mat.solve(&mut step);
        let slope: f64 = step.iter().zip(&grad).map(|(s, g)| s * g).sum();
        // a step of a few ulps cannot lower a residual dominated by stiff rounding
        let scale = v.iter().fold(1.0f64, |m, a| m.max(a.abs()));
        if max_abs(&step) <= 8.0 * f64::EPSILON * scale && residual <= ROUNDING_FLOOR_LIMIT * tol {
            stats.rounding_floor = true;
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        // below this predicted decrease, energy differences are rounding noise
        let noise = 64.0 * f64::EPSILON * energy.abs().max(1.0);
        if -slope < noise {
            // energy cannot rank the trials, so backtrack on the residual instead
            let mut beta = 1.0;
            while accepted.is_none() && beta > 1e-6 {
                let trial: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + beta * s).collect();
                let vt = problem.values(&trial);
                let jt = problem.energy(&vt);
                if jt <= energy + noise && max_abs(&problem.gradient(&vt)) < residual {
                    accepted = Some((trial, vt, jt));
                }
                beta *= opts.backtrack;
            }
        }
        while accepted.is_none() && alpha > 1e-14 {
            let trial: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + alpha * s).collect();
            let vt = problem.values(&trial);
            let jt = problem.energy(&vt);
            if jt <= energy + 1e-4 * alpha * slope || (jt <= energy && alpha < 1e-3) {
                accepted = Some((trial, vt, jt));
                break;
            }
            alpha *= opts.backtrack;
        }
        stats.iterations += 1;
        local += 1;
        let Some((trial, vt, jt)) = accepted else {
            stats.residual = residual;
            stats.energy = energy;
            return Err(solver_error("line search found no decrease".into(), stats));
        };
        assert!(jt <= energy + noise, "line search increased the energy");
        *x = trial;
        v = vt;
        energy = jt;
        grad = problem.gradient(&v);
        residual = max_abs(&grad);
    }
    stats.residual = residual;
    stats.energy = energy;
    Ok(())
}

fn laplace_rhs(problem: &Problem<'_>, v0: &[f64]) -> Vec<f64> {
    // minus the Dirichlet-energy gradient at the fixed data
    let mut out = vec![0.0; problem.n_free];
    for t in 0..problem.mesh.triangles.len() {
        let g = problem.geo.gradient(problem.mesh, t, v0);
        for k in 0..3 {
            if let Dof::Free(i) = problem.dof[problem.mesh.triangles[t][k]] {
                out[i] -= problem.geo.area[t] * geom::dot(g, problem.geo.basis[t][k]);
            }
        }
    }
    out
}

fn solver_error(message: String, stats: &SolveStats) -> Error {
    Error::Solver { message, stats: stats.clone() }
}

/// Discrete Euler-Lagrange residual `dJ/dv_i` at every node.
pub fn euler_lagrange_residual(field: &ScalarField) -> Vec<f64> {
    let mesh = field.mesh();
    let geo = Geometry::new(mesh);
    let (regular, lightlike) = (Density::new(field.delta), Density::lightlike(field.delta));
    let mut out = vec![0.0; mesh.nodes.len()];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let g = field.gradients[t];
        let density = if field.data_lightlike[t] { &lightlike } else { &regular };
        let q = geom::scale(g, geo.area[t] * density.flux_factor(geom::norm(g)));
        for k in 0..3 {
            out[tri[k]] += geom::dot(q, geo.basis[t][k]);
        }
    }
    out
}

/// Serrate Dirichlet data on every top and bottom node.
fn serrate_data(mesh: &TriMesh, strip: &StripDomain) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for (i, t) in mesh.tags.iter().enumerate() {
        if t.has(NodeTags::BOTTOM) || t.has(NodeTags::TOP) {
            out.insert(i, strip.boundary_value(mesh.nodes[i])?);
        }
    }
    Ok(out)
}

/// Periodic layer field on the cell `[0, 2] x [0, y0]`.
pub fn solve_layer(params: &LayerParams, mp: &MeshParams, opts: &SolverOptions) -> Result<ScalarField> {
    let params = LayerParams::new(params.x0, params.y0)?;
    let mesh = Arc::new(mesh::mesh_layer_cell(&params, mp)?);
    solve_layer_on(mesh, opts)
}

/// Layer solve on a prebuilt (possibly refined) cell mesh.
pub fn solve_layer_on(mesh: Arc<TriMesh>, opts: &SolverOptions) -> Result<ScalarField> {
    let strip = mesh.strip.ok_or_else(|| Error::Mesh("layer mesh has no strip".into()))?;
    let data = serrate_data(&mesh, &strip)?;
    solve(mesh, &data, &BTreeMap::new(), opts)
}

/// Samples a 2-periodic layer field at a point of the strip.
pub fn sample_periodic(layer: &ScalarField, locator: &Locator<'_>, p: Point) -> Result<f64> {
    let x = p[0] - 2.0 * (p[0] / 2.0).floor();
    let y0 = layer.mesh().strip.map_or(f64::INFINITY, |s| s.y0);
    let y = p[1].clamp(0.0, y0);
    // the cell sides may lean by less than a column, so a neighbouring copy can hold the point
    [x, x + 2.0, x - 2.0]
        .into_iter()
        .find_map(|x| layer.eval(locator, [x, y]))
        .or_else(|| layer.eval(locator, [x.clamp(0.0, 2.0), y]))
        .ok_or_else(|| Error::Domain(format!("({x}, {y}) not located in the layer cell")))
}

/// Punctured handle field with the layer as far-field data and the ring pinned to one.
pub fn solve_handle(
    params: &HandleParams,
    mp: &MeshParams,
    farfield: &ScalarField,
    opts: &SolverOptions,
) -> Result<ScalarField> {
    let params = HandleParams::new(params.x0, params.y0)?;
    let mesh = Arc::new(mesh::mesh_handle_strip(&params, mp)?);
    solve_handle_on(mesh, farfield, opts)
}

/// Handle solve on a prebuilt (possibly refined) strip mesh.
pub fn solve_handle_on(mesh: Arc<TriMesh>, farfield: &ScalarField, opts: &SolverOptions) -> Result<ScalarField> {
    let strip = mesh.strip.ok_or_else(|| Error::Mesh("handle mesh has no strip".into()))?;
    match farfield.mesh().strip {
        Some(s) if s == strip => {}
        _ => return Err(Error::Data("far-field layer solved for different parameters".into())),
    }
    let mut dirichlet = serrate_data(&mesh, &strip)?;
    let locator = Locator::new(farfield.mesh());
    let side = |i: usize| {
        let t = mesh.tags[i];
        (t.has(NodeTags::LEFT) || t.has(NodeTags::RIGHT)) && !t.has(NodeTags::BOTTOM) && !t.has(NodeTags::TOP)
    };
    let mut raw = BTreeMap::new();
    for i in (0..mesh.nodes.len()).filter(|&i| side(i)) {
        raw.insert(i, sample_periodic(farfield, &locator, mesh.nodes[i])?);
    }
    // average over the orbit of the available symmetries so the discrete data is exactly symmetric
    let perms: Vec<&Vec<usize>> = [&mesh.symmetries.s, &mesh.symmetries.x_mirror, &mesh.symmetries.y_mirror]
        .into_iter()
        .flatten()
        .collect();
    for &i in raw.keys() {
        let mut orbit = vec![i];
        let mut k = 0;
        while k < orbit.len() {
            for p in &perms {
                let j = p[orbit[k]];
                if !orbit.contains(&j) {
                    orbit.push(j);
                }
            }
            k += 1;
        }
        let vals: Vec<f64> = orbit.iter().filter_map(|j| raw.get(j)).copied().collect();
        orbit.sort_unstable();
        // summation in sorted node order keeps the average identical across the orbit
        let sum: f64 = orbit.iter().filter_map(|j| raw.get(j)).sum();
        dirichlet.insert(i, sum / vals.len() as f64);
    }
    let pins: BTreeMap<usize, f64> =
        (0..mesh.nodes.len()).filter(|&i| mesh.tags[i].has(NodeTags::RING)).map(|i| (i, 1.0)).collect();
    solve(mesh, &dirichlet, &pins, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{mesh_annulus, mesh_rectangle, refine};

    fn boundary_data(mesh: &TriMesh, f: impl Fn(Point) -> f64) -> BTreeMap<usize, f64> {
        mesh.boundary_nodes()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i, f(mesh.nodes[i])))
            .collect()
    }

    #[test]
    fn constant_data_needs_no_newton_step() {
        let mesh = Arc::new(mesh_rectangle([0.0, 0.0], [2.0, 1.0], 10, 6));
        let data = boundary_data(&mesh, |_| 0.3);
        let f = solve(mesh, &data, &BTreeMap::new(), &SolverOptions::default()).unwrap();
        assert_eq!(f.stats.iterations, 0);
        for v in &f.values {
            assert!((v - 0.3).abs() < 1e-14);
        }
    }

    #[test]
    fn affine_data_is_reproduced() {
        let mesh = Arc::new(mesh_rectangle([0.0, 0.0], [2.0, 1.0], 12, 8));
        let data = boundary_data(&mesh, |p| 0.5 * p[1]);
        let f = solve(Arc::clone(&mesh), &data, &BTreeMap::new(), &SolverOptions::default()).unwrap();
        for (v, p) in f.values.iter().zip(&mesh.nodes) {
            assert!((v - 0.5 * p[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn density_is_c2_at_the_cap() {
        let d = Density::new(1e-3);
        let (r0, e) = (d.r0, 1e-7);
        let lo = d.value(r0 - e);
        let hi = d.value(r0 + e);
        let slope = (hi - lo) / (2.0 * e);
        assert!((slope - d.f1).abs() / d.f1 < 1e-5);
        assert!((d.flux_factor(r0 - 1e-12) - d.flux_factor(r0 + 1e-12)).abs() < 1e-3);
    }

    #[test]
    fn catenoid_converges_at_first_order_or_better() {
        let c = 0.5;
        let exact = |p: Point| {
            let r = geom::norm(p);
            c * (r / c).asinh()
        };
        let mut errs = Vec::new();
        for n_theta in [32, 64] {
            let mesh = Arc::new(mesh_annulus([0.0, 0.0], 0.3, 1.5, n_theta));
            let data = boundary_data(&mesh, exact);
            let f = solve(Arc::clone(&mesh), &data, &BTreeMap::new(), &SolverOptions::default()).unwrap();
            let err = f.values.iter().zip(&mesh.nodes).map(|(v, p)| (v - exact(*p)).abs()).fold(0.0, f64::max);
            errs.push(err);
        }
        let ratio = errs[0] / errs[1];
        assert!((1.5..=4.5).contains(&ratio), "errors {errs:?}");
    }

    #[test]
    fn layer_field_basic_properties() {
        let f = solve_layer(&LayerParams::new(0.5, 1.5).unwrap(), &MeshParams::default(), &SolverOptions::default())
            .unwrap();
        let i = f.mesh().find_node([1.0, 0.0], 0.0).unwrap();
        assert_eq!(f.values[i], 1.0);
        assert!(f.stats.min_value >= 0.0 && f.stats.max_value <= 1.0, "{:?}", f.stats);
        assert!(f.stats.residual <= 1e-10);
        let pairs = f.mesh().periodic.clone().unwrap();
        for (l, r) in pairs {
            assert_eq!(f.values[l], f.values[r]);
        }
    }

    #[test]
    fn refined_layer_still_solves() {
        let mesh = mesh::mesh_layer_cell(&LayerParams::new(0.5, 1.5).unwrap(), &MeshParams { h: 0.2, ..Default::default() })
            .unwrap();
        let f = solve_layer_on(Arc::new(refine(&mesh)), &SolverOptions::default()).unwrap();
        assert!(f.stats.residual <= 1e-10);
    }

    #[test]
    fn inadmissible_layer_is_rejected() {
        let r = solve_layer(&LayerParams { x0: 0.0, y0: 1.0 }, &MeshParams::default(), &SolverOptions::default());
        assert!(matches!(r, Err(Error::Admissibility(_))));
    }
}
