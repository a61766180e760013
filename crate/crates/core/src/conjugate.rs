//! Conjugate one-forms of a solved field and their integrals.
//!
//! Every form is stored twice: as a piecewise-constant covector per triangle
//! and as an increment per mesh edge. Edge increments average the adjacent
//! triangle evaluations; `rho` bounds their disagreement per unit length.
//!
//! The conjugate `dPhi = (v_y/w) dx - (v_x/w) dy` has an exact discrete
//! counterpart. With `F_T` its covector, `|T| (g_T/w_T) . grad phi_i` equals
//! `F_T . (m_c - m_b) / 1` for the midpoints `m_b, m_c` of the two edges at
//! node `i`, so the sum of `F_T` along the midpoint loop around a node set
//! `S` is `sum_{i in S} dJ/dv_i`. At a converged solution the midpoint
//! (Crouzeix-Raviart) integral of `F` is therefore path independent away
//! from prescribed nodes, and loops around the puncture all carry the same
//! period `k`.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Point};
use crate::mesh::{NodeTags, TriMesh};
use crate::solver::{euler_lagrange_residual, ScalarField};
use crate::sparse::Envelope;

/// Edge list and incidences of a triangle mesh.
#[derive(Clone, Debug)]
pub struct Topology {
    /// Undirected edges with `a < b`, sorted.
    pub edges: Vec<[usize; 2]>,
    index: HashMap<(usize, usize), usize>,
    /// Edge of `(tri[k], tri[k + 1])` for each local `k`.
    pub tri_edges: Vec<[usize; 3]>,
    pub edge_tris: Vec<Vec<usize>>,
    /// Sorted neighbor lists.
    pub neighbors: Vec<Vec<usize>>,
}

impl Topology {
    pub fn new(mesh: &TriMesh) -> Self {
        let mut edges: Vec<[usize; 2]> = mesh
            .triangles
            .iter()
            .flat_map(|t| (0..3).map(move |k| [t[k].min(t[(k + 1) % 3]), t[k].max(t[(k + 1) % 3])]))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        let index: HashMap<(usize, usize), usize> = edges.iter().enumerate().map(|(i, e)| ((e[0], e[1]), i)).collect();
        let mut edge_tris = vec![Vec::new(); edges.len()];
        let mut tri_edges = Vec::with_capacity(mesh.triangles.len());
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let mut te = [0; 3];
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let e = index[&(a.min(b), a.max(b))];
                te[k] = e;
                edge_tris[e].push(t);
            }
            tri_edges.push(te);
        }
        let mut neighbors = vec![Vec::new(); mesh.nodes.len()];
        for e in &edges {
            neighbors[e[0]].push(e[1]);
            neighbors[e[1]].push(e[0]);
        }
        for n in neighbors.iter_mut() {
            n.sort_unstable();
        }
        Self { edges, index, tri_edges, edge_tris, neighbors }
    }

    pub fn edge(&self, a: usize, b: usize) -> Option<usize> {
        self.index.get(&(a.min(b), a.max(b))).copied()
    }
}

#[derive(Clone, Debug)]
pub struct DiscreteOneForm {
    topology: Arc<Topology>,
    /// Per-triangle covector.
    pub covectors: Vec<Point>,
    /// Increment along `edges[e][0] -> edges[e][1]`.
    pub increments: Vec<f64>,
    /// Largest per-length disagreement between adjacent regular triangles.
    pub rho: f64,
    /// Same as `rho` over edges at least `CORE_MARGIN` away from the boundary
    /// lines and the puncture center, where the field is smooth.
    pub rho_core: f64,
}

/// Distance from the singular set outside of which `rho_core` is measured.
pub const CORE_MARGIN: f64 = 0.25;

/// At least `CORE_MARGIN` from the strip lines and from the puncture center.
pub fn in_core(mesh: &TriMesh, p: Point) -> bool {
    let off_lines = mesh.strip.map_or(true, |s| p[1] >= CORE_MARGIN && p[1] <= s.y0 - CORE_MARGIN);
    off_lines && mesh.puncture.map_or(true, |pc| geom::dist(p, pc.center) >= CORE_MARGIN)
}

impl DiscreteOneForm {
    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Increment along the directed edge `a -> b`; antisymmetric by construction.
    pub fn increment(&self, a: usize, b: usize) -> Option<f64> {
        let e = self.topology.edge(a, b)?;
        let w = self.increments[e];
        Some(if a < b { w } else { -w })
    }

    /// Sum of increments along a node path (closed when the last node repeats the first).
    pub fn path_sum(&self, path: &[usize]) -> Result<f64> {
        let mut s = 0.0;
        for w in path.windows(2) {
            s += self
                .increment(w[0], w[1])
                .ok_or_else(|| Error::Topology(format!("nodes {} and {} are not adjacent", w[0], w[1])))?;
        }
        Ok(s)
    }
}

/// Builds a form from per-triangle covectors. Edges average the evaluations of
/// adjacent non-lightlike triangles (lightlike ones only when no other is
/// adjacent); periodic partner edges share one average.
fn assemble_form(
    field: &ScalarField,
    topology: Arc<Topology>,
    covectors: Vec<Point>,
    exact_increment: Option<&dyn Fn(usize, usize) -> f64>,
) -> DiscreteOneForm {
    let mesh = field.mesh();
    let n_edges = topology.edges.len();
    // periodic partner of each edge
    let mut partner: Vec<Option<usize>> = vec![None; n_edges];
    if let Some(pairs) = &mesh.periodic {
        let map: HashMap<usize, usize> = pairs.iter().copied().collect();
        for (e, &[a, b]) in topology.edges.iter().enumerate() {
            if let (Some(&ra), Some(&rb)) = (map.get(&a), map.get(&b)) {
                if let Some(f) = topology.edge(ra, rb) {
                    partner[e] = Some(f);
                    partner[f] = Some(e);
                }
            }
        }
    }
    let evaluations = |e: usize| -> (Vec<f64>, Vec<f64>) {
        let [a, b] = topology.edges[e];
        let vec = geom::sub(mesh.nodes[b], mesh.nodes[a]);
        let (mut regular, mut lightlike) = (Vec::new(), Vec::new());
        for &t in &topology.edge_tris[e] {
            let val = geom::dot(covectors[t], vec);
            if field.data_lightlike[t] {
                lightlike.push(val);
            } else {
                regular.push(val);
            }
        }
        (regular, lightlike)
    };
    let mut increments = vec![0.0; n_edges];
    let mut rho = 0.0f64;
    let mut rho_core = 0.0f64;
    let in_core = |p: Point| in_core(mesh, p);
    for e in 0..n_edges {
        let [a, b] = topology.edges[e];
        let (mut regular, mut lightlike) = evaluations(e);
        if let Some(f) = partner[e] {
            let (r2, l2) = evaluations(f);
            regular.extend(r2);
            lightlike.extend(l2);
        }
        if regular.len() >= 2 {
            let len = geom::dist(mesh.nodes[a], mesh.nodes[b]);
            let spread = regular.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x))
                - regular.iter().fold(f64::INFINITY, |m, x| m.min(*x));
            rho = rho.max(spread / len);
            if in_core(mesh.nodes[a]) && in_core(mesh.nodes[b]) {
                rho_core = rho_core.max(spread / len);
            }
        }
        let pool = if regular.is_empty() { &lightlike } else { &regular };
        increments[e] = match exact_increment {
            Some(f) => f(a, b),
            None => pool.iter().sum::<f64>() / pool.len() as f64,
        };
    }
    DiscreteOneForm { topology, covectors, increments, rho, rho_core }
}

/// `(v_y / w) dx - (v_x / w) dy`.
pub fn phi_form(field: &ScalarField) -> Result<DiscreteOneForm> {
    phi_form_with(field, Arc::new(Topology::new(field.mesh())))
}

fn phi_form_with(field: &ScalarField, topology: Arc<Topology>) -> Result<DiscreteOneForm> {
    let mut cov = Vec::with_capacity(field.gradients.len());
    for (t, g) in field.gradients.iter().enumerate() {
        let w_inv = field.flux_factor(t)?;
        cov.push([g[1] * w_inv, -g[0] * w_inv]);
    }
    Ok(assemble_form(field, topology, cov, None))
}

/// The three coordinate forms of the conjugate surface:
///
/// ```text
/// dX1 = -(v_x v_y / w) dx + ((1 - v_y^2) / w) dy
/// dX2 = -((1 - v_x^2) / w) dx + (v_x v_y / w) dy
/// dX3 = dv
/// ```
pub fn conjugate_coordinate_forms(field: &ScalarField) -> Result<[DiscreteOneForm; 3]> {
    let topology = Arc::new(Topology::new(field.mesh()));
    let n = field.gradients.len();
    let (mut c1, mut c2, mut c3) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (t, g) in field.gradients.iter().enumerate() {
        let w_inv = field.flux_factor(t)?;
        c1.push([-g[0] * g[1] * w_inv, (1.0 - g[1] * g[1]) * w_inv]);
        c2.push([-(1.0 - g[0] * g[0]) * w_inv, g[0] * g[1] * w_inv]);
        c3.push(*g);
    }
    let v = &field.values;
    let exact = |a: usize, b: usize| v[b] - v[a];
    Ok([
        assemble_form(field, Arc::clone(&topology), c1, None),
        assemble_form(field, Arc::clone(&topology), c2, None),
        assemble_form(field, topology, c3, Some(&exact)),
    ])
}

/// Single-valued integral of `form`, zero at `basepoint`.
///
/// The nodal potential minimizes `sum_T w_T |T| |grad u - f_T|^2` with
/// `w_T = (1 + |f_T|)^-2`, so exact forms are reproduced and the small
/// non-closure of a discrete form is spread instead of accumulated along
/// paths. The weights keep the near-lightlike boundary layer from
/// dominating. Node 0 is pinned, so changing the basepoint only shifts the
/// result.
pub fn integrate(form: &DiscreteOneForm, mesh: &TriMesh, basepoint: usize) -> Result<Vec<f64>> {
    let n = mesh.nodes.len();
    if basepoint >= n {
        return Err(Error::Range(format!("basepoint {basepoint} is not a node")));
    }
    let ring = mesh.ring_nodes();
    if ring.len() > 2 {
        let mut cycle = ring.clone();
        cycle.push(ring[0]);
        let period = form.path_sum(&cycle)?;
        if period.abs() > 100.0 * form.rho.max(f64::EPSILON) {
            return Err(Error::Topology(format!(
                "form has puncture period {period:.3e}; single-valued integration needs a cut"
            )));
        }
    }
    if n == 1 {
        return Ok(vec![0.0]);
    }
    // unknown j holds node j + 1
    let pattern: Vec<(usize, usize)> = form.topology().edges.iter().filter(|e| e[0] > 0).map(|e| (e[0] - 1, e[1] - 1)).collect();
    let mut mat = Envelope::new(n - 1, &pattern);
    let mut rhs = vec![0.0; n - 1];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let p = tri.map(|i| mesh.nodes[i]);
        let twice_area = geom::cross(geom::sub(p[1], p[0]), geom::sub(p[2], p[0]));
        // gradient of the hat function of vertex k
        let grad: [Point; 3] = std::array::from_fn(|k| {
            let e = geom::sub(p[(k + 2) % 3], p[(k + 1) % 3]);
            [-e[1] / twice_area, e[0] / twice_area]
        });
        let f = form.covectors[t];
        let w = 0.5 * twice_area.abs() / (1.0 + geom::norm(f)).powi(2);
        for a in 0..3 {
            if tri[a] == 0 {
                continue;
            }
            rhs[tri[a] - 1] += w * geom::dot(f, grad[a]);
            for b in 0..3 {
                if tri[b] != 0 {
                    mat.add(tri[a] - 1, tri[b] - 1, w * geom::dot(grad[a], grad[b]));
                }
            }
        }
    }
    mat.factor().map_err(|i| Error::Topology(format!("integration system is singular at node {}", i + 1)))?;
    mat.solve(&mut rhs);
    let mut out = Vec::with_capacity(n);
    out.push(0.0);
    out.extend(rhs);
    let base = out[basepoint];
    out.iter_mut().for_each(|x| *x -= base);
    Ok(out)
}

/// Edge path from the top of the puncture ring up to the top boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cut {
    /// Nodes with strictly increasing ordinate.
    pub nodes: Vec<usize>,
    pub center: Point,
}

impl Cut {
    /// Follows the most nearly vertical upward edge from the highest ring node.
    pub fn vertical(mesh: &TriMesh, topo: &Topology) -> Result<Self> {
        let pc = mesh.puncture.ok_or_else(|| Error::Topology("cut requested on an unpunctured mesh".into()))?;
        let ring = mesh.ring_nodes();
        let start = ring
            .iter()
            .copied()
            .max_by(|&a, &b| {
                mesh.nodes[a][1]
                    .total_cmp(&mesh.nodes[b][1])
                    .then((mesh.nodes[b][0] - pc.center[0]).abs().total_cmp(&(mesh.nodes[a][0] - pc.center[0]).abs()))
            })
            .ok_or_else(|| Error::Topology("mesh has no ring nodes".into()))?;
        let mut nodes = vec![start];
        let mut cur = start;
        while !mesh.tags[cur].has(NodeTags::TOP) {
            let p = mesh.nodes[cur];
            let next = topo.neighbors[cur]
                .iter()
                .copied()
                .filter(|&q| mesh.nodes[q][1] > p[1] + 1e-12 && !mesh.tags[q].has(NodeTags::RING))
                .max_by(|&a, &b| {
                    let ca = (mesh.nodes[a][1] - p[1]) / geom::dist(mesh.nodes[a], p);
                    let cb = (mesh.nodes[b][1] - p[1]) / geom::dist(mesh.nodes[b], p);
                    ca.total_cmp(&cb).then(b.cmp(&a))
                })
                .ok_or_else(|| Error::Topology(format!("cut stalls at node {cur}")))?;
            nodes.push(next);
            cur = next;
        }
        Ok(Self { nodes, center: pc.center })
    }

    /// True when `p` lies left of the cut (or left of the center below the cut's start).
    pub fn is_left(&self, mesh: &TriMesh, p: Point) -> bool {
        let start = mesh.nodes[self.nodes[0]];
        if p[1] <= start[1] {
            return p[0] < self.center[0];
        }
        for w in self.nodes.windows(2) {
            let (a, b) = (mesh.nodes[w[0]], mesh.nodes[w[1]]);
            if p[1] <= b[1] {
                let s = (p[1] - a[1]) / (b[1] - a[1]);
                return p[0] < a[0] + s * (b[0] - a[0]);
            }
        }
        p[0] < mesh.nodes[*self.nodes.last().unwrap()][0]
    }
}

/// Conjugate function on the cut mesh.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiValuedField {
    /// Nodal values; cut nodes carry their left-side value here.
    pub values: Vec<f64>,
    /// Right-side values of the cut nodes.
    pub right: BTreeMap<usize, f64>,
    pub cut: Cut,
    /// Counterclockwise period: right-side minus left-side value across the cut.
    pub k: f64,
    /// Jump at the midpoint of every cut edge.
    pub edge_jumps: Vec<f64>,
}

impl MultiValuedField {
    /// Largest deviation of a cut-edge jump from `k`.
    pub fn jump_spread(&self) -> f64 {
        self.edge_jumps.iter().map(|j| (j - self.k).abs()).fold(0.0, f64::max)
    }

    /// Value on the requested side of the cut (the side only matters on cut nodes).
    pub fn value(&self, node: usize, left: bool) -> f64 {
        match (left, self.right.get(&node)) {
            (false, Some(&v)) => v,
            _ => self.values[node],
        }
    }
}

/// Midpoint (Crouzeix-Raviart) integral of `form` on the mesh cut along `cut`,
/// averaged to nodes and shifted to vanish at `basepoint`.
pub fn integrate_with_cut(form: &DiscreteOneForm, mesh: &TriMesh, basepoint: usize, cut: &Cut) -> Result<MultiValuedField> {
    let topo = form.topology();
    let n_edges = topo.edges.len();
    let cut_nodes: BTreeSet<usize> = cut.nodes.iter().copied().collect();
    let cut_edges: Vec<usize> = cut
        .nodes
        .windows(2)
        .map(|w| topo.edge(w[0], w[1]).ok_or_else(|| Error::Topology("cut is not an edge path".into())))
        .collect::<Result<_>>()?;
    let cut_slot: HashMap<usize, usize> = cut_edges.iter().enumerate().map(|(j, &e)| (e, j)).collect();
    let near_cut: Vec<bool> = mesh.triangles.iter().map(|t| t.iter().any(|i| cut_nodes.contains(i))).collect();
    let is_left: Vec<bool> = (0..mesh.triangles.len()).map(|t| !near_cut[t] || cut.is_left(mesh, centroid(mesh, t))).collect();
    // midpoint slots per triangle: right-side triangles use the duplicate of a cut edge
    let slots: Vec<[usize; 3]> = (0..mesh.triangles.len())
        .map(|t| {
            topo.tri_edges[t].map(|e| match cut_slot.get(&e) {
                Some(&j) if !is_left[t] => n_edges + j,
                _ => e,
            })
        })
        .collect();
    let n_slots = n_edges + cut_edges.len();
    let mut slot_tris = vec![Vec::new(); n_slots];
    for (t, s) in slots.iter().enumerate() {
        for &m in s {
            slot_tris[m].push(t);
        }
    }
    let midpoint = |t: usize, k: usize| {
        let tri = mesh.triangles[t];
        geom::midpoint(mesh.nodes[tri[k]], mesh.nodes[tri[(k + 1) % 3]])
    };
    // shortest-path tree over midpoint slots, steps weighted like `edge_cost`
    let mut mid = vec![f64::NAN; n_slots];
    let mut best = vec![f64::INFINITY; n_slots];
    let mut reached = vec![false; mesh.triangles.len()];
    let root = slots[0][0];
    best[root] = 0.0;
    let mut heap: BinaryHeap<Reverse<(u64, usize, usize, usize)>> = BinaryHeap::new();
    heap.push(Reverse((0, root, usize::MAX, 0)));
    while let Some(Reverse((bits, m, t_from, k_from))) = heap.pop() {
        if !mid[m].is_nan() || f64::from_bits(bits) > best[m] {
            continue;
        }
        mid[m] = if t_from == usize::MAX {
            0.0
        } else {
            let k = slots[t_from].iter().position(|&x| x == m).unwrap();
            mid[slots[t_from][k_from]] + geom::dot(form.covectors[t_from], geom::sub(midpoint(t_from, k), midpoint(t_from, k_from)))
        };
        for &t in &slot_tris[m] {
            reached[t] = true;
            let k0 = slots[t].iter().position(|&x| x == m).unwrap();
            let size = 1.0 + geom::norm(form.covectors[t]);
            for k in 0..3 {
                let s = slots[t][k];
                let d = best[m] + size * geom::dist(midpoint(t, k), midpoint(t, k0));
                if mid[s].is_nan() && d < best[s] {
                    best[s] = d;
                    heap.push(Reverse((d.to_bits(), s, t, k0)));
                }
            }
        }
    }
    if reached.iter().any(|d| !d) || mid.iter().any(|x| x.is_nan()) {
        return Err(Error::Topology("cut mesh is not connected".into()));
    }
    // nodal average of the triangle-wise linear functions
    let mut left_sum = vec![0.0; mesh.nodes.len()];
    let mut left_cnt = vec![0usize; mesh.nodes.len()];
    let mut right_sum: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let s = slots[t];
        // slot k is the edge (tri[k], tri[k+1]); u(p_k) = u(m_k) + u(m_{k-1}) - u(m_{k+1})
        for k in 0..3 {
            let val = mid[s[k]] + mid[s[(k + 2) % 3]] - mid[s[(k + 1) % 3]];
            let node = tri[k];
            if cut_nodes.contains(&node) && !is_left[t] {
                let e = right_sum.entry(node).or_insert((0.0, 0));
                e.0 += val;
                e.1 += 1;
            } else {
                left_sum[node] += val;
                left_cnt[node] += 1;
            }
        }
    }
    let mut values: Vec<f64> = left_sum.iter().zip(&left_cnt).map(|(s, &c)| s / c.max(1) as f64).collect();
    let mut right: BTreeMap<usize, f64> = right_sum.into_iter().map(|(i, (s, c))| (i, s / c as f64)).collect();
    let base = values[basepoint];
    values.iter_mut().for_each(|x| *x -= base);
    right.values_mut().for_each(|x| *x -= base);
    let edge_jumps: Vec<f64> = cut_edges.iter().enumerate().map(|(j, &e)| mid[n_edges + j] - mid[e]).collect();
    let k = edge_jumps.iter().sum::<f64>() / edge_jumps.len().max(1) as f64;
    Ok(MultiValuedField { values, right, cut: cut.clone(), k, edge_jumps })
}

fn centroid(mesh: &TriMesh, t: usize) -> Point {
    let [a, b, c] = mesh.triangles[t];
    geom::scale(geom::add(geom::add(mesh.nodes[a], mesh.nodes[b]), mesh.nodes[c]), 1.0 / 3.0)
}

/// Boundary cycles of the union of the selected triangles, each closed
/// (first node repeated) and oriented with the region on its left.
pub fn region_boundary_cycles(mesh: &TriMesh, select: impl Fn(usize) -> bool) -> Result<Vec<Vec<usize>>> {
    let mut inside_edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        if select(t) {
            for k in 0..3 {
                inside_edges.insert((tri[k], tri[(k + 1) % 3]));
            }
        }
    }
    let mut next: BTreeMap<usize, usize> = BTreeMap::new();
    for &(a, b) in &inside_edges {
        if !inside_edges.contains(&(b, a)) && next.insert(a, b).is_some() {
            return Err(Error::Topology(format!("region boundary is pinched at node {a}")));
        }
    }
    let mut cycles = Vec::new();
    let mut used = BTreeSet::new();
    for &start in next.keys() {
        if used.contains(&start) {
            continue;
        }
        let mut cycle = vec![start];
        let mut cur = start;
        loop {
            used.insert(cur);
            cur = next[&cur];
            cycle.push(cur);
            if cur == start {
                break;
            }
            if cycle.len() > next.len() + 1 {
                return Err(Error::Topology("region boundary does not close".into()));
            }
        }
        cycles.push(cycle);
    }
    Ok(cycles)
}

/// Closed node cycle, counterclockwise, bounding the triangles whose centroids
/// lie within `radius` of `center`; the outermost boundary component is returned.
pub fn enclosing_loop(mesh: &TriMesh, center: Point, radius: f64) -> Result<Vec<usize>> {
    let cycles = region_boundary_cycles(mesh, |t| geom::dist(centroid(mesh, t), center) <= radius)?;
    cycles
        .into_iter()
        .map(|c| {
            let poly: Vec<Point> = c[..c.len() - 1].iter().map(|&i| mesh.nodes[i]).collect();
            (geom::signed_area(&poly), c)
        })
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c)
        .ok_or_else(|| Error::Topology(format!("no triangles within {radius} of the center")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodVector {
    pub components: [f64; 3],
    pub loop_nodes: Vec<usize>,
}

/// Summed increments of the three forms along a closed node cycle.
pub fn loop_period(forms: &[DiscreteOneForm; 3], cycle: &[usize]) -> Result<PeriodVector> {
    if cycle.len() < 2 || cycle.first() != cycle.last() {
        return Err(Error::Topology("loop must repeat its first node at the end".into()));
    }
    Ok(PeriodVector {
        components: [forms[0].path_sum(cycle)?, forms[1].path_sum(cycle)?, forms[2].path_sum(cycle)?],
        loop_nodes: cycle.to_vec(),
    })
}

/// Sum of increments along an open node path, reported like a period.
pub fn path_period(forms: &[DiscreteOneForm; 3], path: &[usize]) -> Result<PeriodVector> {
    Ok(PeriodVector {
        components: [forms[0].path_sum(path)?, forms[1].path_sum(path)?, forms[2].path_sum(path)?],
        loop_nodes: path.to_vec(),
    })
}

/// Exact conjugate period of the midpoint loop enclosing the node set.
pub fn dual_loop_period(field: &ScalarField, nodes: &[usize]) -> f64 {
    let el = euler_lagrange_residual(field);
    nodes.iter().map(|&i| el[i]).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerticalPeriod {
    /// Counterclockwise period around the puncture.
    pub k: f64,
    /// Same period on a loop one mesh layer further out.
    pub k_outer: f64,
}

/// Puncture period of the conjugate, checked on two nested loops.
pub fn vertical_period_k(field: &ScalarField) -> Result<VerticalPeriod> {
    let mesh = field.mesh();
    let ring = mesh.ring_nodes();
    if ring.is_empty() {
        return Err(Error::Topology("field has no puncture".into()));
    }
    let topo = Topology::new(mesh);
    let mut outer: BTreeSet<usize> = ring.iter().copied().collect();
    for &i in &ring {
        outer.extend(topo.neighbors[i].iter().copied());
    }
    let outer: Vec<usize> = outer.into_iter().collect();
    let k = dual_loop_period(field, &ring);
    let k_outer = dual_loop_period(field, &outer);
    if (k - k_outer).abs() > 1e-6 {
        return Err(Error::IntegrationQuality(format!("ring periods {k} and {k_outer} disagree")));
    }
    Ok(VerticalPeriod { k, k_outer })
}

/// Largest `|u(s p) - u(p) -+ k/2|` over node pairs off the cut and its
/// `s`-image. The sign is `+` on the left of `cut + s(cut)` and `-` on the right.
pub fn half_period_defect(u: &MultiValuedField, mesh: &TriMesh) -> Result<f64> {
    let sigma = mesh
        .symmetries
        .s
        .as_ref()
        .ok_or_else(|| Error::Capability("mesh has no point-symmetry pairing".into()))?;
    let on_cut: BTreeSet<usize> = u.cut.nodes.iter().copied().collect();
    let mut worst = 0.0f64;
    for (i, &j) in sigma.iter().enumerate() {
        if on_cut.contains(&i) || on_cut.contains(&j) {
            continue;
        }
        let left = if mesh.nodes[i][1] > mesh.nodes[u.cut.nodes[0]][1] {
            u.cut.is_left(mesh, mesh.nodes[i])
        } else if mesh.nodes[j][1] > mesh.nodes[u.cut.nodes[0]][1] {
            !u.cut.is_left(mesh, mesh.nodes[j])
        } else {
            mesh.nodes[i][0] < u.cut.center[0]
        };
        let expected = if left { 0.5 * u.k } else { -0.5 * u.k };
        worst = worst.max((u.values[j] - u.values[i] - expected).abs());
    }
    Ok(worst)
}

/// Discrete minimal surface residual of a recovered graph `u`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryCheck {
    /// Largest nodal residual of `div(grad u / sqrt(1 + |grad u|^2))`, relative
    /// to the sum of the absolute element contributions at that node.
    pub max_relative_residual: f64,
    pub nodes_checked: usize,
}

/// Residual of the minimal surface equation for the single-valued nodal `u`,
/// checked at interior nodes at least `CORE_MARGIN` from the singular set.
pub fn recovery_check(u: &[f64], mesh: &TriMesh) -> RecoveryCheck {
    recovery_check_with(mesh, |t, k| u[mesh.triangles[t][k]])
}

/// As [`recovery_check`], reading each triangle's values on its side of the cut.
pub fn recovery_check_cut(u: &MultiValuedField, mesh: &TriMesh) -> RecoveryCheck {
    let cut_nodes: BTreeSet<usize> = u.cut.nodes.iter().copied().collect();
    recovery_check_with(mesh, |t, k| {
        let node = mesh.triangles[t][k];
        if !cut_nodes.contains(&node) {
            return u.values[node];
        }
        u.value(node, u.cut.is_left(mesh, centroid(mesh, t)))
    })
}

fn recovery_check_with(mesh: &TriMesh, value: impl Fn(usize, usize) -> f64) -> RecoveryCheck {
    let n = mesh.nodes.len();
    let (mut res, mut scale) = (vec![0.0; n], vec![0.0; n]);
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let [p0, p1, p2] = tri.map(|i| mesh.nodes[i]);
        let twice = geom::cross(geom::sub(p1, p0), geom::sub(p2, p0));
        // gradients of the hat functions
        let basis = [
            [(p1[1] - p2[1]) / twice, (p2[0] - p1[0]) / twice],
            [(p2[1] - p0[1]) / twice, (p0[0] - p2[0]) / twice],
            [(p0[1] - p1[1]) / twice, (p1[0] - p0[0]) / twice],
        ];
        let mut g = [0.0; 2];
        for k in 0..3 {
            g = geom::add(g, geom::scale(basis[k], value(t, k)));
        }
        let q = geom::scale(g, 1.0 / (1.0 + geom::dot(g, g)).sqrt());
        let area = 0.5 * twice;
        for k in 0..3 {
            res[tri[k]] += area * geom::dot(q, basis[k]);
            scale[tri[k]] += area * geom::norm(basis[k]);
        }
    }
    let boundary = mesh.boundary_nodes();
    let paired: BTreeSet<usize> = mesh.periodic.iter().flatten().flat_map(|&(a, b)| [a, b]).collect();
    let mut out = RecoveryCheck { max_relative_residual: 0.0, nodes_checked: 0 };
    for i in 0..n {
        let p = mesh.nodes[i];
        if boundary[i] || paired.contains(&i) || !in_core(mesh, p) {
            continue;
        }
        out.nodes_checked += 1;
        out.max_relative_residual = out.max_relative_residual.max(res[i].abs() / scale[i]);
    }
    out
}

/// Tags of conjugate-surface nodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurfaceTags(pub u8);

impl SurfaceTags {
    /// Serration vertex with value 0: lies on a horizontal line in `z = 0`.
    pub const Z0: u8 = 1;
    /// Serration vertex with value 1: lies on a horizontal line in `z = 1`.
    pub const Z1: u8 = 2;
    /// Image of the puncture ring.
    pub const GAMMA: u8 = 4;
    pub const TRUNCATION: u8 = 8;

    pub fn has(self, flag: u8) -> bool {
        self.0 & flag != 0
    }
}

#[derive(Clone, Debug)]
pub struct SurfaceMesh {
    pub nodes: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    pub tags: Vec<SurfaceTags>,
    /// Ring nodes in counterclockwise planar order.
    pub gamma: Vec<usize>,
    /// Closedness residuals of the two horizontal coordinate forms.
    pub rho: [f64; 2],
    planar: Arc<TriMesh>,
}

impl SurfaceMesh {
    pub fn planar(&self) -> &TriMesh {
        &self.planar
    }

    pub fn planar_arc(&self) -> Arc<TriMesh> {
        Arc::clone(&self.planar)
    }

    pub fn from_parts(
        nodes: Vec<[f64; 3]>,
        triangles: Vec<[usize; 3]>,
        tags: Vec<SurfaceTags>,
        gamma: Vec<usize>,
        planar: Arc<TriMesh>,
    ) -> Self {
        Self { nodes, triangles, tags, gamma, rho: [0.0; 2], planar }
    }
}

/// Conjugate surface `(X1, X2, v)` with `(X1, X2)` vanishing at `basepoint`.
pub fn build_surface(field: &ScalarField, basepoint: usize) -> Result<SurfaceMesh> {
    let forms = conjugate_coordinate_forms(field)?;
    let mesh = field.mesh();
    let x1 = integrate(&forms[0], mesh, basepoint)?;
    let x2 = integrate(&forms[1], mesh, basepoint)?;
    let nodes: Vec<[f64; 3]> = (0..mesh.nodes.len()).map(|i| [x1[i], x2[i], field.values[i]]).collect();
    let mut tags = vec![SurfaceTags::default(); mesh.nodes.len()];
    if let Some(strip) = mesh.strip {
        for (i, t) in mesh.tags.iter().enumerate() {
            if t.has(NodeTags::BOTTOM) || t.has(NodeTags::TOP) {
                let p = mesh.nodes[i];
                let on_vertex = match strip.side_of(p) {
                    Some(crate::domain::Side::Bottom) => p[0] == p[0].round(),
                    Some(crate::domain::Side::Top) => {
                        let s = p[0] - strip.x0;
                        (s - s.round()).abs() <= 1e-12
                    }
                    None => false,
                };
                if on_vertex {
                    let val = strip.boundary_value(p)?;
                    tags[i].0 |= if val < 0.5 { SurfaceTags::Z0 } else { SurfaceTags::Z1 };
                }
            }
            if t.has(NodeTags::RING) {
                tags[i].0 |= SurfaceTags::GAMMA;
            }
            if (t.has(NodeTags::LEFT) || t.has(NodeTags::RIGHT)) && mesh.puncture.is_some() {
                tags[i].0 |= SurfaceTags::TRUNCATION;
            }
        }
    }
    Ok(SurfaceMesh {
        nodes,
        triangles: mesh.triangles.clone(),
        tags,
        gamma: mesh.ring_nodes(),
        rho: [forms[0].rho, forms[1].rho],
        planar: field.mesh_arc(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::mesh_rectangle;

    fn affine(alpha: f64) -> ScalarField {
        let mesh = Arc::new(mesh_rectangle([0.0, 0.0], [2.0, 1.0], 8, 4));
        let values = mesh.nodes.iter().map(|p| alpha * p[1]).collect();
        ScalarField::from_values(mesh, values)
    }

    #[test]
    fn affine_conjugate_is_linear() {
        let f = affine(0.5);
        let form = phi_form(&f).unwrap();
        assert!(form.rho < 1e-14);
        let u = integrate(&form, f.mesh(), 0).unwrap();
        for (p, val) in f.mesh().nodes.iter().zip(&u) {
            assert!((val - p[0] / 3f64.sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn affine_coordinate_forms() {
        let f = affine(0.6);
        let [d1, d2, d3] = conjugate_coordinate_forms(&f).unwrap();
        let topo = d1.topology();
        for (e, &[a, b]) in topo.edges.iter().enumerate() {
            let d = geom::sub(f.mesh().nodes[b], f.mesh().nodes[a]);
            assert!((d1.increments[e] - 0.8 * d[1]).abs() < 1e-14);
            assert!((d2.increments[e] + 1.25 * d[0]).abs() < 1e-14);
            assert_eq!(d3.increments[e], f.values[b] - f.values[a]);
        }
    }

    #[test]
    fn constant_field_forms() {
        let f = affine(0.0);
        let phi = phi_form(&f).unwrap();
        assert!(phi.increments.iter().all(|x| *x == 0.0));
        let [d1, d2, _] = conjugate_coordinate_forms(&f).unwrap();
        for (e, &[a, b]) in d1.topology().edges.iter().enumerate() {
            let d = geom::sub(f.mesh().nodes[b], f.mesh().nodes[a]);
            assert_eq!(d1.increments[e], d[1]);
            assert_eq!(d2.increments[e], -d[0]);
        }
    }

    #[test]
    fn lightlike_values_are_degenerate() {
        let mesh = Arc::new(mesh_rectangle([0.0, 0.0], [1.0, 1.0], 2, 2));
        let values = mesh.nodes.iter().map(|p| p[0]).collect();
        let f = ScalarField::from_values(mesh, values);
        assert!(matches!(phi_form(&f), Err(Error::DegenerateSlack { .. })));
    }
}
