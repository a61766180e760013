//! Structured triangulations of the periodic layer cell and of the truncated,
//! punctured handle strip.
//!
//! Both generators place every serration vertex on an exact mesh node. The
//! handle strip is built on the lower half `y <= y0/2` and completed by the
//! point symmetry through the puncture, so the `s`-pairing is exact by
//! construction. Around the puncture an O-grid of geometrically graded
//! layers joins the ring of radius `eps` to a square box aligned with the
//! background grid.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{HandleParams, LayerParams, Side, StripDomain};
use crate::error::{Error, Result};
use crate::geom::{self, Point};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeTags(pub u8);

impl NodeTags {
    pub const BOTTOM: u8 = 1;
    pub const TOP: u8 = 2;
    pub const LEFT: u8 = 4;
    pub const RIGHT: u8 = 8;
    pub const RING: u8 = 16;

    pub fn has(self, flag: u8) -> bool {
        self.0 & flag != 0
    }

    pub fn insert(&mut self, flag: u8) {
        self.0 |= flag;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Puncture {
    pub center: Point,
    pub radius: f64,
}

/// Node permutations realizing the symmetries of the meshed region.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SymmetryPairings {
    /// Point symmetry about the puncture center.
    pub s: Option<Vec<usize>>,
    /// Mirror `x -> 2 cx - x`.
    pub x_mirror: Option<Vec<usize>>,
    /// Mirror `y -> y0 - y`.
    pub y_mirror: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    pub nodes: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
    pub tags: Vec<NodeTags>,
    /// Left node paired with the right node it is identified with.
    pub periodic: Option<Vec<(usize, usize)>>,
    pub h: f64,
    pub symmetries: SymmetryPairings,
    pub puncture: Option<Puncture>,
    /// Strip the mesh was cut from, when it is a strip mesh.
    pub strip: Option<StripDomain>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshParams {
    pub h: f64,
    /// Ratio of successive ring radii toward the puncture.
    pub grading: f64,
    pub epsilon: f64,
    /// Truncation half-width of the handle strip (even integer).
    pub half_width: u32,
}

impl Default for MeshParams {
    fn default() -> Self {
        Self { h: 0.1, grading: 0.7, epsilon: 0.05, half_width: 8 }
    }
}

impl TriMesh {
    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        0.5 * geom::cross(geom::sub(self.nodes[b], self.nodes[a]), geom::sub(self.nodes[c], self.nodes[a]))
    }

    /// Smallest interior angle over all triangles, in degrees.
    pub fn min_angle_deg(&self) -> f64 {
        let mut worst = 180.0f64;
        for tri in &self.triangles {
            for k in 0..3 {
                let p = self.nodes[tri[k]];
                let u = geom::sub(self.nodes[tri[(k + 1) % 3]], p);
                let v = geom::sub(self.nodes[tri[(k + 2) % 3]], p);
                let ang = geom::cross(u, v).abs().atan2(geom::dot(u, v)).to_degrees();
                worst = worst.min(ang);
            }
        }
        worst
    }

    /// Nodes lying on an edge that belongs to exactly one triangle.
    pub fn boundary_nodes(&self) -> Vec<bool> {
        let mut count: HashMap<(usize, usize), u32> = HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        let mut on = vec![false; self.nodes.len()];
        for ((a, b), c) in count {
            if c == 1 {
                on[a] = true;
                on[b] = true;
            }
        }
        on
    }

    pub fn find_node(&self, p: Point, tol: f64) -> Option<usize> {
        self.nodes.iter().position(|q| geom::dist(*q, p) <= tol)
    }

    /// Ring nodes sorted counterclockwise by angle about the puncture center, starting at angle -pi.
    pub fn ring_nodes(&self) -> Vec<usize> {
        let Some(p) = self.puncture else { return Vec::new() };
        let mut ring: Vec<usize> = (0..self.nodes.len()).filter(|&i| self.tags[i].has(NodeTags::RING)).collect();
        let ang = |i: usize| {
            let d = geom::sub(self.nodes[i], p.center);
            d[1].atan2(d[0])
        };
        ring.sort_by(|&a, &b| ang(a).total_cmp(&ang(b)));
        ring
    }

    /// Nodes on the horizontal line `y = level`, sorted by abscissa.
    pub fn nodes_on_row(&self, level: f64) -> Vec<usize> {
        let mut row: Vec<usize> = (0..self.nodes.len()).filter(|&i| (self.nodes[i][1] - level).abs() <= 1e-12).collect();
        row.sort_by(|&a, &b| self.nodes[a][0].total_cmp(&self.nodes[b][0]));
        row
    }

    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.nodes {
            hasher.update(p[0].to_le_bytes());
            hasher.update(p[1].to_le_bytes());
        }
        for t in &self.triangles {
            for &i in t {
                hasher.update((i as u64).to_le_bytes());
            }
        }
        for t in &self.tags {
            hasher.update([t.0]);
        }
        hex::encode(hasher.finalize())
    }

    fn check_orientation(&self) -> Result<()> {
        for t in 0..self.triangles.len() {
            if !(self.area(t) > 0.0) {
                return Err(Error::Mesh(format!("triangle {t} has non-positive area {}", self.area(t))));
            }
        }
        Ok(())
    }

    /// Completes every symmetry table that maps the node set onto itself.
    fn detect_mirrors(&mut self) {
        let Some(strip) = self.strip else { return };
        let cx = (strip.x0 + 1.0) / 2.0;
        let index = PointIndex::new(&self.nodes, 1e-9);
        let build = |f: &dyn Fn(Point) -> Point| -> Option<Vec<usize>> {
            self.nodes.iter().map(|&p| index.find(&self.nodes, f(p))).collect()
        };
        if self.symmetries.x_mirror.is_none() {
            self.symmetries.x_mirror = build(&|p| [2.0 * cx - p[0], p[1]]);
        }
        if self.symmetries.y_mirror.is_none() {
            self.symmetries.y_mirror = build(&|p| [p[0], strip.y0 - p[1]]);
        }
    }
}

/// Hash grid for coordinate lookups with a tolerance.
struct PointIndex {
    cell: f64,
    map: HashMap<(i64, i64), Vec<usize>>,
    tol: f64,
}

impl PointIndex {
    fn new(nodes: &[Point], tol: f64) -> Self {
        let cell = 1e-6;
        let mut map: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in nodes.iter().enumerate() {
            map.entry(Self::key(*p, cell)).or_default().push(i);
        }
        Self { cell, map, tol }
    }

    fn key(p: Point, cell: f64) -> (i64, i64) {
        ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64)
    }

    fn find(&self, nodes: &[Point], p: Point) -> Option<usize> {
        let (kx, ky) = Self::key(p, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(list) = self.map.get(&(kx + dx, ky + dy)) {
                    for &i in list {
                        if geom::dist(nodes[i], p) <= self.tol {
                            return Some(i);
                        }
                    }
                }
            }
        }
        None
    }
}

/// Splits `[lo, hi]` at the sorted interior `breaks` and distributes `total`
/// intervals over the pieces proportionally to their length (at least one each).
/// Ties are broken symmetrically about `center`.
fn graded_breakpoints(lo: f64, hi: f64, breaks: &[f64], total: usize, center: f64) -> Option<Vec<f64>> {
    let mut knots = vec![lo];
    for &b in breaks {
        if b > knots.last().unwrap() + 1e-12 && b < hi - 1e-12 {
            knots.push(b);
        }
    }
    knots.push(hi);
    let pieces = knots.len() - 1;
    if total < pieces {
        return None;
    }
    let len = hi - lo;
    let shares: Vec<f64> = knots.windows(2).map(|w| (w[1] - w[0]) / len * total as f64).collect();
    let mut counts: Vec<usize> = shares.iter().map(|s| (s.floor() as usize).max(1)).collect();
    let mut assigned: usize = counts.iter().sum();
    if assigned > total {
        return None;
    }
    let mut order: Vec<usize> = (0..pieces).collect();
    let mid = |k: usize| 0.5 * (knots[k] + knots[k + 1]);
    order.sort_by(|&a, &b| {
        let ra = shares[a] - counts[a] as f64;
        let rb = shares[b] - counts[b] as f64;
        rb.total_cmp(&ra)
            .then((mid(a) - center).abs().total_cmp(&(mid(b) - center).abs()))
            .then(a.cmp(&b))
    });
    let mut k = 0;
    while assigned < total {
        counts[order[k % pieces]] += 1;
        assigned += 1;
        k += 1;
    }
    let mut xs = vec![lo];
    for p in 0..pieces {
        let (a, b) = (knots[p], knots[p + 1]);
        for q in 1..=counts[p] {
            xs.push(if q == counts[p] { b } else { a + (b - a) * q as f64 / counts[p] as f64 });
        }
    }
    Some(xs)
}

fn min_angle(nodes: &[Point], tri: [usize; 3]) -> f64 {
    (0..3)
        .map(|k| {
            let p = nodes[tri[k]];
            let u = geom::sub(nodes[tri[(k + 1) % 3]], p);
            let v = geom::sub(nodes[tri[(k + 2) % 3]], p);
            geom::cross(u, v).atan2(geom::dot(u, v))
        })
        .fold(f64::INFINITY, f64::min)
}

/// Splits the counterclockwise quad `q` along the diagonal with the larger
/// minimum angle. Near-ties fall back to `prefer_ac`, so mirror-image quads
/// with mirrored preferences receive mirror-image splits.
fn split_quad(nodes: &[Point], q: [usize; 4], prefer_ac: bool) -> [[usize; 3]; 2] {
    let [a, b, c, d] = q;
    let ac = [[a, b, c], [a, c, d]];
    let bd = [[a, b, d], [b, c, d]];
    let qa = min_angle(nodes, ac[0]).min(min_angle(nodes, ac[1]));
    let qb = min_angle(nodes, bd[0]).min(min_angle(nodes, bd[1]));
    let use_ac = if (qa - qb).abs() < 1e-9 { prefer_ac } else { qa > qb };
    if use_ac {
        ac
    } else {
        bd
    }
}

/// Smallest angle, in radians, a preferred quad split may have before the
/// other diagonal is considered.
const ORIENTED_MIN_ANGLE: f64 = 25.0 * std::f64::consts::PI / 180.0;

/// Splits the counterclockwise quad `q` along `ac` or `bd` as preferred unless
/// that leaves an angle below `ORIENTED_MIN_ANGLE` and the other split is better.
fn split_quad_oriented(nodes: &[Point], q: [usize; 4], prefer_ac: bool) -> [[usize; 3]; 2] {
    let [a, b, c, d] = q;
    let ac = [[a, b, c], [a, c, d]];
    let bd = [[a, b, d], [b, c, d]];
    let qa = min_angle(nodes, ac[0]).min(min_angle(nodes, ac[1]));
    let qb = min_angle(nodes, bd[0]).min(min_angle(nodes, bd[1]));
    let use_ac = if prefer_ac { qa >= ORIENTED_MIN_ANGLE || qa >= qb } else { qb < ORIENTED_MIN_ANGLE && qa > qb };
    if use_ac {
        ac
    } else {
        bd
    }
}

/// Diagonal preference of a grid quad: diagonals fan out of the nearest
/// serration vertex on the boundary line of the quad's half. The rule commutes
/// with `s` and with the mirrors through serration vertices.
fn prefers_ac(strip: &StripDomain, x_mid: f64, upper: bool) -> bool {
    if upper {
        (x_mid - strip.x0).rem_euclid(1.0) >= 0.5
    } else {
        x_mid.rem_euclid(1.0) < 0.5
    }
}

/// Periodic cell `[0, 2] x [0, y0]` with left/right sides identified.
pub fn mesh_layer_cell(params: &LayerParams, mp: &MeshParams) -> Result<TriMesh> {
    if !(mp.h > 0.0) || mp.h > 1.0 {
        return Err(Error::Mesh(format!("h = {} cannot separate serration vertices at unit spacing", mp.h)));
    }
    let strip = StripDomain::from(*params);
    let m = (1.0 / mp.h - 1e-9).ceil() as usize;
    let n_cols = 2 * m;
    let bottom: Vec<f64> = (0..=n_cols).map(|i| i as f64 / m as f64).collect();
    // a top vertex closer than half a column to the cell side becomes the top corner
    let tau = strip.serration_vertices(Side::Top, -1.0, 1.0).iter().map(|v| v.2[0]).min_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
    let tau = if tau.abs() < 0.5 / m as f64 { tau } else { 0.0 };
    let top_breaks: Vec<f64> = strip.serration_vertices(Side::Top, tau, tau + 2.0).iter().map(|v| v.2[0]).collect();
    let top = graded_breakpoints(tau, tau + 2.0, &top_breaks, n_cols, 1.0 + tau)
        .ok_or_else(|| Error::Mesh(format!("h = {} too coarse for the top serration", mp.h)))?;
    // replace interior knots by the exact vertex abscissae
    let mut top = top;
    for &b in &top_breaks {
        if let Some(x) = top.iter_mut().find(|x| (**x - b).abs() < 1e-12) {
            *x = b;
        }
    }
    let ny = 2 * ((params.y0 / (2.0 * mp.h)).ceil() as usize).max(1);
    let idx = |i: usize, j: usize| i * (ny + 1) + j;
    let mut nodes = Vec::with_capacity((n_cols + 1) * (ny + 1));
    let mut tags = Vec::with_capacity(nodes.capacity());
    for i in 0..=n_cols {
        for j in 0..=ny {
            let s = j as f64 / ny as f64;
            let y = if j == ny { params.y0 } else { params.y0 * s };
            let x = match j {
                0 => bottom[i],
                _ if j == ny => top[i],
                _ => bottom[i] + s * (top[i] - bottom[i]),
            };
            nodes.push([x, y]);
            let mut t = NodeTags::default();
            if j == 0 {
                t.insert(NodeTags::BOTTOM);
            }
            if j == ny {
                t.insert(NodeTags::TOP);
            }
            if i == 0 {
                t.insert(NodeTags::LEFT);
            }
            if i == n_cols {
                t.insert(NodeTags::RIGHT);
            }
            tags.push(t);
        }
    }
    let mut triangles = Vec::with_capacity(2 * n_cols * ny);
    for i in 0..n_cols {
        for j in 0..ny {
            let upper = 2 * j >= ny;
            let x_mid = if upper { 0.5 * (top[i] + top[i + 1]) } else { 0.5 * (bottom[i] + bottom[i + 1]) };
            let quad = [idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)];
            triangles.extend(split_quad_oriented(&nodes, quad, prefers_ac(&strip, x_mid, upper)));
        }
    }
    let periodic = (0..=ny).map(|j| (idx(0, j), idx(n_cols, j))).collect();
    let mesh = TriMesh {
        nodes,
        triangles,
        tags,
        periodic: Some(periodic),
        h: mp.h,
        symmetries: SymmetryPairings::default(),
        puncture: None,
        strip: Some(strip),
    };
    mesh.check_orientation()?;
    Ok(mesh)
}

/// Truncated strip `[cx - L, cx + L] x [0, y0]` minus the disc of radius `eps` about `c`.
pub fn mesh_handle_strip(params: &HandleParams, mp: &MeshParams) -> Result<TriMesh> {
    let strip = StripDomain::from(*params);
    let [cx, cy] = strip.center();
    let eps = mp.epsilon;
    if !(mp.h > 0.0) || mp.h > 0.5 {
        return Err(Error::Mesh(format!("h = {} must lie in (0, 0.5]", mp.h)));
    }
    if !(eps > 0.0) || eps >= 1.0f64.min(params.y0 / 4.0) {
        return Err(Error::Mesh(format!("puncture radius {eps} must lie in (0, min(1, y0/4))")));
    }
    if mp.half_width < 4 || mp.half_width % 2 != 0 {
        return Err(Error::Mesh(format!("truncation half-width {} must be an even integer >= 4", mp.half_width)));
    }
    if !(mp.grading > 0.0 && mp.grading < 1.0) {
        return Err(Error::Mesh(format!("grading {} must lie in (0, 1)", mp.grading)));
    }
    let half = mp.half_width as f64;

    // rows of the lower half
    let rows = ((cy / mp.h).ceil() as usize).max(4);
    let dy = cy / rows as f64;
    let r = ((2.0 * eps / dy).ceil() as usize).max(2);
    if r + 2 > rows {
        return Err(Error::Mesh(format!("puncture radius {eps} too large for the strip at h = {}", mp.h)));
    }
    let box_half = r as f64 * dy;

    // bottom grid: serration integers and the truncation ends
    let m = (1.0 / mp.h - 1e-9).ceil() as usize;
    let (lo, hi) = (cx - half, cx + half);
    let ints: Vec<f64> = strip.serration_vertices(Side::Bottom, lo, hi).iter().map(|v| v.2[0]).collect();
    let mut knots = vec![lo];
    knots.extend(ints.iter().copied().filter(|&x| x > lo + 1e-12 && x < hi - 1e-12));
    knots.push(hi);
    // a serration vertex closer than half a column to a truncation end becomes the bottom corner
    let snap = 0.5 / m as f64;
    if knots[1] - knots[0] < snap {
        knots.remove(0);
    }
    if knots[knots.len() - 1] - knots[knots.len() - 2] < snap {
        knots.pop();
    }
    let mut counts: Vec<usize> =
        knots.windows(2).map(|w| (((w[1] - w[0]) * m as f64).round() as usize).max(1)).collect();
    let mut total: usize = counts.iter().sum();
    if total % 2 == 1 {
        let k = if knots[1] - knots[0] >= knots[knots.len() - 1] - knots[knots.len() - 2] { 0 } else { counts.len() - 1 };
        counts[k] += 1;
        total += 1;
    }
    let mut bottom = vec![knots[0]];
    for p in 0..counts.len() {
        let (a, b) = (knots[p], knots[p + 1]);
        for q in 1..=counts[p] {
            bottom.push(if q == counts[p] { b } else { a + (b - a) * q as f64 / counts[p] as f64 });
        }
    }
    let n_cols = total;
    let n_out = n_cols / 2 - r;
    if n_out < 1 {
        return Err(Error::Mesh("truncation too short for the puncture box".into()));
    }
    // interface grid on y = cy, symmetric about cx
    let mut offsets: Vec<f64> = (0..=r).map(|k| k as f64 * dy).collect();
    for k in 1..=n_out {
        offsets.push(box_half + (half - box_half) * k as f64 / n_out as f64);
    }
    *offsets.last_mut().unwrap() = half;
    let mut mid: Vec<f64> = offsets.iter().rev().map(|o| cx - o).collect();
    mid.extend(offsets.iter().skip(1).map(|o| cx + o));
    mid[0] = lo;
    mid[n_cols] = hi;
    let ic = n_cols / 2;
    let (il, ir) = (ic - r, ic + r);
    let jb = rows - r; // row of the box bottom

    let mut nodes: Vec<Point> = Vec::new();
    let mut tags: Vec<NodeTags> = Vec::new();
    let mut grid = vec![vec![usize::MAX; rows + 1]; n_cols + 1];
    for i in 0..=n_cols {
        for j in 0..=rows {
            let inside_box = j > jb && i > il && i < ir;
            if inside_box {
                continue;
            }
            let y = if j == rows { cy } else { j as f64 * dy };
            let x = if j == 0 {
                bottom[i]
            } else if j >= jb {
                mid[i]
            } else {
                bottom[i] + (j as f64 / jb as f64) * (mid[i] - bottom[i])
            };
            let mut t = NodeTags::default();
            if j == 0 {
                t.insert(NodeTags::BOTTOM);
            }
            if i == 0 {
                t.insert(NodeTags::LEFT);
            }
            if i == n_cols {
                t.insert(NodeTags::RIGHT);
            }
            grid[i][j] = nodes.len();
            nodes.push([x, y]);
            tags.push(t);
        }
    }
    let mut triangles = Vec::new();
    for i in 0..n_cols {
        for j in 0..rows {
            if j >= jb && i >= il && i < ir {
                continue;
            }
            let quad = [grid[i][j], grid[i + 1][j], grid[i + 1][j + 1], grid[i][j + 1]];
            triangles.extend(split_quad_oriented(&nodes, quad, prefers_ac(&strip, 0.5 * (bottom[i] + bottom[i + 1]), false)));
        }
    }

    // O-grid between the ring and the lower half of the box
    let mut box_path = Vec::with_capacity(4 * r + 1);
    for k in 0..=r {
        box_path.push(grid[il][rows - k]);
    }
    for k in 1..=2 * r {
        box_path.push(grid[il + k][jb]);
    }
    for k in 1..=r {
        box_path.push(grid[ir][jb + k]);
    }
    // radial growth never exceeds the angular spacing at the box corners
    let growth = (1.0 / mp.grading).min(1.0 + 1.0 / (2 * r) as f64);
    let layers = ((box_half / eps).ln() / growth.ln()).ceil().max(1.0) as usize;
    let q = (box_half / eps).powf(1.0 / layers as f64);
    let c = [cx, cy];
    let mut ogrid = vec![vec![usize::MAX; box_path.len()]; layers + 1];
    for (k, &b) in box_path.iter().enumerate() {
        let pb = nodes[b];
        let reach = geom::dist(pb, c);
        let dir = geom::scale(geom::sub(pb, c), 1.0 / reach);
        ogrid[layers][k] = b;
        for l in 0..layers {
            let rho = eps * q.powi(l as i32);
            let beta = l as f64 / layers as f64;
            let d = if l == 0 { eps } else { rho * (1.0 - beta + beta * reach / box_half) };
            let mut p = geom::add(c, geom::scale(dir, d));
            if k == 0 || k == box_path.len() - 1 {
                p[1] = cy;
            }
            let mut t = NodeTags::default();
            if l == 0 {
                t.insert(NodeTags::RING);
            }
            ogrid[l][k] = nodes.len();
            nodes.push(p);
            tags.push(t);
        }
    }
    let nk = box_path.len() - 1;
    for l in 0..layers {
        for k in 0..nk {
            let a = ogrid[l][k];
            let b = ogrid[l][k + 1];
            let cc = ogrid[l + 1][k + 1];
            let d = ogrid[l + 1][k];
            triangles.extend(split_quad(&nodes, [d, cc, b, a], k < nk / 2));
        }
    }

    // reflect through c
    let lower_n = nodes.len();
    let mut sigma = vec![usize::MAX; lower_n];
    let interface: Vec<usize> = (0..lower_n).filter(|&i| nodes[i][1] == cy).collect();
    for i in 0..lower_n {
        let img = strip.s(nodes[i]);
        if nodes[i][1] == cy {
            let partner = interface
                .iter()
                .copied()
                .find(|&k| (nodes[k][0] - img[0]).abs() <= 1e-9)
                .ok_or_else(|| Error::Mesh("interface is not symmetric".into()))?;
            sigma[i] = partner;
        } else {
            let mut t = NodeTags::default();
            let lt = tags[i];
            if lt.has(NodeTags::BOTTOM) {
                t.insert(NodeTags::TOP);
            }
            if lt.has(NodeTags::LEFT) {
                t.insert(NodeTags::RIGHT);
            }
            if lt.has(NodeTags::RIGHT) {
                t.insert(NodeTags::LEFT);
            }
            if lt.has(NodeTags::RING) {
                t.insert(NodeTags::RING);
            }
            let mut p = img;
            if lt.has(NodeTags::BOTTOM) {
                p[1] = params.y0;
            }
            // truncation sides are vertical except next to a snapped corner
            if lt.has(NodeTags::LEFT) && (p[0] - hi).abs() < 1e-9 {
                p[0] = hi;
            }
            if lt.has(NodeTags::RIGHT) && (p[0] - lo).abs() < 1e-9 {
                p[0] = lo;
            }
            sigma[i] = nodes.len();
            nodes.push(p);
            tags.push(t);
        }
    }
    let mut s_full = vec![usize::MAX; nodes.len()];
    for i in 0..lower_n {
        s_full[i] = sigma[i];
        s_full[sigma[i]] = i;
    }
    let lower_tris = triangles.len();
    for t in 0..lower_tris {
        let [a, b, cc] = triangles[t];
        triangles.push([sigma[a], sigma[b], sigma[cc]]);
    }
    // exact top serration vertices
    for (fam, n, p) in strip.serration_vertices(Side::Top, lo, hi) {
        let _ = (fam, n);
        if let Some(i) = (lower_n..nodes.len()).find(|&i| tags[i].has(NodeTags::TOP) && (nodes[i][0] - p[0]).abs() < 1e-9) {
            nodes[i] = p;
        }
    }
    for (_, _, p) in strip.serration_vertices(Side::Bottom, lo, hi) {
        if !nodes.iter().any(|q| *q == p) {
            return Err(Error::Mesh(format!("serration vertex ({}, {}) is not a node", p[0], p[1])));
        }
    }

    let mut mesh = TriMesh {
        nodes,
        triangles,
        tags,
        periodic: None,
        h: mp.h,
        symmetries: SymmetryPairings { s: Some(s_full), x_mirror: None, y_mirror: None },
        puncture: Some(Puncture { center: c, radius: eps }),
        strip: Some(strip),
    };
    mesh.check_orientation()?;
    mesh.detect_mirrors();
    Ok(mesh)
}

/// Uniform red refinement: every triangle into four, tags and pairings carried over.
pub fn refine(mesh: &TriMesh) -> TriMesh {
    let mut nodes = mesh.nodes.clone();
    let mut tags = mesh.tags.clone();
    let mut mids: HashMap<(usize, usize), usize> = HashMap::new();
    let mut edge_list: Vec<(usize, usize)> = Vec::new();
    for tri in &mesh.triangles {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            if !mids.contains_key(&key) {
                mids.insert(key, usize::MAX);
                edge_list.push(key);
            }
        }
    }
    edge_list.sort_unstable();
    for &(a, b) in &edge_list {
        let mut p = geom::midpoint(nodes[a], nodes[b]);
        let common = NodeTags(tags[a].0 & tags[b].0);
        if common.has(NodeTags::RING) {
            if let Some(pc) = mesh.puncture {
                let d = geom::sub(p, pc.center);
                p = geom::add(pc.center, geom::scale(d, pc.radius / geom::norm(d)));
            }
        }
        if common.has(NodeTags::BOTTOM) {
            p[1] = 0.0;
        }
        mids.insert((a, b), nodes.len());
        nodes.push(p);
        tags.push(common);
    }
    let mid = |a: usize, b: usize| mids[&(a.min(b), a.max(b))];
    let mut triangles = Vec::with_capacity(4 * mesh.triangles.len());
    for &[a, b, c] in &mesh.triangles {
        let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
        triangles.push([a, ab, ca]);
        triangles.push([ab, b, bc]);
        triangles.push([ca, bc, c]);
        triangles.push([ab, bc, ca]);
    }
    // None when the image of some edge is not an edge
    let extend_perm = |perm: &Vec<usize>| -> Option<Vec<usize>> {
        let mut out = perm.clone();
        out.resize(nodes.len(), usize::MAX);
        for &(a, b) in &edge_list {
            let (pa, pb) = (perm[a], perm[b]);
            out[mid(a, b)] = *mids.get(&(pa.min(pb), pa.max(pb)))?;
        }
        Some(out)
    };
    let symmetries = SymmetryPairings {
        s: mesh.symmetries.s.as_ref().and_then(extend_perm),
        x_mirror: mesh.symmetries.x_mirror.as_ref().and_then(extend_perm),
        y_mirror: mesh.symmetries.y_mirror.as_ref().and_then(extend_perm),
    };
    let periodic = mesh.periodic.as_ref().map(|pairs| {
        let partner: HashMap<usize, usize> = pairs.iter().copied().collect();
        let mut out = pairs.clone();
        for &(a, b) in &edge_list {
            if let (Some(&pa), Some(&pb)) = (partner.get(&a), partner.get(&b)) {
                if let Some(&m2) = mids.get(&(pa.min(pb), pa.max(pb))) {
                    out.push((mid(a, b), m2));
                }
            }
        }
        out.sort_unstable();
        out
    });
    // exact top line
    if let Some(strip) = mesh.strip {
        for (i, t) in tags.iter().enumerate() {
            if t.has(NodeTags::TOP) {
                nodes[i][1] = strip.y0;
            }
        }
    }
    let mut refined = TriMesh {
        nodes,
        triangles,
        tags,
        periodic,
        h: mesh.h / 2.0,
        symmetries,
        puncture: mesh.puncture,
        strip: mesh.strip,
    };
    refined.detect_mirrors();
    refined
}

/// Structured rectangle split into right triangles (test and documentation helper).
pub fn mesh_rectangle(lo: Point, hi: Point, nx: usize, ny: usize) -> TriMesh {
    let idx = |i: usize, j: usize| i * (ny + 1) + j;
    let mut nodes = Vec::new();
    for i in 0..=nx {
        for j in 0..=ny {
            let x = if i == nx { hi[0] } else { lo[0] + (hi[0] - lo[0]) * i as f64 / nx as f64 };
            let y = if j == ny { hi[1] } else { lo[1] + (hi[1] - lo[1]) * j as f64 / ny as f64 };
            nodes.push([x, y]);
        }
    }
    let mut triangles = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            triangles.extend(split_quad(&nodes, [idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)], i < nx / 2));
        }
    }
    let h = ((hi[0] - lo[0]) / nx as f64).max((hi[1] - lo[1]) / ny as f64);
    TriMesh {
        tags: vec![NodeTags::default(); nodes.len()],
        nodes,
        triangles,
        periodic: None,
        h,
        symmetries: SymmetryPairings::default(),
        puncture: None,
        strip: None,
    }
}

/// Polar annulus with `n_theta` sectors and radii graded so cells stay close to square.
pub fn mesh_annulus(center: Point, r_in: f64, r_out: f64, n_theta: usize) -> TriMesh {
    let step = std::f64::consts::TAU / n_theta as f64;
    let n_r = ((r_out / r_in).ln() / (1.0 + step).ln()).ceil().max(1.0) as usize;
    let q = (r_out / r_in).powf(1.0 / n_r as f64);
    let mut nodes = Vec::new();
    let mut tags = Vec::new();
    for l in 0..=n_r {
        let rho = if l == n_r { r_out } else { r_in * q.powi(l as i32) };
        for k in 0..n_theta {
            let a = step * k as f64;
            nodes.push([center[0] + rho * a.cos(), center[1] + rho * a.sin()]);
            let mut t = NodeTags::default();
            if l == 0 {
                t.insert(NodeTags::RING);
            }
            tags.push(t);
        }
    }
    let idx = |l: usize, k: usize| l * n_theta + (k % n_theta);
    let mut triangles = Vec::new();
    for l in 0..n_r {
        for k in 0..n_theta {
            let (a, b, c, d) = (idx(l, k), idx(l, k + 1), idx(l + 1, k + 1), idx(l + 1, k));
            // (a, d, c, b) is counterclockwise: d lies outward of a, b ahead in angle
            triangles.extend(split_quad(&nodes, [a, d, c, b], k % 2 == 0));
        }
    }
    TriMesh {
        nodes,
        triangles,
        tags,
        periodic: None,
        h: r_out * step,
        symmetries: SymmetryPairings::default(),
        puncture: Some(Puncture { center, radius: r_in }),
        strip: None,
    }
}

/// Bucketed point location with barycentric interpolation.
pub struct Locator<'a> {
    mesh: &'a TriMesh,
    lo: Point,
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl<'a> Locator<'a> {
    pub fn new(mesh: &'a TriMesh) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &mesh.nodes {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let cell = mesh.h.max(1e-6) * 2.0;
        let nx = (((hi[0] - lo[0]) / cell).ceil() as usize).max(1);
        let ny = (((hi[1] - lo[1]) / cell).ceil() as usize).max(1);
        let mut buckets = vec![Vec::new(); nx * ny];
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let mut blo = [f64::INFINITY; 2];
            let mut bhi = [f64::NEG_INFINITY; 2];
            for &i in tri {
                for d in 0..2 {
                    blo[d] = blo[d].min(mesh.nodes[i][d]);
                    bhi[d] = bhi[d].max(mesh.nodes[i][d]);
                }
            }
            let ix0 = (((blo[0] - lo[0]) / cell).floor() as usize).min(nx - 1);
            let ix1 = (((bhi[0] - lo[0]) / cell).floor() as usize).min(nx - 1);
            let iy0 = (((blo[1] - lo[1]) / cell).floor() as usize).min(ny - 1);
            let iy1 = (((bhi[1] - lo[1]) / cell).floor() as usize).min(ny - 1);
            for ix in ix0..=ix1 {
                for iy in iy0..=iy1 {
                    buckets[ix * ny + iy].push(t);
                }
            }
        }
        Self { mesh, lo, cell, nx, ny, buckets }
    }

    /// Triangle containing `p` and its barycentric coordinates.
    pub fn locate(&self, p: Point) -> Option<(usize, [f64; 3])> {
        let fx = (p[0] - self.lo[0]) / self.cell;
        let fy = (p[1] - self.lo[1]) / self.cell;
        if fx < -1e-9 || fy < -1e-9 {
            return None;
        }
        let ix = (fx.floor().max(0.0) as usize).min(self.nx - 1);
        let iy = (fy.floor().max(0.0) as usize).min(self.ny - 1);
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for &t in &self.buckets[ix * self.ny + iy] {
            let [a, b, c] = self.mesh.triangles[t];
            let (pa, pb, pc) = (self.mesh.nodes[a], self.mesh.nodes[b], self.mesh.nodes[c]);
            let area = geom::cross(geom::sub(pb, pa), geom::sub(pc, pa));
            let la = geom::cross(geom::sub(pb, p), geom::sub(pc, p)) / area;
            let lb = geom::cross(geom::sub(pc, p), geom::sub(pa, p)) / area;
            let lc = 1.0 - la - lb;
            let worst = la.min(lb).min(lc);
            if best.as_ref().map_or(true, |b| worst > b.2) {
                best = Some((t, [la, lb, lc], worst));
            }
        }
        best.filter(|b| b.2 >= -1e-9).map(|b| (b.0, b.1))
    }

    pub fn interpolate(&self, values: &[f64], p: Point) -> Option<f64> {
        self.locate(p).map(|(t, l)| {
            let tri = self.mesh.triangles[t];
            l[0] * values[tri[0]] + l[1] * values[tri[1]] + l[2] * values[tri[2]]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(x0: f64, y0: f64, h: f64) -> Result<TriMesh> {
        mesh_layer_cell(&LayerParams::new(x0, y0).unwrap(), &MeshParams { h, ..Default::default() })
    }

    fn handle(x0: f64, y0: f64, l: u32, h: f64, eps: f64) -> Result<TriMesh> {
        let mp = MeshParams { h, epsilon: eps, half_width: l, ..Default::default() };
        mesh_handle_strip(&HandleParams::new(x0, y0).unwrap(), &mp)
    }

    #[test]
    fn layer_cell_contains_serration_nodes() {
        let m = layer(0.5, 1.5, 0.1).unwrap();
        let i = m.find_node([1.0, 0.0], 0.0).expect("(1,0) is a node");
        assert!(m.tags[i].has(NodeTags::BOTTOM));
        for p in [[0.0, 0.0], [2.0, 0.0], [0.5, 1.5], [1.5, 1.5]] {
            assert!(m.find_node(p, 0.0).is_some(), "{p:?}");
        }
        assert!(m.min_angle_deg() >= 20.0);
    }

    #[test]
    fn layer_cell_pairing_is_bijective() {
        let m = layer(0.5, 1.5, 0.1).unwrap();
        let pairs = m.periodic.as_ref().unwrap();
        let mut lefts: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let mut rights: Vec<_> = pairs.iter().map(|p| p.1).collect();
        lefts.sort();
        lefts.dedup();
        rights.sort();
        rights.dedup();
        assert_eq!(lefts.len(), pairs.len());
        assert_eq!(rights.len(), pairs.len());
        for &(l, r) in pairs {
            assert!((m.nodes[l][1] - m.nodes[r][1]).abs() <= 1e-12);
            assert!(m.tags[l].has(NodeTags::LEFT) && m.tags[r].has(NodeTags::RIGHT));
        }
        let n_left = m.tags.iter().filter(|t| t.has(NodeTags::LEFT)).count();
        assert_eq!(n_left, pairs.len());
    }

    #[test]
    fn layer_cell_rejects_coarse_h() {
        assert!(matches!(layer(0.5, 1.5, 2.5), Err(Error::Mesh(_))));
    }

    #[test]
    fn handle_ring_and_pairing() {
        let m = handle(1.0, 2.0, 8, 0.1, 0.05).unwrap();
        let ring = m.ring_nodes();
        assert!(ring.len() >= 8);
        for &i in &ring {
            assert!((geom::dist(m.nodes[i], [1.0, 1.0]) - 0.05).abs() <= 1e-12);
        }
        let s = m.symmetries.s.as_ref().unwrap();
        let strip = m.strip.unwrap();
        for i in 0..m.nodes.len() {
            assert!(s[i] < m.nodes.len());
            assert_eq!(s[s[i]], i);
            assert!(geom::dist(m.nodes[s[i]], strip.s(m.nodes[i])) <= 1e-12);
        }
        assert!(m.symmetries.x_mirror.is_some() && m.symmetries.y_mirror.is_some());
        assert!(m.min_angle_deg() >= 20.0, "{}", m.min_angle_deg());
    }

    #[test]
    fn handle_generic_offset_has_only_s() {
        let m = handle(0.5, 2.0, 8, 0.1, 0.05).unwrap();
        assert!(m.symmetries.s.is_some());
        assert!(m.symmetries.x_mirror.is_none());
        for x in -7..=8 {
            assert!(m.find_node([x as f64, 0.0], 0.0).is_some());
        }
        for k in -7..=8 {
            assert!(m.find_node([0.5 + k as f64, 2.0], 0.0).is_some(), "top vertex {k}");
        }
        assert!(m.min_angle_deg() >= 20.0, "{}", m.min_angle_deg());
    }

    #[test]
    fn handle_rejects_large_puncture() {
        assert!(matches!(handle(1.0, 2.0, 8, 0.1, 1.5), Err(Error::Mesh(_))));
        assert!(matches!(handle(1.0, 2.0, 7, 0.1, 0.05), Err(Error::Mesh(_))));
    }

    #[test]
    fn refinement_quadruples_and_keeps_structure() {
        let m = layer(0.5, 1.5, 0.2).unwrap();
        let r = refine(&m);
        assert_eq!(r.triangles.len(), 4 * m.triangles.len());
        assert_eq!(r.h, m.h / 2.0);
        assert!(r.find_node([1.0, 0.0], 0.0).is_some());
        let pairs = r.periodic.as_ref().unwrap();
        assert_eq!(pairs.len(), 2 * m.periodic.as_ref().unwrap().len() - 1);
        for &(a, b) in pairs {
            assert!((r.nodes[a][1] - r.nodes[b][1]).abs() <= 1e-12);
        }

        let hm = handle(1.0, 2.0, 4, 0.2, 0.1).unwrap();
        let hr = refine(&hm);
        let s = hr.symmetries.s.as_ref().unwrap();
        let strip = hr.strip.unwrap();
        for i in 0..hr.nodes.len() {
            assert!(geom::dist(hr.nodes[s[i]], strip.s(hr.nodes[i])) <= 1e-12);
        }
        for &i in &hr.ring_nodes() {
            assert!((geom::dist(hr.nodes[i], [1.0, 1.0]) - 0.1).abs() <= 1e-12);
        }
        assert_eq!(hr.ring_nodes().len(), 2 * hm.ring_nodes().len());
    }

    #[test]
    fn locator_interpolates_affine_exactly() {
        let m = layer(0.3, 1.2, 0.1).unwrap();
        let loc = Locator::new(&m);
        let vals: Vec<f64> = m.nodes.iter().map(|p| 2.0 * p[0] - p[1]).collect();
        for p in [[0.33, 0.71], [1.99, 0.01], [0.0, 0.0], [2.0, 1.2]] {
            let v = loc.interpolate(&vals, p).unwrap();
            assert!((v - (2.0 * p[0] - p[1])).abs() < 1e-12);
        }
        assert!(loc.interpolate(&vals, [3.0, 0.5]).is_none());
    }
}
