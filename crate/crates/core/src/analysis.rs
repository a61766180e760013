//! Geometric checks on solved fields and their conjugate surfaces.
//!
//! Sampled checks draw from a seeded ChaCha stream; the seed is part of every
//! report that uses it.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conjugate::{path_period, phi_form, conjugate_coordinate_forms, in_core, PeriodVector, SurfaceMesh, SurfaceTags, Topology};
use crate::domain::HandleParams;
use crate::error::{Error, Result};
use crate::geom::{self, Point};
use crate::mesh::{Locator, NodeTags, TriMesh};
use crate::solver::{sample_periodic, ScalarField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Symmetry {
    Identity,
    /// Point symmetry about the puncture center.
    S,
    /// Mirror `x -> 2 cx - x`.
    XMirror,
    /// Mirror `y -> y0 - y`.
    YMirror,
}

/// `max_i |v_i - v_sigma(i)|` for the node pairing of `sym`.
pub fn symmetry_residual(field: &ScalarField, sym: Symmetry) -> Result<f64> {
    let pairs = &field.mesh().symmetries;
    let sigma = match sym {
        Symmetry::Identity => return Ok(0.0),
        Symmetry::S => pairs.s.as_ref(),
        Symmetry::XMirror => pairs.x_mirror.as_ref(),
        Symmetry::YMirror => pairs.y_mirror.as_ref(),
    }
    .ok_or_else(|| Error::Capability(format!("mesh has no {sym:?} pairing")))?;
    Ok(sigma
        .iter()
        .enumerate()
        .map(|(i, &j)| (field.values[i] - field.values[j]).abs())
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaReport {
    pub polyline: Vec<[f64; 3]>,
    /// Distance between the last and first vertex after closing; zero for a ring.
    pub closure_gap: f64,
    pub max_height_defect: f64,
    /// Sum of signed exterior angles of the horizontal projection.
    pub total_turning: f64,
    pub total_absolute_turning: f64,
    pub single_sign: bool,
    pub simple: bool,
}

/// Image of the puncture ring: a closed polygon expected in `{z = 1}`, convex, turning once.
pub fn gamma_report(surface: &SurfaceMesh) -> Result<GammaReport> {
    if surface.gamma.len() < 3 {
        return Err(Error::Capability("surface has no gamma curve".into()));
    }
    let polyline: Vec<[f64; 3]> = surface.gamma.iter().map(|&i| surface.nodes[i]).collect();
    let flat: Vec<Point> = polyline.iter().map(|p| [p[0], p[1]]).collect();
    let angles = geom::exterior_angles(&flat);
    let positive = angles.iter().all(|a| *a >= 0.0);
    let negative = angles.iter().all(|a| *a <= 0.0);
    // the cycle is stored open and closed implicitly, so its first vertex repeats exactly
    let first = polyline[0];
    let closed_again = surface.nodes[surface.gamma[0]];
    Ok(GammaReport {
        closure_gap: (0..3).map(|k| (first[k] - closed_again[k]).abs()).fold(0.0, f64::max),
        max_height_defect: polyline.iter().map(|p| (p[2] - 1.0).abs()).fold(0.0, f64::max),
        total_turning: angles.iter().sum(),
        total_absolute_turning: angles.iter().map(|a| a.abs()).sum(),
        single_sign: positive || negative,
        simple: geom::is_simple_polygon(&flat),
        polyline,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntersectionCounts {
    pub minus_plus: usize,
    pub minus_gamma: usize,
    pub plus_gamma: usize,
    pub minus_self: usize,
    pub plus_self: usize,
}

impl IntersectionCounts {
    pub fn total(&self) -> usize {
        self.minus_plus + self.minus_gamma + self.plus_gamma + self.minus_self + self.plus_self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub samples: usize,
    /// Smallest and largest number of projected triangles containing a sample.
    pub min_cover: usize,
    pub max_cover: usize,
}

impl CoverageReport {
    pub fn injective(&self) -> bool {
        self.samples > 0 && self.max_cover == 1 && self.min_cover == 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideReport {
    pub lower_samples: usize,
    pub upper_samples: usize,
    /// Winding number of the closed curve union around most lower samples.
    pub lower_winding: i32,
    /// Samples that share the winding number of the other half or lie inside
    /// the projection of the ring image.
    pub misplaced: usize,
}

impl SideReport {
    pub fn separated(&self) -> bool {
        self.lower_samples > 0 && self.upper_samples > 0 && self.misplaced == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingReport {
    pub c_minus: Vec<Point>,
    pub c_plus: Vec<Point>,
    pub gamma: Vec<Point>,
    pub intersections: IntersectionCounts,
    pub lower_coverage: CoverageReport,
    pub upper_coverage: CoverageReport,
    pub sides: SideReport,
    /// Largest `|C_-(x') - C_-(x)| / |x' - x|` over segments at least
    /// `LIPSCHITZ_MARGIN` left of the puncture center.
    pub lipschitz_far: f64,
    /// The same ratio over the whole of `C_-`.
    pub lipschitz_full: f64,
    pub seed: u64,
}

/// Distance from the puncture center excluded from `lipschitz_far`.
pub const LIPSCHITZ_MARGIN: f64 = 0.5;

fn projected(surface: &SurfaceMesh, i: usize) -> Point {
    [surface.nodes[i][0], surface.nodes[i][1]]
}

fn point_in_triangle(p: Point, a: Point, b: Point, c: Point) -> bool {
    let (o1, o2, o3) = (geom::orient(a, b, p), geom::orient(b, c, p), geom::orient(c, a, p));
    (o1 >= 0 && o2 >= 0 && o3 >= 0) || (o1 <= 0 && o2 <= 0 && o3 <= 0)
}

/// Counts, for each sampled triangle, how many projected `triangles` cover its
/// projected centroid.
fn coverage(surface: &SurfaceMesh, triangles: &[usize], samples: &[usize]) -> CoverageReport {
    let proj: Vec<[Point; 3]> = triangles.iter().map(|&t| surface.triangles[t].map(|i| projected(surface, i))).collect();
    let mut report = CoverageReport { samples: samples.len(), min_cover: usize::MAX, max_cover: 0 };
    for &t in samples {
        let q = sample_point(surface, t);
        let cover = proj.iter().filter(|[a, b, c]| point_in_triangle(q, *a, *b, *c)).count();
        report.min_cover = report.min_cover.min(cover);
        report.max_cover = report.max_cover.max(cover);
    }
    if samples.is_empty() {
        report.min_cover = 0;
    }
    report
}

fn sample_point(surface: &SurfaceMesh, t: usize) -> Point {
    let [a, b, c] = surface.triangles[t].map(|i| projected(surface, i));
    geom::scale(geom::add(geom::add(a, b), c), 1.0 / 3.0)
}

/// Draws `count` distinct triangles from `pool` (all of them when the pool is smaller).
fn draw(pool: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.len() <= count {
        return pool.to_vec();
    }
    let mut chosen = BTreeSet::new();
    while chosen.len() < count {
        chosen.insert(pool[rng.gen_range(0..pool.len())]);
    }
    chosen.into_iter().collect()
}

fn row_curve(mesh: &TriMesh, level: f64, keep: impl Fn(f64) -> bool) -> Vec<usize> {
    mesh.nodes_on_row(level).into_iter().filter(|&i| keep(mesh.nodes[i][0])).collect()
}

/// Embeddedness structure of a handle surface inside the truncation window.
///
/// `samples` core triangles are drawn in each half for the side and coverage
/// checks; coverage counts only core triangles of the same half.
pub fn embedding_report(surface: &SurfaceMesh, samples: usize, seed: u64) -> Result<EmbeddingReport> {
    let mesh = surface.planar();
    let pc = mesh.puncture.ok_or_else(|| Error::Capability("surface has no puncture".into()))?;
    let (cx, cy) = (pc.center[0], pc.center[1]);
    let minus = row_curve(mesh, cy, |x| x < cx);
    let plus = row_curve(mesh, cy, |x| x > cx);
    if minus.len() < 2 || plus.len() < 2 {
        return Err(Error::Capability("midline is not resolved by mesh nodes".into()));
    }
    let c_minus: Vec<Point> = minus.iter().map(|&i| projected(surface, i)).collect();
    let c_plus: Vec<Point> = plus.iter().map(|&i| projected(surface, i)).collect();
    let mut gamma_nodes = surface.gamma.clone();
    gamma_nodes.push(gamma_nodes[0]);
    let gamma: Vec<Point> = gamma_nodes.iter().map(|&i| projected(surface, i)).collect();

    // segment pairs sharing a mesh node touch by construction and are not crossings
    let shares = |p: &[usize], q: &[usize], i: usize, j: usize| {
        let (a, b) = (p[i], p[i + 1]);
        let (c, d) = (q[j], q[j + 1]);
        a == c || a == d || b == c || b == d
    };
    let intersections = IntersectionCounts {
        minus_plus: geom::count_polyline_crossings(&c_minus, &c_plus, |i, j| shares(&minus, &plus, i, j)),
        minus_gamma: geom::count_polyline_crossings(&c_minus, &gamma, |i, j| shares(&minus, &gamma_nodes, i, j)),
        plus_gamma: geom::count_polyline_crossings(&c_plus, &gamma, |i, j| shares(&plus, &gamma_nodes, i, j)),
        minus_self: geom::count_polyline_crossings(&c_minus, &c_minus, |i, j| j <= i + 1),
        plus_self: geom::count_polyline_crossings(&c_plus, &c_plus, |i, j| j <= i + 1),
    };

    let centroid_y = |t: usize| mesh.triangles[t].iter().map(|&i| mesh.nodes[i][1]).sum::<f64>() / 3.0;
    let core = |t: usize| mesh.triangles[t].iter().all(|&i| in_core(mesh, mesh.nodes[i]));
    let lower: Vec<usize> = (0..mesh.triangles.len()).filter(|&t| centroid_y(t) < cy && core(t)).collect();
    let upper: Vec<usize> = (0..mesh.triangles.len()).filter(|&t| centroid_y(t) > cy && core(t)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lower_samples = draw(&lower, samples, &mut rng);
    let upper_samples = draw(&upper, samples, &mut rng);
    let union = closed_curve_union(surface, &minus, &plus, cy);
    let windings = |set: &[usize]| -> Vec<(i32, i32)> {
        set.iter()
            .map(|&t| {
                let q = sample_point(surface, t);
                (geom::winding_number(&union, q), geom::winding_number(&gamma, q))
            })
            .collect()
    };
    let (lw, uw) = (windings(&lower_samples), windings(&upper_samples));
    let lower_winding = majority(lw.iter().map(|w| w.0));
    let misplaced = lw.iter().filter(|w| w.0 != lower_winding || w.1 != 0).count()
        + uw.iter().filter(|w| w.0 == lower_winding || w.1 != 0).count();

    let ratio = |k: usize| geom::dist(c_minus[k + 1], c_minus[k]) / (mesh.nodes[minus[k + 1]][0] - mesh.nodes[minus[k]][0]);
    let lipschitz_full = (0..minus.len() - 1).map(ratio).fold(0.0, f64::max);
    let lipschitz_far = (0..minus.len() - 1)
        .filter(|&k| mesh.nodes[minus[k + 1]][0] <= cx - LIPSCHITZ_MARGIN)
        .map(ratio)
        .fold(0.0, f64::max);
    Ok(EmbeddingReport {
        intersections,
        lower_coverage: coverage(surface, &lower, &lower_samples),
        upper_coverage: coverage(surface, &upper, &upper_samples),
        sides: SideReport { lower_samples: lower_samples.len(), upper_samples: upper_samples.len(), lower_winding, misplaced },
        lipschitz_far,
        lipschitz_full,
        seed,
        c_minus,
        c_plus,
        gamma,
    })
}

fn majority(values: impl Iterator<Item = i32>) -> i32 {
    let mut counts: HashMap<i32, usize> = HashMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    counts.into_iter().max_by_key(|&(v, c)| (c, -v)).map_or(0, |(v, _)| v)
}

/// `C_-`, the lower half of the ring image, and `C_+`, closed far outside the
/// truncated surface by the end tangents of the two curves and a circular arc.
fn closed_curve_union(surface: &SurfaceMesh, minus: &[usize], plus: &[usize], cy: f64) -> Vec<Point> {
    let mesh = surface.planar();
    let pc = mesh.puncture.expect("caller checked the puncture");
    let mut lower_ring: Vec<usize> = surface.gamma.iter().copied().filter(|&i| mesh.nodes[i][1] < cy).collect();
    let angle = |i: usize| {
        let d = geom::sub(mesh.nodes[i], pc.center);
        d[1].atan2(d[0])
    };
    lower_ring.sort_by(|&a, &b| angle(a).total_cmp(&angle(b)));
    let mut chain: Vec<usize> = minus.to_vec();
    chain.extend(lower_ring);
    chain.extend(plus);
    chain.dedup();
    let mut curve: Vec<Point> = chain.iter().map(|&i| projected(surface, i)).collect();

    let all: Vec<Point> = (0..surface.nodes.len()).map(|i| projected(surface, i)).collect();
    let origin = geom::scale(all.iter().fold([0.0, 0.0], |acc, &p| geom::add(acc, p)), 1.0 / all.len() as f64);
    let extent = all.iter().map(|&p| geom::dist(p, origin)).fold(0.0, f64::max);
    let radius = 10.0 * extent.max(1.0);
    // first hit of the ray `a + t d` with the far circle
    let to_circle = |a: Point, b: Point| -> Point {
        let d = geom::sub(a, b);
        let d = geom::scale(d, 1.0 / geom::norm(d));
        let w = geom::sub(a, origin);
        let (bq, cq) = (geom::dot(w, d), geom::dot(w, w) - radius * radius);
        geom::add(a, geom::scale(d, -bq + (bq * bq - cq).sqrt()))
    };
    let n = curve.len();
    let start = to_circle(curve[0], curve[1]);
    let end = to_circle(curve[n - 1], curve[n - 2]);
    let polar = |p: Point| {
        let d = geom::sub(p, origin);
        d[1].atan2(d[0])
    };
    let (a0, a1) = (polar(end), polar(start));
    let sweep = (a1 - a0).rem_euclid(std::f64::consts::TAU);
    curve.push(end);
    let steps = 256;
    for k in 1..steps {
        let a = a0 + sweep * k as f64 / steps as f64;
        curve.push(geom::add(origin, [radius * a.cos(), radius * a.sin()]));
    }
    curve.push(start);
    curve
}

/// Graph property of a layer surface: over the core triangles the horizontal
/// projection covers each sampled point of its own image exactly once.
pub fn krust_check(surface: &SurfaceMesh, samples: usize, seed: u64) -> CoverageReport {
    let mesh = surface.planar();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<usize> = (0..mesh.triangles.len())
        .filter(|&t| mesh.triangles[t].iter().all(|&i| in_core(mesh, mesh.nodes[i])))
        .collect();
    let chosen = draw(&pool, samples, &mut rng);
    coverage(surface, &pool, &chosen)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticsReport {
    /// Left edge of the first window; window `n` is `[start - 2n, start - 2n + 2]`.
    pub window_start: f64,
    pub residuals: Vec<f64>,
    pub strictly_decreasing: bool,
}

/// Compares `field` on translated windows with the layer field on its cell.
///
/// Window `n` holds the layer nodes shifted by `window_start - 2n`; `field` is
/// sampled periodically when its mesh is periodic and by interpolation otherwise.
pub fn asymptotics_report(field: &ScalarField, layer: &ScalarField, window_start: f64, n_max: usize) -> Result<AsymptoticsReport> {
    if (window_start / 2.0).fract() != 0.0 {
        return Err(Error::Range(format!("window start {window_start} is not an even integer")));
    }
    let layer_mesh = layer.mesh();
    if layer_mesh.periodic.is_none() {
        return Err(Error::Capability("reference field is not a periodic layer".into()));
    }
    let periodic_field = field.mesh().periodic.is_some();
    let field_locator = Locator::new(field.mesh());
    let (lo, hi) = bounds(field.mesh());
    let mut residuals = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        let shift = window_start - 2.0 * n as f64;
        if !periodic_field && (shift < lo - 1e-12 || shift + 2.0 > hi + 1e-12) {
            return Err(Error::Range(format!("window [{shift}, {}] leaves the truncation [{lo}, {hi}]", shift + 2.0)));
        }
        let mut worst = 0.0f64;
        for (p, &value) in layer_mesh.nodes.iter().zip(&layer.values) {
            let q = [p[0] + shift, p[1]];
            let v = if periodic_field {
                sample_periodic(field, &field_locator, q)?
            } else {
                field.eval(&field_locator, q).ok_or_else(|| Error::Range(format!("({}, {}) outside the field mesh", q[0], q[1])))?
            };
            worst = worst.max((v - value).abs());
        }
        residuals.push(worst);
    }
    let strictly_decreasing = residuals.windows(2).all(|w| w[1] < w[0]);
    Ok(AsymptoticsReport { window_start, residuals, strictly_decreasing })
}

fn bounds(mesh: &TriMesh) -> (f64, f64) {
    mesh.nodes.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[0]), hi.max(p[0])))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HandleType {
    Minus,
    Plus,
    Unclassified,
}

/// Where a trace component leaves the strip boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceEnd {
    /// A horizontal symmetry curve at height 0.
    Z0,
    /// A horizontal symmetry curve at height 1.
    Z1,
    /// A boundary point between serration vertices (a Scherk end).
    End,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceComponent {
    pub nodes: Vec<usize>,
    pub boundary: TraceEnd,
    pub reaches_gamma: bool,
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandleTypeLabel {
    pub label: HandleType,
    pub components: Vec<TraceComponent>,
    /// Largest height difference between mirror nodes of the two components;
    /// `None` when the mesh carries no mirror pairing.
    pub symmetry_defect: Option<f64>,
    pub note: String,
}

/// Traces the preimage `x = cx` of the vertical symmetry plane, splits it at the
/// puncture, and labels the handle by the curves its two components reach.
pub fn classify_handle(surface: &SurfaceMesh, params: &HandleParams) -> Result<HandleTypeLabel> {
    let mesh = surface.planar();
    let pc = mesh.puncture.ok_or_else(|| Error::Capability("surface has no puncture".into()))?;
    let cx = (params.x0 + 1.0) / 2.0;
    if (pc.center[0] - cx).abs() > 1e-12 {
        return Err(Error::Data("surface was built for different parameters".into()));
    }
    let unclassified = |note: &str, components: Vec<TraceComponent>| HandleTypeLabel {
        label: HandleType::Unclassified,
        components,
        symmetry_defect: None,
        note: note.into(),
    };
    let mut column: Vec<usize> = (0..mesh.nodes.len()).filter(|&i| (mesh.nodes[i][0] - cx).abs() <= 1e-12).collect();
    column.sort_by(|&a, &b| mesh.nodes[a][1].total_cmp(&mesh.nodes[b][1]));
    let topo = Topology::new(mesh);
    let lower: Vec<usize> = column.iter().copied().filter(|&i| mesh.nodes[i][1] < pc.center[1]).collect();
    let mut upper: Vec<usize> = column.iter().copied().filter(|&i| mesh.nodes[i][1] > pc.center[1]).collect();
    upper.reverse();
    let mut components = Vec::new();
    for nodes in [lower, upper] {
        let connected = nodes.len() >= 2 && nodes.windows(2).all(|w| topo.edge(w[0], w[1]).is_some());
        let starts_on_line = nodes
            .first()
            .is_some_and(|&i| mesh.tags[i].has(NodeTags::BOTTOM) || mesh.tags[i].has(NodeTags::TOP));
        if !connected || !starts_on_line {
            return Ok(unclassified("the symmetry line is not resolved by mesh edges", components));
        }
        let first = surface.tags[nodes[0]];
        let boundary = if first.has(SurfaceTags::Z0) {
            TraceEnd::Z0
        } else if first.has(SurfaceTags::Z1) {
            TraceEnd::Z1
        } else {
            TraceEnd::End
        };
        let last = *nodes.last().unwrap();
        let length = nodes
            .windows(2)
            .map(|w| {
                let (a, b) = (surface.nodes[w[0]], surface.nodes[w[1]]);
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            })
            .sum();
        components.push(TraceComponent { reaches_gamma: surface.tags[last].has(SurfaceTags::GAMMA), nodes, boundary, length });
    }
    let symmetry_defect = mesh.symmetries.y_mirror.as_ref().map(|mirror| {
        components[0]
            .nodes
            .iter()
            .map(|&i| (surface.nodes[i][2] - surface.nodes[mirror[i]][2]).abs())
            .fold(0.0, f64::max)
    });
    let both = |end: TraceEnd| components.iter().all(|c| c.boundary == end && c.reaches_gamma);
    let (label, note) = if both(TraceEnd::Z1) {
        (HandleType::Minus, "both trace components join z=1 curves to gamma")
    } else if both(TraceEnd::Z0) {
        (HandleType::Plus, "both trace components join z=0 curves to gamma")
    } else {
        (HandleType::Unclassified, "trace components do not join a common curve family to gamma")
    };
    Ok(HandleTypeLabel { label, components, symmetry_defect, note: note.into() })
}

/// Union of `copies` vertical periods of the surface, each the surface and its
/// mirror image across its top plane. Symmetry curves shared by neighboring
/// pieces are glued and lose their tags.
pub fn reflect_extend(surface: &SurfaceMesh, copies: usize) -> Result<SurfaceMesh> {
    if let Some(p) = surface.nodes.iter().find(|p| !(0.0..=1.0).contains(&p[2])) {
        return Err(Error::Range(format!("surface height {} outside [0, 1]", p[2])));
    }
    let n = surface.nodes.len();
    let pieces = 2 * copies;
    let mut nodes: Vec<[f64; 3]> = Vec::with_capacity(n * pieces);
    let mut tags: Vec<SurfaceTags> = Vec::with_capacity(n * pieces);
    let mut triangles = Vec::with_capacity(surface.triangles.len() * pieces);
    let mut previous: Vec<usize> = Vec::new();
    for piece in 0..pieces {
        let base = piece as f64;
        let mirrored = piece % 2 == 1;
        // heights shared with the previous piece: 1 after an even piece, 0 after an odd one
        let seam = if mirrored { SurfaceTags::Z1 | SurfaceTags::GAMMA } else { SurfaceTags::Z0 };
        let mut index = Vec::with_capacity(n);
        for i in 0..n {
            let p = surface.nodes[i];
            let glued = piece > 0 && surface.tags[i].0 & seam != 0;
            if glued {
                let j = previous[i];
                tags[j].0 &= !seam;
                index.push(j);
                continue;
            }
            let z = if mirrored { base + 1.0 - p[2] } else { base + p[2] };
            index.push(nodes.len());
            nodes.push([p[0], p[1], z]);
            tags.push(surface.tags[i]);
        }
        for t in &surface.triangles {
            let tri = t.map(|i| index[i]);
            triangles.push(if mirrored { [tri[0], tri[2], tri[1]] } else { tri });
        }
        previous = index;
    }
    let gamma = Vec::new();
    Ok(SurfaceMesh::from_parts(nodes, triangles, tags, gamma, surface.planar_arc()))
}

/// Largest distance from `p + (0, 0, shift)` to the nearest node, over nodes whose
/// shifted height stays within the height range.
pub fn vertical_shift_defect(surface: &SurfaceMesh, shift: f64) -> f64 {
    const CELL: f64 = 1e-6;
    let key = |p: [f64; 3]| [(p[0] / CELL).floor() as i64, (p[1] / CELL).floor() as i64, (p[2] / CELL).floor() as i64];
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in surface.nodes.iter().enumerate() {
        grid.entry(key(*p)).or_default().push(i);
    }
    let top = surface.nodes.iter().map(|p| p[2]).fold(f64::NEG_INFINITY, f64::max);
    let mut worst = 0.0f64;
    for p in &surface.nodes {
        let q = [p[0], p[1], p[2] + shift];
        if q[2] > top + 1e-12 {
            continue;
        }
        let k = key(q);
        let mut best = f64::INFINITY;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(list) = grid.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        for &j in list {
                            let r = surface.nodes[j];
                            best = best.min(((r[0] - q[0]).powi(2) + (r[1] - q[1]).powi(2) + (r[2] - q[2]).powi(2)).sqrt());
                        }
                    }
                }
            }
        }
        worst = worst.max(best);
    }
    worst
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPeriods {
    /// Coordinate-form integrals along the midline between two periodic partners.
    pub pseudo_period: PeriodVector,
    /// Integral of the conjugate `dPhi` along the same path.
    pub layer_k: f64,
    pub rho: f64,
    pub rho_core: f64,
}

pub fn layer_periods(field: &ScalarField) -> Result<LayerPeriods> {
    let mesh = field.mesh();
    let strip = mesh.strip.ok_or_else(|| Error::Capability("field has no strip".into()))?;
    if mesh.periodic.is_none() {
        return Err(Error::Capability("field is not a periodic layer".into()));
    }
    let row = mesh.nodes_on_row(0.5 * strip.y0);
    let pairs = mesh.periodic.as_deref().unwrap_or_default();
    let closes = match (row.first(), row.last()) {
        (Some(&a), Some(&b)) => pairs.contains(&(a, b)),
        _ => false,
    };
    if !closes {
        return Err(Error::Capability("midline of the cell is not resolved by mesh nodes".into()));
    }
    let forms = conjugate_coordinate_forms(field)?;
    let phi = phi_form(field)?;
    Ok(LayerPeriods {
        pseudo_period: path_period(&forms, &row)?,
        layer_k: phi.path_sum(&row)?,
        rho: phi.rho,
        rho_core: phi.rho_core,
    })
}

/// Largest height difference across the periodic pairing of a layer surface.
pub fn periodic_height_defect(surface: &SurfaceMesh) -> Result<f64> {
    let pairs = surface.planar().periodic.as_ref().ok_or_else(|| Error::Capability("surface is not periodic".into()))?;
    Ok(pairs.iter().map(|&(a, b)| (surface.nodes[a][2] - surface.nodes[b][2]).abs()).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conjugate::build_surface;
    use crate::mesh::mesh_rectangle;
    use std::sync::Arc;

    fn slab() -> SurfaceMesh {
        let mesh = Arc::new(mesh_rectangle([0.0, 0.0], [1.0, 1.0], 3, 3));
        let values = mesh.nodes.iter().map(|p| 0.25 + 0.5 * p[1]).collect();
        build_surface(&ScalarField::from_values(mesh, values), 0).unwrap()
    }

    #[test]
    fn identity_residual_is_zero() {
        let mesh = Arc::new(mesh_rectangle([0.0, 0.0], [1.0, 1.0], 2, 2));
        let f = ScalarField::from_values(mesh, vec![0.3; 9]);
        assert_eq!(symmetry_residual(&f, Symmetry::Identity).unwrap(), 0.0);
        assert!(matches!(symmetry_residual(&f, Symmetry::S), Err(Error::Capability(_))));
    }

    #[test]
    fn one_copy_spans_two_units() {
        let s = slab();
        let r = reflect_extend(&s, 1).unwrap();
        let (lo, hi) = r.nodes.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p[2]), h.max(p[2])));
        assert_eq!((lo, hi), (0.25, 1.75));
        assert_eq!(r.triangles.len(), 2 * s.triangles.len());
    }

    #[test]
    fn two_copies_repeat_with_period_two() {
        let r = reflect_extend(&slab(), 2).unwrap();
        assert!(vertical_shift_defect(&r, 2.0) <= 1e-12);
        assert!(vertical_shift_defect(&r, 1.0) > 0.1);
    }

    #[test]
    fn flat_projection_is_injective() {
        let s = slab();
        let c = krust_check(&s, 20, 7);
        assert!(c.injective(), "{c:?}");
    }
}
