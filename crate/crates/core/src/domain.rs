//! Strip domains `R x (0, y0)`, their serrate boundary data, unit-edge join
//! paths and the symmetric exhaustion polygons built from them.
//!
//! The strip carries four families of boundary vertices,
//!
//! ```text
//! a0(n) = (2n, 0)          a1(n) = (2n + 1, 0)
//! b0(n) = (x0 + 2n - 1, y0) b1(n) = (x0 + 2n, y0)
//! ```
//!
//! and the boundary data is the triangle wave that vanishes at the `*0`
//! vertices and equals one at the `*1` vertices. Two maps act on the strip:
//! the point symmetry `s` about `c = ((x0 + 1) / 2, y0 / 2)` and the
//! translation `t` by `(-2, 0)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Point};

/// Slack used when comparing a point against the two boundary lines.
const LINE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub x0: f64,
    pub y0: f64,
}

impl LayerParams {
    /// Validates `x0 in [-1, 1]`, `y0 > 0` and `x0^2 + y0^2 > 1`.
    pub fn new(x0: f64, y0: f64) -> Result<Self> {
        check_ranges(x0, y0)?;
        if x0 * x0 + y0 * y0 <= 1.0 {
            return Err(Error::Admissibility(format!(
                "layer needs x0^2 + y0^2 > 1, got {}",
                x0 * x0 + y0 * y0
            )));
        }
        Ok(Self { x0, y0 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandleParams {
    pub x0: f64,
    pub y0: f64,
}

impl HandleParams {
    /// Validates `x0 in [-1, 1]`, `y0 > 0` and `(x0 + 1)^2 + y0^2 > 4`.
    pub fn new(x0: f64, y0: f64) -> Result<Self> {
        check_ranges(x0, y0)?;
        let q = (x0 + 1.0).powi(2) + y0 * y0;
        if q <= 4.0 {
            return Err(Error::Admissibility(format!(
                "handle needs (x0 + 1)^2 + y0^2 > 4, got {q}"
            )));
        }
        Ok(Self { x0, y0 })
    }

    /// The underlying layer problem; always admissible when the handle is.
    pub fn layer(&self) -> LayerParams {
        LayerParams { x0: self.x0, y0: self.y0 }
    }
}

fn check_ranges(x0: f64, y0: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&x0) || !x0.is_finite() {
        return Err(Error::Admissibility(format!("x0 = {x0} outside [-1, 1]")));
    }
    if !(y0 > 0.0) || !y0.is_finite() {
        return Err(Error::Admissibility(format!("y0 = {y0} must be positive")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    A0,
    A1,
    B0,
    B1,
}

/// Which boundary line of the strip a point lies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Bottom,
    Top,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StripDomain {
    pub x0: f64,
    pub y0: f64,
}

impl From<LayerParams> for StripDomain {
    fn from(p: LayerParams) -> Self {
        Self { x0: p.x0, y0: p.y0 }
    }
}

impl From<HandleParams> for StripDomain {
    fn from(p: HandleParams) -> Self {
        Self { x0: p.x0, y0: p.y0 }
    }
}

impl StripDomain {
    pub fn vertex(&self, family: Family, n: i64) -> Point {
        let n = n as f64;
        match family {
            Family::A0 => [2.0 * n, 0.0],
            Family::A1 => [2.0 * n + 1.0, 0.0],
            Family::B0 => [self.x0 + 2.0 * n - 1.0, self.y0],
            Family::B1 => [self.x0 + 2.0 * n, self.y0],
        }
    }

    pub fn center(&self) -> Point {
        [(self.x0 + 1.0) / 2.0, self.y0 / 2.0]
    }

    /// Point symmetry about the center.
    pub fn s(&self, p: Point) -> Point {
        [(self.x0 + 1.0) - p[0], self.y0 - p[1]]
    }

    /// Translation by `(-2, 0)`.
    pub fn t(&self, p: Point) -> Point {
        [p[0] - 2.0, p[1]]
    }

    pub fn side_of(&self, p: Point) -> Option<Side> {
        if p[1].abs() <= LINE_TOL {
            Some(Side::Bottom)
        } else if (p[1] - self.y0).abs() <= LINE_TOL {
            Some(Side::Top)
        } else {
            None
        }
    }

    /// Serrate boundary data: distance to the nearest `a0` vertex on the
    /// bottom line and to the nearest `b0` vertex on the top line.
    pub fn boundary_value(&self, p: Point) -> Result<f64> {
        match self.side_of(p) {
            Some(Side::Bottom) => Ok(triangle_wave(p[0])),
            Some(Side::Top) => Ok(triangle_wave(p[0] - self.x0 + 1.0)),
            None => Err(Error::Domain(format!(
                "({}, {}) is on neither y = 0 nor y = {}",
                p[0], p[1], self.y0
            ))),
        }
    }

    /// Serration vertices (value 0 or 1) with abscissa in `[lo, hi]` on the given side.
    pub fn serration_vertices(&self, side: Side, lo: f64, hi: f64) -> Vec<(Family, i64, Point)> {
        let (f0, f1, shift) = match side {
            Side::Bottom => (Family::A0, Family::A1, 0.0),
            Side::Top => (Family::B0, Family::B1, self.x0 - 1.0),
        };
        // vertices of this side sit at shift + k for integer k
        let kmin = (lo - shift).ceil() as i64 - 1;
        let kmax = (hi - shift).floor() as i64 + 1;
        let mut out = Vec::new();
        for k in kmin..=kmax {
            let fam = if k.rem_euclid(2) == 0 { f0 } else { f1 };
            let n = k.div_euclid(2);
            let p = self.vertex(fam, n);
            if p[0] >= lo - 1e-12 && p[0] <= hi + 1e-12 {
                out.push((fam, n, p));
            }
        }
        out
    }
}

/// Distance from `x` to the nearest even integer.
pub fn triangle_wave(x: f64) -> f64 {
    (x - 2.0 * (x / 2.0).round()).abs()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum JoinCase {
    /// `x = 1`: a unit edge along the axis, then an isosceles pair of runs.
    RightIsosceles,
    /// `x = -1`: an isosceles pair of runs closed by a unit edge to the left.
    LeftIsosceles,
    /// `|x| < 1`: `n` edges at angle `theta`, one connecting edge, `n` edges back along `-x`.
    Fan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JoinRecord {
    pub case: JoinCase,
    /// Run length: `m` for the isosceles cases, `n` for the fan.
    pub run: u64,
    /// Fan angle (zero in the isosceles cases).
    pub theta: f64,
    /// `1 / n` for the fan, abscissa of the apex in the isosceles cases.
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JoinPath {
    pub vertices: Vec<Point>,
    pub edge_count: usize,
    pub record: JoinRecord,
}

/// Largest run length tried before giving up.
pub const JOIN_N_MAX: u64 = 1_000_000;
const BISECTION_TOL: f64 = 1e-12;

/// Convex polygonal path of an odd number of unit edges from the origin to
/// `(x, y)` inside `[-1, inf) x [0, y]`.
pub fn join_path(x: f64, y: f64) -> Result<JoinPath> {
    if !(-1.0..=1.0).contains(&x) || !(y > 0.0) {
        return Err(Error::Admissibility(format!("join target ({x}, {y}) outside [-1,1] x (0,inf)")));
    }
    let excess = x * x + y * y - 1.0;
    if excess <= 0.0 {
        return Err(Error::Admissibility(format!(
            "join target needs x^2 + y^2 > 1, got {}",
            x * x + y * y
        )));
    }
    let path = if x == 1.0 {
        isosceles_right(y)
    } else if x == -1.0 {
        isosceles_left(y)
    } else {
        fan(x, y, excess)?
    };
    debug_assert!(path.edge_count % 2 == 1);
    Ok(path)
}

fn run(from: Point, to: Point, m: u64, out: &mut Vec<Point>) {
    for k in 1..=m {
        let s = k as f64 / m as f64;
        out.push(if k == m { to } else { geom::add(from, geom::scale(geom::sub(to, from), s)) });
    }
}

fn smallest_run(y: f64) -> u64 {
    ((y / 2.0) - 1e-12).ceil().max(1.0) as u64
}

fn isosceles_right(y: f64) -> JoinPath {
    let m = smallest_run(y);
    let t = 1.0 + ((m * m) as f64 - y * y / 4.0).max(0.0).sqrt();
    let apex = [t, y / 2.0];
    let mut v = vec![[0.0, 0.0], [1.0, 0.0]];
    run([1.0, 0.0], apex, m, &mut v);
    run(apex, [1.0, y], m, &mut v);
    JoinPath {
        edge_count: v.len() - 1,
        vertices: v,
        record: JoinRecord { case: JoinCase::RightIsosceles, run: m, theta: 0.0, t },
    }
}

fn isosceles_left(y: f64) -> JoinPath {
    let m = smallest_run(y);
    let t = ((m * m) as f64 - y * y / 4.0).max(0.0).sqrt();
    let apex = [t, y / 2.0];
    let mut v = vec![[0.0, 0.0]];
    run([0.0, 0.0], apex, m, &mut v);
    run(apex, [0.0, y], m, &mut v);
    v.push([-1.0, y]);
    JoinPath {
        edge_count: v.len() - 1,
        vertices: v,
        record: JoinRecord { case: JoinCase::LeftIsosceles, run: m, theta: 0.0, t },
    }
}

fn fan(x: f64, y: f64, excess: f64) -> Result<JoinPath> {
    // The far end of the fan must come within unit distance of (x + n, y),
    // which first happens for n > excess / (2 (1 - x)).
    let start = ((excess / (2.0 * (1.0 - x))).floor() as u64 + 1).max(1);
    for n in start..=JOIN_N_MAX {
        let nf = n as f64;
        let target = [x + nf, y];
        let gap = |theta: f64| {
            let p = [nf * theta.cos(), nf * theta.sin()];
            let d = geom::sub(target, p);
            geom::dot(d, d) - 1.0
        };
        let theta_star = y.atan2(x + nf);
        if gap(theta_star) >= 0.0 || gap(0.0) <= 0.0 {
            continue;
        }
        // first root in (0, theta_star): the branch with t ~ theta (y + sqrt(1 - x^2)) / excess
        let (mut lo, mut hi) = (0.0, theta_star);
        let mut theta = 0.5 * (lo + hi);
        for _ in 0..200 {
            theta = 0.5 * (lo + hi);
            let g = gap(theta);
            if g.abs() < BISECTION_TOL || hi - lo < 1e-16 {
                break;
            }
            if g > 0.0 {
                lo = theta;
            } else {
                hi = theta;
            }
        }
        if nf * theta.sin() >= y {
            continue;
        }
        let mut v = vec![[0.0, 0.0]];
        let corner = [nf * theta.cos(), nf * theta.sin()];
        run([0.0, 0.0], corner, n, &mut v);
        // the connecting edge has length 1 up to the bisection tolerance; land exactly on the target
        v.push(target);
        run(target, [x, y], n, &mut v);
        let path = JoinPath {
            edge_count: v.len() - 1,
            vertices: v,
            record: JoinRecord { case: JoinCase::Fan, run: n, theta, t: 1.0 / nf },
        };
        if path.check_invariants(x, y).is_ok() {
            return Ok(path);
        }
    }
    Err(Error::Construction(format!(
        "no fan for ({x}, {y}) with n <= {JOIN_N_MAX}"
    )))
}

impl JoinPath {
    /// Checks unit edges, odd count, single-sign turning and containment in `[-1, inf) x [0, y]`.
    pub fn check_invariants(&self, x: f64, y: f64) -> Result<()> {
        let v = &self.vertices;
        if v.len() != self.edge_count + 1 || self.edge_count % 2 == 0 {
            return Err(Error::Construction(format!("edge count {} not odd", self.edge_count)));
        }
        if geom::dist(v[0], [0.0, 0.0]) > 1e-12 || geom::dist(*v.last().unwrap(), [x, y]) > 1e-9 {
            return Err(Error::Construction("endpoints do not match".into()));
        }
        for w in v.windows(2) {
            let len = geom::dist(w[0], w[1]);
            if (len - 1.0).abs() > 1e-9 {
                return Err(Error::Construction(format!("edge of length {len}")));
            }
        }
        let (mut left, mut right) = (false, false);
        for w in v.windows(3) {
            let c = geom::cross(geom::sub(w[1], w[0]), geom::sub(w[2], w[1]));
            if c > 1e-12 {
                left = true;
            } else if c < -1e-12 {
                right = true;
            }
        }
        if left && right {
            return Err(Error::Construction("turning changes sign".into()));
        }
        for p in v {
            if p[0] < -1.0 - 1e-12 || p[1] < -1e-12 || p[1] > y + 1e-12 {
                return Err(Error::Construction(format!("vertex ({}, {}) outside the band", p[0], p[1])));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExhaustionPolygon {
    pub n: u64,
    /// Closed counterclockwise cycle (first vertex not repeated).
    pub vertices: Vec<Point>,
    pub cap: JoinPath,
}

/// Symmetric convex unit-edge polygon containing the parallelogram
/// `a0(n) b1(n) b0(1 - n) a1(-n)`.
pub fn exhaustion_domain(domain: &StripDomain, n: u64) -> Result<ExhaustionPolygon> {
    if n == 0 {
        return Err(Error::Range("exhaustion index must be at least 1".into()));
    }
    let ni = n as i64;
    let cap = join_path(domain.x0, domain.y0)?;
    let a0 = domain.vertex(Family::A0, ni);
    let mut gamma: Vec<Point> = cap.vertices.iter().map(|p| geom::add(*p, a0)).collect();
    *gamma.last_mut().unwrap() = domain.vertex(Family::B1, ni);

    let mut v = Vec::new();
    // bottom segment a1(-n) -> a0(n), unit steps along the axis
    let start = domain.vertex(Family::A1, -ni);
    for k in 0..(4 * ni - 1) {
        v.push([start[0] + k as f64, 0.0]);
    }
    // cap gamma a0(n) -> b1(n)
    v.extend(gamma.iter().take(gamma.len() - 1).copied());
    // top segment b1(n) -> b0(1 - n)
    let top = domain.vertex(Family::B1, ni);
    for k in 0..(4 * ni - 1) {
        v.push([top[0] - k as f64, domain.y0]);
    }
    // s(gamma) b0(1 - n) -> a1(-n)
    v.extend(gamma.iter().take(gamma.len() - 1).map(|p| domain.s(*p)));
    Ok(ExhaustionPolygon { n, vertices: v, cap })
}

impl ExhaustionPolygon {
    pub fn edge_lengths(&self) -> Vec<f64> {
        let v = &self.vertices;
        (0..v.len()).map(|i| geom::dist(v[i], v[(i + 1) % v.len()])).collect()
    }

    /// `s` rotates the cycle by half its length; returns the largest vertex mismatch.
    pub fn symmetry_defect(&self, domain: &StripDomain) -> f64 {
        let v = &self.vertices;
        let half = v.len() / 2;
        (0..v.len())
            .map(|i| geom::dist(domain.s(v[i]), v[(i + half) % v.len()]))
            .fold(0.0, f64::max)
    }

    /// Tolerant point-in-convex-polygon test (boundary counts as inside).
    pub fn contains(&self, p: Point) -> bool {
        let v = &self.vertices;
        (0..v.len()).all(|i| {
            let a = v[i];
            let b = v[(i + 1) % v.len()];
            geom::cross(geom::sub(b, a), geom::sub(p, a)) >= -1e-9
        })
    }

    pub fn is_convex(&self) -> bool {
        let v = &self.vertices;
        let n = v.len();
        (0..n).all(|i| {
            let a = v[(i + n - 1) % n];
            let b = v[i];
            let c = v[(i + 1) % n];
            geom::cross(geom::sub(b, a), geom::sub(c, b)) >= -1e-9
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(x0: f64, y0: f64) -> StripDomain {
        StripDomain { x0, y0 }
    }

    #[test]
    fn vertex_formulas() {
        assert_eq!(d(0.3, 2.0).vertex(Family::A0, 3), [6.0, 0.0]);
        assert_eq!(d(0.5, 1.5).vertex(Family::B1, 0), [0.5, 1.5]);
        assert_eq!(d(0.5, 1.5).vertex(Family::B0, 1), [1.5, 1.5]);
    }

    #[test]
    fn symmetry_and_translation_on_vertices() {
        let dom = d(0.37, 2.2);
        for n in -5..5 {
            let s0 = dom.s(dom.vertex(Family::A0, n));
            let s1 = dom.s(dom.vertex(Family::A1, n));
            assert!(geom::dist(s0, dom.vertex(Family::B0, 1 - n)) < 1e-14);
            assert!(geom::dist(s1, dom.vertex(Family::B1, -n)) < 1e-14);
            for f in [Family::A0, Family::A1, Family::B0, Family::B1] {
                assert!(geom::dist(dom.t(dom.vertex(f, n)), dom.vertex(f, n - 1)) < 1e-14);
            }
        }
    }

    #[test]
    fn boundary_value_examples() {
        let dom = d(0.5, 1.5);
        assert!((dom.boundary_value([0.7, 0.0]).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(dom.boundary_value([1.0, 0.0]).unwrap(), 1.0);
        assert!((dom.boundary_value([0.7, 1.5]).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(dom.boundary_value([0.7, 0.3]), Err(Error::Domain(_))));
    }

    #[test]
    fn serration_vertex_listing() {
        let dom = d(0.5, 1.5);
        let bottom: Vec<_> = dom.serration_vertices(Side::Bottom, 0.0, 2.0).into_iter().map(|v| v.2).collect();
        assert_eq!(bottom, vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]);
        let top = dom.serration_vertices(Side::Top, 0.0, 2.0);
        let xs: Vec<f64> = top.iter().map(|v| v.2[0]).collect();
        assert_eq!(xs, vec![0.5, 1.5]);
        for (fam, n, p) in top {
            assert_eq!(dom.vertex(fam, n), p);
            let want = if matches!(fam, Family::B0) { 0.0 } else { 1.0 };
            assert_eq!(dom.boundary_value(p).unwrap(), want);
        }
    }

    #[test]
    fn join_right_isosceles() {
        let p = join_path(1.0, 2.0).unwrap();
        assert_eq!(p.vertices, vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [1.0, 2.0]]);
        assert_eq!(p.edge_count, 3);
        p.check_invariants(1.0, 2.0).unwrap();
    }

    #[test]
    fn join_left_isosceles() {
        let p = join_path(-1.0, 2.5).unwrap();
        assert_eq!(p.record.case, JoinCase::LeftIsosceles);
        p.check_invariants(-1.0, 2.5).unwrap();
    }

    #[test]
    fn join_fan_matches_bisection_oracle() {
        let p = join_path(0.0, 2.0).unwrap();
        assert_eq!(p.record.case, JoinCase::Fan);
        let n = p.record.run as f64;
        assert_eq!(p.edge_count, 2 * p.record.run as usize + 1);
        // independent check of the defining equation (x + n(1 - cos))^2 + (y - n sin)^2 = 1
        let th = p.record.theta;
        let f = (n * (1.0 - th.cos())).powi(2) + (2.0 - n * th.sin()).powi(2) - 1.0;
        assert!(f.abs() < 1e-9, "{f}");
        // and the quadratic in t = 1/n
        let t = 1.0 / n;
        let q = 3.0 * t * t + 2.0 * (-2.0 * th.sin()) * t + 2.0 * (1.0 - th.cos());
        assert!(q.abs() < 1e-9);
        p.check_invariants(0.0, 2.0).unwrap();
    }

    #[test]
    fn join_rejects_inadmissible() {
        assert!(matches!(join_path(0.5, 0.5), Err(Error::Admissibility(_))));
        assert!(matches!(join_path(1.0, 0.0), Err(Error::Admissibility(_))));
    }

    #[test]
    fn exhaustion_for_symmetric_cap() {
        let dom = d(1.0, 2.0);
        let poly = exhaustion_domain(&dom, 1).unwrap();
        assert_eq!(poly.cap.edge_count, 3);
        assert_eq!(poly.vertices.len() % 2, 0);
        for l in poly.edge_lengths() {
            assert!((l - 1.0).abs() < 1e-9);
        }
        assert!(poly.symmetry_defect(&dom) < 1e-12);
        assert!(poly.is_convex());
        for p in [
            dom.vertex(Family::A0, 1),
            dom.vertex(Family::B1, 1),
            dom.vertex(Family::B0, 0),
            dom.vertex(Family::A1, -1),
        ] {
            assert!(poly.contains(p));
        }
    }

    #[test]
    fn params_admissibility() {
        assert!(LayerParams::new(0.0, 1.0).is_err());
        assert!(LayerParams::new(0.5, 1.5).is_ok());
        assert!(HandleParams::new(0.0, 1.5).is_err());
        assert!(HandleParams::new(1.0, 2.0).is_ok());
        assert!(HandleParams::new(1.5, 2.0).is_err());
    }
}
