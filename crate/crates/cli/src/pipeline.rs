//! Mode pipelines. Each returns a report body; only `write_artifacts` and the
//! sweep touch the file system, and each run writes inside its own directory.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use layer_handle::analysis::{
    asymptotics_report, classify_handle, embedding_report, gamma_report, krust_check, layer_periods,
    periodic_height_defect, reflect_extend, symmetry_residual, vertical_shift_defect, Symmetry,
};
use layer_handle::conjugate::{
    build_surface, conjugate_coordinate_forms, enclosing_loop, half_period_defect, integrate_with_cut, loop_period,
    phi_form, vertical_period_k, Cut, SurfaceMesh,
};
use layer_handle::domain::{join_path, Family, HandleParams, LayerParams, Side};
use layer_handle::export::{write_obj, write_ply};
use layer_handle::mesh::{mesh_handle_strip, mesh_layer_cell, refine, MeshParams, TriMesh};
use layer_handle::solver::{solve_handle_on, solve_layer_on, FieldSnapshot, ScalarField, SolverOptions};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{Mode, Params, RunConfig, SweepMode};
use crate::report::{Body, Check, Report, Status};
use crate::CliError;

/// Third pseudo-period component of a layer.
pub const PERIOD_THIRD_TOL: f64 = 1e-10;
/// Puncture-loop period bound is this constant times `h + rho_core`.
pub const PERIOD_CONSTANT: f64 = 1.0;
/// s-symmetry residual bound in units of the solver tolerance.
pub const SYMMETRY_FACTOR: f64 = 10.0;
pub const HALF_PERIOD_TOL: f64 = 1e-6;
pub const RING_K_TOL: f64 = 1e-6;
pub const TURNING_REL_TOL: f64 = 0.05;
/// Frozen regression bound on the far-field Lipschitz ratio of `C_-`.
pub const LIPSCHITZ_FROZEN: f64 = 1.1;
pub const SHIFT_TOL: f64 = 1e-12;
pub const MIRROR_DEFECT_TOL: f64 = 1e-9;
/// Truncation half-width from which the asymptotic windows are held to the decay rule.
pub const ASYMPTOTICS_MIN_HALF_WIDTH: u32 = 12;
/// Off-center loop around the puncture: offset from `c` and radius.
const LOOP_OFFSET: [f64; 2] = [0.3, 0.2];
const LOOP_RADIUS: f64 = 0.6;

/// In-memory outcome of a solve pipeline, kept for artifact writing.
pub struct Solved {
    pub body: Body,
    pub field: ScalarField,
    pub layer: Option<ScalarField>,
    pub surface: SurfaceMesh,
}

fn refined(mut mesh: TriMesh, levels: u32) -> Arc<TriMesh> {
    for _ in 0..levels {
        mesh = refine(&mesh);
    }
    Arc::new(mesh)
}

/// Every serration vertex inside the mesh's x-range is a node carrying exactly 0 or 1.
fn serration_exact(field: &ScalarField) -> (usize, bool) {
    let mesh = field.mesh();
    let Some(strip) = mesh.strip else { return (0, false) };
    let (lo, hi) = mesh.nodes.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[0]), hi.max(p[0])));
    let mut count = 0;
    let mut exact = true;
    for side in [Side::Bottom, Side::Top] {
        for (family, _, p) in strip.serration_vertices(side, lo, hi) {
            let expected = if matches!(family, Family::A0 | Family::B0) { 0.0 } else { 1.0 };
            count += 1;
            exact &= mesh.find_node(p, 0.0).is_some_and(|i| field.values[i] == expected);
        }
    }
    (count, exact)
}

fn common_checks(body: &mut Body, field: &ScalarField, prefix: &str) {
    let bounded = field.values.iter().all(|v| (0.0..=1.0).contains(v));
    body.check(Check::holds(&format!("{prefix}bounds"), bounded));
    body.check(Check::new(
        &format!("{prefix}feasibility"),
        field.stats.feasibility_margin > 0.0,
        field.stats.feasibility_margin,
        "> 0",
    ));
    let (count, exact) = serration_exact(field);
    body.check(Check::new(&format!("{prefix}serration-exact"), exact && count > 0, count, "all exact"));
}

fn mesh_summary(mesh: &TriMesh) -> Value {
    json!({ "nodes": mesh.nodes.len(), "triangles": mesh.triangles.len(), "h": mesh.h, "min_angle_deg": mesh.min_angle_deg() })
}

pub fn run_layer(cfg: &RunConfig) -> Result<Solved, CliError> {
    let params = LayerParams::new(cfg.params.x0, cfg.params.y0)?;
    let mp: MeshParams = cfg.mesh.into();
    let opts: SolverOptions = cfg.solver.into();
    let mesh = refined(mesh_layer_cell(&params, &mp)?, cfg.refine);
    let field = solve_layer_on(mesh, &opts)?;
    let surface = build_surface(&field, 0)?;
    let mut body = Body::default();
    common_checks(&mut body, &field, "");

    let periods = layer_periods(&field)?;
    let [p1, p2, p3] = periods.pseudo_period.components;
    body.check(Check::at_most("pseudo-period-third", p3.abs(), PERIOD_THIRD_TOL));
    body.check(Check::new("pseudo-period-horizontal", p1.hypot(p2) > 0.0, p1.hypot(p2), "> 0"));
    let krust = krust_check(&surface, cfg.samples, cfg.seed);
    body.check(Check::new("krust-injective", krust.injective(), [krust.min_cover, krust.max_cover], [1, 1]));
    let height = periodic_height_defect(&surface)?;
    body.check(Check::at_most("periodic-height", height, SHIFT_TOL));
    let extended = reflect_extend(&surface, 2)?;
    let shift = vertical_shift_defect(&extended, 2.0);
    body.check(Check::at_most("reflection-shift", shift, SHIFT_TOL));

    body.result("mesh", mesh_summary(field.mesh()));
    body.result("solve", &field.stats);
    body.result("pseudo_period", p1.hypot(p2));
    body.result("pseudo_period_vector", periods.pseudo_period.components);
    body.result("layer_k", periods.layer_k);
    body.result("rho", periods.rho);
    body.result("rho_core", periods.rho_core);
    body.result("krust", &krust);
    body.hashes.insert("mesh".into(), field.mesh().hash());
    body.hashes.insert("field".into(), field.hash());
    Ok(Solved { body, field, layer: None, surface: extended })
}

pub fn run_handle(cfg: &RunConfig) -> Result<Solved, CliError> {
    let params = HandleParams::new(cfg.params.x0, cfg.params.y0)?;
    let mp: MeshParams = cfg.mesh.into();
    let opts: SolverOptions = cfg.solver.into();
    let layer = solve_layer_on(refined(mesh_layer_cell(&params.layer(), &mp)?, cfg.refine), &opts)?;
    let field = solve_handle_on(refined(mesh_handle_strip(&params, &mp)?, cfg.refine), &layer, &opts)?;
    let surface = build_surface(&field, 0)?;
    let mesh = field.mesh();
    let mut body = Body::default();
    common_checks(&mut body, &layer, "layer-");
    common_checks(&mut body, &field, "");

    let s_residual = symmetry_residual(&field, Symmetry::S)?;
    body.check(Check::at_most("s-symmetry", s_residual, SYMMETRY_FACTOR * opts.tolerance));

    let forms = conjugate_coordinate_forms(&field)?;
    let c = [(params.x0 + 1.0) / 2.0, params.y0 / 2.0];
    let cycle = enclosing_loop(mesh, [c[0] + LOOP_OFFSET[0], c[1] + LOOP_OFFSET[1]], LOOP_RADIUS)?;
    let period = loop_period(&forms, &cycle)?.components;
    let period_max = period.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let rho_core = forms[0].rho_core.max(forms[1].rho_core);
    body.check(Check::at_most("puncture-period", period_max, PERIOD_CONSTANT * (mesh.h + rho_core)));

    let phi = phi_form(&field)?;
    let cut = Cut::vertical(mesh, phi.topology())?;
    let u = integrate_with_cut(&phi, mesh, 0, &cut)?;
    body.check(Check::at_most("half-period", half_period_defect(&u, mesh)?, HALF_PERIOD_TOL));
    match vertical_period_k(&field) {
        Ok(k) => {
            body.check(Check::at_most("ring-k-stable", (k.k - k.k_outer).abs(), RING_K_TOL));
            body.result("k", k.k);
        }
        Err(e) => body.check(Check::new("ring-k-stable", false, e.to_string(), format!("<= {RING_K_TOL:e}"))),
    }

    let g = gamma_report(&surface)?;
    let turning_ok = (g.total_absolute_turning - TAU).abs() <= TURNING_REL_TOL * TAU;
    body.check(Check::new("gamma-closed", g.closure_gap == 0.0, g.closure_gap, 0.0));
    body.check(Check::holds("gamma-simple", g.simple));
    body.check(Check::new("gamma-height", g.max_height_defect == 0.0, g.max_height_defect, 0.0));
    body.check(Check::new("gamma-turning", turning_ok, g.total_absolute_turning, format!("2pi within {TURNING_REL_TOL}")));
    body.check(Check::holds("gamma-single-sign", g.single_sign));

    let e = embedding_report(&surface, cfg.samples, cfg.seed)?;
    body.check(Check::new("intersections", e.intersections.total() == 0, &e.intersections, 0));
    body.check(Check::new("sides-separated", e.sides.separated(), &e.sides, "misplaced = 0"));
    let covers = [e.lower_coverage.min_cover, e.lower_coverage.max_cover, e.upper_coverage.min_cover, e.upper_coverage.max_cover];
    body.check(Check::new("projection-injective", e.lower_coverage.injective() && e.upper_coverage.injective(), covers, [1, 1, 1, 1]));
    body.check(Check::at_most("lipschitz-far", e.lipschitz_far, LIPSCHITZ_FROZEN));

    let label = classify_handle(&surface, &params)?;
    let mirror_ok = label.symmetry_defect.is_some_and(|d| d <= MIRROR_DEFECT_TOL);
    body.check(Check::new("trace-components", label.components.len() == 2, label.components.len(), 2));
    body.check(Check::new("trace-symmetric", mirror_ok, label.symmetry_defect, format!("<= {MIRROR_DEFECT_TOL:e}")));

    let extended = reflect_extend(&surface, 2)?;
    body.check(Check::at_most("reflection-shift", vertical_shift_defect(&extended, 2.0), SHIFT_TOL));

    // windows [start - 2n, start - 2n + 2] end at least one unit left of the puncture, at most five
    let half = f64::from(cfg.mesh.half_width);
    let start = 2.0 * ((c[0] - 3.0) / 2.0).floor();
    let n_max = (((start - c[0] + half) / 2.0).floor().max(0.0) as usize).min(4);
    let asym = asymptotics_report(&field, &layer, start, n_max)?;
    if cfg.mesh.half_width >= ASYMPTOTICS_MIN_HALF_WIDTH {
        let r = &asym.residuals;
        let decreasing = r[..3.min(r.len())].windows(2).all(|w| w[1] < w[0]);
        body.check(Check::new("asymptotic-decay", decreasing && r[n_max] <= r[0] / 2.0, r, "decreasing, r(N) <= r(0)/2"));
    }

    body.result("mesh", mesh_summary(mesh));
    body.result("layer_mesh", mesh_summary(layer.mesh()));
    body.result("solve", &field.stats);
    body.result("layer_solve", &layer.stats);
    body.result("puncture_period", period);
    body.result("rho_core", rho_core);
    body.result("label", label.label);
    body.result("trace_note", &label.note);
    body.result("gamma_turning", g.total_turning);
    body.result("lipschitz_far", e.lipschitz_far);
    body.result("asymptotics", &asym.residuals);
    body.hashes.insert("mesh".into(), mesh.hash());
    body.hashes.insert("field".into(), field.hash());
    body.hashes.insert("layer_mesh".into(), layer.mesh().hash());
    body.hashes.insert("layer_field".into(), layer.hash());
    Ok(Solved { body, field, layer: Some(layer), surface: extended })
}

pub fn run_join_path(params: Params) -> Result<Body, CliError> {
    let path = join_path(params.x0, params.y0)?;
    let mut body = Body::default();
    let invariants = path.check_invariants(params.x0, params.y0);
    body.check(Check::new("join-invariants", invariants.is_ok(), invariants.err().map(|e| e.to_string()), Value::Null));
    body.result("edge_count", path.edge_count);
    body.result("path", &path);
    Ok(body)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(BufWriter<fs::File>) -> layer_handle::error::Result<()>) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f(BufWriter::new(file)).map_err(CliError::Core)
}

/// Mesh, field snapshots and surface exports next to the report.
pub fn write_artifacts(dir: &Path, cfg: &RunConfig, solved: &mut Solved) -> Result<(), CliError> {
    let mut written = Vec::new();
    write_json(&dir.join("mesh.json"), solved.field.mesh())?;
    written.push("mesh.json".to_string());
    write_json(&dir.join("field.json"), &solved.field.snapshot())?;
    written.push("field.json".to_string());
    if let Some(layer) = &solved.layer {
        write_json(&dir.join("layer_field.json"), &layer.snapshot())?;
        written.push("layer_field.json".to_string());
    }
    if cfg.output.obj {
        write_with(&dir.join("surface.obj"), |w| write_obj(&solved.surface, w))?;
        written.push("surface.obj".to_string());
    }
    if cfg.output.ply {
        write_with(&dir.join("surface.ply"), |w| write_ply(&solved.surface, w))?;
        written.push("surface.ply".to_string());
    }
    solved.body.artifacts = written;
    Ok(())
}

/// Hash of a stored snapshot, computed the way `ScalarField::hash` does.
fn snapshot_hash(snapshot: &FieldSnapshot) -> String {
    let mut hasher = Sha256::new();
    hasher.update(snapshot.mesh_hash.as_bytes());
    for v in &snapshot.values {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Re-runs a stored run from its embedded config and checks that the stored
/// snapshots, the regenerated meshes and fields, and the check verdicts agree.
pub fn run_verify(cfg: &RunConfig) -> Result<Body, CliError> {
    let dir = &cfg.verify.as_ref().expect("validated").run;
    let stored: Report = read_json(&dir.join("report.json"))?;
    let mut body = Body::default();
    body.result("verified_run", dir.display().to_string());
    body.result("verified_config_hash", &stored.config_hash);
    body.check(Check::new("stored-config-hash", stored.config.hash() == stored.config_hash, &stored.config_hash, "hash of embedded config"));
    body.check(Check::new("stored-status", stored.status == Status::Pass, stored.status, Status::Pass));

    let fresh = match stored.config.mode {
        Mode::Layer => run_layer(&stored.config)?.body,
        Mode::Handle => run_handle(&stored.config)?.body,
        Mode::JoinPath => run_join_path(stored.config.params)?,
        other => return Err(CliError::Config(format!("cannot verify a {} run", other.name()))),
    };
    if matches!(stored.config.mode, Mode::Layer | Mode::Handle) {
        let mut snapshots = vec![("field", read_json::<FieldSnapshot>(&dir.join("field.json"))?)];
        if stored.config.mode == Mode::Handle {
            snapshots.push(("layer_field", read_json(&dir.join("layer_field.json"))?));
        }
        for (key, snapshot) in snapshots {
            let mesh_key = if key == "field" { "mesh" } else { "layer_mesh" };
            let ok = Some(&snapshot_hash(&snapshot)) == stored.hashes.get(key)
                && Some(&snapshot.mesh_hash) == stored.hashes.get(mesh_key);
            body.check(Check::new(&format!("snapshot-{key}"), ok, snapshot_hash(&snapshot), stored.hashes.get(key)));
        }
    }
    for (key, hash) in &stored.hashes {
        let again = fresh.hashes.get(key);
        body.check(Check::new(&format!("reproduced-{key}"), again == Some(hash), again, hash));
    }
    let verdicts = |checks: &[Check]| checks.iter().map(|c| (c.name.clone(), c.pass)).collect::<Vec<_>>();
    body.check(Check::holds("same-verdicts", verdicts(&fresh.checks) == verdicts(&stored.checks)));
    body.check(Check::new("same-results", fresh.results == stored.results, Value::Null, Value::Null));
    for c in fresh.checks {
        body.check(Check { name: format!("rerun-{}", c.name), ..c });
    }
    Ok(body)
}

/// Scalar used by the sweep's continuity probe.
fn probe_value(results: &BTreeMap<String, Value>, mode: SweepMode) -> Option<f64> {
    let key = match mode {
        SweepMode::Layer => "pseudo_period",
        SweepMode::Handle => "k",
    };
    results.get(key).and_then(Value::as_f64)
}

/// Grid over `(x0, y0)`; each point writes a full run under `points/`.
pub fn run_sweep(cfg: &RunConfig, dir: &Path) -> Result<Body, CliError> {
    let sweep = cfg.sweep.as_ref().expect("validated");
    let grid: Vec<(usize, usize, Params)> = sweep
        .x0
        .iter()
        .enumerate()
        .flat_map(|(i, &x0)| sweep.y0.iter().enumerate().map(move |(j, &y0)| (i, j, Params { x0, y0 })))
        .collect();
    let points_dir = dir.join("points");
    fs::create_dir_all(&points_dir).map_err(|e| CliError::io(&points_dir, e))?;
    let reports: Vec<Result<Report, CliError>> = grid
        .par_iter()
        .map(|&(i, j, params)| {
            let mut point = cfg.clone();
            point.mode = match sweep.mode {
                SweepMode::Layer => Mode::Layer,
                SweepMode::Handle => Mode::Handle,
            };
            point.params = params;
            point.sweep = None;
            point.output.dir = points_dir.clone();
            let point_dir = points_dir.join(format!("{i:03}-{j:03}"));
            execute_in(&point, &point_dir)
        })
        .collect();

    let mut body = Body::default();
    let mut summary = Vec::with_capacity(grid.len());
    let mut values = BTreeMap::new();
    let mut failed = 0;
    for (&(i, j, params), report) in grid.iter().zip(reports) {
        let report = report?;
        failed += usize::from(report.status != Status::Pass);
        let probe = probe_value(&report.results, sweep.mode);
        if let Some(v) = probe {
            values.insert((i, j), v);
        }
        summary.push(json!({
            "x0": params.x0,
            "y0": params.y0,
            "dir": format!("points/{i:03}-{j:03}"),
            "status": report.status,
            "error": report.error,
            "failed_checks": report.checks.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect::<Vec<_>>(),
            "probe": probe,
            "label": report.results.get("label"),
            "field_hash": report.hashes.get("field"),
        }));
    }
    // largest change of the probe between grid neighbours
    let mut jump = 0.0f64;
    for (&(i, j), &v) in &values {
        for next in [(i + 1, j), (i, j + 1)] {
            if let Some(&w) = values.get(&next) {
                jump = jump.max((w - v).abs());
            }
        }
    }
    body.check(Check::new("points-pass", failed == 0, failed, 0));
    body.result("points", summary);
    body.result("probe", if sweep.mode == SweepMode::Layer { "pseudo_period" } else { "k" });
    body.result("max_neighbour_jump", jump);
    Ok(body)
}

/// Runs a non-sweep, non-verify config and writes its directory.
fn execute_in(cfg: &RunConfig, dir: &Path) -> Result<Report, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let outcome = match cfg.mode {
        Mode::Layer | Mode::Handle => {
            let solved = if cfg.mode == Mode::Layer { run_layer(cfg) } else { run_handle(cfg) };
            solved.and_then(|mut s| write_artifacts(dir, cfg, &mut s).map(|_| s.body))
        }
        Mode::JoinPath => run_join_path(cfg.params),
        Mode::Verify => run_verify(cfg),
        Mode::Sweep => run_sweep(cfg, dir),
    };
    let outcome = match outcome {
        Ok(body) => Ok(body),
        Err(e @ CliError::Io(..)) => return Err(e),
        Err(e) => Err(e.to_string()),
    };
    let report = Report::new(cfg, outcome);
    let path = dir.join("report.json");
    fs::write(&path, report.to_json()).map_err(|e| CliError::io(&path, e))?;
    Ok(report)
}

/// Runs `cfg` in its hash-named directory and returns the written report.
pub fn execute(cfg: &RunConfig) -> Result<(std::path::PathBuf, Report), CliError> {
    let dir = cfg.run_dir();
    let report = execute_in(cfg, &dir)?;
    Ok((dir, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn join_path_body_reports_the_edge_count() {
        let body = run_join_path(Params { x0: 1.0, y0: 2.0 }).unwrap();
        assert_eq!(body.results["edge_count"], json!(3));
        assert!(body.checks.iter().all(|c| c.pass));
    }

    #[test]
    fn inadmissible_parameters_are_errors() {
        assert!(run_join_path(Params { x0: 0.0, y0: 0.5 }).is_err());
        let mut cfg = RunConfig::with_mode(Mode::Handle);
        cfg.params = Params { x0: 0.0, y0: 1.0 };
        assert!(matches!(run_handle(&cfg), Err(CliError::Core(_))));
    }

    #[test]
    fn snapshot_hash_matches_the_field_hash() {
        let mut cfg = RunConfig::with_mode(Mode::Layer);
        cfg.params = Params { x0: 0.5, y0: 1.5 };
        let solved = run_layer(&cfg).unwrap();
        assert_eq!(snapshot_hash(&solved.field.snapshot()), solved.field.hash());
    }
}
