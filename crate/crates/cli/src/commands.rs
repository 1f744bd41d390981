//! Subcommand implementations: each runs the relevant engine operations over
//! every matching manifest entity and appends check lines to the report.

use std::path::Path;

use serde_json::json;

use leafsolve_core::cah::affine_symmetry_check;
use leafsolve_core::distribution::{
    iterated_bracket_obstructions, solve_tde, LeafGrid, DEFECT_TOL,
};
use leafsolve_core::geometry::mat_inf_norm;
use leafsolve_core::metric::{
    check_antisymmetry_hypothesis, recover_metric, verify_levi_civita, HypothesisPolicy,
    MetricGrid, RadialSample,
};
use leafsolve_core::spray::{exp_map, log_map, solve_spray};
use leafsolve_core::Error as EngineError;

use crate::manifest::Manifest;
use crate::report::{Check, Report};

type CliResult<T> = Result<T, String>;

fn engine_failure(report: &mut Report, name: &str, target: &str, err: &EngineError) {
    let mut check = Check::new(name, target, f64::MAX, 0.0);
    check.pass = false;
    check.data = Some(json!({ "error": err.to_string() }));
    report.push(check);
}

pub fn run_command(
    command: &str,
    manifest: &Manifest,
    report: &mut Report,
    out: Option<&Path>,
) -> CliResult<()> {
    match command {
        "levi" => levi(manifest, report),
        "integrability" => integrability(manifest, report),
        "solve-tde" => cmd_solve_tde(manifest, report, out),
        "curvature" => curvature(manifest, report),
        "transport" => transport(manifest, report),
        "geodesic" => geodesic(manifest, report, out),
        "exp" => cmd_exp(manifest, report),
        "log" => cmd_log(manifest, report),
        "recover-metric" => cmd_recover_metric(manifest, report, out),
        "verify-metric" => cmd_verify_metric(manifest, report),
        "cah-map" => cmd_cah_map(manifest, report, out),
        "cah-check" => cmd_cah_check(manifest, report),
        "affine-symmetry" => cmd_affine_symmetry(manifest, report),
        "selftest" => selftest(manifest, report, out),
        other => return Err(format!("unknown command `{other}`")),
    }
    Ok(())
}

fn levi(manifest: &Manifest, report: &mut Report) {
    for (name, (spec, dist)) in &manifest.distributions {
        let points: Vec<Vec<f64>> = if spec.eval_points.is_empty() {
            spec.base_point.iter().cloned().collect()
        } else {
            spec.eval_points.clone()
        };
        let k = dist.base_dim();
        let (x_vec, y_vec) = match &spec.vectors {
            Some([x, y]) => (x.clone(), y.clone()),
            None => {
                let mut e1 = vec![0.0; k];
                let mut e2 = vec![0.0; k];
                e1[0] = 1.0;
                e2[k.min(2) - 1] = 1.0;
                (e1, e2)
            }
        };
        for (idx, p) in points.iter().enumerate() {
            let target = format!("{name}[{idx}]");
            match (
                dist.levi_form(p, &x_vec, &y_vec),
                dist.levi_form(p, &y_vec, &x_vec),
            ) {
                (Ok(levi), Ok(swapped)) => {
                    let antisym = levi
                        .iter()
                        .zip(&swapped)
                        .map(|(a, b)| (a + b).abs())
                        .fold(0.0f64, f64::max);
                    report.push(
                        Check::new("levi_antisymmetry", &target, antisym, 1e-10)
                            .with_data(json!({ "levi": levi, "point": p })),
                    );
                }
                (Err(e), _) | (_, Err(e)) => engine_failure(report, "levi_form", &target, &e),
            }
        }
    }
}

fn integrability(manifest: &Manifest, report: &mut Report) {
    for (name, (spec, dist)) in &manifest.distributions {
        let Some(e0) = &spec.base_point else { continue };
        match iterated_bracket_obstructions(
            dist,
            e0,
            manifest.settings.order.max(1),
            manifest.settings.budget,
        ) {
            Ok(obstructions) => {
                for order in 1..=manifest.settings.order.max(1) {
                    let level: Vec<_> = obstructions.iter().filter(|o| o.order == order).collect();
                    let worst = level.iter().map(|o| o.magnitude).fold(0.0f64, f64::max);
                    let witness = level
                        .iter()
                        .max_by(|a, b| a.magnitude.partial_cmp(&b.magnitude).unwrap())
                        .map(|o| o.indices.clone());
                    report.push(
                        Check::new(
                            &format!("bracket_defect_order_{order}"),
                            name,
                            worst,
                            DEFECT_TOL,
                        )
                        .with_data(json!({ "worst_indices": witness })),
                    );
                }
            }
            Err(e) => engine_failure(report, "integrability", name, &e),
        }
    }
}

fn write_leaf_csv(path: &Path, leaf: &LeafGrid, k: usize, m: usize) -> CliResult<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| e.to_string())?;
    let mut header: Vec<String> = (1..=k).map(|i| format!("x{i}")).collect();
    header.extend((1..=m).map(|a| format!("f{a}")));
    header.push("levi_residual".into());
    header.push("leaf_residual".into());
    header.push("boundary".into());
    writer.write_record(&header).map_err(|e| e.to_string())?;
    for (flat, x) in leaf.grid.iter_points() {
        let mut row: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
        row.extend(leaf.values[flat].iter().map(|v| format!("{v}")));
        row.push(format!("{}", leaf.levi_residual[flat]));
        row.push(format!("{}", leaf.leaf_residual[flat]));
        row.push(format!("{}", leaf.boundary_flag[flat]));
        writer.write_record(&row).map_err(|e| e.to_string())?;
    }
    writer.flush().map_err(|e| e.to_string())
}

fn cmd_solve_tde(manifest: &Manifest, report: &mut Report, out: Option<&Path>) {
    let tol = manifest.settings.tol;
    for (name, (spec, dist)) in &manifest.distributions {
        let Some(base) = &spec.base_point else {
            continue;
        };
        let k = dist.base_dim();
        let (x0, y0) = base.split_at(k);
        let grid = match manifest.grid_for(x0, &spec.grid) {
            Ok(g) => g,
            Err(e) => {
                engine_failure(report, "solve_tde_grid", name, &e);
                continue;
            }
        };
        match solve_tde(dist, x0, y0, &grid, manifest.settings.step) {
            Ok(leaf) => {
                report.push(Check::new(
                    "leaf_residual",
                    name,
                    leaf.max_interior_leaf_residual(),
                    tol,
                ));
                report.push(Check::new(
                    "levi_residual_along_rays",
                    name,
                    leaf.max_levi_residual(),
                    tol,
                ));
                if let Some(dir) = out {
                    let path = dir.join(format!("solve_tde_{name}.csv"));
                    if let Err(e) = write_leaf_csv(&path, &leaf, k, dist.fiber_dim()) {
                        let mut check = Check::new("write_leaf_csv", name, f64::MAX, 0.0);
                        check.pass = false;
                        check.data = Some(json!({ "error": e }));
                        report.push(check);
                    }
                }
            }
            Err(e) => engine_failure(report, "solve_tde", name, &e),
        }
    }
}

fn curvature(manifest: &Manifest, report: &mut Report) {
    for (name, (spec, conn)) in &manifest.connections {
        let point: Vec<f64> = spec.base_point.clone().unwrap_or_else(|| {
            conn.domain()
                .intervals()
                .iter()
                .map(|(lo, hi)| 0.5 * (lo + hi))
                .collect()
        });
        let tensor = conn.curvature();
        match tensor.eval_at(&point) {
            Ok(value) => {
                let n = conn.base_dim();
                let mut antisym = 0.0f64;
                let mut components = Vec::new();
                for i in 0..n {
                    for j in 0..n {
                        let a = value.operator(&[i, j]);
                        let b = value.operator(&[j, i]);
                        antisym = antisym.max(mat_inf_norm(&(a.clone() + b)));
                        if i < j {
                            components.push(json!({
                                "i": i, "j": j,
                                "matrix": (0..a.nrows()).map(|r| (0..a.ncols()).map(|c| a[(r, c)]).collect::<Vec<_>>()).collect::<Vec<_>>(),
                            }));
                        }
                    }
                }
                report.push(
                    Check::new("curvature_antisymmetry", name, antisym, 1e-10).with_data(json!({
                        "point": point,
                        "operators": components,
                    })),
                );
            }
            Err(e) => engine_failure(report, "curvature", name, &e),
        }
    }
}

fn transport(manifest: &Manifest, report: &mut Report) {
    for (name, (spec, curve)) in &manifest.transports {
        let (_, conn) = &manifest.connections[&spec.connection];
        let (t0, t1) = (spec.t_span[0], spec.t_span[1]);
        let forward = conn.parallel_transport(
            |t| curve.sample(t),
            &spec.section,
            (t0, t1),
            manifest.settings.step,
        );
        match forward {
            Ok(sol) => {
                let end = sol.end_state().to_vec();
                // transport back along the reversed parameterization
                let back = conn.parallel_transport(
                    |t| {
                        let (p, v) = curve.sample(t0 + t1 - t)?;
                        Ok((p, v.iter().map(|c| -c).collect()))
                    },
                    &end,
                    (t0, t1),
                    manifest.settings.step,
                );
                match back {
                    Ok(back_sol) => {
                        let round: f64 = back_sol
                            .end_state()
                            .iter()
                            .zip(&spec.section)
                            .map(|(a, b)| (a - b).abs())
                            .fold(0.0, f64::max);
                        report.push(
                            Check::new("transport_round_trip", name, round, 1e-8)
                                .with_data(json!({ "endpoint": end })),
                        );
                    }
                    Err(e) => engine_failure(report, "transport_back", name, &e),
                }
            }
            Err(e) => engine_failure(report, "transport", name, &e),
        }
    }
}

fn geodesic(manifest: &Manifest, report: &mut Report, out: Option<&Path>) {
    for (name, (spec, spray)) in &manifest.sprays {
        let (Some(point), Some(velocity)) = (&spec.point, &spec.velocity) else {
            continue;
        };
        match solve_spray(
            spray,
            point,
            velocity,
            (spec.t_span[0], spec.t_span[1]),
            manifest.settings.step,
        ) {
            Ok(run) => {
                let exit = if run.exit_time.is_some() { 1.0 } else { 0.0 };
                report.push(
                    Check::new("geodesic_stayed_in_chart", name, exit, 0.5).with_data(json!({
                        "endpoint": run.solution.end_state(),
                        "exit_time": run.exit_time,
                    })),
                );
                if let Some(dir) = out {
                    let path = dir.join(format!("geodesic_{name}.csv"));
                    let write = || -> CliResult<()> {
                        let mut writer =
                            csv::Writer::from_path(&path).map_err(|e| e.to_string())?;
                        let n = spray.base_dim();
                        let mut header = vec!["t".to_string()];
                        header.extend((1..=n).map(|i| format!("x{i}")));
                        header.extend((1..=n).map(|i| format!("v{i}")));
                        writer.write_record(&header).map_err(|e| e.to_string())?;
                        for (i, t) in run.solution.breakpoints().iter().enumerate() {
                            let mut row = vec![format!("{t}")];
                            row.extend(run.solution.states()[i].iter().map(|v| format!("{v}")));
                            writer.write_record(&row).map_err(|e| e.to_string())?;
                        }
                        writer.flush().map_err(|e| e.to_string())
                    };
                    if let Err(e) = write() {
                        let mut check = Check::new("write_geodesic_csv", name, f64::MAX, 0.0);
                        check.pass = false;
                        check.data = Some(json!({ "error": e }));
                        report.push(check);
                    }
                }
            }
            Err(e) => engine_failure(report, "geodesic", name, &e),
        }
    }
}

fn cmd_exp(manifest: &Manifest, report: &mut Report) {
    for (name, (spec, spray)) in &manifest.sprays {
        let (Some(point), Some(velocity)) = (&spec.point, &spec.velocity) else {
            continue;
        };
        let step = manifest.settings.step;
        let full = exp_map(spray, point, velocity, step);
        let half_v: Vec<f64> = velocity.iter().map(|c| 0.5 * c).collect();
        let half = exp_map(spray, point, &half_v, step);
        let run = solve_spray(spray, point, velocity, (0.0, 1.0), step);
        match (full, half, run) {
            (Ok(end), Ok(half_pt), Ok(run)) => {
                // exp_x(s v) must equal the unit-speed solution at t = s
                let mid = run.solution.query(0.5).unwrap();
                let gap: f64 = half_pt
                    .iter()
                    .zip(&mid[..half_pt.len()])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                report.push(
                    Check::new("exp_matches_flow_rescaling", name, gap, 1e-8)
                        .with_data(json!({ "endpoint": end })),
                );
            }
            (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => {
                engine_failure(report, "exp", name, &e)
            }
        }
    }
}

fn cmd_log(manifest: &Manifest, report: &mut Report) {
    for (name, (spec, spray)) in &manifest.sprays {
        let (Some(point), Some(target)) = (&spec.point, &spec.target) else {
            continue;
        };
        let step = manifest.settings.step;
        match log_map(spray, point, target, step, 50) {
            Ok(v) => match exp_map(spray, point, &v, step) {
                Ok(back) => {
                    let residual: f64 = back
                        .iter()
                        .zip(target)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    report.push(
                        Check::new("log_round_trip", name, residual, 1e-9)
                            .with_data(json!({ "vector": v })),
                    );
                }
                Err(e) => engine_failure(report, "log_round_trip", name, &e),
            },
            Err(e) => engine_failure(report, "log", name, &e),
        }
    }
}

fn write_metric_csv(path: &Path, metric: &MetricGrid) -> CliResult<()> {
    let n = metric.base_point.len();
    let mut writer = csv::Writer::from_path(path).map_err(|e| e.to_string())?;
    let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    for a in 1..=n {
        for b in 1..=n {
            header.push(format!("g{a}{b}"));
        }
    }
    header.push("nabla_residual".into());
    header.push("signature".into());
    header.push("boundary".into());
    writer.write_record(&header).map_err(|e| e.to_string())?;
    for (flat, x) in metric.grid.iter_points() {
        let mut row: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
        for a in 0..n {
            for b in 0..n {
                row.push(format!("{}", metric.g[flat][(a, b)]));
            }
        }
        row.push(format!("{}", metric.nabla_residual[flat]));
        row.push(format!(
            "({},{})",
            metric.signature[flat].0, metric.signature[flat].1
        ));
        row.push(format!("{}", metric.boundary_flag[flat]));
        writer.write_record(&row).map_err(|e| e.to_string())?;
    }
    writer.flush().map_err(|e| e.to_string())
}

fn metric_pipeline(manifest: &Manifest, report: &mut Report, out: Option<&Path>, verify: bool) {
    let tol = manifest.settings.tol;
    for (name, (spec, seed)) in &manifest.metric_seeds {
        let (_, conn) = &manifest.connections[&spec.connection];
        let grid = match manifest.grid_for(&seed.base_point, &spec.grid) {
            Ok(g) => g,
            Err(e) => {
                engine_failure(report, "metric_grid", name, &e);
                continue;
            }
        };
        let radius = grid
            .spacing()
            .iter()
            .zip(grid.points_per_axis())
            .map(|(s, p)| s * (p / 2) as f64)
            .fold(0.0f64, f64::max);
        let sample = RadialSample::standard(conn.base_dim(), radius);
        let hypothesis =
            check_antisymmetry_hypothesis(conn, seed, &sample, manifest.settings.step, tol);
        match hypothesis {
            Ok(h) => {
                if !manifest.settings.override_hypothesis {
                    report.push(Check::new(
                        "antisymmetry_hypothesis",
                        name,
                        h.max_residual,
                        tol,
                    ));
                }
            }
            Err(e) => {
                engine_failure(report, "antisymmetry_hypothesis", name, &e);
                continue;
            }
        }
        match recover_metric(
            conn,
            seed,
            &grid,
            manifest.settings.step,
            HypothesisPolicy::Override,
        ) {
            Ok(metric) => {
                report.push(
                    Check::new(
                        "nabla_g_residual",
                        name,
                        metric.max_interior_residual(),
                        tol,
                    )
                    .with_data(json!({
                        "signature": metric.signature[grid.center_flat()],
                        "signature_constant": metric.signature.iter().all(|s| *s == metric.signature[0]),
                    })),
                );
                if verify {
                    match verify_levi_civita(conn, &metric, tol) {
                        Ok(lc) => {
                            report.push(Check::new(
                                "torsion_residual",
                                name,
                                lc.max_torsion_residual,
                                tol,
                            ));
                        }
                        Err(e) => engine_failure(report, "verify_levi_civita", name, &e),
                    }
                }
                if let Some(dir) = out {
                    let path = dir.join(format!("metric_{name}.csv"));
                    if let Err(e) = write_metric_csv(&path, &metric) {
                        let mut check = Check::new("write_metric_csv", name, f64::MAX, 0.0);
                        check.pass = false;
                        check.data = Some(json!({ "error": e }));
                        report.push(check);
                    }
                }
            }
            Err(e) => engine_failure(report, "recover_metric", name, &e),
        }
    }
}

fn cmd_recover_metric(manifest: &Manifest, report: &mut Report, out: Option<&Path>) {
    metric_pipeline(manifest, report, out, false);
}

fn cmd_verify_metric(manifest: &Manifest, report: &mut Report) {
    metric_pipeline(manifest, report, None, true);
}

fn cmd_cah_map(manifest: &Manifest, report: &mut Report, out: Option<&Path>) {
    let settings = &manifest.settings;
    for (name, (spec, problem)) in &manifest.cah {
        let grid = match manifest.grid_for(problem.x0(), &spec.grid) {
            Ok(g) => g,
            Err(e) => {
                engine_failure(report, "cah_grid", name, &e);
                continue;
            }
        };
        match problem.cah_map(&grid, settings.step) {
            Ok(map) => {
                let unreachable = (grid.len() - map.reachable()) as f64;
                report.push(Check::new("unreachable_nodes", name, unreachable, 0.0));
                let (t_rel, r_rel) = map.max_relatedness();
                report.push(Check::new(
                    "torsion_relatedness",
                    name,
                    t_rel,
                    settings.relate_tol,
                ));
                report.push(Check::new(
                    "curvature_relatedness",
                    name,
                    r_rel,
                    settings.relate_tol,
                ));
                match problem.affine_residual(&map, settings.tol) {
                    Ok(affine) => {
                        report.push(Check::new(
                            "nabla_df_residual",
                            name,
                            affine.max_interior_residual,
                            settings.tol,
                        ));
                    }
                    Err(e) => engine_failure(report, "affine_residual", name, &e),
                }
                if let Some(dir) = out {
                    let path = dir.join(format!("cah_map_{name}.csv"));
                    let write = || -> CliResult<()> {
                        let n = problem.source_dim();
                        let m = problem.target_dim();
                        let mut writer =
                            csv::Writer::from_path(&path).map_err(|e| e.to_string())?;
                        let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
                        header.extend((1..=m).map(|a| format!("f{a}")));
                        for a in 1..=m {
                            for b in 1..=n {
                                header.push(format!("sigma{a}{b}"));
                            }
                        }
                        header.push("relate_torsion".into());
                        header.push("relate_curvature".into());
                        header.push("reachable".into());
                        writer.write_record(&header).map_err(|e| e.to_string())?;
                        for (flat, x) in grid.iter_points() {
                            let mut row: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
                            match (&map.f[flat], &map.sigma[flat], &map.relatedness[flat]) {
                                (Some(f), Some(sigma), Some(rel)) => {
                                    row.extend(f.iter().map(|v| format!("{v}")));
                                    for a in 0..m {
                                        for b in 0..n {
                                            row.push(format!("{}", sigma[(a, b)]));
                                        }
                                    }
                                    row.push(format!("{}", rel.torsion));
                                    row.push(format!("{}", rel.curvature));
                                    row.push("true".into());
                                }
                                _ => {
                                    row.extend(std::iter::repeat_n(String::new(), m + m * n + 2));
                                    row.push("false".into());
                                }
                            }
                            writer.write_record(&row).map_err(|e| e.to_string())?;
                        }
                        writer.flush().map_err(|e| e.to_string())
                    };
                    if let Err(e) = write() {
                        let mut check = Check::new("write_cah_csv", name, f64::MAX, 0.0);
                        check.pass = false;
                        check.data = Some(json!({ "error": e }));
                        report.push(check);
                    }
                }
            }
            Err(e) => engine_failure(report, "cah_map", name, &e),
        }
    }
}

fn cmd_cah_check(manifest: &Manifest, report: &mut Report) {
    let settings = &manifest.settings;
    for (name, (_, problem)) in &manifest.cah {
        match problem.higher_order_check(settings.order, settings.budget, settings.relate_tol) {
            Ok(orders) => {
                for o in orders {
                    report.push(Check::new(
                        &format!("order_{}_torsion", o.order),
                        name,
                        o.torsion_residual,
                        settings.relate_tol,
                    ));
                    report.push(Check::new(
                        &format!("order_{}_curvature", o.order),
                        name,
                        o.curvature_residual,
                        settings.relate_tol,
                    ));
                }
            }
            Err(e) => engine_failure(report, "cah_check", name, &e),
        }
    }
}

fn cmd_affine_symmetry(manifest: &Manifest, report: &mut Report) {
    let settings = &manifest.settings;
    for (name, (spec, conn)) in &manifest.connections {
        let Some(x0) = &spec.base_point else { continue };
        if !conn.is_tangent() {
            continue;
        }
        let grid = match manifest.grid_for(x0, &spec.grid) {
            Ok(g) => g,
            Err(e) => {
                engine_failure(report, "symmetry_grid", name, &e);
                continue;
            }
        };
        match affine_symmetry_check(
            conn,
            x0,
            settings.order,
            &grid,
            settings.step,
            DEFECT_TOL,
            settings.budget,
        ) {
            Ok(sym) => {
                for o in &sym.orders {
                    report.push(
                        Check::new(
                            &format!("nabla_{}_{}_at_base", o.order, o.kind),
                            name,
                            o.max_norm,
                            DEFECT_TOL,
                        )
                        .with_data(json!({ "witness": o.witness })),
                    );
                }
                if let Some(affine) = &sym.affine {
                    report.push(Check::new(
                        "symmetry_map_nabla_df",
                        name,
                        affine.max_interior_residual,
                        settings.tol.max(1e-5),
                    ));
                }
            }
            Err(e) => engine_failure(report, "affine_symmetry", name, &e),
        }
    }
}

/// Full invariant battery over the built-in flat fixture: every subcommand
/// runs with tight thresholds; residuals on the flat chart are zero up to
/// rounding.
fn selftest(manifest: &Manifest, report: &mut Report, out: Option<&Path>) {
    levi(manifest, report);
    integrability(manifest, report);
    cmd_solve_tde(manifest, report, out);
    curvature(manifest, report);
    transport(manifest, report);
    geodesic(manifest, report, out);
    cmd_exp(manifest, report);
    cmd_log(manifest, report);
    metric_pipeline(manifest, report, out, true);
    cmd_cah_map(manifest, report, out);
    cmd_cah_check(manifest, report);
    cmd_affine_symmetry(manifest, report);

    // grid anchoring: the solve-tde leaf is exact at the base point
    for (name, (spec, dist)) in &manifest.distributions {
        let Some(base) = &spec.base_point else {
            continue;
        };
        let k = dist.base_dim();
        let (x0, y0) = base.split_at(k);
        if let Ok(grid) = manifest.grid_for(x0, &spec.grid) {
            if let Ok(leaf) = solve_tde(dist, x0, y0, &grid, manifest.settings.step) {
                let anchor_gap = leaf.values[grid.center_flat()]
                    .iter()
                    .zip(y0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                report.push(Check::new("anchor_exact", name, anchor_gap, 0.0));
            }
        }
    }
}
