//! Problem manifests: a JSON file naming charts, connections, distributions,
//! sprays, metric seeds and CAH problems, plus solver settings. Expression
//! strings use the engine grammar; validation reports JSON-pointer-style
//! paths into the file.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use leafsolve_core::cah::CahProblem;
use leafsolve_core::connection::BundleConnection;
use leafsolve_core::distribution::{graph_coords, GraphDistribution};
use leafsolve_core::expr::{parse_expr, ScalarExpr};
use leafsolve_core::geometry::{BoxDomain, GridSpec};
use leafsolve_core::metric::MetricSeed;
use leafsolve_core::spray::{geodesic_spray, spray_coords, Spray};

/// Solver settings with manifest defaults; CLI flags override per field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Settings {
    pub step: f64,
    pub grid_points: usize,
    pub grid_half_width: f64,
    pub order: usize,
    pub tol: f64,
    pub budget: usize,
    /// Absolute threshold for relatedness residuals after normalization.
    pub relate_tol: f64,
    /// Skip the antisymmetry hypothesis in recover-metric (negative tests).
    pub override_hypothesis: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            step: 1e-3,
            grid_points: 9,
            grid_half_width: 0.1,
            order: 2,
            tol: 1e-6,
            budget: 2_000_000,
            relate_tol: 1e-7,
            override_hypothesis: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridOverride {
    pub half_width: Option<f64>,
    pub points: Option<usize>,
}

impl Default for GridOverride {
    fn default() -> Self {
        GridOverride {
            half_width: None,
            points: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionSpec {
    pub k: usize,
    pub m: usize,
    /// `m x k` matrix of expression strings over `x1..xk, y1..ym`.
    pub f: Vec<Vec<String>>,
    /// `k + m` intervals.
    pub domain: Vec<[f64; 2]>,
    /// Anchor `(x0, y0)`, length `k + m`.
    pub base_point: Option<Vec<f64>>,
    /// Points for the `levi` subcommand.
    #[serde(default)]
    pub eval_points: Vec<Vec<f64>>,
    /// Optional `X, Y` pair for the `levi` subcommand (defaults to frames).
    pub vectors: Option<[Vec<f64>; 2]>,
    #[serde(default)]
    pub grid: GridOverride,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectionSpec {
    pub dim: usize,
    /// `gamma[a][i][j]` (upper, derivative, lower); tangent connections.
    pub christoffel: Option<Vec<Vec<Vec<String>>>>,
    /// General coefficient matrices `omega[i][a][b]`, with `fiber_rank`.
    pub omega: Option<Vec<Vec<Vec<String>>>>,
    pub fiber_rank: Option<usize>,
    pub domain: Vec<[f64; 2]>,
    /// Evaluation/anchor point for curvature and symmetry checks.
    pub base_point: Option<Vec<f64>>,
    #[serde(default)]
    pub grid: GridOverride,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpraySpec {
    /// Build the geodesic spray of a named connection...
    pub from_christoffel: Option<String>,
    /// ...or give raw acceleration expressions over `x1..xn, v1..vn`.
    pub dim: Option<usize>,
    pub acceleration: Option<Vec<String>>,
    pub domain: Option<Vec<[f64; 2]>>,
    /// Initial data for `geodesic` / `exp`.
    pub point: Option<Vec<f64>>,
    pub velocity: Option<Vec<f64>>,
    /// Target for `log`.
    pub target: Option<Vec<f64>>,
    #[serde(default = "default_t_span")]
    pub t_span: [f64; 2],
}

fn default_t_span() -> [f64; 2] {
    [0.0, 1.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSeedSpec {
    pub connection: String,
    pub base_point: Vec<f64>,
    pub g0: Vec<Vec<f64>>,
    #[serde(default)]
    pub grid: GridOverride,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CahSpec {
    pub source: String,
    pub target: String,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub sigma0: Vec<Vec<f64>>,
    #[serde(default)]
    pub grid: GridOverride,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportSpec {
    pub connection: String,
    /// Curve components as expressions of `t`; velocity is the exact
    /// symbolic derivative.
    pub point: Vec<String>,
    pub t_span: [f64; 2],
    /// Initial fiber vector.
    pub section: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifestFile {
    pub settings: Settings,
    pub distributions: BTreeMap<String, DistributionSpec>,
    pub connections: BTreeMap<String, ConnectionSpec>,
    pub sprays: BTreeMap<String, SpraySpec>,
    pub metric_seeds: BTreeMap<String, MetricSeedSpec>,
    pub cah: BTreeMap<String, CahSpec>,
    pub transports: BTreeMap<String, TransportSpec>,
}

/// One validation finding, with a JSON-pointer-style path.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

/// Fully built entities, ready for the engine.
pub struct Manifest {
    pub settings: Settings,
    pub distributions: BTreeMap<String, (DistributionSpec, GraphDistribution)>,
    pub connections: BTreeMap<String, (ConnectionSpec, BundleConnection)>,
    pub sprays: BTreeMap<String, (SpraySpec, Spray)>,
    pub metric_seeds: BTreeMap<String, (MetricSeedSpec, MetricSeed)>,
    pub cah: BTreeMap<String, (CahSpec, CahProblem)>,
    pub transports: BTreeMap<String, (TransportSpec, TransportCurve)>,
}

/// A transport curve with bound point/velocity expressions of `t`.
pub struct TransportCurve {
    pub point: Vec<ScalarExpr>,
    pub velocity: Vec<ScalarExpr>,
}

impl TransportCurve {
    pub fn sample(&self, t: f64) -> leafsolve_core::Result<(Vec<f64>, Vec<f64>)> {
        let env = [("t", t)];
        let p = self
            .point
            .iter()
            .map(|e| e.eval(&env))
            .collect::<leafsolve_core::Result<Vec<_>>>()?;
        let v = self
            .velocity
            .iter()
            .map(|e| e.eval(&env))
            .collect::<leafsolve_core::Result<Vec<_>>>()?;
        Ok((p, v))
    }
}

fn intervals(spec: &[[f64; 2]]) -> Vec<(f64, f64)> {
    spec.iter().map(|iv| (iv[0], iv[1])).collect()
}

/// Locate the first shape violation in a Christoffel array, returning the
/// index path of the offending level and the length found there.
fn gamma_shape_defect(gamma: &[Vec<Vec<String>>], n: usize) -> Option<(String, usize)> {
    if gamma.len() != n {
        return Some((String::new(), gamma.len()));
    }
    for (a, plane) in gamma.iter().enumerate() {
        if plane.len() != n {
            return Some((format!("/{a}"), plane.len()));
        }
        for (i, row) in plane.iter().enumerate() {
            if row.len() != n {
                return Some((format!("/{a}/{i}"), row.len()));
            }
        }
    }
    None
}

fn parse_matrix(
    rows: &[Vec<String>],
    coords: &[String],
    path: &str,
    diagnostics: &mut Vec<Diagnostic>,
) -> Option<Vec<Vec<ScalarExpr>>> {
    let mut out = Vec::with_capacity(rows.len());
    let mut ok = true;
    for (i, row) in rows.iter().enumerate() {
        let mut out_row = Vec::with_capacity(row.len());
        for (j, text) in row.iter().enumerate() {
            match parse_expr(text, coords) {
                Ok(e) => out_row.push(e),
                Err(e) => {
                    ok = false;
                    diagnostics.push(Diagnostic {
                        path: format!("{path}/{i}/{j}"),
                        message: e.to_string(),
                    });
                }
            }
        }
        out.push(out_row);
    }
    ok.then_some(out)
}

impl ManifestFile {
    pub fn from_str(text: &str) -> Result<Self, Diagnostic> {
        serde_json::from_str(text).map_err(|e| Diagnostic {
            path: format!("/(line {}, column {})", e.line(), e.column()),
            message: e.to_string(),
        })
    }

    /// Build every entity, collecting diagnostics instead of failing fast.
    pub fn build(&self) -> Result<Manifest, Vec<Diagnostic>> {
        let mut diagnostics = Vec::new();
        let mut distributions = BTreeMap::new();
        for (name, spec) in &self.distributions {
            let path = format!("/distributions/{name}");
            let coords = graph_coords(spec.k, spec.m);
            let Some(exprs) =
                parse_matrix(&spec.f, &coords, &format!("{path}/f"), &mut diagnostics)
            else {
                continue;
            };
            match BoxDomain::new(intervals(&spec.domain))
                .and_then(|dom| GraphDistribution::new(spec.k, spec.m, exprs, dom))
            {
                Ok(dist) => {
                    if let Some(bp) = &spec.base_point {
                        if bp.len() != spec.k + spec.m {
                            diagnostics.push(Diagnostic {
                                path: format!("{path}/base_point"),
                                message: format!(
                                    "expected length {} (k + m), got {}",
                                    spec.k + spec.m,
                                    bp.len()
                                ),
                            });
                            continue;
                        }
                    }
                    if let Some([x, y]) = &spec.vectors {
                        if x.len() != spec.k || y.len() != spec.k {
                            diagnostics.push(Diagnostic {
                                path: format!("{path}/vectors"),
                                message: format!("vectors must have length k = {}", spec.k),
                            });
                            continue;
                        }
                    }
                    distributions.insert(name.clone(), (spec.clone(), dist));
                }
                Err(e) => diagnostics.push(Diagnostic {
                    path,
                    message: e.to_string(),
                }),
            }
        }

        let mut connections = BTreeMap::new();
        for (name, spec) in &self.connections {
            let path = format!("/connections/{name}");
            let n = spec.dim;
            let coords: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
            let built = match (&spec.christoffel, &spec.omega) {
                (Some(gamma), None) => {
                    if let Some((where_, got)) = gamma_shape_defect(gamma, n) {
                        diagnostics.push(Diagnostic {
                            path: format!("{path}/christoffel{where_}"),
                            message: format!(
                                "expected an {n} x {n} x {n} array, found length {got} here"
                            ),
                        });
                        continue;
                    }
                    let mut planes = Vec::with_capacity(n);
                    let mut ok = true;
                    for (a, plane) in gamma.iter().enumerate() {
                        match parse_matrix(
                            plane,
                            &coords,
                            &format!("{path}/christoffel/{a}"),
                            &mut diagnostics,
                        ) {
                            Some(p) => planes.push(p),
                            None => ok = false,
                        }
                    }
                    if !ok {
                        continue;
                    }
                    BoxDomain::new(intervals(&spec.domain))
                        .and_then(|dom| BundleConnection::from_christoffel(n, planes, dom))
                }
                (None, Some(omega)) => {
                    let Some(r) = spec.fiber_rank else {
                        diagnostics.push(Diagnostic {
                            path: format!("{path}/fiber_rank"),
                            message: "omega connections need fiber_rank".into(),
                        });
                        continue;
                    };
                    if omega.len() != n
                        || omega
                            .iter()
                            .any(|m| m.len() != r || m.iter().any(|row| row.len() != r))
                    {
                        diagnostics.push(Diagnostic {
                            path: format!("{path}/omega"),
                            message: format!("expected {n} matrices of size {r} x {r}"),
                        });
                        continue;
                    }
                    let mut mats = Vec::with_capacity(n);
                    let mut ok = true;
                    for (i, mat) in omega.iter().enumerate() {
                        match parse_matrix(
                            mat,
                            &coords,
                            &format!("{path}/omega/{i}"),
                            &mut diagnostics,
                        ) {
                            Some(m) => mats.push(m),
                            None => ok = false,
                        }
                    }
                    if !ok {
                        continue;
                    }
                    BoxDomain::new(intervals(&spec.domain))
                        .and_then(|dom| BundleConnection::new(n, r, mats, dom, r == n))
                }
                _ => {
                    diagnostics.push(Diagnostic {
                        path,
                        message: "give exactly one of `christoffel` or `omega`".into(),
                    });
                    continue;
                }
            };
            match built {
                Ok(conn) => {
                    if let Some(bp) = &spec.base_point {
                        if bp.len() != n {
                            diagnostics.push(Diagnostic {
                                path: format!("{path}/base_point"),
                                message: format!("expected length {n}, got {}", bp.len()),
                            });
                            continue;
                        }
                    }
                    connections.insert(name.clone(), (spec.clone(), conn));
                }
                Err(e) => diagnostics.push(Diagnostic {
                    path,
                    message: e.to_string(),
                }),
            }
        }

        let mut sprays = BTreeMap::new();
        for (name, spec) in &self.sprays {
            let path = format!("/sprays/{name}");
            let built = match (&spec.from_christoffel, &spec.acceleration) {
                (Some(conn_name), None) => match connections.get(conn_name) {
                    Some((_, conn)) => geodesic_spray(conn),
                    None => {
                        diagnostics.push(Diagnostic {
                            path: format!("{path}/from_christoffel"),
                            message: format!("unknown connection `{conn_name}`"),
                        });
                        continue;
                    }
                },
                (None, Some(acc)) => {
                    let (Some(dim), Some(domain)) = (spec.dim, &spec.domain) else {
                        diagnostics.push(Diagnostic {
                            path,
                            message: "raw sprays need `dim` and `domain`".into(),
                        });
                        continue;
                    };
                    let coords = spray_coords(dim);
                    let mut exprs = Vec::with_capacity(acc.len());
                    let mut ok = true;
                    for (i, text) in acc.iter().enumerate() {
                        match parse_expr(text, &coords) {
                            Ok(e) => exprs.push(e),
                            Err(e) => {
                                ok = false;
                                diagnostics.push(Diagnostic {
                                    path: format!("{path}/acceleration/{i}"),
                                    message: e.to_string(),
                                });
                            }
                        }
                    }
                    if !ok {
                        continue;
                    }
                    BoxDomain::new(intervals(domain)).and_then(|dom| Spray::new(dim, exprs, dom))
                }
                _ => {
                    diagnostics.push(Diagnostic {
                        path,
                        message: "give exactly one of `from_christoffel` or `acceleration`".into(),
                    });
                    continue;
                }
            };
            match built {
                Ok(spray) => {
                    sprays.insert(name.clone(), (spec.clone(), spray));
                }
                Err(e) => diagnostics.push(Diagnostic {
                    path,
                    message: e.to_string(),
                }),
            }
        }

        let mut metric_seeds = BTreeMap::new();
        for (name, spec) in &self.metric_seeds {
            let path = format!("/metric_seeds/{name}");
            if !connections.contains_key(&spec.connection) {
                diagnostics.push(Diagnostic {
                    path: format!("{path}/connection"),
                    message: format!("unknown connection `{}`", spec.connection),
                });
                continue;
            }
            let n = spec.base_point.len();
            if spec.g0.len() != n || spec.g0.iter().any(|row| row.len() != n) {
                diagnostics.push(Diagnostic {
                    path: format!("{path}/g0"),
                    message: format!("expected an {n} x {n} matrix"),
                });
                continue;
            }
            let g0 = DMatrix::from_fn(n, n, |a, b| spec.g0[a][b]);
            match MetricSeed::new(spec.base_point.clone(), g0) {
                Ok(seed) => {
                    metric_seeds.insert(name.clone(), (spec.clone(), seed));
                }
                Err(e) => diagnostics.push(Diagnostic {
                    path,
                    message: e.to_string(),
                }),
            }
        }

        let mut cah = BTreeMap::new();
        for (name, spec) in &self.cah {
            let path = format!("/cah/{name}");
            let (Some((_, source)), Some((_, target))) =
                (connections.get(&spec.source), connections.get(&spec.target))
            else {
                diagnostics.push(Diagnostic {
                    path,
                    message: "source/target must name connections in this manifest".into(),
                });
                continue;
            };
            let m = target.base_dim();
            let n = source.base_dim();
            if spec.sigma0.len() != m || spec.sigma0.iter().any(|row| row.len() != n) {
                diagnostics.push(Diagnostic {
                    path: format!("{path}/sigma0"),
                    message: format!(
                        "expected {m} rows x {n} columns (target dim x source dim), got {} x {}",
                        spec.sigma0.len(),
                        spec.sigma0.first().map_or(0, |r| r.len())
                    ),
                });
                continue;
            }
            let sigma0 = DMatrix::from_fn(m, n, |a, b| spec.sigma0[a][b]);
            match CahProblem::new(
                source.clone(),
                target.clone(),
                spec.x0.clone(),
                spec.y0.clone(),
                sigma0,
            ) {
                Ok(problem) => {
                    cah.insert(name.clone(), (spec.clone(), problem));
                }
                Err(e) => diagnostics.push(Diagnostic {
                    path,
                    message: e.to_string(),
                }),
            }
        }

        let mut transports = BTreeMap::new();
        for (name, spec) in &self.transports {
            let path = format!("/transports/{name}");
            if !connections.contains_key(&spec.connection) {
                diagnostics.push(Diagnostic {
                    path: format!("{path}/connection"),
                    message: format!("unknown connection `{}`", spec.connection),
                });
                continue;
            }
            let t_coords = ["t".to_string()];
            let mut point = Vec::with_capacity(spec.point.len());
            let mut ok = true;
            for (i, text) in spec.point.iter().enumerate() {
                match parse_expr(text, &t_coords) {
                    Ok(e) => point.push(e),
                    Err(e) => {
                        ok = false;
                        diagnostics.push(Diagnostic {
                            path: format!("{path}/point/{i}"),
                            message: e.to_string(),
                        });
                    }
                }
            }
            if !ok {
                continue;
            }
            let velocity = point.iter().map(|e| e.differentiate("t")).collect();
            transports.insert(
                name.clone(),
                (spec.clone(), TransportCurve { point, velocity }),
            );
        }

        if diagnostics.is_empty() {
            Ok(Manifest {
                settings: self.settings.clone(),
                distributions,
                connections,
                sprays,
                metric_seeds,
                cah,
                transports,
            })
        } else {
            Err(diagnostics)
        }
    }
}

impl Manifest {
    /// Grid for an entity: per-entity override on top of global settings.
    pub fn grid_for(
        &self,
        center: &[f64],
        over: &GridOverride,
    ) -> leafsolve_core::Result<GridSpec> {
        let half_width = over.half_width.unwrap_or(self.settings.grid_half_width);
        let points = over.points.unwrap_or(self.settings.grid_points);
        GridSpec::uniform(center, half_width, points)
    }
}
