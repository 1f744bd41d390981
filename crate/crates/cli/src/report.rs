//! Machine-readable run reports. Reports are deterministic: entity maps are
//! ordered, solvers are fixed-step, and no wall-clock data enters the JSON
//! (elapsed time goes to stderr), so identical inputs give byte-identical
//! output.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::manifest::Settings;

/// One check line: a named residual against a threshold.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub target: String,
    pub residual: f64,
    pub threshold: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<serde_json::Value>,
}

impl Check {
    pub fn new(name: &str, target: &str, residual: f64, threshold: f64) -> Self {
        Check {
            name: name.to_owned(),
            target: target.to_owned(),
            residual,
            threshold,
            pass: residual <= threshold,
            data: None,
        }
    }

    pub fn with_data(mut self, data: serde_json::Value) -> Self {
        self.data = Some(data);
        self
    }
}

/// Conventions the numbers in a report are stated in.
#[derive(Debug, Clone, Serialize)]
pub struct Conventions {
    pub levi_sign: &'static str,
    pub christoffel_layout: &'static str,
    pub curvature: &'static str,
    pub cah_quotient: &'static str,
}

impl Default for Conventions {
    fn default() -> Self {
        Conventions {
            levi_sign: "L(X,Y) = dxF(X)(Y) + dyF(F(X))(Y) - dxF(Y)(X) - dyF(F(Y))(X)",
            christoffel_layout: "[a][i][j] = Gamma^a_{ij} (upper, derivative, lower)",
            curvature: "R(d_i, d_j) = d_i omega_j - d_j omega_i + [omega_i, omega_j]",
            cah_quotient: "(v, w, tau) -> (w - sigma v, tau)",
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub command: String,
    pub manifest: String,
    pub inputs_digest: String,
    pub settings: Settings,
    pub conventions: Conventions,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl Report {
    pub fn new(
        command: &str,
        manifest_name: &str,
        manifest_bytes: &[u8],
        settings: &Settings,
    ) -> Self {
        Report {
            command: command.to_owned(),
            manifest: manifest_name.to_owned(),
            inputs_digest: digest(manifest_bytes, settings),
            settings: settings.clone(),
            conventions: Conventions::default(),
            checks: Vec::new(),
            pass: true,
        }
    }

    pub fn push(&mut self, check: Check) {
        self.pass &= check.pass;
        self.checks.push(check);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// RFC-4180 CSV rendering of the check table.
    pub fn to_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record(["name", "target", "residual", "threshold", "pass"])
            .expect("csv header");
        for check in &self.checks {
            writer
                .write_record([
                    check.name.as_str(),
                    check.target.as_str(),
                    &format!("{}", check.residual),
                    &format!("{}", check.threshold),
                    &format!("{}", check.pass),
                ])
                .expect("csv row");
        }
        String::from_utf8(writer.into_inner().expect("csv flush")).expect("utf8")
    }
}

/// Digest of the raw manifest bytes and the resolved settings, so every
/// flag override round-trips into the report.
pub fn digest(manifest_bytes: &[u8], settings: &Settings) -> String {
    let mut hasher = Sha256::new();
    hasher.update(manifest_bytes);
    hasher.update(serde_json::to_vec(settings).expect("settings serialize"));
    format!("sha256:{}", hex::encode(hasher.finalize()))
}
