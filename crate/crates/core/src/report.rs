//! Machine-readable run reports: named gates, named checks with margins,
//! free-form diagnostics and plot-ready tables. Given fixed seeds and
//! tolerances the serialized form is byte-stable, so no timestamps or
//! host data belong here.

use serde::Serialize;
use std::collections::BTreeMap;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct GateEntry {
    pub id: String,
    pub description: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    pub applicable: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckEntry {
    pub id: String,
    pub description: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub scenario: String,
    pub seed: u64,
    pub tol_scale: f64,
    pub gates: Vec<GateEntry>,
    pub checks: Vec<CheckEntry>,
    pub diagnostics: BTreeMap<String, serde_json::Value>,
    pub tables: BTreeMap<String, Table>,
    pub passed: bool,
}

impl Report {
    pub fn new(command: &str, scenario: &str, seed: u64, tol_scale: f64) -> Self {
        Report {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            scenario: scenario.to_string(),
            seed,
            tol_scale,
            gates: Vec::new(),
            checks: Vec::new(),
            diagnostics: BTreeMap::new(),
            tables: BTreeMap::new(),
            passed: true,
        }
    }

    pub fn push_gate(&mut self, id: &str, description: &str, value: f64, threshold: f64, passed: bool) {
        if !passed {
            self.passed = false;
        }
        self.gates.push(GateEntry {
            id: id.to_string(),
            description: description.to_string(),
            value,
            threshold,
            passed,
            applicable: true,
        });
    }

    pub fn push_gate_not_applicable(&mut self, id: &str, description: &str) {
        self.gates.push(GateEntry {
            id: id.to_string(),
            description: description.to_string(),
            value: f64::NAN,
            threshold: f64::NAN,
            passed: true,
            applicable: false,
        });
    }

    pub fn push_check(&mut self, id: &str, description: &str, passed: bool, margin: Option<f64>) {
        if !passed {
            self.passed = false;
        }
        self.checks.push(CheckEntry {
            id: id.to_string(),
            description: description.to_string(),
            passed,
            margin,
            worst: None,
        });
    }

    pub fn push_check_with_worst(
        &mut self,
        id: &str,
        description: &str,
        passed: bool,
        margin: Option<f64>,
        worst: impl Serialize,
    ) {
        if !passed {
            self.passed = false;
        }
        self.checks.push(CheckEntry {
            id: id.to_string(),
            description: description.to_string(),
            passed,
            margin,
            worst: serde_json::to_value(worst).ok(),
        });
    }

    /// Record a check that could not run because of a runtime failure.
    pub fn push_failure(&mut self, id: &str, description: &str, error: &dyn std::fmt::Display) {
        self.passed = false;
        self.checks.push(CheckEntry {
            id: id.to_string(),
            description: format!("{description}: {error}"),
            passed: false,
            margin: None,
            worst: None,
        });
    }

    pub fn set_diagnostic(&mut self, key: &str, value: impl Serialize) {
        if let Ok(v) = serde_json::to_value(value) {
            self.diagnostics.insert(key.to_string(), v);
        }
    }

    pub fn set_table(&mut self, name: &str, columns: &[&str], rows: Vec<Vec<f64>>) {
        self.tables.insert(
            name.to_string(),
            Table {
                columns: columns.iter().map(|c| c.to_string()).collect(),
                rows,
            },
        );
    }

    /// Merge a stage report into a combined one, prefixing entry ids.
    pub fn absorb(&mut self, prefix: &str, other: Report) {
        if !other.passed {
            self.passed = false;
        }
        for mut g in other.gates {
            g.id = format!("{prefix}.{}", g.id);
            self.gates.push(g);
        }
        for mut c in other.checks {
            c.id = format!("{prefix}.{}", c.id);
            self.checks.push(c);
        }
        for (k, v) in other.diagnostics {
            self.diagnostics.insert(format!("{prefix}.{k}"), v);
        }
        for (k, v) in other.tables {
            self.tables.insert(format!("{prefix}.{k}"), v);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    /// Ids and descriptions of everything that failed.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for g in &self.gates {
            if g.applicable && !g.passed {
                out.push(format!("gate {}: {}", g.id, g.description));
            }
        }
        for c in &self.checks {
            if !c.passed {
                out.push(format!("check {}: {}", c.id, c.description));
            }
        }
        out
    }
}
