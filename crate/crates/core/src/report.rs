//! Named residual reports with pass/fail verdicts against fixed tolerances.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ResidualEntry {
    pub residual: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Map from identity labels to numerical residual norms, each judged against
/// its own tolerance. Entries are kept sorted so serialized reports are
/// byte-stable.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ResidualReport {
    pub entries: BTreeMap<String, ResidualEntry>,
}

impl ResidualReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, label: impl Into<String>, residual: f64, tol: f64) {
        let pass = residual.is_finite() && residual <= tol;
        self.entries
            .insert(label.into(), ResidualEntry { residual, tol, pass });
    }

    /// Keep the worse residual when the same label is reported repeatedly
    /// (used when folding per-point reports into a grid aggregate).
    pub fn insert_max(&mut self, label: impl Into<String>, residual: f64, tol: f64) {
        let label = label.into();
        match self.entries.get(&label) {
            Some(prev) if prev.residual >= residual => {}
            _ => self.insert(label, residual, tol),
        }
    }

    pub fn merge_max(&mut self, other: &ResidualReport) {
        for (label, entry) in &other.entries {
            self.insert_max(label.clone(), entry.residual, entry.tol);
        }
    }

    pub fn pass(&self) -> bool {
        self.entries.values().all(|e| e.pass)
    }

    pub fn get(&self, label: &str) -> Option<&ResidualEntry> {
        self.entries.get(label)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, e)| !e.pass)
            .map(|(l, _)| l.as_str())
            .collect()
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.entries
            .iter()
            .map(|(l, e)| (l.as_str(), e.residual / e.tol))
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

impl std::fmt::Display for ResidualReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (label, e) in &self.entries {
            writeln!(
                f,
                "{}  {:26} residual {:.3e}  tol {:.1e}",
                if e.pass { "pass" } else { "FAIL" },
                label,
                e.residual,
                e.tol
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_iff_every_entry_passes() {
        let mut r = ResidualReport::new();
        r.insert("a", 1e-12, 1e-9);
        r.insert("b", 1e-10, 1e-9);
        assert!(r.pass());
        r.insert("c", 2e-9, 1e-9);
        assert!(!r.pass());
        assert_eq!(r.failing(), vec!["c"]);
    }

    #[test]
    fn insert_max_keeps_worst() {
        let mut r = ResidualReport::new();
        r.insert_max("a", 1e-10, 1e-9);
        r.insert_max("a", 5e-10, 1e-9);
        r.insert_max("a", 2e-10, 1e-9);
        assert_eq!(r.get("a").unwrap().residual, 5e-10);
    }

    #[test]
    fn nan_residual_fails() {
        let mut r = ResidualReport::new();
        r.insert("a", f64::NAN, 1e-9);
        assert!(!r.pass());
    }
}
