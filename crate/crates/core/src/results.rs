//! Lower-triangular result matrices: row `t` holds scores of every domain
//! seen after training step `t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    /// Exact match, percentage points.
    pub em: f64,
    /// Word-level F1, percentage points.
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsMatrix {
    pub domains: Vec<String>,
    /// `rows[t][k]` for `k ≤ t`.
    pub rows: Vec<Vec<Score>>,
}

/// Fixed CSV header of matrix exports.
pub const CSV_HEADER: &str = "step,domain,em,f1,overall,rel_change";

impl ResultsMatrix {
    pub fn new(domains: Vec<String>) -> Self {
        Self {
            domains,
            rows: Vec::new(),
        }
    }

    /// Appends the row for the next step; it must score exactly the domains
    /// seen so far.
    pub fn push_row(&mut self, scores: Vec<Score>) -> Result<()> {
        let t = self.rows.len();
        if t >= self.domains.len() {
            return Err(Error::Contract("results matrix already complete".into()));
        }
        if scores.len() != t + 1 {
            return Err(Error::Contract(format!(
                "row {t} needs {} scores, got {}",
                t + 1,
                scores.len()
            )));
        }
        self.rows.push(scores);
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, step: usize, domain: usize) -> Option<Score> {
        self.rows.get(step).and_then(|r| r.get(domain)).copied()
    }

    /// Sum of F1 over the domains seen at `step`.
    pub fn overall(&self, step: usize) -> f64 {
        self.rows
            .get(step)
            .map_or(0.0, |r| r.iter().map(|s| s.f1).sum())
    }

    pub fn final_row(&self) -> Option<&[Score]> {
        self.rows.last().map(Vec::as_slice)
    }

    /// Relative F1 change (percent) of `domain` at `step` against the score
    /// right after that domain was trained.
    pub fn rel_change(&self, step: usize, domain: usize) -> Option<f64> {
        let first = self.get(domain, domain)?.f1;
        let now = self.get(step, domain)?.f1;
        (first != 0.0).then(|| (now - first) / first * 100.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for (t, row) in self.rows.iter().enumerate() {
            let overall = self.overall(t);
            for (k, s) in row.iter().enumerate() {
                let rel = self
                    .rel_change(t, k)
                    .map(|r| format!("{r:.4}"))
                    .unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{:.4},{:.4},{:.4},{}\n",
                    t + 1,
                    self.domains[k],
                    s.em,
                    s.f1,
                    overall,
                    rel
                ));
            }
        }
        out
    }

    /// Human-readable table in the layout of the published matrices, with
    /// relative-change annotations on forgotten cells.
    pub fn to_table(&self) -> String {
        let mut out = String::from("step");
        for d in &self.domains {
            out.push_str(&format!("\t{d}"));
        }
        out.push_str("\toverall\n");
        for (t, row) in self.rows.iter().enumerate() {
            out.push_str(&format!("{}", t + 1));
            for k in 0..self.domains.len() {
                match row.get(k) {
                    Some(s) if k < t => match self.rel_change(t, k) {
                        Some(r) => out.push_str(&format!("\t{:.2} ({:+.1}%)", s.f1, r)),
                        None => out.push_str(&format!("\t{:.2}", s.f1)),
                    },
                    Some(s) => out.push_str(&format!("\t{:.2}", s.f1)),
                    None => out.push_str("\t-"),
                }
            }
            out.push_str(&format!("\t{:.2}\n", self.overall(t)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(f1: f64) -> Score {
        Score { em: f1 - 1.0, f1 }
    }

    #[test]
    fn lower_triangular_occupancy() {
        let mut m = ResultsMatrix::new(vec!["a".into(), "b".into()]);
        assert!(m.push_row(vec![s(50.0), s(1.0)]).is_err());
        m.push_row(vec![s(50.0)]).unwrap();
        m.push_row(vec![s(40.0), s(70.0)]).unwrap();
        assert!(m.push_row(vec![s(1.0), s(1.0), s(1.0)]).is_err());
        assert!(m.get(0, 1).is_none());
        assert_eq!(m.overall(1), 110.0);
        assert_eq!(m.rel_change(1, 0), Some(-20.0));
        assert_eq!(m.rel_change(1, 1), Some(0.0));
    }

    #[test]
    fn csv_layout() {
        let mut m = ResultsMatrix::new(vec!["a".into(), "b".into()]);
        m.push_row(vec![s(50.0)]).unwrap();
        m.push_row(vec![s(40.0), s(70.0)]).unwrap();
        let csv = m.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "1,a,49.0000,50.0000,50.0000,0.0000");
        assert_eq!(lines[2], "2,a,39.0000,40.0000,110.0000,-20.0000");
        assert_eq!(lines.len(), 4);
        assert!(m.to_table().contains("(-20.0%)"));
    }

    #[test]
    fn single_domain_overall_is_its_f1() {
        let mut m = ResultsMatrix::new(vec!["only".into()]);
        m.push_row(vec![s(63.5)]).unwrap();
        assert_eq!(m.overall(0), 63.5);
    }
}
