use std::io::Write;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskStep {
    pub l_diff: f64,
    pub r_soft_mean: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Mean hard-routed sparsity on held-out probes, when probed.
    pub omega: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub l_lang: f64,
    pub tau: f64,
    pub tasks: Vec<TaskStep>,
}

impl HistoryRow {
    pub fn summary(&self, names: &[String]) -> String {
        let mut s = format!("l_lang {:.4} tau {:.3}", self.l_lang, self.tau);
        for (n, t) in names.iter().zip(&self.tasks) {
            s.push_str(&format!(
                " | {n}: l_diff {:+.3} r {:.3} l1 {:.4} l2 {:.4}",
                t.l_diff, t.r_soft_mean, t.lambda1, t.lambda2
            ));
            if let Some(o) = t.omega {
                s.push_str(&format!(" omega {o:.3}"));
            }
        }
        s
    }
}

/// Append-only per-step record of router training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub task_names: Vec<String>,
    rows: Vec<HistoryRow>,
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

impl TrainHistory {
    pub fn new(task_names: Vec<String>) -> Self {
        Self {
            task_names,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: HistoryRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[HistoryRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.task_names.iter().position(|n| n == name)
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["step".to_string(), "l_lang".to_string()];
        cols.extend(self.task_names.iter().map(|n| format!("l_diff_{n}")));
        cols.extend(self.task_names.iter().map(|n| format!("r_soft_mean_{n}")));
        cols.push("tau".to_string());
        cols.extend(self.task_names.iter().map(|n| format!("lambda1_{n}")));
        cols.extend(self.task_names.iter().map(|n| format!("lambda2_{n}")));
        cols.extend(self.task_names.iter().map(|n| format!("omega_{n}")));
        cols.join(",")
    }

    /// Header row then one row per step. Values are written with full
    /// round-trip precision; missing values are empty.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{}", self.csv_header())?;
        for r in &self.rows {
            let mut cols = vec![r.step.to_string(), num(r.l_lang)];
            cols.extend(r.tasks.iter().map(|t| num(t.l_diff)));
            cols.extend(r.tasks.iter().map(|t| num(t.r_soft_mean)));
            cols.push(num(r.tau));
            cols.extend(r.tasks.iter().map(|t| num(t.lambda1)));
            cols.extend(r.tasks.iter().map(|t| num(t.lambda2)));
            cols.extend(r.tasks.iter().map(|t| t.omega.map_or(String::new(), num)));
            writeln!(w, "{}", cols.join(","))?;
        }
        Ok(())
    }
}
