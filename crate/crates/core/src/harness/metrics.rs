//! Per-visit error, domain-detection confusion and forgetting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// What the harness knows about one processed batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub round: usize,
    pub domain: usize,
    pub assigned: usize,
    pub is_new: bool,
    pub errors: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitMetrics {
    pub round: usize,
    pub domain: usize,
    pub domain_name: String,
    pub error: f64,
    /// Share of this visit's batches that went to its most frequent id.
    pub purity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: String,
    pub visits: Vec<VisitMetrics>,
    pub mean_error: f64,
    /// `confusion[true domain][assigned id]`, counted in batches.
    pub confusion: Vec<Vec<usize>>,
    /// Cluster purity: for every assigned id, the batches of its most
    /// frequent true domain, summed and divided by all batches.
    pub purity: f64,
    /// Batches whose id differs from their true domain's majority id.
    pub off_diagonal: usize,
    pub spawned: usize,
    /// Last-visit error minus first-visit error, per domain (`None` when
    /// the domain was visited once).
    pub forgetting: Vec<Option<f64>>,
}

fn majority_share(counts: &[usize]) -> (usize, usize) {
    counts.iter().copied().max().map_or((0, 0), |m| (m, counts.iter().sum()))
}

/// Aggregates batch records from one stream run.
pub fn summarize(method: &str, domain_names: &[String], records: &[BatchRecord], spawned: usize) -> RunMetrics {
    let nd = domain_names.len();
    let width = records.iter().map(|r| r.assigned + 1).max().unwrap_or(1);
    let mut confusion = vec![vec![0usize; width]; nd];
    let mut visits: BTreeMap<(usize, usize), (usize, usize, Vec<usize>)> = BTreeMap::new();
    for r in records {
        confusion[r.domain][r.assigned] += 1;
        let v = visits
            .entry((r.round, r.domain))
            .or_insert_with(|| (0, 0, vec![0; width]));
        v.0 += r.errors;
        v.1 += r.samples;
        v.2[r.assigned] += 1;
    }
    let visits: Vec<VisitMetrics> = visits
        .into_iter()
        .map(|((round, domain), (errors, samples, ids))| {
            let (top, total) = majority_share(&ids);
            VisitMetrics {
                round,
                domain,
                domain_name: domain_names[domain].clone(),
                error: errors as f64 / samples.max(1) as f64,
                purity: top as f64 / total.max(1) as f64,
            }
        })
        .collect();
    let (mut on, mut all) = (0, 0);
    for row in &confusion {
        let (top, total) = majority_share(row);
        on += top;
        all += total;
    }
    let clustered: usize = (0..width)
        .map(|id| confusion.iter().map(|row| row[id]).max().unwrap_or(0))
        .sum();
    let errors: usize = records.iter().map(|r| r.errors).sum();
    let samples: usize = records.iter().map(|r| r.samples).sum();
    let forgetting = (0..nd)
        .map(|d| {
            let mine: Vec<&VisitMetrics> = visits.iter().filter(|v| v.domain == d).collect();
            match (mine.first(), mine.last()) {
                (Some(first), Some(last)) if mine.len() > 1 => Some(last.error - first.error),
                _ => None,
            }
        })
        .collect();
    RunMetrics {
        method: method.to_string(),
        visits,
        mean_error: errors as f64 / samples.max(1) as f64,
        confusion,
        purity: clustered as f64 / all.max(1) as f64,
        off_diagonal: all - on,
        spawned,
        forgetting,
    }
}

impl RunMetrics {
    /// Error of `domain` in `round`.
    pub fn visit_error(&self, round: usize, domain: usize) -> Option<f64> {
        self.visits
            .iter()
            .find(|v| v.round == round && v.domain == domain)
            .map(|v| v.error)
    }

    /// One row per visit: round, domain, error, purity.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,domain,error,purity\n");
        for v in &self.visits {
            let _ = writeln!(out, "{},{},{},{}", v.round, v.domain_name, v.error, v.purity);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
