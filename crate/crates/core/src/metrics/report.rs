use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::ExplainerKind;
use crate::model::Objective;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Pf,
    Pg,
    Al,
    Continuity,
    Contrastivity,
    Complexity,
    Sparseness,
}

impl MetricKind {
    pub const ALL: [MetricKind; 7] = [
        MetricKind::Pf,
        MetricKind::Pg,
        MetricKind::Al,
        MetricKind::Continuity,
        MetricKind::Contrastivity,
        MetricKind::Complexity,
        MetricKind::Sparseness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Pf => "pf",
            MetricKind::Pg => "pg",
            MetricKind::Al => "al",
            MetricKind::Continuity => "continuity",
            MetricKind::Contrastivity => "contrastivity",
            MetricKind::Complexity => "complexity",
            MetricKind::Sparseness => "sparseness",
        }
    }

    /// Whether a lower score is better.
    pub fn lower_is_better(self) -> bool {
        matches!(self, MetricKind::Pf | MetricKind::Contrastivity | MetricKind::Complexity)
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

/// One explained test sample. Missing values mean the metric was not run or
/// the sample was excluded (empty mask, all-zero map).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub seed: u64,
    pub loss: Objective,
    pub explainer: ExplainerKind,
    pub sample_id: usize,
    pub values: BTreeMap<MetricKind, f32>,
    /// Metrics whose inputs were degenerate, separated by `;`.
    pub flags: Vec<MetricKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub loss: Objective,
    pub explainer: ExplainerKind,
    pub metric: MetricKind,
    /// Mean over samples, per seed in ascending order.
    pub per_seed: Vec<(u64, f64)>,
    /// Mean and population std of the per-seed means.
    pub mean: f64,
    pub std: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: Vec<SampleRecord>,
}

const CSV_FIXED: [&str; 4] = ["seed", "loss", "explainer", "sample_id"];

impl MetricReport {
    pub fn csv_header() -> String {
        let mut cols: Vec<&str> = CSV_FIXED.to_vec();
        cols.extend(MetricKind::ALL.iter().map(|m| m.name()));
        cols.push("flags");
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::csv_header();
        out.push('\n');
        for r in &self.records {
            let mut cells = vec![
                r.seed.to_string(),
                r.loss.to_string(),
                r.explainer.to_string(),
                r.sample_id.to_string(),
            ];
            cells.extend(
                MetricKind::ALL
                    .iter()
                    .map(|m| r.values.get(m).map(|v| v.to_string()).unwrap_or_default()),
            );
            cells.push(r.flags.iter().map(|m| m.name()).collect::<Vec<_>>().join(";"));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::csv_header().as_str()) {
            return Err(Error::Format("metric CSV header does not match".into()));
        }
        let bad = |line: &str| Error::Format(format!("bad metric CSV row `{line}`"));
        let mut records = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != CSV_FIXED.len() + MetricKind::ALL.len() + 1 {
                return Err(bad(line));
            }
            let mut values = BTreeMap::new();
            for (m, cell) in MetricKind::ALL.iter().zip(&cells[4..]) {
                if !cell.is_empty() {
                    values.insert(*m, cell.parse::<f32>().map_err(|_| bad(line))?);
                }
            }
            let flags = cells[cells.len() - 1]
                .split(';')
                .filter(|s| !s.is_empty())
                .map(str::parse)
                .collect::<Result<Vec<MetricKind>>>()?;
            records.push(SampleRecord {
                seed: cells[0].parse().map_err(|_| bad(line))?,
                loss: cells[1].parse()?,
                explainer: cells[2].parse()?,
                sample_id: cells[3].parse().map_err(|_| bad(line))?,
                values,
                flags,
            });
        }
        Ok(Self { records })
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.records.extend(other.records);
    }

    /// One entry per (loss, explainer, metric) that has any value.
    pub fn aggregate(&self) -> Vec<Aggregate> {
        type Key = (Objective, ExplainerKind, MetricKind);
        let mut sums: BTreeMap<Key, BTreeMap<u64, (f64, usize)>> = BTreeMap::new();
        for r in &self.records {
            for (m, v) in &r.values {
                let slot = sums
                    .entry((r.loss, r.explainer, *m))
                    .or_default()
                    .entry(r.seed)
                    .or_insert((0.0, 0));
                slot.0 += *v as f64;
                slot.1 += 1;
            }
        }
        sums.into_iter()
            .map(|((loss, explainer, metric), seeds)| {
                let per_seed: Vec<(u64, f64)> = seeds.iter().map(|(s, (sum, n))| (*s, sum / *n as f64)).collect();
                let k = per_seed.len() as f64;
                let mean = per_seed.iter().map(|(_, m)| m).sum::<f64>() / k;
                let var = per_seed.iter().map(|(_, m)| (m - mean) * (m - mean)).sum::<f64>() / k;
                Aggregate {
                    loss,
                    explainer,
                    metric,
                    per_seed,
                    mean,
                    std: var.sqrt(),
                    samples: seeds.values().map(|(_, n)| n).sum(),
                }
            })
            .collect()
    }
}
