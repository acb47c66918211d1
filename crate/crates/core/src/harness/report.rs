use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::manifest::{Layout, RunManifest, Stage, BUILD_ID};
use super::stages::RunAccuracy;
use crate::error::{Error, Result};
use crate::explain::ExplainerKind;
use crate::metrics::{Aggregate, MetricKind, MetricReport};
use crate::model::Objective;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub samples: usize,
}

/// One metric for one explainer, one cell per loss. Missing cells (Eigen-CAM
/// contrastivity, metrics not run) are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub metric: MetricKind,
    pub explainer: ExplainerKind,
    pub lower_is_better: bool,
    pub cells: BTreeMap<Objective, Option<Cell>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub loss: Objective,
    pub classifier: String,
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub build: String,
    pub desk_scale: bool,
    pub seeds: Vec<u64>,
    pub losses: Vec<Objective>,
    pub table: Vec<TableRow>,
    pub accuracy: Vec<AccuracyRow>,
    pub directional: Vec<String>,
    pub aggregates: Vec<Aggregate>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn sorted_seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    let mut seeds = cfg.experiment.seeds.clone();
    seeds.sort_unstable();
    seeds
}

/// Aggregate every (loss, seed) run of the config and write `report/`.
pub fn build_report(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.experiment.output_dir);
    let seeds = sorted_seeds(cfg);
    let losses = cfg.experiment.losses.clone();
    let all_stages = [Stage::Train, Stage::Probe, Stage::Explain, Stage::Evaluate];

    let mut missing = Vec::new();
    let mut metrics = MetricReport::default();
    let mut accuracy: BTreeMap<Objective, (String, Vec<(u64, f64)>)> = BTreeMap::new();
    let mut curves: Curves = BTreeMap::new();
    let mut inputs = BTreeMap::new();
    for &loss in &losses {
        for &seed in &seeds {
            let manifest = match RunManifest::open(&layout, cfg, loss, seed, &all_stages) {
                Ok(m) => m,
                Err(Error::MissingArtifact { .. }) => {
                    missing.push(format!("{loss} seed {seed}"));
                    continue;
                }
                Err(e) => return Err(e),
            };
            let dir = layout.run_dir(loss, seed);
            for stage in [Stage::Train, Stage::Probe, Stage::Evaluate] {
                inputs.extend(manifest.stages[&stage].outputs.clone());
            }
            metrics.extend(MetricReport::from_csv(&std::fs::read_to_string(dir.join("metrics.csv"))?)?);
            let acc: RunAccuracy = serde_json::from_slice(&std::fs::read(dir.join("accuracy.json"))?)?;
            let slot = accuracy.entry(loss).or_insert_with(|| (acc.classifier.clone(), Vec::new()));
            slot.1.push((seed, acc.test_accuracy as f64));
            let mut per_kind: BTreeMap<ExplainerKind, Vec<(String, f64)>> = BTreeMap::new();
            for line in std::fs::read_to_string(dir.join("pf_curve.csv"))?.lines().skip(1) {
                let cells: Vec<&str> = line.split(',').collect();
                let bad = || Error::Format(format!("bad PF curve row `{line}`"));
                if cells.len() != 3 {
                    return Err(bad());
                }
                let kind: ExplainerKind = cells[0].parse()?;
                let v: f64 = cells[2].parse().map_err(|_| bad())?;
                per_kind.entry(kind).or_default().push((cells[1].to_string(), v));
            }
            for (kind, curve) in per_kind {
                curves.entry((loss, kind)).or_default().push(curve);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingRuns(missing.join(", ")));
    }

    let aggregates = metrics.aggregate();
    let lookup: BTreeMap<(Objective, ExplainerKind, MetricKind), &Aggregate> =
        aggregates.iter().map(|a| ((a.loss, a.explainer, a.metric), a)).collect();
    let mut table = Vec::new();
    for &metric in &cfg.evaluate.metrics {
        for &explainer in &cfg.explain.explainers {
            let cells = losses
                .iter()
                .map(|&loss| {
                    let cell = lookup.get(&(loss, explainer, metric)).map(|a| Cell {
                        mean: a.mean,
                        std: a.std,
                        samples: a.samples,
                    });
                    (loss, cell)
                })
                .collect();
            table.push(TableRow {
                metric,
                explainer,
                lower_is_better: metric.lower_is_better(),
                cells,
            });
        }
    }
    let accuracy: Vec<AccuracyRow> = accuracy
        .into_iter()
        .map(|(loss, (classifier, per_seed))| {
            let (mean, std) = mean_std(&per_seed.iter().map(|(_, a)| *a).collect::<Vec<_>>());
            AccuracyRow {
                loss,
                classifier,
                per_seed,
                mean,
                std,
            }
        })
        .collect();

    let report = Report {
        build: BUILD_ID.into(),
        desk_scale: cfg.experiment.desk_scale,
        seeds,
        losses,
        directional: directional(&lookup, &cfg.explain.explainers),
        table,
        accuracy,
        aggregates,
    };

    let dir = layout.report_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(dir.join("report.csv"), table_csv(&report))?;
    std::fs::write(dir.join("accuracy.csv"), accuracy_csv(&report))?;
    std::fs::write(dir.join("pf_curves.csv"), curves_csv(&curves)?)?;
    std::fs::write(dir.join("directional.txt"), report.directional.join("\n") + "\n")?;
    std::fs::write(dir.join("inputs.json"), serde_json::to_string_pretty(&inputs)?)?;
    Ok(report)
}

/// Per (loss, explainer), one curve of (fraction, mean) per seed.
type Curves = BTreeMap<(Objective, ExplainerKind), Vec<Vec<(String, f64)>>>;

type Lookup<'a> = BTreeMap<(Objective, ExplainerKind, MetricKind), &'a Aggregate>;

/// Whether SCL beats CE on complexity and pixel flipping, stated either way.
fn directional(lookup: &Lookup, explainers: &[ExplainerKind]) -> Vec<String> {
    let mut out = Vec::new();
    for &explainer in explainers {
        for metric in [MetricKind::Complexity, MetricKind::Pf] {
            let label = match metric {
                MetricKind::Complexity => "CM",
                _ => "PF",
            };
            let scl = lookup.get(&(Objective::Scl, explainer, metric));
            let ce = lookup.get(&(Objective::Ce, explainer, metric));
            out.push(match (scl, ce) {
                (Some(s), Some(c)) => {
                    let holds = s.mean < c.mean;
                    format!(
                        "{explainer} {label}: scl {:.4} {} ce {:.4}; SCL lower than CE: {}",
                        s.mean,
                        if holds { "<" } else { ">=" },
                        c.mean,
                        if holds { "yes" } else { "no" }
                    )
                }
                _ => format!("{explainer} {label}: not available (needs scl and ce runs)"),
            });
        }
    }
    out
}

fn table_csv(report: &Report) -> String {
    let mut out = String::from("metric,explainer");
    for loss in &report.losses {
        write!(out, ",{loss}").unwrap();
    }
    out.push('\n');
    for row in &report.table {
        write!(out, "{},{}", row.metric.name(), row.explainer).unwrap();
        for loss in &report.losses {
            match row.cells.get(loss).and_then(Option::as_ref) {
                Some(c) => write!(out, ",{:.4} ± {:.4}", c.mean, c.std).unwrap(),
                None => out.push_str(",NA"),
            }
        }
        out.push('\n');
    }
    out
}

fn accuracy_csv(report: &Report) -> String {
    let mut out = String::from("loss,classifier,mean,std,seeds\n");
    for row in &report.accuracy {
        writeln!(out, "{},{},{:.4},{:.4},{}", row.loss, row.classifier, row.mean, row.std, row.per_seed.len()).unwrap();
    }
    out
}

fn curves_csv(curves: &Curves) -> Result<String> {
    let mut out = String::from("loss,explainer,fraction,mean,std\n");
    for ((loss, kind), runs) in curves {
        let steps = runs[0].len();
        if runs.iter().any(|r| r.len() != steps) {
            return Err(Error::Format(format!("{loss}/{kind}: PF curves of different lengths")));
        }
        for k in 0..steps {
            let (mean, std) = mean_std(&runs.iter().map(|r| r[k].1).collect::<Vec<_>>());
            writeln!(out, "{loss},{kind},{},{mean:.8},{std:.8}", runs[0][k].0).unwrap();
        }
    }
    Ok(out)
}
