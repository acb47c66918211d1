use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig};
use super::manifest::{Layout, RunManifest, Stage, StageRecord};
use crate::data::{
    derive_seed, generate_shapes, load_cifar10_batch, load_split, save_split, DatasetManifest, DatasetStats,
    ImageSample,
};
use crate::error::{Error, Result};
use crate::explain::{eigen_cam, grad_cam, Explanation, ExplanationMeta, ExplainerKind};
use crate::metrics::{
    attribution_localization, complexity_entropy, contrastivity, continuity, pixel_flipping, pointing_game,
    sparseness_gini, Classifier, MetricKind, MetricReport, SampleRecord,
};
use crate::model::{accuracy, pooled_features, train_probe, HeadKind, ModelBundle, Objective, ProbeConfig};
use crate::nn::{io, Tensor};

const CONTINUITY_STREAM: u64 = 0x636f_6e74;
const CONTRAST_STREAM: u64 = 0x6374_7273;
const PROBE_STREAM: u64 = 0x7072_6f62;

/// Thread settings for the per-sample stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads for explain/evaluate; `None` uses every core.
    pub threads: Option<usize>,
    /// Force one thread.
    pub deterministic: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            threads: None,
            deterministic: true,
        }
    }
}

impl RunOptions {
    fn threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads.unwrap_or_else(rayon::current_num_threads).max(1)
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads())
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }
}

/// Test accuracy of a run's head (ce) or probe (scl, tl).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAccuracy {
    pub loss: Objective,
    pub seed: u64,
    pub classifier: String,
    pub test_accuracy: f32,
    pub train_accuracy: f32,
}

fn write(path: &PathBuf, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Generate (or ingest) the dataset and write it with its manifest.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.experiment.output_dir);
    std::fs::create_dir_all(layout.data_dir())?;
    let (train, test, spec, source) = match cfg.data.source {
        DataSource::Shapes => {
            let d = generate_shapes(&cfg.data.shapes)?;
            (d.train, d.test, Some(cfg.data.shapes.clone()), "shapes")
        }
        DataSource::Cifar10 => {
            let dir = cfg.data.cifar10_dir.as_ref().expect("validated");
            let mut train = Vec::new();
            for i in 1..=5 {
                train.extend(load_cifar10_batch(&dir.join(format!("data_batch_{i}.bin")))?);
            }
            let test = load_cifar10_batch(&dir.join("test_batch.bin"))?;
            (train, test, None, "cifar10")
        }
    };
    save_split(&layout.train_split(), &train)?;
    save_split(&layout.test_split(), &test)?;
    let mut checksums = BTreeMap::new();
    for path in [layout.train_split(), layout.test_split()] {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        checksums.insert(name, io::file_checksum(&path)?);
    }
    let manifest = DatasetManifest {
        spec,
        source: source.into(),
        train_len: train.len(),
        test_len: test.len(),
        stats: DatasetStats::from_samples(&train)?,
        checksums,
    };
    write(&layout.dataset_manifest(), serde_json::to_string_pretty(&manifest)?)?;
    log::info!("gen-data: {} train / {} test samples", train.len(), test.len());
    Ok(manifest)
}

fn selected(cfg: &ExperimentConfig, loss: Option<Objective>) -> Result<Vec<Objective>> {
    match loss {
        Some(l) if !cfg.experiment.losses.contains(&l) => {
            Err(Error::Config(format!("loss `{l}` is not in experiment.losses")))
        }
        Some(l) => Ok(vec![l]),
        None => Ok(cfg.experiment.losses.clone()),
    }
}

fn data_inputs(layout: &Layout) -> Result<BTreeMap<String, String>> {
    layout.checksums(&[layout.train_split(), layout.test_split(), layout.dataset_manifest()])
}

/// Train a bundle for each selected loss under `seed`.
pub fn train(cfg: &ExperimentConfig, seed: u64, loss: Option<Objective>) -> Result<()> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.experiment.output_dir);
    let dataset = layout.verified_dataset()?;
    let train_set = load_split(&layout.train_split())?;
    let test_set = load_split(&layout.test_split())?;
    for loss in selected(cfg, loss)? {
        let start = Instant::now();
        let dir = layout.run_dir(loss, seed);
        std::fs::create_dir_all(&dir)?;
        let head = match loss {
            Objective::Ce => HeadKind::Classification,
            _ => HeadKind::Projection {
                hidden: cfg.model.projection_hidden,
                dim: cfg.model.projection_dim,
            },
        };
        let mut bundle = ModelBundle::new(
            format!("{}-seed{seed}", loss.name()),
            cfg.model.backbone.clone(),
            head,
            cfg.classes(),
            seed,
        )?;
        let log = crate::model::train(&mut bundle, &train_set, &dataset.stats, loss, &cfg.train_config(loss, seed))?;
        let model = dir.join("model.camb");
        bundle.save(&model)?;
        let log_path = dir.join("train_log.csv");
        write(&log_path, log.to_csv())?;
        let mut outputs = vec![model.clone(), model.with_extension("json"), log_path];
        if loss == Objective::Ce {
            outputs.push(write_accuracy(&dir, &bundle, loss, seed, &train_set, &test_set, &dataset.stats)?);
        }
        let mut manifest = RunManifest::new(cfg, loss, seed);
        manifest.record(
            Stage::Train,
            StageRecord {
                inputs: data_inputs(&layout)?,
                outputs: layout.checksums(&outputs)?,
                wall_clock_s: start.elapsed().as_secs_f64(),
                threads: 1,
            },
        );
        manifest.save(&dir)?;
        log::info!("train {loss} seed {seed}: {:.1}s", start.elapsed().as_secs_f64());
    }
    Ok(())
}

fn write_accuracy(
    dir: &std::path::Path,
    bundle: &ModelBundle,
    loss: Objective,
    seed: u64,
    train_set: &[ImageSample],
    test_set: &[ImageSample],
    stats: &DatasetStats,
) -> Result<PathBuf> {
    let acc = RunAccuracy {
        loss,
        seed,
        classifier: if bundle.is_contrastive() { "probe" } else { "head" }.into(),
        test_accuracy: accuracy(bundle, test_set, stats)?,
        train_accuracy: accuracy(bundle, train_set, stats)?,
    };
    let path = dir.join("accuracy.json");
    write(&path, serde_json::to_string_pretty(&acc)?)?;
    Ok(path)
}

/// Fit the linear probe of each selected contrastive run; ce runs only
/// record the stage.
pub fn probe(cfg: &ExperimentConfig, seed: u64, loss: Option<Objective>) -> Result<()> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.experiment.output_dir);
    let dataset = layout.verified_dataset()?;
    let mut splits = None;
    for loss in selected(cfg, loss)? {
        let start = Instant::now();
        let dir = layout.run_dir(loss, seed);
        let mut manifest = RunManifest::open(&layout, cfg, loss, seed, &[Stage::Train])?;
        let model = dir.join("model.camb");
        let mut outputs = Vec::new();
        if loss.is_contrastive() {
            if splits.is_none() {
                splits = Some((load_split(&layout.train_split())?, load_split(&layout.test_split())?));
            }
            let (train_set, test_set) = splits.as_ref().unwrap();
            let mut bundle = ModelBundle::load(&model)?;
            let features = pooled_features(&bundle, train_set, &dataset.stats)?;
            let labels: Vec<usize> = train_set.iter().map(|s| s.label).collect();
            let probe_cfg = ProbeConfig {
                seed: derive_seed(cfg.probe.seed, PROBE_STREAM, seed),
                ..cfg.probe.clone()
            };
            let params = train_probe(&bundle, &features, &labels, &probe_cfg)?;
            let path = dir.join("probe.camb");
            io::save_params(&path, &params)?;
            bundle.probe = Some(params);
            outputs.push(path);
            outputs.push(write_accuracy(&dir, &bundle, loss, seed, train_set, test_set, &dataset.stats)?);
        }
        manifest.record(
            Stage::Probe,
            StageRecord {
                inputs: layout.checksums(&[model])?,
                outputs: layout.checksums(&outputs)?,
                wall_clock_s: start.elapsed().as_secs_f64(),
                threads: 1,
            },
        );
        manifest.save(&dir)?;
    }
    Ok(())
}

fn load_bundle(dir: &std::path::Path) -> Result<ModelBundle> {
    let mut bundle = ModelBundle::load(&dir.join("model.camb"))?;
    if bundle.is_contrastive() {
        bundle.probe = Some(io::load_params(&dir.join("probe.camb"))?);
    }
    Ok(bundle)
}

/// Test samples that get explained.
fn eval_samples(cfg: &ExperimentConfig, test_set: Vec<ImageSample>) -> Vec<ImageSample> {
    let n = cfg.explain.samples.min(test_set.len());
    test_set.into_iter().take(n).collect()
}

fn explain_one(cfg: &ExperimentConfig, bundle: &ModelBundle, kind: ExplainerKind, image: &Tensor, class: Option<usize>) -> Result<Explanation> {
    match kind {
        ExplainerKind::GradCam => Ok(grad_cam(bundle, image, class)?.0),
        ExplainerKind::EigenCam => eigen_cam(bundle, image, cfg.explain.eigen_cam_mode),
    }
}

fn explain_paths(dir: &std::path::Path, kind: ExplainerKind) -> (PathBuf, PathBuf) {
    let base = dir.join("explain").join(kind.name());
    (base.with_extension("camb"), base.with_extension("json"))
}

/// Saliency maps of the leading test samples for every configured explainer.
pub fn explain(cfg: &ExperimentConfig, seed: u64, loss: Option<Objective>, opts: RunOptions) -> Result<()> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.experiment.output_dir);
    let dataset = layout.verified_dataset()?;
    let samples = eval_samples(cfg, load_split(&layout.test_split())?);
    let images = samples
        .iter()
        .map(|s| dataset.stats.normalize_image(&s.image))
        .collect::<Result<Vec<_>>>()?;
    let pool = opts.pool()?;
    for loss in selected(cfg, loss)? {
        let start = Instant::now();
        let dir = layout.run_dir(loss, seed);
        let mut manifest = RunManifest::open(&layout, cfg, loss, seed, &[Stage::Train, Stage::Probe])?;
        let bundle = load_bundle(&dir)?;
        std::fs::create_dir_all(dir.join("explain"))?;
        let mut outputs = Vec::new();
        for &kind in &cfg.explain.explainers {
            let maps: Vec<Explanation> = pool.install(|| {
                images
                    .par_iter()
                    .enumerate()
                    .map(|(i, x)| Ok(explain_one(cfg, &bundle, kind, x, None)?.with_sample(i)))
                    .collect::<Result<_>>()
            })?;
            let stacked = Tensor::stack(&maps.iter().map(|e| &e.saliency).collect::<Vec<_>>())?;
            let metas: Vec<&ExplanationMeta> = maps.iter().map(|e| &e.meta).collect();
            let (camb, json) = explain_paths(&dir, kind);
            io::save_tensor(&camb, &stacked)?;
            write(&json, serde_json::to_string_pretty(&metas)?)?;
            outputs.extend([camb, json]);
        }
        manifest.record(
            Stage::Explain,
            StageRecord {
                inputs: data_inputs(&layout)?,
                outputs: layout.checksums(&outputs)?,
                wall_clock_s: start.elapsed().as_secs_f64(),
                threads: opts.threads(),
            },
        );
        manifest.save(&dir)?;
        log::info!("explain {loss} seed {seed}: {:.1}s", start.elapsed().as_secs_f64());
    }
    Ok(())
}

fn load_explanations(dir: &std::path::Path, kind: ExplainerKind, n: usize) -> Result<(Tensor, Vec<ExplanationMeta>)> {
    let (camb, json) = explain_paths(dir, kind);
    let maps = io::load_tensor(&camb)?;
    let metas: Vec<ExplanationMeta> = serde_json::from_slice(&std::fs::read(&json)?)?;
    if maps.rank() != 3 || maps.shape()[0] != n || metas.len() != n {
        return Err(Error::Format(format!(
            "{}: {:?} maps with {} sidecar entries for {n} samples",
            camb.display(),
            maps.shape(),
            metas.len()
        )));
    }
    Ok((maps, metas))
}

struct Scores {
    record: SampleRecord,
    curve: Option<(Vec<f32>, Vec<f32>)>,
}

/// Score every stored explanation and write `metrics.csv` and `pf_curve.csv`.
pub fn evaluate(cfg: &ExperimentConfig, seed: u64, loss: Option<Objective>, opts: RunOptions) -> Result<MetricReport> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.experiment.output_dir);
    let dataset = layout.verified_dataset()?;
    let stats = &dataset.stats;
    let samples = eval_samples(cfg, load_split(&layout.test_split())?);
    let images = samples
        .iter()
        .map(|s| stats.normalize_image(&s.image))
        .collect::<Result<Vec<_>>>()?;
    let schedule = cfg.evaluate.removal();
    let baseline = schedule.baseline_values(&stats.mean, &stats.std);
    let wants = |m: MetricKind| cfg.evaluate.metrics.contains(&m);
    let pool = opts.pool()?;
    let mut all = MetricReport::default();

    for loss in selected(cfg, loss)? {
        let start = Instant::now();
        let dir = layout.run_dir(loss, seed);
        let mut manifest =
            RunManifest::open(&layout, cfg, loss, seed, &[Stage::Train, Stage::Probe, Stage::Explain])?;
        let bundle = load_bundle(&dir)?;
        let mut report = MetricReport::default();
        let mut curves = String::from("explainer,fraction,mean\n");
        let mut inputs = Vec::new();
        for &kind in &cfg.explain.explainers {
            let (maps, metas) = load_explanations(&dir, kind, samples.len())?;
            let (camb, json) = explain_paths(&dir, kind);
            inputs.extend([camb, json]);
            let scored: Vec<Scores> = pool.install(|| {
                (0..samples.len())
                    .into_par_iter()
                    .map(|i| {
                        let e = maps.outer(i);
                        let x = &images[i];
                        let class = match metas[i].class {
                            Some(c) => c,
                            None => predicted(&bundle, x)?,
                        };
                        let mut values = BTreeMap::new();
                        let mut flags = Vec::new();
                        let mut curve = None;
                        if wants(MetricKind::Pf) {
                            let pf = pixel_flipping(&bundle, x, e, class, &schedule, &baseline)?;
                            values.insert(MetricKind::Pf, pf.score);
                            if pf.flagged {
                                flags.push(MetricKind::Pf);
                            }
                            curve = Some((pf.fractions, pf.curve));
                        }
                        if let Some(mask) = &samples[i].mask {
                            if wants(MetricKind::Pg) {
                                if let Some(v) = pointing_game(e, mask)? {
                                    values.insert(MetricKind::Pg, v);
                                }
                            }
                            if wants(MetricKind::Al) {
                                if let Some(s) = attribution_localization(e, mask, cfg.evaluate.localization)? {
                                    values.insert(MetricKind::Al, s.value);
                                    if s.flagged {
                                        flags.push(MetricKind::Al);
                                    }
                                }
                            }
                        }
                        if wants(MetricKind::Continuity) {
                            let s = continuity(
                                |img| explain_one(cfg, &bundle, kind, img, Some(class)),
                                x,
                                cfg.evaluate.continuity_sigma,
                                derive_seed(seed, CONTINUITY_STREAM, i as u64),
                            )?;
                            values.insert(MetricKind::Continuity, s.value);
                            if s.flagged {
                                flags.push(MetricKind::Continuity);
                            }
                        }
                        if wants(MetricKind::Contrastivity) && kind == ExplainerKind::GradCam {
                            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, CONTRAST_STREAM, i as u64));
                            let (s, _) = contrastivity(
                                |c| explain_one(cfg, &bundle, kind, x, Some(c)),
                                class,
                                bundle.num_classes(),
                                &mut rng,
                            )?;
                            values.insert(MetricKind::Contrastivity, s.value);
                            if s.flagged {
                                flags.push(MetricKind::Contrastivity);
                            }
                        }
                        if wants(MetricKind::Complexity) {
                            if let Some(v) = complexity_entropy(e)? {
                                values.insert(MetricKind::Complexity, v);
                            }
                        }
                        if wants(MetricKind::Sparseness) {
                            if let Some(v) = sparseness_gini(e)? {
                                values.insert(MetricKind::Sparseness, v);
                            }
                        }
                        Ok(Scores {
                            record: SampleRecord {
                                seed,
                                loss,
                                explainer: kind,
                                sample_id: i,
                                values,
                                flags,
                            },
                            curve,
                        })
                    })
                    .collect::<Result<_>>()
            })?;
            curves.push_str(&mean_curve_csv(kind, &scored));
            report.records.extend(scored.into_iter().map(|s| s.record));
        }
        let metrics_path = dir.join("metrics.csv");
        let curve_path = dir.join("pf_curve.csv");
        write(&metrics_path, report.to_csv())?;
        write(&curve_path, curves)?;
        inputs.extend(data_inputs_paths(&layout));
        manifest.record(
            Stage::Evaluate,
            StageRecord {
                inputs: layout.checksums(&inputs)?,
                outputs: layout.checksums(&[metrics_path, curve_path])?,
                wall_clock_s: start.elapsed().as_secs_f64(),
                threads: opts.threads(),
            },
        );
        manifest.save(&dir)?;
        log::info!("evaluate {loss} seed {seed}: {:.1}s", start.elapsed().as_secs_f64());
        all.extend(report);
    }
    Ok(all)
}

fn data_inputs_paths(layout: &Layout) -> [PathBuf; 2] {
    [layout.test_split(), layout.dataset_manifest()]
}

fn predicted(bundle: &ModelBundle, image: &Tensor) -> Result<usize> {
    let x = Tensor::new(
        std::iter::once(1).chain(image.shape().iter().copied()).collect(),
        image.data().to_vec(),
    )?;
    let p = bundle.probabilities(&x)?;
    Ok(crate::metrics::raster_argmax(p.data()))
}

/// Per-step mean of the PF curves; every sample shares the same fractions.
fn mean_curve_csv(kind: ExplainerKind, scored: &[Scores]) -> String {
    let curves: Vec<&(Vec<f32>, Vec<f32>)> = scored.iter().filter_map(|s| s.curve.as_ref()).collect();
    let Some(first) = curves.first() else {
        return String::new();
    };
    let mut out = String::new();
    for (k, f) in first.0.iter().enumerate() {
        let mean = curves.iter().map(|c| c.1[k] as f64).sum::<f64>() / curves.len() as f64;
        out.push_str(&format!("{kind},{f},{mean:.8}\n"));
    }
    out
}
