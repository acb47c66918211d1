//! Conv backbone, heads and the linear probe.

mod probe;
mod train;

pub use probe::{train_probe, ProbeConfig};
pub use train::{accuracy, clip_global_norm, pooled_features, train, EpochRecord, Objective, TrainConfig, TrainLog};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Classifier;
use crate::nn::{init, io, ParamSet, Tape, Tensor, Var};

/// Stages of 3x3 same-padded convolutions, each followed by ReLU, with a
/// max-pool after every stage whose stride is above 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub widths: Vec<usize>,
    pub convs_per_stage: usize,
    pub pool: Vec<usize>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            height: 32,
            width: 32,
            widths: vec![16, 32, 64],
            convs_per_stage: 2,
            pool: vec![2, 2, 2],
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.pool.len() || self.convs_per_stage == 0 {
            return Err(Error::Config(
                "backbone needs one pool stride per stage and at least one conv".into(),
            ));
        }
        if self.pool.contains(&0) || self.widths.contains(&0) {
            return Err(Error::Config("zero width or pool stride".into()));
        }
        let (h, w) = self.feature_size();
        if h < 2 || w < 2 {
            return Err(Error::Config(format!("feature map {h}x{w} is smaller than 2x2")));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// Spatial extent of the tap-point feature map.
    pub fn feature_size(&self) -> (usize, usize) {
        self.pool
            .iter()
            .fold((self.height, self.width), |(h, w), &p| (h / p, w / p))
    }

    fn conv_names(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for (s, &width) in self.widths.iter().enumerate() {
            for j in 0..self.convs_per_stage {
                out.push((format!("backbone.s{s}.c{j}"), c_in, width));
                c_in = width;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum HeadKind {
    /// Linear layer to class logits.
    Classification,
    /// fc-ReLU-fc to `dim`, then L2 normalization.
    Projection { hidden: usize, dim: usize },
}

impl HeadKind {
    pub fn projection_default(channels: usize) -> Self {
        HeadKind::Projection {
            hidden: channels,
            dim: 128,
        }
    }
}

/// Tap-point activations of one image, stored `[C, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(pub Tensor);

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    /// `value(i, j, l)` in the `h x w x C` indexing.
    pub fn at(&self, i: usize, j: usize, l: usize) -> f32 {
        self.0.data()[(l * self.height() + i) * self.width() + j]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BundleMeta {
    id: String,
    spec: BackboneSpec,
    head: HeadKind,
    classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub id: String,
    pub spec: BackboneSpec,
    pub head: HeadKind,
    pub classes: usize,
    /// Backbone and head (or projection) parameters, in training order.
    pub params: ParamSet,
    /// Linear classifier on pooled features; only contrastive bundles get one.
    pub probe: Option<ParamSet>,
}

/// Parameters placed on a tape, looked up by name.
pub(crate) struct Bound {
    names: Vec<String>,
    pub(crate) vars: Vec<Var>,
}

impl Bound {
    pub(crate) fn new(tape: &mut Tape, params: &ParamSet, trainable: bool) -> Self {
        let mut names = Vec::with_capacity(params.len());
        let mut vars = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            names.push(name.to_string());
            vars.push(if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            });
        }
        Self { names, vars }
    }

    pub(crate) fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::contract(format!("parameter {name} is not bound")))
    }
}

impl ModelBundle {
    /// Kaiming-uniform weights and zero biases from `seed`.
    pub fn new(id: impl Into<String>, spec: BackboneSpec, head: HeadKind, classes: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, c_in, c_out) in spec.conv_names() {
            let fan_in = c_in * 9;
            params.insert(format!("{name}.w"), init::kaiming_uniform(&[c_out, c_in, 3, 3], fan_in, &mut rng));
            params.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
        }
        let c = spec.channels();
        match head {
            HeadKind::Classification => {
                params.insert("head.w", linear_init(classes, c, &mut rng));
                params.insert("head.b", Tensor::zeros(&[classes]));
            }
            HeadKind::Projection { hidden, dim } => {
                if hidden == 0 || dim == 0 {
                    return Err(Error::Config("projection widths must be positive".into()));
                }
                params.insert("proj.fc1.w", init::kaiming_uniform(&[hidden, c], c, &mut rng));
                params.insert("proj.fc1.b", Tensor::zeros(&[hidden]));
                params.insert("proj.fc2.w", linear_init(dim, hidden, &mut rng));
                params.insert("proj.fc2.b", Tensor::zeros(&[dim]));
            }
        }
        Ok(Self {
            id: id.into(),
            spec,
            head,
            classes,
            params,
            probe: None,
        })
    }

    pub fn is_contrastive(&self) -> bool {
        matches!(self.head, HeadKind::Projection { .. })
    }

    /// SHA-256 of the backbone parameters alone.
    pub fn backbone_checksum(&self) -> String {
        self.params.with_prefix("backbone.").checksum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = &self.spec;
        if x.rank() != 4 || x.shape()[1..] != [s.in_channels, s.height, s.width] {
            return Err(Error::dim(format!(
                "input {:?}, backbone expects [n, {}, {}, {}]",
                x.shape(),
                s.in_channels,
                s.height,
                s.width
            )));
        }
        Ok(())
    }

    /// Backbone on a tape; returns the `[n, C, h, w]` tap point.
    pub(crate) fn backbone_on(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let mut h = x;
        for (s, &pool) in self.spec.pool.iter().enumerate() {
            for j in 0..self.spec.convs_per_stage {
                let name = format!("backbone.s{s}.c{j}");
                let w = bound.get(&format!("{name}.w"))?;
                let b = bound.get(&format!("{name}.b"))?;
                h = tape.conv2d(h, w, Some(b), 1, 1)?;
                h = tape.relu(h)?;
            }
            if pool > 1 {
                h = tape.max_pool2d(h, pool)?;
            }
        }
        Ok(h)
    }

    /// Class logits from `[n, C]` pooled features: the classification head,
    /// or the probe for contrastive bundles.
    pub(crate) fn logits_on(&self, tape: &mut Tape, bound: Option<&Bound>, pooled: Var) -> Result<Var> {
        match (self.head, bound) {
            (HeadKind::Classification, Some(b)) => {
                let (w, bias) = (b.get("head.w")?, b.get("head.b")?);
                tape.linear(pooled, w, Some(bias))
            }
            (HeadKind::Classification, None) => {
                let w = tape.constant(self.params.get("head.w")?.clone());
                let bias = tape.constant(self.params.get("head.b")?.clone());
                tape.linear(pooled, w, Some(bias))
            }
            (HeadKind::Projection { .. }, _) => {
                let probe = self.probe.as_ref().ok_or(Error::MissingProbe)?;
                let w = tape.constant(probe.get("probe.w")?.clone());
                let bias = tape.constant(probe.get("probe.b")?.clone());
                tape.linear(pooled, w, Some(bias))
            }
        }
    }

    /// Unit-norm projections from `[n, C]` pooled features.
    pub(crate) fn project_on(&self, tape: &mut Tape, bound: &Bound, pooled: Var) -> Result<Var> {
        if !self.is_contrastive() {
            return Err(Error::contract("bundle has no projection head"));
        }
        let h = tape.linear(pooled, bound.get("proj.fc1.w")?, Some(bound.get("proj.fc1.b")?))?;
        let h = tape.relu(h)?;
        let z = tape.linear(h, bound.get("proj.fc2.w")?, Some(bound.get("proj.fc2.b")?))?;
        tape.l2_normalize(z)
    }

    /// Tap-point activations for a batch `[n, c, H, W]`, no gradients recorded.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &self.params.with_prefix("backbone."), false);
        let x = tape.constant(images.clone());
        let a = self.backbone_on(&mut tape, &bound, x)?;
        Ok(tape.value(a).clone())
    }

    /// Feature map of a single `[c, H, W]` image.
    pub fn forward_features(&self, image: &Tensor) -> Result<FeatureMap> {
        let batch = Tensor::stack(&[image])?;
        let a = self.features(&batch)?;
        let shape = a.shape()[1..].to_vec();
        Ok(FeatureMap(a.reshape(&shape)?))
    }

    /// Class probabilities for one pooled feature vector.
    pub fn classify(&self, pooled: &[f32]) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![1, pooled.len()], pooled.to_vec())?);
        let logits = self.logits_on(&mut tape, None, p)?;
        let probs = tape.softmax(logits)?;
        Ok(tape.value(probs).data().to_vec())
    }

    /// Unit-norm embedding for one pooled feature vector.
    pub fn project(&self, pooled: &[f32]) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &self.params.with_prefix("proj."), false);
        let p = tape.constant(Tensor::new(vec![1, pooled.len()], pooled.to_vec())?);
        let z = self.project_on(&mut tape, &bound, p)?;
        Ok(tape.value(z).data().to_vec())
    }

    /// Params plus a JSON sidecar at `path` with a `.json` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        io::save_params(path, &self.params)?;
        let meta = BundleMeta {
            id: self.id.clone(),
            spec: self.spec.clone(),
            head: self.head,
            classes: self.classes,
        };
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: BundleMeta = serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)?;
        let reference = Self::new(meta.id.clone(), meta.spec.clone(), meta.head, meta.classes, 0)?;
        let params = io::load_params(path)?;
        let layout = |p: &ParamSet| p.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect::<Vec<_>>();
        if layout(&params) != layout(&reference.params) {
            return Err(Error::Format(format!("{}: parameters do not match the bundle layout", path.display())));
        }
        Ok(Self {
            params,
            ..reference
        })
    }
}

impl Classifier for ModelBundle {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn probabilities(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &self.params, false);
        let x = tape.constant(images.clone());
        let a = self.backbone_on(&mut tape, &bound, x)?;
        let pooled = tape.global_avg_pool(a)?;
        let logits = self.logits_on(&mut tape, Some(&bound).filter(|_| !self.is_contrastive()), pooled)?;
        let probs = tape.softmax(logits)?;
        Ok(tape.value(probs).clone())
    }
}

/// Uniform in `±1/sqrt(fan_in)`, the usual default for a final linear layer.
fn linear_init(out: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    init::kaiming_uniform(&[out, fan_in], fan_in, rng).map(|v| v / 6f32.sqrt())
}
