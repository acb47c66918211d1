//! Procedural shapes on textured backgrounds, each with its exact mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, ImageSample};
use crate::error::{Error, Result};
use crate::metrics::SegmentationMask;
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
    ];

    /// Whether the point `(dx, dy)` relative to the centre lies inside a shape
    /// of extent `r` (every shape fits in the disk of radius `r`).
    pub fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => {
                let s = r * std::f32::consts::FRAC_1_SQRT_2;
                dx.abs() <= s && dy.abs() <= s
            }
            ShapeKind::Triangle => {
                // vertices on the circle at -90, 30 and 150 degrees
                let (c, s) = (r * 0.866_025_4, r * 0.5);
                let v = [(0.0, -r), (c, s), (-c, s)];
                let edge = |(ax, ay): (f32, f32), (bx, by): (f32, f32)| (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
                let e = [edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])];
                e.iter().all(|&x| x >= 0.0) || e.iter().all(|&x| x <= 0.0)
            }
            ShapeKind::Cross => {
                let w = r / 3.0;
                let s = r * std::f32::consts::FRAC_1_SQRT_2;
                (dx.abs() <= w && dy.abs() <= s) || (dy.abs() <= w && dx.abs() <= s)
            }
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapesSpec {
    pub classes: Vec<ShapeKind>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Total samples per class before the train/test split.
    pub samples_per_class: usize,
    pub test_fraction: f32,
    /// Std-dev of the per-pixel texture noise.
    pub noise: f32,
    /// Shape extent (circumscribed radius) range, in pixels.
    pub radius_min: f32,
    pub radius_max: f32,
    pub seed: u64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        Self {
            classes: ShapeKind::ALL.to_vec(),
            channels: 3,
            height: 32,
            width: 32,
            samples_per_class: 400,
            test_fraction: 0.2,
            noise: 0.08,
            radius_min: 7.0,
            radius_max: 11.0,
            seed: 0,
        }
    }
}

impl ShapesSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.channels == 0 {
            return Err(Error::Spec("need at least one class and one channel".into()));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(Error::Spec(format!(
                "radius range [{}, {}] is empty",
                self.radius_min, self.radius_max
            )));
        }
        // one pixel of margin on each side keeps the shape strictly inside
        let extent = 2.0 * self.radius_max + 2.0;
        if extent > self.height.min(self.width) as f32 {
            return Err(Error::Spec(format!(
                "shape extent {extent} exceeds the {}x{} frame",
                self.height, self.width
            )));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || self.noise < 0.0 {
            return Err(Error::Spec("test_fraction must be in [0,1) and noise >= 0".into()));
        }
        if self.test_count_per_class() == 0 || self.samples_per_class <= self.test_count_per_class() {
            return Err(Error::Spec("split leaves an empty train or test set".into()));
        }
        Ok(())
    }

    pub fn test_count_per_class(&self) -> usize {
        (self.samples_per_class as f32 * self.test_fraction).round() as usize
    }

    pub fn train_count_per_class(&self) -> usize {
        self.samples_per_class - self.test_count_per_class()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

const TRAIN_STREAM: u64 = 0x7472_6169_6e00;
const TEST_STREAM: u64 = 0x7465_7374_0000;

/// Parameters of one drawn sample, exposed for geometric checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub kind: ShapeKind,
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
}

impl Placement {
    /// Pixel `(y, x)` is inside when its centre is.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        self.kind.contains(x as f32 + 0.5 - self.cx, y as f32 + 0.5 - self.cy, self.radius)
    }
}

pub fn generate_shapes(spec: &ShapesSpec) -> Result<Dataset> {
    spec.validate()?;
    let split = |stream: u64, per_class: usize| -> Vec<ImageSample> {
        let total = per_class * spec.classes.len();
        (0..total)
            .map(|i| draw_sample(spec, i % spec.classes.len(), derive_seed(spec.seed, stream, i as u64)).0)
            .collect()
    };
    Ok(Dataset {
        train: split(TRAIN_STREAM, spec.train_count_per_class()),
        test: split(TEST_STREAM, spec.test_count_per_class()),
    })
}

/// Draw one sample of class `label` from its own seed.
pub fn draw_sample(spec: &ShapesSpec, label: usize, seed: u64) -> (ImageSample, Placement) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let kind = spec.classes[label];
    let radius = rng.random_range(spec.radius_min..=spec.radius_max);
    let cx = rng.random_range(radius + 1.0..=w as f32 - radius - 1.0);
    let cy = rng.random_range(radius + 1.0..=h as f32 - radius - 1.0);
    let placement = Placement { kind, cx, cy, radius };

    // dark background, bright shape: hue varies, contrast polarity does not
    let background: Vec<f32> = (0..c).map(|_| rng.random_range(0.0..0.45)).collect();
    let foreground: Vec<f32> = (0..c).map(|_| rng.random_range(0.55..1.0)).collect();
    let mask = SegmentationMask::from_fn(h, w, |y, x| placement.covers(y, x));
    let noise = Normal::new(0.0f32, spec.noise.max(f32::MIN_POSITIVE)).expect("valid std");
    let mut data = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let base = if mask.get(y, x) { foreground[ch] } else { background[ch] };
                let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data[(ch * h + y) * w + x] = (base + n).clamp(0.0, 1.0);
            }
        }
    }
    let image = Tensor::new(vec![c, h, w], data).expect("sized above");
    (
        ImageSample {
            image,
            label,
            mask: Some(mask),
        },
        placement,
    )
}
