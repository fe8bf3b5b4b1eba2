use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Normalization, Split};
use crate::error::{Error, Result};

/// Class-conditional images: each class owns a blob position, a stripe
/// orientation and frequency, and a colour signature. Difficulty comes from
/// positional jitter, pixel noise and distractor blobs borrowed from other
/// classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub channels: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Maximum blob displacement in pixels.
    pub jitter: f64,
    pub stripe_amp: f64,
    /// Weaker blobs of random other classes added to each image.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            per_class: 100,
            test_per_class: 50,
            size: 16,
            channels: 3,
            noise: 0.4,
            jitter: 3.0,
            stripe_amp: 0.5,
            distractors: 2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Noise-free, jitter-free, no distractors.
    pub fn separable(classes: usize, per_class: usize) -> Self {
        SynthSpec {
            classes,
            per_class,
            test_per_class: per_class,
            noise: 0.0,
            jitter: 0.0,
            distractors: 0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("synthetic data needs at least 2 classes, got {}", self.classes)));
        }
        if self.per_class == 0 || self.test_per_class == 0 || self.channels == 0 {
            return Err(Error::Config("synthetic sample counts and channels must be positive".into()));
        }
        if self.size < 4 || self.size % 4 != 0 {
            return Err(Error::Config(format!("synthetic image size must be a multiple of 4, got {}", self.size)));
        }
        if !(self.noise >= 0.0 && self.jitter >= 0.0 && self.stripe_amp >= 0.0) {
            return Err(Error::Config("synthetic noise, jitter and stripe amplitude must be non-negative".into()));
        }
        Ok(())
    }
}

struct Prototype {
    center: (f64, f64),
    angle: f64,
    freq: f64,
    blob_color: Vec<f64>,
    stripe_color: Vec<f64>,
}

fn prototypes(spec: &SynthSpec) -> Vec<Prototype> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let s = spec.size as f64;
    (0..spec.classes)
        .map(|k| {
            // Centres spread on a ring so classes are spatially distinct.
            let phi = std::f64::consts::TAU * k as f64 / spec.classes as f64;
            let r = s * rng.random_range(0.18..0.3);
            Prototype {
                center: (s / 2.0 + r * phi.sin(), s / 2.0 + r * phi.cos()),
                angle: std::f64::consts::PI * k as f64 / spec.classes as f64,
                freq: rng.random_range(0.15..0.45),
                blob_color: (0..spec.channels).map(|_| rng.random_range(0.3..1.0)).collect(),
                stripe_color: (0..spec.channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
            }
        })
        .collect()
}

fn render(spec: &SynthSpec, protos: &[Prototype], class: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
    let n = spec.size;
    let sigma = n as f64 / 8.0;
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut blobs = vec![(class, rng.random_range(0.7..1.0))];
    for _ in 0..spec.distractors {
        let other = (class + rng.random_range(1..spec.classes)) % spec.classes;
        blobs.push((other, rng.random_range(0.2..0.5)));
    }
    let placed: Vec<(f64, f64, f64, usize)> = blobs
        .iter()
        .map(|&(k, amp)| {
            let (cy, cx) = protos[k].center;
            let dy = spec.jitter * rng.random_range(-1.0..=1.0);
            let dx = spec.jitter * rng.random_range(-1.0..=1.0);
            (cy + dy, cx + dx, amp, k)
        })
        .collect();
    let p = &protos[class];
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let stripe_amp = spec.stripe_amp * rng.random_range(0.5..1.0);
    let (sa, ca) = p.angle.sin_cos();
    for c in 0..spec.channels {
        for y in 0..n {
            for x in 0..n {
                let (fy, fx) = (y as f64, x as f64);
                let mut v = 0.0;
                for &(cy, cx, amp, k) in &placed {
                    let d2 = (fy - cy).powi(2) + (fx - cx).powi(2);
                    v += amp * protos[k].blob_color[c] * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                let t = (fx * ca + fy * sa) * p.freq * std::f64::consts::TAU + phase;
                v += stripe_amp * p.stripe_color[c] * t.sin();
                if spec.noise > 0.0 {
                    v += noise.sample(rng);
                }
                out.push(v as f32);
            }
        }
    }
}

fn raw_split(spec: &SynthSpec, split: Split) -> (Vec<f32>, Vec<usize>) {
    let protos = prototypes(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (stream, per) = match split {
        Split::Train => (1, spec.per_class),
        Split::Test => (2, spec.test_per_class),
    };
    rng.set_stream(stream);
    let total = per * spec.classes;
    let mut images = Vec::with_capacity(total * spec.channels * spec.size * spec.size);
    // Interleaved class order so any prefix is balanced.
    let labels: Vec<usize> = (0..total).map(|i| i % spec.classes).collect();
    for &y in &labels {
        render(spec, &protos, y, &mut rng, &mut images);
    }
    (images, labels)
}

/// One split, standardized with statistics of the train split.
pub fn synth_dataset(spec: &SynthSpec, split: Split) -> Result<Dataset> {
    let (train, test) = synth_splits(spec)?;
    Ok(match split {
        Split::Train => train,
        Split::Test => test,
    })
}

pub fn synth_splits(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let shape = [spec.channels, spec.size, spec.size];
    let plane = spec.size * spec.size;
    let (mut train_px, train_y) = raw_split(spec, Split::Train);
    let (mut test_px, test_y) = raw_split(spec, Split::Test);
    let norm = Normalization::fit(&train_px, spec.channels, plane);
    norm.apply(&mut train_px, plane);
    norm.apply(&mut test_px, plane);
    Ok((
        Dataset::new(train_px, train_y, shape, spec.classes, Split::Train, norm.clone())?,
        Dataset::new(test_px, test_y, shape, spec.classes, Split::Test, norm)?,
    ))
}
