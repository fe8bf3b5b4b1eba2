//! Datasets, batching and mixup.

mod batch;
mod cifar;
mod mixup;
mod synth;

pub use batch::{pad_crop, Batches};
pub use cifar::{
    cifar_files, load_cifar10, load_cifar10_with, read_cifar_file, write_cifar_file, RawImages, CIFAR_RECORD,
    CIFAR_RECORDS_PER_FILE,
};
pub use mixup::{mixup_batch, mixup_with, one_hot, MixedBatch, MixupConfig};
pub use synth::{synth_dataset, synth_splits, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Statistics over `n×c×plane` row-major pixels.
    pub fn fit(pixels: &[f32], channels: usize, plane: usize) -> Self {
        let mut sums = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        for (i, &v) in pixels.iter().enumerate() {
            let c = (i / plane) % channels;
            sums[c] += v as f64;
            sq[c] += v as f64 * v as f64;
        }
        let count = (pixels.len() / channels).max(1) as f64;
        let mean: Vec<f64> = sums.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        Normalization { mean, std }
    }

    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn apply(&self, pixels: &mut [f32], plane: usize) {
        let c = self.mean.len();
        for (i, v) in pixels.iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = ((*v as f64 - self.mean[ch]) / self.std[ch]) as f32;
        }
    }
}

/// Images and labels held in memory, already standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n·c·h·w` row-major.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub image_shape: [usize; 3],
    pub classes: usize,
    pub split: Split,
    pub norm: Normalization,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        image_shape: [usize; 3],
        classes: usize,
        split: Split,
        norm: Normalization,
    ) -> Result<Self> {
        let per = image_shape.iter().product::<usize>();
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Data(format!(
                "{} pixel values do not make {} images of {:?}",
                images.len(),
                labels.len(),
                image_shape
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(Dataset {
            images,
            labels,
            image_shape,
            classes,
            split,
            norm,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the listed samples into an `n×c×h×w` tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("sample index {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.image_shape;
        Ok((Tensor::new(&[indices.len(), c, h, w], data)?, labels))
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone_meta()
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            image_shape: self.image_shape,
            classes: self.classes,
            split: self.split,
            norm: self.norm.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_standardizes_each_channel() {
        // Two images, two channels, plane of two pixels.
        let px = [0.0, 2.0, 10.0, 10.0, 4.0, 6.0, 30.0, 30.0];
        let norm = Normalization::fit(&px, 2, 2);
        assert_eq!(norm.mean, vec![3.0, 20.0]);
        let mut out = px.to_vec();
        norm.apply(&mut out, 2);
        let ch0 = [out[0], out[1], out[4], out[5]];
        let m: f32 = ch0.iter().sum::<f32>() / 4.0;
        let v: f32 = ch0.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / 4.0;
        assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_labels_and_lengths() {
        let norm = Normalization::identity(1);
        assert!(Dataset::new(vec![0.0; 4], vec![0, 2], [1, 1, 2], 2, Split::Train, norm.clone()).is_err());
        assert!(Dataset::new(vec![0.0; 3], vec![0, 1], [1, 1, 2], 2, Split::Train, norm).is_err());
    }
}
