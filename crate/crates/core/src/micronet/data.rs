//! Seeded synthetic image classification data.
//!
//! Each class owns a random `3×8×8` template; samples are the template
//! upsampled (nearest neighbour) to `3×16×16` plus Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::TensorShape;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { seed: 0, n_classes: 10, n_train: 5000, n_test: 1000, noise: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, idx: usize) -> &[f64] {
        let n = SynthDataset::SAMPLE_SHAPE.numel();
        &self.images[idx * n..(idx + 1) * n]
    }

    /// First `n` samples, used for quick checks.
    pub fn head(&self, n: usize) -> Split {
        let n = n.min(self.len());
        let numel = SynthDataset::SAMPLE_SHAPE.numel();
        Split { images: self.images[..n * numel].to_vec(), labels: self.labels[..n].to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: DatasetConfig,
    pub templates: Vec<Vec<f64>>,
    pub train: Split,
    pub test: Split,
}

const TEMPLATE_SIDE: usize = 8;
const CHANNELS: usize = 3;

impl SynthDataset {
    pub const SAMPLE_SHAPE: TensorShape = TensorShape { channels: 3, height: 16, width: 16 };

    pub fn generate(config: DatasetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let templates: Vec<Vec<f64>> = (0..config.n_classes)
            .map(|_| {
                (0..CHANNELS * TEMPLATE_SIDE * TEMPLATE_SIDE)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect();
        let train = Self::sample_split(&templates, config.n_train, config.noise, &mut rng);
        let test = Self::sample_split(&templates, config.n_test, config.noise, &mut rng);
        Self { config, templates, train, test }
    }

    fn sample_split(templates: &[Vec<f64>], n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Split {
        let shape = Self::SAMPLE_SHAPE;
        let scale = shape.height / TEMPLATE_SIDE;
        let mut labels: Vec<usize> = (0..n).map(|i| i % templates.len()).collect();
        // Fisher-Yates over labels keeps the split balanced.
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            labels.swap(i, j);
        }
        let mut images = Vec::with_capacity(n * shape.numel());
        for &label in &labels {
            let t = &templates[label];
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        let base = t[(c * TEMPLATE_SIDE + y / scale) * TEMPLATE_SIDE + x / scale];
                        let eps: f64 = StandardNormal.sample(rng);
                        images.push(base + noise * eps);
                    }
                }
            }
        }
        Split { images, labels }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig { n_train: 200, n_test: 50, ..Default::default() }
    }

    #[test]
    fn reproducible_from_seed() {
        assert_eq!(SynthDataset::generate(small()), SynthDataset::generate(small()));
        let other = SynthDataset::generate(DatasetConfig { seed: 1, ..small() });
        assert_ne!(other.train.images, SynthDataset::generate(small()).train.images);
    }

    #[test]
    fn splits_are_balanced() {
        let d = SynthDataset::generate(small());
        for split in [&d.train, &d.test] {
            let mut counts = [0usize; 10];
            for &l in &split.labels {
                counts[l] += 1;
            }
            assert!(counts.iter().all(|&c| c == split.len() / 10));
            assert_eq!(split.images.len(), split.len() * 768);
        }
    }
}
