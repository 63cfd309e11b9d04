//! Labelled image sets: the synthetic reference task and an optional
//! CIFAR-10 binary loader.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::Batch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub num_classes: usize,
    /// Flat `[c, h, w]` images.
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> (Batch, Vec<usize>) {
        let imgs: Vec<&[f64]> = indices.iter().map(|&i| self.images[i].as_slice()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Batch::from_images(&imgs, self.shape), labels)
    }

    /// Reads CIFAR-10 binary batch files (1 label byte + 3072 pixel bytes per
    /// record), averaging 2×2 blocks down to 16×16 and scaling to roughly
    /// zero mean.
    pub fn from_cifar10_binary(files: &[&Path], limit: Option<usize>) -> Result<Self> {
        const RECORD: usize = 1 + 3 * 32 * 32;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        'files: for &path in files {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            if bytes.len() % RECORD != 0 {
                return Err(Error::InvalidInput(format!(
                    "{} is not a CIFAR-10 binary batch ({} bytes)",
                    path.display(),
                    bytes.len()
                )));
            }
            for rec in bytes.chunks_exact(RECORD) {
                if limit.is_some_and(|l| labels.len() >= l) {
                    break 'files;
                }
                if rec[0] >= 10 {
                    return Err(Error::InvalidInput(format!(
                        "label {} out of range in {}",
                        rec[0],
                        path.display()
                    )));
                }
                let px = &rec[1..];
                let mut img = Vec::with_capacity(3 * 256);
                for ch in 0..3 {
                    for y in 0..16 {
                        for x in 0..16 {
                            let at = |dy: usize, dx: usize| {
                                px[ch * 1024 + (2 * y + dy) * 32 + 2 * x + dx] as f64
                            };
                            let mean = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
                            img.push((mean / 255.0 - 0.5) / 0.25);
                        }
                    }
                }
                images.push(img);
                labels.push(rec[0] as usize);
            }
        }
        Ok(Self {
            shape: [3, 16, 16],
            num_classes: 10,
            images,
            labels,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Procedurally generated classification task.
///
/// Each class owns a prototype drawn from the seed: a colored Gaussian blob
/// at a class-specific location and an oriented sinusoidal grating with its
/// own frequency and color. A sample jitters the blob position, scales both
/// components, randomizes the grating phase, drops in a clutter blob of random
/// color and position, and adds white noise. Labels cycle through the
/// classes, so every split is balanced up to one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub seed: u64,
    pub num_classes: usize,
    pub shape: [usize; 3],
    pub train_size: usize,
    pub test_size: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Peak amplitude of the clutter blob.
    pub clutter: f64,
}

struct Prototype {
    center: [f64; 2],
    blob_color: Vec<f64>,
    angle: f64,
    frequency: f64,
    grating_color: Vec<f64>,
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let v: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter()
        .map(|x| x / norm * (n as f64).sqrt())
        .collect()
}

fn blob(img: &mut [f64], shape: [usize; 3], center: [f64; 2], sigma: f64, color: &[f64], amp: f64) {
    let [c, h, w] = shape;
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f64 - center[0]).powi(2) + (x as f64 - center[1]).powi(2);
            let g = amp * (-d2 / (2.0 * sigma * sigma)).exp();
            for ch in 0..c {
                img[ch * h * w + y * w + x] += g * color[ch];
            }
        }
    }
}

impl SyntheticTask {
    /// The task used by the demo and the acceptance checks.
    pub fn reference() -> Self {
        Self {
            seed: 20_240_601,
            num_classes: 6,
            shape: [3, 16, 16],
            train_size: 1536,
            test_size: 768,
            noise: 1.3,
            clutter: 1.5,
        }
    }

    fn prototypes(&self) -> Vec<Prototype> {
        let [c, h, w] = self.shape;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(0);
        (0..self.num_classes)
            .map(|k| Prototype {
                center: [
                    rng.random_range(0.25..0.75) * h as f64,
                    rng.random_range(0.25..0.75) * w as f64,
                ],
                blob_color: unit_vector(&mut rng, c),
                angle: PI * (k as f64 + rng.random_range(-0.2..0.2)) / self.num_classes as f64,
                frequency: rng.random_range(1.5..3.5),
                grating_color: unit_vector(&mut rng, c),
            })
            .collect()
    }

    fn split(&self, stream: u64, size: usize, protos: &[Prototype]) -> Dataset {
        let [c, h, w] = self.shape;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let noise = Normal::new(0.0, self.noise.max(0.0)).expect("valid noise");
        let jitter = Normal::new(0.0, 1.5).expect("valid jitter");
        let mut images = Vec::with_capacity(size);
        let mut labels = Vec::with_capacity(size);
        for i in 0..size {
            let label = i % self.num_classes;
            let p = &protos[label];
            let mut img = vec![0.0; c * h * w];
            let center = [
                p.center[0] + jitter.sample(&mut rng),
                p.center[1] + jitter.sample(&mut rng),
            ];
            let amp = rng.random_range(0.6..1.2);
            blob(&mut img, self.shape, center, 2.5, &p.blob_color, amp);

            let phase = rng.random_range(0.0..2.0 * PI);
            let g_amp = rng.random_range(0.3..0.8);
            let (sin, cos) = p.angle.sin_cos();
            for y in 0..h {
                for x in 0..w {
                    let t = (x as f64 * cos + y as f64 * sin) / w as f64;
                    let v = g_amp * (2.0 * PI * p.frequency * t + phase).cos();
                    for ch in 0..c {
                        img[ch * h * w + y * w + x] += v * p.grating_color[ch];
                    }
                }
            }

            let clutter_center = [
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
            ];
            let clutter_color = unit_vector(&mut rng, c);
            let clutter_amp = rng.random_range(0.0..=self.clutter.max(0.0));
            blob(
                &mut img,
                self.shape,
                clutter_center,
                2.0,
                &clutter_color,
                clutter_amp,
            );

            for v in img.iter_mut() {
                *v += noise.sample(&mut rng);
            }
            images.push(img);
            labels.push(label);
        }
        Dataset {
            shape: self.shape,
            num_classes: self.num_classes,
            images,
            labels,
        }
    }

    pub fn generate(&self) -> Result<TaskData> {
        if self.num_classes < 2 || self.shape.contains(&0) || self.train_size == 0 {
            return Err(Error::InvalidInput(
                "synthetic task needs ≥ 2 classes, non-empty shape and training data".into(),
            ));
        }
        let protos = self.prototypes();
        Ok(TaskData {
            train: self.split(1, self.train_size, &protos),
            test: self.split(2, self.test_size, &protos),
        })
    }
}
