use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::layers::{self, Batch, Conv, Fc};
use crate::accounting::{self, ArchDescriptor, ConvSpec, FcSpec, LayerSpec};
use crate::error::{Error, Result};
use crate::scoring::PruneMask;
use crate::tensor_io::{write_feature_maps, Dtype, DumpManifest, FeatureMapSet, LayerEntry};

/// Layer recipe used to build a [`MicroNet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerDef {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    MaxPool,
    Fc {
        out_features: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv),
    Relu,
    MaxPool,
    Fc(Fc),
}

/// Small sequential conv net. Conv layers are named `conv1, conv2, …` and
/// FC layers `fc1, fc2, …`.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroNet {
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
    pub seed: u64,
}

enum Cache {
    Conv {
        cols: DMatrix<f64>,
        in_h: usize,
        in_w: usize,
    },
    Relu {
        out: Batch,
    },
    Pool {
        arg: Vec<usize>,
        in_h: usize,
        in_w: usize,
    },
    Fc {
        flat: DMatrix<f64>,
        in_shape: [usize; 3],
    },
}

/// Per-layer `(weight, bias)` gradients; `None` for parameter-free layers.
pub type Grads = Vec<Option<(DMatrix<f64>, DVector<f64>)>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Shuffling seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl MicroNet {
    /// He-normal weights and zero biases, drawn from `seed`.
    pub fn new(input_shape: [usize; 3], defs: &[LayerDef], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [mut c, mut h, mut w] = input_shape;
        let mut flat: Option<usize> = None;
        let (mut n_conv, mut n_fc) = (0, 0);
        let mut layers = Vec::with_capacity(defs.len());
        let bad = |msg: String| Error::InvalidInput(format!("layer {msg}"));
        for (i, def) in defs.iter().enumerate() {
            layers.push(match *def {
                LayerDef::Conv {
                    out_channels,
                    kernel,
                    stride,
                } => {
                    if flat.is_some() {
                        return Err(bad(format!("{i}: conv after fc")));
                    }
                    if out_channels == 0 || kernel % 2 == 0 || stride == 0 {
                        return Err(bad(format!(
                            "{i}: conv needs odd kernel, positive width and stride"
                        )));
                    }
                    n_conv += 1;
                    let fan_in = c * kernel * kernel;
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    let conv = Conv {
                        id: format!("conv{n_conv}"),
                        in_channels: c,
                        out_channels,
                        kernel,
                        stride,
                        weight: DMatrix::from_fn(out_channels, fan_in, |_, _| {
                            normal.sample(&mut rng)
                        }),
                        bias: DVector::zeros(out_channels),
                    };
                    (c, h, w) = (out_channels, conv.output_dim(h), conv.output_dim(w));
                    Layer::Conv(conv)
                }
                LayerDef::Relu => Layer::Relu,
                LayerDef::MaxPool => {
                    if flat.is_some() || h % 2 != 0 || w % 2 != 0 {
                        return Err(bad(format!("{i}: max pooling needs an even spatial map")));
                    }
                    (h, w) = (h / 2, w / 2);
                    Layer::MaxPool
                }
                LayerDef::Fc { out_features } => {
                    n_fc += 1;
                    let in_features = flat.unwrap_or(c * h * w);
                    let normal =
                        Normal::new(0.0, (2.0 / in_features as f64).sqrt()).expect("valid std");
                    flat = Some(out_features);
                    Layer::Fc(Fc {
                        id: format!("fc{n_fc}"),
                        in_features,
                        out_features,
                        weight: DMatrix::from_fn(out_features, in_features, |_, _| {
                            normal.sample(&mut rng)
                        }),
                        bias: DVector::zeros(out_features),
                    })
                }
            });
        }
        if !matches!(layers.last(), Some(Layer::Fc(_))) {
            return Err(bad("stack must end with an fc layer".into()));
        }
        Ok(Self {
            input_shape,
            layers,
            seed,
        })
    }

    /// Three conv/ReLU stages (16, 32, 32 filters, pooling after the first
    /// two) and a linear classifier, for 3×16×16 inputs.
    pub fn reference(num_classes: usize, seed: u64) -> Result<Self> {
        use LayerDef::*;
        let conv = |out_channels| Conv {
            out_channels,
            kernel: 3,
            stride: 1,
        };
        Self::new(
            [3, 16, 16],
            &[
                conv(16),
                Relu,
                MaxPool,
                conv(32),
                Relu,
                MaxPool,
                conv(32),
                Relu,
                Fc {
                    out_features: num_classes,
                },
            ],
            seed,
        )
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn conv(&self, id: &str) -> Option<&Conv> {
        self.convs().find(|c| c.id == id)
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Fc(f)) => f.out_features,
            _ => unreachable!("constructed nets end with fc"),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.weight.len() + c.bias.len(),
                Layer::Fc(f) => f.weight.len() + f.bias.len(),
                _ => 0,
            })
            .sum()
    }

    /// Output shape `[c, h, w]` after each layer.
    pub fn shapes(&self) -> Vec<[usize; 3]> {
        let mut s = self.input_shape;
        self.layers
            .iter()
            .map(|l| {
                s = match l {
                    Layer::Conv(c) => [c.out_channels, c.output_dim(s[1]), c.output_dim(s[2])],
                    Layer::Relu => s,
                    Layer::MaxPool => [s[0], s[1] / 2, s[2] / 2],
                    Layer::Fc(f) => [f.out_features, 1, 1],
                };
                s
            })
            .collect()
    }

    pub fn forward(&self, x: &Batch) -> Batch {
        let mut a = x.clone();
        for layer in &self.layers {
            a = match layer {
                Layer::Conv(c) => c.forward(&a).0,
                Layer::Relu => layers::relu(&a),
                Layer::MaxPool => layers::maxpool(&a).0,
                Layer::Fc(f) => f.forward(&a).0,
            };
        }
        a
    }

    fn forward_cached(&self, x: &Batch) -> (Batch, Vec<Cache>) {
        let mut a = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (in_h, in_w) = (a.h, a.w);
            let (out, cache) = match layer {
                Layer::Conv(c) => {
                    let (y, cols) = c.forward(&a);
                    (y, Cache::Conv { cols, in_h, in_w })
                }
                Layer::Relu => {
                    let y = layers::relu(&a);
                    (y.clone(), Cache::Relu { out: y })
                }
                Layer::MaxPool => {
                    let (y, arg) = layers::maxpool(&a);
                    (y, Cache::Pool { arg, in_h, in_w })
                }
                Layer::Fc(f) => {
                    let in_shape = [a.channels(), in_h, in_w];
                    let (y, flat) = f.forward(&a);
                    (y, Cache::Fc { flat, in_shape })
                }
            };
            caches.push(cache);
            a = out;
        }
        (a, caches)
    }

    /// Mean cross-entropy on a batch and the gradients of every parameter.
    pub fn loss_and_grads(&self, x: &Batch, labels: &[usize]) -> (f64, Grads) {
        let (logits, caches) = self.forward_cached(x);
        let (loss, mut dy) = layers::softmax_cross_entropy(&logits, labels);
        let mut grads: Grads = vec![None; self.layers.len()];
        for (i, (layer, cache)) in self.layers.iter().zip(&caches).enumerate().rev() {
            dy = match (layer, cache) {
                (Layer::Conv(c), Cache::Conv { cols, in_h, in_w }) => {
                    let (dw, db, dx) = c.backward(cols, &dy, *in_h, *in_w);
                    grads[i] = Some((dw, db));
                    dx
                }
                (Layer::Relu, Cache::Relu { out }) => layers::relu_backward(out, &dy),
                (Layer::MaxPool, Cache::Pool { arg, in_h, in_w }) => {
                    layers::maxpool_backward(arg, &dy, *in_h, *in_w)
                }
                (Layer::Fc(f), Cache::Fc { flat, in_shape }) => {
                    let (dw, db, dx) = f.backward(flat, &dy, *in_shape);
                    grads[i] = Some((dw, db));
                    dx
                }
                _ => unreachable!("cache matches layer"),
            };
        }
        (loss, grads)
    }

    pub fn loss(&self, x: &Batch, labels: &[usize]) -> f64 {
        layers::softmax_cross_entropy(&self.forward(x), labels).0
    }

    fn params_mut(&mut self) -> Vec<Option<(&mut DMatrix<f64>, &mut DVector<f64>)>> {
        self.layers
            .iter_mut()
            .map(|l| match l {
                Layer::Conv(c) => Some((&mut c.weight, &mut c.bias)),
                Layer::Fc(f) => Some((&mut f.weight, &mut f.bias)),
                _ => None,
            })
            .collect()
    }

    /// SGD with momentum and L2 weight decay on every parameter.
    pub fn train(&mut self, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) || cfg.batch_size == 0 || data.is_empty() {
            return Err(Error::InvalidInput(
                "training needs a positive learning rate, batch size and data".into(),
            ));
        }
        let mut velocity: Grads = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Some((c.weight.map(|_| 0.0), c.bias.map(|_| 0.0))),
                Layer::Fc(f) => Some((f.weight.map(|_| 0.0), f.bias.map(|_| 0.0))),
                _ => None,
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let (x, labels) = data.batch(chunk);
                let (loss, grads) = self.loss_and_grads(&x, &labels);
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        loss,
                        lr: cfg.lr,
                        momentum: cfg.momentum,
                        weight_decay: cfg.weight_decay,
                    });
                }
                total += loss * chunk.len() as f64;
                let params = self.params_mut();
                let mut finite = true;
                for ((p, g), v) in params.into_iter().zip(&grads).zip(velocity.iter_mut()) {
                    if let (Some((w, b)), Some((gw, gb)), Some((vw, vb))) = (p, g, v) {
                        *vw *= cfg.momentum;
                        *vw += gw + &*w * cfg.weight_decay;
                        *w -= &*vw * cfg.lr;
                        *vb *= cfg.momentum;
                        *vb += gb + &*b * cfg.weight_decay;
                        *b -= &*vb * cfg.lr;
                        finite &= w.iter().chain(b.iter()).all(|x| x.is_finite());
                    }
                }
                if !finite {
                    return Err(Error::Divergence {
                        loss: f64::NAN,
                        lr: cfg.lr,
                        momentum: cfg.momentum,
                        weight_decay: cfg.weight_decay,
                    });
                }
            }
            let mean = total / data.len() as f64;
            log::debug!("epoch {} loss {mean:.5}", epoch_losses.len() + 1);
            epoch_losses.push(mean);
        }
        Ok(TrainReport { epoch_losses })
    }

    pub fn predict(&self, data: &Dataset) -> Vec<usize> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut out = Vec::with_capacity(data.len());
        for chunk in idx.chunks(256) {
            let logits = self.forward(&data.batch(chunk).0);
            out.extend(logits.data.column_iter().map(|c| c.argmax().0));
        }
        out
    }

    /// Fraction of correctly classified samples.
    pub fn accuracy(&self, data: &Dataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let correct = self
            .predict(data)
            .iter()
            .zip(&data.labels)
            .filter(|(p, l)| p == l)
            .count();
        correct as f64 / data.len() as f64
    }

    /// Post-ReLU output of every conv layer (the raw conv output if no ReLU
    /// follows it), one feature-map set per sample.
    pub fn conv_activations(
        &self,
        data: &Dataset,
        samples: &[usize],
    ) -> Result<BTreeMap<String, Vec<FeatureMapSet>>> {
        let mut out: BTreeMap<String, Vec<FeatureMapSet>> = BTreeMap::new();
        for chunk in samples.chunks(128) {
            let mut a = data.batch(chunk).0;
            for (i, layer) in self.layers.iter().enumerate() {
                a = match layer {
                    Layer::Conv(c) => c.forward(&a).0,
                    Layer::Relu => layers::relu(&a),
                    Layer::MaxPool => layers::maxpool(&a).0,
                    Layer::Fc(f) => f.forward(&a).0,
                };
                let captured = match (layer, self.layers.get(i + 1)) {
                    (Layer::Conv(c), next) if !matches!(next, Some(Layer::Relu)) => Some(&c.id),
                    (Layer::Relu, _) => match i.checked_sub(1).map(|j| &self.layers[j]) {
                        Some(Layer::Conv(c)) => Some(&c.id),
                        _ => None,
                    },
                    _ => None,
                };
                if let Some(id) = captured {
                    let entry = out.entry(id.clone()).or_default();
                    for (b, &sample_id) in chunk.iter().enumerate() {
                        entry.push(FeatureMapSet::new(
                            id,
                            sample_id,
                            [a.channels(), a.h, a.w],
                            a.sample(b),
                        )?);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Writes the activations of the first `num_samples` training samples as
    /// NPY files plus `manifest.json` under `dir`.
    pub fn capture_activations(
        &self,
        data: &Dataset,
        num_samples: usize,
        dir: &Path,
        dtype: Dtype,
    ) -> Result<DumpManifest> {
        if num_samples == 0 || num_samples > data.len() {
            return Err(Error::InvalidInput(format!(
                "cannot capture {num_samples} of {} samples",
                data.len()
            )));
        }
        let samples: Vec<usize> = (0..num_samples).collect();
        let acts = self.conv_activations(data, &samples)?;
        let mut entries = Vec::new();
        for conv in self.convs() {
            let fms = &acts[&conv.id];
            let [c, h, w] = fms[0].shape();
            let pattern = "{layer}/sample_{sample}.npy".to_string();
            fs::create_dir_all(dir.join(&conv.id)).map_err(|e| Error::io(dir.join(&conv.id), e))?;
            for fm in fms {
                let path = dir
                    .join(&conv.id)
                    .join(format!("sample_{}.npy", fm.sample_id()));
                write_feature_maps(fm, &path, dtype)?;
            }
            entries.push(LayerEntry {
                layer_id: conv.id.clone(),
                c,
                h,
                w,
                file_pattern: pattern,
            });
        }
        let manifest = DumpManifest {
            model_name: "micronet".into(),
            layers: entries,
            num_samples,
            dtype,
            capture_point: Some("post_relu".into()),
        };
        manifest.save(&dir.join("manifest.json"))?;
        Ok(manifest)
    }

    /// Removes pruned filters and the matching input slices of the next layer.
    pub fn apply_mask(&self, masks: &BTreeMap<String, PruneMask>) -> Result<Self> {
        for id in masks.keys() {
            if self.conv(id).is_none() {
                return Err(Error::UnknownLayer(id.clone()));
            }
        }
        let shapes = self.shapes();
        let mut net = self.clone();
        // Channels kept by the most recent conv, and its spatial size once flattened.
        let mut incoming: Option<(Vec<usize>, usize)> = None;
        for (i, layer) in net.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    if let Some((kept, _)) = incoming.take() {
                        let k2 = c.kernel * c.kernel;
                        let cols: Vec<usize> =
                            kept.iter().flat_map(|&ch| ch * k2..(ch + 1) * k2).collect();
                        c.weight = c.weight.select_columns(&cols);
                        c.in_channels = kept.len();
                    }
                    let kept = match masks.get(&c.id) {
                        Some(m) if m.channels() != c.out_channels => {
                            return Err(Error::ShapeMismatch {
                                layer_id: c.id.clone(),
                                expected: vec![c.out_channels],
                                found: vec![m.channels()],
                            })
                        }
                        Some(m) => m.kept_channels(),
                        None => (0..c.out_channels).collect(),
                    };
                    c.weight = c.weight.select_rows(&kept);
                    c.bias = c.bias.select_rows(&kept);
                    c.out_channels = kept.len();
                    incoming = Some((kept, 0));
                }
                Layer::Fc(f) => {
                    if let Some((kept, _)) = incoming.take() {
                        let [_, h, w] = if i == 0 {
                            self.input_shape
                        } else {
                            shapes[i - 1]
                        };
                        let hw = h * w;
                        let cols: Vec<usize> =
                            kept.iter().flat_map(|&ch| ch * hw..(ch + 1) * hw).collect();
                        f.weight = f.weight.select_columns(&cols);
                        f.in_features = cols.len();
                    }
                }
                Layer::Relu | Layer::MaxPool => {}
            }
        }
        Ok(net)
    }

    /// Static description for the accounting module: convs are prunable,
    /// nothing has batch norm.
    pub fn arch_descriptor(&self, name: &str) -> ArchDescriptor {
        let shapes = self.shapes();
        let mut specs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let before = if i == 0 {
                self.input_shape
            } else {
                shapes[i - 1]
            };
            match layer {
                Layer::Conv(c) => specs.push(LayerSpec::Conv(ConvSpec {
                    layer_id: c.id.clone(),
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    kernel: c.kernel,
                    stride: c.stride,
                    output_spatial: [shapes[i][1], shapes[i][2]],
                    has_bias: true,
                    batch_norm: false,
                    prunable: true,
                    input_from: None,
                    width_from: None,
                })),
                Layer::Fc(f) => specs.push(LayerSpec::Fc(FcSpec {
                    layer_id: f.id.clone(),
                    in_features: f.in_features,
                    out_features: f.out_features,
                    has_bias: true,
                    batch_norm: false,
                    input_from: None,
                    flatten_spatial: before[1] * before[2],
                })),
                _ => {}
            }
        }
        ArchDescriptor {
            name: name.into(),
            input_channels: self.input_shape[0],
            layers: specs,
            residual_blocks: Vec::new(),
        }
    }

    /// Multiply-accumulates of one forward pass.
    pub fn flops(&self) -> u64 {
        let arch = self.arch_descriptor("micronet");
        accounting::count_stats(&arch, None, accounting::CountOptions::default())
            .expect("own descriptor is consistent")
            .flops
    }
}

/// Largest relative error between analytic gradients and central differences
/// over `checks` parameter entries, spread round-robin across the weighted
/// layers. Relative error is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(
    net: &MicroNet,
    x: &Batch,
    labels: &[usize],
    checks: usize,
    seed: u64,
) -> f64 {
    let (_, grads) = net.loss_and_grads(x, labels);
    let weighted: Vec<usize> = (0..net.layers.len())
        .filter(|&i| grads[i].is_some())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for n in 0..checks {
        let li = weighted[n % weighted.len()];
        let (gw, gb) = grads[li].as_ref().expect("weighted layer");
        let total = gw.len() + gb.len();
        let idx = rng.random_range(0..total);
        let analytic = if idx < gw.len() {
            gw[idx]
        } else {
            gb[idx - gw.len()]
        };
        let perturbed = |delta: f64| {
            let mut probe = net.clone();
            let (w, b) = match &mut probe.layers[li] {
                Layer::Conv(c) => (&mut c.weight, &mut c.bias),
                Layer::Fc(f) => (&mut f.weight, &mut f.bias),
                _ => unreachable!(),
            };
            if idx < w.len() {
                w[idx] += delta;
            } else {
                b[idx - w.len()] += delta;
            }
            probe.loss(x, labels)
        };
        let numeric = (perturbed(h) - perturbed(-h)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}
