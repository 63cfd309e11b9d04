//! Prune-then-fine-tune comparison of filter selection criteria.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::TaskData;
use super::net::{MicroNet, TrainConfig};
use crate::accounting::{kappa_from_ratio, KappaRounding};
use crate::error::{Error, Result};
use crate::scoring::{
    score_with_loader, select_mask, select_samples, Aggregation, CiScoreVector, PruneMask,
    ScoreOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    /// Keep the filters whose feature maps have the highest channel independence.
    Chip,
    /// Keep a uniformly random subset.
    Random,
    /// Keep the filters with the largest ℓ1 weight norm.
    L1Norm,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::Chip, Criterion::Random, Criterion::L1Norm];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Chip => "chip",
            Criterion::Random => "random",
            Criterion::L1Norm => "l1norm",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                Error::InvalidInput(format!("unknown criterion {s:?} (chip, random, l1norm)"))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    /// Fraction of filters removed from every conv layer.
    pub ratio: f64,
    pub criteria: Vec<Criterion>,
    pub seeds: Vec<u64>,
    /// Fine-tuning schedule; its `seed` is replaced by each cell's seed.
    pub finetune: TrainConfig,
    /// Training samples whose activations are scored for the CHIP criterion.
    pub score_samples: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            criteria: Criterion::ALL.to_vec(),
            seeds: (0..5).collect(),
            finetune: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
            score_samples: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub criterion: Criterion,
    pub seed: u64,
    pub ratio: f64,
    /// Test accuracy right after pruning.
    pub acc_pre: f64,
    /// Test accuracy after fine-tuning.
    pub acc_post: f64,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline_acc: f64,
    pub baseline_params: u64,
    pub baseline_flops: u64,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    fn mean_of(&self, criterion: Criterion, f: impl Fn(&ComparisonRow) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.criterion == criterion)
            .map(f)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn mean_acc_pre(&self, criterion: Criterion) -> Option<f64> {
        self.mean_of(criterion, |r| r.acc_pre)
    }

    pub fn mean_acc_post(&self, criterion: Criterion) -> Option<f64> {
        self.mean_of(criterion, |r| r.acc_post)
    }

    /// Columns `criterion,seed,ratio,acc_pre,acc_post,params,flops`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

fn l1_scores(weights: &nalgebra::DMatrix<f64>, layer_id: &str) -> CiScoreVector {
    CiScoreVector {
        layer_id: layer_id.into(),
        scores: weights
            .row_iter()
            .map(|r| r.iter().map(|v| v.abs()).sum())
            .collect(),
        num_samples: 0,
        seed: None,
        aggregation: Aggregation::SampleMean,
    }
}

/// Per-layer masks keeping `floor((1 − ratio)·c)` filters (at least one).
pub fn select_masks(
    net: &MicroNet,
    data: &TaskData,
    criterion: Criterion,
    ratio: f64,
    seed: u64,
    score_samples: usize,
) -> Result<BTreeMap<String, PruneMask>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidInput(format!(
            "ratio {ratio} must be in [0, 1)"
        )));
    }
    let kappa = |c: usize| kappa_from_ratio(c, ratio, KappaRounding::Truncate).max(1);
    let mut masks = BTreeMap::new();
    match criterion {
        Criterion::Chip => {
            let ids: Vec<String> = net.convs().map(|c| c.id.clone()).collect();
            let count = score_samples.min(data.train.len());
            // score_with_loader draws the same ids from the same seed, so only
            // those samples need a forward pass.
            let drawn = select_samples(data.train.len(), count, seed)?;
            let acts = net.conv_activations(&data.train, &drawn)?;
            let position: BTreeMap<usize, usize> =
                drawn.iter().enumerate().map(|(i, &s)| (s, i)).collect();
            let opts = ScoreOptions {
                sample_count: count,
                batch_size: count,
                seed,
            };
            let scores = score_with_loader(&ids, data.train.len(), opts, |layer, s| {
                let fms = acts
                    .get(layer)
                    .ok_or_else(|| Error::UnknownLayer(layer.into()))?;
                Ok(fms[position[&s]].clone())
            })?;
            for conv in net.convs() {
                let v = &scores.layers[&conv.id].overall;
                masks.insert(conv.id.clone(), select_mask(v, kappa(conv.out_channels))?);
            }
        }
        Criterion::L1Norm => {
            for conv in net.convs() {
                let v = l1_scores(&conv.weight, &conv.id);
                masks.insert(conv.id.clone(), select_mask(&v, kappa(conv.out_channels))?);
            }
        }
        Criterion::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for conv in net.convs() {
                let c = conv.out_channels;
                let kept = rand::seq::index::sample(&mut rng, c, kappa(c)).into_vec();
                masks.insert(conv.id.clone(), PruneMask::from_kept(&conv.id, c, &kept)?);
            }
        }
    }
    Ok(masks)
}

/// Prunes `net` with every criterion and seed, then fine-tunes each copy.
/// Cells run in parallel; each one trains single-threaded.
pub fn prune_compare(
    net: &MicroNet,
    data: &TaskData,
    cfg: &CompareConfig,
) -> Result<ComparisonReport> {
    if !(0.0..1.0).contains(&cfg.ratio) {
        return Err(Error::InvalidInput(format!(
            "ratio {} must be in [0, 1)",
            cfg.ratio
        )));
    }
    let cells: Vec<(Criterion, u64)> = cfg
        .criteria
        .iter()
        .flat_map(|&c| cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(criterion, seed)| {
            let masks = select_masks(net, data, criterion, cfg.ratio, seed, cfg.score_samples)?;
            let mut pruned = net.apply_mask(&masks)?;
            let acc_pre = pruned.accuracy(&data.test);
            pruned.train(
                &data.train,
                &TrainConfig {
                    seed,
                    ..cfg.finetune
                },
            )?;
            let acc_post = pruned.accuracy(&data.test);
            log::info!("{criterion} seed {seed}: {acc_pre:.4} -> {acc_post:.4}");
            Ok(ComparisonRow {
                criterion,
                seed,
                ratio: cfg.ratio,
                acc_pre,
                acc_post,
                params: pruned.param_count() as u64,
                flops: pruned.flops(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonReport {
        baseline_acc: net.accuracy(&data.test),
        baseline_params: net.param_count() as u64,
        baseline_flops: net.flops(),
        rows,
    })
}
