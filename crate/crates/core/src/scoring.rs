//! Layer scoring and mask selection.
//!
//! For each layer: compute the CI of every channel on every selected input
//! sample, average over samples, sort, and keep the κ channels with the
//! largest mean CI. Samples are also grouped into fixed-size batches whose
//! per-batch means feed the stability analysis.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ci::CiContext;
use crate::error::{Error, Result};
use crate::tensor_io::{load_feature_maps, matricize, DumpManifest, FeatureMapSet};

/// How per-sample CI values were reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Arithmetic mean over individual samples.
    #[default]
    SampleMean,
}

/// Mean CI per channel for one layer; `scores[i]` belongs to channel `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiScoreVector {
    pub layer_id: String,
    pub scores: Vec<f64>,
    pub num_samples: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub aggregation: Aggregation,
}

impl CiScoreVector {
    pub fn channels(&self) -> usize {
        self.scores.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: Self = read_json(path)?;
        if v.num_samples == 0 || v.scores.is_empty() {
            return Err(Error::InvalidInput(format!(
                "score file {} has no samples or no channels",
                path.display()
            )));
        }
        Ok(v)
    }
}

/// File name used for a layer's score vector inside a scores directory.
pub fn score_file_name(layer_id: &str) -> String {
    format!("{layer_id}.scores.json")
}

/// File name used for a layer's mask.
pub fn mask_file_name(layer_id: &str) -> String {
    format!("{layer_id}.mask.json")
}

/// Per-layer keep/prune decision. Exactly `kappa` entries of `keep` are true.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub layer_id: String,
    pub keep: Vec<bool>,
    pub kappa: usize,
}

impl PruneMask {
    pub fn new(layer_id: impl Into<String>, keep: Vec<bool>) -> Result<Self> {
        let layer_id = layer_id.into();
        let kappa = keep.iter().filter(|&&k| k).count();
        if kappa == 0 {
            return Err(Error::KappaOutOfRange {
                layer_id,
                kappa,
                channels: keep.len(),
            });
        }
        Ok(Self {
            layer_id,
            keep,
            kappa,
        })
    }

    pub fn all_keep(layer_id: impl Into<String>, channels: usize) -> Self {
        Self {
            layer_id: layer_id.into(),
            keep: vec![true; channels],
            kappa: channels,
        }
    }

    /// Keeps exactly the listed channels.
    pub fn from_kept(layer_id: impl Into<String>, channels: usize, kept: &[usize]) -> Result<Self> {
        let layer_id = layer_id.into();
        let mut keep = vec![false; channels];
        for &k in kept {
            if k >= channels {
                return Err(Error::ChannelOutOfRange {
                    channel: k,
                    rows: channels,
                });
            }
            keep[k] = true;
        }
        Self::new(layer_id, keep)
    }

    pub fn channels(&self) -> usize {
        self.keep.len()
    }

    pub fn kept_channels(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| self.keep[i]).collect()
    }

    pub fn pruned_channels(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| !self.keep[i]).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        let counted = m.keep.iter().filter(|&&k| k).count();
        if counted != m.kappa || m.kappa == 0 {
            return Err(Error::InvalidInput(format!(
                "mask {} declares kappa {} but keeps {counted} channels",
                path.display(),
                m.kappa
            )));
        }
        Ok(m)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).expect("plain data serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// CI of every channel of one sample.
pub fn sample_scores(fms: &FeatureMapSet) -> Result<Vec<f64>> {
    let ctx = CiContext::new(&matricize(fms))?;
    Ok(ctx.all_single()?.into_iter().map(|v| v.value).collect())
}

/// Entrywise mean of equally long vectors, summed in the given order.
fn ordered_mean(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len() as f64;
    let mut acc = vec![0.0; vectors[0].len()];
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    acc.iter().map(|a| a / n).collect()
}

/// Mean per-channel CI of one layer over the given samples.
pub fn score_layer(samples: &[FeatureMapSet], layer_id: &str) -> Result<CiScoreVector> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidInput(format!("no samples for layer {layer_id}")))?;
    if let Some(bad) = samples.iter().find(|s| s.shape() != first.shape()) {
        return Err(Error::ShapeMismatch {
            layer_id: layer_id.to_string(),
            expected: first.shape().to_vec(),
            found: bad.shape().to_vec(),
        });
    }
    let per_sample: Vec<Vec<f64>> = samples
        .par_iter()
        .map(sample_scores)
        .collect::<Result<_>>()
        .map_err(|e| Error::in_layer(layer_id, e))?;
    Ok(CiScoreVector {
        layer_id: layer_id.to_string(),
        scores: ordered_mean(&per_sample),
        num_samples: samples.len(),
        seed: None,
        aggregation: Aggregation::SampleMean,
    })
}

/// Keeps the `kappa` channels with the largest mean CI; on ties the lower
/// channel index is kept.
pub fn select_mask(scores: &CiScoreVector, kappa: usize) -> Result<PruneMask> {
    let c = scores.channels();
    if kappa == 0 || kappa > c {
        return Err(Error::KappaOutOfRange {
            layer_id: scores.layer_id.clone(),
            kappa,
            channels: c,
        });
    }
    let mut order: Vec<usize> = (0..c).collect();
    // Descending by score, ascending by index among equals.
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .total_cmp(&scores.scores[a])
            .then(a.cmp(&b))
    });
    PruneMask::from_kept(scores.layer_id.clone(), c, &order[..kappa])
}

/// Pearson correlation; `None` if either vector has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "pearson needs equal lengths");
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Symmetric matrix of pairwise Pearson coefficients between score vectors.
/// `None` marks pairs involving a zero-variance vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PearsonMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl PearsonMatrix {
    pub fn off_diagonal(&self) -> Vec<Option<f64>> {
        let n = self.values.len();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| self.values[i][j])
            .collect()
    }

    /// Mean of the defined off-diagonal coefficients.
    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let v: Vec<f64> = self.off_diagonal().into_iter().flatten().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn min_off_diagonal(&self) -> Option<f64> {
        self.off_diagonal().into_iter().flatten().reduce(f64::min)
    }

    /// CSV with a `batch` label column; undefined entries are written as `undefined`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["batch".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header)?;
        for (label, row) in self.labels.iter().zip(&self.values) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|v| match v {
                Some(x) => format!("{x:.6}"),
                None => "undefined".to_string(),
            }));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// Pairwise Pearson correlation of per-batch score vectors of one layer.
pub fn stability_analysis(batches: &[CiScoreVector]) -> Result<PearsonMatrix> {
    if batches.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "stability analysis needs at least 2 batches, got {}",
            batches.len()
        )));
    }
    let first = &batches[0];
    for b in batches {
        if b.layer_id != first.layer_id || b.channels() != first.channels() {
            return Err(Error::InvalidInput(format!(
                "batch vectors disagree: {} ({} channels) vs {} ({} channels)",
                first.layer_id,
                first.channels(),
                b.layer_id,
                b.channels()
            )));
        }
    }
    let n = batches.len();
    let mut values = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let r = if i == j {
                pearson(&batches[i].scores, &batches[i].scores).map(|_| 1.0)
            } else {
                pearson(&batches[i].scores, &batches[j].scores)
            };
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(PearsonMatrix {
        labels: (0..n).map(|i| format!("batch_{i}")).collect(),
        values,
    })
}

/// Seeded uniform draw of `sample_count` distinct sample ids.
pub fn select_samples(num_samples: usize, sample_count: usize, seed: u64) -> Result<Vec<usize>> {
    if sample_count == 0 || sample_count > num_samples {
        return Err(Error::InvalidInput(format!(
            "cannot select {sample_count} of {num_samples} samples"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, num_samples, sample_count).into_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreOptions {
    pub sample_count: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// A layer's overall score vector and its per-batch intermediates.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerScores {
    pub overall: CiScoreVector,
    pub batches: Vec<CiScoreVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelScores {
    pub seed: u64,
    /// Selected sample ids in draw order; batches are consecutive runs of it.
    pub selected_samples: Vec<usize>,
    pub layers: BTreeMap<String, LayerScores>,
}

/// Scores every listed layer, loading samples through `load`.
pub fn score_with_loader<F>(
    layer_ids: &[String],
    num_samples: usize,
    opts: ScoreOptions,
    load: F,
) -> Result<ModelScores>
where
    F: Fn(&str, usize) -> Result<FeatureMapSet> + Sync,
{
    if opts.batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be at least 1".into()));
    }
    let selected = select_samples(num_samples, opts.sample_count, opts.seed)?;
    let layers = layer_ids
        .par_iter()
        .map(|layer_id| {
            let per_sample: Vec<Vec<f64>> = selected
                .par_iter()
                .map(|&s| sample_scores(&load(layer_id, s)?))
                .collect::<Result<_>>()
                .map_err(|e| Error::in_layer(layer_id, e))?;
            if per_sample.iter().any(|v| v.len() != per_sample[0].len()) {
                return Err(Error::in_layer(
                    layer_id,
                    Error::InvalidInput("samples disagree on channel count".into()),
                ));
            }
            let vector = |chunk: &[Vec<f64>]| CiScoreVector {
                layer_id: layer_id.clone(),
                scores: ordered_mean(chunk),
                num_samples: chunk.len(),
                seed: Some(opts.seed),
                aggregation: Aggregation::SampleMean,
            };
            let scores = LayerScores {
                overall: vector(&per_sample),
                batches: per_sample.chunks(opts.batch_size).map(vector).collect(),
            };
            Ok((layer_id.clone(), scores))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(ModelScores {
        seed: opts.seed,
        selected_samples: selected,
        layers,
    })
}

/// Runs [`score_with_loader`] over every layer of a dump, reading files
/// relative to `root` (normally the manifest's directory).
pub fn score_model(
    manifest: &DumpManifest,
    root: &Path,
    opts: ScoreOptions,
) -> Result<ModelScores> {
    manifest.validate()?;
    let ids: Vec<String> = manifest.layers.iter().map(|l| l.layer_id.clone()).collect();
    score_with_loader(&ids, manifest.num_samples, opts, |layer, sample| {
        let path = manifest.sample_path(root, layer, sample)?;
        load_feature_maps(&path, manifest, layer, sample)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vector(scores: Vec<f64>) -> CiScoreVector {
        CiScoreVector {
            layer_id: "l".into(),
            scores,
            num_samples: 1,
            seed: None,
            aggregation: Aggregation::SampleMean,
        }
    }

    fn example_sample() -> FeatureMapSet {
        FeatureMapSet::new(
            "example",
            0,
            [3, 2, 2],
            vec![
                0.9, 0.8, 1.1, 1.2, 0.81, 0.72, 0.99, 1.08, 0.8, 0.9, 1.2, 1.1,
            ],
        )
        .unwrap()
    }

    #[test]
    fn worked_example_prunes_second_row() {
        let scores = score_layer(&[example_sample()], "example").unwrap();
        let mask = select_mask(&scores, 2).unwrap();
        assert_eq!(mask.keep, vec![true, false, true]);
        assert_eq!(mask.pruned_channels(), vec![1]);
    }

    #[test]
    fn single_and_duplicate_samples() {
        let s = example_sample();
        let one = score_layer(std::slice::from_ref(&s), "example").unwrap();
        let direct = sample_scores(&s).unwrap();
        assert_eq!(one.scores, direct);
        let two = score_layer(&[s.clone(), s], "example").unwrap();
        for (a, b) in two.scores.iter().zip(&one.scores) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }
        assert_eq!(two.num_samples, 2);
    }

    #[test]
    fn inconsistent_shapes_rejected() {
        let other = FeatureMapSet::new("example", 1, [3, 1, 4], vec![1.0; 12]).unwrap();
        assert!(matches!(
            score_layer(&[example_sample(), other], "example").unwrap_err(),
            Error::ShapeMismatch { .. }
        ));
        assert!(score_layer(&[], "x").is_err());
    }

    #[test]
    fn select_mask_contracts() {
        let v = vector(vec![0.3, 0.1, 0.2]);
        assert_eq!(select_mask(&v, 3).unwrap().keep, vec![true; 3]);
        assert!(select_mask(&v, 0).is_err());
        assert!(select_mask(&v, 4).is_err());
        let ties = vector(vec![1.0; 4]);
        assert_eq!(select_mask(&ties, 2).unwrap().kept_channels(), vec![0, 1]);
    }

    #[test]
    fn pearson_basic_properties() {
        let a = vector(vec![1.0, 3.0, 2.0, 5.0]);
        let b = vector(a.scores.iter().map(|x| 2.0 * x + 3.0).collect());
        let m = stability_analysis(&[a.clone(), a.clone(), b]).unwrap();
        for i in 0..3 {
            assert_eq!(m.values[i][i], Some(1.0));
        }
        assert!((m.values[0][1].unwrap() - 1.0).abs() < 1e-15);
        assert!((m.values[0][2].unwrap() - 1.0).abs() < 1e-15);
        assert!(stability_analysis(std::slice::from_ref(&a)).is_err());
    }

    #[test]
    fn zero_variance_is_undefined() {
        let a = vector(vec![1.0, 2.0, 3.0]);
        let flat = vector(vec![2.0; 3]);
        let m = stability_analysis(&[a, flat]).unwrap();
        assert_eq!(m.values[0][1], None);
        assert_eq!(m.values[1][1], None);
        let mut out = Vec::new();
        m.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("batch,batch_0,batch_1\n"));
        assert!(text.contains("undefined"));
    }

    #[test]
    fn sample_selection_is_seeded() {
        let a = select_samples(100, 10, 7).unwrap();
        assert_eq!(a, select_samples(100, 10, 7).unwrap());
        assert_ne!(a, select_samples(100, 10, 8).unwrap());
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
        assert!(select_samples(5, 6, 0).is_err());
    }

    #[test]
    fn mask_json_shape() {
        let m = PruneMask::from_kept("conv1", 3, &[0, 2]).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(
            text,
            r#"{"layer_id":"conv1","keep":[true,false,true],"kappa":2}"#
        );
    }
}
