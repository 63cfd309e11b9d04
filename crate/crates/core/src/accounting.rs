//! Static architecture descriptions and parameter/FLOP accounting.
//!
//! A descriptor lists conv and FC layers with the layer each one reads from.
//! Pruning a conv to κ output channels shrinks that layer and the input side
//! of every layer reading from it. Layers with `width_from` (projection
//! shortcuts) take the pruned width of the referenced layer instead of their
//! own schedule entry.
//!
//! FLOPs are multiply-accumulates by default.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub layer_id: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[h_out, w_out]`.
    pub output_spatial: [usize; 2],
    pub has_bias: bool,
    #[serde(default)]
    pub batch_norm: bool,
    #[serde(default = "default_true")]
    pub prunable: bool,
    /// Feeding layer; `None` means the previous layer (or the network input).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_from: Option<String>,
    /// Output width follows this layer's pruned width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcSpec {
    pub layer_id: String,
    pub in_features: usize,
    pub out_features: usize,
    #[serde(default = "default_true")]
    pub has_bias: bool,
    #[serde(default)]
    pub batch_norm: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_from: Option<String>,
    /// Spatial positions per input channel when flattening a conv output.
    #[serde(default = "default_one")]
    pub flatten_spatial: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv(ConvSpec),
    Fc(FcSpec),
}

impl LayerSpec {
    pub fn layer_id(&self) -> &str {
        match self {
            LayerSpec::Conv(c) => &c.layer_id,
            LayerSpec::Fc(f) => &f.layer_id,
        }
    }

    fn input_from(&self) -> Option<&str> {
        match self {
            LayerSpec::Conv(c) => c.input_from.as_deref(),
            LayerSpec::Fc(f) => f.input_from.as_deref(),
        }
    }

    fn out_width(&self) -> usize {
        match self {
            LayerSpec::Conv(c) => c.out_channels,
            LayerSpec::Fc(f) => f.out_features,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shortcut {
    Identity,
    /// Parameter-free shortcut that subsamples and zero-pads channels.
    ZeroPad,
    /// 1×1 conv shortcut.
    Projection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub block_id: String,
    pub layers: Vec<String>,
    pub shortcut: Shortcut,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub name: String,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub residual_blocks: Vec<ResidualBlock>,
}

const PRESETS: &[(&str, &str)] = &[
    ("resnet56", include_str!("../data/arch/resnet56.json")),
    ("resnet110", include_str!("../data/arch/resnet110.json")),
    ("vgg16", include_str!("../data/arch/vgg16.json")),
    ("resnet50", include_str!("../data/arch/resnet50.json")),
];

impl ArchDescriptor {
    pub fn from_json(text: &str) -> Result<Self> {
        let arch: Self = serde_json::from_str(text).map_err(|e| Error::json("architecture", e))?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Loads `path` if it exists, otherwise a shipped preset of that name.
    pub fn load_or_preset(name_or_path: &str) -> Result<Self> {
        let path = Path::new(name_or_path);
        if path.exists() {
            return Self::load(path);
        }
        Self::preset(name_or_path).ok_or_else(|| {
            Error::InvalidInput(format!(
                "{name_or_path} is neither a file nor one of the presets {:?}",
                PRESETS.iter().map(|p| p.0).collect::<Vec<_>>()
            ))
        })
    }

    /// Shipped descriptors: `resnet56`, `resnet110`, `vgg16` (CIFAR) and `resnet50` (ImageNet).
    pub fn preset(name: &str) -> Option<Self> {
        PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_json(text).expect("shipped descriptor is valid"))
    }

    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|p| p.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("descriptor serializes")
    }

    fn invalid(&self, reason: String) -> Error {
        Error::InvalidArch {
            arch: self.name.clone(),
            reason,
        }
    }

    /// Index of the layer feeding layer `i`, or `None` for the network input.
    fn feeder(&self, i: usize, index: &HashMap<&str, usize>) -> Result<Option<usize>> {
        match self.layers[i].input_from() {
            Some(id) => match index.get(id) {
                Some(&j) if j < i => Ok(Some(j)),
                Some(_) => Err(self.invalid(format!(
                    "{} reads from {id}, which does not precede it",
                    self.layers[i].layer_id()
                ))),
                None => Err(self.invalid(format!(
                    "{} reads from unknown layer {id}",
                    self.layers[i].layer_id()
                ))),
            },
            None => Ok(i.checked_sub(1)),
        }
    }

    fn index(&self) -> HashMap<&str, usize> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.layer_id(), i))
            .collect()
    }

    /// Checks ids, references and that channel counts chain layer to layer.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.layer_id()) {
                return Err(self.invalid(format!("duplicate layer id {}", l.layer_id())));
            }
        }
        let index = self.index();
        for (i, layer) in self.layers.iter().enumerate() {
            let feeder = self.feeder(i, &index)?;
            let feeder_width = feeder.map_or(self.input_channels, |j| self.layers[j].out_width());
            match layer {
                LayerSpec::Conv(c) => {
                    if c.kernel == 0 || c.stride == 0 || c.out_channels == 0 {
                        return Err(self.invalid(format!("{} has a zero dimension", c.layer_id)));
                    }
                    if c.in_channels != feeder_width {
                        return Err(self.invalid(format!(
                            "{} expects {} input channels but its input has {feeder_width}",
                            c.layer_id, c.in_channels
                        )));
                    }
                    if let Some(w) = &c.width_from {
                        let src =
                            index
                                .get(w.as_str())
                                .map(|&j| &self.layers[j])
                                .ok_or_else(|| {
                                    self.invalid(format!("{} follows unknown {w}", c.layer_id))
                                })?;
                        if !matches!(src, LayerSpec::Conv(_)) || src.out_width() != c.out_channels {
                            return Err(self.invalid(format!(
                                "{} width must follow conv {w} of equal width",
                                c.layer_id
                            )));
                        }
                        if c.prunable {
                            return Err(self.invalid(format!(
                                "{} follows {w} and cannot also be prunable",
                                c.layer_id
                            )));
                        }
                    }
                }
                LayerSpec::Fc(f) => {
                    let spatial = match feeder.map(|j| &self.layers[j]) {
                        Some(LayerSpec::Conv(_)) | None => f.flatten_spatial,
                        Some(LayerSpec::Fc(_)) => 1,
                    };
                    if f.in_features != feeder_width * spatial {
                        return Err(self.invalid(format!(
                            "{} expects {} features but its input provides {feeder_width}×{spatial}",
                            f.layer_id, f.in_features
                        )));
                    }
                }
            }
        }
        for b in &self.residual_blocks {
            if let Some(missing) = b.layers.iter().find(|id| !index.contains_key(id.as_str())) {
                return Err(self.invalid(format!(
                    "block {} lists unknown layer {missing}",
                    b.block_id
                )));
            }
        }
        Ok(())
    }

    /// Prunable conv layers, in schedule order.
    pub fn prunable_layers(&self) -> Vec<&ConvSpec> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv(c) if c.prunable => Some(c),
                _ => None,
            })
            .collect()
    }
}

/// How a pruning ratio becomes a kept-filter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaRounding {
    /// `floor((1 − ratio)·c)`; reproduces every published κ/ratio pair.
    #[default]
    Truncate,
    /// `round((1 − ratio)·c)`, halves away from zero.
    Nearest,
}

pub fn kappa_from_ratio(channels: usize, ratio: f64, rounding: KappaRounding) -> usize {
    let kept = (1.0 - ratio) * channels as f64;
    match rounding {
        KappaRounding::Truncate => kept.floor() as usize,
        KappaRounding::Nearest => kept.round() as usize,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScheduleEntry {
    Kappa(usize),
    Ratio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    Kappa,
    Ratio,
}

/// On-disk schedule: `{arch, mode, values}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub arch: String,
    pub mode: ScheduleMode,
    pub values: Vec<f64>,
}

/// Per-prunable-layer κ or ratio, validated against an architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSchedule {
    pub arch_name: String,
    pub entries: Vec<ScheduleEntry>,
}

impl LayerSchedule {
    /// Validates `file` against `arch`: name, length, κ range, ratio range.
    pub fn from_file(file: &ScheduleFile, arch: &ArchDescriptor) -> Result<Self> {
        if file.arch != arch.name {
            return Err(Error::InvalidInput(format!(
                "schedule is for {} but architecture is {}",
                file.arch, arch.name
            )));
        }
        let entries = file
            .values
            .iter()
            .map(|&v| match file.mode {
                ScheduleMode::Kappa if v >= 0.0 && v.fract() == 0.0 => {
                    Ok(ScheduleEntry::Kappa(v as usize))
                }
                ScheduleMode::Kappa => Err(Error::InvalidInput(format!(
                    "kappa {v} is not a non-negative integer"
                ))),
                ScheduleMode::Ratio => Ok(ScheduleEntry::Ratio(v)),
            })
            .collect::<Result<Vec<_>>>()?;
        let schedule = Self {
            arch_name: file.arch.clone(),
            entries,
        };
        schedule.validate(arch)?;
        Ok(schedule)
    }

    pub fn from_kappas(arch: &ArchDescriptor, kappas: &[usize]) -> Result<Self> {
        let schedule = Self {
            arch_name: arch.name.clone(),
            entries: kappas.iter().map(|&k| ScheduleEntry::Kappa(k)).collect(),
        };
        schedule.validate(arch)?;
        Ok(schedule)
    }

    /// Every prunable layer at the same ratio.
    pub fn uniform_ratio(arch: &ArchDescriptor, ratio: f64) -> Result<Self> {
        let schedule = Self {
            arch_name: arch.name.clone(),
            entries: vec![ScheduleEntry::Ratio(ratio); arch.prunable_layers().len()],
        };
        schedule.validate(arch)?;
        Ok(schedule)
    }

    pub fn validate(&self, arch: &ArchDescriptor) -> Result<()> {
        let prunable = arch.prunable_layers();
        if self.entries.len() != prunable.len() {
            return Err(Error::ScheduleLength {
                arch: arch.name.clone(),
                expected: prunable.len(),
                found: self.entries.len(),
            });
        }
        for (entry, layer) in self.entries.iter().zip(&prunable) {
            match *entry {
                ScheduleEntry::Kappa(k) if k == 0 || k > layer.out_channels => {
                    return Err(Error::KappaOutOfRange {
                        layer_id: layer.layer_id.clone(),
                        kappa: k,
                        channels: layer.out_channels,
                    })
                }
                ScheduleEntry::Ratio(r) if !(0.0..=1.0).contains(&r) => {
                    return Err(Error::InvalidInput(format!(
                        "ratio {r} for {} is outside [0, 1]",
                        layer.layer_id
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Kept-filter count per prunable layer.
    pub fn kappas(&self, arch: &ArchDescriptor, rounding: KappaRounding) -> Result<Vec<usize>> {
        self.validate(arch)?;
        self.entries
            .iter()
            .zip(arch.prunable_layers())
            .map(|(entry, layer)| {
                let k = match *entry {
                    ScheduleEntry::Kappa(k) => k,
                    ScheduleEntry::Ratio(r) => kappa_from_ratio(layer.out_channels, r, rounding),
                };
                if k == 0 {
                    return Err(Error::KappaOutOfRange {
                        layer_id: layer.layer_id.clone(),
                        kappa: 0,
                        channels: layer.out_channels,
                    });
                }
                Ok(k)
            })
            .collect()
    }
}

/// Reads a schedule file and validates it against `arch`.
pub fn parse_schedule(path: &Path, arch: &ArchDescriptor) -> Result<LayerSchedule> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ScheduleFile =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    LayerSchedule::from_file(&file, arch)
}

/// A κ or ratio list transcribed from the published layer-wise settings.
#[derive(Debug, Clone)]
pub struct PublishedSchedule {
    pub arch: &'static str,
    /// Overall sparsity label, e.g. `"42.8"`.
    pub sparsity: &'static str,
    pub file: ScheduleFile,
}

macro_rules! published {
    ($($arch:literal, $sparsity:literal, $mode:literal;)*) => {
        &[$(($arch, $sparsity, include_str!(concat!(
            "../data/schedules/", $arch, "_", $sparsity, "_", $mode, ".json"
        )))),*]
    };
}

const PUBLISHED: &[(&str, &str, &str)] = published! {
    "resnet56", "42.8", "kappa"; "resnet56", "42.8", "ratio";
    "resnet56", "71.8", "kappa"; "resnet56", "71.8", "ratio";
    "resnet110", "48.3", "kappa"; "resnet110", "48.3", "ratio";
    "resnet110", "68.3", "kappa"; "resnet110", "68.3", "ratio";
    "vgg16", "81.6", "kappa"; "vgg16", "81.6", "ratio";
    "vgg16", "83.3", "kappa"; "vgg16", "83.3", "ratio";
    "vgg16", "87.3", "kappa"; "vgg16", "87.3", "ratio";
    "resnet50", "40.8", "kappa"; "resnet50", "40.8", "ratio";
    "resnet50", "44.2", "kappa"; "resnet50", "44.2", "ratio";
    "resnet50", "56.7", "kappa"; "resnet50", "56.7", "ratio";
    "resnet50", "68.6", "kappa"; "resnet50", "68.6", "ratio";
};

/// All shipped published schedules, κ and ratio forms alike.
pub fn published_schedules() -> Vec<PublishedSchedule> {
    PUBLISHED
        .iter()
        .map(|(arch, sparsity, text)| PublishedSchedule {
            arch,
            sparsity,
            file: serde_json::from_str(text).expect("shipped schedule parses"),
        })
        .collect()
}

/// The shipped schedule for `arch` at `sparsity` in the given mode.
pub fn published_schedule(arch: &str, sparsity: &str, mode: ScheduleMode) -> Option<ScheduleFile> {
    published_schedules()
        .into_iter()
        .find(|p| p.arch == arch && p.sparsity == sparsity && p.file.mode == mode)
        .map(|p| p.file)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// One multiply-accumulate counts as one FLOP.
    #[default]
    Mac,
    /// Multiply and add counted separately (2 × MAC).
    MulAdd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountOptions {
    pub count_batch_norm: bool,
    pub flops: FlopConvention,
    pub rounding: KappaRounding,
}

impl Default for CountOptions {
    fn default() -> Self {
        Self {
            count_batch_norm: true,
            flops: FlopConvention::Mac,
            rounding: KappaRounding::Truncate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModelStats {
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer_id: String,
    pub params_base: u64,
    pub params_pruned: u64,
    pub flops_base: u64,
    pub flops_pruned: u64,
}

/// Output width of every layer under the given κ list (or unpruned).
fn output_widths(arch: &ArchDescriptor, kappas: Option<&[usize]>) -> Result<Vec<usize>> {
    let index = arch.index();
    let mut widths: Vec<usize> = arch.layers.iter().map(LayerSpec::out_width).collect();
    if let Some(kappas) = kappas {
        let mut it = kappas.iter();
        for (i, layer) in arch.layers.iter().enumerate() {
            if let LayerSpec::Conv(c) = layer {
                if c.prunable {
                    widths[i] = *it.next().ok_or_else(|| Error::ScheduleLength {
                        arch: arch.name.clone(),
                        expected: arch.prunable_layers().len(),
                        found: kappas.len(),
                    })?;
                }
            }
        }
        for (i, layer) in arch.layers.iter().enumerate() {
            if let LayerSpec::Conv(ConvSpec {
                width_from: Some(src),
                ..
            }) = layer
            {
                let j = index[src.as_str()];
                widths[i] = widths[j];
            }
        }
    }
    Ok(widths)
}

fn per_layer(
    arch: &ArchDescriptor,
    widths: &[usize],
    opts: CountOptions,
) -> Result<Vec<ModelStats>> {
    let index = arch.index();
    let flop_scale = match opts.flops {
        FlopConvention::Mac => 1,
        FlopConvention::MulAdd => 2,
    };
    let bn = |on: bool, width: u64| {
        if on && opts.count_batch_norm {
            2 * width
        } else {
            0
        }
    };
    (0..arch.layers.len())
        .map(|i| {
            let feeder = arch.feeder(i, &index)?;
            let in_width = feeder.map_or(arch.input_channels, |j| widths[j]) as u64;
            let out = widths[i] as u64;
            Ok(match &arch.layers[i] {
                LayerSpec::Conv(c) => {
                    let k2 = (c.kernel * c.kernel) as u64;
                    let hw = (c.output_spatial[0] * c.output_spatial[1]) as u64;
                    let weights = in_width * out * k2;
                    ModelStats {
                        params: weights + if c.has_bias { out } else { 0 } + bn(c.batch_norm, out),
                        flops: flop_scale * weights * hw,
                    }
                }
                LayerSpec::Fc(f) => {
                    let spatial = match feeder.map(|j| &arch.layers[j]) {
                        Some(LayerSpec::Fc(_)) => 1,
                        _ => f.flatten_spatial as u64,
                    };
                    let weights = in_width * spatial * out;
                    ModelStats {
                        params: weights + if f.has_bias { out } else { 0 } + bn(f.batch_norm, out),
                        flops: flop_scale * weights,
                    }
                }
            })
        })
        .collect()
}

/// Per-layer baseline and pruned counts.
pub fn layer_stats(
    arch: &ArchDescriptor,
    schedule: Option<&LayerSchedule>,
    opts: CountOptions,
) -> Result<Vec<LayerStats>> {
    let kappas = schedule
        .map(|s| s.kappas(arch, opts.rounding))
        .transpose()?;
    let base = per_layer(arch, &output_widths(arch, None)?, opts)?;
    let pruned = per_layer(arch, &output_widths(arch, kappas.as_deref())?, opts)?;
    Ok(arch
        .layers
        .iter()
        .zip(base.iter().zip(&pruned))
        .map(|(l, (b, p))| LayerStats {
            layer_id: l.layer_id().to_string(),
            params_base: b.params,
            params_pruned: p.params,
            flops_base: b.flops,
            flops_pruned: p.flops,
        })
        .collect())
}

/// Total params and FLOPs; `None` gives the unpruned baseline.
pub fn count_stats(
    arch: &ArchDescriptor,
    schedule: Option<&LayerSchedule>,
    opts: CountOptions,
) -> Result<ModelStats> {
    let rows = layer_stats(arch, schedule, opts)?;
    Ok(ModelStats {
        params: rows.iter().map(|r| r.params_pruned).sum(),
        flops: rows.iter().map(|r| r.flops_pruned).sum(),
    })
}

/// Percentage reductions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub params_pct: f64,
    pub flops_pct: f64,
}

pub fn reduction_report(baseline: ModelStats, pruned: ModelStats) -> Result<Reduction> {
    if baseline.params == 0 || baseline.flops == 0 {
        return Err(Error::InvalidInput(
            "baseline params and FLOPs must be positive".into(),
        ));
    }
    let pct = |b: u64, p: u64| 100.0 * (1.0 - p as f64 / b as f64);
    Ok(Reduction {
        params_pct: pct(baseline.params, pruned.params),
        flops_pct: pct(baseline.flops, pruned.flops),
    })
}

/// Stats CSV with a trailing `total` row.
pub fn write_stats_csv<W: Write>(rows: &[LayerStats], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.serialize(LayerStats {
        layer_id: "total".into(),
        params_base: rows.iter().map(|r| r.params_base).sum(),
        params_pruned: rows.iter().map(|r| r.params_pruned).sum(),
        flops_base: rows.iter().map(|r| r.flops_base).sum(),
        flops_pruned: rows.iter().map(|r| r.flops_pruned).sum(),
    })?;
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resnet56() -> ArchDescriptor {
        ArchDescriptor::preset("resnet56").unwrap()
    }

    fn schedule(arch: &str, sparsity: &str, mode: ScheduleMode) -> LayerSchedule {
        let a = ArchDescriptor::preset(arch).unwrap();
        LayerSchedule::from_file(&published_schedule(arch, sparsity, mode).unwrap(), &a).unwrap()
    }

    #[test]
    fn presets_validate() {
        for name in ArchDescriptor::preset_names() {
            let a = ArchDescriptor::preset(name).unwrap();
            a.validate().unwrap();
        }
        assert_eq!(resnet56().prunable_layers().len(), 55);
        assert_eq!(
            ArchDescriptor::preset("resnet110")
                .unwrap()
                .prunable_layers()
                .len(),
            109
        );
        assert_eq!(
            ArchDescriptor::preset("vgg16")
                .unwrap()
                .prunable_layers()
                .len(),
            13
        );
        assert_eq!(
            ArchDescriptor::preset("resnet50")
                .unwrap()
                .prunable_layers()
                .len(),
            49
        );
    }

    #[test]
    fn resnet56_kappa_schedule_parses() {
        let s = schedule("resnet56", "42.8", ScheduleMode::Kappa);
        let k = s.kappas(&resnet56(), KappaRounding::Truncate).unwrap();
        assert_eq!(k.len(), 55);
        assert_eq!(&k[..5], &[16, 9, 13, 9, 13]);
    }

    #[test]
    fn length_mismatch_rejected() {
        let arch = resnet56();
        let mut file = published_schedule("resnet56", "42.8", ScheduleMode::Kappa).unwrap();
        file.values.pop();
        match LayerSchedule::from_file(&file, &arch).unwrap_err() {
            Error::ScheduleLength {
                expected, found, ..
            } => assert_eq!((expected, found), (55, 54)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn kappa_above_width_rejected() {
        let arch = resnet56();
        let mut file = published_schedule("resnet56", "42.8", ScheduleMode::Kappa).unwrap();
        file.values[1] = 17.0;
        assert!(matches!(
            LayerSchedule::from_file(&file, &arch).unwrap_err(),
            Error::KappaOutOfRange {
                kappa: 17,
                channels: 16,
                ..
            }
        ));
        file.values[1] = 0.0;
        assert!(LayerSchedule::from_file(&file, &arch).is_err());
    }

    #[test]
    fn wrong_arch_name_rejected() {
        let file = published_schedule("vgg16", "81.6", ScheduleMode::Kappa).unwrap();
        assert!(LayerSchedule::from_file(&file, &resnet56()).is_err());
    }

    #[test]
    fn ratio_list_truncates_to_kappa_list() {
        let arch = resnet56();
        let from_ratio = schedule("resnet56", "42.8", ScheduleMode::Ratio)
            .kappas(&arch, KappaRounding::Truncate)
            .unwrap();
        let kappa = schedule("resnet56", "42.8", ScheduleMode::Kappa)
            .kappas(&arch, KappaRounding::Truncate)
            .unwrap();
        assert_eq!(from_ratio, kappa);
    }

    #[test]
    fn kappa_rounding_modes() {
        assert_eq!(kappa_from_ratio(16, 0.4, KappaRounding::Truncate), 9);
        assert_eq!(kappa_from_ratio(16, 0.4, KappaRounding::Nearest), 10);
        assert_eq!(kappa_from_ratio(512, 0.75, KappaRounding::Truncate), 128);
        assert_eq!(kappa_from_ratio(64, 0.0, KappaRounding::Nearest), 64);
    }

    #[test]
    fn full_kappa_schedule_equals_baseline() {
        let arch = resnet56();
        let full: Vec<usize> = arch
            .prunable_layers()
            .iter()
            .map(|c| c.out_channels)
            .collect();
        let s = LayerSchedule::from_kappas(&arch, &full).unwrap();
        let opts = CountOptions::default();
        assert_eq!(
            count_stats(&arch, Some(&s), opts).unwrap(),
            count_stats(&arch, None, opts).unwrap()
        );
    }

    #[test]
    fn resnet56_baseline_counts() {
        let arch = resnet56();
        let base = count_stats(&arch, None, CountOptions::default()).unwrap();
        let convs: u64 = 3 * 16 * 9
            + 18 * (16 * 16 * 9)
            + (16 * 32 * 9 + 17 * 32 * 32 * 9)
            + (32 * 64 * 9 + 17 * 64 * 64 * 9);
        let bn: u64 = 2 * (16 + 18 * 16 + 18 * 32 + 18 * 64);
        assert_eq!(base.params, convs + bn + 64 * 10 + 10);
        let no_bn = CountOptions {
            count_batch_norm: false,
            ..CountOptions::default()
        };
        assert_eq!(count_stats(&arch, None, no_bn).unwrap().params, convs + 650);
        assert_eq!(base.flops, 125_485_696);
    }

    #[test]
    fn resnet56_published_schedule_counts() {
        let arch = resnet56();
        let s = schedule("resnet56", "42.8", ScheduleMode::Kappa);
        let pruned = count_stats(&arch, Some(&s), CountOptions::default()).unwrap();
        assert_eq!(
            pruned,
            ModelStats {
                params: 485_413,
                flops: 65_168_128
            }
        );
    }

    #[test]
    fn mul_add_doubles_flops() {
        let arch = resnet56();
        let mac = count_stats(&arch, None, CountOptions::default()).unwrap();
        let muladd = count_stats(
            &arch,
            None,
            CountOptions {
                flops: FlopConvention::MulAdd,
                ..CountOptions::default()
            },
        )
        .unwrap();
        assert_eq!(muladd.flops, 2 * mac.flops);
        assert_eq!(muladd.params, mac.params);
    }

    #[test]
    fn reduction_arithmetic() {
        let b = ModelStats {
            params: 100,
            flops: 80,
        };
        let r = reduction_report(b, b).unwrap();
        assert_eq!((r.params_pct, r.flops_pct), (0.0, 0.0));
        let r = reduction_report(
            b,
            ModelStats {
                params: 50,
                flops: 80,
            },
        )
        .unwrap();
        assert_eq!(r.params_pct, 50.0);
        assert!(reduction_report(ModelStats::default(), b).is_err());
    }

    #[test]
    fn projection_shortcut_follows_block_output() {
        let arch = ArchDescriptor::preset("resnet50").unwrap();
        let s = schedule("resnet50", "56.7", ScheduleMode::Kappa);
        let rows = layer_stats(&arch, Some(&s), CountOptions::default()).unwrap();
        let ds = rows
            .iter()
            .find(|r| r.layer_id == "layer1.0.downsample")
            .unwrap();
        // conv1 keeps 64 inputs; layer1.0.conv3 is pruned to 192 of 256.
        assert_eq!(ds.params_pruned, 64 * 192 + 2 * 192);
        let next = rows
            .iter()
            .find(|r| r.layer_id == "layer1.1.conv1")
            .unwrap();
        assert_eq!(next.params_pruned, 192 * 32 + 2 * 32);
    }

    #[test]
    fn chain_errors_detected() {
        let mut arch = resnet56();
        if let LayerSpec::Conv(c) = &mut arch.layers[3] {
            c.in_channels = 15;
        }
        assert!(matches!(
            arch.validate().unwrap_err(),
            Error::InvalidArch { .. }
        ));
        let mut arch = resnet56();
        if let LayerSpec::Conv(c) = &mut arch.layers[3] {
            c.input_from = Some("nope".into());
        }
        assert!(arch.validate().is_err());
    }

    #[test]
    fn stats_csv_has_total() {
        let arch = ArchDescriptor::preset("vgg16").unwrap();
        let rows = layer_stats(&arch, None, CountOptions::default()).unwrap();
        let mut out = Vec::new();
        write_stats_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("layer_id,params_base,params_pruned,flops_base,flops_pruned\n"));
        assert!(text.lines().last().unwrap().starts_with("total,"));
    }
}
