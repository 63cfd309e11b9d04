use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;

use chip_core::accounting::{
    layer_stats, parse_schedule, published_schedules, reduction_report, write_stats_csv,
    ArchDescriptor, CountOptions, FlopConvention, KappaRounding, LayerSchedule, ModelStats,
};
use chip_core::ci::{brute_force_min_subset, greedy_min_subset};
use chip_core::ci::{
    distinct_count, BruteForceLimits, CiContext, DEFAULT_RANK_TOL, NEGATIVE_CI_TOLERANCE,
};
use chip_core::desknet::{
    prune_compare, CompareConfig, Criterion, Dataset, MicroNet, SyntheticTask, TaskData,
    TrainConfig,
};
use chip_core::scoring::{
    mask_file_name, score_file_name, score_model, select_mask, stability_analysis, CiScoreVector,
    ScoreOptions,
};
use chip_core::tensor_io::{load_feature_maps, matricize, Dtype, DumpManifest};

use crate::output::{csv_file, ensure_dir};
use crate::{Cli, Command, Global, UsageError};

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Score(a) => score(g, a),
        Command::Prune(a) => prune(g, a),
        Command::Oracle(a) => oracle(g, a),
        Command::Stability(a) => stability(g, a),
        Command::MetricCompare(a) => metric_compare(g, a),
        Command::Demo(a) => demo(g, a),
        Command::Capture(a) => capture(g, a),
    }
}

fn out_dir(global: &Global, local: &Option<PathBuf>) -> PathBuf {
    local.clone().unwrap_or_else(|| global.out_dir.clone())
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_manifest(path: &Path) -> Result<(DumpManifest, PathBuf)> {
    let manifest = DumpManifest::load(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, root))
}

fn write_json_file(path: &Path, save: impl FnOnce(&Path) -> chip_core::Result<()>) -> Result<()> {
    save(path).with_context(|| format!("writing {}", path.display()))
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Activation dump manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Samples to draw (default: all).
    #[arg(long)]
    pub samples: Option<usize>,
    /// Samples per batch for the per-batch vectors (default: one batch).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Directory for `<layer>.scores.json` (default: --out-dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn score(g: &Global, a: &ScoreArgs) -> Result<()> {
    let (manifest, root) = load_manifest(&a.manifest)?;
    let samples = a.samples.unwrap_or(manifest.num_samples);
    if samples == 0 || samples > manifest.num_samples {
        return Err(usage(format!(
            "--samples {samples} must be between 1 and the {} samples in the manifest",
            manifest.num_samples
        )));
    }
    let opts = ScoreOptions {
        sample_count: samples,
        batch_size: a.batch_size.unwrap_or(samples),
        seed: g.seed,
    };
    let scores = score_model(&manifest, &root, opts)?;
    let dir = out_dir(g, &a.out);
    ensure_dir(&dir)?;
    for (layer, s) in &scores.layers {
        let path = dir.join(score_file_name(layer));
        write_json_file(&path, |p| s.overall.save(p))?;
        log::info!(
            "{layer}: {} channels -> {}",
            s.overall.channels(),
            path.display()
        );
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    /// Directory holding `<layer>.scores.json` for every prunable layer.
    #[arg(long)]
    pub scores_dir: PathBuf,
    /// Schedule JSON file, or a shipped list such as `resnet56_42.8_kappa`.
    #[arg(long)]
    pub schedule: String,
    /// Architecture JSON file or preset name (resnet56, resnet110, vgg16, resnet50).
    #[arg(long)]
    pub arch: String,
    /// Ratio to kept-filter conversion.
    #[arg(long, value_enum, default_value = "truncate")]
    pub rounding: Rounding,
    /// Leave batch-norm parameters out of the counts.
    #[arg(long)]
    pub no_batch_norm: bool,
    /// Count multiply and add separately.
    #[arg(long)]
    pub mul_add: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum Rounding {
    Truncate,
    Nearest,
}

fn load_schedule(spec: &str, arch: &ArchDescriptor) -> Result<LayerSchedule> {
    let path = Path::new(spec);
    if path.exists() {
        return Ok(parse_schedule(path, arch)?);
    }
    let shipped = published_schedules()
        .into_iter()
        .find(|p| format!("{}_{}_{}", p.arch, p.sparsity, mode_name(&p.file)) == spec)
        .ok_or_else(|| {
            usage(format!(
                "schedule {spec} is neither a file nor a shipped list"
            ))
        })?;
    Ok(LayerSchedule::from_file(&shipped.file, arch)?)
}

fn mode_name(file: &chip_core::accounting::ScheduleFile) -> &'static str {
    match file.mode {
        chip_core::accounting::ScheduleMode::Kappa => "kappa",
        chip_core::accounting::ScheduleMode::Ratio => "ratio",
    }
}

fn prune(g: &Global, a: &PruneArgs) -> Result<()> {
    let arch = ArchDescriptor::load_or_preset(&a.arch)?;
    let schedule = load_schedule(&a.schedule, &arch)?;
    let opts = CountOptions {
        count_batch_norm: !a.no_batch_norm,
        flops: if a.mul_add {
            FlopConvention::MulAdd
        } else {
            FlopConvention::Mac
        },
        rounding: match a.rounding {
            Rounding::Truncate => KappaRounding::Truncate,
            Rounding::Nearest => KappaRounding::Nearest,
        },
    };
    let kappas = schedule.kappas(&arch, opts.rounding)?;
    let dir = out_dir(g, &a.out);
    ensure_dir(&dir)?;
    for (layer, &kappa) in arch.prunable_layers().into_iter().zip(&kappas) {
        let path = a.scores_dir.join(score_file_name(&layer.layer_id));
        let scores =
            CiScoreVector::load(&path).with_context(|| format!("scores for {}", layer.layer_id))?;
        if scores.channels() != layer.out_channels {
            return Err(chip_core::Error::ShapeMismatch {
                layer_id: layer.layer_id.clone(),
                expected: vec![layer.out_channels],
                found: vec![scores.channels()],
            }
            .into());
        }
        let mask = select_mask(&scores, kappa)?;
        write_json_file(&dir.join(mask_file_name(&layer.layer_id)), |p| mask.save(p))?;
    }
    let rows = layer_stats(&arch, Some(&schedule), opts)?;
    let (path, mut w) = csv_file(g, &dir, "stats.csv")?;
    write_stats_csv(&rows, &mut w)?;
    w.flush()?;
    let base = ModelStats {
        params: rows.iter().map(|r| r.params_base).sum(),
        flops: rows.iter().map(|r| r.flops_base).sum(),
    };
    let pruned = ModelStats {
        params: rows.iter().map(|r| r.params_pruned).sum(),
        flops: rows.iter().map(|r| r.flops_pruned).sum(),
    };
    let red = reduction_report(base, pruned)?;
    log::info!(
        "{}: params {} -> {} ({:.2}% fewer), FLOPs {} -> {} ({:.2}% fewer); {}",
        arch.name,
        base.params,
        pruned.params,
        red.params_pct,
        base.flops,
        pruned.flops,
        red.flops_pct,
        path.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub layer: String,
    /// Channels to remove.
    #[arg(long)]
    pub prune_count: usize,
    /// Refuse layers with more channels than this.
    #[arg(long, default_value_t = 20)]
    pub max_rows: usize,
    /// Refuse searches over more subsets than this.
    #[arg(long, default_value_t = 1_000_000)]
    pub max_subsets: u128,
    /// Samples to evaluate, starting at sample 0 (default: all).
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn join_channels(c: &[usize]) -> String {
    c.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

fn oracle(g: &Global, a: &OracleArgs) -> Result<()> {
    let (manifest, root) = load_manifest(&a.manifest)?;
    manifest.validate()?;
    let entry = manifest
        .layer(&a.layer)
        .ok_or_else(|| chip_core::Error::UnknownLayer(a.layer.clone()))?;
    let limits = BruteForceLimits {
        max_rows: a.max_rows,
        max_subsets: a.max_subsets,
    };
    // Refuse oversized searches before touching any file.
    if entry.c > limits.max_rows {
        return Err(chip_core::Error::CombinatorialGuard(format!(
            "layer {} has {} channels: C({}, {}) = {} subsets, above the {}-row limit",
            a.layer,
            entry.c,
            entry.c,
            a.prune_count,
            chip_core::ci::binomial(entry.c, a.prune_count),
            limits.max_rows
        ))
        .into());
    }
    let samples = a.samples.unwrap_or(manifest.num_samples);
    if samples > manifest.num_samples {
        return Err(usage(format!(
            "--samples {samples} exceeds {}",
            manifest.num_samples
        )));
    }
    let dir = out_dir(g, &a.out);
    let (path, w) = csv_file(g, &dir, &format!("{}.oracle.csv", a.layer))?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record([
        "sample_id",
        "greedy_subset",
        "oracle_subset",
        "greedy_exact_ci",
        "oracle_ci",
        "gap",
        "agree",
    ])?;
    let mut agree = 0;
    for sample in 0..samples {
        let fm = load_feature_maps(
            &manifest.sample_path(&root, &a.layer, sample)?,
            &manifest,
            &a.layer,
            sample,
        )?;
        let m = matricize(&fm);
        let best = brute_force_min_subset(&m, a.prune_count, limits)?;
        let greedy = greedy_min_subset(&m, a.prune_count)?;
        let same = best.channels == greedy.channels;
        agree += usize::from(same);
        csv.write_record([
            sample.to_string(),
            join_channels(&greedy.channels),
            join_channels(&best.channels),
            greedy.value.to_string(),
            best.value.to_string(),
            (greedy.value - best.value).to_string(),
            same.to_string(),
        ])?;
    }
    csv.flush()?;
    log::info!(
        "{}: greedy matched the oracle on {agree}/{samples} samples; {}",
        a.layer,
        path.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct StabilityArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub batches: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    /// Restrict to one layer (default: every layer in the manifest).
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn stability(g: &Global, a: &StabilityArgs) -> Result<()> {
    let (mut manifest, root) = load_manifest(&a.manifest)?;
    if let Some(layer) = &a.layer {
        if manifest.layer(layer).is_none() {
            return Err(chip_core::Error::UnknownLayer(layer.clone()).into());
        }
        manifest.layers.retain(|l| &l.layer_id == layer);
    }
    let needed = a.batches * a.batch_size;
    if a.batches < 2 || a.batch_size == 0 || needed > manifest.num_samples {
        return Err(usage(format!(
            "{} batches of {} need {needed} samples (at least 2 batches); the manifest has {}",
            a.batches, a.batch_size, manifest.num_samples
        )));
    }
    let scores = score_model(
        &manifest,
        &root,
        ScoreOptions {
            sample_count: needed,
            batch_size: a.batch_size,
            seed: g.seed,
        },
    )?;
    let dir = out_dir(g, &a.out);
    for (layer, s) in &scores.layers {
        let matrix = stability_analysis(&s.batches)?;
        let (_, mut w) = csv_file(g, &dir, &format!("{layer}.pearson.csv"))?;
        matrix.write_csv(&mut w)?;
        w.flush()?;

        let (_, w) = csv_file(g, &dir, &format!("{layer}.batch_scores.csv"))?;
        let mut csv = csv::Writer::from_writer(w);
        let channels = s.overall.channels();
        let header: Vec<String> = std::iter::once("batch".to_string())
            .chain((0..channels).map(|c| format!("channel_{c}")))
            .collect();
        csv.write_record(&header)?;
        for (b, v) in s.batches.iter().enumerate() {
            csv.write_record(
                std::iter::once(b.to_string()).chain(v.scores.iter().map(|x| format!("{x:.9}"))),
            )?;
        }
        csv.flush()?;
        log::info!(
            "{layer}: mean off-diagonal Pearson {}, min {}",
            fmt_opt(matrix.mean_off_diagonal()),
            fmt_opt(matrix.min_off_diagonal())
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"))
}

#[derive(Args, Debug)]
pub struct MetricCompareArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub layer: String,
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    /// Singular values at or below this fraction of the largest count as zero.
    #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
    pub rank_tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn metric_compare(g: &Global, a: &MetricCompareArgs) -> Result<()> {
    let (manifest, root) = load_manifest(&a.manifest)?;
    manifest.validate()?;
    if manifest.layer(&a.layer).is_none() {
        return Err(chip_core::Error::UnknownLayer(a.layer.clone()).into());
    }
    if a.sample >= manifest.num_samples {
        return Err(usage(format!("--sample {} is out of range", a.sample)));
    }
    let path = manifest.sample_path(&root, &a.layer, a.sample)?;
    let m = matricize(&load_feature_maps(&path, &manifest, &a.layer, a.sample)?);
    let ctx = CiContext::new(&m)?;
    let ci = ctx.all_single()?;
    let ranks = (0..m.rows())
        .map(|c| ctx.rank_change(c, a.rank_tol))
        .collect::<chip_core::Result<Vec<_>>>()?;
    let dir = out_dir(g, &a.out);
    let (out, w) = csv_file(g, &dir, &format!("{}.metric_compare.csv", a.layer))?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["channel", "rank_change", "nuclear_norm_change"])?;
    for (c, (r, v)) in ranks.iter().zip(&ci).enumerate() {
        csv.write_record([c.to_string(), r.to_string(), v.value.to_string()])?;
    }
    csv.flush()?;
    let values: Vec<f64> = ci.iter().map(|v| v.value).collect();
    let rank_values: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
    log::info!(
        "{}: {} distinct nuclear-norm changes, {} distinct rank changes; {}",
        a.layer,
        distinct_count(&values, NEGATIVE_CI_TOLERANCE * ctx.full_norm()),
        distinct_count(&rank_values, 0.5),
        out.display()
    );
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Training epochs for the unpruned network.
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// L2 penalty (0.05 reproduces the large-scale fine-tuning setting).
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Directory with CIFAR-10 binary batches to use instead of the synthetic task.
    #[arg(long)]
    pub cifar_dir: Option<PathBuf>,
    /// Cap on CIFAR-10 training images.
    #[arg(long)]
    pub cifar_limit: Option<usize>,
}

impl TrainArgs {
    fn config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed,
        }
    }

    fn data(&self) -> Result<TaskData> {
        let Some(dir) = &self.cifar_dir else {
            return Ok(SyntheticTask::reference().generate()?);
        };
        let train_files: Vec<PathBuf> = (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect();
        let refs: Vec<&Path> = train_files.iter().map(PathBuf::as_path).collect();
        let test = dir.join("test_batch.bin");
        Ok(TaskData {
            train: Dataset::from_cifar10_binary(&refs, self.cifar_limit)?,
            test: Dataset::from_cifar10_binary(&[&test], self.cifar_limit)?,
        })
    }

    fn trained(&self, data: &TaskData, seed: u64) -> Result<MicroNet> {
        let mut net = MicroNet::reference(data.train.num_classes, seed)?;
        let report = net.train(&data.train, &self.config(self.epochs, seed))?;
        log::info!(
            "trained {} epochs: loss {:.4} -> {:.4}, test accuracy {:.4}",
            self.epochs,
            report.epoch_losses.first().copied().unwrap_or(f64::NAN),
            report.epoch_losses.last().copied().unwrap_or(f64::NAN),
            net.accuracy(&data.test)
        );
        Ok(net)
    }
}

fn parse_criterion(s: &str) -> std::result::Result<Criterion, String> {
    s.parse().map_err(|e: chip_core::Error| e.to_string())
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    /// Fraction of filters removed from every conv layer.
    #[arg(long, default_value_t = 0.5)]
    pub ratio: f64,
    #[arg(long, value_delimiter = ',', default_value = "chip,random,l1norm", value_parser = parse_criterion)]
    pub criteria: Vec<Criterion>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 3)]
    pub finetune_epochs: usize,
    /// Training samples scored for the CHIP criterion.
    #[arg(long, default_value_t = 256)]
    pub score_samples: usize,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn demo(g: &Global, a: &DemoArgs) -> Result<()> {
    if !(0.0..1.0).contains(&a.ratio) {
        return Err(usage(format!("--ratio {} must be in [0, 1)", a.ratio)));
    }
    if a.criteria.is_empty() || a.seeds.is_empty() {
        return Err(usage("need at least one criterion and one seed"));
    }
    let data = a.train.data()?;
    let net = a.train.trained(&data, g.seed)?;
    let cfg = CompareConfig {
        ratio: a.ratio,
        criteria: a.criteria.clone(),
        seeds: a.seeds.clone(),
        finetune: a.train.config(a.finetune_epochs, 0),
        score_samples: a.score_samples,
    };
    let report = prune_compare(&net, &data, &cfg)?;
    let dir = out_dir(g, &a.out);
    let (path, mut w) = csv_file(g, &dir, "demo.csv")?;
    report.write_csv(&mut w)?;
    w.flush()?;
    log::info!(
        "unpruned: accuracy {:.4}, {} params, {} FLOPs",
        report.baseline_acc,
        report.baseline_params,
        report.baseline_flops
    );
    let mut seen = BTreeMap::new();
    for c in &a.criteria {
        if seen.insert(*c, ()).is_none() {
            log::info!(
                "{c}: mean accuracy {} after pruning, {} after fine-tuning",
                fmt_opt(report.mean_acc_pre(*c)),
                fmt_opt(report.mean_acc_post(*c))
            );
        }
    }
    log::info!("{}", path.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct CaptureArgs {
    /// Training samples to dump, starting at sample 0.
    #[arg(long, default_value_t = 640)]
    pub samples: usize,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: DtypeArg,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum DtypeArg {
    F32,
    F64,
}

fn capture(g: &Global, a: &CaptureArgs) -> Result<()> {
    let data = a.train.data()?;
    if a.samples == 0 || a.samples > data.train.len() {
        return Err(usage(format!(
            "--samples must be between 1 and {}",
            data.train.len()
        )));
    }
    let net = a.train.trained(&data, g.seed)?;
    let dir = out_dir(g, &a.out);
    ensure_dir(&dir)?;
    let dtype = match a.dtype {
        DtypeArg::F32 => Dtype::F32,
        DtypeArg::F64 => Dtype::F64,
    };
    let manifest = net.capture_activations(&data.train, a.samples, &dir, dtype)?;
    let arch_path = dir.join("arch.json");
    std::fs::write(&arch_path, net.arch_descriptor("micronet").to_json())
        .with_context(|| format!("writing {}", arch_path.display()))?;
    log::info!(
        "{} layers x {} samples -> {}",
        manifest.layers.len(),
        manifest.num_samples,
        dir.join("manifest.json").display()
    );
    Ok(())
}
