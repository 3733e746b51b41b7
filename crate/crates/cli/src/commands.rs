//! One function per verb.

use std::io::Write;
use std::path::{Path, PathBuf};

use fedseg::aggregators::AggregatorSpec;
use fedseg::dataset::{
    export_crops as write_crops, generate_synthetic, load_manifest, stack, write_dataset, DatasetStats, Split,
};
use fedseg::federation::run_training;
use fedseg::fsio::write_atomic;
use fedseg::metrics::{evaluate, metrics_csv, write_metrics_csv, MetricsReport};
use fedseg::tensor::Tensor;
use fedseg::unet::{build_plan, save_checkpoint, LayerPlan, UNetConfig, UNetModel};
use fedseg::{Error, Result};

use crate::config::RunConfig;
use crate::pipeline::{load_model, load_raw, normalize_all, prepare, RawData};
use crate::{CheckpointFlags, CompareArgs, CropArgs, EvalArgs, Format, GenSyntheticArgs, InspectArgs, Preset, TrainArgs, TrainingFlags};

pub const CHECKPOINT_FILE: &str = "model.fseg";
pub const STATS_FILE: &str = "stats.json";
pub const CONFIG_FILE: &str = "config.json";
pub const ROUND_LOG_FILE: &str = "round_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const COMPARISON_COLUMNS: [&str; 8] = ["aggregator", "seed", "dice", "bce_dice", "iou", "rmse", "ssim", "scd"];

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn gen_synthetic(a: &GenSyntheticArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::Config("--count must be positive".into()));
    }
    let test = a.test_count.unwrap_or(a.count / 8);
    if test > a.count {
        return Err(Error::Config(format!("--test-count {test} exceeds --count {}", a.count)));
    }
    if a.out.exists() {
        let occupied = match std::fs::read_dir(&a.out) {
            Ok(mut d) => d.next().is_some(),
            Err(_) => true,
        };
        if occupied && !a.force {
            return Err(Error::Config(format!(
                "{} already exists and is not empty; pass --force to replace it",
                a.out.display()
            )));
        }
    }
    let samples = generate_synthetic(a.count, a.size, a.size, a.seed)?;
    if a.force {
        for sub in ["images", "masks"] {
            let d = a.out.join(sub);
            if d.is_dir() {
                std::fs::remove_dir_all(&d).map_err(|e| io_err(&d, e))?;
            }
        }
    }
    let train = a.count - test;
    let pairs: Vec<_> = samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, if i < train { Split::Train } else { Split::Test }))
        .collect();
    let manifest = write_dataset(&pairs, &a.out)?;
    println!(
        "wrote {} samples ({train} train, {test} test); manifest {}",
        a.count,
        manifest.display()
    );
    Ok(())
}

fn group(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn shape_text(s: [usize; 3]) -> String {
    format!("(None, {}, {}, {})", s[0], s[1], s[2])
}

fn print_table(plan: &LayerPlan, out: &mut impl Write) -> std::io::Result<()> {
    let rows: Vec<[String; 3]> = plan
        .layers
        .iter()
        .map(|l| {
            [
                format!("{} ({})", l.name, l.kind.type_name()),
                shape_text(l.output_shape),
                group(l.params),
            ]
        })
        .collect();
    let head = ["Layer (type)", "Output Shape", "Param #"];
    let wid: [usize; 3] = std::array::from_fn(|k| rows.iter().map(|r| r[k].len()).chain([head[k].len()]).max().unwrap());
    let line = |r: [&str; 3]| format!("{:<a$}  {:<b$}  {:>c$}", r[0], r[1], r[2], a = wid[0], b = wid[1], c = wid[2]);
    writeln!(out, "{}", line(head))?;
    writeln!(out, "{}", "=".repeat(wid.iter().sum::<usize>() + 4))?;
    for r in &rows {
        writeln!(out, "{}", line([&r[0], &r[1], &r[2]]))?;
    }
    writeln!(out, "{}", "=".repeat(wid.iter().sum::<usize>() + 4))?;
    let t = plan.totals();
    writeln!(out, "Total params: {}", group(t.total))?;
    writeln!(out, "Trainable params: {}", group(t.trainable))?;
    writeln!(out, "Non-trainable params: {}", group(t.non_trainable))?;
    writeln!(
        out,
        "{} / {} / {}",
        group(t.total),
        group(t.trainable),
        group(t.non_trainable)
    )
}

fn table_csv(plan: &LayerPlan) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "type", "output_h", "output_w", "output_c", "params", "trainable_params"])?;
    for l in &plan.layers {
        let [h, wd, c] = l.output_shape;
        w.write_record([
            l.name.clone(),
            l.kind.type_name().to_string(),
            h.to_string(),
            wd.to_string(),
            c.to_string(),
            l.params.to_string(),
            l.trainable_params.to_string(),
        ])?;
    }
    let t = plan.totals();
    for (name, total, trainable) in [
        ("total", t.total, t.trainable),
        ("non_trainable", t.non_trainable, 0),
    ] {
        w.write_record([name, "summary", "", "", "", &total.to_string(), &trainable.to_string()])?;
    }
    w.into_inner().map_err(|e| io_err(Path::new("<stdout>"), e.into_error()))
}

pub fn inspect_model(a: &InspectArgs) -> Result<()> {
    let mut unet = match &a.config {
        Some(p) => RunConfig::load(p)?.unet,
        None => match a.preset {
            Preset::Full => UNetConfig::default(),
            Preset::Desk => UNetConfig::desk(),
        },
    };
    if let Some(s) = a.width_scale {
        unet.width_scale = s;
    }
    if let Some(n) = a.input_size {
        unet.input_h = n;
        unet.input_w = n;
    }
    unet.validate()?;
    let plan = build_plan(&unet)?;
    let stdout = Path::new("<stdout>");
    let mut out = std::io::stdout().lock();
    match a.format {
        Format::Table => print_table(&plan, &mut out).map_err(|e| io_err(stdout, e)),
        Format::Csv => out.write_all(&table_csv(&plan)?).map_err(|e| io_err(stdout, e)),
    }
}

fn spec_for_label(label: &str, candidates: &[AggregatorSpec]) -> Result<AggregatorSpec> {
    if let Some(s) = candidates.iter().find(|s| s.label() == label) {
        return Ok(s.clone());
    }
    match label {
        "mean" => Ok(AggregatorSpec::default()),
        "dpf" => Ok(AggregatorSpec::dp()),
        "pqep" => Ok(AggregatorSpec::adaptive()),
        other => Err(Error::Config(format!("unknown aggregator {other:?}; expected mean, dpf or pqep"))),
    }
}

fn set_noise(spec: &mut AggregatorSpec, value: f64) {
    match spec {
        AggregatorSpec::Mean { .. } => {}
        AggregatorSpec::Dp { noise_multiplier, .. } | AggregatorSpec::AdaptiveQuantile { noise_multiplier, .. } => {
            *noise_multiplier = value
        }
    }
}

/// Loads the config file (if any) and applies the flags over it.
fn training_config(f: &TrainingFlags) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(f.config.as_deref())?;
    if let Some(p) = &f.manifest {
        cfg.paths.manifest = Some(p.clone());
    }
    if let Some(p) = &f.out {
        cfg.paths.output_dir = Some(p.clone());
    }
    if let Some(v) = f.rounds {
        cfg.fl.rounds = v;
    }
    if let Some(v) = f.clients {
        cfg.fl.num_clients = v;
    }
    if let Some(v) = f.local_epochs {
        cfg.fl.local_epochs = v;
    }
    if let Some(v) = f.batch_size {
        cfg.fl.batch_size = v;
    }
    if let Some(v) = f.copies {
        cfg.augment.copies = v;
    }
    if f.no_wall_time {
        cfg.fl.log_wall_time = false;
    }
    Ok(cfg)
}

fn summary(r: &MetricsReport) -> String {
    format!(
        "dice {:.4}  iou {:.4}  bce_dice {:.4}  rmse {:.4}  ssim {:.4}  scd {:.4}",
        r.dice, r.iou, r.bce_dice, r.rmse, r.ssim, r.scd
    )
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = training_config(&a.common)?;
    if let Some(s) = a.seed {
        cfg.seed = Some(s);
    }
    if let Some(label) = &a.aggregator {
        cfg.fl.aggregator = spec_for_label(label, &cfg.compare.aggregators)?;
    }
    if let Some(n) = a.noise_multiplier {
        set_noise(&mut cfg.fl.aggregator, n);
    }
    let mut cfg = cfg.resolved();
    cfg.validate()?;
    cfg.apply_thread_cap()?;
    let manifest = cfg.manifest()?;
    let out = cfg.output_dir()?;
    let raw = load_raw(&cfg, &manifest)?;
    let prep = prepare(&cfg, &raw)?;
    let model = UNetModel::build(&cfg.unet)?;

    create_dir(&out)?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    if let Some(stats) = &prep.stats {
        stats.save(&out.join(STATS_FILE))?;
    }
    log::info!(
        "training on {} samples ({} originals), testing on {}",
        prep.train.len(),
        raw.train.len(),
        prep.test.len()
    );
    let outcome = run_training(
        &cfg.fl,
        model,
        &prep.train,
        &prep.test,
        &cfg.metrics,
        Some(&out.join(ROUND_LOG_FILE)),
    )?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), outcome.model.weights())?;
    write_metrics_csv(
        &out.join(METRICS_FILE),
        &[(cfg.fl.aggregator.label().to_string(), "test".into(), outcome.report.clone())],
    )?;
    println!("test {}", summary(&outcome.report));
    println!("outputs in {}", out.display());
    Ok(())
}

/// Config for a checkpoint: the flag, else `config.json` beside it, else
/// the defaults.
fn checkpoint_config(f: &CheckpointFlags) -> Result<RunConfig> {
    let beside = f.checkpoint.parent().map(|d| d.join(CONFIG_FILE));
    let path = f.config.clone().or(beside.filter(|p| p.is_file()));
    let mut cfg = RunConfig::load_or_default(path.as_deref())?;
    if let Some(p) = &f.manifest {
        cfg.paths.manifest = Some(p.clone());
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_stats(f: &CheckpointFlags, cfg: &RunConfig) -> Result<Option<DatasetStats>> {
    if !cfg.augment.needs_stats() {
        return Ok(None);
    }
    let beside = f.checkpoint.parent().map(|d| d.join(STATS_FILE));
    match f.stats.clone().or(beside.filter(|p| p.is_file())) {
        Some(p) => DatasetStats::load(&p).map(Some),
        None => Err(Error::MissingStats),
    }
}

/// Model, raw samples of the requested split and their normalized copies.
struct Loaded {
    model: UNetModel,
    raw: Vec<fedseg::dataset::ImageSample>,
    normalized: Vec<fedseg::dataset::ImageSample>,
    split: Split,
    cfg: RunConfig,
}

fn load_for_checkpoint(f: &CheckpointFlags) -> Result<Loaded> {
    let cfg = checkpoint_config(f)?;
    let manifest = cfg.manifest()?;
    let stats = checkpoint_stats(f, &cfg)?;
    let model = load_model(&cfg, &f.checkpoint)?;
    let split: Split = f.split.into();
    let raw = load_manifest(&manifest)?.load_split(split, cfg.unet.input_h, cfg.unet.input_w, cfg.augment.rescale)?;
    if raw.is_empty() {
        return Err(Error::Config(format!("{} has no {} records", manifest.display(), split_name(split))));
    }
    let normalized = normalize_all(&raw, &cfg, stats.as_ref())?;
    Ok(Loaded {
        model,
        raw,
        normalized,
        split,
        cfg,
    })
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
    }
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let l = load_for_checkpoint(&a.common)?;
    let report = evaluate(&l.model, &l.normalized, &l.cfg.metrics)?;
    let run = a
        .common
        .checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let rows = [(run, split_name(l.split).to_string(), report.clone())];
    match &a.out {
        Some(p) => {
            write_metrics_csv(p, &rows)?;
            println!("{} {}", split_name(l.split), summary(&report));
        }
        None => std::io::stdout()
            .lock()
            .write_all(&metrics_csv(&rows)?)
            .map_err(|e| io_err(Path::new("<stdout>"), e))?,
    }
    Ok(())
}

pub fn export_crops(a: &CropArgs) -> Result<()> {
    let l = load_for_checkpoint(&a.common)?;
    let (images, _) = stack(&l.normalized)?;
    let pred = l.model.predict(&images, l.cfg.metrics.batch_size)?;
    let [_, h, w, c] = pred.nhwc()?;
    let thr = l.cfg.metrics.binarize_threshold as f32;
    let masks = pred
        .data()
        .chunks_exact(h * w * c)
        .map(|p| Tensor::new([h, w, c], p.iter().map(|&v| if v >= thr { 1.0 } else { 0.0 }).collect()))
        .collect::<Result<Vec<_>>>()?;
    let report = write_crops(&l.raw, &masks, &a.out)?;
    let empty = report.rows.iter().filter(|r| r.status != "ok").count();
    println!(
        "wrote {} crops ({empty} empty predictions) and crops.csv to {}",
        report.files.len(),
        a.out.display()
    );
    Ok(())
}

struct CompareRow {
    label: &'static str,
    seed: String,
    report: MetricsReport,
}

fn comparison_csv(rows: &[CompareRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COMPARISON_COLUMNS)?;
    for r in rows {
        let m = &r.report;
        let mut rec = vec![r.label.to_string(), r.seed.clone()];
        rec.extend([m.dice, m.bce_dice, m.iou, m.rmse, m.ssim, m.scd].map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| io_err(Path::new("<comparison csv>"), e.into_error()))
}

fn mean_report(reports: &[&MetricsReport]) -> MetricsReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    MetricsReport {
        dice: avg(|r| r.dice),
        bce: avg(|r| r.bce),
        bce_dice: avg(|r| r.bce_dice),
        iou: avg(|r| r.iou),
        rmse: avg(|r| r.rmse),
        ssim: avg(|r| r.ssim),
        cosine_similarity: avg(|r| r.cosine_similarity),
        scd: avg(|r| r.scd),
        accuracy: avg(|r| r.accuracy),
        recall: avg(|r| r.recall),
        precision: avg(|r| r.precision),
        f1: avg(|r| r.f1),
        auc: avg(|r| r.auc),
        samples: reports.first().map_or(0, |r| r.samples),
        dice_per_image: avg(|r| r.dice_per_image),
        iou_per_image: avg(|r| r.iou_per_image),
        ..Default::default()
    }
}

fn run_one(cfg: &RunConfig, raw: &RawData, log_path: PathBuf) -> Result<MetricsReport> {
    let prep = prepare(cfg, raw)?;
    let model = UNetModel::build(&cfg.unet)?;
    let outcome = run_training(&cfg.fl, model, &prep.train, &prep.test, &cfg.metrics, Some(&log_path))?;
    Ok(outcome.report)
}

pub fn compare_aggregators(a: &CompareArgs) -> Result<()> {
    let mut cfg = training_config(&a.common)?;
    let labels: Vec<String> = match &a.aggregators {
        Some(l) => l.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => cfg.compare.aggregators.iter().map(|s| s.label().to_string()).collect(),
    };
    let mut specs = labels
        .iter()
        .map(|l| spec_for_label(l, &cfg.compare.aggregators))
        .collect::<Result<Vec<_>>>()?;
    if let Some(n) = a.noise_multiplier {
        specs.iter_mut().for_each(|s| set_noise(s, n));
    }
    let seeds = a.seeds.clone().unwrap_or_else(|| cfg.compare.seeds.clone());
    if specs.is_empty() || seeds.is_empty() {
        return Err(Error::Config("need at least one aggregator and one seed".into()));
    }
    cfg.validate()?;
    for s in &specs {
        s.validate()?;
    }
    cfg.apply_thread_cap()?;
    let manifest = cfg.manifest()?;
    let out = cfg.output_dir()?;
    let raw = load_raw(&cfg, &manifest)?;

    create_dir(&out)?;
    let mut rows = Vec::new();
    let mut metric_rows = Vec::new();
    for spec in &specs {
        let label = spec.label();
        let first = rows.len();
        for &seed in &seeds {
            let mut run = cfg.clone();
            run.seed = Some(seed);
            run.fl.aggregator = spec.clone();
            let run = run.resolved();
            log::info!("{label}, seed {seed}");
            let report = run_one(&run, &raw, out.join(format!("round_log_{label}_seed{seed}.csv")))?;
            metric_rows.push((format!("{label}_seed{seed}"), "test".to_string(), report.clone()));
            rows.push(CompareRow {
                label,
                seed: seed.to_string(),
                report,
            });
        }
        let mean = mean_report(&rows[first..].iter().map(|r| &r.report).collect::<Vec<_>>());
        metric_rows.push((format!("{label}_mean"), "test".to_string(), mean.clone()));
        rows.push(CompareRow {
            label,
            seed: "mean".into(),
            report: mean,
        });
        write_atomic(&out.join(COMPARISON_FILE), &comparison_csv(&rows)?)?;
        write_metrics_csv(&out.join(METRICS_FILE), &metric_rows)?;
    }
    for r in rows.iter().filter(|r| r.seed == "mean") {
        println!("{:<5} {}", r.label, summary(&r.report));
    }
    println!("outputs in {}", out.display());
    Ok(())
}
