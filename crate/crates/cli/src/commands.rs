use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use log::info;
use qcfs_core::convert::{
    conversion_error_empirical, conversion_error_grid, convert as convert_net, default_range,
    layer_surgery_experiment, write_surgery_csv, ConversionReport, SurgeryPlan,
};
use qcfs_core::eval::{evaluate, EvalConfig, Evaluation, Runner};
use qcfs_core::graph::{Activation, Layer, NetworkGraph, TinyDetectorConfig};
use qcfs_core::metrics::dataset::{load_scenes, load_yolo_dataset, write_yolo_split, SplitSpec};
use qcfs_core::metrics::{write_curves_csv, write_pr_csv, write_report_csv, write_report_json, Curve};
use qcfs_core::par;
use qcfs_core::qcfs::QcfsParams;
use qcfs_core::train::{
    generate_synthetic_with, train as train_net, write_training_curves, Scene, SyntheticConfig, TrainConfig,
    SHAPE_CLASSES,
};
use serde::Serialize;

use crate::{config, AnalyzeErrorArgs, Common, ConvertArgs, DataArgs, EvalArgs, EvalOpts, GenDataArgs, SimulateArgs, TrainArgs};

pub const CHECKPOINT: &str = "checkpoint.qcfsnet";
pub const CONVERTED: &str = "converted.qcfsnet";

fn setup(common: &Common, command: &str, args: &impl Serialize) -> Result<()> {
    par::configure_threads(common.threads);
    config::echo(&common.out, command, args)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn synthetic(d: &DataArgs) -> Result<(Vec<Scene>, Vec<Scene>)> {
    ensure!(d.train_scenes > 0 && d.val_scenes > 0, "scene counts must be at least 1");
    let cfg = SyntheticConfig {
        size: d.image_size,
        ..SyntheticConfig::default()
    };
    let mut train = generate_synthetic_with(d.train_scenes + d.val_scenes, d.data_seed, &cfg)?;
    let val = train.split_off(d.train_scenes);
    Ok((train, val))
}

fn yolo_split(root: &Path, split: &str, size: usize) -> Result<Vec<Scene>> {
    let ds = load_yolo_dataset(root, &SplitSpec::default())?;
    let samples = ds.split(split)?;
    ensure!(!samples.is_empty(), "split {split:?} of {} is empty", root.display());
    Ok(load_scenes(samples, size)?)
}

fn eval_scenes(d: &DataArgs, split: &str) -> Result<Vec<Scene>> {
    match &d.data {
        Some(root) => yolo_split(root, split, d.image_size),
        None => {
            let (train, val) = synthetic(d)?;
            match split {
                "train" => Ok(train),
                "val" => Ok(val),
                other => bail!("synthetic data has train and val splits, not {other:?}"),
            }
        }
    }
}

fn eval_config(e: &EvalOpts) -> EvalConfig {
    EvalConfig {
        conf_threshold: e.conf,
        nms_iou: e.nms_iou,
        batch_size: e.eval_batch,
    }
}

fn load(path: &Path) -> Result<NetworkGraph> {
    NetworkGraph::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_metrics(dir: &Path, prefix: &str, eval: &Evaluation) -> Result<()> {
    let r = &eval.report;
    write_report_json(r, create(dir, &format!("{prefix}metrics.json"))?)?;
    write_report_csv(r, create(dir, &format!("{prefix}metrics.csv"))?)?;
    write_pr_csv(r, create(dir, &format!("{prefix}pr.csv"))?)?;
    for (curve, name) in [(Curve::F1, "f1"), (Curve::Precision, "precision"), (Curve::Recall, "recall")] {
        write_curves_csv(r, curve, create(dir, &format!("{prefix}{name}.csv"))?)?;
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    setup(&a.common, "train", a)?;
    let (train_set, val_set) = match &a.data.data {
        Some(root) => (
            yolo_split(root, "train", a.data.image_size)?,
            yolo_split(root, &a.eval.split, a.data.image_size)?,
        ),
        None => synthetic(&a.data)?,
    };
    if let Some(c) = train_set.iter().chain(&val_set).flat_map(|s| &s.objects).map(|o| o.class).max() {
        ensure!(c < a.classes, "labels use class {c} but --classes is {}", a.classes);
    }
    info!("{} training scenes, {} validation scenes", train_set.len(), val_set.len());

    let mut net = TinyDetectorConfig {
        input_size: a.data.image_size,
        initial_lambda: a.lambda_init,
        seed: a.seed,
        ..TinyDetectorConfig::new(a.classes, a.activation, a.levels)
    }
    .build()?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        cosine: !a.no_cosine,
        seed: a.seed,
        activation: a.activation,
        levels: a.levels,
        eval: eval_config(&a.eval),
        ..TrainConfig::default()
    };
    info!("{} parameters", net.parameter_count());
    let records = train_net(&mut net, &train_set, &val_set, &cfg, |_| {})?;

    let dir = &a.common.out;
    write_training_curves(&records, create(dir, "curves.csv")?)?;
    net.save(dir.join(CHECKPOINT))?;
    if let Some(last) = records.last() {
        println!(
            "{} after {} epochs: mAP@.5 {:.4}, mAP@.5:.95 {:.4}",
            a.activation.name(),
            last.epoch,
            last.map50,
            last.map5095
        );
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let net = load(&a.checkpoint)?;
    setup(&a.common, "eval", a)?;
    let runner = match a.timesteps {
        Some(timesteps) => Runner::Snn { timesteps, mode: a.mode },
        None if net.has_if_neurons() => bail!("{} holds IF neurons; pass --T to run it", a.checkpoint.display()),
        None => Runner::Ann,
    };
    let scenes = eval_scenes(&a.data, &a.eval.split)?;
    let result = evaluate(&net, &scenes, runner, &eval_config(&a.eval))?;
    write_metrics(&a.common.out, "", &result)?;
    println!(
        "{} images: mAP@.5 {:.4}, mAP@.5:.95 {:.4}, best F1 {:.4} at confidence {:.3}",
        scenes.len(),
        result.report.map50,
        result.report.map50_95,
        result.report.best_f1,
        result.report.best_f1_confidence
    );
    Ok(())
}

#[derive(Serialize)]
struct Replaced {
    activation: usize,
    node: usize,
    theta: f64,
}

#[derive(Serialize)]
struct ConversionRecord {
    plan: SurgeryPlan,
    replaced: Vec<Replaced>,
}

fn thresholds(net: &NetworkGraph) -> Vec<Replaced> {
    net.activation_nodes()
        .into_iter()
        .enumerate()
        .filter_map(|(k, i)| match net.nodes()[i].layer {
            Layer::Activation(Activation::IfNeuron { theta }) => Some(Replaced {
                activation: k,
                node: i,
                theta,
            }),
            _ => None,
        })
        .collect()
}

pub fn convert(a: &ConvertArgs) -> Result<()> {
    let net = load(&a.checkpoint)?;
    setup(&a.common, "convert", a)?;
    let plan = SurgeryPlan::new(a.plan.clone(), a.timesteps, a.mode);
    let snn = convert_net(&net, &plan)?;
    let dir = &a.common.out;
    snn.save(dir.join(CONVERTED))?;
    let record = ConversionRecord {
        plan,
        replaced: thresholds(&snn),
    };
    let mut w = create(dir, "conversion.json")?;
    serde_json::to_writer_pretty(&mut w, &record)?;
    w.flush()?;
    println!(
        "replaced {} of {} activation layers ({}); wrote {}",
        record.replaced.len(),
        snn.activation_nodes().len(),
        a.plan,
        dir.join(CONVERTED).display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SimulateRow {
    #[serde(rename = "T")]
    timesteps: usize,
    mode: &'static str,
    map50: f64,
    map50_95: f64,
    best_f1: f64,
    spikes: u64,
    spikes_per_image: f64,
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let loaded = load(&a.checkpoint)?;
    setup(&a.common, "simulate", a)?;
    ensure!(!a.timesteps.is_empty(), "--T needs at least one value");
    let scenes = eval_scenes(&a.data, &a.eval.split)?;
    let cfg = eval_config(&a.eval);
    let dir = &a.common.out;

    if a.surgery {
        ensure!(!loaded.has_if_neurons(), "--surgery needs an unconverted QCFS checkpoint");
        let rows = layer_surgery_experiment(&loaded, &scenes, &a.timesteps, &cfg)?;
        write_surgery_csv(&rows, create(dir, "surgery.csv")?)?;
    }

    let net = match (&a.plan, loaded.has_if_neurons()) {
        (Some(plan), _) => convert_net(&loaded, &SurgeryPlan::new(plan.clone(), a.timesteps[0], a.mode))?,
        (None, true) => loaded,
        (None, false) if a.surgery => return Ok(()),
        (None, false) => bail!(
            "{} has no IF neurons; convert it first or pass --plan",
            a.checkpoint.display()
        ),
    };

    let mut rows = Vec::new();
    let mut stats = Vec::new();
    for &t in &a.timesteps {
        let result = evaluate(&net, &scenes, Runner::Snn { timesteps: t, mode: a.mode }, &cfg)?;
        write_metrics(dir, &format!("T{t}_"), &result)?;
        let spikes = result.spikes.total();
        println!(
            "T={t:<4} {}: mAP@.5 {:.4}, mAP@.5:.95 {:.4}, {:.0} spikes per image",
            a.mode.name(),
            result.report.map50,
            result.report.map50_95,
            spikes as f64 / scenes.len() as f64
        );
        rows.push(SimulateRow {
            timesteps: t,
            mode: a.mode.name(),
            map50: result.report.map50,
            map50_95: result.report.map50_95,
            best_f1: result.report.best_f1,
            spikes,
            spikes_per_image: spikes as f64 / scenes.len() as f64,
        });
        stats.push(serde_json::json!({ "T": t, "layers": result.spikes.layers }));
    }
    let mut w = csv_writer(dir, "simulate.csv")?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = create(dir, "spike_stats.json")?;
    serde_json::to_writer_pretty(&mut w, &stats)?;
    w.flush()?;
    Ok(())
}

fn csv_writer(dir: &Path, name: &str) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(dir, name)?))
}

#[derive(Serialize)]
struct ErrorRow {
    #[serde(rename = "T")]
    timesteps: usize,
    #[serde(rename = "L")]
    levels: u32,
    phi: f64,
    lambda: f64,
    theta: f64,
    n: u64,
    mean: f64,
    std: f64,
    max_abs: f64,
    std_error: f64,
    within_4se: bool,
}

impl From<ConversionReport> for ErrorRow {
    fn from(r: ConversionReport) -> Self {
        Self {
            timesteps: r.timesteps,
            levels: r.levels,
            phi: r.phi,
            lambda: r.lambda,
            theta: r.theta,
            n: r.n,
            mean: r.mean,
            std: r.std,
            max_abs: r.max_abs,
            std_error: r.standard_error(),
            within_4se: r.mean_within(4.0),
        }
    }
}

pub fn analyze_error(a: &AnalyzeErrorArgs) -> Result<()> {
    setup(&a.common, "analyze-error", a)?;
    let range = default_range(a.lambda);
    let mut w = csv_writer(&a.common.out, "conversion_error.csv")?;
    println!("{:>4} {:>4} {:>5} {:>12} {:>12} {:>10} {:>6}", "T", "L", "phi", "mean", "4*SE", "std", "ok");
    for &phi in &a.phi {
        for &levels in &a.levels {
            let p = QcfsParams::with_phi(a.lambda, levels, phi)?;
            for &t in &a.timesteps {
                let report = if a.grid {
                    conversion_error_grid(&p, a.lambda, t, a.n as usize, range)?
                } else {
                    conversion_error_empirical(&p, a.lambda, t, a.n, range, a.seed)?
                };
                let row = ErrorRow::from(report);
                println!(
                    "{t:>4} {levels:>4} {phi:>5} {:>12.4e} {:>12.4e} {:>10.4} {:>6}",
                    report.mean,
                    4.0 * row.std_error,
                    report.std,
                    if row.within_4se { "yes" } else { "no" }
                );
                w.serialize(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    setup(&a.common, "gen-data", a)?;
    let data = DataArgs {
        data: None,
        train_scenes: a.train_scenes,
        val_scenes: a.val_scenes,
        data_seed: a.data_seed,
        image_size: 64,
    };
    let (train, val) = synthetic(&data)?;
    let root = &a.common.out;
    write_yolo_split(root, "train", &train)?;
    write_yolo_split(root, "val", &val)?;
    fs::write(root.join("classes.txt"), SHAPE_CLASSES.join("\n") + "\n")?;
    println!("wrote {} train and {} val scenes to {}", train.len(), val.len(), root.display());
    Ok(())
}
