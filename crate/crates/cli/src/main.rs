//! Command-line surface for the underwater detection testbed.
//!
//! Every subcommand is deterministic for a fixed seed: rerunning with the
//! same arguments reproduces every output file byte for byte (the single
//! exception is the wall-clock latency column in the ablation CSV). The
//! root seed comes from `--seed`, falling back to the `UWDET_SEED`
//! environment variable, then 0.
//!
//! Exit codes: 0 success, 1 runtime failure (bad input, failed check),
//! 2 argument parse errors.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use uwdet_core::check::{run_all, run_scope, GradCheckReport, DEFAULT_GRADCHECK_SEEDS};
use uwdet_core::det::{
    build_dataset, evaluate_map, predictions_for, run_cell, save_checkpoint, train_detector,
    ArchConfig, DetectionBox, Detector, TrainConfig, TEST_COUNT, TRAIN_COUNT, VAL_COUNT,
};
use uwdet_core::error::{Error, Result};
use uwdet_core::nn::{
    count_cost, MsDdsp, MsDdspConfig, NeckConfig, NeckModule, NeckVariant, ParamStore,
};
use uwdet_core::sim::{
    degrade, degrade_scenes, generate_scenes, load_dataset, parseval_residual, power_spectrum,
    read_ppm, write_dataset, write_ppm, GtBox, OpticalParams, SceneSpec,
};
use uwdet_core::tensor::Tensor;

#[derive(Parser)]
#[command(
    name = "uwdet",
    version,
    about = "Desk-scale underwater detection testbed",
    propagate_version = true
)]
struct Cli {
    /// Root RNG seed; falls back to UWDET_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference gradient checks over every operator scope.
    Gradcheck(GradcheckArgs),
    /// Apply the water degradation model to a PPM image.
    Degrade(DegradeArgs),
    /// Generate a synthetic dataset: PPM images plus manifest.json.
    Synth(SynthArgs),
    /// Radial power spectrum of a PPM image.
    Spectrum(SpectrumArgs),
    /// Parameter and MAC accounting for the necks and the bottleneck.
    Params(ParamsArgs),
    /// Train the detector on synthetic data.
    Train(TrainArgs),
    /// Score a predictions file against a dataset manifest.
    Eval(EvalArgs),
    /// Train the ablation grid and emit a CSV table.
    Ablate(AblateArgs),
}

/// Water-model flags, mirroring the parameter structure field for field.
#[derive(Args, Serialize, Clone)]
struct OpticsArgs {
    /// Per-channel attenuation (1/m), comma-separated RGB.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.6, 0.20, 0.08])]
    eta: Vec<f64>,
    /// Scene distance in meters.
    #[arg(long = "d", default_value_t = 2.0)]
    d: f64,
    /// Veiling-light color, comma-separated RGB in [0, 1].
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.08, 0.35, 0.45])]
    b_inf: Vec<f64>,
    /// Forward-scatter blur std in pixels.
    #[arg(long, default_value_t = 1.5)]
    fs_sigma: f64,
    /// Forward-scatter mixing weight.
    #[arg(long, alias = "fs", default_value_t = 0.1)]
    fs_weight: f64,
    /// Sensor noise std.
    #[arg(long, alias = "noise", default_value_t = 0.01)]
    noise_sigma: f64,
}

impl OpticsArgs {
    fn to_params(&self) -> Result<OpticalParams> {
        let p = OpticalParams {
            eta: [self.eta[0], self.eta[1], self.eta[2]],
            d: self.d,
            b_inf: [self.b_inf[0], self.b_inf[1], self.b_inf[2]],
            fs_sigma: self.fs_sigma,
            fs_weight: self.fs_weight,
            noise_sigma: self.noise_sigma,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    /// Seeds per scope.
    #[arg(long, default_value_t = DEFAULT_GRADCHECK_SEEDS)]
    seeds: u64,
    /// Run a single named scope instead of all of them.
    #[arg(long)]
    scope: Option<String>,
    #[arg(long, default_value = "gradcheck-out")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct DegradeArgs {
    /// Input PPM image.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    optics: OpticsArgs,
    #[arg(long, default_value = "degrade-out")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    /// Number of scenes.
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Square image side in pixels; fish dimensions scale proportionally.
    #[arg(long, default_value_t = 96)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    fish_min: usize,
    #[arg(long, default_value_t = 4)]
    fish_max: usize,
    /// Push every image through the water model.
    #[arg(long)]
    degrade: bool,
    #[command(flatten)]
    optics: OpticsArgs,
    #[arg(long, default_value = "synth-out")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SpectrumArgs {
    /// Input PPM image.
    #[arg(long)]
    input: PathBuf,
    /// Channel to analyze: r, g, b, or mean.
    #[arg(long, default_value = "mean")]
    channel: String,
    #[arg(long, default_value = "spectrum-out")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ParamsArgs {
    /// Neck width in channels.
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Backbone pyramid widths C2..C5, comma-separated.
    #[arg(long, value_delimiter = ',', num_args = 4, default_values_t = [16, 32, 64, 128])]
    channels: Vec<usize>,
    /// Stride-4 feature side used for MAC accounting.
    #[arg(long, default_value_t = 160)]
    c2_side: usize,
    #[arg(long, default_value = "params-out")]
    out: PathBuf,
}

#[derive(Args, Serialize, Clone)]
struct HyperArgs {
    #[arg(long, default_value_t = 12)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.937)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

impl HyperArgs {
    fn to_config(&self, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Serialize, Clone)]
struct DataArgs {
    #[arg(long, default_value_t = TRAIN_COUNT)]
    train_count: usize,
    #[arg(long, default_value_t = VAL_COUNT)]
    val_count: usize,
    #[arg(long, default_value_t = TEST_COUNT)]
    test_count: usize,
    /// Square image side; must be divisible by 32. Fish dimensions scale
    /// proportionally.
    #[arg(long, default_value_t = 96)]
    size: usize,
    /// Train on degraded imagery instead of clean renders.
    #[arg(long)]
    degrade: bool,
    /// Scene-generation seed (default: the root seed).
    #[arg(long)]
    data_seed: Option<u64>,
    #[command(flatten)]
    optics: OpticsArgs,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// baseline | epa | msddsp | full | full-wo-b2 | full-wo-b3 | full-wo-b4.
    #[arg(long, default_value = "full")]
    arch: String,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "train-out")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Predictions JSON written by `train`.
    #[arg(long)]
    predictions: PathBuf,
    /// Dataset manifest the predictions refer to.
    #[arg(long)]
    manifest: PathBuf,
    /// IoU match threshold.
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long, default_value = "eval-out")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct AblateArgs {
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated subset of configurations to run.
    #[arg(long, value_delimiter = ',')]
    configs: Option<Vec<String>>,
    #[arg(long, default_value = "ablate-out")]
    out: PathBuf,
}

/// Per-image predictions, aligned with the manifest entry of the same
/// index.
#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    index: usize,
    boxes: Vec<DetectionBox>,
}

#[derive(Serialize)]
struct RunManifest<'a, T: Serialize> {
    command: &'a str,
    seed: u64,
    args: &'a T,
    outputs: Vec<String>,
}

fn write_run_manifest<T: Serialize>(
    out: &Path,
    command: &str,
    seed: u64,
    args: &T,
    outputs: Vec<String>,
) -> Result<()> {
    let manifest = RunManifest {
        command,
        seed,
        args,
        outputs,
    };
    fs::create_dir_all(out)?;
    fs::write(
        out.join("run.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn arch_from_name(name: &str) -> Result<ArchConfig> {
    Ok(match name {
        "baseline" => ArchConfig::baseline(),
        "epa" => ArchConfig::with_epa(),
        "msddsp" => ArchConfig::with_bottleneck(),
        "full" => ArchConfig::full(),
        "full-wo-b2" => ArchConfig::full_without_branch(2)?,
        "full-wo-b3" => ArchConfig::full_without_branch(3)?,
        "full-wo-b4" => ArchConfig::full_without_branch(4)?,
        other => {
            return Err(Error::Parse(format!(
                "unknown architecture {other:?}; expected baseline, epa, msddsp, full, or full-wo-b{{2,3,4}}"
            )))
        }
    })
}

const ALL_CONFIGS: [&str; 7] = [
    "baseline",
    "epa",
    "msddsp",
    "full",
    "full-wo-b2",
    "full-wo-b3",
    "full-wo-b4",
];

fn cmd_gradcheck(args: &GradcheckArgs, seed: u64) -> Result<()> {
    let report: GradCheckReport = match &args.scope {
        Some(name) => {
            let scope = run_scope(name, args.seeds)?;
            GradCheckReport {
                epsilon: uwdet_core::check::GRADCHECK_EPSILON,
                tolerance: uwdet_core::check::GRADCHECK_TOLERANCE,
                passed: scope.passed,
                scopes: vec![scope],
            }
        }
        None => run_all(args.seeds)?,
    };
    for scope in &report.scopes {
        println!(
            "{:<22} seeds={:<3} max rel err {:.3e}  {}",
            scope.name,
            scope.seeds,
            scope.max_rel_err,
            if scope.passed { "pass" } else { "FAIL" }
        );
    }
    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    write_run_manifest(
        &args.out,
        "gradcheck",
        seed,
        args,
        vec!["report.json".into()],
    )?;
    if !report.passed {
        return Err(Error::Value(
            "gradient check failed; see report.json".into(),
        ));
    }
    Ok(())
}

fn cmd_degrade(args: &DegradeArgs, seed: u64) -> Result<()> {
    let params = args.optics.to_params()?;
    let clean = read_ppm(&args.input)?;
    let out_img = degrade(&clean, &params, seed)?;
    fs::create_dir_all(&args.out)?;
    write_ppm(args.out.join("degraded.ppm"), &out_img)?;
    let t = params.transmission();
    println!(
        "degraded {} -> {}; transmission r={:.4} g={:.4} b={:.4}",
        args.input.display(),
        args.out.join("degraded.ppm").display(),
        t[0],
        t[1],
        t[2]
    );
    write_run_manifest(
        &args.out,
        "degrade",
        seed,
        args,
        vec!["degraded.ppm".into()],
    )
}

fn cmd_synth(args: &SynthArgs, seed: u64) -> Result<()> {
    // Fish dimensions scale with the image side (see `build_cli_dataset`).
    let base = SceneSpec::default();
    let scale = args.size as f64 / base.size as f64;
    let spec = SceneSpec {
        size: args.size,
        fish_min: args.fish_min,
        fish_max: args.fish_max,
        fish_len: (base.fish_len.0 * scale, base.fish_len.1 * scale),
        ..base
    };
    let mut items = generate_scenes(&spec, args.count, seed)?;
    let optics = if args.degrade {
        let params = args.optics.to_params()?;
        items = degrade_scenes(&items, &params)?;
        Some(params)
    } else {
        None
    };
    write_dataset(&args.out, &items, optics.as_ref(), seed, args.size)?;
    let total_boxes: usize = items.iter().map(|i| i.boxes.len()).sum();
    println!(
        "wrote {} scenes ({} boxes) to {}",
        items.len(),
        total_boxes,
        args.out.display()
    );
    let mut outputs: Vec<String> = (0..items.len()).map(|i| format!("img_{i:05}.ppm")).collect();
    outputs.push("manifest.json".into());
    write_run_manifest(&args.out, "synth", seed, args, outputs)
}

fn cmd_spectrum(args: &SpectrumArgs, seed: u64) -> Result<()> {
    let img = read_ppm(&args.input)?;
    let [_, channels, h, w] = img.shape();
    let plane = match args.channel.as_str() {
        "r" => single_channel(&img, 0),
        "g" => single_channel(&img, 1),
        "b" => single_channel(&img, 2),
        "mean" => {
            let mut t = Tensor::zeros([1, 1, h, w]);
            for c in 0..channels {
                for i in 0..h {
                    for j in 0..w {
                        *t.at_mut(0, 0, i, j) += img.at(0, c, i, j) / channels as f64;
                    }
                }
            }
            t
        }
        other => {
            return Err(Error::Parse(format!(
                "unknown channel {other:?}; expected r, g, b, or mean"
            )))
        }
    };
    let profile = power_spectrum(&plane)?;
    let residual = parseval_residual(&plane, &profile);
    fs::create_dir_all(&args.out)?;
    let mut csv = String::from("bin,energy,count\n");
    for (bin, (e, n)) in profile.energy.iter().zip(&profile.counts).enumerate() {
        csv.push_str(&format!("{bin},{e:.12e},{n}\n"));
    }
    fs::write(args.out.join("spectrum.csv"), csv)?;
    #[derive(Serialize)]
    struct Summary {
        side: usize,
        channel: String,
        total_energy: f64,
        high_band_energy: f64,
        parseval_residual: f64,
    }
    let summary = Summary {
        side: profile.side,
        channel: args.channel.clone(),
        total_energy: profile.total_energy(),
        high_band_energy: profile.high_band_energy(),
        parseval_residual: residual,
    };
    fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "side {}  total energy {:.6e}  high band {:.6e}  parseval residual {:.3e}",
        summary.side, summary.total_energy, summary.high_band_energy, summary.parseval_residual
    );
    write_run_manifest(
        &args.out,
        "spectrum",
        seed,
        args,
        vec!["spectrum.csv".into(), "summary.json".into()],
    )
}

fn single_channel(img: &Tensor, c: usize) -> Tensor {
    let [_, _, h, w] = img.shape();
    let mut t = Tensor::zeros([1, 1, h, w]);
    for i in 0..h {
        for j in 0..w {
            *t.at_mut(0, 0, i, j) = img.at(0, c, i, j);
        }
    }
    t
}

fn cmd_params(args: &ParamsArgs, seed: u64) -> Result<()> {
    if args.channels.len() != 4 {
        return Err(Error::Config("expected four pyramid widths".into()));
    }
    let in_widths: Vec<(usize, usize)> = args
        .channels
        .iter()
        .enumerate()
        .map(|(k, &w)| (k + 2, w))
        .collect();
    #[derive(Serialize)]
    struct VariantCost {
        variant: String,
        params: usize,
        macs: usize,
        flops: usize,
    }
    #[derive(Serialize)]
    struct Report {
        width: usize,
        channels: Vec<usize>,
        c2_side: usize,
        necks: Vec<VariantCost>,
        reduction_vs_panet: f64,
        bottleneck_params: usize,
    }
    let mut necks = Vec::new();
    let mut panet_params = 0usize;
    let mut epa_params = 0usize;
    for variant in [
        NeckVariant::TopdownFpn,
        NeckVariant::Panet,
        NeckVariant::EpaFpn,
    ] {
        let mut ps = ParamStore::new(0);
        let cfg = NeckConfig::new(variant, args.width);
        let neck = NeckModule::new(&mut ps, "n", &cfg, &in_widths)?;
        let cost = count_cost(&neck, args.c2_side);
        match variant {
            NeckVariant::Panet => panet_params = cost.params,
            NeckVariant::EpaFpn => epa_params = cost.params,
            NeckVariant::TopdownFpn => {}
        }
        println!(
            "{:<12} params {:>9}  macs {:>13}  flops {:>13}",
            variant.tag(),
            cost.params,
            cost.macs,
            cost.flops
        );
        necks.push(VariantCost {
            variant: variant.tag().to_string(),
            params: cost.params,
            macs: cost.macs,
            flops: cost.flops,
        });
    }
    let reduction = 1.0 - epa_params as f64 / panet_params as f64;
    let bottleneck_params = {
        let mut ps = ParamStore::new(0);
        MsDdsp::new(&mut ps, "blk", MsDdspConfig::new(args.width))?.param_count()
    };
    println!(
        "pruned neck saves {:.2}% of the bottom-up baseline; bottleneck block adds {} params",
        reduction * 100.0,
        bottleneck_params
    );
    let report = Report {
        width: args.width,
        channels: args.channels.clone(),
        c2_side: args.c2_side,
        necks,
        reduction_vs_panet: reduction,
        bottleneck_params,
    };
    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("costs.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    write_run_manifest(&args.out, "params", seed, args, vec!["costs.json".into()])
}

fn build_cli_dataset(data: &DataArgs, seed: u64) -> Result<uwdet_core::det::DatasetSplits> {
    // Scale fish dimensions with the image side so smaller quick-run
    // scenes stay placeable; at the default 96 px this is exactly the
    // stock recipe.
    let base = SceneSpec::default();
    let scale = data.size as f64 / base.size as f64;
    let spec = SceneSpec {
        size: data.size,
        fish_len: (base.fish_len.0 * scale, base.fish_len.1 * scale),
        ..base
    };
    let optics = if data.degrade {
        Some(data.optics.to_params()?)
    } else {
        None
    };
    build_dataset(
        &spec,
        optics.as_ref(),
        data.data_seed.unwrap_or(seed),
        (data.train_count, data.val_count, data.test_count),
    )
}

fn cmd_train(args: &TrainArgs, seed: u64) -> Result<()> {
    let arch = arch_from_name(&args.arch)?;
    let cfg = args.hyper.to_config(seed)?;
    let data = build_cli_dataset(&args.data, seed)?;
    let mut ps = ParamStore::new(cfg.seed);
    let det = Detector::new(&mut ps, &arch)?;
    println!(
        "training {} ({} params) on {}/{}/{} scenes",
        arch.label(),
        ps.scalar_count(),
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    let outcome = train_detector(&mut ps, &det, &data, &cfg)?;
    for row in &outcome.log {
        println!(
            "epoch {:>3}  loss {:.6}  obj {:.6}  box {:.6}  val mAP50 {:.4}",
            row.epoch, row.train_loss, row.obj_loss, row.box_loss, row.val_map50
        );
    }
    fs::create_dir_all(&args.out)?;
    save_checkpoint(&args.out, &arch, &cfg, cfg.epochs, &ps)?;
    let mut log_csv = String::from("epoch,train_loss,obj_loss,box_loss,val_map50\n");
    for row in &outcome.log {
        log_csv.push_str(&format!(
            "{},{:.12e},{:.12e},{:.12e},{:.12e}\n",
            row.epoch, row.train_loss, row.obj_loss, row.box_loss, row.val_map50
        ));
    }
    fs::write(args.out.join("train_log.csv"), log_csv)?;
    // Persist the test split so `eval` can rescore the predictions later.
    let optics = if args.data.degrade {
        Some(args.data.optics.to_params()?)
    } else {
        None
    };
    write_dataset(
        args.out.join("test-data"),
        &data.test,
        optics.as_ref(),
        args.data.data_seed.unwrap_or(seed),
        args.data.size,
    )?;
    let preds = predictions_for(&ps, &det, &data.test)?;
    let records: Vec<PredictionRecord> = preds
        .iter()
        .enumerate()
        .map(|(index, boxes)| PredictionRecord {
            index,
            boxes: boxes.clone(),
        })
        .collect();
    fs::write(
        args.out.join("predictions.json"),
        serde_json::to_string_pretty(&records)?,
    )?;
    let gts: Vec<Vec<GtBox>> = data.test.iter().map(|i| i.boxes.clone()).collect();
    let result = evaluate_map(&preds, &gts, uwdet_core::det::MAP_IOU_THRESH)?;
    fs::write(
        args.out.join("eval.json"),
        serde_json::to_string_pretty(&result)?,
    )?;
    println!(
        "test split: mAP50 {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}",
        result.map50, result.precision, result.recall, result.f1
    );
    let mut outputs = vec![
        "checkpoint.json".into(),
        "weights.fsnt".into(),
        "train_log.csv".into(),
        "predictions.json".into(),
        "eval.json".into(),
        "test-data/manifest.json".into(),
    ];
    for i in 0..data.test.len() {
        outputs.push(format!("test-data/img_{i:05}.ppm"));
    }
    write_run_manifest(&args.out, "train", seed, args, outputs)
}

fn cmd_eval(args: &EvalArgs, seed: u64) -> Result<()> {
    let (items, _manifest) = load_dataset(&args.manifest)?;
    let records: Vec<PredictionRecord> =
        serde_json::from_str(&fs::read_to_string(&args.predictions)?)?;
    if records.len() != items.len() {
        return Err(Error::Dimension(format!(
            "{} prediction records vs {} manifest entries",
            records.len(),
            items.len()
        )));
    }
    let indices: BTreeSet<usize> = records.iter().map(|r| r.index).collect();
    if indices.len() != records.len() || indices.last() != Some(&(records.len() - 1)) {
        return Err(Error::Parse(
            "prediction indices must cover 0..n exactly once".into(),
        ));
    }
    let mut preds: Vec<Vec<DetectionBox>> = vec![Vec::new(); records.len()];
    for r in records {
        preds[r.index] = r.boxes;
    }
    let gts: Vec<Vec<GtBox>> = items.iter().map(|i| i.boxes.clone()).collect();
    let result = evaluate_map(&preds, &gts, args.iou)?;
    println!(
        "mAP@{:.2} {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}",
        args.iou, result.map50, result.precision, result.recall, result.f1
    );
    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("eval.json"),
        serde_json::to_string_pretty(&result)?,
    )?;
    write_run_manifest(&args.out, "eval", seed, args, vec!["eval.json".into()])
}

fn cmd_ablate(args: &AblateArgs, seed: u64) -> Result<()> {
    let names: Vec<String> = match &args.configs {
        Some(list) => list.clone(),
        None => ALL_CONFIGS.iter().map(|s| s.to_string()).collect(),
    };
    let archs: Vec<ArchConfig> = names
        .iter()
        .map(|n| arch_from_name(n))
        .collect::<Result<_>>()?;
    let cfg = args.hyper.to_config(seed)?;
    let data = build_cli_dataset(&args.data, seed)?;
    let mut csv = String::from("config,map50,params,latency_ms\n");
    for arch in &archs {
        let cell = run_cell(arch, &data, &cfg)?;
        println!(
            "{:<12} mAP50 {:.4}  params {:>8}  latency {:8.3} ms",
            cell.label, cell.map50, cell.params, cell.latency_ms
        );
        csv.push_str(&format!(
            "{},{:.12e},{},{:.3}\n",
            cell.label, cell.map50, cell.params, cell.latency_ms
        ));
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("ablation.csv"), csv)?;
    write_run_manifest(&args.out, "ablate", seed, args, vec!["ablation.csv".into()])
}

fn resolve_seed(cli_seed: Option<u64>) -> std::result::Result<u64, String> {
    if let Some(s) = cli_seed {
        return Ok(s);
    }
    match std::env::var("UWDET_SEED") {
        Ok(raw) => raw
            .parse::<u64>()
            .map_err(|_| format!("UWDET_SEED must be an unsigned integer, got {raw:?}")),
        Err(_) => Ok(0),
    }
}

fn run(command: &Command, seed: u64) -> Result<()> {
    match command {
        Command::Gradcheck(a) => cmd_gradcheck(a, seed),
        Command::Degrade(a) => cmd_degrade(a, seed),
        Command::Synth(a) => cmd_synth(a, seed),
        Command::Spectrum(a) => cmd_spectrum(a, seed),
        Command::Params(a) => cmd_params(a, seed),
        Command::Train(a) => cmd_train(a, seed),
        Command::Eval(a) => cmd_eval(a, seed),
        Command::Ablate(a) => cmd_ablate(a, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = match resolve_seed(cli.seed) {
        Ok(s) => s,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    match run(&cli.command, seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
