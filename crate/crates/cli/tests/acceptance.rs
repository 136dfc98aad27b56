//! Acceptance suite. One `#[test]` per criterion; the harness's own result
//! line (`test criterion_N_... ok` / `FAILED`) is the per-criterion
//! pass/fail line, and each test additionally prints a summary with the
//! measured numbers (visible with `--nocapture` or on failure).
//!
//! Criteria 1-6 exercise the library; criterion 7 drives the built binary.
//! Criterion 5 trains the full ablation grid and takes tens of minutes on a
//! single core; everything else is seconds to ~2 minutes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uwdet_core::check::{run_all, DEFAULT_GRADCHECK_SEEDS, GRADCHECK_TOLERANCE, SCOPES};
use uwdet_core::det::{
    build_dataset, evaluate_map, iou, nms, run_cell, ArchConfig, DetectionBox, TrainConfig,
};
use uwdet_core::nn::{
    attention_fuse, branch4_identity, count_cost, NeckConfig, NeckModule, NeckVariant, ParamStore,
};
use uwdet_core::sim::{
    degrade, parseval_residual, power_spectrum, synth_scene, GtBox, OpticalParams, SceneSpec,
};
use uwdet_core::tensor::{concat_channels, split_channels, Tensor};

// ---------------------------------------------------------------------------
// Criterion 5 protocol: fixed dataset, varying training seed.
const ABLATION_DATA_SEED: u64 = 100;
const ABLATION_TRAIN_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_EPOCHS: usize = 10;
const ABLATION_COUNTS: (usize, usize, usize) = (256, 36, 72);

fn rand_tensor(shape: [usize; 4], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-bound..bound))
}

#[test]
fn criterion_1_gradient_oracle() {
    let t0 = Instant::now();
    let report = run_all(DEFAULT_GRADCHECK_SEEDS).expect("gradcheck run");
    let elapsed = t0.elapsed();
    assert_eq!(report.scopes.len(), SCOPES.len());
    assert!(DEFAULT_GRADCHECK_SEEDS >= 20);
    let mut worst: f64 = 0.0;
    for s in &report.scopes {
        assert!(
            s.passed && s.max_rel_err <= GRADCHECK_TOLERANCE,
            "scope {} worst rel err {:.3e} exceeds {:.0e}",
            s.name,
            s.max_rel_err,
            GRADCHECK_TOLERANCE
        );
        worst = worst.max(s.max_rel_err);
    }
    assert!(report.passed);
    assert!(
        elapsed <= Duration::from_secs(120),
        "gradcheck suite took {elapsed:?}, budget is 2 min"
    );
    println!(
        "criterion 1: all {} op scopes within {:.0e} over {} seeds (worst {:.3e}, {:.1?})",
        report.scopes.len(),
        GRADCHECK_TOLERANCE,
        DEFAULT_GRADCHECK_SEEDS,
        worst,
        elapsed
    );
}

#[test]
fn criterion_2_fusion_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    // Split/concat is a bitwise roundtrip.
    for _ in 0..100 {
        let shape = [
            1 + rng.gen_range(0..2),
            4 * (1 + rng.gen_range(0..4)),
            1 + rng.gen_range(0..5),
            1 + rng.gen_range(0..5),
        ];
        let x = rand_tensor(shape, 3.0, &mut rng);
        let back = concat_channels(&split_channels(&x, 4).unwrap()).unwrap();
        assert_eq!(back.shape(), x.shape());
        for (a, b) in back.iter().zip(x.iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "split/concat not bitwise");
        }
    }

    // Fusion weights sum to 1 at every (batch, channel) for 100 inputs.
    let mut worst_sum_err: f64 = 0.0;
    for _ in 0..100 {
        let n = 1 + rng.gen_range(0..2);
        let c = 1 + rng.gen_range(0..4);
        let hw = 1 + rng.gen_range(0..4);
        let shape = [n, c, hw, hw];
        let branches = [
            rand_tensor(shape, 3.0, &mut rng),
            rand_tensor(shape, 3.0, &mut rng),
            rand_tensor(shape, 3.0, &mut rng),
            rand_tensor(shape, 3.0, &mut rng),
        ];
        let (_, w) = attention_fuse(&branches).unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let total: f64 = (0..4).map(|m| w.beta[m].at(ni, ci, 0, 0)).sum();
                worst_sum_err = worst_sum_err.max((total - 1.0).abs());
                assert!(
                    (total - 1.0).abs() <= 1e-6,
                    "beta sum {total} at ({ni}, {ci})"
                );
            }
        }
    }

    // Identical branches must give exactly uniform weights.
    let mut worst_sym_err: f64 = 0.0;
    for trial in 0..20 {
        let x = rand_tensor([1, 3, 4, 4], 2.0, &mut rng);
        let branches = [x.clone(), x.clone(), x.clone(), x];
        let (_, w) = attention_fuse(&branches).unwrap();
        for b in &w.beta {
            for &v in b.iter() {
                worst_sym_err = worst_sym_err.max((v - 0.25).abs());
                assert!(
                    (v - 0.25).abs() <= 1e-12,
                    "trial {trial}: symmetric beta {v} != 0.25"
                );
            }
        }
    }

    // The detail branch is the bitwise identity.
    for _ in 0..20 {
        let x = rand_tensor([2, 4, 5, 5], 5.0, &mut rng);
        let y = branch4_identity(&x);
        assert_eq!(y.shape(), x.shape());
        for (a, b) in y.iter().zip(x.iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "branch 4 not bitwise identity");
        }
    }

    println!(
        "criterion 2: split/concat bitwise on 100 inputs; beta sums within {:.1e}; \
         symmetric beta within {:.1e} of 0.25; detail branch bitwise",
        worst_sum_err, worst_sym_err
    );
}

#[test]
fn criterion_3_parameter_reduction() {
    let widths = [(2usize, 16usize), (3, 32), (4, 64), (5, 128)];
    let cost = |variant: NeckVariant, w: usize| -> usize {
        let mut ps = ParamStore::new(0);
        let neck = NeckModule::new(&mut ps, "n", &NeckConfig::new(variant, w), &widths).unwrap();
        count_cost(&neck, uwdet_core::nn::REFERENCE_C2_SIDE).params
    };

    let pruned = cost(NeckVariant::EpaFpn, 64);
    let twopass = cost(NeckVariant::Panet, 64);
    let reduction = 1.0 - pruned as f64 / twopass as f64;
    assert!(
        (0.25..=0.35).contains(&reduction),
        "reduction {reduction:.4} outside [0.25, 0.35] (pruned {pruned}, two-pass {twopass})"
    );
    for w in [32usize, 64, 128] {
        let p = cost(NeckVariant::EpaFpn, w);
        let q = cost(NeckVariant::Panet, w);
        assert!(p < q, "width {w}: pruned {p} not below two-pass {q}");
    }
    println!(
        "criterion 3: pruned neck {pruned} vs two-pass {twopass} params at width 64 \
         ({:.2}% reduction, in [25%, 35%]); pruned smaller at widths 32/64/128",
        100.0 * reduction
    );
}

#[test]
fn criterion_4_degradation_physics() {
    let (clean, _) = synth_scene(&SceneSpec {
        seed: 11,
        ..SceneSpec::default()
    })
    .unwrap();

    // d = 0 with scatter and noise off is the exact identity.
    let p0 = OpticalParams {
        d: 0.0,
        fs_weight: 0.0,
        noise_sigma: 0.0,
        ..OpticalParams::default()
    };
    let out0 = degrade(&clean, &p0, 5).unwrap();
    for (a, b) in out0.iter().zip(clean.iter()) {
        assert_eq!(a.to_bits(), b.to_bits(), "d=0 degrade is not the identity");
    }

    // Large distance converges to the veiling light within 1e-6.
    let pinf = OpticalParams {
        d: 400.0,
        noise_sigma: 0.0,
        ..OpticalParams::default()
    };
    let outinf = degrade(&clean, &pinf, 5).unwrap();
    let mut worst_asym: f64 = 0.0;
    for ci in 0..3 {
        for &v in outinf.plane_slice(0, ci) {
            worst_asym = worst_asym.max((v - pinf.b_inf[ci]).abs());
        }
    }
    assert!(
        worst_asym <= 1e-6,
        "distance asymptote misses veiling light by {worst_asym:.3e}"
    );

    // Red transmits least, blue most, at every positive distance.
    for k in 1..=400 {
        let p = OpticalParams {
            d: k as f64 * 0.05,
            ..OpticalParams::default()
        };
        let t = p.transmission();
        assert!(
            t[0] <= t[1] && t[1] <= t[2],
            "transmission order violated at d={}: {t:?}",
            p.d
        );
    }

    // The spectrum analyzer conserves energy (Parseval) within 1e-6.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_parseval: f64 = 0.0;
    for side in [8usize, 17, 32, 96] {
        let x = Tensor::from_fn([1, 1, side, side], |_, _, _, _| rng.gen_range(-1.0..1.0));
        let prof = power_spectrum(&x).unwrap();
        worst_parseval = worst_parseval.max(parseval_residual(&x, &prof));
    }
    assert!(
        worst_parseval <= 1e-6,
        "Parseval residual {worst_parseval:.3e} exceeds 1e-6"
    );

    // Degradation strictly removes high-frequency energy (sensor noise off:
    // it is additive in all bands and orthogonal to the optical transfer).
    let mean_channel = |img: &Tensor| -> Tensor {
        let [_, c, h, w] = img.shape();
        Tensor::from_fn([1, 1, h, w], |_, _, i, j| {
            (0..c).map(|ch| img.at(0, ch, i, j)).sum::<f64>() / c as f64
        })
    };
    let clean_prof = power_spectrum(&mean_channel(&clean)).unwrap();
    let half = clean_prof.energy.len() / 2;
    let clean_high: f64 = clean_prof.energy[half..].iter().sum();
    let mut checked = Vec::new();
    for d in [0.5, 2.0, 5.0] {
        let p = OpticalParams {
            d,
            noise_sigma: 0.0,
            ..OpticalParams::default()
        };
        let deg = degrade(&clean, &p, 5).unwrap();
        let prof = power_spectrum(&mean_channel(&deg)).unwrap();
        let high: f64 = prof.energy[half..].iter().sum();
        assert!(
            high < clean_high,
            "high-band energy {high:.3e} not below clean {clean_high:.3e} at d={d}"
        );
        checked.push(high / clean_high);
    }

    println!(
        "criterion 4: d=0 bitwise identity; d=400 within {worst_asym:.1e} of veiling light; \
         transmission ordered red<=green<=blue; Parseval residual {worst_parseval:.1e}; \
         high-band ratios vs clean {checked:.3?}"
    );
}

#[test]
fn criterion_5_ablation_ordering() {
    let data = build_dataset(
        &SceneSpec::default(),
        Some(&OpticalParams::default()),
        ABLATION_DATA_SEED,
        ABLATION_COUNTS,
    )
    .expect("dataset");

    let archs = [
        ArchConfig::full(),
        ArchConfig::baseline(),
        ArchConfig::full_without_branch(2).unwrap(),
    ];
    let mut means = Vec::new();
    for arch in &archs {
        let mut total = 0.0;
        for &seed in &ABLATION_TRAIN_SEEDS {
            let cfg = TrainConfig {
                epochs: ABLATION_EPOCHS,
                seed,
                ..TrainConfig::default()
            };
            let cell = run_cell(arch, &data, &cfg).expect("training cell");
            println!(
                "criterion 5:   {:<11} seed {}  test mAP50 {:.4}",
                cell.label, seed, cell.map50
            );
            total += cell.map50;
        }
        means.push(total / ABLATION_TRAIN_SEEDS.len() as f64);
    }
    let (full, baseline, wo_b2) = (means[0], means[1], means[2]);
    assert!(
        full >= baseline,
        "mean mAP50: full {full:.4} < baseline {baseline:.4}"
    );
    assert!(
        full >= wo_b2,
        "mean mAP50: full {full:.4} < full-wo-b2 {wo_b2:.4}"
    );
    println!(
        "criterion 5: mean test mAP50 over {} seeds — full {full:.4} >= baseline {baseline:.4}, \
         full >= full-wo-b2 {wo_b2:.4} ({} train / {} val / {} test, {} epochs)",
        ABLATION_TRAIN_SEEDS.len(),
        ABLATION_COUNTS.0,
        ABLATION_COUNTS.1,
        ABLATION_COUNTS.2,
        ABLATION_EPOCHS
    );
}

#[test]
fn criterion_6_metric_correctness() {
    let pred = |x1: f64, y1: f64, x2: f64, y2: f64, score: f64| DetectionBox {
        x1,
        y1,
        x2,
        y2,
        score,
        class: 0,
    };
    let gt = |x1: f64, y1: f64, x2: f64, y2: f64| GtBox { x1, y1, x2, y2 };

    // AP example 1: one correct prediction is a perfect result.
    // pred [0,0,10,10] vs gt [0,0,10,9]: inter 90, union 100, IoU = 0.9.
    let r = evaluate_map(
        &[vec![pred(0.0, 0.0, 10.0, 10.0, 0.8)]],
        &[vec![gt(0.0, 0.0, 10.0, 9.0)]],
        0.5,
    )
    .unwrap();
    assert_eq!(r.map50, 1.0);
    assert_eq!(r.precision, 1.0);
    assert_eq!(r.recall, 1.0);
    assert_eq!(r.f1, 1.0);

    // AP example 2: no predictions at all.
    let r = evaluate_map(&[vec![]], &[vec![gt(0.0, 0.0, 5.0, 5.0)]], 0.5).unwrap();
    assert_eq!(r.map50, 0.0);
    assert_eq!(r.recall, 0.0);

    // AP example 3: TP at 0.9 then FP at 0.8 — the PR envelope integrates
    // to 1 while the operating-point precision halves.
    let r = evaluate_map(
        &[vec![
            pred(0.0, 0.0, 10.0, 10.0, 0.9),
            pred(50.0, 50.0, 60.0, 60.0, 0.8),
        ]],
        &[vec![gt(0.0, 0.0, 10.0, 10.0)]],
        0.5,
    )
    .unwrap();
    assert_eq!(r.map50, 1.0);
    assert_eq!(r.precision, 0.5);
    assert_eq!(r.recall, 1.0);
    // F1 from the harmonic-mean formula, exactly.
    assert_eq!(r.f1, 2.0 * 0.5 * 1.0 / (0.5 + 1.0));

    // IoU arithmetic examples.
    let a = pred(1.0, 2.0, 5.0, 6.0, 0.5);
    assert_eq!(iou(&a, &a).unwrap(), 1.0);
    let b = pred(50.0, 50.0, 60.0, 60.0, 0.5);
    assert_eq!(iou(&a, &b).unwrap(), 0.0);
    let c = pred(0.0, 0.0, 2.0, 2.0, 0.5);
    let d = pred(1.0, 0.0, 3.0, 2.0, 0.5);
    assert!((iou(&c, &d).unwrap() - 1.0 / 3.0).abs() < 1e-12);

    // NMS: identical pair keeps only the higher score.
    let kept = nms(
        &[
            pred(0.0, 0.0, 2.0, 2.0, 0.9),
            pred(0.0, 0.0, 2.0, 2.0, 0.8),
        ],
        0.5,
    )
    .unwrap();
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].score, 0.9);

    // NMS: disjoint boxes all survive.
    let kept = nms(
        &[
            pred(0.0, 0.0, 1.0, 1.0, 0.9),
            pred(5.0, 5.0, 6.0, 6.0, 0.1),
        ],
        0.5,
    )
    .unwrap();
    assert_eq!(kept.len(), 2);

    // NMS: IoU exactly at the threshold is suppressed (closed threshold).
    // [0,0,2,2] inside [0,0,2,4]: inter 4, union 8, IoU exactly 0.5.
    let pair = [
        pred(0.0, 0.0, 2.0, 2.0, 0.9),
        pred(0.0, 0.0, 2.0, 4.0, 0.8),
    ];
    assert_eq!(iou(&pair[0], &pair[1]).unwrap(), 0.5);
    assert_eq!(nms(&pair, 0.5).unwrap().len(), 1);
    assert_eq!(nms(&pair, 0.5 + 1e-9).unwrap().len(), 2);

    println!(
        "criterion 6: three AP examples exact; F1 and IoU arithmetic exact; \
         NMS tie and closed-threshold cases exact"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7 helpers: run the binary, snapshot output trees, compare bytes.

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_uwdet")
}

fn run_cli(dir: &Path, args: &[&str]) {
    let out = Command::new(bin())
        .current_dir(dir)
        .env_remove("UWDET_SEED")
        .args(args)
        .output()
        .expect("spawn uwdet");
    assert!(
        out.status.success(),
        "uwdet {:?} failed with {:?}\nstderr: {}",
        args,
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, prefix: &str, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).expect("read_dir") {
            let entry = entry.unwrap();
            let name = format!("{prefix}{}", entry.file_name().to_string_lossy());
            if entry.file_type().unwrap().is_dir() {
                walk(&entry.path(), &format!("{name}/"), out);
            } else {
                out.insert(name, fs::read(entry.path()).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, "", &mut out);
    out
}

/// Blank the wall-clock latency column of ablation tables; it is the single
/// documented nondeterministic output field.
fn normalize(tree: &mut BTreeMap<String, Vec<u8>>) {
    for (name, bytes) in tree.iter_mut() {
        if !name.ends_with("ablation.csv") {
            continue;
        }
        let text = String::from_utf8(std::mem::take(bytes)).expect("utf8 csv");
        let mut fixed = String::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.is_empty() {
                fixed.push_str(line);
            } else {
                let mut parts: Vec<&str> = line.split(',').collect();
                let last = parts.len() - 1;
                parts[last] = "_";
                fixed.push_str(&parts.join(","));
            }
            fixed.push('\n');
        }
        *bytes = fixed.into_bytes();
    }
}

/// Run the identical command twice (wiping its output directory in between)
/// and require byte-identical results.
fn assert_rerun_identical(dir: &Path, args: &[&str], out_name: &str) {
    run_cli(dir, args);
    let mut first = tree_bytes(&dir.join(out_name));
    normalize(&mut first);
    fs::remove_dir_all(dir.join(out_name)).unwrap();
    run_cli(dir, args);
    let mut second = tree_bytes(&dir.join(out_name));
    normalize(&mut second);
    assert_eq!(
        first.keys().collect::<Vec<_>>(),
        second.keys().collect::<Vec<_>>(),
        "rerun of {args:?} produced a different file set"
    );
    for (name, bytes) in &first {
        assert_eq!(
            bytes, &second[name],
            "rerun of {args:?} changed bytes of {out_name}/{name}"
        );
    }
}

#[test]
fn criterion_7_cli_determinism() {
    let dir = tempfile::tempdir().expect("tempdir");
    let d = dir.path();

    // Scene synthesis (also provides an input image for later commands).
    assert_rerun_identical(
        d,
        &[
            "synth", "--count", "3", "--size", "64", "--seed", "5", "--out", "c7-synth",
        ],
        "c7-synth",
    );
    let ppm = "c7-synth/img_00000.ppm";
    assert!(d.join(ppm).exists(), "synth did not leave {ppm}");

    assert_rerun_identical(
        d,
        &[
            "degrade", "--input", ppm, "--seed", "3", "--out", "c7-degrade",
        ],
        "c7-degrade",
    );

    assert_rerun_identical(
        d,
        &["spectrum", "--input", ppm, "--out", "c7-spectrum"],
        "c7-spectrum",
    );

    assert_rerun_identical(d, &["params", "--out", "c7-params"], "c7-params");

    assert_rerun_identical(
        d,
        &[
            "gradcheck", "--scope", "silu", "--seeds", "2", "--out", "c7-gradcheck",
        ],
        "c7-gradcheck",
    );

    let train_args = [
        "train",
        "--arch",
        "full",
        "--epochs",
        "1",
        "--size",
        "64",
        "--train-count",
        "6",
        "--val-count",
        "2",
        "--test-count",
        "2",
        "--seed",
        "1",
        "--data-seed",
        "7",
        "--out",
        "c7-train",
    ];
    assert_rerun_identical(d, &train_args, "c7-train");

    assert_rerun_identical(
        d,
        &[
            "eval",
            "--predictions",
            "c7-train/predictions.json",
            "--manifest",
            "c7-train/test-data/manifest.json",
            "--out",
            "c7-eval",
        ],
        "c7-eval",
    );

    assert_rerun_identical(
        d,
        &[
            "ablate",
            "--configs",
            "baseline,full",
            "--epochs",
            "1",
            "--size",
            "64",
            "--train-count",
            "4",
            "--val-count",
            "1",
            "--test-count",
            "2",
            "--seed",
            "2",
            "--data-seed",
            "9",
            "--out",
            "c7-ablate",
        ],
        "c7-ablate",
    );

    println!(
        "criterion 7: all 8 subcommands byte-identical on rerun \
         (ablation latency column excluded as documented)"
    );
}
