//! Acceptance suite: one PASS/FAIL line per criterion, each at its stated
//! tolerance. Runs without the libtest harness; exits non-zero on any FAIL.

#[path = "../../core/tests/common/oracles.rs"]
mod oracles;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cbamnet_cli::commands::{
    cmd_train, TrainLogFile, TrainOptions, CHECKPOINT_FILE, TRAIN_LOG_JSON,
};
use cbamnet_core::attention::{
    cbam, channel_attention, deformable_attention, spatial_attention, CbamParams,
    ChannelAttentionParams, DeformableAttentionParams, SpatialAttentionParams,
};
use cbamnet_core::backbone::{build_model, ModelConfig};
use cbamnet_core::checks::{run_suite, CheckTarget, TOLERANCE};
use cbamnet_core::data::{
    generate_synthetic, load_selection, scan_dataset, split_stratified, Split, SplitConfig,
};
use cbamnet_core::metrics::{roc_auc, scores, ConfusionMatrix};
use cbamnet_core::preprocess::{
    clahe, clahe_plane, denormalize, median_filter, normalize, Image, PreprocessConfig,
};
use cbamnet_core::training::{bce_loss, evaluate_loss, train, TrainConfig, TrainLog};
use cbamnet_tensor::{conv2d_tensor, Conv2dSpec, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, std, rng)
}

fn random_image(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::from_fn(h, w, c, |_, _, _| rng.random()).unwrap()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let reports = run_suite(&CheckTarget::ALL, 0..20, false).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mut worst = Vec::new();
    for t in CheckTarget::ALL {
        let mine: Vec<_> = reports.iter().filter(|r| r.target == t).collect();
        let err = mine.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max);
        ensure(mine.len() >= 20, || {
            format!("{t}: only {} seeds", mine.len())
        })?;
        ensure(mine.iter().all(|r| r.passes()), || {
            format!("{t}: max relative error {err:.3e} >= {TOLERANCE:e}")
        })?;
        worst.push(format!("{t} {err:.1e}"));
    }
    ensure(elapsed < Duration::from_secs(120), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "20 seeds, h=1e-5, worst [{}], {:.1}s",
        worst.join(", "),
        elapsed.as_secs_f64()
    ))
}

fn cbam_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for shape in [[1, 8, 16, 16], [2, 4, 5, 7], [3, 16, 2, 3]] {
        let x = randn(&shape, 2.0, &mut rng);
        let tape = Tape::new();
        let p = CbamParams::zeros(shape[1], 4)
            .unwrap()
            .map("", &mut |_, t| tape.constant(t.clone()));
        let y = cbam(tape.constant(x.clone()), &p).unwrap().value();
        ensure(
            y.data().iter().zip(x.data()).all(|(a, b)| *a == 0.25 * b),
            || format!("zero parameters do not give 0.25 f on {shape:?}"),
        )?;
    }
    let mut worst = 0f64;
    for _ in 0..20 {
        let x = randn(&[1, 8, 16, 16], 1.0, &mut rng);
        let p = CbamParams {
            channel: ChannelAttentionParams {
                w0: randn(&[8, 2], 0.5, &mut rng),
                w1: randn(&[2, 8], 0.5, &mut rng),
            },
            spatial: SpatialAttentionParams {
                kernel: randn(&[1, 2, 7, 7], 0.3, &mut rng),
            },
        };
        let expect = oracles::cbam(&x, &p.channel.w0, &p.channel.w1, &p.spatial.kernel);
        let tape = Tape::new();
        let pv = p.map("", &mut |_, t| tape.constant(t.clone()));
        let xv = tape.constant(x);
        let (mc, fc) = channel_attention(xv, &pv.channel).unwrap();
        let (ms, _) = spatial_attention(fc, &pv.spatial).unwrap();
        let gates: Vec<f64> = mc
            .value()
            .data()
            .iter()
            .chain(ms.value().data())
            .copied()
            .collect();
        ensure(gates.iter().all(|g| *g > 0.0 && *g < 1.0), || {
            "a gate left (0, 1)".into()
        })?;
        worst = worst.max(cbam(xv, &pv).unwrap().value().max_abs_diff(&expect.out));
    }
    ensure(worst <= 1e-12, || format!("oracle difference {worst:e}"))?;
    Ok(format!(
        "zero params exact, gates in (0,1), oracle diff {worst:.1e} on 20 inputs of 1x8x16x16"
    ))
}

fn deformable_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0f64;
    let cases = 120;
    for case in 0..cases {
        let (b, c) = (rng.random_range(1..3), rng.random_range(1..5));
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let k = [1, 3, 5][case % 3];
        let x = randn(&[b, c, h, w], 1.0, &mut rng);
        let mut p = DeformableAttentionParams::zeros(c, k, k);
        p.value_kernel = randn(&[c, c, k, k], 0.5, &mut rng);
        let tape = Tape::new();
        let pv = p.map("", &mut |_, t| tape.constant(t.clone()));
        let y = deformable_attention(tape.constant(x.clone()), &pv)
            .unwrap()
            .value();
        let expect = conv2d_tensor(&x, &p.value_kernel, Conv2dSpec::same(k)).unwrap();
        worst = worst.max(y.max_abs_diff(&expect));
    }
    ensure(worst <= 1e-12, || format!("max difference {worst:e}"))?;
    Ok(format!("{cases} cases, max difference {worst:.1e}"))
}

fn preprocessing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for case in 0..60 {
        let img = random_image(
            rng.random_range(1..24),
            rng.random_range(1..24),
            1 + 2 * (case % 2),
            &mut rng,
        );
        for k in [3, 5] {
            ensure(
                median_filter(&img, k).unwrap() == oracles::median_filter(&img, k),
                || format!("median k={k} differs from sort oracle in case {case}"),
            )?;
        }
    }
    for v in 0..=255u8 {
        for c in [1, 3] {
            let img = Image::filled(24, 40, c, v).unwrap();
            ensure(clahe(&img, (8, 8), 2.0).unwrap() == img, || {
                format!("CLAHE moved constant {v}")
            })?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let fixture = Image::from_fn(64, 64, 1, |y, x, _| {
        if x < 32 {
            (40 + (y * 3 + x) % 50) as u8
        } else {
            let base = 120 + ((x * x + y) % 90) as i32;
            (base + rng.random_range(-10..=10)).clamp(0, 255) as u8
        }
    })
    .unwrap();
    for clip in [1.5, 2.0, 4.0, 40.0] {
        let got = clahe_plane(fixture.pixels(), 64, 64, (1, 2), clip).unwrap();
        ensure(
            got == oracles::clahe_two_tiles(&fixture, clip).pixels(),
            || format!("two-tile CLAHE differs at clip {clip}"),
        )?;
    }
    let grid = Image::from_fn(16, 16, 1, |y, x, _| (y * 16 + x) as u8).unwrap();
    let t = normalize(&grid);
    ensure(
        t.data()
            .iter()
            .enumerate()
            .all(|(i, v)| *v == i as f64 / 255.0),
        || "normalize is not v/255".into(),
    )?;
    ensure(denormalize(&t).unwrap() == grid, || {
        "normalize does not round-trip".into()
    })?;
    Ok("median k=3,5 on 60 images, CLAHE constants and two-tile fixture exact, 256 levels round-trip".into())
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = 0f64;
    for case in 0..200 {
        let n = rng.random_range(2..80);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = rng.random();
                if case % 2 == 0 {
                    (s * 5.0).floor() / 5.0
                } else {
                    s
                }
            })
            .collect();
        let (_, auc) = roc_auc(&labels, &scores).unwrap();
        worst = worst.max((auc - oracles::mann_whitney_auc(&labels, &scores)).abs());
    }
    ensure(worst <= 1e-12, || format!("AUC differs by {worst:e}"))?;
    let s = scores(&ConfusionMatrix {
        tp: 40,
        fp: 10,
        fn_: 20,
        tn: 30,
    })
    .unwrap();
    let pinned = [
        (s.precision, 0.8),
        (s.recall, 2.0 / 3.0),
        (s.f1, 8.0 / 11.0),
        (s.accuracy, 0.7),
    ];
    ensure(pinned.iter().all(|(a, b)| (a - b).abs() <= 1e-12), || {
        format!("pinned fixture gave {s:?}")
    })?;
    Ok(format!(
        "200 score sets, AUC diff {worst:.1e}; P=0.8 R=2/3 F1=8/11 acc=0.7"
    ))
}

/// Final parameters as raw bits plus the log without wall times.
fn training_run(root: &Path) -> Result<(Vec<u64>, TrainLog, f64), String> {
    let m = split_stratified(
        &scan_dataset(root).map_err(|e| e.to_string())?,
        &SplitConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let pre = PreprocessConfig::default();
    let model_cfg = ModelConfig::default();
    let load = |s| {
        load_selection(&m, Some(s), None, &pre, model_cfg.in_channels).map_err(|e| e.to_string())
    };
    let (train_set, val_set) = (load(Split::Train)?, load(Split::Val)?);
    let cfg = TrainConfig {
        max_epochs: 30,
        learning_rate: 1e-3,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let model = build_model(&model_cfg).map_err(|e| e.to_string())?;
    let (best, mut log) =
        train(&model, &train_set, &val_set, &pre, &cfg, &mut |_| {}).map_err(|e| e.to_string())?;
    let (_, acc) = evaluate_loss(&best, &val_set, &pre, 16).map_err(|e| e.to_string())?;
    for e in &mut log.epochs {
        e.seconds = 0.0;
    }
    let bits = best
        .params
        .named()
        .into_iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
        .collect();
    Ok((bits, log, acc))
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    // 25 patients per class at four magnifications: 100 images per class.
    let written = generate_synthetic(dir.path(), 25, (96, 96), 0).map_err(|e| e.to_string())?;
    ensure(written == 200, || format!("wrote {written} images"))?;
    let (bits_a, log_a, acc) = training_run(dir.path())?;
    let (bits_b, log_b, _) = training_run(dir.path())?;
    let elapsed = start.elapsed();
    ensure(acc >= 0.95, || format!("validation accuracy {acc}"))?;
    ensure(log_a.epochs.len() <= 30, || {
        format!("{} epochs", log_a.epochs.len())
    })?;
    ensure(bits_a == bits_b && log_a == log_b, || {
        "two runs with one seed differ".into()
    })?;
    ensure(elapsed < Duration::from_secs(600), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "val acc {acc:.4} at best epoch {}, repeat run identical, {:.0}s for both runs",
        log_a.best_epoch,
        elapsed.as_secs_f64()
    ))
}

fn loss() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for _ in 0..50 {
        let b = rng.random_range(1..10);
        let rows: Vec<f64> = (0..b)
            .flat_map(|_| {
                let v: f64 = rng.random_range(-5.0..5.0);
                [v, v]
            })
            .collect();
        let labels = Tensor::from_fn(&[b], |_| rng.random_range(0..2) as f64);
        let tape = Tape::new();
        let l = bce_loss(
            tape.constant(Tensor::new(vec![b, 2], rows).unwrap()),
            &labels,
        )
        .unwrap();
        let v = l.item().unwrap();
        ensure((v - std::f64::consts::LN_2).abs() <= 1e-12, || {
            format!("p=0.5 gave {v}")
        })?;
    }
    let mut worst = 0f64;
    for _ in 0..200 {
        let b = rng.random_range(1..32);
        let logits: Vec<[f64; 2]> = (0..b)
            .map(|_| [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)])
            .collect();
        let labels: Vec<f64> = (0..b).map(|_| rng.random_range(0..2) as f64).collect();
        let tape = Tape::new();
        let t = Tensor::new(vec![b, 2], logits.iter().flatten().copied().collect()).unwrap();
        let got = bce_loss(
            tape.constant(t),
            &Tensor::new(vec![b], labels.clone()).unwrap(),
        )
        .unwrap()
        .item()
        .unwrap();
        worst = worst.max((got - oracles::bce(&logits, &labels)).abs());
    }
    ensure(worst <= 1e-12, || format!("oracle difference {worst:e}"))?;
    Ok(format!(
        "p=0.5 gives ln 2 on 50 batches, oracle diff {worst:.1e} on 200 batches"
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    generate_synthetic(&data, 6, (48, 48), 9).map_err(|e| e.to_string())?;
    let run = |out: PathBuf| {
        let opts = TrainOptions {
            data: Some(data.clone()),
            out: Some(out),
            seed: Some(11),
            epochs: Some(3),
            target_size: Some((48, 48)),
            quiet: true,
            ..TrainOptions::default()
        };
        cmd_train(&opts).map_err(|e| e.to_string())
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(a.clone())?;
    run(b.clone())?;
    let read = |p: PathBuf| fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
    ensure(
        read(a.join(CHECKPOINT_FILE))? == read(b.join(CHECKPOINT_FILE))?,
        || "checkpoints differ".into(),
    )?;
    let log = |dir: &Path| -> Result<TrainLogFile, String> {
        let mut f: TrainLogFile =
            serde_json::from_slice(&read(dir.join(TRAIN_LOG_JSON))?).map_err(|e| e.to_string())?;
        for e in &mut f.log.epochs {
            ensure(e.seconds.is_finite() && e.seconds >= 0.0, || {
                format!("wall time {}", e.seconds)
            })?;
            e.seconds = 0.0;
        }
        Ok(f)
    };
    ensure(log(&a)? == log(&b)?, || "train logs differ".into())?;
    Ok("checkpoints bitwise equal; train logs equal in every field except wall time".into())
}

fn readme() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    for needle in [
        "98.96%",
        "98.31%",
        "400X",
        "Table II",
        "Table III",
        "out of scope",
        "criteria 1-8",
    ] {
        ensure(text.contains(needle), || format!("README lacks {needle:?}"))?;
    }
    Ok("README states the out-of-scope results and points to criteria 1-8".into())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradients),
        ("CBAM algebra", cbam_algebra),
        ("deformable reduction", deformable_reduction),
        ("preprocessing oracles", preprocessing),
        ("metrics oracles", metrics),
        ("end-to-end training", end_to_end),
        ("loss correctness", loss),
        ("determinism", determinism),
        ("non-reproducibility statement", readme),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {detail}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
