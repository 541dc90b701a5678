use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cbamnet_core::attention::{heatmap, AttentionKind};
use cbamnet_core::backbone::{
    build_model, decode_checkpoint, encode_checkpoint, load_checkpoint, Model,
};
use cbamnet_core::checks::{parse_targets, run_suite, TOLERANCE};
use cbamnet_core::data::{
    generate_synthetic, load_selection, read_manifest, scan_dataset, split_stratified, to_channels,
    write_manifest, Manifest, Split,
};
use cbamnet_core::hash::sha256_hex;
use cbamnet_core::metrics::{evaluate, roc_csv, EvalReport};
use cbamnet_core::preprocess::{
    encode_png, finish, prepare, read_image, PreprocessConfig, TensorSidecar, DUMP_DTYPE,
};
use cbamnet_core::training::{train, OptimizerKind, TrainLog};
use cbamnet_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifacts::{json_bytes, ArtifactIndex};
use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const TRAIN_LOG_CSV: &str = "train_log.csv";
pub const TRAIN_LOG_JSON: &str = "train_log.json";
pub const EVAL_JSON: &str = "eval.json";

const IMAGE_EXTENSIONS: [&str; 4] = ["pgm", "ppm", "pnm", "png"];

/// `96` or `96x128` (height × width).
pub fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad size {s:?}: {e}"))
    };
    let (h, w) = match s.split_once(['x', 'X']) {
        Some((h, w)) => (parse(h)?, parse(w)?),
        None => (parse(s)?, parse(s)?),
    };
    if h == 0 || w == 0 {
        return Err(format!("size must be positive, got {s:?}"));
    }
    Ok((h, w))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub struct SynthOptions {
    pub out: PathBuf,
    pub n_per_class: usize,
    pub size: (usize, usize),
    pub seed: u64,
}

pub fn cmd_synth(o: &SynthOptions) -> Result<i32> {
    let written = generate_synthetic(&o.out, o.n_per_class, o.size, o.seed)?;
    let m = scan_dataset(&o.out)?;
    println!("wrote {written} images to {}", o.out.display());
    print_counts(&m);
    Ok(0)
}

fn print_counts(m: &Manifest) {
    println!("{:<10} {:<6} {:>6}", "label", "mag", "count");
    for c in m.counts() {
        println!(
            "{:<10} {:<6} {:>6}",
            c.label.as_str(),
            c.magnification.to_string(),
            c.count
        );
    }
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
}

pub struct PreprocessOptions {
    pub input: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_images(&p, out)?;
        } else if p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        {
            out.push(p);
        }
    }
    Ok(())
}

/// `a/b/c.pgm` relative to `root`, without extension, `/`-separated.
fn relative_stem(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path).with_extension("");
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

pub fn cmd_preprocess(o: &PreprocessOptions) -> Result<i32> {
    let run = RunConfig::load_or_default(o.config.as_deref())?.resolve(o.seed)?;
    let hash = run.hash();
    let model = match &o.checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if o.config.is_some() && ck.config_hash != hash {
                eprintln!(
                    "warning: checkpoint config hash {} differs from {hash}",
                    ck.config_hash
                );
            }
            Some(ck.model)
        }
        None => None,
    };
    let mut images = Vec::new();
    collect_images(&o.input, &mut images)?;
    if images.is_empty() {
        println!("no images under {}", o.input.display());
        return Ok(0);
    }
    create_dir(&o.out)?;
    let mut index = ArtifactIndex::new("preprocess", &hash);
    for path in &images {
        let stem = relative_stem(&o.input, path);
        let img = read_image(path)?;
        let prepared = prepare(&img, &run.preprocess)?;
        let t = finish(&prepared, &run.preprocess, None);
        index.write(&o.out, &format!("{stem}.f64"), &t.to_le_bytes())?;
        let sidecar = TensorSidecar {
            shape: t.shape().to_vec(),
            dtype: DUMP_DTYPE.into(),
            config_hash: hash.clone(),
        };
        index.write(&o.out, &format!("{stem}.json"), &json_bytes(&sidecar))?;
        index.write(
            &o.out,
            &format!("{stem}.contrast.png"),
            &encode_png(&prepared)?,
        )?;
        if let Some(model) = &model {
            for (name, map) in attention_heatmaps(model, &prepared, &run.preprocess)? {
                index.write(&o.out, &format!("{stem}.{name}.png"), &map)?;
            }
        }
    }
    index.save(&o.out)?;
    println!("processed {} images into {}", images.len(), o.out.display());
    Ok(0)
}

/// PNG-encoded attention maps of one prepared image, one per stage.
fn attention_heatmaps(
    model: &Model,
    prepared: &cbamnet_core::preprocess::Image,
    pre: &PreprocessConfig,
) -> Result<Vec<(String, Vec<u8>)>> {
    if model.config.attention == AttentionKind::None {
        return Ok(Vec::new());
    }
    let img = to_channels(prepared.clone(), model.config.in_channels)?;
    let t = finish(&img, pre, None);
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    let x = t.reshape(&shape)?;
    model
        .attention_maps(&x)?
        .into_iter()
        .map(|(name, map)| Ok((format!("attention-{name}"), encode_png(&heatmap(&map))?)))
        .collect()
}

#[derive(Default)]
pub struct TrainOptions {
    pub data: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<OptimizerKind>,
    pub patience: Option<usize>,
    pub attention: Option<AttentionKind>,
    pub target_size: Option<(usize, usize)>,
    pub quiet: bool,
}

impl TrainOptions {
    /// File values with flags applied on top.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut run = RunConfig::load_or_default(self.config.as_deref())?;
        if let Some(d) = &self.data {
            run.data = Some(d.clone());
        }
        if let Some(o) = &self.out {
            run.out = Some(o.clone());
        }
        if let Some(v) = self.epochs {
            run.train.max_epochs = v;
        }
        if let Some(v) = self.learning_rate {
            run.train.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            run.train.batch_size = v;
        }
        if let Some(v) = self.optimizer {
            run.train.optimizer = v;
        }
        if let Some(v) = self.patience {
            run.train.early_stopping_patience = v;
        }
        if let Some(v) = self.attention {
            run.model.attention = v;
        }
        if let Some(v) = self.target_size {
            run.preprocess.target_size = v;
        }
        if run.data.is_none() {
            return Err(Error::Config(
                "missing --data: no dataset root given on the command line or in the config".into(),
            ));
        }
        run.resolve(self.seed)
    }
}

/// TrainLog JSON as written next to a checkpoint.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogFile {
    pub config_hash: String,
    #[serde(flatten)]
    pub log: TrainLog,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigFile {
    pub config_hash: String,
    pub config: RunConfig,
}

pub fn cmd_train(o: &TrainOptions) -> Result<i32> {
    let run = o.resolve()?;
    let hash = run.hash();
    let data = run.data.clone().expect("resolve checks --data");
    let out = run.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    let start = Instant::now();
    let manifest = split_stratified(&scan_dataset(&data)?, &run.split)?;
    let channels = run.model.in_channels;
    let train_set = load_selection(
        &manifest,
        Some(Split::Train),
        None,
        &run.preprocess,
        channels,
    )?;
    let val_set = load_selection(&manifest, Some(Split::Val), None, &run.preprocess, channels)?;
    if !o.quiet {
        println!(
            "train {} / val {} images, config {hash}",
            train_set.len(),
            val_set.len()
        );
    }
    let model = build_model(&run.model)?;
    let (best, log) = train(
        &model,
        &train_set,
        &val_set,
        &run.preprocess,
        &run.train,
        &mut |e| {
            if !o.quiet {
                println!(
                    "epoch {:>3}  train {:.5}  val {:.5}  acc {:.4}  {:.1}s",
                    e.epoch, e.train_loss, e.val_loss, e.val_acc, e.seconds
                );
            }
        },
    )?;
    create_dir(&out)?;
    let mut index = ArtifactIndex::new("train", &hash);
    let meta = json!({
        "run": run.portable(),
        "best_epoch": log.best_epoch,
        "manifest_fingerprint": manifest.fingerprint,
    });
    index.write(
        &out,
        CHECKPOINT_FILE,
        &encode_checkpoint(&best, &hash, &meta),
    )?;
    index.write(&out, TRAIN_LOG_CSV, log.to_csv().as_bytes())?;
    let log_file = TrainLogFile {
        config_hash: hash.clone(),
        log,
    };
    index.write(&out, TRAIN_LOG_JSON, &json_bytes(&log_file))?;
    let config_file = ConfigFile {
        config_hash: hash.clone(),
        config: run.clone(),
    };
    index.write(&out, CONFIG_FILE, &json_bytes(&config_file))?;
    let manifest_path = out.join(MANIFEST_FILE);
    write_manifest(&manifest_path, &manifest)?;
    let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    index.files.insert(MANIFEST_FILE.into(), sha256_hex(&bytes));
    index.save(&out)?;
    if !o.quiet {
        println!(
            "best epoch {} of {}; wrote {} in {:.1}s",
            log_file.log.best_epoch,
            log_file.log.epochs.len(),
            out.display(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(0)
}

pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub data: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// `None` evaluates every record.
    pub split: Option<Split>,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub config_hash: String,
    pub split: Option<Split>,
    pub report: EvalReport,
}

fn roc_file_name(tag: &str) -> String {
    format!("roc_{tag}.csv")
}

pub fn cmd_eval(o: &EvalOptions) -> Result<i32> {
    let bytes = fs::read(&o.checkpoint).map_err(|e| Error::io(&o.checkpoint, e))?;
    let ck = decode_checkpoint(&bytes)?;
    let run = match &o.config {
        Some(path) => {
            let run = RunConfig::load(path)?.resolve(o.seed)?;
            if run.hash() != ck.config_hash {
                eprintln!(
                    "warning: config hash {} does not match checkpoint hash {}; preprocessing may differ from training",
                    run.hash(),
                    ck.config_hash
                );
            }
            run
        }
        None => match ck.metadata.get("run") {
            Some(v) => serde_json::from_value::<RunConfig>(v.clone())
                .map_err(|e| Error::Data(format!("checkpoint run config: {e}")))?,
            None => RunConfig {
                model: ck.model.config.clone(),
                ..RunConfig::default()
            },
        },
    };
    let manifest = match (&o.manifest, &o.data) {
        (Some(m), _) => read_manifest(m)?,
        (None, Some(d)) => split_stratified(&scan_dataset(d)?, &run.split)?,
        (None, None) => return Err(Error::Config("eval needs --data or --manifest".into())),
    };
    let set = load_selection(
        &manifest,
        o.split,
        None,
        &run.preprocess,
        ck.model.config.in_channels,
    )?;
    let report = evaluate(&ck.model, &set, &run.preprocess, run.train.batch_size)?;
    create_dir(&o.out)?;
    let mut index = ArtifactIndex::new("eval", &ck.config_hash);
    index.write(
        &o.out,
        &roc_file_name("overall"),
        roc_csv(&report.overall.roc_points).as_bytes(),
    )?;
    for (mag, entry) in &report.per_magnification {
        index.write(
            &o.out,
            &roc_file_name(mag.as_str()),
            roc_csv(&entry.roc_points).as_bytes(),
        )?;
    }
    print_report(&report);
    let file = EvalFile {
        config_hash: ck.config_hash.clone(),
        split: o.split,
        report,
    };
    index.write(&o.out, EVAL_JSON, &json_bytes(&file))?;
    index.save(&o.out)?;
    Ok(0)
}

fn print_report(r: &EvalReport) {
    println!(
        "{:<8} {:>5} {:>8} {:>9} {:>8} {:>8} {:>8}",
        "subset", "n", "accuracy", "precision", "recall", "f1", "auc"
    );
    let rows = std::iter::once(("overall", &r.overall))
        .chain(r.per_magnification.iter().map(|(k, v)| (k.as_str(), v)));
    for (name, e) in rows {
        let auc = e.auc.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        println!(
            "{:<8} {:>5} {:>8.4} {:>9.4} {:>8.4} {:>8.4} {:>8}",
            name, e.n, e.accuracy, e.precision, e.recall, e.f1, auc
        );
    }
}

pub struct GradcheckOptions {
    pub which: String,
    pub seed: u64,
    pub seeds: u64,
    pub inject_fault: bool,
}

pub fn cmd_gradcheck(o: &GradcheckOptions) -> Result<i32> {
    if o.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let targets = parse_targets(&o.which)?;
    let reports = run_suite(&targets, o.seed..o.seed + o.seeds, o.inject_fault)?;
    println!(
        "{:<11} {:>5} {:<48} {:>7} {:>11}  result",
        "target", "seed", "group", "checked", "max_rel_err"
    );
    for r in &reports {
        for g in &r.groups {
            println!(
                "{:<11} {:>5} {:<48} {:>7} {:>11.3e}  {}",
                r.target.as_str(),
                r.seed,
                g.name,
                g.checked,
                g.max_rel_err,
                verdict(g.passes(TOLERANCE))
            );
        }
    }
    println!();
    let mut all = true;
    for t in &targets {
        let mine: Vec<_> = reports.iter().filter(|r| r.target == *t).collect();
        let worst = mine.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max);
        let pass = mine.iter().all(|r| r.passes());
        all &= pass;
        println!(
            "{:<11} seeds {:>3}  max_rel_err {:>10.3e}  {}",
            t.as_str(),
            mine.len(),
            worst,
            verdict(pass)
        );
    }
    Ok(if all { 0 } else { 1 })
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

pub struct ReportOptions {
    pub run: PathBuf,
}

/// Verifies every artifact digest and config hash in a run directory.
pub fn cmd_report(o: &ReportOptions) -> Result<i32> {
    let index = ArtifactIndex::load(&o.run)?;
    println!("{} run, config {}", index.command, index.config_hash);
    let mut problems = Vec::new();
    for (name, digest) in &index.files {
        let path = o.run.join(name);
        let status = match fs::read(&path) {
            Ok(bytes) if sha256_hex(&bytes) == *digest => match embedded_hash(name, &bytes)? {
                Some(h) if h != index.config_hash => {
                    problems.push(format!("{name} carries config hash {h}"));
                    "HASH MISMATCH"
                }
                _ => "ok",
            },
            Ok(_) => {
                problems.push(format!("{name} was modified"));
                "MODIFIED"
            }
            Err(_) => {
                problems.push(format!("{name} is missing"));
                "MISSING"
            }
        };
        println!("  {status:<13} {name}");
    }
    if let Ok(bytes) = fs::read(o.run.join(CONFIG_FILE)) {
        let file: ConfigFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Data(format!("{CONFIG_FILE}: {e}")))?;
        let recomputed = file.config.hash();
        if recomputed != index.config_hash {
            problems.push(format!("{CONFIG_FILE} hashes to {recomputed}"));
        }
    }
    if let Ok(bytes) = fs::read(o.run.join(TRAIN_LOG_JSON)) {
        let file: TrainLogFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Data(format!("{TRAIN_LOG_JSON}: {e}")))?;
        if let Some(best) = file
            .log
            .epochs
            .iter()
            .find(|e| e.epoch == file.log.best_epoch)
        {
            println!(
                "best epoch {} of {}: val loss {:.5}, val acc {:.4}",
                best.epoch,
                file.log.epochs.len(),
                best.val_loss,
                best.val_acc
            );
        }
    }
    if let Ok(bytes) = fs::read(o.run.join(EVAL_JSON)) {
        let file: EvalFile =
            serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{EVAL_JSON}: {e}")))?;
        print_report(&file.report);
    }
    for p in &problems {
        println!("problem: {p}");
    }
    println!(
        "{}",
        if problems.is_empty() {
            "consistent"
        } else {
            "INCONSISTENT"
        }
    );
    Ok(if problems.is_empty() { 0 } else { 1 })
}

/// The config hash stored inside an artifact, where the format has one.
fn embedded_hash(name: &str, bytes: &[u8]) -> Result<Option<String>> {
    if name.ends_with(".ckpt") {
        return Ok(Some(decode_checkpoint(bytes)?.config_hash));
    }
    if name.ends_with(".json") {
        let v: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| Error::Data(format!("{name}: {e}")))?;
        return Ok(v
            .get("config_hash")
            .and_then(|h| h.as_str())
            .map(String::from));
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("96"), Ok((96, 96)));
        assert_eq!(parse_size("32x48"), Ok((32, 48)));
        assert!(parse_size("0").is_err());
        assert!(parse_size("ax3").is_err());
    }

    #[test]
    fn stems_are_relative_and_slashed() {
        let root = Path::new("/a/in");
        assert_eq!(relative_stem(root, Path::new("/a/in/x/y.pgm")), "x/y");
        assert_eq!(relative_stem(root, Path::new("/a/in/z.png")), "z");
    }
}
