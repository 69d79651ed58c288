use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use swinforge::colorframe::{write_cache, ColorFrame, Preprocessor, RgbImage};
use swinforge::dataset::{iterate_batches, DatasetManifest, Label, SampleLoader, Split, SplitRatios};
use swinforge::metrics::{confusion, metrics_csv, prf1, roc_auc, roc_csv};
use swinforge::plot::{line_chart_svg, scatter_svg, Series};
use swinforge::swin::{load_checkpoint, read_checkpoint_header, CheckpointHeader, SwinConfig, SwinModel};
use swinforge::tensor::DType;
use swinforge::trainer::{evaluate, train as train_loop, AdamConfig, EpochLog, RunOutput, TrainConfig};
use swinforge::tsne::{self, TsneConfig};
use swinforge::{Error, Float, Result};

use crate::echo::Echo;
use crate::{EvalArgs, PrepareArgs, RocArgs, TrainArgs, TsneArgs};

const MANIFEST_FILE: &str = "manifest.tsv";

fn parse_ratios(s: &str) -> Result<SplitRatios> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("split ratios `{s}`: {e}")))?;
    match parts[..] {
        [train, val, test] => SplitRatios::new(train, val, test),
        _ => Err(Error::Config(format!("split ratios `{s}` must look like 9:1:2"))),
    }
}

/// `<manifest dir>/cache/<frame>`, where `prepare --cache` puts its planes.
fn cache_dir(manifest: &Path, frame: ColorFrame) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join("cache").join(frame.to_string())
}

fn loader_for(manifest: &Path, frame: ColorFrame, size: usize) -> SampleLoader {
    let mut loader = SampleLoader::new(Preprocessor::new(frame, size));
    let cache = cache_dir(manifest, frame);
    if cache.is_dir() {
        log::info!("reading cached planes from {}", cache.display());
        loader.cache_dir = Some(cache);
    }
    loader
}

pub fn prepare(a: &PrepareArgs) -> Result<()> {
    let ratios = parse_ratios(&a.split_ratios)?;
    Echo::new("prepare")
        .field("root", a.root.display())
        .field("color_frame", a.color_frame)
        .field("seed", a.seed)
        .field("split_ratios", &a.split_ratios)
        .field("cache", a.cache)
        .write(&a.out)?;
    let root = fs::canonicalize(&a.root).map_err(|e| Error::Data { path: a.root.clone(), detail: e.to_string() })?;
    let manifest = DatasetManifest::build(&root, ratios, a.seed)?;
    manifest.save(&a.out.join(MANIFEST_FILE))?;

    let mut counts = String::from("split,label,count\n");
    for split in Split::ALL {
        let (f, r) = (manifest.count(split, Label::Fake), manifest.count(split, Label::Real));
        println!("{split:<5}  fake {f:>7}  real {r:>7}");
        for (label, n) in [(Label::Fake, f), (Label::Real, r)] {
            let _ = writeln!(counts, "{split},{label},{n}");
        }
    }
    fs::write(a.out.join("counts.csv"), counts)?;

    if a.cache {
        let dir = cache_dir(&a.out.join(MANIFEST_FILE), a.color_frame);
        let pre = Preprocessor::new(a.color_frame, 0);
        manifest.records().par_iter().try_for_each(|r| {
            let img = RgbImage::open(&manifest.abs_path(r))?;
            let planes = pre.unit_planes(&img);
            write_cache(&SampleLoader::cache_path(&dir, r), &planes, img.height(), img.width())
        })?;
        println!("cached {} images under {}", manifest.records().len(), dir.display());
    }
    Ok(())
}

fn curves_svg(logs: &[EpochLog], dir: &Path) -> Result<()> {
    let series = |name: &str, f: fn(&EpochLog) -> f64| Series {
        name: name.to_string(),
        points: logs.iter().map(|l| (l.epoch as f64 + 1.0, f(l))).collect(),
    };
    let loss = [series("train", |l| l.train_loss), series("validation", |l| l.val_loss)];
    let acc = [series("train", |l| l.train_accuracy), series("validation", |l| l.val_accuracy)];
    fs::write(dir.join("loss.svg"), line_chart_svg(&loss, "Loss", "epoch", "loss", false))?;
    fs::write(dir.join("accuracy.svg"), line_chart_svg(&acc, "Accuracy", "epoch", "accuracy", false))?;
    Ok(())
}

fn train_with<T: Float>(model: &SwinModel, manifest: &DatasetManifest, loader: &SampleLoader, cfg: &TrainConfig, out: &RunOutput) -> Result<()> {
    let params = model.init_params::<T>(cfg.seed)?;
    let outcome = train_loop(model, params, manifest, loader, cfg, Some(out))?;
    curves_svg(&outcome.logs, &out.dir)?;
    if let (Some(best), Some(last)) = (outcome.best_epoch, outcome.logs.last()) {
        println!(
            "best epoch {} (val accuracy {:.4}); last epoch val loss {:.4} accuracy {:.4}",
            best + 1,
            outcome.logs[best].val_accuracy,
            last.val_loss,
            last.val_accuracy
        );
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let config = SwinConfig::preset(a.preset);
    let cfg = TrainConfig {
        adam: AdamConfig { learning_rate: a.lr, ..AdamConfig::default() },
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
    };
    cfg.validate()?;
    let manifest_path = fs::canonicalize(&a.manifest)
        .map_err(|e| Error::Data { path: a.manifest.clone(), detail: e.to_string() })?;
    let model_json = serde_json::to_string(&config).map_err(|e| Error::Format(e.to_string()))?;
    Echo::new("train")
        .field("manifest", manifest_path.display())
        .field("color_frame", a.color_frame)
        .field("preset", a.preset)
        .field("epochs", a.epochs)
        .field("batch_size", a.batch_size)
        .field("lr", a.lr)
        .field("betas", format!("{}, {}", cfg.adam.beta1, cfg.adam.beta2))
        .field("eps", cfg.adam.eps)
        .field("seed", a.seed)
        .field("precision", &a.precision)
        .field("model", model_json)
        .write(&a.out)?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let model = SwinModel::new(config)?;
    let loader = loader_for(&manifest_path, a.color_frame, model.config().input_size);
    let mut meta = BTreeMap::new();
    meta.insert("color_frame".to_string(), a.color_frame.to_string());
    meta.insert("preset".to_string(), a.preset.to_string());
    meta.insert("manifest".to_string(), manifest_path.display().to_string());
    meta.insert("seed".to_string(), a.seed.to_string());
    let out = RunOutput { dir: a.out.clone(), meta };
    match a.precision.as_str() {
        "f64" => train_with::<f64>(&model, &manifest, &loader, &cfg, &out),
        _ => train_with::<f32>(&model, &manifest, &loader, &cfg, &out),
    }
}

/// Checkpoint header plus the manifest and color frame it should be run on.
struct Restored {
    header: CheckpointHeader,
    manifest_path: PathBuf,
    manifest: DatasetManifest,
    frame: ColorFrame,
}

fn restore(checkpoint: &Path, manifest: Option<&PathBuf>, frame: Option<ColorFrame>) -> Result<Restored> {
    let header = read_checkpoint_header(checkpoint)?;
    let manifest_path = match manifest {
        Some(p) => p.clone(),
        None => header
            .meta
            .get("manifest")
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config("checkpoint records no manifest; pass --manifest".into()))?,
    };
    let frame = match frame {
        Some(f) => f,
        None => header
            .meta
            .get("color_frame")
            .ok_or_else(|| Error::Config("checkpoint records no color frame; pass --color-frame".into()))?
            .parse()?,
    };
    let manifest = DatasetManifest::load(&manifest_path)?;
    Ok(Restored { header, manifest_path, manifest, frame })
}

fn stored_dtype(header: &CheckpointHeader) -> DType {
    header.tensors.first().map_or(DType::F32, |t| t.dtype)
}

fn eval_with<T: Float>(a: &EvalArgs, r: &Restored, expected: Option<&SwinConfig>) -> Result<()> {
    let (header, params) = load_checkpoint::<T>(&a.checkpoint, expected)?;
    let model = SwinModel::new(header.config)?;
    let loader = loader_for(&r.manifest_path, r.frame, model.config().input_size);
    let ev = evaluate(&model, &params, &r.manifest, a.split, &loader, a.batch_size)?;
    let positive = Label::Fake.index();
    let fake_scores: Vec<f64> = ev.scores.iter().map(|s| 1.0 - s).collect();
    let report = prf1(&confusion(&ev.predictions, &ev.labels, positive)?)?;
    if report.any_undefined() {
        log::warn!("some metrics have a zero denominator and are reported as 0");
    }
    let roc = roc_auc(&fake_scores, &ev.labels, positive)?;
    fs::write(a.out.join("metrics.csv"), metrics_csv(&report, roc.auc))?;
    fs::write(a.out.join("roc.csv"), roc_csv(&roc))?;

    let mut preds = String::from("path,label,prediction,score_fake\n");
    for (((rec, l), p), s) in r.manifest.split(a.split).iter().zip(&ev.labels).zip(&ev.predictions).zip(&fake_scores) {
        let name = |i: usize| Label::from_index(i).expect("binary label").to_string();
        let _ = writeln!(preds, "{},{},{},{s}", rec.path.display(), name(*l), name(*p));
    }
    fs::write(a.out.join("predictions.csv"), preds)?;

    let name = a.name.clone().unwrap_or_else(|| r.frame.to_string());
    let curve = Series { name: format!("{name} (AUC {:.3})", roc.auc), points: roc.points.clone() };
    let title = format!("ROC, {} split", a.split);
    fs::write(a.out.join("roc.svg"), line_chart_svg(&[curve], &title, "false positive rate", "true positive rate", true))?;
    println!(
        "{} split: loss {:.4} accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4} auc {:.4}",
        a.split, ev.loss, report.accuracy, report.precision, report.recall, report.f1, roc.auc
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let r = restore(&a.checkpoint, a.manifest.as_ref(), a.color_frame)?;
    Echo::new("eval")
        .field("checkpoint", a.checkpoint.display())
        .field("split", a.split)
        .field("manifest", r.manifest_path.display())
        .field("color_frame", r.frame)
        .field("batch_size", a.batch_size)
        .write(&a.out)?;
    let expected = a.preset.map(SwinConfig::preset);
    match stored_dtype(&r.header) {
        DType::F64 => eval_with::<f64>(a, &r, expected.as_ref()),
        DType::F32 => eval_with::<f32>(a, &r, expected.as_ref()),
    }
}

/// Perplexity actually used for `n` points: the request, capped at a third
/// of the available neighbours.
fn usable_perplexity(requested: f64, n: usize) -> f64 {
    requested.min(((n as f64 - 1.0) / 3.0).max(1.5))
}

fn tsne_with<T: Float>(a: &TsneArgs, r: &Restored, sample: DatasetManifest) -> Result<()> {
    let (header, params) = load_checkpoint::<T>(&a.checkpoint, None)?;
    let model = SwinModel::new(header.config)?;
    let loader = loader_for(&r.manifest_path, r.frame, model.config().input_size);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for batch in iterate_batches(&sample, a.split, a.batch_size, None, &loader)? {
        let batch = batch?;
        let f = model.extract_features(&params, &batch.inputs.cast::<T>())?;
        features.extend(f.data().iter().map(|v| v.as_f64()));
        labels.extend(batch.labels);
    }
    let n = labels.len();
    let d = features.len() / n;
    let cfg = TsneConfig {
        perplexity: usable_perplexity(a.perplexity, n),
        iterations: a.iterations,
        learning_rate: a.learning_rate,
        exaggeration: a.exaggeration,
        exaggeration_iters: TsneConfig::default().exaggeration_iters.min(a.iterations),
        seed: a.seed,
        ..TsneConfig::default()
    };
    if cfg.perplexity != a.perplexity {
        log::warn!("perplexity {} is too large for {n} points; using {}", a.perplexity, cfg.perplexity);
    }
    let res = tsne::run(&features, n, d, &cfg)?;
    let names: Vec<String> = labels.iter().map(|&l| Label::from_index(l).expect("binary label").to_string()).collect();
    fs::write(a.out.join("embedding.csv"), tsne::embedding_csv(&res.embedding, &names))?;
    let mut kl = String::from("iteration,kl\n");
    for (i, v) in res.kl_trace.iter().enumerate() {
        let _ = writeln!(kl, "{i},{v}");
    }
    fs::write(a.out.join("kl.csv"), kl)?;
    let probe = tsne::linear_probe_accuracy(&res.embedding, &labels);
    let final_kl = res.kl_trace.last().copied().unwrap_or(f64::NAN);
    fs::write(
        a.out.join("tsne_summary.csv"),
        format!("metric,value\nperplexity,{}\nfinal_kl,{final_kl}\nlinear_probe_accuracy,{probe}\n", cfg.perplexity),
    )?;
    let points: Vec<(f64, f64)> = res.embedding.chunks(2).map(|p| (p[0], p[1])).collect();
    let title = format!("t-SNE of {} features ({}, {} split)", n, r.frame, a.split);
    fs::write(a.out.join("tsne.svg"), scatter_svg(&points, &labels, ["fake (CGI)", "real"], &title))?;
    println!("embedded {n} samples: final KL {final_kl:.4}, linear probe accuracy {probe:.4}");
    Ok(())
}

pub fn tsne(a: &TsneArgs) -> Result<()> {
    let r = restore(&a.checkpoint, a.manifest.as_ref(), a.color_frame)?;
    Echo::new("tsne")
        .field("checkpoint", a.checkpoint.display())
        .field("split", a.split)
        .field("manifest", r.manifest_path.display())
        .field("color_frame", r.frame)
        .field("n", a.n)
        .field("perplexity", a.perplexity)
        .field("iterations", a.iterations)
        .field("learning_rate", a.learning_rate)
        .field("exaggeration", a.exaggeration)
        .field("seed", a.seed)
        .write(&a.out)?;
    let available = r.manifest.split(a.split).len();
    if a.n > available {
        return Err(Error::Contract(format!("n = {} exceeds the {available} samples of the {} split", a.n, a.split)));
    }
    if a.n < 2 {
        return Err(Error::Contract("t-SNE needs n >= 2".into()));
    }
    let (n_fake, n_real) = (a.n.div_ceil(2), a.n / 2);
    let mut picked = r.manifest.sample_balanced(a.split, n_fake, a.seed);
    let mut kept_real = 0;
    picked.retain(|rec| {
        if rec.label == Label::Real {
            kept_real += 1;
            kept_real <= n_real
        } else {
            true
        }
    });
    if picked.len() != a.n {
        return Err(Error::Contract(format!(
            "the {} split cannot supply {n_fake} fake and {n_real} real samples",
            a.split
        )));
    }
    let sample = DatasetManifest::from_records(r.manifest.root(), r.manifest.seed(), picked);
    match stored_dtype(&r.header) {
        DType::F64 => tsne_with::<f64>(a, &r, sample),
        DType::F32 => tsne_with::<f32>(a, &r, sample),
    }
}

fn read_csv_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data { path: path.to_path_buf(), detail: e.to_string() })?;
    text.lines()
        .skip(1)
        .map(|l| {
            l.split_once(',')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::Format(format!("{}: bad line `{l}`", path.display())))
        })
        .collect()
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Format(format!("{}: `{s}` is not a number", path.display())))
}

pub fn roc(a: &RocArgs) -> Result<()> {
    let mut runs = Vec::new();
    for spec in &a.runs {
        let (name, dir) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--run expects NAME=EVAL_DIR, got `{spec}`")))?;
        runs.push((name.to_string(), PathBuf::from(dir)));
    }
    let mut echo = Echo::new("roc");
    for (name, dir) in &runs {
        echo = echo.field(name, dir.display());
    }
    echo.write(&a.out)?;
    let mut series = Vec::new();
    let mut merged = String::from("series,fpr,tpr\n");
    for (name, dir) in &runs {
        let roc_path = dir.join("roc.csv");
        let mut points = Vec::new();
        for (x, y) in read_csv_pairs(&roc_path)? {
            points.push((parse_f64(&roc_path, &x)?, parse_f64(&roc_path, &y)?));
            let _ = writeln!(merged, "{name},{x},{y}");
        }
        let metrics_path = dir.join("metrics.csv");
        let auc = read_csv_pairs(&metrics_path)?
            .into_iter()
            .find(|(k, _)| k == "auc")
            .ok_or_else(|| Error::Format(format!("{}: no auc row", metrics_path.display())))?;
        let auc = parse_f64(&metrics_path, &auc.1)?;
        series.push(Series { name: format!("{name} (AUC {auc:.3})"), points });
    }
    fs::write(a.out.join("roc_curves.csv"), merged)?;
    fs::write(a.out.join("roc.svg"), line_chart_svg(&series, "ROC", "false positive rate", "true positive rate", true))?;
    println!("merged {} ROC curves into {}", series.len(), a.out.display());
    Ok(())
}
