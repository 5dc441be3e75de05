use std::path::Path;

use cdlite::accounting::{count_params, estimate_flops};
use cdlite::data::{self, SyntheticSpec};
use cdlite::fsutil::write_atomic;
use cdlite::imageio::{load_image, save_image, Image};
use cdlite::metrics::{confusion, diff_map, render_diff, Confusion, MetricReport};
use cdlite::model::{self, Model};
use cdlite::regions::{dataset_summary, NamedMask};
use cdlite::train::{ablation_run, train, AblationReport, Arm, TrainConfig};
use cdlite::weights::load_weights_for;
use cdlite::{save_weights, ModelConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::args::*;
use crate::error::{CliError, CliResult, InputContext, OutputContext};

/// Prints the fully resolved invocation before anything runs.
fn announce(command: &str, resolved: Value) {
    let mut v = json!({ "command": command });
    if let (Value::Object(dst), Value::Object(src)) = (&mut v, resolved) {
        dst.extend(src);
    }
    println!("{}", serde_json::to_string_pretty(&v).expect("JSON values serialize"));
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).output("serializing report")?;
    write_atomic(path, format!("{text}\n").as_bytes()).output(&path.display().to_string())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let what = path.display().to_string();
    let text = std::fs::read_to_string(path).input(&what)?;
    serde_json::from_str(&text).input(&what)
}

/// A JSON file path, or a preset name when no such file exists.
pub fn resolve_config(arg: &str) -> CliResult<ModelConfig> {
    let path = Path::new(arg);
    let cfg = if path.is_file() {
        let text = std::fs::read_to_string(path).input(arg)?;
        ModelConfig::from_json(&text).map_err(|e| CliError::validation(format!("{arg}: {e}")))?
    } else {
        ModelConfig::preset(arg).map_err(|_| {
            CliError::validation(format!(
                "config `{arg}` is neither a readable file nor a preset (toy, sysu, cdd, whu, levir_plus)"
            ))
        })?
    };
    cfg.validate()?;
    Ok(cfg)
}

fn config_value(cfg: &ModelConfig) -> Value {
    serde_json::to_value(cfg).expect("configs serialize")
}

fn load_pair_image(path: &Path) -> CliResult<Image> {
    Ok(load_image(path)?)
}

fn load_mask(path: &Path) -> CliResult<(usize, usize, Vec<u8>)> {
    let img = load_image(path)?;
    let mask = img
        .to_binary_mask()
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    Ok((img.width, img.height, mask))
}

fn mask_image(width: usize, height: usize, mask: &[u8]) -> Image {
    Image {
        width,
        height,
        channels: 1,
        data: mask.iter().map(|&m| m * 255).collect(),
    }
}

pub fn infer(a: &InferArgs) -> CliResult<()> {
    let mut cfg = resolve_config(&a.config)?;
    if let Some(t) = a.threshold {
        cfg.decoder.threshold = t;
        cfg.validate()?;
    }
    announce(
        "infer",
        json!({
            "config": config_value(&cfg),
            "weights": a.weights, "t1": a.t1, "t2": a.t2, "out": a.out,
            "prob_out": a.prob_out, "gt": a.gt, "diff_out": a.diff_out,
        }),
    );
    let t1 = load_pair_image(&a.t1)?.to_rgb();
    let t2 = load_pair_image(&a.t2)?.to_rgb();
    if (t1.width, t1.height) != (t2.width, t2.height) {
        return Err(CliError::validation(format!(
            "dimension mismatch: t1 is {}×{}, t2 is {}×{}",
            t1.width, t1.height, t2.width, t2.height
        )));
    }
    let (w, h) = (t1.width, t1.height);
    cfg.validate_input(h, w)?;
    let gt = a.gt.as_deref().map(load_mask).transpose()?;
    if let Some((gw, gh, _)) = &gt {
        if (*gw, *gh) != (w, h) {
            return Err(CliError::validation(format!("ground truth is {gw}×{gh}, images are {w}×{h}")));
        }
    }

    let weights = load_weights_for(&a.weights, &model::layout(&cfg))
        .map_err(|e| CliError::validation(format!("{}: {e}", a.weights.display())))?;
    let m = Model::new(cfg, weights)?;
    let out = m.forward(&t1.to_tensor(), &t2.to_tensor())?;
    let mask = out.mask(0);
    save_image(&mask_image(w, h, &mask), &a.out)?;
    if let Some(p) = &a.prob_out {
        save_image(&Image::gray(w, h, out.probability_bytes(0))?, p)?;
    }
    let changed = mask.iter().filter(|&&v| v == 1).count();
    println!("changed pixels: {changed} of {}", w * h);
    if let Some((_, _, g)) = gt {
        let report = MetricReport::from(confusion(&mask, &g)?);
        println!("f1 {:.4}  iou {:.4}", report.metrics.f1, report.metrics.iou);
        if let Some(p) = &a.diff_out {
            save_image(&Image::rgb(w, h, render_diff(&diff_map(&mask, &g)?))?, p)?;
        }
    }
    Ok(())
}

fn is_image(p: &Path) -> bool {
    let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    matches!(ext.as_deref(), Some("pgm" | "ppm" | "pnm" | "png"))
}

/// Image file names in `dir`, sorted.
fn image_names(dir: &Path) -> CliResult<Vec<String>> {
    let entries = std::fs::read_dir(dir).input(&dir.display().to_string())?;
    let mut names = Vec::new();
    for e in entries {
        let e = e.input(&dir.display().to_string())?;
        let name = e.file_name().to_string_lossy().into_owned();
        if !name.starts_with('.') && e.path().is_file() && is_image(&e.path()) {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

#[derive(Serialize)]
struct FileScore {
    name: String,
    #[serde(flatten)]
    score: MetricReport,
}

#[derive(Serialize)]
struct EvalReport {
    files: Vec<FileScore>,
    /// Micro-averaged over all pixels of all files.
    total: MetricReport,
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    announce("eval", json!({ "pred": a.pred, "gt": a.gt, "report": a.report, "diff_dir": a.diff_dir }));
    let pred = image_names(&a.pred)?;
    let gt = image_names(&a.gt)?;
    if pred.is_empty() {
        return Err(CliError::validation(format!("no mask images in {}", a.pred.display())));
    }
    if let Some(n) = pred.iter().find(|n| !gt.contains(n)) {
        return Err(CliError::validation(format!("{} has no counterpart in {}", n, a.gt.display())));
    }
    if let Some(n) = gt.iter().find(|n| !pred.contains(n)) {
        return Err(CliError::validation(format!("{} has no counterpart in {}", n, a.pred.display())));
    }
    if let Some(d) = &a.diff_dir {
        std::fs::create_dir_all(d).output(&d.display().to_string())?;
    }
    let files = pred
        .par_iter()
        .map(|name| -> CliResult<FileScore> {
            let (pw, ph, p) = load_mask(&a.pred.join(name))?;
            let (gw, gh, g) = load_mask(&a.gt.join(name))?;
            if (pw, ph) != (gw, gh) {
                return Err(CliError::validation(format!("{name}: prediction {pw}×{ph}, ground truth {gw}×{gh}")));
            }
            if let Some(d) = &a.diff_dir {
                let out = d.join(Path::new(name).with_extension("ppm"));
                save_image(&Image::rgb(pw, ph, render_diff(&diff_map(&p, &g)?))?, &out)?;
            }
            Ok(FileScore {
                name: name.clone(),
                score: MetricReport::from(confusion(&p, &g)?),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut total = Confusion::default();
    for f in &files {
        total += f.score.confusion;
    }
    let report = EvalReport {
        files,
        total: MetricReport::from(total),
    };
    write_json(&a.report, &report)?;
    let m = report.total.metrics;
    println!(
        "{} files  precision {:.4}  recall {:.4}  oa {:.4}  f1 {:.4}  iou {:.4}",
        report.files.len(),
        m.precision,
        m.recall,
        m.oa,
        m.f1,
        m.iou
    );
    Ok(())
}

pub fn analyze(a: &AnalyzeArgs) -> CliResult<()> {
    announce("analyze", json!({ "masks": a.masks, "threshold": a.threshold, "report": a.report }));
    if a.threshold == 0 {
        return Err(CliError::validation("threshold must be at least 1"));
    }
    let names = image_names(&a.masks)?;
    if names.is_empty() {
        return Err(CliError::validation(format!("no mask images in {}", a.masks.display())));
    }
    let masks = names
        .par_iter()
        .map(|name| {
            let (width, height, mask) = load_mask(&a.masks.join(name))?;
            Ok(NamedMask {
                name: name.clone(),
                width,
                height,
                mask,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let summary = dataset_summary(&masks, a.threshold)?;
    write_json(&a.report, &summary)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "few (< {}): {} samples, mean area ratio {}, mean complexity {}",
        a.threshold,
        summary.few.samples,
        fmt(summary.few.mean_area_ratio),
        fmt(summary.few.mean_complexity)
    );
    println!(
        "many (>= {}): {} samples, mean complexity {}, mean variance {}",
        a.threshold,
        summary.many.samples,
        fmt(summary.many.mean_complexity),
        fmt(summary.many.mean_complexity_variance)
    );
    Ok(())
}

#[derive(Serialize)]
struct ParamsReport {
    config: ModelConfig,
    input: usize,
    params: cdlite::accounting::ParamReport,
    flops: cdlite::FlopTally,
    total_flops: u64,
}

pub fn params(a: &ParamsArgs) -> CliResult<()> {
    let cfg = resolve_config(&a.config)?;
    announce("params", json!({ "config": config_value(&cfg), "input": a.input, "report": a.report }));
    let flops = estimate_flops(&cfg, 1, a.input, a.input)?;
    let report = ParamsReport {
        params: count_params(&cfg),
        flops,
        total_flops: flops.total(),
        input: a.input,
        config: cfg,
    };
    let width = report.params.modules.keys().map(String::len).max().unwrap_or(0).max(6);
    println!("{:<width$}  {:>10}", "module", "params");
    for (m, n) in &report.params.modules {
        println!("{m:<width$}  {n:>10}");
    }
    println!("{:<width$}  {:>10}", "total", report.params.total);
    println!(
        "flops at {0}×{0}: conv {1}, attention {2}, elementwise {3}, total {4}",
        a.input, flops.conv, flops.attention, flops.elementwise, report.total_flops
    );
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    Ok(())
}

pub fn train_toy(a: &TrainToyArgs) -> CliResult<()> {
    let cfg = resolve_config(&a.config)?;
    let spec: SyntheticSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    spec.validate()?;
    let tc = TrainConfig {
        batch_size: a.batch_size,
        learning_rate: a.lr,
        epochs: a.epochs,
        val_samples: a.val_samples,
        seed: a.seed,
        target_f1: a.target_f1,
        ..TrainConfig::default()
    };
    tc.validate()?;
    cfg.validate_input(spec.image_size.0, spec.image_size.1)?;
    announce(
        "train-toy",
        json!({ "config": config_value(&cfg), "data": spec, "train": tc, "out_dir": a.out_dir }),
    );

    let dataset = data::generate(&spec)?;
    std::fs::create_dir_all(&a.out_dir).output(&a.out_dir.display().to_string())?;
    if a.save_data {
        dataset.save(&a.out_dir.join("data"))?;
    }
    let out = train(&cfg, &tc, &dataset, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  val f1 {:.4}  ({:.1}s)",
            r.epoch, r.train_loss, r.val_f1, r.seconds
        )
    })?;
    let dir = &a.out_dir;
    save_weights(&out.weights, &dir.join("weights.fkcd"))?;
    write_atomic(&dir.join("config.json"), cfg.to_json().as_bytes()).output("config.json")?;
    write_json(&dir.join("train.json"), &json!({ "data": spec, "train": tc, "dataset_sha256": dataset.content_hash() }))?;
    write_json(&dir.join("trace.json"), &out.trace)?;
    println!(
        "best val f1 {:.4}, final {:.4} after {} epochs; weights in {}",
        out.best_val_f1(),
        out.final_val_f1(),
        out.trace.len(),
        dir.join("weights.fkcd").display()
    );
    Ok(())
}

/// Everything an ablation needs; missing parts take their defaults.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub data: Option<SyntheticSpec>,
    #[serde(default)]
    pub arms: Option<Vec<Arm>>,
}

pub fn ablate(a: &AblateArgs) -> CliResult<()> {
    let plan: AblationPlan = read_json(&a.spec)?;
    let base = plan.model.unwrap_or_else(ModelConfig::toy);
    let mut tc = plan.train.unwrap_or(TrainConfig {
        batch_size: 8,
        ..TrainConfig::default()
    });
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    let spec = plan.data.unwrap_or_default();
    let arms = plan.arms.unwrap_or_else(|| Arm::TABLE.to_vec());
    if arms.is_empty() {
        return Err(CliError::validation("ablation plan lists no arms"));
    }
    base.validate()?;
    tc.validate()?;
    spec.validate()?;
    for arm in &arms {
        arm.apply(&base).validate_input(spec.image_size.0, spec.image_size.1)?;
    }
    announce(
        "ablate",
        json!({ "model": config_value(&base), "train": tc, "data": spec, "arms": arms, "report": a.report }),
    );
    let report: AblationReport = ablation_run(&base, &tc, &spec, &arms, |arm, r| {
        eprintln!("{arm:?} epoch {:>3}  loss {:.4}  val f1 {:.4}", r.epoch, r.train_loss, r.val_f1)
    })?;
    write_json(&a.report, &report)?;
    println!("{:<12} {:>10} {:>8} {:>8}", "arm", "params", "f1", "best");
    for r in &report.rows {
        println!(
            "{:<12} {:>10} {:>8.4} {:>8.4}",
            format!("{:?}", r.arm),
            r.params,
            r.val_f1,
            r.best_val_f1
        );
    }
    Ok(())
}
