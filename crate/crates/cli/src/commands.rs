use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use simbase::data::{
    generate_synthetic, load_split, read_annotations, read_feature_file, separability_oracle, write_split,
    GroundingSample, MAGIC,
};
use simbase::model::{load_checkpoint, read_manifest, save_checkpoint, Model, ModelConfig, MANIFEST_FILE};
use simbase::tensor::Real;
use simbase::train::{evaluate, train};
use simbase::verify::{op_names, run_gradcheck_suite, SuiteOptions};

use crate::config::{RunConfig, Split};
use crate::Failure;

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn print_json(value: &impl Serialize) {
    // A closed pipe (`simbase inspect x | head`) is not an error.
    let _ = writeln!(io::stdout(), "{}", serde_json::to_string_pretty(value).expect("serializable"));
}

pub fn synth(cfg: &RunConfig) -> Result<(), Failure> {
    let train_set = generate_synthetic(&cfg.synth_spec(Split::Train))?;
    let val_set = generate_synthetic(&cfg.synth_spec(Split::Val))?;
    let root = &cfg.data.root;
    write_split(root, &cfg.data.train_split, &train_set)?;
    write_split(root, &cfg.data.val_split, &val_set)?;
    print_json(&json!({
        "root": root,
        "splits": {
            &cfg.data.train_split: train_set.len(),
            &cfg.data.val_split: val_set.len(),
        },
        "oracle": {
            &cfg.data.train_split: separability_oracle(&train_set)?,
            &cfg.data.val_split: separability_oracle(&val_set)?,
        },
    }));
    Ok(())
}

fn load(cfg: &RunConfig, split: &str, l1: usize) -> Result<Vec<GroundingSample>, Failure> {
    Ok(load_split(&cfg.data.root, split, l1)?)
}

pub fn train_cmd(cfg: &RunConfig) -> Result<(), Failure> {
    let train_set = load(cfg, &cfg.data.train_split, cfg.model.l1)?;
    let val_set = load(cfg, &cfg.data.val_split, cfg.model.l1)?;
    let mut model = Model::<f32>::new(cfg.model.clone())?;
    let started = Instant::now();
    let history = train(&mut model, &train_set, &cfg.train, Some(&val_set))?;
    for e in &history.epochs {
        let miou = e.val.as_ref().map_or(f64::NAN, |v| v.miou);
        eprintln!("epoch {:>3}  loss {:.5}  iou {:.5}  reg {:.5}  val mIoU {miou:.2}", e.epoch, e.total, e.l_iou, e.l_reg);
    }
    save_checkpoint(&model, &cfg.output.checkpoint).map_err(simbase::Error::from)?;
    write_json(&cfg.output.history, &history)?;
    print_json(&json!({
        "checkpoint": cfg.output.checkpoint,
        "history": cfg.output.history,
        "parameters": model.num_params(),
        "seconds": started.elapsed().as_secs_f64(),
        "final": history.epochs.last(),
    }));
    Ok(())
}

/// Shape-defining fields, for comparing a checkpoint against the run config.
fn shape_key(m: &ModelConfig) -> Vec<usize> {
    vec![m.d_in_video, m.d_in_text, m.d_hidden, m.n_pre_convs, m.kernel_size, m.stride, m.l1, m.ratios.len()]
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, split: Option<&str>) -> Result<(), Failure> {
    let dir = checkpoint.unwrap_or(&cfg.output.checkpoint);
    let model = load_checkpoint::<f32>(dir).map_err(simbase::Error::from)?;
    let (want, have) = (shape_key(&cfg.model), shape_key(model.config()));
    if want != have {
        return Err(Failure::Usage(format!(
            "checkpoint {} has model shape {have:?}, config expects {want:?} \
             (d_in_video, d_in_text, d_hidden, n_pre_convs, kernel_size, stride, l1, ratios)",
            dir.display()
        )));
    }
    let split = split.unwrap_or(&cfg.data.val_split);
    let samples = load(cfg, split, model.config().l1)?;
    let report = evaluate(&model, &samples, cfg.train.batch_size)?;
    write_json(&cfg.output.metrics, &report)?;
    let _ = write!(io::stdout(), "{}", report.table());
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, corrupt: Option<String>) -> Result<(), Failure> {
    if let Some(op) = &corrupt {
        if !op_names().contains(&op.as_str()) {
            return Err(Failure::Usage(format!("unknown op {op:?}")));
        }
    }
    let opts = SuiteOptions {
        seeds: cfg.gradcheck.seeds,
        corrupt,
    };
    let report = run_gradcheck_suite(&opts)?;
    for r in &report.results {
        let verdict = if r.passed { "ok" } else { "FAIL" };
        eprintln!("{:<20} {:>10.3e}  {verdict}", r.op, r.max_rel_error);
    }
    print_json(&report);
    if report.passed {
        Ok(())
    } else {
        let failing: Vec<_> = report.results.iter().filter(|r| !r.passed).map(|r| r.op).collect();
        Err(Failure::Runtime(format!(
            "gradient check above {:e} for: {}",
            report.tolerance,
            failing.join(", ")
        )))
    }
}

fn stats(values: impl Iterator<Item = f64>) -> Value {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    json!({
        "min": v.iter().copied().fold(f64::INFINITY, f64::min),
        "max": v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        "mean": mean,
        "std": var.sqrt(),
    })
}

fn checkpoint_summary<T: Real>(dir: &Path) -> Result<Value, Failure> {
    let manifest = read_manifest(dir).map_err(simbase::Error::from)?;
    let model = load_checkpoint::<T>(dir).map_err(simbase::Error::from)?;
    let tensors: Vec<Value> = model
        .params()
        .iter()
        .map(|p| {
            json!({
                "name": p.name,
                "shape": p.tensor.shape(),
                "stats": stats(p.tensor.data().iter().map(|v| v.as_f64())),
            })
        })
        .collect();
    Ok(json!({
        "kind": "checkpoint",
        "path": dir,
        "format": manifest.format,
        "version": manifest.version,
        "dtype": manifest.dtype,
        "blob_bytes": manifest.blob_bytes,
        "blob_crc32": format!("{:08x}", manifest.blob_crc32),
        "parameters": model.num_params(),
        "proposals": model.proposals().len(),
        "config": manifest.config,
        "tensors": tensors,
    }))
}

fn inspect_checkpoint(dir: &Path) -> Result<Value, Failure> {
    let manifest = read_manifest(dir).map_err(simbase::Error::from)?;
    match manifest.dtype.as_str() {
        "f32" => checkpoint_summary::<f32>(dir),
        "f64" => checkpoint_summary::<f64>(dir),
        other => Err(Failure::Runtime(format!("unknown checkpoint dtype {other:?}"))),
    }
}

pub fn inspect(path: &Path) -> Result<(), Failure> {
    let summary = if path.is_dir() {
        inspect_checkpoint(path)?
    } else if path.file_name().is_some_and(|n| n == MANIFEST_FILE) {
        inspect_checkpoint(path.parent().unwrap_or(Path::new(".")))?
    } else {
        let head = fs::read(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        if head.starts_with(&MAGIC) {
            let t = read_feature_file(path)?;
            json!({
                "kind": "tvgf",
                "path": path,
                "magic": String::from_utf8_lossy(&MAGIC),
                "version": simbase::data::VERSION,
                "dtype": "f32",
                "extents": t.shape(),
                "values": t.numel(),
                "stats": stats(t.data().iter().map(|&v| v as f64)),
            })
        } else if path.extension().is_some_and(|e| e == "json") {
            let records = read_annotations(path)?;
            let mut videos: Vec<&str> = records.iter().map(|r| r.video_id.as_str()).collect();
            videos.sort_unstable();
            videos.dedup();
            json!({
                "kind": "annotations",
                "path": path,
                "records": records.len(),
                "videos": videos.len(),
                "duration_s": stats(records.iter().map(|r| r.duration_s)),
                "moment_length_s": stats(records.iter().map(|r| r.end_s - r.start_s)),
            })
        } else {
            return Err(Failure::Runtime(format!(
                "{}: not a checkpoint, TVGF file or annotation JSON",
                path.display()
            )));
        }
    };
    print_json(&summary);
    Ok(())
}
