use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use solarnet_core::config::{Preset, RunConfig};
use solarnet_core::data::{load_dataset, read_pnm, split, synth_generate, tile_image, SynthConfig};
use solarnet_core::eval::{
    append_results_csv, argmax_mask, evaluate_model, predict_raster, write_mask, write_overlay,
    TilerConfig, RESULTS_HEADER,
};
use solarnet_core::models::{load_checkpoint, Model};
use solarnet_core::tensor::OpKind;
use solarnet_core::training::{self, RunDirObserver};
use solarnet_core::verify;
use solarnet_core::Error;

use crate::{EvalArgs, GradcheckArgs, PredictArgs, SynthArgs, TrainArgs};

/// An error that carries its own exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Failure {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Failure {
        code: 2,
        msg: msg.into(),
    }
    .into()
}

fn core_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numerical { .. }
        | Error::DegenerateCluster(_)
        | Error::DegenerateBase(_)
        | Error::DegenerateBatch(_) => 4,
        _ => 3,
    }
}

/// 2 usage/config, 3 data/format, 4 numerical.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.code;
        }
        if let Some(c) = cause.downcast_ref::<Error>() {
            return core_code(c);
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(usage(format!(
            "{what} directory {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        difficulty: a.difficulty,
        farm_probability: a.farm_probability,
        ..SynthConfig::new(a.size, a.seed)
    };
    let records = synth_generate(&a.out, a.n, &cfg)?;
    let positives = records.iter().filter(|r| r.label == 1).count();
    println!(
        "wrote {} tiles ({positives} with farms) to {}",
        records.len(),
        a.out.display()
    );
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> Result<RunConfig> {
    let preset = a.preset.as_deref().map(Preset::parse).transpose()?;
    let mut cfg = match &a.config {
        Some(p) => {
            RunConfig::load(p, preset).with_context(|| format!("reading {}", p.display()))?
        }
        None => RunConfig::from_sources(preset, None)?,
    };
    if let Some(m) = &a.model {
        cfg.set("model", m)?;
    }
    if let Some(n) = a.iterations {
        cfg.train.max_iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.out = Some(o.clone());
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| usage("no data directory (pass --data or set `data` in the config)"))?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| usage("no output directory (pass --out or set `out` in the config)"))?;
    require_dir(&data, "data")?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("resolved_config.txt"), cfg.to_text())?;

    let manifest = load_dataset(&data)?;
    if manifest.is_empty() {
        return Err(
            Error::Manifest(format!("no image/mask pairs under {}", data.display())).into(),
        );
    }
    let (train_m, test_m) = split(&manifest, cfg.test_fraction, cfg.train.seed)?;
    let mut split_csv = String::from("stem,split\n");
    for (m, name) in [(&train_m, "train"), (&test_m, "test")] {
        for e in &m.entries {
            split_csv.push_str(&format!("{},{name}\n", e.stem));
        }
    }
    fs::write(out.join("split.csv"), split_csv)?;

    let train_images = train_m.load_samples()?;
    let test_images = test_m.load_samples()?;
    let mut tiles = Vec::new();
    for s in &train_images {
        tiles.extend(tile_image(
            &s.image,
            Some(&s.mask),
            cfg.tile,
            cfg.tile,
            &s.source_id,
        )?);
    }
    let mut model = Model::new(cfg.model_config())?;
    log::info!(
        "{} model, {} parameters, {} training tiles, {} test images, {} iterations",
        model.kind(),
        model.store().num_scalars(),
        tiles.len(),
        test_images.len(),
        cfg.train.max_iterations
    );
    let tiler = TilerConfig::new(cfg.tile, (cfg.tile / 2).max(1))?;
    let mut observer = RunDirObserver::new(
        &out,
        vec![("train".into(), train_images), ("test".into(), test_images)],
        tiler,
    )?;
    let start = Instant::now();
    let (log, _) = training::train(&mut model, &tiles, &cfg.train, None, &mut observer)?;
    let last = log.last().expect("at least one iteration");
    let n = last.iter;
    println!(
        "trained {} for {n} iterations in {:.1} s; final loss {:.4}",
        model.kind(),
        start.elapsed().as_secs_f64(),
        last.loss_total
    );
    for split in ["train", "test"] {
        if let Some(m) = observer
            .history
            .iter()
            .rev()
            .find(|(i, s, _)| *i == n && s == split)
        {
            println!("{split} mIoU {:.4}", m.2);
        }
    }
    println!("checkpoint {}", observer.final_checkpoint().display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (mut model, _) = load_checkpoint(&a.checkpoint)?;
    require_dir(&a.data, "data")?;
    let manifest = load_dataset(&a.data)?;
    let chosen = match a.split.as_str() {
        "all" => manifest,
        "train" | "test" => {
            let (tr, te) = split(&manifest, a.test_fraction, a.seed)?;
            if a.split == "train" {
                tr
            } else {
                te
            }
        }
        other => return Err(usage(format!("unknown split '{other}' (all|train|test)"))),
    };
    let samples = chosen.load_samples()?;
    let tiler = TilerConfig::new(a.tile, a.stride.unwrap_or((a.tile / 2).max(1)))?;
    let dir_name = a.data.file_name().map_or_else(
        || a.data.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    );
    let dataset = if a.split == "all" {
        dir_name
    } else {
        format!("{dir_name}/{}", a.split)
    };
    let name = a.name.clone().unwrap_or_else(|| model.kind().to_string());
    let row = evaluate_model(&mut model, &samples, tiler, &name, &dataset)?;
    println!("{RESULTS_HEADER}");
    println!("{}", row.csv_line());
    append_results_csv(&a.results, &row)?;
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let (mut model, _) = load_checkpoint(&a.checkpoint)?;
    let image = read_pnm(&a.image)?;
    if image.channels != 3 {
        return Err(
            Error::Format(format!("{} is not an RGB (P6) image", a.image.display())).into(),
        );
    }
    let tiler = TilerConfig::new(a.tile, a.stride)?;
    let seg = predict_raster(&mut model, &image, tiler)?;
    let stem = a
        .image
        .file_stem()
        .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mask_path = a.out.join(format!("{stem}_mask.pgm"));
    let overlay_path = a.out.join(format!("{stem}_overlay.ppm"));
    write_mask(&seg, &mask_path)?;
    write_overlay(&image, &seg, &overlay_path)?;
    let mask = argmax_mask(&seg)?;
    let fraction = mask.iter().filter(|&&m| m == 1).count() as f64 / mask.len() as f64;
    println!("mask {}", mask_path.display());
    println!("overlay {}", overlay_path.display());
    println!("positive fraction {fraction:.6}");
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.preset != "tiny" {
        return Err(usage(format!(
            "gradcheck supports only --preset tiny, got '{}'",
            a.preset
        )));
    }
    let fault = a
        .inject_fault
        .as_deref()
        .map(|name| OpKind::from_name(name).ok_or_else(|| usage(format!("unknown op '{name}'"))))
        .transpose()?;
    let report = verify::run_suite(fault)?;
    print!("{}", report.render());
    if !report.passed() {
        let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        return Err(Failure {
            code: 4,
            msg: format!("gradient checks failed: {}", names.join(", ")),
        }
        .into());
    }
    Ok(())
}
