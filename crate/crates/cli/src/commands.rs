//! Subcommand implementations. Each returns the text to print on success.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use aerovit_core::adapter::{count_params, freeze_backbone, AdapterConfig};
use aerovit_core::checkpoint;
use aerovit_core::freq::low_freq_ratio;
use aerovit_core::geometry::{cos_alpha, d_cos_alpha_dl, optimal_distance, sweep, viewing_angle, ViewGeometry};
use aerovit_core::model::params::ParamStore;
use aerovit_core::model::{Model, ModelConfig};
use aerovit_core::objectives::head_param_specs;
use aerovit_core::plot::plot_log;
use aerovit_core::synth::{synth_dataset, ViewKind};
use aerovit_core::trainer::{run_stage, Stage, TrainState};
use aerovit_core::warp::{make_pair, DstVariant, PairConfig};
use aerovit_core::{Error, Image, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::{Cli, Command, ImageFormat, Preset, TrainArgs, Variant, View};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const MANIFEST: &str = "manifest.jsonl";

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Geometry {
            camera_height,
            target_height,
            max_distance,
            samples,
            out,
        } => geometry(camera_height, target_height, max_distance, samples, out.as_deref()),
        Command::Pairs {
            out_dir,
            input_dir,
            n,
            size,
            seed,
            variant,
            crop_fraction,
        } => pairs(&out_dir, input_dir.as_deref(), n, size, seed, variant, crop_fraction),
        Command::GenData {
            out_dir,
            n,
            size,
            seed,
            view,
            format,
        } => gen_data(&out_dir, n, size, seed, view, format),
        Command::PretrainMim(args) => train(Stage::Mim, &args),
        Command::PretrainJoint(args) => train(Stage::Joint, &args),
        Command::FinetuneAdapter(args) => train(Stage::Finetune, &args),
        Command::Params {
            config,
            preset,
            bottleneck_width,
            json,
        } => params(config.as_deref(), preset, bottleneck_width, json.as_deref()),
        Command::Freq {
            images,
            synthetic,
            size,
            seed,
            radius,
            exclude_dc,
            out,
        } => freq(&images, synthetic, size, seed, radius, exclude_dc, out.as_deref()),
        Command::Plot { log } => plot(&log),
    }
}

fn view_kind(v: View) -> ViewKind {
    match v {
        View::Vertical => ViewKind::Vertical,
        View::Oblique => ViewKind::Oblique,
        View::Mixed => ViewKind::Mixed,
    }
}

fn emit(report: &serde_json::Value, out: Option<&Path>) -> Result<String> {
    let text = serde_json::to_string_pretty(report)?;
    match out {
        Some(path) => {
            fs::write(path, format!("{text}\n"))?;
            Ok(format!("wrote {}", path.display()))
        }
        None => Ok(text),
    }
}

fn write_jsonl(path: &Path, rows: &[serde_json::Value]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

fn geometry(h_cam: f64, h_target: f64, max_distance: Option<f64>, samples: usize, out: Option<&Path>) -> Result<String> {
    let g = ViewGeometry::new(h_cam, h_target)?;
    let l = optimal_distance(&g);
    let mut report = json!({
        "camera_height": h_cam,
        "target_height": h_target,
        "optimal_distance": l,
        "max_angle_rad": viewing_angle(&g, l)?,
        "cos_alpha_at_optimum": cos_alpha(&g, l)?,
        "d_cos_alpha_dl_at_optimum": d_cos_alpha_dl(&g, l)?,
    });
    if let Some(max) = max_distance {
        report["sweep"] = serde_json::to_value(sweep(&g, max, samples)?)?;
    }
    emit(&report, out)
}

/// Every PNG/PGM/PPM file in `dir`, in name order.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "ppm"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no images found in {}", dir.display())));
    }
    Ok(files)
}

fn load_dir(dir: &Path, size: usize) -> Result<Vec<Image>> {
    list_images(dir)?
        .iter()
        .map(|p| Image::load_rgb(p)?.resize(size, size))
        .collect()
}

fn pairs(
    out_dir: &Path,
    input_dir: Option<&Path>,
    n: usize,
    size: usize,
    seed: u64,
    variant: Variant,
    crop_fraction: f64,
) -> Result<String> {
    let sources = match input_dir {
        Some(dir) => load_dir(dir, size)?,
        None => synth_dataset(n, size, ViewKind::Mixed, seed)?,
    };
    let cfg = PairConfig {
        variant: match variant {
            Variant::Keystone => DstVariant::Keystone,
            Variant::Printed => DstVariant::Printed,
        },
        crop_fraction,
        output_size: Some(size),
    };
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(sources.len());
    for (i, img) in sources.iter().enumerate() {
        let pair = make_pair(img, &mut rng, &cfg)?;
        let a = format!("pair_{i:04}_a.png");
        let b = format!("pair_{i:04}_b.png");
        pair.original.save(out_dir.join(&a))?;
        pair.transformed.save(out_dir.join(&b))?;
        rows.push(json!({
            "index": i,
            "alpha": pair.alpha,
            "homography": pair.homography.coefficients(),
            "original": a,
            "transformed": b,
        }));
    }
    write_jsonl(&out_dir.join(MANIFEST), &rows)?;
    Ok(format!("wrote {} pairs to {}", rows.len(), out_dir.display()))
}

fn gen_data(out_dir: &Path, n: usize, size: usize, seed: u64, view: View, format: ImageFormat) -> Result<String> {
    let images = synth_dataset(n, size, view_kind(view), seed)?;
    fs::create_dir_all(out_dir)?;
    let ext = match format {
        ImageFormat::Png => "png",
        ImageFormat::Pgm => "pgm",
        ImageFormat::Ppm => "ppm",
    };
    let mut rows = Vec::with_capacity(n);
    for (i, img) in images.iter().enumerate() {
        let file = format!("img_{i:04}.{ext}");
        match format {
            ImageFormat::Pgm => img.to_gray().save(out_dir.join(&file))?,
            _ => img.save(out_dir.join(&file))?,
        }
        rows.push(json!({ "index": i, "file": file, "size": size, "seed": seed }));
    }
    write_jsonl(&out_dir.join(MANIFEST), &rows)?;
    Ok(format!("wrote {n} images to {}", out_dir.display()))
}

/// Load, override and validate a run configuration, then echo it into the
/// output directory.
pub fn resolve_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &args.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(init) = &args.init {
        cfg.init_checkpoint = Some(init.clone());
    }
    if let Some(steps) = args.steps {
        cfg.train.schedule.total_steps = steps;
        cfg.train.schedule.warmup_steps = cfg.train.schedule.warmup_steps.min(steps.saturating_sub(1));
    }
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    Ok(cfg)
}

fn training_data(cfg: &RunConfig) -> Result<Vec<Image>> {
    match &cfg.data.dir {
        Some(dir) => load_dir(dir, cfg.model.image_size),
        None => synth_dataset(cfg.data.n, cfg.model.image_size, cfg.data.view, cfg.seed),
    }
}

/// Check that `store` holds every backbone and head parameter of `model` with
/// the expected shape.
fn check_compatible(store: &ParamStore, cfg: &RunConfig) -> Result<()> {
    let specs = cfg
        .model
        .backbone_param_specs()?
        .into_iter()
        .chain(head_param_specs(&cfg.model, &cfg.train.contrast)?);
    for spec in specs {
        let found = store.value(&spec.name)?;
        if found.shape() != spec.shape.as_slice() {
            return Err(Error::Config(format!(
                "checkpoint parameter {} has shape {:?}, config expects {:?}",
                spec.name,
                found.shape(),
                spec.shape
            )));
        }
    }
    Ok(())
}

fn fresh_state(model: &Model, cfg: &RunConfig) -> Result<TrainState> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = model.init_params(&mut rng)?;
    store.extend_from_specs(&head_param_specs(&cfg.model, &cfg.train.contrast)?, &mut rng);
    Ok(TrainState::new(store, cfg.seed))
}

fn load_state(path: &Path, cfg: &RunConfig) -> Result<TrainState> {
    let (mut state, _) = checkpoint::load(path)?;
    check_compatible(&state.params, cfg)?;
    state.seed = cfg.seed;
    Ok(state)
}

fn train(stage: Stage, args: &TrainArgs) -> Result<String> {
    let cfg = resolve_config(args)?;
    let mut model = Model::new(cfg.model.clone())?;
    let mut state = match (&cfg.init_checkpoint, stage) {
        (Some(path), _) => load_state(path, &cfg)?,
        (None, Stage::Mim) => fresh_state(&model, &cfg)?,
        (None, Stage::Joint) if cfg.train.allow_without_mim => fresh_state(&model, &cfg)?,
        (None, _) => {
            return Err(Error::Contract(format!(
                "the {stage} stage needs init_checkpoint (a checkpoint from the previous stage)"
            )))
        }
    };
    if stage == Stage::Finetune {
        attach_and_freeze(&mut model, &mut state, &cfg.adapter, cfg.seed)?;
    }
    let data = training_data(&cfg)?;

    let log_path = cfg.out_dir.join(METRICS_LOG);
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    let metrics = run_stage(stage, &cfg.train, &model, &data, &mut state, |m| {
        writeln!(log, "{}", serde_json::to_string(m)?)?;
        Ok(())
    })?;
    log.flush()?;

    let meta = BTreeMap::from([
        ("model".to_string(), serde_json::to_string(&cfg.model)?),
        ("adapter".to_string(), serde_json::to_string(&cfg.adapter)?),
        ("train".to_string(), serde_json::to_string(&cfg.train)?),
    ]);
    let ckpt = cfg.out_dir.join(CHECKPOINT);
    checkpoint::save(&ckpt, &state, &meta)?;

    let mut summary = format!(
        "{stage}: {} steps, {} images -> {}",
        metrics.len(),
        data.len(),
        cfg.out_dir.display()
    );
    if let (Some(first), Some(last)) = (metrics.first(), metrics.last()) {
        summary.push_str(&format!("\nloss {:.6} -> {:.6}", first.loss, last.loss));
        if let Some(t) = last.top1 {
            summary.push_str(&format!(", top-1 {t:.3}"));
        }
    }
    if stage == Stage::Finetune {
        let report = json!({
            "total": state.params.numel(),
            "trainable": state.params.trainable_numel(),
            "ratio": state.params.trainable_numel() as f64 / state.params.numel() as f64,
        });
        fs::write(cfg.out_dir.join("params.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(summary)
}

/// Attach adapters unless the checkpoint already carries them, then freeze
/// everything else.
fn attach_and_freeze(model: &mut Model, state: &mut TrainState, adapters: &AdapterConfig, seed: u64) -> Result<()> {
    if !adapters.any_enabled() {
        return Err(Error::Contract("fine-tuning needs at least one adapter placement".into()));
    }
    let specs = adapters.param_specs(&model.config)?;
    let present = specs.iter().filter(|s| state.params.contains(&s.name)).count();
    if present == 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada9_7e55);
        model.attach_adapters(&mut state.params, *adapters, &mut rng)?;
    } else if present == specs.len() {
        *model = model.clone().with_adapters(*adapters)?;
    } else {
        return Err(Error::Config(format!(
            "checkpoint holds {present} of {} adapter parameters",
            specs.len()
        )));
    }
    freeze_backbone(&mut state.params)
}

fn params(config: Option<&Path>, preset: Preset, width: Option<usize>, json_out: Option<&Path>) -> Result<String> {
    let (model, mut adapters, label) = match config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            (cfg.model, cfg.adapter, path.display().to_string())
        }
        None => match preset {
            Preset::Toy => (ModelConfig::toy(), AdapterConfig::default(), "toy".to_string()),
            Preset::Base => (ModelConfig::base_dry(), AdapterConfig::default(), "base".to_string()),
        },
    };
    if width.is_some() {
        adapters.bottleneck_width = width;
    }
    let report = count_params(&model, &adapters)?;
    let bottleneck = match adapters.bottleneck_width {
        Some(w) => format!("fixed width {w}"),
        None => format!("channels / {}", adapters.bottleneck_factor),
    };
    let value = json!({
        "model": label,
        "embed_dim": model.embed_dim,
        "depths": model.depths,
        "bottleneck": bottleneck,
        "total": report.total,
        "frozen": report.frozen,
        "trainable": report.trainable,
        "ratio": report.ratio,
    });
    if let Some(path) = json_out {
        fs::write(path, serde_json::to_string_pretty(&value)? + "\n")?;
    }
    let mut table = String::new();
    table.push_str(&format!("model       {label} (embed {}, depths {:?})\n", model.embed_dim, model.depths));
    table.push_str(&format!("bottleneck  {bottleneck}\n"));
    table.push_str(&format!("frozen      {:>12}\n", report.frozen));
    table.push_str(&format!("trainable   {:>12}\n", report.trainable));
    table.push_str(&format!("total       {:>12}\n", report.total));
    table.push_str(&format!("ratio       {:>11.4}%\n", 100.0 * report.ratio));
    table.push_str(&serde_json::to_string(&value)?);
    Ok(table)
}

#[allow(clippy::too_many_arguments)]
fn freq(
    images: &[PathBuf],
    synthetic: Option<usize>,
    size: usize,
    seed: u64,
    radius: f64,
    exclude_dc: bool,
    out: Option<&Path>,
) -> Result<String> {
    let report = match synthetic {
        Some(n) => {
            let ratios = |view| -> Result<Vec<f64>> {
                synth_dataset(n, size, view, seed)?
                    .iter()
                    .map(|img| low_freq_ratio(img, radius, exclude_dc))
                    .collect()
            };
            let v = ratios(ViewKind::Vertical)?;
            let o = ratios(ViewKind::Oblique)?;
            let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
            json!({
                "radius_fraction": radius,
                "exclude_dc": exclude_dc,
                "vertical_mean": mean(&v),
                "oblique_mean": mean(&o),
                "vertical": v,
                "oblique": o,
            })
        }
        None => {
            if images.is_empty() {
                return Err(Error::Config("give --image paths or --synthetic N".into()));
            }
            let rows = images
                .iter()
                .map(|p| {
                    let r = low_freq_ratio(&Image::load_rgb(p)?, radius, exclude_dc)?;
                    Ok(json!({ "image": p.display().to_string(), "ratio": r }))
                })
                .collect::<Result<Vec<_>>>()?;
            json!({ "radius_fraction": radius, "exclude_dc": exclude_dc, "images": rows })
        }
    };
    emit(&report, out)
}

fn plot(log: &Path) -> Result<String> {
    let written = plot_log(log)?;
    if written.is_empty() {
        eprintln!("warning: {} has no entries; nothing plotted", log.display());
        return Ok(String::new());
    }
    Ok(written
        .iter()
        .map(|p| format!("wrote {}", p.display()))
        .collect::<Vec<_>>()
        .join("\n"))
}
