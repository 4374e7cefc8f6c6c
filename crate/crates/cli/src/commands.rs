use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use travmap_core::config::RunConfig;
use travmap_core::eval::{evaluate_dataset, render_text, CorruptionSpec};
use travmap_core::model::{self, infer_detailed, TokenBank};
use travmap_core::raster::{load_ppm, save_dmap, save_pgm};
use travmap_core::scenes::{generate_scenes, load_dataset, save_dataset};

use crate::exit::ConfigError;

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn load_optional_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), load_config)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `model.ckpt` -> `model.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

pub fn gen_data(config: &Path, out: &Path, count: usize) -> Result<()> {
    let config = load_config(config)?;
    if count == 0 {
        return Err(ConfigError("--count must be at least 1".into()).into());
    }
    let scenes = generate_scenes(&config.data.dataset_params(count))?;
    save_dataset(&scenes, out)?;
    write_text(&out.join("config.json"), &config.to_json())?;
    println!(
        "wrote {count} {} scenes to {}",
        config.data.preset,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct LogRow {
    epoch: usize,
    l_con: f64,
    l_neu: f64,
    l_agg: f64,
    l_geo: f64,
    l_distill: f64,
    total: f64,
}

pub fn train(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let config = load_config(config)?;
    let scenes =
        load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let samples = config
        .training_samples(&scenes)
        .context("building training samples")?;
    let outcome = model::train(&samples, &config.train, &config.objective())?;

    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    outcome.bank.save(out)?;
    write_text(&sibling(out, "config.json"), &config.to_json())?;

    let log_path = sibling(out, "log.csv");
    let mut writer = csv::Writer::from_path(&log_path)
        .with_context(|| format!("writing {}", log_path.display()))?;
    for entry in &outcome.log {
        let l = entry.losses;
        writer.serialize(LogRow {
            epoch: entry.epoch,
            l_con: l.per_token[0],
            l_neu: l.per_token[1],
            l_agg: l.per_token[2],
            l_geo: l.geo,
            l_distill: l.distill,
            total: l.total,
        })?;
        eprintln!(
            "epoch {:>3}  total {:.5}  sem {:.5}  geo {:.5}  distill {:.5}",
            entry.epoch, l.total, l.sem, l.geo, l.distill
        );
    }
    writer
        .flush()
        .with_context(|| format!("writing {}", log_path.display()))?;
    println!("wrote checkpoint {}", out.display());
    Ok(())
}

pub struct InferArgs {
    pub ckpt: PathBuf,
    pub image: PathBuf,
    pub config: Option<PathBuf>,
    pub depth_out: Option<PathBuf>,
    pub score_out: Option<PathBuf>,
    pub all_maps: Option<PathBuf>,
}

pub fn infer(args: &InferArgs) -> Result<()> {
    let config = load_optional_config(args.config.as_deref())?;
    let bank = TokenBank::load(&args.ckpt)?;
    let image = load_ppm(&args.image)?;
    let inference = infer_detailed(&bank, &image, &config.uncertainty)?;
    let out = &inference.output;

    if let Some(path) = &args.depth_out {
        save_dmap(&inference.depth, path)?;
    }
    if let Some(path) = &args.score_out {
        save_dmap(out.score.as_map(), path)?;
        save_pgm(&out.score, sibling(path, "pgm"))?;
    }
    if let Some(dir) = &args.all_maps {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let maps = [
            ("P", out.mean_p.as_map()),
            ("C", out.confidence.as_map()),
            ("p_var", &out.variance),
            ("R_slope", out.slope_risk.as_map()),
            ("R_elev", out.elevation_risk.as_map()),
            ("T", out.score.as_map()),
        ];
        for (name, map) in maps {
            save_dmap(map, dir.join(format!("{name}.dmap")))?;
        }
        save_pgm(&out.score, dir.join("T.pgm"))?;
    }
    println!(
        "{}x{}  mean T {:.4}  mean P {:.4}  mean C {:.4}",
        image.height(),
        image.width(),
        out.score.mean(),
        out.mean_p.mean(),
        out.confidence.mean()
    );
    Ok(())
}

pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub config: Option<PathBuf>,
    pub tau: Option<f64>,
    pub corrupt: Option<String>,
    pub report: PathBuf,
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let mut config = load_optional_config(args.config.as_deref())?;
    if let Some(tau) = args.tau {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(ConfigError(format!("--tau must lie in (0, 1), got {tau}")).into());
        }
        config.eval.tau = tau;
    }
    let mut options = config.eval_options();
    if let Some(spec) = &args.corrupt {
        let parsed: CorruptionSpec = spec
            .parse()
            .map_err(|e| ConfigError(format!("--corrupt: {e}")))?;
        options.corruption = Some(parsed);
    }
    let bank = TokenBank::load(&args.ckpt)?;
    let scenes = load_dataset(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let report = evaluate_dataset(&bank, &scenes, &options)?;

    let json = serde_json::to_string_pretty(&report)? + "\n";
    write_text(&args.report, &json)?;
    let text = render_text(&report);
    write_text(&sibling(&args.report, "txt"), &text)?;
    write_text(&sibling(&args.report, "config.json"), &config.to_json())?;
    print!("{text}");
    Ok(())
}
