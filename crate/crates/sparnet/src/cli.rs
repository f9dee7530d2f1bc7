//! Command implementations behind the `sparnet` binary.
//!
//! Each command is an ordinary function so tests can drive it without
//! spawning a process, and each artifact-producing run writes a
//! [`RunManifest`] recording the resolved configuration, the seed, and
//! every output path. Re-running a command with the inputs and seed from
//! its manifest reproduces the artifacts byte-identically: nothing here
//! embeds timestamps or machine state.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{degrade, sample_params, write_manifest, ManifestRecord, SampleSeed};
use crate::imaging::{read_image, write_image};
use crate::losses::{ExtractorConfig, PerceptualExtractor};
use crate::metrics::{error_maps, evaluate_corpus, image_names, write_report};
use crate::model::{load_generator, Variant};
use crate::trainkit::{
    infer, infer_with_attention, load_experiment, read_log, train_sparnet, train_sparnethd,
    Dataset, ExperimentConfig,
};
use crate::viz::{render_attention, render_heatmap, render_psnr_curve};
use crate::{Error, Result};

/// Version stamp written into run manifests.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Bumped when the manifest layout changes incompatibly.
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Record of one command invocation: what ran, with which resolved
/// settings and seed, and what it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub code_version: String,
    pub format_version: u32,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            code_version: CODE_VERSION.to_string(),
            format_version: MANIFEST_FORMAT_VERSION,
            outputs: Vec::new(),
        }
    }
}

/// Write a run manifest as pretty JSON.
pub fn write_run_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Config(format!("manifest encode: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read a run manifest written by [`write_run_manifest`].
pub fn read_run_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest decode: {e}")))
}

fn stem(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(s, _)| s)
}

/// Synthesize `count` degraded/clean training pairs from the HR images in
/// `hr_dir`, cycling through them in filename order. An unset seed is
/// drawn from OS entropy and recorded in the manifest so the run stays
/// reproducible after the fact.
pub fn cmd_synth(
    hr_dir: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    count: usize,
) -> Result<RunManifest> {
    let seed = seed.unwrap_or_else(|| rand::rng().random());
    if count == 0 {
        return Err(Error::Contract("count must be positive".into()));
    }
    let names = image_names(hr_dir)?;
    if names.is_empty() {
        return Err(Error::Contract(format!("no images found in {}", hr_dir.display())));
    }
    let mut sources = Vec::with_capacity(names.len());
    for name in &names {
        let path = hr_dir.join(name);
        let img = read_image(&path)?;
        if img.height() != img.width() {
            return Err(Error::Contract(format!(
                "{name} is {}x{}; degradation needs square inputs",
                img.height(),
                img.width()
            )));
        }
        sources.push(img);
    }
    let lr_dir = out_dir.join("lr");
    let hr_out = out_dir.join("hr");
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let src = i % names.len();
        let sample = SampleSeed {
            global_seed: seed,
            sample_index: i as u64,
        };
        let params = sample_params(sample);
        let (lr, _) = degrade(&sources[src], &params, sample)?;
        let base = format!("{i:05}_{}.png", stem(&names[src]));
        write_image(&lr, &lr_dir.join(&base))?;
        write_image(&sources[src], &hr_out.join(&base))?;
        records.push(ManifestRecord {
            hr_path: hr_dir.join(&names[src]).to_string_lossy().into_owned(),
            global_seed: seed,
            sample_index: i as u64,
            params,
        });
    }
    let pairs_manifest = out_dir.join("pairs.jsonl");
    write_manifest(&pairs_manifest, &records)?;

    let mut manifest = RunManifest::new(
        "synth",
        serde_json::json!({ "hr_dir": hr_dir, "out_dir": out_dir, "count": count }),
        Some(seed),
    );
    manifest.outputs = vec![lr_dir, hr_out, pairs_manifest];
    write_run_manifest(&out_dir.join("run_manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Train the model described by a TOML experiment config, dispatching on
/// its variant. Artifacts land in the config's `out_dir`.
pub fn cmd_train(config_path: &Path) -> Result<RunManifest> {
    let cfg = load_experiment(config_path)?;
    if cfg.model.variant != cfg.train.variant {
        return Err(Error::Config(format!(
            "model variant {:?} does not match training variant {:?}",
            cfg.model.variant, cfg.train.variant
        )));
    }
    let dataset = Dataset::from_dir(&cfg.data.hr_dir, cfg.model.hr_side)?;
    let out_dir = cfg.data.out_dir.clone();
    let mut manifest = RunManifest::new(
        "train",
        serde_json::to_value(&cfg).map_err(|e| Error::Config(format!("config encode: {e}")))?,
        Some(cfg.train.seed),
    );
    match cfg.train.variant {
        Variant::Sparnet => {
            let art = train_sparnet(&dataset, &cfg.model, &cfg.train, None, Some(&out_dir))?;
            manifest.outputs.extend(art.final_checkpoint);
        }
        Variant::Sparnethd => {
            let mut extractor = if cfg.losses.perceptual > 0.0 {
                Some(PerceptualExtractor::<f32>::fixed_random(
                    &ExtractorConfig::test_double(),
                    cfg.train.seed,
                )?)
            } else {
                None
            };
            let art = train_sparnethd(
                &dataset,
                &cfg.model,
                &cfg.train,
                &cfg.losses,
                extractor.as_mut(),
                None,
                None,
                Some(&out_dir),
            )?;
            manifest.outputs.extend(art.final_checkpoint);
            manifest.outputs.extend(art.final_d_checkpoint);
        }
    }
    manifest.outputs.push(out_dir.join("train_log.jsonl"));
    write_run_manifest(&out_dir.join("run_manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Super-resolve every image in `in_dir` with a generator checkpoint.
/// With `export_attention`, each unit's spatial attention map is written
/// alongside the output as `<stem>_attention_<k>.png`.
pub fn cmd_infer(
    checkpoint: &Path,
    in_dir: &Path,
    out_dir: &Path,
    export_attention: bool,
) -> Result<RunManifest> {
    let (mut gen, _) = load_generator(checkpoint, None)?;
    let names = image_names(in_dir)?;
    if names.is_empty() {
        return Err(Error::Contract(format!("no images found in {}", in_dir.display())));
    }
    let side = gen.config().hr_side;
    let mut manifest = RunManifest::new(
        "infer",
        serde_json::json!({
            "checkpoint": checkpoint,
            "in_dir": in_dir,
            "out_dir": out_dir,
            "export_attention": export_attention,
            "model": gen.config(),
        }),
        None,
    );
    for name in &names {
        let input = read_image(&in_dir.join(name))?;
        let out_path = out_dir.join(format!("{}.png", stem(name)));
        if export_attention {
            let (sr, maps) = infer_with_attention(&mut gen, &input)?;
            write_image(&sr, &out_path)?;
            for (k, map) in maps.iter().enumerate() {
                let att = render_attention(map, Some(side))?;
                let att_path = out_dir.join(format!("{}_attention_{k}.png", stem(name)));
                write_image(&att, &att_path)?;
                manifest.outputs.push(att_path);
            }
        } else {
            let sr = infer(&mut gen, &input)?;
            write_image(&sr, &out_path)?;
        }
        manifest.outputs.push(out_path);
    }
    write_run_manifest(&out_dir.join("run_manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Score the images in `sr_dir` against same-named references in `hr_dir`
/// and write a line-delimited report. `error_maps_dir`, when given,
/// receives per-image false-color maps of the squared luminance error and
/// the structural-similarity deficit.
pub fn cmd_eval(
    sr_dir: &Path,
    hr_dir: &Path,
    out_report: &Path,
    error_maps_dir: Option<&Path>,
) -> Result<RunManifest> {
    let report = evaluate_corpus(sr_dir, hr_dir, &[])?;
    if let Some(dir) = out_report.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    write_report(&report, out_report)?;
    let mut manifest = RunManifest::new(
        "eval",
        serde_json::json!({ "sr_dir": sr_dir, "hr_dir": hr_dir, "out_report": out_report }),
        None,
    );
    manifest.outputs.push(out_report.to_path_buf());
    if let Some(dir) = error_maps_dir {
        for score in &report.per_image {
            let sr = read_image(&sr_dir.join(&score.name))?;
            let hr = read_image(&hr_dir.join(&score.name))?;
            let maps = error_maps(&sr, &hr)?;
            let base = stem(&score.name);
            let psnr_path = dir.join(format!("{base}_psnr_error.png"));
            let ssim_path = dir.join(format!("{base}_ssim_error.png"));
            write_image(&render_heatmap(&maps.psnr_error, None), &psnr_path)?;
            write_image(&render_heatmap(&maps.ssim_error, None), &ssim_path)?;
            manifest.outputs.push(psnr_path);
            manifest.outputs.push(ssim_path);
        }
    }
    write_run_manifest(&out_report.with_extension("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Plot the evaluation-PSNR curve from a training log as a PNG.
pub fn cmd_plot(log_path: &Path, out_png: &Path) -> Result<RunManifest> {
    let records = read_log(log_path)?;
    let img = render_psnr_curve(&records)?;
    write_image(&img, out_png)?;
    let mut manifest = RunManifest::new(
        "plot",
        serde_json::json!({ "log": log_path, "out": out_png }),
        None,
    );
    manifest.outputs.push(out_png.to_path_buf());
    write_run_manifest(&out_png.with_extension("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Round-trip helper for the config-parsing invariant: parse, serialize,
/// and parse again, returning both parses for comparison.
pub fn reparse_experiment(path: &Path) -> Result<(ExperimentConfig, ExperimentConfig)> {
    let first = load_experiment(path)?;
    let text = toml::to_string_pretty(&first)
        .map_err(|e| Error::Config(format!("config encode: {e}")))?;
    let second =
        toml::from_str(&text).map_err(|e| Error::Config(format!("config re-parse: {e}")))?;
    Ok((first, second))
}
