use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use cevae_core::codec::{
    compression_report, read_latent, rounded_mb, serialize, storage_bytes, Dtype, StorageParams,
};
use cevae_core::data::{
    decode_image, load_all, load_manifest, load_sample, save_image, synthetic_pairs, Layout,
    PairedSample,
};
use cevae_core::metrics::{evaluate_dataset, format_evaluation, quantile, Summary};
use cevae_core::objectives::{FeatureExtractor, LossToggles, RandomPyramid};
use cevae_core::trainer::{ablate_losses, load_model, Checkpoint, TrainConfig, TrainMode, Trainer};
use cevae_core::{AblationMode, CeVae, Image, ModelConfig};

use crate::settings::{usage, Preset, Settings};
use crate::{
    AblateArgs, DataArgs, DecodeArgs, EncodeArgs, EnhanceArgs, EvaluateArgs, ModelArgs, OptimArgs,
    StorageArgs, TrainArgs,
};

const LATENT_EXT: &str = "cevl";

fn parse_value<T>(text: &str, what: &str) -> Result<T>
where
    T: FromStr,
    T::Err: std::fmt::Display,
{
    text.parse().map_err(|e| usage(format!("{what}: {e}")))
}

fn parse_toggles(text: &str) -> Result<LossToggles> {
    text.parse().map_err(|e| {
        usage(format!(
            "{e}; valid names are rec, lpips, gan, ssim (comma separated) or all"
        ))
    })
}

fn parse_mode(text: &str) -> Result<TrainMode> {
    match text {
        "pretrain" => Ok(TrainMode::Pretrain),
        "finetune" => Ok(TrainMode::Finetune),
        other => Err(usage(format!(
            "unknown mode '{other}' (pretrain or finetune)"
        ))),
    }
}

fn parse_shape(text: &str) -> Result<Vec<usize>> {
    text.split(['x', ','])
        .map(|d| {
            d.trim()
                .parse()
                .map_err(|_| usage(format!("bad shape '{text}', expected e.g. 3x256x256")))
        })
        .collect()
}

fn model_config(s: &Settings, m: &ModelArgs) -> Result<(Preset, ModelConfig, u64)> {
    let preset: Preset = parse_value(
        &s.pick_or(m.preset.clone(), "preset", "desk".into())?,
        "preset",
    )?;
    let mode: AblationMode = parse_value(
        &s.pick_or(m.ablation.clone(), "ablation", "full".into())?,
        "ablation",
    )?;
    let seed = s.pick_or(m.seed, "seed", 0)?;
    Ok((preset, preset.model(mode), seed))
}

fn train_config(s: &Settings, preset: Preset, seed: u64, o: &OptimArgs) -> Result<TrainConfig> {
    let mut cfg = preset.train();
    cfg.seed = seed;
    cfg.steps = s.pick_or(o.steps, "steps", cfg.steps)?;
    cfg.lr = s.pick_or(o.lr, "lr", cfg.lr)?;
    cfg.batch_size = s.pick_or(o.batch_size, "batch_size", cfg.batch_size)?;
    cfg.disc_start_step = s.pick_or(o.disc_start_step, "disc_start_step", cfg.disc_start_step)?;
    cfg.augment = s.pick_or(o.augment, "augment", cfg.augment)?;
    Ok(cfg)
}

fn has_extension(path: &Path, exts: &[&str]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.contains(&e.to_ascii_lowercase().as_str()))
}

fn is_image(path: &Path) -> bool {
    has_extension(path, &["png", "jpg", "jpeg"])
}

fn is_latent(path: &Path) -> bool {
    has_extension(path, &[LATENT_EXT])
}

/// A single file as given, or the matching files of a directory in name
/// order.
fn list_inputs(path: &Path, keep: fn(&Path) -> bool) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(usage(format!("{} does not exist", path.display())));
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(path).with_context(|| format!("listing {}", path.display()))? {
        let p = entry?.path();
        if p.is_file() && keep(&p) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(usage(format!("no usable files in {}", path.display())));
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Runs `work` on every file, reporting failures and carrying on. Fails at
/// the end if any file failed.
fn for_each_file(files: &[PathBuf], mut work: impl FnMut(&Path) -> Result<String>) -> Result<()> {
    let mut failed = 0;
    for f in files {
        match work(f) {
            Ok(line) => println!("{line}"),
            Err(e) => {
                eprintln!("{}: {e:#}", f.display());
                failed += 1;
            }
        }
    }
    if failed > 0 {
        bail!("{failed} of {} files failed", files.len());
    }
    Ok(())
}

fn load_trained(path: &Path) -> Result<CeVae<f32>> {
    if !path.is_file() {
        return Err(usage(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    let ckpt = Checkpoint::load(path)?;
    let model = load_model::<f32>(&ckpt)?;
    model.set_training(false);
    Ok(model)
}

fn load_image(path: &Path, size: usize) -> Result<Image> {
    let img = decode_image(path)?;
    Ok(if img.height() == size && img.width() == size {
        img
    } else {
        img.resize_bilinear(size, size)
    })
}

fn load_pairs(root: &Path, layout: Layout, size: usize) -> Result<Vec<PairedSample>> {
    if !root.is_dir() {
        return Err(usage(format!(
            "dataset {} is not a directory",
            root.display()
        )));
    }
    let manifest = load_manifest(root, layout)?;
    let (samples, failed) = load_all(&manifest, size);
    for e in &failed {
        log::warn!("skipping {e}");
    }
    if samples.is_empty() {
        bail!(
            "none of the {} pairs in {} could be read",
            manifest.len(),
            root.display()
        );
    }
    Ok(samples)
}

fn training_pairs(s: &Settings, d: &DataArgs, size: usize, seed: u64) -> Result<Vec<PairedSample>> {
    match (&d.dataset, d.synthetic) {
        (_, Some(0)) => Err(usage("--synthetic needs at least one pair")),
        (_, Some(n)) => Ok(synthetic_pairs(n, size, seed)),
        (Some(root), None) => {
            let layout: Layout = parse_value(
                &s.pick_or(d.layout.clone(), "layout", "paired_dirs".into())?,
                "layout",
            )?;
            load_pairs(root, layout, size)
        }
        (None, None) => Err(usage("give --dataset or --synthetic")),
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let s = Settings::load(a.model.config.as_deref())?;
    let (preset, model_cfg, seed) = model_config(&s, &a.model)?;
    let mut cfg = train_config(&s, preset, seed, &a.optim)?;
    if let Some(t) = s.pick(a.toggles.clone(), "toggles")? {
        cfg.toggles = parse_toggles(&t)?;
    }
    if let Some(m) = s.pick(a.mode.clone(), "mode")? {
        cfg.mode = parse_mode(&m)?;
    }
    cfg.eval_every = s.pick_or(a.eval_every, "eval_every", cfg.eval_every)?;
    let steps = cfg.steps;

    let mut trainer = match &a.init {
        Some(path) => {
            if !path.is_file() {
                return Err(usage(format!(
                    "checkpoint {} does not exist",
                    path.display()
                )));
            }
            let ckpt = Checkpoint::load(path)?;
            cfg.discriminator = ckpt.config.discriminator.clone();
            Trainer::<f32>::resume(&ckpt, &ckpt.config.model, cfg)?
        }
        None => Trainer::<f32>::new(model_cfg, cfg)?,
    };
    let size = trainer.model().config().image_size;
    let samples = training_pairs(&s, &a.data, size, seed)?;
    let eval = match &a.eval {
        Some(root) => Some(load_pairs(root, Layout::PairedDirs, size)?),
        None => None,
    };

    let mut log_out: Box<dyn Write> = match &a.log {
        Some(p) => {
            Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)
        }
        None => Box::new(std::io::stdout().lock()),
    };
    let start = Instant::now();
    trainer.run(&samples, steps, eval.as_deref(), Some(&mut *log_out))?;
    log_out.flush()?;
    for (step, records) in trainer.evaluations() {
        if let Some(m) = Summary::of(&records.iter().map(|r| r.psnr).collect::<Vec<_>>()) {
            eprintln!(
                "step {step}: mean PSNR {:.2} dB over {} pairs",
                m.mean, m.count
            );
        }
    }
    trainer.checkpoint().save(&a.out)?;
    eprintln!(
        "trained to step {} in {:.1} s, checkpoint {}",
        trainer.step(),
        start.elapsed().as_secs_f64(),
        a.out.display()
    );
    Ok(())
}

fn enhance_images(model: &CeVae<f32>, input: &Path, out: &Path) -> Result<()> {
    let files = list_inputs(input, is_image)?;
    output_dir(out)?;
    let size = model.config().image_size;
    for_each_file(&files, |f| {
        let target = out.join(format!("{}.png", stem(f)));
        if target.exists() && fs::canonicalize(&target)? == fs::canonicalize(f)? {
            bail!("refusing to overwrite the input");
        }
        let y = model.enhance_image(&load_image(f, size)?)?;
        save_image(&target, &y)?;
        Ok(format!("{}\t{}", f.display(), target.display()))
    })
}

fn decode_latents(model: &CeVae<f32>, latent: &Path, out: &Path) -> Result<()> {
    let files = list_inputs(latent, is_latent)?;
    output_dir(out)?;
    for_each_file(&files, |f| {
        let x = read_latent::<f32>(f)?;
        let y = Image::from_tensor(model.enhance(&x)?.tensor(), 0)?;
        let target = out.join(format!("{}.png", stem(f)));
        save_image(&target, &y)?;
        Ok(format!("{}\t{}", f.display(), target.display()))
    })
}

pub fn enhance(a: EnhanceArgs) -> Result<()> {
    let model = load_trained(&a.checkpoint)?;
    match (&a.input, &a.latent) {
        (Some(input), None) => enhance_images(&model, input, &a.out),
        (None, Some(latent)) => decode_latents(&model, latent, &a.out),
        _ => Err(usage("give exactly one of --input and --latent")),
    }
}

pub fn decode(a: DecodeArgs) -> Result<()> {
    let model = load_trained(&a.checkpoint)?;
    decode_latents(&model, &a.latent, &a.out)
}

pub fn encode(a: EncodeArgs) -> Result<()> {
    let s = Settings::load(a.model.config.as_deref())?;
    let dtype: Dtype = parse_value(&s.pick_or(a.dtype.clone(), "dtype", "f64".into())?, "dtype")?;
    let model = match &a.checkpoint {
        Some(p) => load_trained(p)?,
        None => {
            let (_, cfg, seed) = model_config(&s, &a.model)?;
            let m = CeVae::<f32>::new(cfg, seed)?;
            m.set_training(false);
            m
        }
    };
    let files = list_inputs(&a.input, is_image)?;
    output_dir(&a.out)?;
    let size = model.config().image_size;
    let mut times = Vec::new();
    let mut total_mb = 0.0;
    let result = for_each_file(&files, |f| {
        let img = load_image(f, size)?;
        let (x, secs) = model.encoder().encode_timed(&img, 1)?;
        let bytes = serialize(&x, dtype)?;
        let target = out_path(&a.out, f);
        fs::write(&target, &bytes).with_context(|| format!("writing {}", target.display()))?;
        let payload = storage_bytes(&x.shape(), dtype.size());
        times.push(secs);
        total_mb += rounded_mb(payload);
        Ok(format!(
            "{}\t{} bytes\tpayload {payload} bytes\t{:.1} ms",
            target.display(),
            bytes.len(),
            secs * 1e3
        ))
    });
    if !times.is_empty() {
        times.sort_by(|a, b| a.total_cmp(b));
        println!(
            "encoded {} of {} files as {dtype}: {} MB of latent payload, median encode time {:.1} ms",
            times.len(),
            files.len(),
            (total_mb * 100.0).round() / 100.0,
            quantile(&times, 0.5) * 1e3
        );
    }
    result
}

fn out_path(dir: &Path, input: &Path) -> PathBuf {
    dir.join(format!("{}.{LATENT_EXT}", stem(input)))
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let s = Settings::load(a.model.config.as_deref())?;
    let (_, cfg, _) = model_config(&s, &a.model)?;
    let layout: Layout = parse_value(
        &s.pick_or(a.layout.clone(), "layout", "paired_dirs".into())?,
        "layout",
    )?;
    let model = match (&a.checkpoint, a.identity) {
        (Some(p), false) => Some(load_trained(p)?),
        (None, true) => None,
        _ => return Err(usage("give exactly one of --checkpoint and --identity")),
    };
    if !a.dataset.is_dir() {
        return Err(usage(format!(
            "dataset {} is not a directory",
            a.dataset.display()
        )));
    }
    let size = model
        .as_ref()
        .map_or(cfg.image_size, |m| m.config().image_size);
    let manifest = load_manifest(&a.dataset, layout)?;
    let pairs = manifest.entries.iter().map(|e| {
        let pair = load_sample(e, size).map(|p| (p.degraded, p.reference));
        (e.id.clone(), pair)
    });
    let extractor = a.lpips.then(RandomPyramid::<f64>::default);
    let enhance = |img: &Image| match &model {
        Some(m) => m.enhance_image(img),
        None => Ok(img.clone()),
    };
    let eval = evaluate_dataset(
        pairs,
        &enhance,
        extractor.as_ref().map(|e| e as &dyn FeatureExtractor<f64>),
    )?;
    fs::write(&a.out, format_evaluation(&eval))
        .with_context(|| format!("writing {}", a.out.display()))?;
    let show = |name: &str, m: &Summary| {
        println!(
            "{name}\tmean {:.4}\tstd {:.4}\tmedian {:.4}\tn {}",
            m.mean, m.std, m.median, m.count
        )
    };
    show("psnr", &eval.psnr);
    show("ssim", &eval.ssim);
    if let Some(l) = &eval.lpips {
        show("lpips", l);
    }
    for (id, reason) in &eval.skipped {
        eprintln!("skipped {id}: {reason}");
    }
    Ok(())
}

pub fn storage_report(a: StorageArgs) -> Result<()> {
    let d = StorageParams::default();
    let p = StorageParams {
        raw_shape: a
            .raw_shape
            .as_deref()
            .map(parse_shape)
            .transpose()?
            .unwrap_or(d.raw_shape),
        latent_shape: a
            .latent_shape
            .as_deref()
            .map(parse_shape)
            .transpose()?
            .unwrap_or(d.latent_shape),
        bytes_per_value: a.bytes_per_value.unwrap_or(d.bytes_per_value),
        bandwidth_bits_per_s: a.bandwidth.unwrap_or(d.bandwidth_bits_per_s),
        capacity_bytes: a.capacity.unwrap_or(d.capacity_bytes),
        images_per_s: a.rate.unwrap_or(d.images_per_s),
        batch: a.batch.unwrap_or(d.batch),
    };
    print!("{}", compression_report(&p)?);
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let sets = a
        .toggle_sets
        .iter()
        .flat_map(|s| s.split(';'))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse_toggles)
        .collect::<Result<Vec<_>>>()?;
    if sets.len() < 2 {
        return Err(usage(format!(
            "an ablation compares at least two toggle sets, got {}",
            sets.len()
        )));
    }
    let s = Settings::load(a.model.config.as_deref())?;
    let (preset, model_cfg, seed) = model_config(&s, &a.model)?;
    let cfg = train_config(&s, preset, seed, &a.optim)?;
    let size = model_cfg.image_size;
    let train = training_pairs(&s, &a.data, size, seed)?;
    let eval = match &a.eval {
        Some(root) => load_pairs(root, Layout::PairedDirs, size)?,
        None => train.clone(),
    };
    let table = ablate_losses::<f32>(&model_cfg, &cfg, &train, &eval, &sets)?;
    table.write(&a.out)?;
    let summary = table.summary_tsv();
    match &a.summary {
        Some(p) => fs::write(p, &summary).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{summary}"),
    }
    Ok(())
}
