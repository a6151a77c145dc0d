//! Optimisation: identity pretraining, paired fine-tuning, checkpoints and
//! loss-ablation runs.

mod adam;
mod checkpoint;

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use cevae_tensor::{no_grad, Float, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{augment, batch_indices, PairedSample};
use crate::error::{CoreError, Result};
use crate::image::Image;
use crate::metrics::{psnr, ssim_metric, MetricRecord, Summary};
use crate::model::{CeVae, ModelConfig};
use crate::objectives::{
    combined_loss, discriminator_loss, DiscriminatorConfig, LossBreakdown, LossContext,
    LossToggles, PatchDiscriminator, RandomPyramid, LAMBDA_DELTA,
};

pub use adam::{Adam, Moments, ADAM_BETAS, ADAM_EPS};
pub use checkpoint::{
    ArchitectureConfig, Checkpoint, NamedTensor, CHECKPOINT_MAGIC, DISC_PREFIX, MODEL_PREFIX,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Input and target are both the reference image.
    Pretrain,
    /// Degraded input, reference target.
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub delta: f64,
    pub disc_start_step: u64,
    pub toggles: LossToggles,
    pub seed: u64,
    pub augment: bool,
    /// Evaluate every this many steps when evaluation pairs are given; 0
    /// disables it.
    pub eval_every: u64,
    pub discriminator: DiscriminatorConfig,
}

impl TrainConfig {
    /// Small-image settings that train in minutes on one core.
    pub fn desk() -> Self {
        Self {
            mode: TrainMode::Finetune,
            lr: 5e-3,
            batch_size: 8,
            steps: 300,
            delta: LAMBDA_DELTA,
            disc_start_step: 1000,
            toggles: LossToggles::ALL,
            seed: 0,
            augment: false,
            eval_every: 0,
            discriminator: DiscriminatorConfig::desk(),
        }
    }

    /// Full-size schedule: learning rate 4.5e-6, batch 6. Not practical
    /// without a large compute budget.
    pub fn reference() -> Self {
        Self {
            lr: 4.5e-6,
            batch_size: 6,
            steps: 600_000,
            augment: true,
            discriminator: DiscriminatorConfig::reference(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.delta > 0.0) {
            return Err(CoreError::Config(format!(
                "lr and delta must be positive, got {} and {}",
                self.lr, self.delta
            )));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch size must be at least 1".into()));
        }
        self.toggles.validate()?;
        let only_gan = LossToggles {
            rec: false,
            lpips: false,
            gan: true,
            ssim: false,
        };
        if self.toggles == only_gan && self.disc_start_step > 0 {
            return Err(CoreError::Config(
                "with only the adversarial term on, the discriminator must start at step 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub losses: LossBreakdown,
    pub disc_loss: Option<f64>,
}

impl StepRecord {
    /// `step rec lpips gan ssim lambda total`, tab separated.
    pub fn log_line(&self) -> String {
        let b = &self.losses;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, b.rec, b.lpips, b.gan, b.ssim, b.lambda, b.total
        )
    }
}

pub struct Trainer<T: Float> {
    cfg: TrainConfig,
    model: CeVae<T>,
    disc_store: ParamStore<T>,
    disc: PatchDiscriminator<T>,
    extractor: RandomPyramid<T>,
    gen_opt: Adam,
    disc_opt: Adam,
    step: u64,
    history: Vec<StepRecord>,
    evaluations: Vec<(u64, Vec<MetricRecord>)>,
}

const DISC_SEED_SALT: u64 = 0xD15C;

impl<T: Float> Trainer<T> {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let image_size = model_cfg.image_size;
        let model = CeVae::new(model_cfg, cfg.seed)?;
        let disc_store = ParamStore::new(cfg.seed ^ DISC_SEED_SALT);
        let disc =
            PatchDiscriminator::new(&disc_store.root(), cfg.discriminator.clone(), image_size)?;
        Ok(Self {
            gen_opt: Adam::new(cfg.lr),
            disc_opt: Adam::new(cfg.lr),
            cfg,
            model,
            disc_store,
            disc,
            extractor: RandomPyramid::default(),
            step: 0,
            history: Vec::new(),
            evaluations: Vec::new(),
        })
    }

    /// Continues from a checkpoint. Refuses when the checkpoint was made for
    /// a different architecture than `model_cfg` plus the configured
    /// discriminator.
    pub fn resume(ckpt: &Checkpoint, model_cfg: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        let expected = ArchitectureConfig {
            model: model_cfg.clone(),
            discriminator: cfg.discriminator.clone(),
        };
        if expected.hash() != ckpt.config_hash() {
            return Err(CoreError::Checkpoint(format!(
                "config hash mismatch: checkpoint {:016x}, current configuration {:016x}",
                ckpt.config_hash(),
                expected.hash()
            )));
        }
        let mut t = Self::new(model_cfg.clone(), cfg)?;
        ckpt.restore_store(MODEL_PREFIX, t.model.store())?;
        ckpt.restore_store(DISC_PREFIX, &t.disc_store)?;
        ckpt.restore_optimizer("opt.gen.", &mut t.gen_opt, ckpt.gen_opt_steps);
        ckpt.restore_optimizer("opt.disc.", &mut t.disc_opt, ckpt.disc_opt_steps);
        t.gen_opt.lr = t.cfg.lr;
        t.disc_opt.lr = t.cfg.lr;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &CeVae<T> {
        &self.model
    }

    pub fn discriminator_store(&self) -> &ParamStore<T> {
        &self.disc_store
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub fn evaluations(&self) -> &[(u64, Vec<MetricRecord>)] {
        &self.evaluations
    }

    pub fn architecture(&self) -> ArchitectureConfig {
        ArchitectureConfig {
            model: self.model.config().clone(),
            discriminator: self.cfg.discriminator.clone(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.architecture(),
            self.step,
            self.model.store(),
            &self.disc_store,
            &self.gen_opt,
            &self.disc_opt,
        )
    }

    fn gan_active(&self) -> bool {
        self.cfg.toggles.gan && self.step >= self.cfg.disc_start_step
    }

    /// Generator half-step: forward, combined loss, one Adam update of the
    /// model parameters. Returns the losses, the targets and the (detached)
    /// prediction.
    pub fn generator_update(
        &mut self,
        batch: &[PairedSample],
    ) -> Result<(LossBreakdown, Tensor<T>, Tensor<T>)> {
        if batch.is_empty() {
            return Err(CoreError::Input("empty batch".into()));
        }
        let refs: Vec<&Image> = batch.iter().map(|s| &s.reference).collect();
        let inputs: Vec<&Image> = match self.cfg.mode {
            TrainMode::Pretrain => refs.clone(),
            TrainMode::Finetune => batch.iter().map(|s| &s.degraded).collect(),
        };
        let x = Image::batch_tensor::<T>(&inputs)?;
        let gt = Image::batch_tensor::<T>(&refs)?;
        self.model.set_training(true);
        let pred = self.model.forward(&x)?;
        let toggles = LossToggles {
            gan: self.gan_active(),
            ..self.cfg.toggles
        };
        let ctx = LossContext {
            extractor: Some(&self.extractor),
            discriminator: Some(&self.disc),
            lambda_layer: Some(self.model.last_layer().tensor()),
            delta: self.cfg.delta,
        };
        let objective = combined_loss(&gt, &pred, toggles, &ctx)?;
        let losses = objective.breakdown;
        if !losses.is_finite() {
            return Err(CoreError::Numeric(format!(
                "non-finite loss at step {}: {losses:?}",
                self.step
            )));
        }
        let grads = objective.total.backward();
        self.gen_opt.step(&self.model.store().trainable(), &grads);
        Ok((losses, gt, pred.detach()))
    }

    /// Discriminator half-step on real images and generated ones.
    pub fn discriminator_update(&mut self, real: &Tensor<T>, fake: &Tensor<T>) -> Result<f64> {
        let d = discriminator_loss(&self.disc.logits(real), &self.disc.logits(&fake.detach()));
        let value = d.item().as_f64();
        if !value.is_finite() {
            return Err(CoreError::Numeric(format!(
                "non-finite discriminator loss at step {}: {value}",
                self.step
            )));
        }
        let grads = d.backward();
        self.disc_opt.step(&self.disc_store.trainable(), &grads);
        Ok(value)
    }

    /// One generator update, then one discriminator update when the
    /// adversarial term is active.
    pub fn train_step(&mut self, batch: &[PairedSample]) -> Result<LossBreakdown> {
        let gan_active = self.gan_active();
        let (losses, gt, pred) = self.generator_update(batch)?;
        let disc_loss = if gan_active {
            Some(self.discriminator_update(&gt, &pred)?)
        } else {
            None
        };
        self.history.push(StepRecord {
            step: self.step,
            losses,
            disc_loss,
        });
        self.step += 1;
        Ok(losses)
    }

    /// Trains for `steps` more steps over `samples`, reshuffled every epoch.
    /// Each step's log line goes to `log` when given.
    pub fn run(
        &mut self,
        samples: &[PairedSample],
        steps: u64,
        eval: Option<&[PairedSample]>,
        mut log: Option<&mut dyn Write>,
    ) -> Result<()> {
        if samples.is_empty() {
            return Err(CoreError::Input("no training samples".into()));
        }
        let end = self.step + steps;
        let bs = self.cfg.batch_size.min(samples.len());
        while self.step < end {
            let per_epoch = samples.len().div_ceil(bs) as u64;
            let epoch = self.step / per_epoch;
            let batches = batch_indices(samples.len(), bs, self.cfg.seed, epoch, true)?;
            let offset = (self.step % per_epoch) as usize;
            for idx in batches.into_iter().skip(offset) {
                if self.step >= end {
                    break;
                }
                let batch: Vec<PairedSample> = if self.cfg.augment {
                    idx.iter()
                        .map(|&i| {
                            let seed = self.cfg.seed ^ (self.step << 20) ^ i as u64;
                            augment(&samples[i], seed).map(|(s, _)| s)
                        })
                        .collect::<Result<_>>()?
                } else {
                    idx.iter().map(|&i| samples[i].clone()).collect()
                };
                self.train_step(&batch)?;
                if let Some(w) = log.as_deref_mut() {
                    let line = self.history.last().expect("just pushed").log_line();
                    writeln!(w, "{line}").map_err(|e| CoreError::io("<training log>", e))?;
                }
                if let Some(eval) = eval {
                    if self.cfg.eval_every > 0 && self.step.is_multiple_of(self.cfg.eval_every) {
                        let records = self.evaluate(eval)?;
                        self.evaluations.push((self.step, records));
                    }
                }
            }
        }
        Ok(())
    }

    /// Clamped model output for each degraded image, in inference mode.
    pub fn predict(&self, samples: &[PairedSample]) -> Result<Vec<Image>> {
        self.model.set_training(false);
        let _guard = no_grad();
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.cfg.batch_size.max(1)) {
            let imgs: Vec<&Image> = chunk.iter().map(|s| &s.degraded).collect();
            let x = self.model.encode(&Image::batch_tensor(&imgs)?)?;
            let y = self.model.enhance(&x)?;
            for i in 0..chunk.len() {
                out.push(Image::from_tensor(y.tensor(), i)?);
            }
        }
        Ok(out)
    }

    /// PSNR and SSIM of the model output against each reference, sorted by id.
    pub fn evaluate(&self, samples: &[PairedSample]) -> Result<Vec<MetricRecord>> {
        let preds = self.predict(samples)?;
        let mut records = samples
            .iter()
            .zip(&preds)
            .map(|(s, p)| {
                Ok(MetricRecord {
                    image_id: s.id.clone(),
                    psnr: psnr(&s.reference, p)?,
                    ssim: ssim_metric(&s.reference, p)?,
                    lpips: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        Ok(records)
    }
}

/// Trains from scratch on identity pairs.
pub fn pretrain<T: Float>(
    model_cfg: ModelConfig,
    mut cfg: TrainConfig,
    samples: &[PairedSample],
) -> Result<Trainer<T>> {
    cfg.mode = TrainMode::Pretrain;
    let steps = cfg.steps;
    let mut t = Trainer::new(model_cfg, cfg)?;
    t.run(samples, steps, None, None)?;
    Ok(t)
}

/// Continues training from `init` on degraded/reference pairs.
pub fn finetune<T: Float>(
    mut cfg: TrainConfig,
    samples: &[PairedSample],
    init: &Checkpoint,
) -> Result<Trainer<T>> {
    cfg.mode = TrainMode::Finetune;
    let steps = cfg.steps;
    let mut t = Trainer::resume(init, &init.config.model.clone(), cfg)?;
    t.run(samples, steps, None, None)?;
    Ok(t)
}

/// Builds the model stored in a checkpoint.
pub fn load_model<T: Float>(ckpt: &Checkpoint) -> Result<CeVae<T>> {
    let model = CeVae::new(ckpt.config.model.clone(), 0)?;
    ckpt.restore_store(MODEL_PREFIX, model.store())?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub toggles: LossToggles,
    pub records: Vec<MetricRecord>,
}

impl AblationRow {
    pub fn psnr_summary(&self) -> Option<Summary> {
        Summary::of(&self.records.iter().map(|r| r.psnr).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

const ABLATION_HEADER: &str = "toggles\tid\tpsnr\tssim";

impl AblationTable {
    /// One line per (toggle set, image).
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{ABLATION_HEADER}\n");
        for row in &self.rows {
            for r in &row.records {
                let _ = writeln!(s, "{}\t{}\t{}\t{}", row.toggles, r.image_id, r.psnr, r.ssim);
            }
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(ABLATION_HEADER) {
            return Err(CoreError::Input("ablation table lacks its header".into()));
        }
        let mut rows: Vec<AblationRow> = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || CoreError::Input(format!("ablation line {}: '{line}'", i + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            let toggles: LossToggles = f[0].parse()?;
            let record = MetricRecord {
                image_id: f[1].to_string(),
                psnr: f[2].parse().map_err(|_| bad())?,
                ssim: f[3].parse().map_err(|_| bad())?,
                lpips: None,
            };
            match rows.last_mut() {
                Some(row) if row.toggles == toggles => row.records.push(record),
                _ => rows.push(AblationRow {
                    toggles,
                    records: vec![record],
                }),
            }
        }
        Ok(Self { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| CoreError::io(path, e))
    }

    /// PSNR distribution per toggle set, one line each, ready for a box plot.
    pub fn summary_tsv(&self) -> String {
        let mut s = String::from("toggles\tcount\tmean\tstd\tmin\tq1\tmedian\tq3\tmax\n");
        for row in &self.rows {
            if let Some(m) = row.psnr_summary() {
                let _ = writeln!(
                    s,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    row.toggles, m.count, m.mean, m.std, m.min, m.q1, m.median, m.q3, m.max
                );
            }
        }
        s
    }
}

/// Trains one model per toggle set from the same seed and scores each on
/// `eval`.
pub fn ablate_losses<T: Float>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &[PairedSample],
    eval: &[PairedSample],
    toggle_sets: &[LossToggles],
) -> Result<AblationTable> {
    if toggle_sets.len() < 2 {
        return Err(CoreError::Config(
            "an ablation needs at least two toggle sets".into(),
        ));
    }
    let mut rows = Vec::with_capacity(toggle_sets.len());
    for &toggles in toggle_sets {
        let run_cfg = TrainConfig {
            toggles,
            ..cfg.clone()
        };
        let mut t = Trainer::<T>::new(model_cfg.clone(), run_cfg)?;
        t.run(train, cfg.steps, None, None)?;
        log::info!("ablation {toggles}: trained {} steps", t.step());
        rows.push(AblationRow {
            toggles,
            records: t.evaluate(eval)?,
        });
    }
    Ok(AblationTable { rows })
}
