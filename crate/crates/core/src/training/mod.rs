//! Adversarial training: one discriminator step then one generator step per
//! batch, seeded data order and dropout, CSV loss log and checkpoints.

mod adam;
pub mod checkpoint;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use checkpoint::Checkpoint;

use crate::data::synthetic::Corpus;
use crate::error::{validation, Error, Result};
use crate::losses::{graph, AdversarialForm, LossBreakdown};
use crate::model::config::{DiscriminatorConfig, GeneratorConfig, Mode};
use crate::model::encoder::{encode_for_mode, ImageEncoder, MorphEmbedding};
use crate::model::{Discriminator, Generator};
use crate::rng::{derive_seed, derived_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Toy,
    Paper,
}

fn default_checkpoint_every() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub alpha: f64,
    pub seed: u64,
    pub mode: Mode,
    pub preset: Preset,
    #[serde(default)]
    pub adversarial_form: AdversarialForm,
    /// Checkpoint interval in epochs; a final checkpoint is always written.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn toy(mode: Mode, seed: u64) -> Self {
        Self {
            epochs: 30,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 8,
            dropout: 0.1,
            alpha: 1.0,
            seed,
            mode,
            preset: Preset::Toy,
            adversarial_form: AdversarialForm::NonSaturating,
            checkpoint_every: 10,
        }
    }

    pub fn paper(mode: Mode, seed: u64) -> Self {
        Self { epochs: 300, batch_size: 16, preset: Preset::Paper, ..Self::toy(mode, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return bad("epochs, batch_size and checkpoint_every must be positive".into());
        }
        if self.preset == Preset::Paper {
            let pinned = Self::paper(self.mode, self.seed);
            let fields = [
                ("epochs", self.epochs as f64, pinned.epochs as f64),
                ("lr", self.lr, pinned.lr),
                ("beta1", self.beta1, pinned.beta1),
                ("beta2", self.beta2, pinned.beta2),
                ("dropout", self.dropout, pinned.dropout),
                ("alpha", self.alpha, pinned.alpha),
            ];
            for (name, got, want) in fields {
                if got != want {
                    return bad(format!("paper preset pins {name} = {want}, got {got}"));
                }
            }
        }
        Ok(())
    }

    /// Checks that model configs agree with this training config.
    pub fn check_models(&self, generator: &GeneratorConfig, discriminator: &DiscriminatorConfig) -> Result<()> {
        self.validate()?;
        generator.validate()?;
        discriminator.validate(generator.resolution)?;
        if generator.mode != self.mode {
            return Err(Error::Config(format!(
                "train mode {} but generator mode {}",
                self.mode.as_str(),
                generator.mode.as_str()
            )));
        }
        if generator.dropout != self.dropout {
            return Err(Error::Config(format!(
                "train dropout {} but generator dropout {}",
                self.dropout, generator.dropout
            )));
        }
        Ok(())
    }
}

/// Which constituent serves as the live reference in differential mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceSide {
    First,
    Second,
}

/// Seeded fair coin per morph, shared by training and evaluation.
pub fn reference_side(seed: u64, morph_id: &str) -> ReferenceSide {
    if derive_seed(seed, &format!("reference-side/{morph_id}"), 0) & 1 == 0 {
        ReferenceSide::First
    } else {
        ReferenceSide::Second
    }
}

/// One prepared training example, stored as CHW buffers.
///
/// `first`/`second` are `(bf1, bf2)` in reference-free mode and
/// `(reference, ground truth)` in differential mode; the real triplet is
/// always `(morph, first, second)`.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub morph_id: String,
    morph: Vec<f32>,
    first: Vec<f32>,
    second: Vec<f32>,
    context: MorphEmbedding,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    mode: Mode,
    resolution: usize,
    samples: Vec<TrainingSample>,
}

impl TrainingSet {
    /// Prepares the listed morphs; images must already be at model resolution.
    pub fn build(
        corpus: &Corpus<f32>,
        morph_ids: &[String],
        encoder: &dyn ImageEncoder,
        cfg: &GeneratorConfig,
        seed: u64,
    ) -> Result<Self> {
        if morph_ids.is_empty() {
            return Err(validation("training split is empty"));
        }
        let r = cfg.resolution;
        let mut samples = Vec::with_capacity(morph_ids.len());
        for id in morph_ids {
            let rec = corpus.morph(id)?;
            let (bf1, bf2) = (corpus.bonafide(&rec.bf1_ref)?, corpus.bonafide(&rec.bf2_ref)?);
            for img in [&rec.morph, bf1, bf2] {
                if img.size() != r {
                    return Err(validation(format!("{} is {}px, model expects {r}px", img.image_id, img.size())));
                }
            }
            let (first, second, reference) = match cfg.mode {
                Mode::ReferenceFree => (bf1, bf2, None),
                Mode::Differential => match reference_side(seed, id) {
                    ReferenceSide::First => (bf1, bf2, Some(bf1)),
                    ReferenceSide::Second => (bf2, bf1, Some(bf2)),
                },
            };
            samples.push(TrainingSample {
                morph_id: id.clone(),
                morph: rec.morph.to_chw_f32(),
                first: first.to_chw_f32(),
                second: second.to_chw_f32(),
                context: encode_for_mode(&rec.morph, reference, encoder, cfg)?,
            });
        }
        Ok(Self { mode: cfg.mode, resolution: r, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn samples(&self) -> &[TrainingSample] {
        &self.samples
    }

    fn stack(&self, batch: &[&TrainingSample], pick: impl Fn(&TrainingSample) -> &[f32]) -> Result<Tensor> {
        let r = self.resolution;
        let data: Vec<f32> = batch.iter().flat_map(|s| pick(s).iter().copied()).collect();
        Ok(Tensor::from_vec(data, (batch.len(), 3, r, r), &Device::Cpu)?)
    }

    fn batch(&self, batch: &[&TrainingSample]) -> Result<Batch> {
        let morph = self.stack(batch, |s| &s.morph)?;
        let first = self.stack(batch, |s| &s.first)?;
        let second = self.stack(batch, |s| &s.second)?;
        let input = match self.mode {
            Mode::ReferenceFree => morph.clone(),
            Mode::Differential => Tensor::cat(&[&morph, &first], 1)?,
        };
        let contexts: Vec<&MorphEmbedding> = batch.iter().map(|s| &s.context).collect();
        Ok(Batch { mode: self.mode, input, morph, first, second, context: MorphEmbedding::batch_tensor(&contexts)? })
    }
}

struct Batch {
    mode: Mode,
    input: Tensor,
    morph: Tensor,
    first: Tensor,
    second: Tensor,
    context: Tensor,
}

impl Batch {
    fn real_triplet(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.morph, &self.first, &self.second], 1)?)
    }

    fn fake_triplet(&self, out: &Tensor) -> Result<Tensor> {
        Ok(match self.mode {
            Mode::ReferenceFree => Tensor::cat(&[&self.morph, out], 1)?,
            Mode::Differential => Tensor::cat(&[&self.morph, &self.first, out], 1)?,
        })
    }

    /// Cross-road loss (reference-free) or plain L1 to the ground truth.
    fn reconstruction(&self, out: &Tensor) -> Result<Tensor> {
        Ok(match self.mode {
            Mode::ReferenceFree => graph::cross_road(&out.narrow(1, 0, 3)?, &out.narrow(1, 3, 3)?, &self.first, &self.second)?,
            Mode::Differential => graph::l1(out, &self.second)?,
        })
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub step: u64,
    pub losses: LossBreakdown<f64>,
}

pub const LOSS_LOG_HEADER: &str = "epoch,step,adv_d,adv_g,cross_road,total_g";

impl LossRow {
    pub fn csv_line(&self) -> String {
        let l = &self.losses;
        format!("{},{},{},{},{},{}", self.epoch, self.step, l.adv_d, l.adv_g, l.cross_road, l.total_g)
    }
}

/// Gradient summary for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStat {
    pub name: String,
    pub finite: bool,
    pub l2: f64,
}

impl GradientStat {
    pub fn is_live(&self) -> bool {
        self.finite && self.l2 > 0.0
    }
}

pub struct Trainer {
    generator: Generator,
    discriminator: Discriminator,
    cfg: TrainConfig,
    opt_g: Adam,
    opt_d: Adam,
    /// Completed epochs.
    epoch: usize,
    /// Completed optimisation steps.
    step: u64,
}

impl Trainer {
    pub fn new(gen_cfg: &GeneratorConfig, disc_cfg: &DiscriminatorConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.check_models(gen_cfg, disc_cfg)?;
        Ok(Self {
            generator: Generator::new(gen_cfg, derive_seed(cfg.seed, "init/generator", 0))?,
            discriminator: Discriminator::new(disc_cfg, gen_cfg.resolution, derive_seed(cfg.seed, "init/discriminator", 0))?,
            cfg: cfg.clone(),
            opt_g: Adam::new(cfg.lr, cfg.beta1, cfg.beta2),
            opt_d: Adam::new(cfg.lr, cfg.beta1, cfg.beta2),
            epoch: 0,
            step: 0,
        })
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// `(generator, discriminator)` optimizer step counters.
    pub fn optimizer_steps(&self) -> (u64, u64) {
        (self.opt_g.step_count(), self.opt_d.step_count())
    }

    fn check_set(&self, set: &TrainingSet) -> Result<()> {
        let g = self.generator.config();
        if set.mode != g.mode || set.resolution != g.resolution {
            return Err(Error::Config("training set was prepared for a different model".into()));
        }
        if set.is_empty() {
            return Err(validation("training set is empty"));
        }
        Ok(())
    }

    fn dropout_seed(&self) -> u64 {
        derive_seed(self.cfg.seed, "dropout", self.step)
    }

    fn diverged(&self, what: &str, values: &[(&str, f64)]) -> Error {
        let detail: Vec<String> = values.iter().map(|(k, v)| format!("{k}={v}")).collect();
        Error::Divergence(format!(
            "non-finite {what} at epoch {} step {}: {}",
            self.epoch + 1,
            self.step + 1,
            detail.join(", ")
        ))
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, set: &TrainingSet, batch: &[&TrainingSample]) -> Result<LossBreakdown<f64>> {
        self.check_set(set)?;
        let b = set.batch(batch)?;
        let out = self.generator.forward(&b.input, &b.context, self.dropout_seed())?;

        let d_real = self.discriminator.patch_scores(&b.real_triplet()?)?;
        let d_fake = self.discriminator.patch_scores(&b.fake_triplet(&out.detach())?)?;
        let adv_d_t = graph::discriminator(&d_real, &d_fake)?;
        let adv_d = adv_d_t.to_scalar::<f32>()? as f64;
        if !adv_d.is_finite() {
            return Err(self.diverged("discriminator loss", &[("adv_d", adv_d)]));
        }
        let grads = adv_d_t.backward()?;
        self.opt_d.step(self.discriminator.params(), &grads)?;

        let fake_scores = self.discriminator.patch_scores(&b.fake_triplet(&out)?)?;
        let adv_g_t = graph::generator(&fake_scores, self.cfg.adversarial_form)?;
        let recon_t = b.reconstruction(&out)?;
        let total_t = (&adv_g_t + (&recon_t * self.cfg.alpha)?)?;
        let adv_g = adv_g_t.to_scalar::<f32>()? as f64;
        let recon = recon_t.to_scalar::<f32>()? as f64;
        let losses = LossBreakdown::new(adv_g, adv_d, recon, self.cfg.alpha);
        if !losses.is_finite() {
            return Err(self.diverged(
                "generator loss",
                &[("adv_g", adv_g), ("cross_road", recon), ("total_g", losses.total_g)],
            ));
        }
        let grads = total_t.backward()?;
        self.opt_g.step(self.generator.params(), &grads)?;
        self.step += 1;
        Ok(losses)
    }

    /// Runs one epoch in the seed-determined order for this epoch index.
    pub fn train_epoch(&mut self, set: &TrainingSet) -> Result<Vec<LossRow>> {
        self.check_set(set)?;
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut derived_rng(self.cfg.seed, "data-order", self.epoch as u64));
        let mut rows = Vec::with_capacity(order.len().div_ceil(self.cfg.batch_size));
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| &set.samples[i]).collect();
            let losses = self.train_step(set, &batch)?;
            rows.push(LossRow { epoch: self.epoch + 1, step: self.step, losses });
        }
        self.epoch += 1;
        Ok(rows)
    }

    /// Gradients of the discriminator loss w.r.t. discriminator parameters and
    /// of the generator loss w.r.t. generator parameters for one batch, without
    /// updating anything.
    pub fn probe_gradients(&self, set: &TrainingSet, batch: &[&TrainingSample]) -> Result<Vec<GradientStat>> {
        self.check_set(set)?;
        let b = set.batch(batch)?;
        let out = self.generator.forward(&b.input, &b.context, self.dropout_seed())?;
        let d_real = self.discriminator.patch_scores(&b.real_triplet()?)?;
        let d_fake = self.discriminator.patch_scores(&b.fake_triplet(&out.detach())?)?;
        let d_grads = graph::discriminator(&d_real, &d_fake)?.backward()?;
        let fake_scores = self.discriminator.patch_scores(&b.fake_triplet(&out)?)?;
        let total = (graph::generator(&fake_scores, self.cfg.adversarial_form)? + (b.reconstruction(&out)? * self.cfg.alpha)?)?;
        let g_grads = total.backward()?;
        let mut stats = Vec::new();
        for (prefix, params, grads) in
            [("generator", self.generator.params(), &g_grads), ("discriminator", self.discriminator.params(), &d_grads)]
        {
            for (name, var) in params.vars() {
                let (finite, l2) = match grads.get(var.as_tensor()) {
                    Some(g) => {
                        let v = g.flatten_all()?.to_vec1::<f32>()?;
                        (v.iter().all(|x| x.is_finite()), v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt())
                    }
                    None => (true, 0.0),
                };
                stats.push(GradientStat { name: format!("{prefix}/{name}"), finite, l2 });
            }
        }
        Ok(stats)
    }

    /// Mean reconstruction loss over the whole set with a fixed dropout seed,
    /// without updating anything.
    pub fn evaluate_reconstruction(&self, set: &TrainingSet, dropout_seed: u64) -> Result<f64> {
        mean_reconstruction(&self.generator, set, self.cfg.batch_size, dropout_seed)
    }

    /// Trains until `cfg.epochs` are complete. With a run directory, appends
    /// to `loss_log.csv` and writes `ckpt_epoch_{N}` every K epochs and at the end.
    pub fn fit(&mut self, set: &TrainingSet, run_dir: Option<&Path>) -> Result<Vec<LossRow>> {
        let mut all = Vec::new();
        if let Some(dir) = run_dir {
            fs::create_dir_all(dir)?;
            prepare_loss_log(&dir.join(LOSS_LOG_FILE), self.epoch)?;
        }
        while self.epoch < self.cfg.epochs {
            let rows = self.train_epoch(set)?;
            if let Some(dir) = run_dir {
                append_loss_rows(&dir.join(LOSS_LOG_FILE), &rows)?;
                if self.epoch % self.cfg.checkpoint_every == 0 || self.epoch == self.cfg.epochs {
                    self.checkpoint()?.save(&checkpoint_path(dir, self.epoch))?;
                }
            }
            let last = rows.last().map(|r| r.losses);
            if let Some(l) = last {
                log::info!(
                    "epoch {}/{}: adv_d {:.4} adv_g {:.4} cross_road {:.4}",
                    self.epoch,
                    self.cfg.epochs,
                    l.adv_d,
                    l.adv_g,
                    l.cross_road
                );
            }
            all.extend(rows);
        }
        Ok(all)
    }
}

/// Mean reconstruction loss of `generator` over `set`.
pub fn mean_reconstruction(generator: &Generator, set: &TrainingSet, batch_size: usize, dropout_seed: u64) -> Result<f64> {
    if set.is_empty() {
        return Err(validation("training set is empty"));
    }
    let mut total = 0.0;
    for (i, chunk) in set.samples.chunks(batch_size.max(1)).enumerate() {
        let refs: Vec<&TrainingSample> = chunk.iter().collect();
        let b = set.batch(&refs)?;
        let out = generator.forward(&b.input, &b.context, derive_seed(dropout_seed, "eval-batch", i as u64))?;
        total += b.reconstruction(&out)?.to_scalar::<f32>()? as f64 * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

pub const LOSS_LOG_FILE: &str = "loss_log.csv";

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("ckpt_epoch_{epoch}"))
}

/// Starts a fresh log, or truncates an existing one to rows from epochs
/// `<= completed_epochs` when resuming.
fn prepare_loss_log(path: &Path, completed_epochs: usize) -> Result<()> {
    let mut kept = vec![LOSS_LOG_HEADER.to_string()];
    if completed_epochs > 0 && path.exists() {
        for line in fs::read_to_string(path)?.lines().skip(1) {
            let epoch: usize = line
                .split(',')
                .next()
                .and_then(|e| e.parse().ok())
                .ok_or_else(|| validation(format!("malformed loss log line: {line}")))?;
            if epoch <= completed_epochs {
                kept.push(line.to_string());
            }
        }
    }
    let mut text = kept.join("\n");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn append_loss_rows(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).open(path)?;
    for r in rows {
        writeln!(f, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Fresh training run.
pub fn train(
    gen_cfg: &GeneratorConfig,
    disc_cfg: &DiscriminatorConfig,
    cfg: &TrainConfig,
    set: &TrainingSet,
    run_dir: Option<&Path>,
) -> Result<(Checkpoint, Vec<LossRow>)> {
    let mut t = Trainer::new(gen_cfg, disc_cfg, cfg)?;
    let rows = t.fit(set, run_dir)?;
    Ok((t.checkpoint()?, rows))
}

/// Continues from a checkpoint up to `cfg.epochs`. Everything but the epoch
/// count must match the checkpoint's training configuration.
pub fn resume(
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
    set: &TrainingSet,
    run_dir: Option<&Path>,
) -> Result<(Checkpoint, Vec<LossRow>)> {
    let stored = &ckpt.header().train;
    let comparable = TrainConfig { epochs: stored.epochs, ..cfg.clone() };
    if &comparable != stored {
        return Err(Error::Config("resume config differs from the checkpoint's beyond the epoch count".into()));
    }
    let mut t = Trainer::from_checkpoint(ckpt)?;
    t.cfg.epochs = cfg.epochs;
    let rows = t.fit(set, run_dir)?;
    Ok((t.checkpoint()?, rows))
}
