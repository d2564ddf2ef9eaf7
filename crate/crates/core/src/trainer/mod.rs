//! Staged, seed-deterministic patch training with optional adversarial
//! fine-tuning.

mod config;

pub use config::{decay_lr, LearningRates, Preset, StageConfig, TrainConfig, TrainRun, NEVER};

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamState, Graph, ParamStore, Shape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::imaging::{extract_patches, load_image, DatasetManifest, Image, PatchSpec, Split};
use crate::losses::{
    adversarial_generator_loss, discriminator_loss, pyramid_loss, pyramid_targets, reconstruction_loss,
    LossBreakdown,
};
use crate::model::{Checkpoint, Corrector, CorrectorOutput, Discriminator};
use crate::pyramid::{laplacian_decompose, ScaleVector};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const FINAL_FILE: &str = "final.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";

const DISC_SEED_SALT: u64 = 0xd15c_0000;

/// Which networks a step updates and with which objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StepMode {
    /// Generator on reconstruction and pyramid terms.
    GenOnly,
    /// Generator with the adversarial term added.
    Gen,
    /// Discriminator only.
    Disc,
}

/// Aligned input/target patches plus identifiers for diagnostics.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub inputs: Vec<Image>,
    pub targets: Vec<Image>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Result of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub losses: LossBreakdown,
    /// Discriminator objective, for `Disc` steps.
    pub l_dsc: Option<f64>,
    /// Forward outputs of the generator (unclamped), for generator steps.
    pub outputs: Vec<Image>,
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: usize,
    pub epoch: usize,
    pub l_rec: f64,
    pub l_pyr: f64,
    pub l_adv: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_dsc: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub steps: u64,
    pub patches: usize,
    /// PSNR of clamped forward outputs over all patches of the epoch.
    pub train_psnr: f64,
    /// PSNR of the unprocessed inputs over the same patches.
    pub input_psnr: f64,
    pub lr_main: f64,
    pub lr_disc: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Resumable position in the schedule, stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Progress {
    config: TrainConfig,
    /// Next stage and epoch to run.
    stage: usize,
    epoch: usize,
    step: u64,
    stage_steps: u64,
    gen_t: u64,
    disc_t: u64,
}

/// Destinations for logs and checkpoints during [`Trainer::train`].
#[derive(Default)]
pub struct RunOutputs<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<PathBuf>,
}

fn mix(seed: u64, parts: &[u64]) -> u64 {
    // splitmix64 over the seed and each part
    let mut x = seed;
    for &p in parts {
        x ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x = z ^ (z >> 31);
    }
    x
}

fn stack(images: &[&Image]) -> Result<Tensor<f32>> {
    Tensor::from_images(images)
}

fn mse_sum(a: &Image, b: &Image) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum()
}

fn psnr_from(sse: f64, count: usize) -> f64 {
    if sse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (count as f64 / sse).log10()
    }
}

/// Owns both networks, their optimizers and the schedule position.
pub struct Trainer {
    config: TrainConfig,
    generator: Corrector<f32>,
    discriminator: Discriminator<f32>,
    gen_state: AdamState<f32>,
    disc_state: AdamState<f32>,
    lr: LearningRates,
    stage: usize,
    epoch: usize,
    step: u64,
    stage_steps: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Corrector::new(config.model.clone(), config.seed)?;
        let discriminator = Discriminator::new(config.discriminator.clone(), config.seed ^ DISC_SEED_SALT)?;
        let lr = LearningRates::initial(&config.stages[0]);
        Ok(Self {
            config,
            generator,
            discriminator,
            gen_state: AdamState::default(),
            disc_state: AdamState::default(),
            lr,
            stage: 0,
            epoch: 0,
            step: 0,
            stage_steps: 0,
        })
    }

    /// Restores networks, optimizer moments and schedule position. The
    /// checkpoint must have been written by a run with the same config.
    pub fn resume(config: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let progress: Progress = ck
            .training
            .clone()
            .ok_or_else(|| Error::Config("checkpoint carries no training state".into()))
            .and_then(|v| serde_json::from_value(v).map_err(Error::from))?;
        if progress.config != config {
            return Err(Error::Config("resume config differs from the checkpointed run".into()));
        }
        let mut t = Self::new(config)?;
        t.generator.load_tensors(&ck.tensors)?;
        t.discriminator.load_tensors(&ck.tensors)?;
        t.gen_state = load_moments(ck, "gen", t.generator.params(), progress.gen_t)?;
        t.disc_state = load_moments(ck, "disc", t.discriminator.params(), progress.disc_t)?;
        t.stage = progress.stage;
        t.epoch = progress.epoch;
        t.step = progress.step;
        t.stage_steps = progress.stage_steps;
        if let Some(stage) = t.config.stages.get(t.stage) {
            t.lr = LearningRates::at_epoch(stage, t.epoch.saturating_sub(1));
        }
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &Corrector<f32> {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator<f32> {
        &self.discriminator
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rates(&self) -> LearningRates {
        self.lr
    }

    pub fn is_finished(&self) -> bool {
        self.stage >= self.config.stages.len()
    }

    fn progress(&self) -> Progress {
        Progress {
            config: self.config.clone(),
            stage: self.stage,
            epoch: self.epoch,
            step: self.step,
            stage_steps: self.stage_steps,
            gen_t: self.gen_state.t,
            disc_t: self.disc_state.t,
        }
    }

    /// Networks, optimizer moments and schedule position.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = self.generator.named_tensors();
        tensors.extend(self.discriminator.named_tensors());
        push_moments(&mut tensors, "gen", self.generator.params(), &self.gen_state);
        push_moments(&mut tensors, "disc", self.discriminator.params(), &self.disc_state);
        Ok(Checkpoint {
            model: self.config.model.clone(),
            discriminator: Some(self.config.discriminator.clone()),
            training: Some(serde_json::to_value(self.progress())?),
            tensors,
        })
    }

    fn generator_graph(
        &self,
        g: &mut Graph<f32>,
        batch: &Batch,
        trainable: bool,
    ) -> Result<(Vec<Var>, CorrectorOutput, Var, Vec<Var>)> {
        let n = self.config.model.n;
        let pyramids = batch
            .inputs
            .iter()
            .map(|img| laplacian_decompose(img, n))
            .collect::<Result<Vec<_>>>()?;
        let gvars = self.generator.params().bind(g, trainable);
        let mut levels = Vec::with_capacity(n);
        for l in 1..=n {
            let imgs: Vec<&Image> = pyramids.iter().map(|p| p.level(l)).collect();
            levels.push(g.input(stack(&imgs)?));
        }
        let out = self.generator.forward(g, &gvars, &levels, &ScaleVector::ones(n))?;
        let target = g.input(stack(&batch.targets.iter().collect::<Vec<_>>())?);
        let per_image = batch
            .targets
            .iter()
            .map(|t| pyramid_targets(t, n))
            .collect::<Result<Vec<_>>>()?;
        let mut pyr_targets = Vec::with_capacity(n.saturating_sub(1));
        for i in 0..n - 1 {
            let imgs: Vec<&Image> = per_image.iter().map(|v| &v[i]).collect();
            pyr_targets.push(g.input(stack(&imgs)?));
        }
        Ok((gvars, out, target, pyr_targets))
    }

    fn to_disc_size(&self, g: &mut Graph<f32>, x: Var) -> Result<Var> {
        let s = self.config.discriminator.input_size;
        let shape = g.shape(x);
        if (shape.h, shape.w) == (s, s) {
            Ok(x)
        } else {
            g.resize_bilinear(x, s, s)
        }
    }

    fn non_finite(&self, batch: &Batch) -> Error {
        Error::NonFiniteLoss {
            step: self.step,
            batch: batch.ids.clone(),
        }
    }

    /// One optimizer update of the generator (`GenOnly`/`Gen`) or the
    /// discriminator (`Disc`).
    pub fn training_step(&mut self, batch: &Batch, mode: StepMode) -> Result<StepReport> {
        if batch.is_empty() || batch.inputs.len() != batch.len() || batch.targets.len() != batch.len() {
            return Err(invalid("malformed training batch"));
        }
        match mode {
            StepMode::Disc => self.disc_step(batch),
            _ => self.gen_step(batch, mode == StepMode::Gen),
        }
    }

    fn gen_step(&mut self, batch: &Batch, adversarial: bool) -> Result<StepReport> {
        let mut g = Graph::new();
        let (gvars, out, target, pyr_targets) = self.generator_graph(&mut g, batch, true)?;
        let rec = reconstruction_loss(&mut g, out.output, target)?;
        let pyr = pyramid_loss(&mut g, &out.intermediates, &pyr_targets)?;
        let adv = if adversarial {
            let dvars = self.discriminator.params().bind(&mut g, false);
            let resized = self.to_disc_size(&mut g, out.output)?;
            let logits = self.discriminator.forward(&mut g, &dvars, resized)?;
            let s = g.shape(out.output);
            Some(adversarial_generator_loss(
                &mut g,
                logits,
                s.h,
                s.w,
                self.config.model.n,
                self.config.adv_multiplier,
            ))
        } else {
            None
        };
        let value = |g: &Graph<f32>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).value() as f64);
        let losses = LossBreakdown::new(value(&g, Some(rec)), value(&g, pyr), value(&g, adv));
        if !losses.is_finite() {
            return Err(self.non_finite(batch));
        }
        let mut total = rec;
        if self.config.pyramid_loss {
            if let Some(p) = pyr {
                total = g.add(total, p)?;
            }
        }
        if let Some(a) = adv {
            total = g.add(total, a)?;
        }
        let mut grads = g.backward(total)?;
        let params = self.generator.params_mut();
        params.store_grads(&gvars, &mut grads);
        if !grads_finite(params) {
            return Err(self.non_finite(batch));
        }
        Adam::new(self.lr.main).step(self.generator.params_mut(), &mut self.gen_state)?;
        let v = g.value(out.output);
        let outputs = (0..v.shape().n).map(|i| v.to_image(i)).collect::<Result<_>>()?;
        Ok(StepReport {
            losses,
            l_dsc: None,
            outputs,
        })
    }

    fn disc_step(&mut self, batch: &Batch) -> Result<StepReport> {
        // generator output as a constant
        let fake = {
            let mut g = Graph::new();
            let (_, out, _, _) = self.generator_graph(&mut g, batch, false)?;
            g.value(out.output).clone()
        };
        let mut g = Graph::new();
        let dvars = self.discriminator.params().bind(&mut g, true);
        let real = g.input(stack(&batch.targets.iter().collect::<Vec<_>>())?);
        let fake = g.input(fake);
        let real = self.to_disc_size(&mut g, real)?;
        let fake = self.to_disc_size(&mut g, fake)?;
        let real_logits = self.discriminator.forward(&mut g, &dvars, real)?;
        let fake_logits = self.discriminator.forward(&mut g, &dvars, fake)?;
        let loss = discriminator_loss(&mut g, real_logits, fake_logits)?;
        let l_dsc = g.value(loss).value() as f64;
        if !l_dsc.is_finite() {
            return Err(self.non_finite(batch));
        }
        let mut grads = g.backward(loss)?;
        let params = self.discriminator.params_mut();
        params.store_grads(&dvars, &mut grads);
        if !grads_finite(params) {
            return Err(self.non_finite(batch));
        }
        Adam::new(self.lr.disc).step(self.discriminator.params_mut(), &mut self.disc_state)?;
        Ok(StepReport {
            losses: LossBreakdown::default(),
            l_dsc: Some(l_dsc),
            outputs: Vec::new(),
        })
    }

    fn check_data(&self, pairs: &[(Image, Image)]) -> Result<()> {
        if pairs.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        for (i, (a, b)) in pairs.iter().enumerate() {
            if a.dims() != b.dims() {
                return Err(Error::Config(format!("training pair {i} has mismatched input/target sizes")));
            }
        }
        for (si, stage) in self.config.stages.iter().enumerate().skip(self.stage) {
            let p = stage.patch_size;
            if !pairs.iter().any(|(a, _)| a.height() >= p && a.width() >= p) {
                return Err(Error::Config(format!(
                    "stage {si}: no training image is at least {p}x{p}"
                )));
            }
        }
        Ok(())
    }

    fn epoch_batches(&self, pairs: &[(Image, Image)], stage: &StageConfig) -> Result<Vec<Batch>> {
        let spec = PatchSpec::standard(stage.patch_size);
        let seed = self.config.seed;
        let mut patches = Vec::new();
        for (i, (a, b)) in pairs.iter().enumerate() {
            let s = mix(seed, &[self.stage as u64, self.epoch as u64, i as u64]);
            for (j, (pa, pb)) in extract_patches((a, b), &spec, s)?.into_iter().enumerate() {
                patches.push((format!("pair{i}/patch{j}"), pa, pb));
            }
        }
        if patches.is_empty() {
            return Err(Error::Config(format!(
                "stage {}: no {}x{} patch passes the exposure and texture filters",
                self.stage, stage.patch_size, stage.patch_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, &[self.stage as u64, self.epoch as u64, u64::MAX]));
        patches.shuffle(&mut rng);
        Ok(patches
            .chunks(stage.batch_size)
            .map(|chunk| Batch {
                ids: chunk.iter().map(|p| p.0.clone()).collect(),
                inputs: chunk.iter().map(|p| p.1.clone()).collect(),
                targets: chunk.iter().map(|p| p.2.clone()).collect(),
            })
            .collect())
    }

    /// Runs the remaining schedule on in-memory `(input, target)` pairs.
    pub fn train(&mut self, pairs: &[(Image, Image)], out: &mut RunOutputs) -> Result<TrainSummary> {
        self.check_data(pairs)?;
        if let Some(dir) = &out.checkpoint_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut summary = TrainSummary::default();
        while self.stage < self.config.stages.len() {
            let stage = self.config.stages[self.stage].clone();
            if self.epoch == 0 {
                self.lr = LearningRates::initial(&stage);
            }
            let capped = |t: &Self| stage.max_steps.is_some_and(|m| t.stage_steps >= m);
            while self.epoch < stage.epochs && !capped(self) {
                decay_lr(&mut self.lr, self.epoch, &stage);
                let record = self.run_epoch(pairs, &stage, &mut summary, out)?;
                info!(
                    "stage {} epoch {}: train psnr {:.2} dB (input {:.2} dB)",
                    record.stage, record.epoch, record.train_psnr, record.input_psnr
                );
                if let Some(log) = out.log.as_deref_mut() {
                    writeln!(log, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io("training log", e))?;
                }
                summary.epochs.push(record);
                self.epoch += 1;
                if let Some(dir) = &out.checkpoint_dir {
                    self.checkpoint()?.save(dir.join(CHECKPOINT_FILE))?;
                }
            }
            self.stage += 1;
            self.epoch = 0;
            self.stage_steps = 0;
        }
        if let Some(dir) = &out.checkpoint_dir {
            self.checkpoint()?.save(dir.join(FINAL_FILE))?;
        }
        Ok(summary)
    }

    fn run_epoch(
        &mut self,
        pairs: &[(Image, Image)],
        stage: &StageConfig,
        summary: &mut TrainSummary,
        out: &mut RunOutputs,
    ) -> Result<EpochRecord> {
        let batches = self.epoch_batches(pairs, stage)?;
        let adversarial = stage.is_adversarial(self.epoch);
        let (mut sse_out, mut sse_in, mut count, mut patches) = (0.0, 0.0, 0usize, 0usize);
        let start = self.step;
        for batch in &batches {
            if stage.max_steps.is_some_and(|m| self.stage_steps >= m) {
                break;
            }
            let l_dsc = if adversarial {
                self.training_step(batch, StepMode::Disc)?.l_dsc
            } else {
                None
            };
            let mode = if adversarial { StepMode::Gen } else { StepMode::GenOnly };
            let report = self.training_step(batch, mode)?;
            for ((y, x), t) in report.outputs.iter().zip(&batch.inputs).zip(&batch.targets) {
                sse_out += mse_sum(&y.clamp01(), t);
                sse_in += mse_sum(x, t);
                count += t.data().len();
                patches += 1;
            }
            self.step += 1;
            self.stage_steps += 1;
            let record = StepRecord {
                step: self.step,
                stage: self.stage,
                epoch: self.epoch,
                l_rec: report.losses.l_rec,
                l_pyr: report.losses.l_pyr,
                l_adv: report.losses.l_adv,
                l_dsc,
                lr: self.lr.main,
            };
            if let Some(log) = out.log.as_deref_mut() {
                writeln!(log, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io("training log", e))?;
            }
            summary.steps.push(record);
        }
        Ok(EpochRecord {
            stage: self.stage,
            epoch: self.epoch,
            steps: self.step - start,
            patches,
            train_psnr: psnr_from(sse_out, count.max(1)),
            input_psnr: psnr_from(sse_in, count.max(1)),
            lr_main: self.lr.main,
            lr_disc: self.lr.disc,
        })
    }
}

fn grads_finite(params: &ParamStore<f32>) -> bool {
    params.iter().all(|p| p.grad.as_ref().is_none_or(|g| g.all_finite()))
}

fn push_moments(out: &mut Vec<(String, Tensor<f32>)>, tag: &str, params: &ParamStore<f32>, state: &AdamState<f32>) {
    if state.m.is_empty() {
        return;
    }
    for (p, (m, v)) in params.iter().zip(state.m.iter().zip(&state.v)) {
        out.push((format!("adam.{tag}.m.{}", p.name), m.clone()));
        out.push((format!("adam.{tag}.v.{}", p.name), v.clone()));
    }
}

fn load_moments(ck: &Checkpoint, tag: &str, params: &ParamStore<f32>, t: u64) -> Result<AdamState<f32>> {
    if t == 0 {
        return Ok(AdamState::default());
    }
    let get = |kind: &str, name: &str, shape: Shape| -> Result<Tensor<f32>> {
        let key = format!("adam.{tag}.{kind}.{name}");
        let tensor = ck
            .tensor(&key)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer tensor {key}")))?;
        if tensor.shape() != shape {
            return Err(Error::Config(format!("optimizer tensor {key} has wrong shape")));
        }
        Ok(tensor.clone())
    };
    let mut state = AdamState {
        t,
        m: Vec::new(),
        v: Vec::new(),
    };
    for p in params.iter() {
        state.m.push(get("m", &p.name, p.value.shape())?);
        state.v.push(get("v", &p.name, p.value.shape())?);
    }
    Ok(state)
}

/// Loads the train split of a manifest into memory.
pub fn load_pairs(manifest: &DatasetManifest, split: Split) -> Result<Vec<(Image, Image)>> {
    manifest
        .split(split)
        .map(|e| Ok((load_image(&e.input_path)?, load_image(&e.target_path)?)))
        .collect()
}

/// File-based entry point: loads the manifest, trains, and writes the log
/// and checkpoints into the run's output directory.
pub fn train(run: &TrainRun, resume: bool) -> Result<TrainSummary> {
    let config = run.resolve()?;
    let manifest = DatasetManifest::load(&run.manifest)?;
    if manifest.split(Split::Train).next().is_none() {
        return Err(Error::Config(format!("{} has no train entries", run.manifest.display())));
    }
    let out_dir = &run.output_dir;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    let mut trainer = if resume && ck_path.exists() {
        Trainer::resume(config, &Checkpoint::load(&ck_path)?)?
    } else {
        Trainer::new(config)?
    };
    let pairs = load_pairs(&manifest, Split::Train)?;
    let log_path = out_dir.join(LOG_FILE);
    let file = open_log(&log_path, resume)?;
    let mut writer = BufWriter::new(file);
    let summary = trainer.train(
        &pairs,
        &mut RunOutputs {
            log: Some(&mut writer),
            checkpoint_dir: Some(out_dir.clone()),
        },
    )?;
    writer.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(summary)
}

fn open_log(path: &Path, append: bool) -> Result<File> {
    let mut opts = OpenOptions::new();
    opts.create(true);
    if append {
        opts.append(true);
    } else {
        opts.write(true).truncate(true);
    }
    opts.open(path).map_err(|e| Error::io(path, e))
}
