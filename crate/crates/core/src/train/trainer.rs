//! The training loop, its checkpoints and its log.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use facesr_tensor::{BnStats, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::loss::{self, LOSS_NORMALIZATION};
use super::modes::{self, TrainingMode};
use super::optim::RmsProp;
use crate::config::RunConfig;
use crate::error::{config_err, data_err, Error, Result};
use crate::nets::{
    discriminator_forward, fingerprint, generator_forward, init_discriminator, init_generator, init_perceptual, Bound,
    Phase, Role, CODE_VERSION,
};
use crate::params::ModelParams;
use crate::synth::{Dihedral, Sample};

pub const GENERATOR_FILE: &str = "generator.fsrt";
pub const DISCRIMINATOR_FILE: &str = "discriminator.fsrt";
pub const OPTIMIZER_FILE: &str = "optimizer.fsrt";
pub const STATE_FILE: &str = "state.json";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Seed offset separating discriminator initialization from the generator's.
const DISC_SEED_OFFSET: u64 = 0x5eed_d15c;
const BN_REFRESH_SEED: u64 = 0xb0_5eed;

/// Stack `[C, H, W]` tensors into `[N, C, H, W]`.
pub fn batch_tensors(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = items.first().ok_or_else(|| config_err!("empty batch"))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(config_err!("batch items differ in shape: {:?} vs {:?}", t.shape(), first.shape()));
        }
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(shape, data)?)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_coarse: f64,
    pub loss_fine: f64,
    pub loss_prior: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_adv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_perc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_disc: Option<f64>,
    /// Fraction of patches the discriminator classifies correctly.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub disc_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Steps completed.
    pub step: u64,
    pub generator: ModelParams<f32>,
    pub discriminator: Option<ModelParams<f32>>,
    pub g_opt: RmsProp,
    pub d_opt: Option<RmsProp>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointState {
    pub step: u64,
    pub mode: String,
    pub code_version: String,
    pub corpus_hash: String,
    pub generator_fingerprint: String,
    pub loss_normalization: String,
    pub run_config: Value,
}

pub struct Trainer {
    pub run: RunConfig,
    mode: Box<dyn TrainingMode>,
    samples: Vec<Sample>,
    corpus_hash: String,
    phi: Option<ModelParams<f32>>,
    pub state: TrainState,
    permutation: Option<(u64, Vec<usize>)>,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn update_stats(params: &mut ModelParams<f32>, stats: &[(String, BnStats<f32>)], momentum: f64) -> Result<()> {
    for (prefix, s) in stats {
        params.update_running_stats(prefix, s, momentum)?;
    }
    Ok(())
}

fn scalar(tape: &Tape<f32>, v: Var) -> f64 {
    tape.value(v).data()[0] as f64
}

impl Trainer {
    /// Fresh training state for `run` over `samples` (the training split).
    pub fn new(run: RunConfig, samples: Vec<Sample>, corpus_hash: String) -> Result<Self> {
        run.validate()?;
        let mode = modes::lookup(&run.train.mode)?;
        let net = &run.net;
        if samples.is_empty() {
            return Err(data_err!("training split is empty"));
        }
        let side = net.prior_spatial();
        for s in &samples {
            if s.hr.shape() != [3, net.hr_size, net.hr_size]
                || s.heatmaps.shape() != [net.num_landmarks, side, side]
                || s.parsing.shape() != [net.num_parsing_maps, side, side]
            {
                return Err(data_err!(
                    "sample {} does not match the network configuration (hr {:?}, heatmaps {:?}, parsing {:?})",
                    s.id,
                    s.hr.shape(),
                    s.heatmaps.shape(),
                    s.parsing.shape()
                ));
            }
        }
        let layout = mode.layout();
        let generator = match &run.train.warm_start {
            Some(path) => {
                let mut path = PathBuf::from(path);
                if path.is_dir() {
                    path.push(GENERATOR_FILE);
                }
                ModelParams::load_expecting(&path, fingerprint(net, Role::Generator(layout)))?
            }
            None => init_generator(net, layout, run.train.seed)?,
        };
        let (discriminator, d_opt, phi) = if mode.adversarial() {
            (
                Some(init_discriminator(net, run.train.seed.wrapping_add(DISC_SEED_OFFSET))?),
                Some(RmsProp::new(run.train.rmsprop_decay, run.train.rmsprop_eps)?),
                Some(init_perceptual(net, run.train.perceptual_seed)?),
            )
        } else {
            (None, None, None)
        };
        let g_opt = RmsProp::new(run.train.rmsprop_decay, run.train.rmsprop_eps)?;
        Ok(Trainer {
            run,
            mode,
            samples,
            corpus_hash,
            phi,
            state: TrainState {
                step: 0,
                generator,
                discriminator,
                g_opt,
                d_opt,
            },
            permutation: None,
        })
    }

    pub fn mode(&self) -> &dyn TrainingMode {
        self.mode.as_ref()
    }

    fn epoch_permutation(&mut self, epoch: u64) -> &[usize] {
        if self.permutation.as_ref().map(|p| p.0) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.run.train.seed ^ 0x9e37_79b9_7f4a_7c15);
            rng.set_stream(epoch);
            let mut perm: Vec<usize> = (0..self.samples.len()).collect();
            perm.shuffle(&mut rng);
            self.permutation = Some((epoch, perm));
        }
        &self.permutation.as_ref().expect("set above").1
    }

    /// Sample indices of a (1-based) step. Batches run through seeded
    /// per-epoch permutations and may straddle epochs.
    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let b = self.run.train.batch_size as u64;
        let n = self.samples.len() as u64;
        ((step - 1) * b..step * b)
            .map(|i| self.epoch_permutation(i / n)[(i % n) as usize])
            .collect()
    }

    fn assemble(&mut self, step: u64) -> Result<Vec<Sample>> {
        let indices = self.batch_indices(step);
        let mut rng = step_rng(self.run.train.seed, step);
        indices
            .into_iter()
            .map(|i| {
                if self.run.train.augment {
                    self.samples[i].augment(Dihedral::ALL[rng.gen_range(0..8)])
                } else {
                    Ok(self.samples[i].clone())
                }
            })
            .collect()
    }

    /// Upscaled inputs, targets and (when the mode uses them) prior targets.
    fn batch_inputs(&self, batch: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>, Option<Tensor<f32>>)> {
        let x = batch_tensors(&batch.iter().map(|s| &s.lr_up).collect::<Vec<_>>())?;
        let hr = batch_tensors(&batch.iter().map(|s| &s.hr).collect::<Vec<_>>())?;
        let needs_prior = self.mode.layout().has_prior_net() || self.mode.feeds_gt_prior();
        let prior_target = if needs_prior {
            let stacks = batch
                .iter()
                .map(|s| s.prior_target(self.run.net.priors))
                .collect::<Result<Vec<_>>>()?;
            Some(batch_tensors(&stacks.iter().collect::<Vec<_>>())?)
        } else {
            None
        };
        Ok((x, hr, prior_target))
    }

    /// Replace the generator's batch-norm running statistics with an equal
    /// average over `train.bn_refresh_batches` unaugmented training batches
    /// passed through the current weights. The momentum averages kept during
    /// training mix in statistics of older weights.
    pub fn refresh_bn_stats(&mut self) -> Result<()> {
        let n = self.run.train.bn_refresh_batches;
        if n == 0 || self.run.train.freeze_generator {
            return Ok(());
        }
        let net = self.run.net.clone();
        let b = self.run.train.batch_size;
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut step_rng(self.run.train.seed ^ BN_REFRESH_SEED, 0));
        for k in 0..n {
            let batch: Vec<&Sample> = (0..b).map(|j| &self.samples[order[(k * b + j) % order.len()]]).collect();
            let (x, _, prior_target) = self.batch_inputs(&batch)?;
            let mut tape = Tape::<f32>::new();
            let mut gb = Bound::new(&self.state.generator, false, Phase::Train, net.bn_eps);
            let xv = tape.constant(x);
            let pv = prior_target.map(|p| tape.constant(p));
            let fwd = self.mode.forward_mode(pv)?;
            generator_forward(&mut tape, &mut gb, &net, self.mode.layout(), xv, fwd)?;
            let stats = gb.take_stats();
            drop(gb);
            update_stats(&mut self.state.generator, &stats, k as f64 / (k + 1) as f64)?;
        }
        Ok(())
    }

    /// Run one optimization step and return its log record.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.state.step + 1;
        let batch = self.assemble(step)?;
        let net = self.run.net.clone();
        let tc = self.run.train.clone();
        let (x, hr, prior_target) = self.batch_inputs(&batch.iter().collect::<Vec<_>>())?;

        let mut tape = Tape::<f32>::new();
        let train_g = !tc.freeze_generator;
        let mut gb = Bound::new(&self.state.generator, train_g, Phase::Train, net.bn_eps);
        let xv = tape.constant(x.clone());
        let hv = tape.constant(hr.clone());
        let pv = prior_target.map(|p| tape.constant(p));
        let fwd = self.mode.forward_mode(pv)?;
        let out = generator_forward(&mut tape, &mut gb, &net, self.mode.layout(), xv, fwd)?;
        let supervised = if out.prior.is_some() { pv } else { None };
        let lambda = self.mode.prior_weight(tc.lambda_prior);
        let terms = loss::fsrnet_loss(&mut tape, out.coarse, out.fine, out.prior.as_ref(), hv, supervised, lambda)?;
        let mut record = StepRecord {
            step,
            loss_total: 0.0,
            loss_coarse: scalar(&tape, terms.coarse),
            loss_fine: scalar(&tape, terms.fine),
            loss_prior: terms.prior.map(|v| scalar(&tape, v)),
            loss_adv: None,
            loss_perc: None,
            loss_disc: None,
            disc_accuracy: None,
        };
        let mut total = terms.total;

        if self.mode.adversarial() {
            let fake = tape.value(out.fine).clone();
            let disc = self.state.discriminator.as_mut().expect("adversarial modes own a discriminator");
            let d_opt = self.state.d_opt.as_mut().expect("adversarial modes own a discriminator optimizer");

            // Discriminator update on a detached generator output.
            let mut dt = Tape::<f32>::new();
            let (d_grads, d_stats, d_loss, acc) = {
                let mut db = Bound::new(disc, true, Phase::Train, net.bn_eps);
                let real = dt.constant(hr.clone());
                let fake = dt.constant(fake);
                let xd = dt.constant(x.clone());
                let c_real = discriminator_forward(&mut dt, &mut db, &net, real, xd)?;
                let c_fake = discriminator_forward(&mut dt, &mut db, &net, fake, xd)?;
                let d_loss = loss::discriminator_loss(&mut dt, c_real, c_fake)?;
                let correct_real = dt.value(c_real).data().iter().filter(|&&p| p > 0.5).count();
                let correct_fake = dt.value(c_fake).data().iter().filter(|&&p| p < 0.5).count();
                let n = dt.value(c_real).numel() as f64;
                let acc = (correct_real + correct_fake) as f64 / (2.0 * n);
                dt.backward(d_loss)?;
                (db.grads(&dt), db.take_stats(), scalar(&dt, d_loss), acc)
            };
            if !d_loss.is_finite() {
                return Err(Error::Numerical(format!("discriminator loss is not finite at step {step}")));
            }
            d_opt.step(disc, &d_grads, tc.learning_rate)?;
            update_stats(disc, &d_stats, net.bn_momentum)?;
            record.loss_disc = Some(d_loss);
            record.disc_accuracy = Some(acc);

            // Generator terms against the updated, now fixed, discriminator.
            let mut db = Bound::new(&*disc, false, Phase::Train, net.bn_eps).without_stats();
            let c_fake = discriminator_forward(&mut tape, &mut db, &net, out.fine, xv)?;
            let adv = loss::generator_adversarial_loss(&mut tape, c_fake, tc.saturating_gan)?;
            let phi = self.phi.as_ref().expect("adversarial modes own a perceptual extractor");
            let mut pb = Bound::new(phi, false, Phase::Eval, net.bn_eps);
            let perc = loss::perceptual_loss(&mut tape, &mut pb, out.fine, hv)?;
            record.loss_adv = Some(scalar(&tape, adv));
            record.loss_perc = Some(scalar(&tape, perc));
            let adv_w = tape.scale(adv, tc.gamma_c);
            let perc_w = tape.scale(perc, tc.gamma_p);
            total = tape.add(total, adv_w)?;
            total = tape.add(total, perc_w)?;
        }

        record.loss_total = scalar(&tape, total);
        if !record.loss_total.is_finite() {
            return Err(Error::Numerical(format!("training loss is not finite at step {step}")));
        }
        if train_g {
            tape.backward(total)?;
            let grads = gb.grads(&tape);
            let stats = gb.take_stats();
            drop(gb);
            self.state.g_opt.step(&mut self.state.generator, &grads, tc.learning_rate)?;
            update_stats(&mut self.state.generator, &stats, net.bn_momentum)?;
        }
        self.state.step = step;
        Ok(record)
    }

    pub fn checkpoint_state(&self) -> CheckpointState {
        CheckpointState {
            step: self.state.step,
            mode: self.mode.name().to_string(),
            code_version: CODE_VERSION.to_string(),
            corpus_hash: self.corpus_hash.clone(),
            generator_fingerprint: format!("{:016x}", self.state.generator.fingerprint()),
            loss_normalization: LOSS_NORMALIZATION.to_string(),
            run_config: self.run.to_flat_value(),
        }
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.state.generator.save(&dir.join(GENERATOR_FILE))?;
        if let Some(d) = &self.state.discriminator {
            d.save(&dir.join(DISCRIMINATOR_FILE))?;
        }
        let mut opt = ModelParams::new(self.state.generator.fingerprint());
        for (prefix, o) in [("generator/", Some(&self.state.g_opt)), ("discriminator/", self.state.d_opt.as_ref())] {
            if let Some(o) = o {
                for (name, t) in &o.accumulators {
                    opt.insert(format!("{prefix}{name}"), t.clone())?;
                }
            }
        }
        opt.save(&dir.join(OPTIMIZER_FILE))?;
        let mut json = serde_json::to_vec_pretty(&self.checkpoint_state())?;
        json.push(b'\n');
        let path = dir.join(STATE_FILE);
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Restore a checkpoint written by a run with the same configuration
    /// (the step budget and checkpoint interval may differ) and corpus.
    pub fn restore(&mut self, dir: &Path) -> Result<()> {
        let state = read_checkpoint_state(dir)?;
        if state.corpus_hash != self.corpus_hash {
            return Err(data_err!("checkpoint was trained on a different corpus"));
        }
        let comparable = |v: &Value| -> Value {
            let mut m = v.as_object().cloned().unwrap_or_default();
            for k in ["train.max_steps", "train.checkpoint_every", "out_dir"] {
                m.remove(k);
            }
            Value::Object(m)
        };
        if comparable(&state.run_config) != comparable(&self.run.to_flat_value()) {
            return Err(config_err!("checkpoint configuration differs from the requested run"));
        }
        let g_fp = self.state.generator.fingerprint();
        self.state.generator = ModelParams::load_expecting(&dir.join(GENERATOR_FILE), g_fp)?;
        if let Some(d) = &self.state.discriminator {
            let fp = d.fingerprint();
            self.state.discriminator = Some(ModelParams::load_expecting(&dir.join(DISCRIMINATOR_FILE), fp)?);
        }
        let opt = ModelParams::load_expecting(&dir.join(OPTIMIZER_FILE), g_fp)?;
        let mut g_acc = BTreeMap::new();
        let mut d_acc = BTreeMap::new();
        for (name, t) in opt.iter() {
            if let Some(n) = name.strip_prefix("generator/") {
                g_acc.insert(n.to_string(), t.clone());
            } else if let Some(n) = name.strip_prefix("discriminator/") {
                d_acc.insert(n.to_string(), t.clone());
            }
        }
        self.state.g_opt.accumulators = g_acc;
        if let Some(o) = self.state.d_opt.as_mut() {
            o.accumulators = d_acc;
        }
        self.state.step = state.step;
        Ok(())
    }
}

pub fn read_checkpoint_state(dir: &Path) -> Result<CheckpointState> {
    let path = dir.join(STATE_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| data_err!("{}: {e}", path.display()))
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub first: Option<StepRecord>,
    pub last: Option<StepRecord>,
    pub final_checkpoint: PathBuf,
}

/// Header line of the training log.
fn log_header(trainer: &Trainer) -> Value {
    serde_json::json!({
        "code_version": CODE_VERSION,
        "corpus_hash": trainer.corpus_hash,
        "mode": trainer.mode.name(),
        "loss_normalization": LOSS_NORMALIZATION,
        "run_config": trainer.run.to_flat_value(),
    })
}

/// Train to `run.train.max_steps`, writing `train_log.jsonl`, periodic
/// `checkpoints/step_NNNNNN/` and `final/` under `run.out_dir`. Only the
/// final checkpoint carries refreshed batch-norm statistics.
/// With `resume`, training continues from that checkpoint and the log is
/// truncated to the checkpoint's step before appending.
pub fn run_training(
    run: RunConfig,
    samples: Vec<Sample>,
    corpus_hash: String,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainSummary> {
    let out = PathBuf::from(&run.out_dir);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut trainer = Trainer::new(run, samples, corpus_hash)?;
    let log_path = out.join(LOG_FILE);
    let mut kept = Vec::new();
    if let Some(dir) = resume {
        trainer.restore(dir)?;
        if let Ok(text) = std::fs::read_to_string(&log_path) {
            for (i, line) in text.lines().enumerate() {
                let keep = i == 0
                    || serde_json::from_str::<StepRecord>(line).map_or(false, |r| r.step <= trainer.state.step);
                if keep {
                    kept.push(line.to_string());
                }
            }
        }
    }
    if kept.is_empty() {
        kept.push(log_header(&trainer).to_string());
    }
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    for line in &kept {
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
    }
    let mut first = None;
    let mut last = None;
    let every = trainer.run.train.checkpoint_every;
    while trainer.state.step < trainer.run.train.max_steps {
        let rec = trainer.step()?;
        writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log_path, e))?;
        on_step(&rec);
        if every > 0 && rec.step % every == 0 {
            trainer.save_checkpoint(&out.join("checkpoints").join(format!("step_{:06}", rec.step)))?;
        }
        if first.is_none() {
            first = Some(rec.clone());
        }
        last = Some(rec);
    }
    trainer.refresh_bn_stats()?;
    let final_dir = out.join("final");
    trainer.save_checkpoint(&final_dir)?;
    Ok(TrainSummary {
        steps: trainer.state.step,
        first,
        last,
        final_checkpoint: final_dir,
    })
}
