//! Trained generators loaded back from checkpoints for inference.

use std::path::{Path, PathBuf};

use facesr_tensor::{Tape, Tensor};

use crate::config::RunConfig;
use crate::error::{config_err, data_err, Error, Result};
use crate::nets::{fingerprint, generator_forward, Bound, ForwardMode, Layout, Phase, Role, CODE_VERSION};
use crate::params::{sha256_hex, ModelParams};
use crate::synth::Sample;
use crate::train::{modes, read_checkpoint_state, GENERATOR_FILE, STATE_FILE};

/// Generator outputs for one sample, batch axis removed.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[3, hr, hr]`
    pub fine: Tensor<f32>,
    pub coarse: Option<Tensor<f32>>,
    /// `[K, hr/2, hr/2]`
    pub heatmaps: Option<Tensor<f32>>,
    /// `[P, hr/2, hr/2]`
    pub parsing: Option<Tensor<f32>>,
}

impl Prediction {
    /// Every present output in a fixed order, for transforms that treat
    /// them uniformly.
    pub fn tensors(&self) -> Vec<&Tensor<f32>> {
        let mut v = vec![&self.fine];
        v.extend(self.coarse.iter());
        v.extend(self.heatmaps.iter());
        v.extend(self.parsing.iter());
        v
    }

    /// Rebuild from `tensors()` output, using `like` for which fields exist.
    pub fn from_tensors(like: &Prediction, mut t: Vec<Tensor<f32>>) -> Prediction {
        t.reverse();
        let fine = t.pop().expect("fine output");
        let mut take = |present: bool| if present { t.pop() } else { None };
        Prediction {
            fine,
            coarse: take(like.coarse.is_some()),
            heatmaps: take(like.heatmaps.is_some()),
            parsing: take(like.parsing.is_some()),
        }
    }
}

/// A generator checkpoint with the configuration it was trained under.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub path: PathBuf,
    pub run: RunConfig,
    pub mode: String,
    pub layout: Layout,
    pub params: ModelParams<f32>,
    /// SHA-256 of the generator file.
    pub hash: String,
    pub corpus_hash: String,
}

impl Checkpoint {
    /// Load from a checkpoint directory or the `generator.fsrt` inside one.
    /// The sibling `state.json` supplies the configuration; the file's
    /// fingerprint must match it.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let (dir, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(GENERATOR_FILE))
        } else {
            let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (dir, path.to_path_buf())
        };
        if !dir.join(STATE_FILE).exists() {
            return Err(data_err!("no {STATE_FILE} next to {}", file.display()));
        }
        let state = read_checkpoint_state(&dir)?;
        if state.code_version != CODE_VERSION {
            return Err(data_err!(
                "checkpoint written by {} but this is {CODE_VERSION}",
                state.code_version
            ));
        }
        let obj = state
            .run_config
            .as_object()
            .ok_or_else(|| data_err!("{}: run_config is not an object", dir.display()))?;
        let run = RunConfig::from_flat(&obj.clone().into_iter().collect())?;
        let mode = modes::lookup(&state.mode)?;
        let layout = mode.layout();
        let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
        let params = ModelParams::from_bytes(&bytes)?;
        let expected = fingerprint(&run.net, Role::Generator(layout));
        if params.fingerprint() != expected {
            return Err(data_err!(
                "{}: fingerprint {:016x} does not match its configuration ({expected:016x})",
                file.display(),
                params.fingerprint()
            ));
        }
        Ok(Checkpoint {
            path: file,
            mode: state.mode,
            layout,
            params,
            hash: sha256_hex(&bytes),
            corpus_hash: state.corpus_hash,
            run,
        })
    }

    /// Whether the decoder is fed ground-truth maps instead of estimates.
    pub fn needs_gt_prior(&self) -> bool {
        self.layout == Layout::GtPrior
    }

    /// Single inference pass on a bicubic-upscaled input `[3, hr, hr]`.
    /// `gt_prior` is the ground-truth prior stack, used only by models that
    /// consume it.
    pub fn predict(&self, x: &Tensor<f32>, gt_prior: Option<&Tensor<f32>>) -> Result<Prediction> {
        let net = &self.run.net;
        if x.shape() != [3, net.hr_size, net.hr_size] {
            return Err(config_err!(
                "input must be [3, {0}, {0}] after upscaling, got {1:?}",
                net.hr_size,
                x.shape()
            ));
        }
        let mut tape = Tape::<f32>::new();
        let mut b = Bound::new(&self.params, false, Phase::Eval, net.bn_eps);
        let xv = tape.constant(x.clone().reshape(vec![1, 3, net.hr_size, net.hr_size])?);
        let mode = if self.needs_gt_prior() {
            let p = gt_prior.ok_or_else(|| config_err!("this model needs ground-truth prior maps"))?;
            let mut shape = vec![1];
            shape.extend_from_slice(p.shape());
            ForwardMode::GtPrior(tape.constant(p.clone().reshape(shape)?))
        } else {
            ForwardMode::Full
        };
        let out = generator_forward(&mut tape, &mut b, net, self.layout, xv, mode)?;
        let unbatch = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
            let shape = t.shape()[1..].to_vec();
            Ok(t.clone().reshape(shape)?)
        };
        let last = out.prior.as_ref().map(|p| p.last());
        Ok(Prediction {
            fine: unbatch(tape.value(out.fine))?,
            coarse: Some(unbatch(tape.value(out.coarse))?),
            heatmaps: last.and_then(|s| s.heatmaps).map(|v| unbatch(tape.value(v))).transpose()?,
            parsing: last.and_then(|s| s.parsing).map(|v| unbatch(tape.value(v))).transpose()?,
        })
    }

    pub fn predict_sample(&self, s: &Sample) -> Result<Prediction> {
        let gt = if self.needs_gt_prior() {
            Some(s.prior_target(self.run.net.priors)?)
        } else {
            None
        };
        self.predict(&s.lr_up, gt.as_ref())
    }
}
