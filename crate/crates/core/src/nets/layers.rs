//! Parameter binding and the small layer vocabulary the networks are built
//! from. Every layer addresses its parameters as `{prefix}.weight` etc.

use std::collections::BTreeMap;

use facesr_tensor::{BnMode, BnStats, Element, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::params::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics, running estimates recorded.
    Train,
    /// Running statistics.
    Eval,
}

/// A parameter set attached to one tape. Leaves are created on first use.
pub struct Bound<'p, T: Element> {
    params: &'p ModelParams<T>,
    trainable: bool,
    phase: Phase,
    record_stats: bool,
    bn_eps: f64,
    vars: BTreeMap<String, Var>,
    stats: Vec<(String, BnStats<T>)>,
}

impl<'p, T: Element> Bound<'p, T> {
    /// `trainable` leaves get gradients; frozen parameter sets never do.
    pub fn new(params: &'p ModelParams<T>, trainable: bool, phase: Phase, bn_eps: f64) -> Self {
        Bound {
            params,
            trainable: trainable && !params.is_frozen(),
            phase,
            record_stats: phase == Phase::Train,
            bn_eps,
            vars: BTreeMap::new(),
            stats: Vec::new(),
        }
    }

    /// Do not record batch statistics (the set is only being queried).
    pub fn without_stats(mut self) -> Self {
        self.record_stats = false;
        self
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn params(&self) -> &'p ModelParams<T> {
        self.params
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    /// Use `var` for parameter `name` instead of a fresh leaf. Lets callers
    /// differentiate with respect to externally owned tensors.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn var(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?
            .clone();
        let v = if self.trainable { tape.param(t) } else { tape.constant(t) };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter, by name.
    pub fn grads(&self, tape: &Tape<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| tape.grad(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    /// Batch statistics recorded by train-mode batch norms, in call order.
    pub fn take_stats(&mut self) -> Vec<(String, BnStats<T>)> {
        std::mem::take(&mut self.stats)
    }
}

pub fn conv<T: Element>(
    tape: &mut Tape<T>,
    b: &mut Bound<'_, T>,
    prefix: &str,
    x: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let w = b.var(tape, &format!("{prefix}.weight"))?;
    let bias_name = format!("{prefix}.bias");
    let bias = if b.has(&bias_name) { Some(b.var(tape, &bias_name)?) } else { None };
    Ok(tape.conv2d(x, w, bias, stride, padding)?)
}

pub fn deconv<T: Element>(
    tape: &mut Tape<T>,
    b: &mut Bound<'_, T>,
    prefix: &str,
    x: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let w = b.var(tape, &format!("{prefix}.weight"))?;
    let bias_name = format!("{prefix}.bias");
    let bias = if b.has(&bias_name) { Some(b.var(tape, &bias_name)?) } else { None };
    Ok(tape.deconv2d(x, w, bias, stride, padding)?)
}

pub fn batch_norm<T: Element>(tape: &mut Tape<T>, b: &mut Bound<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = b.var(tape, &format!("{prefix}.weight"))?;
    let beta = b.var(tape, &format!("{prefix}.bias"))?;
    let eps = b.bn_eps;
    match b.phase {
        Phase::Train => {
            let (y, stats) = tape.batch_norm(x, gamma, beta, BnMode::Train, eps)?;
            if b.record_stats {
                if let Some(s) = stats {
                    b.stats.push((prefix.to_string(), s));
                }
            }
            Ok(y)
        }
        Phase::Eval => {
            let params = b.params;
            let missing = |n: &str| Error::Config(format!("missing running statistic {n}"));
            let mean_name = format!("{prefix}.running_mean");
            let var_name = format!("{prefix}.running_var");
            let mean = params.get(&mean_name).ok_or_else(|| missing(&mean_name))?;
            let var = params.get(&var_name).ok_or_else(|| missing(&var_name))?;
            let mode = BnMode::Eval {
                mean: mean.data(),
                var: var.data(),
            };
            Ok(tape.batch_norm(x, gamma, beta, mode, eps)?.0)
        }
    }
}

/// Conv, batch norm, ReLU.
pub fn conv_bn_relu<T: Element>(
    tape: &mut Tape<T>,
    b: &mut Bound<'_, T>,
    prefix: &str,
    x: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let c = conv(tape, b, &format!("{prefix}.conv"), x, stride, padding)?;
    let n = batch_norm(tape, b, &format!("{prefix}.bn"), c)?;
    Ok(tape.relu(n))
}

/// `x + BN(conv(ReLU(BN(conv(x)))))`, 3x3 convolutions, shape preserving.
pub fn residual_block<T: Element>(tape: &mut Tape<T>, b: &mut Bound<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let c1 = conv(tape, b, &format!("{prefix}.conv1"), x, 1, 1)?;
    let n1 = batch_norm(tape, b, &format!("{prefix}.bn1"), c1)?;
    let r1 = tape.relu(n1);
    let c2 = conv(tape, b, &format!("{prefix}.conv2"), r1, 1, 1)?;
    let n2 = batch_norm(tape, b, &format!("{prefix}.bn2"), c2)?;
    Ok(tape.add(x, n2)?)
}

pub mod init {
    //! Parameter declarations mirroring the layer functions above.

    use rand::Rng;

    use crate::error::Result;
    use crate::params::ParamInit;

    pub fn conv_bn<R: Rng>(p: &mut ParamInit<R>, prefix: &str, c_in: usize, c_out: usize, k: usize) -> Result<()> {
        p.conv(&format!("{prefix}.conv"), c_in, c_out, k, false)?;
        p.batch_norm(&format!("{prefix}.bn"), c_out)
    }

    pub fn residual_block<R: Rng>(p: &mut ParamInit<R>, prefix: &str, width: usize) -> Result<()> {
        p.conv(&format!("{prefix}.conv1"), width, width, 3, false)?;
        p.batch_norm(&format!("{prefix}.bn1"), width)?;
        p.conv(&format!("{prefix}.conv2"), width, width, 3, false)?;
        p.batch_norm(&format!("{prefix}.bn2"), width)
    }
}
