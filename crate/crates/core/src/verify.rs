//! Finite-difference checks of network parameters and the named suite
//! behind the `gradcheck` command.

use facesr_tensor::gradcheck::{check, check_against, GradCheckOptions, GradCheckReport};
use facesr_tensor::{BnMode, Element, OpKind, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{config_err, Error, Result};
use crate::nets::layers::residual_block;
use crate::nets::{
    coarse_forward, decoder_forward, discriminator_forward, encoder_forward, generator_forward, init_discriminator,
    init_generator, init_perceptual, perceptual_forward, prior_forward, Bound, ForwardMode, Layout, NetConfig, Phase,
};
use crate::params::{is_buffer, ModelParams};
use crate::train::{discriminator_loss, fsrnet_loss, generator_adversarial_loss, perceptual_loss};

/// Gradient check of `forward` with respect to the parameters in `names`
/// and the `inputs` flagged in `input_wrt`. The forward closure gets the
/// bound parameter set and one var per input.
pub fn check_params<T, F>(
    params: &ModelParams<T>,
    names: &[String],
    inputs: &[Tensor<T>],
    input_wrt: &[bool],
    phase: Phase,
    bn_eps: f64,
    forward: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Tape<T>, &mut Bound<'_, T>, &[Var]) -> Result<Var>,
{
    let mut all: Vec<Tensor<T>> = inputs.to_vec();
    let mut wrt: Vec<bool> = input_wrt.to_vec();
    for name in names {
        let t = params
            .get(name)
            .ok_or_else(|| config_err!("missing parameter {name}"))?;
        all.push(t.clone());
        wrt.push(true);
    }
    let n_inputs = inputs.len();
    let build = |tape: &mut Tape<T>, vars: &[Var]| -> facesr_tensor::Result<Var> {
        let mut bound = Bound::new(params, false, phase, bn_eps).without_stats();
        for (name, &v) in names.iter().zip(&vars[n_inputs..]) {
            bound.bind(name, v);
        }
        forward(tape, &mut bound, &vars[..n_inputs]).map_err(|e| TensorError::InvalidArgument {
            op: "forward",
            msg: e.to_string(),
        })
    };
    Ok(check(&all, &wrt, build, opts)?)
}

/// Case names of the gradient suite, in run order.
pub const SUITE: [&str; 33] = [
    "conv2d",
    "conv2d_stride2",
    "conv2d_1x1",
    "deconv2d",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "leaky_relu",
    "sigmoid",
    "affine",
    "scale",
    "ln_clamped",
    "add",
    "sub",
    "mul",
    "concat_channels",
    "downsample_nearest",
    "upsample_nearest",
    "mse_loss",
    "sum",
    "mean",
    "residual_block",
    "coarse_net",
    "prior_net",
    "fine_encoder",
    "fine_decoder",
    "discriminator",
    "perceptual_features",
    "discriminator_loss",
    "adversarial_loss",
    "perceptual_loss",
    "fsrnet_loss_end_to_end",
    "fsrgan_generator_loss_end_to_end",
];

/// Tensor op names accepted for fault injection.
pub fn parse_op_kind(name: &str) -> Result<OpKind> {
    use OpKind::*;
    Ok(match name {
        "conv2d" => Conv2d,
        "deconv2d" => Deconv2d,
        "batch_norm" => BatchNorm,
        "relu" => Relu,
        "leaky_relu" => LeakyRelu,
        "sigmoid" => Sigmoid,
        "add" => Add,
        "sub" => Sub,
        "mul" => Mul,
        "affine" => Affine,
        "concat" => Concat,
        "downsample" => Downsample,
        "upsample" => Upsample,
        "mse" => Mse,
        "sum" => Sum,
        "mean" => Mean,
        "ln" => Ln,
        other => return Err(config_err!("unknown op {other:?}")),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteRow {
    pub case: String,
    pub precision: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub passed: bool,
}

fn rand_t<T: Element>(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64(rng.gen_range(lo..hi)))
}

fn suite_net(hr: usize) -> NetConfig {
    NetConfig {
        hr_size: hr,
        scale_factor: 4,
        base_channels: 4,
        num_coarse_res_blocks: 1,
        num_encoder_res_blocks: 1,
        num_decoder_res_blocks: 1,
        num_hourglass: 1,
        hourglass_levels: 2,
        num_landmarks: 3,
        num_parsing_maps: 2,
        disc_base_channels: 4,
        // Zero scales would blank the residual branches' gradients.
        zero_init_residual_gamma: false,
        ..NetConfig::default()
    }
}

fn trainable_names<T: Element>(p: &ModelParams<T>, prefix: &str) -> Vec<String> {
    p.names()
        .filter(|n| n.starts_with(prefix) && !is_buffer(n))
        .cloned()
        .collect()
}

fn merged<T: Element>(sets: &[&ModelParams<f32>]) -> Result<ModelParams<T>> {
    let mut out = ModelParams::new(0);
    for s in sets {
        for (n, t) in s.iter() {
            out.insert(n.clone(), t.cast())?;
        }
    }
    Ok(out)
}

type BuildFn<T> = Box<dyn Fn(&mut Tape<T>, &[Var]) -> facesr_tensor::Result<Var>>;

/// Inputs, differentiation flags and graph of one suite case.
pub struct Case<T: Element> {
    pub inputs: Vec<Tensor<T>>,
    pub wrt: Vec<bool>,
    pub build: BuildFn<T>,
    /// Coordinates sampled per input; `None` checks all.
    pub max_coords: Option<usize>,
}

fn to_tensor_err(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "forward",
            msg: other.to_string(),
        },
    }
}

fn op_case<T: Element>(
    inputs: Vec<Tensor<T>>,
    fault: Option<OpKind>,
    f: impl Fn(&mut Tape<T>, &[Var]) -> facesr_tensor::Result<Var> + 'static,
) -> Case<T> {
    Case {
        wrt: vec![true; inputs.len()],
        inputs,
        build: Box::new(move |t, v| {
            if let Some(k) = fault {
                t.inject_fault(k);
            }
            f(t, v)
        }),
        max_coords: None,
    }
}

/// Differentiates the inputs and the trainable parameters of `params`
/// under `prefix`; other parameters enter as constants.
fn net_case<T: Element>(
    params: ModelParams<T>,
    prefix: &str,
    inputs: Vec<Tensor<T>>,
    fault: Option<OpKind>,
    f: impl Fn(&mut Tape<T>, &mut Bound<'_, T>, &[Var]) -> Result<Var> + 'static,
) -> Case<T> {
    let names = trainable_names(&params, prefix);
    let n_inputs = inputs.len();
    let mut all = inputs;
    all.extend(names.iter().map(|n| params.get(n).expect("listed above").clone()));
    Case {
        wrt: vec![true; all.len()],
        inputs: all,
        build: Box::new(move |t, v| {
            if let Some(k) = fault {
                t.inject_fault(k);
            }
            let mut b = Bound::new(&params, false, Phase::Train, 1e-5).without_stats();
            for (name, &var) in names.iter().zip(&v[n_inputs..]) {
                b.bind(name, var);
            }
            f(t, &mut b, &v[..n_inputs]).map_err(to_tensor_err)
        }),
        max_coords: Some(6),
    }
}

/// Build suite case `case` for `seed`. With `fault`, every tape the case
/// builds misapplies that op's backward rule.
pub fn build_case<T: Element>(case: &str, seed: u64, fault: Option<OpKind>) -> Result<Case<T>> {
    let a = || rand_t::<T>(&[2, 3, 4, 4], seed, -1.0, 1.0);
    let b = || rand_t::<T>(&[2, 3, 4, 4], seed + 7, -1.0, 1.0);
    let image = |n: usize, hr: usize, s: u64| rand_t::<T>(&[n, 3, hr, hr], s, 0.0, 1.0);
    let net = suite_net(16);
    Ok(match case {
        "conv2d" => op_case(
            vec![rand_t(&[2, 3, 6, 6], seed, -1.0, 1.0), rand_t(&[4, 3, 3, 3], seed + 1, -1.0, 1.0), rand_t(&[4], seed + 2, -1.0, 1.0)],
            fault,
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        ),
        "conv2d_stride2" => op_case(
            vec![rand_t(&[2, 3, 8, 8], seed, -1.0, 1.0), rand_t(&[4, 3, 3, 3], seed + 1, -1.0, 1.0), rand_t(&[4], seed + 2, -1.0, 1.0)],
            fault,
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        ),
        "conv2d_1x1" => op_case(
            vec![rand_t(&[2, 2, 5, 5], seed, -1.0, 1.0), rand_t(&[3, 2, 1, 1], seed + 1, -1.0, 1.0)],
            fault,
            |t, v| t.conv2d(v[0], v[1], None, 1, 0),
        ),
        "deconv2d" => op_case(
            vec![rand_t(&[2, 3, 4, 4], seed, -1.0, 1.0), rand_t(&[3, 2, 4, 4], seed + 1, -1.0, 1.0), rand_t(&[2], seed + 2, -1.0, 1.0)],
            fault,
            |t, v| t.deconv2d(v[0], v[1], Some(v[2]), 2, 1),
        ),
        "batch_norm_train" => op_case(
            vec![rand_t(&[3, 2, 4, 4], seed, -1.0, 1.0), rand_t(&[2], seed + 1, 0.5, 1.5), rand_t(&[2], seed + 2, -1.0, 1.0)],
            fault,
            |t, v| Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Train, 1e-5)?.0),
        ),
        "batch_norm_eval" => op_case(
            vec![rand_t(&[2, 2, 3, 3], seed, -1.0, 1.0), rand_t(&[2], seed + 1, 0.5, 1.5), rand_t(&[2], seed + 2, -1.0, 1.0)],
            fault,
            |t, v| {
                let mean = [T::from_f64(0.1), T::from_f64(-0.2)];
                let var = [T::from_f64(0.5), T::from_f64(2.0)];
                Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var }, 1e-5)?.0)
            },
        ),
        "relu" => op_case(vec![a()], fault, |t, v| Ok(t.relu(v[0]))),
        "leaky_relu" => op_case(vec![a()], fault, |t, v| Ok(t.leaky_relu(v[0], 0.2))),
        "sigmoid" => op_case(vec![rand_t(&[2, 3, 4, 4], seed, -4.0, 4.0)], fault, |t, v| Ok(t.sigmoid(v[0]))),
        "affine" => op_case(vec![a()], fault, |t, v| Ok(t.affine(v[0], -1.5, 0.25))),
        "scale" => op_case(vec![a()], fault, |t, v| Ok(t.scale(v[0], 0.75))),
        "ln_clamped" => op_case(vec![rand_t(&[2, 3, 4, 4], seed, 0.1, 1.0)], fault, |t, v| Ok(t.ln_clamped(v[0], 1e-7))),
        "add" => op_case(vec![a(), b()], fault, |t, v| t.add(v[0], v[1])),
        "sub" => op_case(vec![a(), b()], fault, |t, v| t.sub(v[0], v[1])),
        "mul" => op_case(vec![a(), b()], fault, |t, v| t.mul(v[0], v[1])),
        "concat_channels" => op_case(vec![a(), rand_t(&[2, 2, 4, 4], seed + 8, -1.0, 1.0)], fault, |t, v| {
            t.concat_channels(&[v[0], v[1]])
        }),
        "downsample_nearest" => op_case(vec![a()], fault, |t, v| t.downsample_nearest(v[0], 2)),
        "upsample_nearest" => op_case(vec![a()], fault, |t, v| t.upsample_nearest(v[0], 2)),
        "mse_loss" => op_case(vec![a(), b()], fault, |t, v| t.mse_loss(v[0], v[1])),
        "sum" => op_case(vec![a()], fault, |t, v| Ok(t.sum(v[0]))),
        "mean" => op_case(vec![a()], fault, |t, v| Ok(t.mean(v[0]))),
        "discriminator_loss" => op_case(
            vec![rand_t(&[2, 1, 2, 2], seed, 0.05, 0.95), rand_t(&[2, 1, 2, 2], seed + 1, 0.05, 0.95)],
            fault,
            |t, v| discriminator_loss(t, v[0], v[1]).map_err(to_tensor_err),
        ),
        "adversarial_loss" => op_case(vec![rand_t(&[2, 1, 2, 2], seed, 0.05, 0.95)], fault, |t, v| {
            let plain = generator_adversarial_loss(t, v[0], false).map_err(to_tensor_err)?;
            let saturating = generator_adversarial_loss(t, v[0], true).map_err(to_tensor_err)?;
            t.add(plain, saturating)
        }),
        "residual_block" => net_case(
            init_generator(&net, Layout::Full, seed)?.cast(),
            "coarse.res0.",
            vec![rand_t(&[2, 4, 6, 6], seed, -1.0, 1.0)],
            fault,
            |t, b, v| residual_block(t, b, "coarse.res0", v[0]),
        ),
        "coarse_net" => net_case(init_generator(&net, Layout::Full, seed)?.cast(), "coarse.", vec![image(2, 16, seed)], fault, move |t, b, v| {
            coarse_forward(t, b, &net, v[0])
        }),
        "prior_net" => net_case(init_generator(&net, Layout::Full, seed)?.cast(), "prior.", vec![image(2, 16, seed)], fault, move |t, b, v| {
            let out = prior_forward(t, b, &net, v[0])?;
            out.decoder_input(t)
        }),
        "fine_encoder" => net_case(init_generator(&net, Layout::Full, seed)?.cast(), "fine.enc.", vec![image(2, 16, seed)], fault, move |t, b, v| {
            encoder_forward(t, b, &net, v[0])
        }),
        "fine_decoder" => {
            let p = Layout::Full.decoder_prior_channels(&net);
            let inputs = vec![rand_t(&[2, 4, 8, 8], seed, -1.0, 1.0), rand_t(&[2, p, 8, 8], seed + 1, 0.0, 1.0)];
            net_case(init_generator(&net, Layout::Full, seed)?.cast(), "fine.dec.", inputs, fault, move |t, b, v| {
                decoder_forward(t, b, &net, v[0], Some(v[1]))
            })
        }
        "discriminator" => {
            // Train-mode BN over 1x1 maps is ill-conditioned; 32 px keeps 2x2.
            let dnet = suite_net(32);
            let disc = init_discriminator(&dnet, seed)?.cast();
            net_case(disc, "disc.", vec![image(2, 32, seed), image(2, 32, seed + 1)], fault, move |t, b, v| {
                discriminator_forward(t, b, &dnet, v[0], v[1])
            })
        }
        "perceptual_features" => net_case(merged(&[&init_perceptual(&net, seed)?])?, "phi.", vec![image(2, 16, seed)], fault, |t, b, v| {
            perceptual_forward(t, b, v[0])
        }),
        "perceptual_loss" => net_case(
            merged(&[&init_perceptual(&net, seed)?])?,
            "(inputs only)",
            vec![image(2, 16, seed), image(2, 16, seed + 1)],
            fault,
            |t, b, v| perceptual_loss(t, b, v[0], v[1]),
        ),
        "fsrnet_loss_end_to_end" => {
            let k = net.prior_channels();
            let inputs = vec![image(2, 16, seed), image(2, 16, seed + 1), rand_t(&[2, k, 8, 8], seed + 2, 0.0, 1.0)];
            net_case(init_generator(&net, Layout::Full, seed)?.cast(), "", inputs, fault, move |t, b, v| {
                let out = generator_forward(t, b, &net, Layout::Full, v[0], ForwardMode::Full)?;
                Ok(fsrnet_loss(t, out.coarse, out.fine, out.prior.as_ref(), v[1], Some(v[2]), 1.0)?.total)
            })
        }
        "fsrgan_generator_loss_end_to_end" => {
            let gnet = suite_net(32);
            let g = init_generator(&gnet, Layout::Full, seed)?;
            let d = init_discriminator(&gnet, seed + 1)?;
            let phi = init_perceptual(&gnet, seed + 2)?;
            let k = gnet.prior_channels();
            let inputs = vec![image(2, 32, seed), image(2, 32, seed + 1), rand_t(&[2, k, 16, 16], seed + 2, 0.0, 1.0)];
            let mut c = net_case(merged(&[&g, &d, &phi])?, "", inputs, fault, move |t, b, v| {
                let out = generator_forward(t, b, &gnet, Layout::Full, v[0], ForwardMode::Full)?;
                let terms = fsrnet_loss(t, out.coarse, out.fine, out.prior.as_ref(), v[1], Some(v[2]), 1.0)?;
                let c = discriminator_forward(t, b, &gnet, out.fine, v[0])?;
                let adv = generator_adversarial_loss(t, c, false)?;
                let perc = perceptual_loss(t, b, out.fine, v[1])?;
                let adv = t.scale(adv, 1e-3);
                let perc = t.scale(perc, 1e-1);
                let total = t.add(terms.total, adv)?;
                Ok(t.add(total, perc)?)
            });
            // Only generator parameters are differentiated.
            let n_inputs = 3;
            let names: Vec<String> = trainable_names(&merged::<T>(&[&g, &d, &phi])?, "");
            for (flag, name) in c.wrt[n_inputs..].iter_mut().zip(&names) {
                *flag = g.contains(name);
            }
            c
        }
        other => return Err(config_err!("unknown gradcheck case {other:?} (known: {})", SUITE.join(", "))),
    })
}

/// One gradient check of `case` at `seed`. In f32 the analytic gradients
/// of the f32 tape are compared with f64 central differences of the same
/// graph; in f64 both sides are f64.
pub fn run_case<T: Element>(case: &str, seed: u64, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let c = build_case::<T>(case, seed, fault)?;
    let reference = build_case::<f64>(case, seed, None)?;
    let mut opts = GradCheckOptions::for_element::<f64>(seed);
    opts.max_coords = c.max_coords;
    Ok(check_against(&c.inputs, &c.wrt, &c.build, &reference.build, &opts)?)
}

/// Run `cases` (all when empty) over `seeds` and summarize per case.
pub fn run_suite(f64_mode: bool, cases: &[String], seeds: &[u64], fault: Option<OpKind>) -> Result<Vec<SuiteRow>> {
    let selected: Vec<String> = if cases.is_empty() {
        SUITE.iter().map(|s| s.to_string()).collect()
    } else {
        cases.to_vec()
    };
    let mut rows = Vec::new();
    for case in &selected {
        let mut row = SuiteRow {
            case: case.clone(),
            precision: if f64_mode { "f64" } else { "f32" },
            seeds: seeds.len(),
            max_rel_error: 0.0,
            tolerance: 0.0,
            checked: 0,
            skipped_kinks: 0,
            passed: true,
        };
        for &seed in seeds {
            let (report, tol) = if f64_mode {
                (run_case::<f64>(case, seed, fault)?, GradCheckOptions::tolerance_for::<f64>())
            } else {
                (run_case::<f32>(case, seed, fault)?, GradCheckOptions::tolerance_for::<f32>())
            };
            row.tolerance = tol;
            row.max_rel_error = row.max_rel_error.max(report.max_rel_error);
            row.checked += report.checked;
            row.skipped_kinks += report.skipped_kinks;
            row.passed &= report.passes(tol);
        }
        rows.push(row);
    }
    Ok(rows)
}
