use std::collections::BTreeSet;
use std::path::Path;

use facesr_core::config::RunConfig;
use facesr_core::nets::{init_perceptual, Bound, Phase, PriorOutput, StackOutput};
use facesr_core::synth::{generate_sample, Sample, Split};
use facesr_core::train::*;
use facesr_core::{Error, ModelParams};
use facesr_tensor::{Tape, Tensor};

fn tiny_run(mode: &str) -> RunConfig {
    let mut r = RunConfig::default();
    r.net.hr_size = 32;
    r.net.scale_factor = 4;
    r.net.base_channels = 8;
    r.net.num_coarse_res_blocks = 1;
    r.net.num_encoder_res_blocks = 1;
    r.net.num_decoder_res_blocks = 1;
    r.net.num_hourglass = 1;
    r.net.hourglass_levels = 1;
    r.net.disc_base_channels = 8;
    r.train.mode = mode.to_string();
    r.train.batch_size = 2;
    r.train.learning_rate = 1e-3;
    r.train.max_steps = 4;
    r
}

fn samples(run: &RunConfig, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| generate_sample(&format!("train_{i:05}"), 100 + i as u64, Split::Train, &run.synth()).unwrap().sample)
        .collect()
}

fn train_steps(run: &RunConfig, n: usize) -> (Trainer, Vec<StepRecord>) {
    let mut t = Trainer::new(run.clone(), samples(run, 4), "corpus".into()).unwrap();
    let recs = (0..n).map(|_| t.step().unwrap()).collect();
    (t, recs)
}

#[test]
fn losses_vanish_at_ground_truth() {
    let mut tape = Tape::<f64>::new();
    let hr = tape.constant(Tensor::from_fn(vec![2, 3, 8, 8], |i| (i % 7) as f64 / 7.0));
    let heat = tape.constant(Tensor::from_fn(vec![2, 2, 4, 4], |i| (i % 3) as f64 / 3.0));
    let parse = tape.constant(Tensor::from_fn(vec![2, 3, 4, 4], |i| (i % 2) as f64));
    let target = tape.concat_channels(&[heat, parse]).unwrap();
    let prior = PriorOutput {
        stacks: vec![StackOutput { heatmaps: Some(heat), parsing: Some(parse) }; 2],
        feature: heat,
    };
    let terms = fsrnet_loss(&mut tape, hr, hr, Some(&prior), hr, Some(target), 1.0).unwrap();
    assert_eq!(tape.value(terms.total).item().unwrap(), 0.0);

    let half = tape.constant(Tensor::full(vec![2, 1, 2, 2], 0.5));
    let d = discriminator_loss(&mut tape, half, half).unwrap();
    assert!((tape.value(d).item().unwrap() - 2.0 * 2f64.ln()).abs() < 1e-6);

    let run = tiny_run("fsrgan");
    let phi = init_perceptual(&run.net, 5).unwrap().cast::<f64>();
    let mut pb = Bound::new(&phi, false, Phase::Eval, run.net.bn_eps);
    let y = tape.constant(Tensor::from_fn(vec![1, 3, 32, 32], |i| ((i * 13) % 29) as f64 / 29.0));
    let lp = perceptual_loss(&mut tape, &mut pb, y, y).unwrap();
    assert!(tape.value(lp).item().unwrap().abs() < 1e-6);
}

#[test]
fn epochs_visit_every_sample_once() {
    let mut run = tiny_run("baseline_v1");
    run.train.batch_size = 3;
    let mut t = Trainer::new(run.clone(), samples(&run, 5), "c".into()).unwrap();
    let seq: Vec<usize> = (1..=10).flat_map(|s| t.batch_indices(s)).collect();
    for epoch in seq.chunks(5) {
        assert_eq!(epoch.iter().copied().collect::<BTreeSet<_>>(), (0..5).collect());
    }
    assert_ne!(seq[..5], seq[5..10], "epochs reuse one order");
}

#[test]
fn training_is_deterministic() {
    let run = tiny_run("fsrnet");
    let (a, ra) = train_steps(&run, 3);
    let (b, rb) = train_steps(&run, 3);
    assert_eq!(ra, rb);
    assert_eq!(a.state, b.state);
}

#[test]
fn zero_weight_gan_terms_reproduce_fsrnet() {
    let mut gan = tiny_run("fsrgan");
    gan.train.gamma_c = 0.0;
    gan.train.gamma_p = 0.0;
    let (g, rg) = train_steps(&gan, 3);
    let (n, rn) = train_steps(&tiny_run("fsrnet"), 3);
    assert_eq!(g.state.generator.to_bytes(), n.state.generator.to_bytes());
    for (a, b) in rg.iter().zip(&rn) {
        assert_eq!(a.loss_total, b.loss_total);
        assert!(a.loss_adv.is_some() && a.loss_disc.is_some() && a.disc_accuracy.is_some());
    }
}

#[test]
fn unsupervised_prior_mode_drops_prior_term() {
    let (t, recs) = train_steps(&tiny_run("baseline_v2"), 2);
    for r in &recs {
        assert!(r.loss_prior.unwrap() > 0.0);
        let expect = 0.5 * (r.loss_coarse + r.loss_fine);
        assert!((r.loss_total - expect).abs() <= 1e-6 * expect, "{r:?}");
    }
    assert!(t.state.generator.names().any(|n| n.starts_with("prior.")));
    let (v1, _) = train_steps(&tiny_run("baseline_v1"), 1);
    assert!(!v1.state.generator.names().any(|n| n.starts_with("prior.")));
}

#[test]
fn zero_learning_rate_leaves_weights() {
    for mode in ["fsrnet", "fsrgan", "gt_prior"] {
        let mut run = tiny_run(mode);
        run.train.learning_rate = 0.0;
        let fresh = Trainer::new(run.clone(), samples(&run, 4), "c".into()).unwrap();
        let (t, _) = train_steps(&run, 2);
        for (name, p) in fresh.state.generator.iter() {
            if !facesr_core::params::is_buffer(name) {
                assert_eq!(t.state.generator.get(name).unwrap(), p, "{mode}: {name} moved");
            }
        }
    }
}

#[test]
fn refreshed_stats_are_batch_statistics_of_final_weights() {
    use facesr_core::nets::{generator_forward, ForwardMode};
    use facesr_core::train::trainer::batch_tensors;
    let mut run = tiny_run("fsrnet");
    run.train.batch_size = 4;
    run.train.bn_refresh_batches = 1;
    let data = samples(&run, 4);
    let mut t = Trainer::new(run.clone(), data.clone(), "c".into()).unwrap();
    t.step().unwrap();
    t.step().unwrap();
    let before = t.state.generator.clone();
    // Whatever the training-time averages hold is discarded.
    for (name, p) in t.state.generator.iter_mut() {
        if name.ends_with(".running_mean") {
            *p = p.map(|v| v + 3.0);
        }
    }
    t.refresh_bn_stats().unwrap();

    let mut tape = Tape::<f32>::new();
    let mut b = Bound::new(&before, false, Phase::Train, run.net.bn_eps);
    let x = batch_tensors(&data.iter().map(|s| &s.lr_up).collect::<Vec<_>>()).unwrap();
    let xv = tape.constant(x);
    generator_forward(&mut tape, &mut b, &run.net, t.mode().layout(), xv, ForwardMode::Full).unwrap();
    let stats = b.take_stats();
    assert!(!stats.is_empty());
    for (prefix, s) in &stats {
        for (suffix, want) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let got = t.state.generator.get(&format!("{prefix}.{suffix}")).unwrap();
            for (g, w) in got.data().iter().zip(want) {
                assert!((g - w).abs() <= 1e-5 * (1.0 + w.abs()), "{prefix}.{suffix}: {g} vs {w}");
            }
        }
    }
    for (name, p) in before.iter() {
        if !facesr_core::params::is_buffer(name) {
            assert_eq!(t.state.generator.get(name).unwrap(), p, "{name} moved");
        }
    }
}

#[test]
fn frozen_generator_lets_discriminator_learn() {
    let mut run = tiny_run("fsrgan");
    run.train.freeze_generator = true;
    run.train.batch_size = 4;
    let mut t = Trainer::new(run.clone(), samples(&run, 4), "c".into()).unwrap();
    let g0 = t.state.generator.clone();
    let mut best = 0.0f64;
    for _ in 0..300 {
        best = t.step().unwrap().disc_accuracy.unwrap();
        if best > 0.9 {
            break;
        }
    }
    assert!(best > 0.9, "discriminator accuracy only {best}");
    assert_eq!(t.state.generator, g0);
}

#[test]
fn perceptual_network_stays_out_of_checkpoints() {
    let run = tiny_run("fsrgan");
    let (t, _) = train_steps(&run, 1);
    let dir = tempfile::tempdir().unwrap();
    t.save_checkpoint(dir.path()).unwrap();
    let g = ModelParams::load(&dir.path().join(GENERATOR_FILE)).unwrap();
    let d = ModelParams::load(&dir.path().join(DISCRIMINATOR_FILE)).unwrap();
    let o = ModelParams::load(&dir.path().join(OPTIMIZER_FILE)).unwrap();
    let phi = init_perceptual(&run.net, run.train.perceptual_seed).unwrap();
    for name in g.names().chain(d.names()).chain(o.names()) {
        assert!(!phi.contains(name), "{name} belongs to the feature extractor");
        assert!(!name.starts_with("phi"), "{name}");
    }
    assert!(o.names().all(|n| n.starts_with("generator/") || n.starts_with("discriminator/")));
    assert!(o.names().any(|n| n.starts_with("discriminator/")));
}

fn read_steps(path: &Path) -> Vec<StepRecord> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn resume_matches_uninterrupted_run() {
    for mode in ["fsrnet", "fsrgan"] {
        let dir = tempfile::tempdir().unwrap();
        let mut run = tiny_run(mode);
        run.train.max_steps = 6;
        run.train.checkpoint_every = 3;
        run.out_dir = dir.path().join("full").display().to_string();
        let data = samples(&run, 4);
        run_training(run.clone(), data.clone(), "c".into(), None, |_| {}).unwrap();

        // Stop at step 3, then continue in the same directory.
        let mut part = run.clone();
        part.train.max_steps = 3;
        part.out_dir = dir.path().join("part").display().to_string();
        run_training(part.clone(), data.clone(), "c".into(), None, |_| {}).unwrap();
        let mut rest = run.clone();
        rest.out_dir = part.out_dir.clone();
        let ckpt = dir.path().join("part/final");
        run_training(rest, data.clone(), "c".into(), Some(&ckpt), |_| {}).unwrap();

        let full = dir.path().join("full");
        let part = dir.path().join("part");
        for f in [GENERATOR_FILE, OPTIMIZER_FILE] {
            assert_eq!(
                std::fs::read(full.join("final").join(f)).unwrap(),
                std::fs::read(part.join("final").join(f)).unwrap(),
                "{mode}: {f} differs"
            );
        }
        assert_eq!(read_steps(&full.join(LOG_FILE)), read_steps(&part.join(LOG_FILE)));
        let periodic = full.join("checkpoints/step_000003");
        assert_eq!(read_checkpoint_state(&periodic).unwrap().step, 3);
    }
}

#[test]
fn resume_rejects_foreign_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = tiny_run("fsrnet");
    run.train.max_steps = 1;
    run.out_dir = dir.path().join("a").display().to_string();
    let data = samples(&run, 4);
    let s = run_training(run.clone(), data.clone(), "c".into(), None, |_| {}).unwrap();
    let mut more = run.clone();
    more.train.max_steps = 2;
    let err = run_training(more.clone(), data.clone(), "other".into(), Some(&s.final_checkpoint), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
    more.train.learning_rate = 5e-4;
    let err = run_training(more, data, "c".into(), Some(&s.final_checkpoint), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn warm_start_requires_matching_generator() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = tiny_run("fsrnet");
    run.train.max_steps = 1;
    run.out_dir = dir.path().join("a").display().to_string();
    let data = samples(&run, 4);
    let s = run_training(run.clone(), data.clone(), "c".into(), None, |_| {}).unwrap();
    let g = s.final_checkpoint.join(GENERATOR_FILE).display().to_string();
    let mut gan = tiny_run("fsrgan");
    gan.train.warm_start = Some(g.clone());
    let t = Trainer::new(gan, data.clone(), "c".into()).unwrap();
    assert_eq!(t.state.generator, ModelParams::load(Path::new(&g)).unwrap());
    let mut v1 = tiny_run("baseline_v1");
    v1.train.warm_start = Some(g);
    assert!(Trainer::new(v1, data, "c".into()).is_err());
}

#[test]
fn mismatched_samples_rejected() {
    let run = tiny_run("fsrnet");
    let mut other = run.clone();
    other.net.hr_size = 64;
    other.net.scale_factor = 8;
    assert!(Trainer::new(run.clone(), samples(&other, 2), "c".into()).is_err());
    assert!(Trainer::new(run, Vec::new(), "c".into()).is_err());
}
