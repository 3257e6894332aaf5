use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use facesr_core::ablate;
use facesr_core::config::RunConfig;
use facesr_core::metrics::{estimator, evaluate, fuse_dihedral, run_name, MetricReport};
use facesr_core::model::{Checkpoint, Prediction};
use facesr_core::synth::pnm::{read_ppm, write_pgm, write_ppm};
use facesr_core::synth::{build_corpus, upscale_input, Corpus, CorpusMeta, Split};
use facesr_core::train::run_training;
use facesr_core::verify::{parse_op_kind, run_suite};
use facesr_core::{Error, Result};
use facesr_tensor::Tensor;
use serde_json::{json, Value};

use crate::{Ablate, Cli, Command, Eval, GenData, Global, Gradcheck, Infer, Train};

fn usage(msg: String) -> Error {
    Error::Config(msg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn dispatch(cli: &Cli) -> Result<u8> {
    let g = &cli.global;
    match &cli.command {
        Command::GenData(a) => gen_data(g, a),
        Command::Train(a) => train(g, a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(g, a),
        Command::Ablate(a) => ablate_cmd(g, a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn defaults(g: &Global) -> RunConfig {
    if g.paper_scale {
        RunConfig::paper_scale()
    } else {
        RunConfig::default()
    }
}

/// Defaults, then the config file, then `--set` pairs.
fn base_config(g: &Global) -> Result<RunConfig> {
    let mut run = defaults(g);
    if let Some(path) = &g.config {
        run.apply_file(path)?;
    }
    for kv in &g.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        run.set(k, v)?;
    }
    Ok(run)
}

fn set_opt<V: ToString>(run: &mut RunConfig, key: &str, v: &Option<V>) -> Result<()> {
    match v {
        Some(v) => run.set(key, &v.to_string()),
        None => Ok(()),
    }
}

/// Take image geometry from the corpus. A setting that differs from both the
/// default and the corpus is a conflict.
fn adopt_geometry(run: &mut RunConfig, meta: &CorpusMeta, base: &RunConfig) -> Result<()> {
    let s = &meta.synth;
    for (key, mine, default, corpus) in [
        ("net.hr_size", run.net.hr_size, base.net.hr_size, s.hr_size),
        ("net.scale_factor", run.net.scale_factor, base.net.scale_factor, s.scale_factor),
        ("net.num_landmarks", run.net.num_landmarks, base.net.num_landmarks, s.num_landmarks),
    ] {
        if mine != default && mine != corpus {
            return Err(Error::Data(format!("{key} = {mine} but the corpus was built with {corpus}")));
        }
    }
    if run.data.parsing_layout != base.data.parsing_layout && run.data.parsing_layout != s.parsing_layout {
        return Err(Error::Data(format!(
            "data.parsing_layout = {:?} but the corpus was built with {:?}",
            run.data.parsing_layout, s.parsing_layout
        )));
    }
    run.net.hr_size = s.hr_size;
    run.net.scale_factor = s.scale_factor;
    run.net.num_landmarks = s.num_landmarks;
    run.data.parsing_layout = s.parsing_layout;
    run.net.num_parsing_maps = s.parsing_layout.channels();
    Ok(())
}

fn open_corpus(run: &mut RunConfig, flag: &Option<PathBuf>) -> Result<Corpus> {
    let dir = flag.clone().unwrap_or_else(|| PathBuf::from(&run.data.corpus));
    if !dir.join("corpus.json").exists() {
        return Err(Error::Data(format!("no corpus at {}", dir.display())));
    }
    run.data.corpus = dir.to_string_lossy().into_owned();
    Corpus::open(&dir)
}

fn gen_data(g: &Global, a: &GenData) -> Result<u8> {
    let mut run = base_config(g)?;
    set_opt(&mut run, "data.n_train", &a.n_train)?;
    set_opt(&mut run, "data.n_test", &a.n_test)?;
    set_opt(&mut run, "net.hr_size", &a.hr)?;
    set_opt(&mut run, "net.scale_factor", &a.scale)?;
    set_opt(&mut run, "data.seed", &a.seed)?;
    if let Some(layout) = &a.layout {
        run.set("data.parsing_layout", layout)?;
        run.net.num_parsing_maps = run.data.parsing_layout.channels();
    }
    run.validate()?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from(&run.data.corpus));
    // Locations are not content: keep them out of the corpus bytes.
    let mut embedded = run.to_flat();
    embedded.remove("data.corpus");
    embedded.remove("out_dir");
    let meta = build_corpus(
        &out,
        run.data.n_train,
        run.data.n_test,
        run.data.seed,
        &run.synth(),
        a.force,
        Value::Object(embedded.into_iter().collect()),
    )?;
    let s = &meta.synth;
    println!(
        "corpus {}: {} train + {} test samples, {lr}x{lr} -> {hr}x{hr}, {} landmarks, {} parsing maps",
        out.display(),
        meta.n_train,
        meta.n_test,
        s.num_landmarks,
        s.parsing_layout.channels(),
        lr = s.lr_size(),
        hr = s.hr_size,
    );
    println!("corpus hash {}", meta.hash);
    Ok(0)
}

fn train(g: &Global, a: &Train) -> Result<u8> {
    let mut run = base_config(g)?;
    set_opt(&mut run, "train.mode", &a.mode)?;
    set_opt(&mut run, "train.lambda_prior", &a.lambda)?;
    set_opt(&mut run, "train.learning_rate", &a.lr)?;
    set_opt(&mut run, "train.gamma_c", &a.gamma_c)?;
    set_opt(&mut run, "train.gamma_p", &a.gamma_p)?;
    set_opt(&mut run, "train.max_steps", &a.steps)?;
    set_opt(&mut run, "train.batch_size", &a.batch_size)?;
    set_opt(&mut run, "train.seed", &a.seed)?;
    set_opt(&mut run, "train.checkpoint_every", &a.checkpoint_every)?;
    if let Some(w) = &a.warm_start {
        run.train.warm_start = Some(w.to_string_lossy().into_owned());
    }
    if let Some(out) = &a.out {
        run.out_dir = out.to_string_lossy().into_owned();
    }
    let corpus = open_corpus(&mut run, &a.corpus)?;
    adopt_geometry(&mut run, &corpus.meta, &defaults(g))?;
    run.validate()?;
    let samples = corpus.load_split(Split::Train)?;
    let out = PathBuf::from(&run.out_dir);
    write_text(&out.join("run_config.json"), &run.to_json())?;
    eprintln!(
        "training {} for {} steps on {} samples (corpus {})",
        run.train.mode,
        run.train.max_steps,
        samples.len(),
        corpus.meta.hash
    );
    let every = a.log_every;
    let summary = run_training(run, samples, corpus.meta.hash.clone(), a.resume.as_deref(), |r| {
        if every > 0 && r.step % every == 0 {
            eprintln!(
                "step {:>6}  total {:.6}  coarse {:.6}  fine {:.6}{}",
                r.step,
                r.loss_total,
                r.loss_coarse,
                r.loss_fine,
                r.loss_prior.map(|p| format!("  prior {p:.6}")).unwrap_or_default()
            );
        }
    })?;
    if let Some(last) = &summary.last {
        if !last.loss_total.is_finite() {
            return Err(Error::Numerical(format!("loss is {} at step {}", last.loss_total, last.step)));
        }
    }
    println!(
        "trained {} steps; final checkpoint {}",
        summary.steps,
        summary.final_checkpoint.display()
    );
    Ok(0)
}

fn channel_maps(t: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    let s = t.shape();
    let plane = s[1] * s[2];
    (0..s[0])
        .map(|k| Ok(Tensor::new(vec![s[1], s[2]], t.data()[k * plane..(k + 1) * plane].to_vec())?))
        .collect()
}

fn infer(a: &Infer) -> Result<u8> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    if ck.needs_gt_prior() {
        return Err(usage(format!(
            "{} is a {} model that needs ground-truth priors; score it with `eval` on a corpus",
            a.checkpoint.display(),
            ck.mode
        )));
    }
    let img = read_ppm(&a.input)?;
    let (hr, lr) = (ck.run.net.hr_size, ck.run.net.lr_size());
    let x = match img.shape() {
        [3, h, w] if *h == hr && *w == hr => img,
        [3, h, w] if *h == lr && *w == lr => upscale_input(&img, hr)?,
        s => {
            return Err(usage(format!(
                "input must be {lr}x{lr} or {hr}x{hr} for this checkpoint, got {}x{}",
                s[2], s[1]
            )))
        }
    };
    let t0 = Instant::now();
    let pred = if a.tta {
        let mut like = None;
        let fused = fuse_dihedral(|g| {
            let p = ck.predict(&g.apply(&x)?, None)?;
            let t = p.tensors().into_iter().cloned().collect();
            like.get_or_insert(p);
            Ok(t)
        })?;
        Prediction::from_tensors(like.as_ref().expect("eight passes ran"), fused)
    } else {
        ck.predict(&x, None)?
    };
    let ms = t0.elapsed().as_secs_f64() * 1e3;
    if !pred.fine.is_finite() {
        return Err(Error::Numerical("the model produced non-finite pixels".into()));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_ppm(&a.out.join("fine.ppm"), &pred.fine)?;
    if let Some(c) = &pred.coarse {
        write_ppm(&a.out.join("coarse.ppm"), c)?;
    }
    for (sub, maps) in [("heatmaps", &pred.heatmaps), ("parsing", &pred.parsing)] {
        if let Some(m) = maps {
            let dir = a.out.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (k, ch) in channel_maps(m)?.iter().enumerate() {
                write_pgm(&dir.join(format!("{k:02}.pgm")), ch)?;
            }
        }
    }
    println!(
        "{}: {ms:.3} ms per image{}",
        a.input.display(),
        if a.tta { " (8-pass fusion)" } else { "" }
    );
    Ok(0)
}

fn report_row(name: &str, r: &MetricReport) -> Value {
    let mut row = serde_json::Map::new();
    row.insert("run".into(), json!(name));
    row.insert("checkpoint_hash".into(), json!(r.checkpoint_hash));
    for (metric, agg) in &r.aggregates {
        row.insert(metric.clone(), json!(agg.mean));
    }
    Value::Object(row)
}

fn summary_line(name: &str, r: &MetricReport) -> String {
    let mut s = name.to_string();
    for (metric, agg) in &r.aggregates {
        if let Some(m) = agg.mean {
            s += &format!("  {metric} {m:.4}");
        }
    }
    s
}

fn eval(g: &Global, a: &Eval) -> Result<u8> {
    let mut run = base_config(g)?;
    let corpus = open_corpus(&mut run, &a.corpus)?;
    let split = Split::parse(&a.split)?;
    let text = if !a.compare.is_empty() {
        let mut taken = BTreeSet::new();
        let mut rows = Vec::new();
        let mut reports = serde_json::Map::new();
        for path in &a.compare {
            let base = run_name(path);
            let mut name = base.clone();
            let mut n = 2;
            while !taken.insert(name.clone()) {
                name = format!("{base}#{n}");
                n += 1;
            }
            let est = estimator("checkpoint", Some(path), a.tta)?;
            let grids = a.grids.as_ref().map(|d| d.join(&name));
            let report = evaluate(est.as_ref(), &corpus, split, grids.as_deref())?;
            eprintln!("{}", summary_line(&name, &report));
            rows.push(report_row(&name, &report));
            reports.insert(name, serde_json::to_value(&report)?);
        }
        let doc = json!({
            "code_version": facesr_core::nets::CODE_VERSION,
            "corpus_hash": corpus.meta.hash,
            "split": split.name(),
            "rows": rows,
            "reports": reports,
        });
        let mut s = serde_json::to_string_pretty(&doc)?;
        s.push('\n');
        s
    } else {
        let est = match (&a.checkpoint, &a.baseline) {
            (Some(c), _) => estimator("checkpoint", Some(c), a.tta)?,
            (None, Some(b)) => estimator(b, None, a.tta)?,
            (None, None) => return Err(usage("eval needs --checkpoint, --baseline or --compare".into())),
        };
        let report = evaluate(est.as_ref(), &corpus, split, a.grids.as_deref())?;
        eprintln!("{}", summary_line(&report.estimator, &report));
        report.to_json()?
    };
    match &a.out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    Ok(0)
}

fn ablate_cmd(g: &Global, a: &Ablate) -> Result<u8> {
    let sweep = ablate::lookup(&a.sweep)?;
    let mut run = base_config(g)?;
    set_opt(&mut run, "train.max_steps", &a.steps)?;
    let corpus = open_corpus(&mut run, &a.corpus)?;
    adopt_geometry(&mut run, &corpus.meta, &defaults(g))?;
    run.validate()?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from(&run.out_dir));
    let seeds: Vec<u64> = (1..=a.seeds).collect();
    println!("sweep {}: {}", sweep.name(), sweep.describe());
    println!("corpus {} hash {}", corpus.dir.display(), corpus.meta.hash);
    let report = ablate::run_sweep(sweep.as_ref(), &run, &corpus, &seeds, &out, |line| eprintln!("{line}"))?;
    let table = report.table();
    write_text(&out.join(format!("{}.json", sweep.name())), &report.to_json())?;
    write_text(&out.join(format!("{}.txt", sweep.name())), &table)?;
    print!("{table}");
    Ok(0)
}

fn gradcheck(a: &Gradcheck) -> Result<u8> {
    let fault = a.inject_fault.as_deref().map(parse_op_kind).transpose()?;
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let t0 = Instant::now();
    let rows = run_suite(a.f64, &a.cases, &seeds, fault)?;
    let elapsed = t0.elapsed().as_secs_f64();
    println!(
        "{:<34} {:>4} {:>12} {:>9} {:>7} {:>6}  result",
        "case", "prec", "max rel err", "tol", "coords", "kinks"
    );
    for r in &rows {
        println!(
            "{:<34} {:>4} {:>12.3e} {:>9.0e} {:>7} {:>6}  {}",
            r.case,
            r.precision,
            r.max_rel_error,
            r.tolerance,
            r.checked,
            r.skipped_kinks,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    let passed = rows.iter().filter(|r| r.passed).count();
    println!("{passed} of {} cases passed over {} seeds in {elapsed:.1} s", rows.len(), seeds.len());
    if let Some(p) = &a.json {
        let mut s = serde_json::to_string_pretty(&rows)?;
        s.push('\n');
        write_text(p, &s)?;
    }
    Ok(if passed == rows.len() { 0 } else { 4 })
}
