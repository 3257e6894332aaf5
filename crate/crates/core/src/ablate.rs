//! Named ablation sweeps. A sweep is a list of training variants; each one is
//! trained once per seed on a shared corpus and scored on the test split.
//!
//! Runs land in `{out}/{key}/seed{s}` where the key names the mode, prior set
//! and hourglass count, so sweeps sharing a variant share its runs. A run whose
//! `final/` checkpoint already matches the requested configuration is reused.

use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{config_err, Result};
use crate::metrics::{estimator, evaluate};
use crate::nets::{PriorSet, CODE_VERSION};
use crate::synth::{Corpus, Sample, Split};
use crate::train::{read_checkpoint_state, run_training};

pub struct Variant {
    pub label: String,
    pub run: RunConfig,
}

pub trait Sweep: Send + Sync {
    fn name(&self) -> &'static str;
    fn describe(&self) -> &'static str;
    fn variants(&self, base: &RunConfig) -> Vec<Variant>;
}

fn with_mode(base: &RunConfig, mode: &str) -> RunConfig {
    let mut run = base.clone();
    run.train.mode = mode.to_string();
    run
}

fn prior_name(p: PriorSet) -> &'static str {
    match p {
        PriorSet::Landmarks => "landmarks",
        PriorSet::Parsing => "parsing",
        PriorSet::Both => "both",
    }
}

struct Priors;

impl Sweep for Priors {
    fn name(&self) -> &'static str {
        "priors"
    }
    fn describe(&self) -> &'static str {
        "baseline_v1, then baseline_v2 and fsrnet with landmark, parsing or both priors"
    }
    fn variants(&self, base: &RunConfig) -> Vec<Variant> {
        let mut out = vec![Variant {
            label: "baseline_v1".into(),
            run: with_mode(base, "baseline_v1"),
        }];
        for mode in ["baseline_v2", "fsrnet"] {
            for p in [PriorSet::Landmarks, PriorSet::Parsing, PriorSet::Both] {
                let mut run = with_mode(base, mode);
                run.net.priors = p;
                out.push(Variant {
                    label: format!("{mode}/{}", prior_name(p)),
                    run,
                });
            }
        }
        out
    }
}

struct Supervision;

impl Sweep for Supervision {
    fn name(&self) -> &'static str {
        "supervision"
    }
    fn describe(&self) -> &'static str {
        "baseline_v1, baseline_v2 and fsrnet with the configured priors"
    }
    fn variants(&self, base: &RunConfig) -> Vec<Variant> {
        ["baseline_v1", "baseline_v2", "fsrnet"]
            .iter()
            .map(|m| Variant {
                label: m.to_string(),
                run: with_mode(base, m),
            })
            .collect()
    }
}

struct Hourglass;

impl Sweep for Hourglass {
    fn name(&self) -> &'static str {
        "hourglass"
    }
    fn describe(&self) -> &'static str {
        "fsrnet with 1, 2 and 4 stacked hourglass blocks"
    }
    fn variants(&self, base: &RunConfig) -> Vec<Variant> {
        [1, 2, 4]
            .iter()
            .map(|&h| {
                let mut run = with_mode(base, "fsrnet");
                run.net.num_hourglass = h;
                Variant {
                    label: format!("h={h}"),
                    run,
                }
            })
            .collect()
    }
}

struct GtPrior;

impl Sweep for GtPrior {
    fn name(&self) -> &'static str {
        "gt-prior"
    }
    fn describe(&self) -> &'static str {
        "ground-truth priors against the channel-matched prior-free control"
    }
    fn variants(&self, base: &RunConfig) -> Vec<Variant> {
        ["gt_prior", "gt_prior_baseline"]
            .iter()
            .map(|m| Variant {
                label: m.to_string(),
                run: with_mode(base, m),
            })
            .collect()
    }
}

pub fn registry() -> Vec<Box<dyn Sweep>> {
    vec![Box::new(Priors), Box::new(Supervision), Box::new(Hourglass), Box::new(GtPrior)]
}

pub fn sweep_names() -> Vec<&'static str> {
    registry().iter().map(|s| s.name()).collect()
}

pub fn lookup(name: &str) -> Result<Box<dyn Sweep>> {
    registry()
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| config_err!("unknown sweep {name:?} (one of {})", sweep_names().join(", ")))
}

/// Directory name shared by identical variants across sweeps.
pub fn run_key(run: &RunConfig) -> String {
    format!(
        "{}_{}_h{}",
        run.train.mode,
        prior_name(run.net.priors),
        run.net.num_hourglass
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub variant: String,
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub nrmse: Option<f64>,
    pub checkpoint_hash: Option<String>,
    /// The run was found on disk rather than trained.
    pub reused: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub median_psnr: f64,
    pub median_ssim: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub code_version: String,
    pub sweep: String,
    pub corpus_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<VariantSummary>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl SweepReport {
    pub fn summary_of(&self, variant: &str) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == variant)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Plain-text table: one line per variant, PSNR per seed then medians.
    pub fn table(&self) -> String {
        let width = self.summary.iter().map(|s| s.variant.len()).max().unwrap_or(7).max(7);
        let mut out = format!("{:<width$}", "variant");
        for s in &self.seeds {
            out += &format!("  {:>9}", format!("seed {s}"));
        }
        out += &format!("  {:>11}  {:>11}\n", "median PSNR", "median SSIM");
        for s in &self.summary {
            out += &format!("{:<width$}", s.variant);
            for p in &s.psnr {
                out += &format!("  {p:>9.3}");
            }
            out += &format!("  {:>11.3}  {:>11.4}\n", s.median_psnr, s.median_ssim);
        }
        out
    }
}

fn reusable(dir: &Path, run: &RunConfig, corpus_hash: &str) -> bool {
    match read_checkpoint_state(&dir.join("final")) {
        Ok(st) => {
            st.corpus_hash == corpus_hash
                && st.step == run.train.max_steps
                && st.run_config == run.to_flat_value()
                && st.code_version == CODE_VERSION
        }
        Err(_) => false,
    }
}

/// Train and score every variant of `sweep` for each seed.
/// `progress` receives one line per finished run.
pub fn run_sweep(
    sweep: &dyn Sweep,
    base: &RunConfig,
    corpus: &Corpus,
    seeds: &[u64],
    out: &Path,
    mut progress: impl FnMut(&str),
) -> Result<SweepReport> {
    if seeds.is_empty() {
        return Err(config_err!("a sweep needs at least one seed"));
    }
    let corpus_hash = corpus.meta.hash.clone();
    let mut train: Option<Vec<Sample>> = None;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for variant in sweep.variants(base) {
        variant.run.validate()?;
        let key = run_key(&variant.run);
        let (mut psnr, mut ssim) = (Vec::new(), Vec::new());
        for &seed in seeds {
            let mut run = variant.run.clone();
            run.train.seed = seed;
            let dir = out.join(&key).join(format!("seed{seed}"));
            run.out_dir = dir.to_string_lossy().into_owned();
            let reused = reusable(&dir, &run, &corpus_hash);
            if !reused {
                if train.is_none() {
                    train = Some(corpus.load_split(Split::Train)?);
                }
                let samples = train.clone().expect("loaded above");
                run_training(run, samples, corpus_hash.clone(), None, |_| {})?;
            }
            let est = estimator("checkpoint", Some(&dir.join("final")), false)?;
            let report = evaluate(est.as_ref(), corpus, Split::Test, None)?;
            let row = SweepRow {
                variant: variant.label.clone(),
                seed,
                psnr: report.mean("psnr").unwrap_or(f64::NAN),
                ssim: report.mean("ssim").unwrap_or(f64::NAN),
                nrmse: report.mean("nrmse"),
                checkpoint_hash: report.checkpoint_hash.clone(),
                reused,
            };
            progress(&format!(
                "{} seed {}: psnr {:.3} ssim {:.4}{}",
                row.variant,
                seed,
                row.psnr,
                row.ssim,
                if reused { " (reused)" } else { "" }
            ));
            psnr.push(row.psnr);
            ssim.push(row.ssim);
            rows.push(row);
        }
        summary.push(VariantSummary {
            variant: variant.label,
            median_psnr: median(&psnr),
            median_ssim: median(&ssim),
            psnr,
            ssim,
        });
    }
    Ok(SweepReport {
        code_version: CODE_VERSION.to_string(),
        sweep: sweep.name().to_string(),
        corpus_hash,
        seeds: seeds.to_vec(),
        rows,
        summary,
    })
}
