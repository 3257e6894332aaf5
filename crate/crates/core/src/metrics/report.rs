//! Estimators and the evaluation report.

use std::collections::BTreeMap;
use std::path::Path;

use facesr_tensor::Tensor;
use rayon::prelude::*;
use serde::{Serialize, Serializer};

use super::image::{parsing_metrics, psnr, ssim, PARSING_MSE_SCALE};
use super::landmarks::{landmarks_from_heatmaps, nrmse, NRMSE_SCALE};
use super::tta::fuse_dihedral;
use crate::error::{config_err, data_err, Result};
use crate::model::{Checkpoint, Prediction};
use crate::nets::CODE_VERSION;
use crate::synth::{pnm, Corpus, Sample, Split};

/// Something that produces super-resolved images (and optionally prior
/// maps) for corpus samples.
pub trait Estimator: Send + Sync {
    fn name(&self) -> String;
    /// Where the reported prior maps come from.
    fn prior_source(&self) -> &'static str;
    fn checkpoint_hash(&self) -> Option<String> {
        None
    }
    fn predict(&self, s: &Sample) -> Result<Prediction>;
}

/// Bicubic upscaling of the low-resolution input.
pub struct Bicubic;

impl Estimator for Bicubic {
    fn name(&self) -> String {
        "bicubic".into()
    }
    fn prior_source(&self) -> &'static str {
        "none"
    }
    fn predict(&self, s: &Sample) -> Result<Prediction> {
        Ok(Prediction {
            fine: s.lr_up.clone(),
            coarse: None,
            heatmaps: None,
            parsing: None,
        })
    }
}

/// Returns the ground truth; every metric reaches its ideal value.
pub struct Target;

impl Estimator for Target {
    fn name(&self) -> String {
        "target".into()
    }
    fn prior_source(&self) -> &'static str {
        "ground truth"
    }
    fn predict(&self, s: &Sample) -> Result<Prediction> {
        Ok(Prediction {
            fine: s.hr.clone(),
            coarse: None,
            heatmaps: Some(s.heatmaps.clone()),
            parsing: Some(s.parsing.clone()),
        })
    }
}

pub struct CheckpointEstimator {
    pub checkpoint: Checkpoint,
    pub name: String,
}

impl Estimator for CheckpointEstimator {
    fn name(&self) -> String {
        self.name.clone()
    }
    fn prior_source(&self) -> &'static str {
        if self.checkpoint.layout.has_prior_net() {
            "prior estimation branch"
        } else {
            "none"
        }
    }
    fn checkpoint_hash(&self) -> Option<String> {
        Some(self.checkpoint.hash.clone())
    }
    fn predict(&self, s: &Sample) -> Result<Prediction> {
        self.checkpoint.predict_sample(s)
    }
}

/// Averages an estimator's outputs over the eight dihedral transforms of
/// each sample.
pub struct Fused(pub Box<dyn Estimator>);

impl Estimator for Fused {
    fn name(&self) -> String {
        format!("{}+tta", self.0.name())
    }
    fn prior_source(&self) -> &'static str {
        self.0.prior_source()
    }
    fn checkpoint_hash(&self) -> Option<String> {
        self.0.checkpoint_hash()
    }
    fn predict(&self, s: &Sample) -> Result<Prediction> {
        let mut like = None;
        let fused = fuse_dihedral(|g| {
            let p = self.0.predict(&s.augment(g)?)?;
            let t = p.tensors().into_iter().cloned().collect();
            like.get_or_insert(p);
            Ok(t)
        })?;
        Ok(Prediction::from_tensors(like.as_ref().expect("eight passes ran"), fused))
    }
}

pub const ESTIMATOR_KINDS: [&str; 3] = ["bicubic", "target", "checkpoint"];

/// Build an estimator by kind. `checkpoint` kinds need a path.
pub fn estimator(kind: &str, checkpoint: Option<&Path>, tta: bool) -> Result<Box<dyn Estimator>> {
    let base: Box<dyn Estimator> = match kind {
        "bicubic" => Box::new(Bicubic),
        "target" => Box::new(Target),
        "checkpoint" => {
            let path = checkpoint.ok_or_else(|| config_err!("checkpoint estimator needs a path"))?;
            Box::new(CheckpointEstimator {
                checkpoint: Checkpoint::load(path)?,
                name: run_name(path),
            })
        }
        other => {
            return Err(config_err!(
                "unknown estimator {other:?} (expected one of {})",
                ESTIMATOR_KINDS.join(", ")
            ))
        }
    };
    Ok(if tta { Box::new(Fused(base)) } else { base })
}

/// Display name of a checkpoint path: the run directory when the path
/// points inside `<run>/final/`, else the file stem.
pub fn run_name(path: &Path) -> String {
    let dir = if path.is_dir() { Some(path) } else { path.parent() };
    let parts: Vec<String> = dir
        .into_iter()
        .flat_map(|d| d.components().rev().take(2))
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    match parts.as_slice() {
        [last, run, ..] if last == "final" || last.starts_with("step_") => {
            if last == "final" {
                run.clone()
            } else {
                format!("{run}@{last}")
            }
        }
        [last, ..] => last.clone(),
        [] => path.display().to_string(),
    }
}

fn ser_metric<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn ser_opt_metric<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => ser_metric(v, s),
        None => s.serialize_none(),
    }
}

/// Metrics for one test image. Infinite PSNR is written as `"inf"`.
#[derive(Clone, Debug, Serialize)]
pub struct Row {
    pub id: String,
    #[serde(serialize_with = "ser_metric")]
    pub psnr: f64,
    pub ssim: f64,
    pub nrmse: Option<f64>,
    /// Landmarks whose heatmap had no positive value.
    pub nrmse_flagged: usize,
    #[serde(serialize_with = "ser_opt_metric")]
    pub parsing_psnr: Option<f64>,
    pub parsing_ssim: Option<f64>,
    pub parsing_mse: Option<f64>,
}

/// Mean over rows with a finite value; `excluded` counts the rest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub count: usize,
    pub excluded: usize,
}

impl Aggregate {
    pub fn of(values: impl Iterator<Item = Option<f64>>) -> Aggregate {
        let mut sum = 0.0;
        let mut count = 0;
        let mut excluded = 0;
        for v in values {
            match v {
                Some(v) if v.is_finite() => {
                    sum += v;
                    count += 1;
                }
                _ => excluded += 1,
            }
        }
        Aggregate {
            mean: (count > 0).then(|| sum / count as f64),
            count,
            excluded,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Conventions {
    pub psnr: &'static str,
    pub ssim: &'static str,
    pub nrmse: &'static str,
    pub nrmse_scale: f64,
    pub parsing: &'static str,
    pub parsing_mse_scale: f64,
    pub prior_source: &'static str,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub code_version: String,
    pub estimator: String,
    pub checkpoint_hash: Option<String>,
    pub corpus_hash: String,
    pub split: String,
    pub conventions: Conventions,
    pub aggregates: BTreeMap<String, Aggregate>,
    pub rows: Vec<Row>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.aggregates.get(metric).and_then(|a| a.mean)
    }
}

fn score(s: &Sample, p: &Prediction) -> Result<Row> {
    let (psnr_v, ssim_v) = (psnr(&p.fine, &s.hr)?, ssim(&p.fine, &s.hr)?);
    let (nrmse_v, flagged) = match &p.heatmaps {
        Some(h) => {
            let pred = landmarks_from_heatmaps(h)?;
            let gt: Vec<[f64; 2]> = s.landmarks.iter().map(|&[r, c]| [(r / 2) as f64, (c / 2) as f64]).collect();
            let n = nrmse(&pred, &gt)?;
            (n.value, n.excluded)
        }
        None => (None, 0),
    };
    let parsing = p.parsing.as_ref().map(|m| parsing_metrics(m, &s.parsing)).transpose()?;
    Ok(Row {
        id: s.id.clone(),
        psnr: psnr_v,
        ssim: ssim_v,
        nrmse: nrmse_v,
        nrmse_flagged: flagged,
        parsing_psnr: parsing.map(|p| p.psnr),
        parsing_ssim: parsing.map(|p| p.ssim),
        parsing_mse: parsing.map(|p| p.mse),
    })
}

/// Side-by-side `bicubic | coarse | fine | target` image; a missing coarse
/// output repeats the bicubic panel.
pub fn grid(s: &Sample, p: &Prediction) -> Result<Tensor<f32>> {
    let panels = [&s.lr_up, p.coarse.as_ref().unwrap_or(&s.lr_up), &p.fine, &s.hr];
    let [c, h, w] = [s.hr.shape()[0], s.hr.shape()[1], s.hr.shape()[2]];
    let mut data = Vec::with_capacity(c * h * w * panels.len());
    for ch in 0..c {
        for r in 0..h {
            for t in panels {
                if t.shape() != s.hr.shape() {
                    return Err(config_err!("grid panel has shape {:?}", t.shape()));
                }
                let start = (ch * h + r) * w;
                data.extend(t.data()[start..start + w].iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
    }
    Ok(Tensor::new(vec![c, h, w * panels.len()], data)?)
}

/// Evaluate `est` on one split. Rows are sorted by sample id and images are
/// processed in parallel; the report does not depend on the thread count.
/// With `grids`, a `{id}_grid.ppm` per sample is written there.
pub fn evaluate(est: &dyn Estimator, corpus: &Corpus, split: Split, grids: Option<&Path>) -> Result<MetricReport> {
    let mut entries = corpus.split(split);
    if entries.is_empty() {
        return Err(data_err!("the {} split is empty", split.name()));
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(dir) = grids {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    }
    let rows: Vec<Row> = entries
        .par_iter()
        .map(|e| {
            let s = corpus.load_sample(e)?;
            let p = est.predict(&s)?;
            if let Some(dir) = grids {
                pnm::write_ppm(&dir.join(format!("{}_grid.ppm", s.id)), &grid(&s, &p)?)?;
            }
            score(&s, &p)
        })
        .collect::<Result<_>>()?;
    let mut aggregates = BTreeMap::new();
    aggregates.insert("psnr".into(), Aggregate::of(rows.iter().map(|r| Some(r.psnr))));
    aggregates.insert("ssim".into(), Aggregate::of(rows.iter().map(|r| Some(r.ssim))));
    if rows.iter().any(|r| r.nrmse.is_some() || r.nrmse_flagged > 0) {
        aggregates.insert("nrmse".into(), Aggregate::of(rows.iter().map(|r| r.nrmse)));
    }
    if rows.iter().any(|r| r.parsing_mse.is_some()) {
        aggregates.insert("parsing_psnr".into(), Aggregate::of(rows.iter().map(|r| r.parsing_psnr)));
        aggregates.insert("parsing_ssim".into(), Aggregate::of(rows.iter().map(|r| r.parsing_ssim)));
        aggregates.insert("parsing_mse".into(), Aggregate::of(rows.iter().map(|r| r.parsing_mse)));
    }
    Ok(MetricReport {
        code_version: CODE_VERSION.to_string(),
        estimator: est.name(),
        checkpoint_hash: est.checkpoint_hash(),
        corpus_hash: corpus.meta.hash.clone(),
        split: split.name().to_string(),
        conventions: Conventions {
            psnr: "peak 1, RGB jointly, inputs clamped to [0,1]; identical images give \"inf\", excluded from the mean",
            ssim: "BT.601 luma, 8x8 mean window, stride 1, C1=0.01^2, C2=0.03^2",
            nrmse: "RMS landmark error on the prior grid over the inter-ocular distance (landmarks 0 and 1)",
            nrmse_scale: NRMSE_SCALE,
            parsing: "maps stacked as one multi-channel image; SSIM is the per-channel mean",
            parsing_mse_scale: PARSING_MSE_SCALE,
            prior_source: est.prior_source(),
        },
        aggregates,
        rows,
    })
}
