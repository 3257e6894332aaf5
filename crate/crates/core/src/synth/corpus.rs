//! On-disk synthetic corpus: generation, manifest, loading.
//!
//! Layout of a corpus directory:
//! ```text
//! corpus.json            generation settings, provenance, content hash
//! manifest.jsonl         one {id, seed, files, split} object per sample
//! {split}/{id}/hr.ppm    HR target
//! {split}/{id}/lr.ppm    downscaled input (hr / scale)
//! {split}/{id}/heat_XX.pgm, parse_XX.pgm, landmarks.json
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use facesr_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::augment::Dihedral;
use super::pnm;
use super::render::{heatmap_sigma, render_heatmaps, render_scene, to_prior_grid, ParsingLayout};
use super::resize::{bicubic_resize, downscale};
use super::scene::{FaceScene, MAX_LANDMARKS};
use crate::error::{config_err, data_err, Error, Result};
use crate::nets::{PriorSet, CODE_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub hr_size: usize,
    pub scale_factor: usize,
    pub num_landmarks: usize,
    pub parsing_layout: ParsingLayout,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            hr_size: 64,
            scale_factor: 8,
            num_landmarks: 5,
            parsing_layout: ParsingLayout::Global5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale_factor < 2 || self.hr_size % self.scale_factor != 0 {
            return Err(config_err!(
                "hr size {} is not divisible by scale factor {}",
                self.hr_size,
                self.scale_factor
            ));
        }
        if self.hr_size % 2 != 0 || self.hr_size / self.scale_factor < 4 {
            return Err(config_err!(
                "hr size {} must be even with a low-resolution side of at least 4",
                self.hr_size
            ));
        }
        if self.num_landmarks == 0 || self.num_landmarks > MAX_LANDMARKS {
            return Err(config_err!("landmark count must be in 1..={MAX_LANDMARKS}"));
        }
        Ok(())
    }

    pub fn lr_size(&self) -> usize {
        self.hr_size / self.scale_factor
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(config_err!("unknown split {other:?} (train|test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    /// Paths relative to the corpus directory.
    pub files: Vec<String>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub code_version: String,
    pub synth: SynthConfig,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// SHA-256 over the manifest and every listed file, in manifest order.
    pub hash: String,
    /// Configuration of the run that built the corpus.
    pub run_config: serde_json::Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LandmarkFile {
    landmarks: Vec<[usize; 2]>,
    /// Landmarks whose heatmap fell outside the prior grid.
    out_of_frame: Vec<bool>,
    scene: FaceScene,
}

/// One training or evaluation record, all tensors in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, hr/scale, hr/scale]`
    pub lr: Tensor<f32>,
    /// `[3, hr, hr]`, `lr` bicubic-upscaled: the network input.
    pub lr_up: Tensor<f32>,
    /// `[3, hr, hr]`
    pub hr: Tensor<f32>,
    /// `[K, hr/2, hr/2]`
    pub heatmaps: Tensor<f32>,
    /// `[P, hr/2, hr/2]`
    pub parsing: Tensor<f32>,
    /// (row, col) on the HR grid.
    pub landmarks: Vec<[usize; 2]>,
}

impl Sample {
    /// Prior target stack in (landmarks, parsing) channel order.
    pub fn prior_target(&self, priors: PriorSet) -> Result<Tensor<f32>> {
        let mut parts: Vec<&Tensor<f32>> = Vec::new();
        if priors.landmarks() {
            parts.push(&self.heatmaps);
        }
        if priors.parsing() {
            parts.push(&self.parsing);
        }
        concat_leading(&parts)
    }

    pub fn augment(&self, g: Dihedral) -> Result<Sample> {
        Ok(Sample {
            id: self.id.clone(),
            lr: g.apply(&self.lr)?,
            lr_up: g.apply(&self.lr_up)?,
            hr: g.apply(&self.hr)?,
            heatmaps: g.apply(&self.heatmaps)?,
            parsing: g.apply(&self.parsing)?,
            landmarks: g.apply_landmarks(&self.landmarks, self.hr.shape()[1]),
        })
    }
}

/// Concatenate `[C_i, H, W]` tensors along the leading axis.
pub fn concat_leading(parts: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = parts.first().ok_or_else(|| config_err!("nothing to concatenate"))?;
    let tail = &first.shape()[1..];
    let mut lead = 0;
    let mut data = Vec::new();
    for p in parts {
        if &p.shape()[1..] != tail {
            return Err(config_err!("cannot stack {:?} with {:?}", p.shape(), first.shape()));
        }
        lead += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![lead];
    shape.extend_from_slice(tail);
    Ok(Tensor::new(shape, data)?)
}

/// Bicubic pre-upscaling of a low-resolution input, clamped to [0, 1].
pub fn upscale_input(lr: &Tensor<f32>, hr: usize) -> Result<Tensor<f32>> {
    Ok(bicubic_resize(lr, hr, hr)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Fully rendered sample before it is written to disk.
pub struct Generated {
    pub entry: ManifestEntry,
    pub sample: Sample,
    pub scene: FaceScene,
    pub out_of_frame: Vec<bool>,
}

/// Render one scene into a quantized sample, exactly as the corpus stores it.
pub fn generate_sample(id: &str, seed: u64, split: Split, cfg: &SynthConfig) -> Result<Generated> {
    let scene = FaceScene::random(seed);
    let r = render_scene(&scene, cfg.hr_size, cfg.num_landmarks, cfg.parsing_layout)?;
    let hr = pnm::quantize(&r.image);
    let lr = pnm::quantize(&downscale(&hr, cfg.scale_factor)?);
    let lr_up = upscale_input(&lr, cfg.hr_size)?;
    let side = cfg.hr_size / 2;
    let (heat, out_of_frame) = render_heatmaps(&to_prior_grid(&r.landmarks), side, heatmap_sigma(cfg.hr_size))?;
    let heatmaps = pnm::quantize(&heat);
    let mut files = vec!["hr.ppm".to_string(), "lr.ppm".to_string()];
    files.extend((0..cfg.num_landmarks).map(|k| format!("heat_{k:02}.pgm")));
    files.extend((0..cfg.parsing_layout.channels()).map(|k| format!("parse_{k:02}.pgm")));
    files.push("landmarks.json".to_string());
    let files = files.iter().map(|f| format!("{}/{id}/{f}", split.name())).collect();
    Ok(Generated {
        entry: ManifestEntry {
            id: id.to_string(),
            seed,
            files,
            split,
        },
        sample: Sample {
            id: id.to_string(),
            lr,
            lr_up,
            hr,
            heatmaps,
            parsing: r.parsing,
            landmarks: r.landmarks,
        },
        scene,
        out_of_frame,
    })
}

fn channel(t: &Tensor<f32>, k: usize) -> Tensor<f32> {
    let s = t.shape();
    let n = s[1] * s[2];
    Tensor::new(vec![s[1], s[2]], t.data()[k * n..(k + 1) * n].to_vec()).expect("channel slice")
}

fn sample_file_bytes(g: &Generated) -> Result<Vec<Vec<u8>>> {
    let s = &g.sample;
    let mut out = vec![pnm::encode_ppm(&s.hr)?, pnm::encode_ppm(&s.lr)?];
    for k in 0..s.heatmaps.shape()[0] {
        out.push(pnm::encode_pgm(&channel(&s.heatmaps, k))?);
    }
    for k in 0..s.parsing.shape()[0] {
        out.push(pnm::encode_pgm(&channel(&s.parsing, k))?);
    }
    let lm = LandmarkFile {
        landmarks: s.landmarks.clone(),
        out_of_frame: g.out_of_frame.clone(),
        scene: g.scene.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&lm)?;
    json.push(b'\n');
    out.push(json);
    Ok(out)
}

/// Scene seeds for both splits; the two sets never intersect.
pub fn scene_seeds(seed: u64, n_train: usize, n_test: usize) -> (Vec<u64>, Vec<u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut all = Vec::with_capacity(n_train + n_test);
    while all.len() < n_train + n_test {
        let s: u64 = rng.gen();
        if seen.insert(s) {
            all.push(s);
        }
    }
    let test = all.split_off(n_train);
    (all, test)
}

/// Generate a corpus into `out`. An existing corpus there is replaced only
/// with `overwrite`.
pub fn build_corpus(
    out: &Path,
    n_train: usize,
    n_test: usize,
    seed: u64,
    cfg: &SynthConfig,
    overwrite: bool,
    run_config: serde_json::Value,
) -> Result<CorpusMeta> {
    cfg.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(config_err!("corpus needs at least one train and one test sample"));
    }
    if out.exists() {
        let nonempty = std::fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if nonempty && !overwrite {
            return Err(data_err!("{} already exists (use --force to overwrite)", out.display()));
        }
        if nonempty {
            for split in [Split::Train, Split::Test] {
                let d = out.join(split.name());
                if d.exists() {
                    std::fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                }
            }
        }
    }
    let (train, test) = scene_seeds(seed, n_train, n_test);
    let jobs: Vec<(String, u64, Split)> = train
        .iter()
        .enumerate()
        .map(|(i, &s)| (format!("train_{i:05}"), s, Split::Train))
        .chain(test.iter().enumerate().map(|(i, &s)| (format!("test_{i:05}"), s, Split::Test)))
        .collect();
    let rendered: Vec<(ManifestEntry, Vec<Vec<u8>>)> = jobs
        .par_iter()
        .map(|(id, s, split)| {
            let g = generate_sample(id, *s, *split, cfg)?;
            let bytes = sample_file_bytes(&g)?;
            Ok((g.entry, bytes))
        })
        .collect::<Result<_>>()?;

    let mut manifest = Vec::new();
    for (entry, _) in &rendered {
        manifest.extend(serde_json::to_vec(entry)?);
        manifest.push(b'\n');
    }
    let mut hasher = Sha256::new();
    hasher.update(&manifest);
    for (entry, files) in &rendered {
        let dir = out.join(entry.split.name()).join(&entry.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (rel, bytes) in entry.files.iter().zip(files) {
            hasher.update(bytes);
            pnm::write_file(&out.join(rel), bytes)?;
        }
    }
    pnm::write_file(&out.join("manifest.jsonl"), &manifest)?;
    let meta = CorpusMeta {
        code_version: CODE_VERSION.to_string(),
        synth: cfg.clone(),
        seed,
        n_train,
        n_test,
        hash: hex(&hasher.finalize()),
        run_config,
    };
    let mut json = serde_json::to_vec_pretty(&meta)?;
    json.push(b'\n');
    pnm::write_file(&out.join("corpus.json"), &json)?;
    Ok(meta)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A corpus opened from disk.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub meta: CorpusMeta,
    pub entries: Vec<ManifestEntry>,
}

impl Corpus {
    pub fn open(dir: &Path) -> Result<Corpus> {
        let meta_path = dir.join("corpus.json");
        if !meta_path.exists() {
            return Err(data_err!("{} is not a corpus (no corpus.json)", dir.display()));
        }
        let meta: CorpusMeta = serde_json::from_slice(&pnm::read_file(&meta_path)?)
            .map_err(|e| data_err!("{}: {e}", meta_path.display()))?;
        let manifest_path = dir.join("manifest.jsonl");
        let text = String::from_utf8(pnm::read_file(&manifest_path)?)
            .map_err(|_| data_err!("{}: not UTF-8", manifest_path.display()))?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| data_err!("{}: {e}", manifest_path.display())))
            .collect::<Result<Vec<ManifestEntry>>>()?;
        if entries.len() != meta.n_train + meta.n_test {
            return Err(data_err!(
                "manifest lists {} samples, corpus.json expects {}",
                entries.len(),
                meta.n_train + meta.n_test
            ));
        }
        Ok(Corpus {
            dir: dir.to_path_buf(),
            meta,
            entries,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn load_sample(&self, entry: &ManifestEntry) -> Result<Sample> {
        let cfg = &self.meta.synth;
        let path = |name: &str| -> Result<PathBuf> {
            entry
                .files
                .iter()
                .find(|f| f.rsplit('/').next() == Some(name))
                .map(|f| self.dir.join(f))
                .ok_or_else(|| data_err!("sample {} lists no {name}", entry.id))
        };
        let hr = pnm::read_ppm(&path("hr.ppm")?)?;
        let lr = pnm::read_ppm(&path("lr.ppm")?)?;
        let (side, lr_side) = (cfg.hr_size, cfg.lr_size());
        if hr.shape() != [3, side, side] || lr.shape() != [3, lr_side, lr_side] {
            return Err(data_err!(
                "sample {}: image sizes {:?}/{:?} do not match corpus settings",
                entry.id,
                hr.shape(),
                lr.shape()
            ));
        }
        let stack = |prefix: &str, n: usize| -> Result<Tensor<f32>> {
            let maps = (0..n)
                .map(|k| {
                    let m = pnm::read_pgm(&path(&format!("{prefix}_{k:02}.pgm"))?)?;
                    if m.shape() != [side / 2, side / 2] {
                        return Err(data_err!("sample {}: map {prefix}_{k:02} has shape {:?}", entry.id, m.shape()));
                    }
                    Ok(m.reshape(vec![1, side / 2, side / 2])?)
                })
                .collect::<Result<Vec<_>>>()?;
            concat_leading(&maps.iter().collect::<Vec<_>>())
        };
        let heatmaps = stack("heat", cfg.num_landmarks)?;
        let parsing = stack("parse", cfg.parsing_layout.channels())?;
        let lm_path = path("landmarks.json")?;
        let lm: LandmarkFile = serde_json::from_slice(&pnm::read_file(&lm_path)?)
            .map_err(|e| data_err!("{}: {e}", lm_path.display()))?;
        let lr_up = upscale_input(&lr, side)?;
        Ok(Sample {
            id: entry.id.clone(),
            lr,
            lr_up,
            hr,
            heatmaps,
            parsing,
            landmarks: lm.landmarks,
        })
    }

    /// Every sample of a split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        let entries = self.split(split);
        if entries.is_empty() {
            return Err(data_err!("corpus split {} is empty", split.name()));
        }
        entries.par_iter().map(|e| self.load_sample(e)).collect()
    }
}
