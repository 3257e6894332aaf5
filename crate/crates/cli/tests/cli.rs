use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn facesr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facesr")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = facesr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    facesr(args).status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir`, relative path and contents, sorted.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

const TINY: &str = r#"{
  "net.base_channels": 8,
  "net.num_coarse_res_blocks": 1,
  "net.num_encoder_res_blocks": 1,
  "net.num_decoder_res_blocks": 1,
  "net.num_hourglass": 1,
  "net.hourglass_levels": 1,
  "net.disc_base_channels": 8,
  "train.batch_size": 2
}"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        let f = Fixture { dir };
        ok(&["gen-data", "--out", s(&f.p("corpus")), "--n-train", "6", "--n-test", "3", "--hr", "32", "--scale", "4", "--seed", "3"]);
        f
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, out: &str, extra: &[&str]) {
        let cfg = self.p("tiny.json");
        let corpus = self.p("corpus");
        let out = self.p(out);
        let mut args = vec!["--config", s(&cfg), "train", "--corpus", s(&corpus), "--out", s(&out), "--log-every", "0"];
        args.extend_from_slice(extra);
        ok(&args);
    }
}

#[test]
fn gen_data_is_reproducible_and_validated() {
    let f = Fixture::new();
    let again = f.p("again");
    let out = ok(&["gen-data", "--out", s(&again), "--n-train", "6", "--n-test", "3", "--hr", "32", "--scale", "4", "--seed", "3"]);
    assert!(out.contains("6 train + 3 test"));
    assert_eq!(tree(&f.p("corpus")), tree(&again));

    assert_eq!(code(&["gen-data", "--out", s(&again), "--n-train", "2", "--n-test", "1", "--hr", "32", "--scale", "4"]), 3);
    ok(&["gen-data", "--out", s(&again), "--n-train", "2", "--n-test", "1", "--hr", "32", "--scale", "4", "--force"]);
    assert_eq!(code(&["gen-data", "--out", s(&f.p("bad")), "--hr", "60", "--scale", "8"]), 2);
}

#[test]
fn config_errors_map_to_exit_codes() {
    let f = Fixture::new();
    let corpus = f.p("corpus");
    assert_eq!(code(&["--set", "net.nope=1", "train", "--corpus", s(&corpus)]), 2);
    assert_eq!(code(&["train", "--corpus", s(&f.p("missing"))]), 3);
    assert_eq!(code(&["train", "--corpus", s(&corpus), "--mode", "srgan"]), 2);
    assert_eq!(code(&["--set", "net.hr_size=48", "train", "--corpus", s(&corpus)]), 3);
    assert_eq!(code(&["eval", "--corpus", s(&corpus)]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
}

#[test]
fn train_infer_eval_round_trip() {
    let f = Fixture::new();
    f.train("run", &["--mode", "fsrnet", "--steps", "4", "--checkpoint-every", "2", "--lr", "1e-3"]);
    let log = std::fs::read_to_string(f.p("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(log.lines().next().unwrap().contains("\"train.learning_rate\":0.001"));
    assert!(f.p("run/checkpoints/step_000002/generator.fsrt").exists());

    let input = f.p("corpus/test/test_00000/lr.ppm");
    let out = ok(&["infer", "--checkpoint", s(&f.p("run/final")), "--input", s(&input), "--out", s(&f.p("inf"))]);
    assert!(out.contains(" ms per image"), "{out}");
    for file in ["fine.ppm", "coarse.ppm", "heatmaps/00.pgm", "heatmaps/04.pgm", "parsing/04.pgm"] {
        assert!(f.p("inf").join(file).exists(), "{file} missing");
    }
    let fused = ok(&["infer", "--checkpoint", s(&f.p("run/final")), "--input", s(&input), "--out", s(&f.p("inf_tta")), "--tta"]);
    assert!(fused.contains("8-pass"));
    let hr_input = f.p("corpus/test/test_00000/hr.ppm");
    ok(&["infer", "--checkpoint", s(&f.p("run/final")), "--input", s(&hr_input), "--out", s(&f.p("inf_hr"))]);
    let wrong = f.p("corpus/wrong.ppm");
    std::fs::write(&wrong, b"P6\n5 5\n255\n".iter().copied().chain([0u8; 75]).collect::<Vec<u8>>()).unwrap();
    assert_eq!(code(&["infer", "--checkpoint", s(&f.p("run/final")), "--input", s(&wrong), "--out", s(&f.p("x"))]), 2);

    let corpus = f.p("corpus");
    let a = ok(&["eval", "--corpus", s(&corpus), "--checkpoint", s(&f.p("run/final")), "--grids", s(&f.p("grids"))]);
    let b = ok(&["eval", "--corpus", s(&corpus), "--checkpoint", s(&f.p("run/final"))]);
    assert_eq!(a, b);
    let report: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 3);
    assert!(report["checkpoint_hash"].is_string());
    assert!(f.p("grids/test_00000_grid.ppm").exists());

    let bic = ok(&["eval", "--corpus", s(&corpus), "--baseline", "bicubic"]);
    let bic: serde_json::Value = serde_json::from_str(&bic).unwrap();
    assert!(bic["checkpoint_hash"].is_null());

    let cmp = f.p("cmp.json");
    ok(&[
        "eval", "--corpus", s(&corpus), "--compare", s(&f.p("run/final")),
        s(&f.p("run/checkpoints/step_000002")), "--out", s(&cmp),
    ]);
    let cmp: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(cmp).unwrap()).unwrap();
    let rows = cmp["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_ne!(rows[0]["run"], rows[1]["run"]);
    assert!(rows[0]["psnr"].is_f64());
}

#[test]
fn every_training_mode_runs() {
    let f = Fixture::new();
    for mode in ["fsrnet", "fsrgan", "baseline_v1", "baseline_v2", "gt_prior", "gt_prior_baseline"] {
        f.train(mode, &["--mode", mode, "--steps", "2"]);
        let out = ok(&["eval", "--corpus", s(&f.p("corpus")), "--checkpoint", s(&f.p(mode).join("final"))]);
        assert!(out.contains("\"psnr\""), "{mode}");
    }
    let gt = f.p("gt_prior/final");
    let input = f.p("corpus/test/test_00000/lr.ppm");
    assert_eq!(code(&["infer", "--checkpoint", s(&gt), "--input", s(&input), "--out", s(&f.p("x"))]), 2);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let f = Fixture::new();
    f.train("full", &["--steps", "6", "--seed", "4"]);
    f.train("part", &["--steps", "3", "--seed", "4", "--checkpoint-every", "3"]);
    let ck = f.p("part/checkpoints/step_000003");
    f.train("part", &["--steps", "6", "--seed", "4", "--checkpoint-every", "3", "--resume", s(&ck)]);
    for file in ["generator.fsrt", "optimizer.fsrt"] {
        assert_eq!(
            std::fs::read(f.p("full/final").join(file)).unwrap(),
            std::fs::read(f.p("part/final").join(file)).unwrap()
        );
    }
    let body = |p: PathBuf| std::fs::read_to_string(p).unwrap().lines().skip(1).map(String::from).collect::<Vec<_>>();
    assert_eq!(body(f.p("full/train_log.jsonl")), body(f.p("part/train_log.jsonl")));

    let cfg = f.p("tiny.json");
    let corpus = f.p("corpus");
    let out = f.p("part");
    let args = ["--config", s(&cfg), "train", "--corpus", s(&corpus), "--out", s(&out), "--steps", "6", "--seed", "4", "--lr", "0.5", "--resume", s(&ck)];
    assert_eq!(code(&args), 2);
}

#[test]
fn thread_count_does_not_change_artifacts() {
    let f = Fixture::new();
    let cfg = f.p("tiny.json");
    let corpus = f.p("corpus");
    for (threads, out) in [("1", "t1"), ("3", "t3")] {
        let out = f.p(out);
        ok(&["--threads", threads, "--config", s(&cfg), "train", "--corpus", s(&corpus), "--out", s(&out), "--steps", "3", "--log-every", "0"]);
    }
    let strip = |dir: &Path| {
        tree(dir)
            .into_iter()
            .filter(|(p, _)| !p.ends_with("run_config.json"))
            .map(|(p, b)| (p, String::from_utf8_lossy(&b).replace("/t1", "/tX").replace("/t3", "/tX").into_bytes()))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&f.p("t1")), strip(&f.p("t3")));
}

#[test]
fn gradcheck_reports_and_fails_on_faults() {
    let out = ok(&["gradcheck", "--case", "conv2d", "--case", "sigmoid", "--seeds", "2"]);
    assert!(out.contains("2 of 2 cases passed"));
    let f64_out = ok(&["gradcheck", "--f64", "--case", "mse_loss", "--seeds", "1"]);
    assert!(f64_out.contains("1e-6"));
    assert_eq!(code(&["gradcheck", "--case", "sigmoid", "--seeds", "1", "--inject-fault", "sigmoid"]), 4);
    assert_eq!(code(&["gradcheck", "--case", "softmax"]), 2);
}

#[test]
fn ablate_reports_medians_and_reuses_runs() {
    let f = Fixture::new();
    let cfg = f.p("tiny.json");
    let corpus = f.p("corpus");
    let out = f.p("sweep");
    let args = ["--config", s(&cfg), "ablate", "--sweep", "gt-prior", "--seeds", "2", "--steps", "2", "--corpus", s(&corpus), "--out", s(&out)];
    let stdout = ok(&args);
    let hash = std::fs::read_to_string(corpus.join("corpus.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("gt-prior.json")).unwrap()).unwrap();
    assert!(hash.contains(report["corpus_hash"].as_str().unwrap()));
    assert!(stdout.contains(report["corpus_hash"].as_str().unwrap()));
    assert!(stdout.contains("median PSNR"));
    let summary = report["summary"].as_array().unwrap();
    assert_eq!(summary.len(), 2);
    assert_eq!(summary[0]["psnr"].as_array().unwrap().len(), 2);
    assert!(report["rows"].as_array().unwrap().iter().all(|r| r["reused"] == false));

    ok(&args);
    let again: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("gt-prior.json")).unwrap()).unwrap();
    assert!(again["rows"].as_array().unwrap().iter().all(|r| r["reused"] == true));
    assert_eq!(again["summary"], report["summary"]);
    assert_eq!(code(&["ablate", "--sweep", "depth", "--corpus", s(&corpus)]), 2);
}
