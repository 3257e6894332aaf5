use facesr_core::metrics::report::{Bicubic, Estimator, Target};
use facesr_core::metrics::*;
use facesr_core::model::Prediction;
use facesr_core::synth::render::to_prior_grid;
use facesr_core::synth::{build_corpus, render_heatmaps, render_scene, Corpus, FaceScene, ParsingLayout, Split, SynthConfig};
use facesr_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture() -> Tensor<f32> {
    render_scene(&FaceScene::canonical(), 64, 5, ParsingLayout::Global5).unwrap().image
}

fn small_corpus(dir: &std::path::Path) -> Corpus {
    let cfg = SynthConfig {
        hr_size: 32,
        scale_factor: 4,
        num_landmarks: 5,
        parsing_layout: ParsingLayout::Global5,
    };
    build_corpus(dir, 3, 4, 11, &cfg, false, serde_json::Value::Null).unwrap();
    Corpus::open(dir).unwrap()
}

#[test]
fn psnr_analytic_values() {
    let zero = Tensor::<f32>::zeros(vec![3, 16, 16]);
    assert_eq!(psnr(&zero, &zero).unwrap(), f64::INFINITY);
    let tenth = Tensor::full(vec![3, 16, 16], 0.1f32);
    assert!((psnr(&zero, &tenth).unwrap() - 20.0).abs() < 1e-6);
    let half = Tensor::full(vec![3, 16, 16], 0.5f32);
    assert!((psnr(&zero, &half).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-9);
    assert!((psnr(&half, &zero).unwrap() - 6.0206).abs() < 1e-4);
    // Values outside [0, 1] are clamped first.
    let over = Tensor::full(vec![3, 16, 16], 1.7f32);
    let one = Tensor::full(vec![3, 16, 16], 1.0f32);
    assert_eq!(psnr(&over, &one).unwrap(), f64::INFINITY);
    assert!(psnr(&zero, &Tensor::zeros(vec![3, 16, 8])).is_err());
}

#[test]
fn ssim_identities() {
    let x = fixture();
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    let y = x.map(|v| (v * 0.8 + 0.05).min(1.0));
    assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
    assert!(ssim(&Tensor::zeros(vec![3, 7, 16]), &Tensor::zeros(vec![3, 7, 16])).is_err());
}

#[test]
fn ssim_of_inverted_half_plane_is_negative() {
    let plane = Tensor::from_fn(vec![3, 16, 16], |i| if (i % 16) < 8 { 0.0 } else { 1.0 });
    let inverted = plane.map(|v| 1.0 - v);
    // Direct computation: windows straddling the edge have correlation -1
    // with equal variances, the rest are constant black vs white.
    let direct = {
        let c1 = 1e-4;
        let c2 = 9e-4;
        let mut total = 0.0;
        for c in 0..=8 {
            let white = (c..c + 8).filter(|&j| j >= 8).count() as f64 / 8.0;
            let (mx, my) = (white, 1.0 - white);
            let v = white * (1.0 - white);
            let s = (2.0 * mx * my + c1) * (2.0 * -v + c2) / ((mx * mx + my * my + c1) * (2.0 * v + c2));
            total += s * 9.0;
        }
        total / 81.0
    };
    let got = ssim(&plane, &inverted).unwrap();
    assert!(got < 0.0, "{got}");
    assert!((got - direct).abs() < 1e-9, "{got} vs {direct}");
}

#[test]
fn metrics_degrade_monotonically_with_noise() {
    let x = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pattern: Vec<f32> = (0..x.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut last = (f64::INFINITY, 1.0 + 1e-9);
    for step in 1..=6 {
        let amp = 0.05 * step as f32;
        let noisy = Tensor::new(x.shape().to_vec(), x.data().iter().zip(&pattern).map(|(v, n)| (v + amp * n).clamp(0.0, 1.0)).collect()).unwrap();
        let p = psnr(&noisy, &x).unwrap();
        let s = ssim(&noisy, &x).unwrap();
        assert!(p < last.0, "psnr not decreasing at amplitude {amp}");
        assert!(s < last.1, "ssim not decreasing at amplitude {amp}");
        last = (p, s);
    }
}

#[test]
fn landmark_extraction_rules() {
    let mut data = vec![0.0f32; 3 * 8 * 8];
    data[2 * 8 + 5] = 0.7;
    // Channel 1: two equal maxima; the earlier row wins.
    data[64 + 6 * 8 + 1] = 0.9;
    data[64 + 3 * 8 + 7] = 0.9;
    let h = Tensor::new(vec![3, 8, 8], data.clone()).unwrap();
    let got = landmarks_from_heatmaps(&h).unwrap();
    assert_eq!(got[0], Some([2.0, 5.0]));
    assert_eq!(got[1], Some([3.0, 7.0]));
    assert_eq!(got[2], None);
    // A larger right neighbor pulls the estimate a quarter pixel.
    data[2 * 8 + 6] = 0.5;
    let got = landmarks_from_heatmaps(&Tensor::new(vec![3, 8, 8], data).unwrap()).unwrap();
    assert_eq!(got[0], Some([2.0, 5.25]));
}

#[test]
fn rendered_heatmaps_round_trip() {
    let r = render_scene(&FaceScene::random(5), 64, 15, ParsingLayout::Global5).unwrap();
    let grid = to_prior_grid(&r.landmarks);
    let (h, outside) = render_heatmaps(&grid, 32, 2.0).unwrap();
    let got = landmarks_from_heatmaps(&h).unwrap();
    for ((g, p), out) in grid.iter().zip(&got).zip(&outside) {
        assert!(!out);
        assert_eq!(*p, Some([g[0] as f64, g[1] as f64]));
    }
}

#[test]
fn nrmse_cases() {
    let gt = vec![[10.0, 10.0], [10.0, 20.0], [15.0, 15.0]];
    let same: Vec<_> = gt.iter().map(|&g| Some(g)).collect();
    assert_eq!(nrmse(&same, &gt).unwrap().value, Some(0.0));
    let shifted: Vec<_> = gt.iter().map(|g| Some([g[0] + 10.0, g[1]])).collect();
    assert!((nrmse(&shifted, &gt).unwrap().value.unwrap() - 100.0).abs() < 1e-12);
    assert!(nrmse(&same, &[[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]]).is_err());
    let flagged = vec![None, Some(gt[1]), Some(gt[2])];
    assert_eq!(nrmse(&flagged, &gt).unwrap(), Nrmse { value: Some(0.0), excluded: 1 });

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let pred: Vec<[f64; 2]> = gt.iter().map(|g| [g[0] + rng.gen_range(-1.0..1.0), g[1] + rng.gen_range(-1.0..1.0)]).collect();
        let mut sq = 0.0;
        for k in 0..3 {
            let dr = pred[k][0] - gt[k][0];
            let dc = pred[k][1] - gt[k][1];
            sq += dr * dr + dc * dc;
        }
        let expected = (sq / 3.0).sqrt() / 10.0 * 100.0;
        let got = nrmse(&pred.iter().map(|&p| Some(p)).collect::<Vec<_>>(), &gt).unwrap().value.unwrap();
        assert!((got - expected).abs() < 1e-9);
    }
}

#[test]
fn parsing_metric_cases() {
    let gt = Tensor::from_fn(vec![2, 16, 16], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
    let s = parsing_metrics(&gt, &gt).unwrap();
    assert_eq!(s.mse, 0.0);
    assert!((s.ssim - 1.0).abs() < 1e-12);
    let q = gt.data().iter().filter(|&&v| v == 1.0).count() as f64 / gt.numel() as f64;
    let zeros = Tensor::zeros(vec![2, 16, 16]);
    assert!((parsing_metrics(&zeros, &gt).unwrap().mse - 10.0 * q).abs() < 1e-12);
    assert_eq!(parsing_metrics(&zeros, &gt).unwrap().mse, parsing_metrics(&gt, &zeros).unwrap().mse);
    assert!(parsing_metrics(&Tensor::zeros(vec![3, 16, 16]), &gt).is_err());
}

#[test]
fn identity_fusion_is_exact() {
    let x = fixture();
    assert_eq!(tta_fuse(&x, |t| Ok(t.clone())).unwrap(), x);
    let fixed = x.map(|v| v * 0.5);
    let fused = fuse_dihedral(|g| Ok(vec![g.apply(&fixed).unwrap()])).unwrap();
    assert_eq!(fused[0], fixed);
}

#[test]
fn prediction_tensor_round_trip() {
    let p = Prediction {
        fine: Tensor::full(vec![3, 4, 4], 0.1),
        coarse: None,
        heatmaps: Some(Tensor::full(vec![2, 2, 2], 0.2)),
        parsing: Some(Tensor::full(vec![1, 2, 2], 0.3)),
    };
    let t = p.tensors().into_iter().cloned().collect();
    assert_eq!(Prediction::from_tensors(&p, t), p);
}

#[test]
fn targets_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let rep = evaluate(&Target, &corpus, Split::Test, None).unwrap();
    assert_eq!(rep.rows.len(), 4);
    for r in &rep.rows {
        assert_eq!(r.psnr, f64::INFINITY);
        assert!((r.ssim - 1.0).abs() < 1e-12);
        assert_eq!(r.nrmse, Some(0.0));
        assert_eq!(r.parsing_mse, Some(0.0));
    }
    assert_eq!(rep.aggregates["psnr"].excluded, 4);
    assert!(rep.to_json().unwrap().contains("\"psnr\": \"inf\""));
}

#[test]
fn bicubic_report_is_stable_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let grids = dir.path().join("grids");
    let a = evaluate(&Bicubic, &corpus, Split::Test, Some(&grids)).unwrap();
    let b = evaluate(estimator("bicubic", None, false).unwrap().as_ref(), &corpus, Split::Test, None).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let ids: Vec<&str> = a.rows.iter().map(|r| r.id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    for (metric, values) in [("psnr", a.rows.iter().map(|r| r.psnr).collect::<Vec<_>>()), ("ssim", a.rows.iter().map(|r| r.ssim).collect())] {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!((a.mean(metric).unwrap() - mean).abs() < 1e-9);
    }
    assert!(!a.aggregates.contains_key("nrmse"));
    let g = facesr_core::synth::pnm::read_ppm(&grids.join(format!("{}_grid.ppm", ids[0]))).unwrap();
    assert_eq!(g.shape(), [3, 32, 128]);
    let fused = evaluate(estimator("bicubic", None, true).unwrap().as_ref(), &corpus, Split::Test, None).unwrap();
    assert_eq!(fused.estimator, "bicubic+tta");
    assert!(Bicubic.checkpoint_hash().is_none());
}

#[test]
fn empty_split_and_unknown_estimator_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut corpus = small_corpus(dir.path());
    corpus.entries.retain(|e| e.split == Split::Train);
    assert!(evaluate(&Bicubic, &corpus, Split::Test, None).is_err());
    assert!(estimator("oracle", None, false).is_err());
    assert!(estimator("checkpoint", None, false).is_err());
}
