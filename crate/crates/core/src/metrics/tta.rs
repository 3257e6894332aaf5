//! Test-time fusion over the eight dihedral transforms.

use facesr_tensor::Tensor;

use crate::error::{config_err, Result};
use crate::synth::Dihedral;

/// Run `model` once per dihedral transform `g` (it receives `g` and must
/// return outputs in the transformed frame), map each output back with
/// `g⁻¹` and average. Sums are taken in f64 in a fixed order.
pub fn fuse_dihedral<F>(mut model: F) -> Result<Vec<Tensor<f32>>>
where
    F: FnMut(Dihedral) -> Result<Vec<Tensor<f32>>>,
{
    let mut sums: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
    for g in Dihedral::ALL {
        let outs = model(g)?;
        if sums.is_empty() {
            sums = outs.iter().map(|t| (t.shape().to_vec(), vec![0.0; t.numel()])).collect();
        }
        if outs.len() != sums.len() {
            return Err(config_err!("model returned {} outputs, expected {}", outs.len(), sums.len()));
        }
        for (t, (shape, acc)) in outs.iter().zip(sums.iter_mut()) {
            let back = g.inverse().apply(t)?;
            if back.shape() != &shape[..] {
                return Err(config_err!("output shape changed under augmentation: {:?}", back.shape()));
            }
            for (a, &v) in acc.iter_mut().zip(back.data()) {
                *a += v as f64;
            }
        }
    }
    let n = Dihedral::ALL.len() as f64;
    sums.into_iter()
        .map(|(shape, acc)| Ok(Tensor::new(shape, acc.into_iter().map(|v| (v / n) as f32).collect())?))
        .collect()
}

/// Fused output of a single-output model on a square input.
pub fn tta_fuse<F>(x: &Tensor<f32>, mut model: F) -> Result<Tensor<f32>>
where
    F: FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
{
    let mut out = fuse_dihedral(|g| Ok(vec![model(&g.apply(x)?)?]))?;
    Ok(out.remove(0))
}
