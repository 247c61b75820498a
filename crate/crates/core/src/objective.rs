//! Regression targets and losses.
//!
//! Targets are built as smooth → patchify → normalize; losses are a global
//! mean over every token and patch element.

use thiserror::Error;

use crate::imageio::ImageBatch;
use crate::numerics::{NumericsError, Scalar, Tape, Tensor, Var};
use crate::patching::{
    gaussian_kernel, normalize_patch, patchify, smooth, PatchError, PatchSequence,
};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("prediction has {pred} values, target has {target}")]
    ShapeMismatch { pred: usize, target: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    MseNormPixel,
    L1,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::MseNormPixel => "mse-norm",
            LossKind::L1 => "l1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mse" => Some(LossKind::Mse),
            "mse-norm" | "mse_norm_pixel" => Some(LossKind::MseNormPixel),
            "l1" => Some(LossKind::L1),
            _ => None,
        }
    }

    pub fn normalizes_target(self) -> bool {
        self == LossKind::MseNormPixel
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Smoothing {
    pub kernel_size: usize,
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub smoothing: Option<Smoothing>,
}

impl Default for LossConfig {
    /// Normalized-pixel MSE on a 9×9, σ=1 smoothed target.
    fn default() -> Self {
        Self {
            kind: LossKind::MseNormPixel,
            smoothing: Some(Smoothing {
                kernel_size: 9,
                sigma: 1.0,
            }),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if let Some(s) = self.smoothing {
            gaussian_kernel(s.kernel_size, s.sigma)?;
        }
        Ok(())
    }
}

/// One target sequence per image in the batch.
pub fn target(
    img: &ImageBatch,
    cfg: &LossConfig,
    patch_size: usize,
) -> Result<Vec<PatchSequence>, ObjectiveError> {
    let smoothed;
    let src = match cfg.smoothing {
        Some(s) => {
            smoothed = smooth(img, &gaussian_kernel(s.kernel_size, s.sigma)?)?;
            &smoothed
        }
        None => img,
    };
    let seqs = patchify(src, patch_size)?;
    Ok(if cfg.kind.normalizes_target() {
        seqs.iter().map(normalize_patch).collect()
    } else {
        seqs
    })
}

/// Mean loss over all values.
pub fn loss(
    pred: &PatchSequence,
    tgt: &PatchSequence,
    kind: LossKind,
) -> Result<f64, ObjectiveError> {
    if pred.values.len() != tgt.values.len() {
        return Err(ObjectiveError::ShapeMismatch {
            pred: pred.values.len(),
            target: tgt.values.len(),
        });
    }
    let n = pred.values.len().max(1) as f64;
    let pairs = pred
        .values
        .iter()
        .zip(&tgt.values)
        .map(|(&p, &t)| p as f64 - t as f64);
    Ok(match kind {
        LossKind::Mse | LossKind::MseNormPixel => pairs.map(|d| d * d).sum::<f64>() / n,
        LossKind::L1 => pairs.map(f64::abs).sum::<f64>() / n,
    })
}

pub fn loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &Tensor<T>,
    kind: LossKind,
) -> Result<Var, NumericsError> {
    match kind {
        LossKind::Mse | LossKind::MseNormPixel => tape.mse(pred, target),
        LossKind::L1 => tape.l1(pred, target),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(values: Vec<f32>) -> PatchSequence {
        PatchSequence {
            grid_h: 1,
            grid_w: 1,
            patch_size: 2,
            channels: 1,
            values,
        }
    }

    fn ramp() -> ImageBatch {
        ImageBatch::new(
            1,
            1,
            16,
            16,
            (0..256).map(|v| (v % 17) as f32 / 17.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn plain_target_is_patchify() {
        let cfg = LossConfig {
            kind: LossKind::Mse,
            smoothing: None,
        };
        assert_eq!(
            target(&ramp(), &cfg, 4).unwrap(),
            patchify(&ramp(), 4).unwrap()
        );
    }

    #[test]
    fn smoothing_keeps_constant_image() {
        let img = ImageBatch::new(1, 3, 16, 16, vec![0.3; 768]).unwrap();
        let cfg = LossConfig {
            kind: LossKind::Mse,
            ..LossConfig::default()
        };
        let t = target(&img, &cfg, 4).unwrap();
        assert!(t[0].values.iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn normalized_targets_have_zero_mean() {
        let t = target(&ramp(), &LossConfig::default(), 4).unwrap();
        for i in 0..t[0].n_tokens() {
            let p = t[0].patch(i);
            assert!((p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_values() {
        let a = seq(vec![1.0, 2.0, 3.0, 4.0]);
        let b = seq(vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(loss(&a, &a, LossKind::Mse).unwrap(), 0.0);
        assert_eq!(loss(&a, &b, LossKind::Mse).unwrap(), 4.0);
        assert_eq!(loss(&a, &b, LossKind::L1).unwrap(), 2.0);
        assert!(loss(&a, &seq(vec![0.0]), LossKind::L1).is_err());
    }

    #[test]
    fn parse_round_trip() {
        for k in [LossKind::Mse, LossKind::MseNormPixel, LossKind::L1] {
            assert_eq!(LossKind::parse(k.as_str()), Some(k));
        }
    }
}
