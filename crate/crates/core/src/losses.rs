//! Scalar adaptation objectives.
//!
//! Entropies are in nats. Probabilities are clamped at `1e-300` inside
//! logarithms so that exact zeros from very low temperatures stay finite.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{batch_match_probabilities, BatchMatchMatrix, EmbeddingMatrix, ProbMatrix};
use crate::numerics::{entropy, safe_ln, sigmoid};
use crate::pseudo::PseudoLabelSummary;

pub const DEFAULT_LAMBDA_REG: f64 = 1.0;
pub const DEFAULT_LAMBDA_OCE: f64 = 1.0;

/// Which directions of the batch matching entropy enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScontMode {
    #[default]
    ImageToText,
    Symmetric,
}

impl FromStr for ScontMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image_to_text" => Ok(Self::ImageToText),
            "symmetric" => Ok(Self::Symmetric),
            other => Err(Error::Parse(format!("unknown scont_mode `{other}`"))),
        }
    }
}

impl fmt::Display for ScontMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ImageToText => "image_to_text",
            Self::Symmetric => "symmetric",
        })
    }
}

/// Loss terms of one adaptation step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_scont: f64,
    pub l_scont_mem: Option<f64>,
    pub l_reg: f64,
    pub l_total: f64,
    pub l_tent: Option<f64>,
    pub l_cont_hard: Option<f64>,
    pub l_oce: Option<f64>,
    pub q_bar: Vec<f64>,
}

/// MCM scores with their outlierness weights.
#[derive(Debug, Clone, PartialEq)]
pub struct OodScores {
    pub s: Vec<f64>,
    pub w: Vec<f64>,
    pub alpha: f64,
}

impl OodScores {
    /// Samples regarded as in-distribution (`w > 0.5`).
    pub fn id_mask(&self) -> Vec<bool> {
        self.w.iter().map(|&w| w > 0.5).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OceReport {
    pub mu_id: f64,
    pub mu_ood: f64,
    pub loss: f64,
    pub p_id: f64,
    pub p_ood: f64,
    /// `p_id μ_id² − p_ood μ_ood²`, reported as written; diagnostic only.
    pub sigma2_intra: f64,
    pub sigma2_inter_weighted: f64,
}

/// Sum over images of the matching entropy. `Symmetric` adds the
/// text-to-image entropies.
pub fn soft_contrastive_loss(pm: &BatchMatchMatrix, mode: ScontMode) -> f64 {
    let i2t: f64 = pm.p_i2t.row_iter().map(entropy).sum();
    match mode {
        ScontMode::ImageToText => i2t,
        ScontMode::Symmetric => i2t + pm.p_t2i.row_iter().map(entropy).sum::<f64>(),
    }
}

/// Batch-summed prediction entropy.
pub fn tent_loss(q: &ProbMatrix) -> f64 {
    q.matrix().row_iter().map(entropy).sum()
}

/// `Σ_i −log p(t̂_i | x_i)` with hard pseudo-captions.
pub fn hard_contrastive_loss(z: &EmbeddingMatrix, ps: &PseudoLabelSummary, tau: f64) -> Result<f64> {
    let pm = batch_match_probabilities(z, &ps.caption_rows, tau)?;
    Ok((0..z.len()).map(|i| -safe_ln(pm.p_i2t[(i, i)])).sum())
}

/// Negative marginal entropy `Σ_c q̄_c log q̄_c` and the marginal `q̄`.
pub fn regularizer_loss(q: &ProbMatrix) -> (f64, Vec<f64>) {
    let q_bar = q.class_means();
    (-entropy(&q_bar), q_bar)
}

/// Combined objective: current and memory soft-contrastive terms are
/// averaged when a memory batch exists.
pub fn cliptta_total(current: f64, memory: Option<f64>, l_reg: f64, lambda_reg: f64) -> f64 {
    let contrastive = match memory {
        Some(m) => 0.5 * (current + m),
        None => current,
    };
    contrastive + lambda_reg * l_reg
}

/// `w_i = sigmoid(s_i − α)`.
pub fn outlier_weights(s: &[f64], alpha: f64) -> OodScores {
    OodScores { s: s.to_vec(), w: s.iter().map(|&v| sigmoid(v - alpha)).collect(), alpha }
}

/// Negative squared gap between the weighted mean scores of the two
/// populations.
pub fn oce_loss(scores: &OodScores) -> Result<OceReport> {
    let n = scores.s.len();
    if n == 0 || scores.w.len() != n {
        return Err(Error::Shape(format!("{} scores vs {} weights", n, scores.w.len())));
    }
    let sw: f64 = scores.w.iter().sum();
    let sw_ood: f64 = scores.w.iter().map(|w| 1.0 - w).sum();
    if sw < 1e-12 || sw_ood < 1e-12 {
        return Err(Error::DegeneratePartition);
    }
    let mu_id = scores.w.iter().zip(&scores.s).map(|(w, s)| w * s).sum::<f64>() / sw;
    let mu_ood = scores.w.iter().zip(&scores.s).map(|(w, s)| (1.0 - w) * s).sum::<f64>() / sw_ood;
    let gap = mu_id - mu_ood;
    let p_id = sw / n as f64;
    let p_ood = 1.0 - p_id;
    Ok(OceReport {
        mu_id,
        mu_ood,
        loss: -gap * gap,
        p_id,
        p_ood,
        sigma2_intra: p_id * mu_id * mu_id - p_ood * mu_ood * mu_ood,
        sigma2_inter_weighted: p_id * p_ood * gap * gap,
    })
}
