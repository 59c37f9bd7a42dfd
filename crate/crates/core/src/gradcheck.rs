//! Randomized analytic-versus-finite-difference gradient suite.

use std::fmt;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::datagen::make_projection;
use crate::error::Result;
use crate::gradients::{
    backprop_with_cache, finite_difference_oracle, grad_cliptta_wrt_z, grad_hard_contrastive_wrt_z, grad_mcm_wrt_z,
    grad_oce, grad_reg_wrt_z, grad_scont_mode, grad_tent_wrt_z, BatchView, GradCheckResult, DEFAULT_FD_STEP,
};
use crate::losses::{
    cliptta_total, hard_contrastive_loss, oce_loss, outlier_weights, regularizer_loss, soft_contrastive_loss,
    tent_loss, ScontMode,
};
use crate::model::{
    batch_match_probabilities, class_probabilities, encode, encode_with_cache, mcm_score, ClassPrototypes,
    EmbeddingMatrix, EncoderParams,
};
use crate::numerics::{l2_normalize, Matrix, Rng};
use crate::pseudo::{assign_pseudo_captions, PseudoLabelSummary};

pub const GRADCHECK_TOLERANCE: f64 = 1e-6;
pub const TAUS: [f64; 3] = [0.01, 0.1, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckedLoss {
    Tent,
    HardContrastive,
    ScontImageToText,
    ScontSymmetric,
    Reg,
    ClipttaTotal,
    Oce,
    EncoderGamma,
    EncoderBeta,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 9] = [
        CheckedLoss::Tent,
        CheckedLoss::HardContrastive,
        CheckedLoss::ScontImageToText,
        CheckedLoss::ScontSymmetric,
        CheckedLoss::Reg,
        CheckedLoss::ClipttaTotal,
        CheckedLoss::Oce,
        CheckedLoss::EncoderGamma,
        CheckedLoss::EncoderBeta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedLoss::Tent => "tent",
            CheckedLoss::HardContrastive => "hard_contrastive",
            CheckedLoss::ScontImageToText => "scont_image_to_text",
            CheckedLoss::ScontSymmetric => "scont_symmetric",
            CheckedLoss::Reg => "reg",
            CheckedLoss::ClipttaTotal => "cliptta_total",
            CheckedLoss::Oce => "oce",
            CheckedLoss::EncoderGamma => "encoder_gamma",
            CheckedLoss::EncoderBeta => "encoder_beta",
        }
    }
}

impl fmt::Display for CheckedLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Deliberate corruption of an analytic gradient, used to confirm the
/// suite detects mistakes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    FlipRegSign,
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub n_configs: usize,
    pub seed: u64,
    pub n_range: (usize, usize),
    pub c_range: (usize, usize),
    pub fault: Option<Fault>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { n_configs: 100, seed: 0, n_range: (2, 32), c_range: (2, 10), fault: None }
    }
}

/// Random sizes of one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfigSpec {
    pub index: usize,
    pub seed: u64,
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub tau: f64,
}

impl fmt::Display for ConfigSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config {} (seed {}, N={}, C={}, d={}, tau={})", self.index, self.seed, self.n, self.c, self.d, self.tau)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossSummary {
    pub loss: CheckedLoss,
    pub configs: usize,
    pub max_rel_error: f64,
    pub worst: Option<ConfigSpec>,
}

impl LossSummary {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADCHECK_TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub losses: Vec<LossSummary>,
    pub configs: Vec<ConfigSpec>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.losses.iter().all(LossSummary::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &LossSummary> {
        self.losses.iter().filter(|l| !l.passed())
    }

    /// Fixed-width table, one line per loss.
    pub fn table(&self) -> String {
        let mut out = format!("{:<22} {:>7} {:>14}  {}\n", "loss", "configs", "max_rel_error", "status");
        for l in &self.losses {
            let status = if l.passed() { "ok".to_string() } else { format!("FAIL at {}", l.worst.map_or(String::new(), |w| w.to_string())) };
            out.push_str(&format!("{:<22} {:>7} {:>14.3e}  {}\n", l.loss.name(), l.configs, l.max_rel_error, status));
        }
        out
    }
}

fn near(base: &[f64], spread: f64, rng: &mut Rng) -> Vec<f64> {
    let noise = rng.standard_normal(base.len());
    let v: Vec<f64> = base.iter().zip(&noise).map(|(b, e)| b + spread * e).collect();
    l2_normalize(&v).unwrap_or_else(|_| base.to_vec())
}

/// Unit vectors clustered around one direction, with spread `1.5 √τ` so
/// logits stay O(1) at every temperature.
fn clustered(rows: usize, base: &[f64], tau: f64, rng: &mut Rng) -> Matrix {
    let spread = 1.5 * tau.sqrt();
    let r: Vec<Vec<f64>> = (0..rows).map(|_| near(base, spread, rng)).collect();
    Matrix::from_rows(&r).expect("rows share a length")
}

fn free(flat: &[f64], n: usize, d: usize) -> Result<EmbeddingMatrix> {
    Ok(EmbeddingMatrix::unchecked(Matrix::from_vec(n, d, flat.to_vec())?))
}

fn rel(analytic: &[f64], numeric: &[f64]) -> Result<f64> {
    Ok(GradCheckResult::compare(analytic, numeric)?.max_rel_error)
}

struct Case {
    spec: ConfigSpec,
    protos: ClassPrototypes,
    z: EmbeddingMatrix,
    q: crate::model::ProbMatrix,
    ps: PseudoLabelSummary,
    rng: Rng,
    base: Vec<f64>,
}

impl Case {
    fn new(spec: ConfigSpec) -> Result<Self> {
        let mut rng = Rng::derive(spec.seed, "gradcheck-case", spec.index as u64);
        let base = rng.unit_vector(spec.d);
        let protos = ClassPrototypes::from_raw(&clustered(spec.c, &base, spec.tau, &mut rng))?;
        let z = EmbeddingMatrix::new(clustered(spec.n, &base, spec.tau, &mut rng))?;
        let q = class_probabilities(&z, &protos, spec.tau)?;
        let ps = assign_pseudo_captions(&q, &protos);
        Ok(Self { spec, protos, z, q, ps, rng, base })
    }
}

fn check_loss(case: &mut Case, loss: CheckedLoss, fault: Option<Fault>) -> Result<f64> {
    let (n, d, tau) = (case.spec.n, case.spec.d, case.spec.tau);
    let h = DEFAULT_FD_STEP;
    let protos = &case.protos;
    let ps = &case.ps;
    let point = case.z.matrix().data().to_vec();
    let flip = fault == Some(Fault::FlipRegSign);
    match loss {
        CheckedLoss::Tent => {
            let a = grad_tent_wrt_z(&case.q, protos, tau)?;
            let num = finite_difference_oracle(|x| Ok(tent_loss(&class_probabilities(&free(x, n, d)?, protos, tau)?)), &point, h)?;
            rel(a.data(), &num)
        }
        CheckedLoss::HardContrastive => {
            let a = grad_hard_contrastive_wrt_z(&case.z, ps, protos, &case.q, tau)?;
            let num = finite_difference_oracle(|x| hard_contrastive_loss(&free(x, n, d)?, ps, tau), &point, h)?;
            rel(a.data(), &num)
        }
        CheckedLoss::ScontImageToText | CheckedLoss::ScontSymmetric => {
            let mode = if loss == CheckedLoss::ScontSymmetric { ScontMode::Symmetric } else { ScontMode::ImageToText };
            let a = grad_scont_mode(&case.z, ps, protos, &case.q, tau, mode)?;
            let num = finite_difference_oracle(
                |x| Ok(soft_contrastive_loss(&batch_match_probabilities(&free(x, n, d)?, &ps.caption_rows, tau)?, mode)),
                &point,
                h,
            )?;
            rel(a.data(), &num)
        }
        CheckedLoss::Reg => {
            let mut a = grad_reg_wrt_z(&case.q, protos, tau)?;
            if flip {
                a = a.scale(-1.0);
            }
            let num = finite_difference_oracle(
                |x| Ok(regularizer_loss(&class_probabilities(&free(x, n, d)?, protos, tau)?).0),
                &point,
                h,
            )?;
            rel(a.data(), &num)
        }
        CheckedLoss::ClipttaTotal => {
            let nm = 2 + case.rng.index(n.max(2));
            let zm = EmbeddingMatrix::new(clustered(nm, &case.base, tau, &mut case.rng))?;
            let qm = class_probabilities(&zm, protos, tau)?;
            let psm = assign_pseudo_captions(&qm, protos);
            let lambda = 0.5 + 1.5 * case.rng.uniform();
            let mode = ScontMode::ImageToText;
            let g = grad_cliptta_wrt_z(
                BatchView { z: &case.z, ps, q: &case.q },
                Some(BatchView { z: &zm, ps: &psm, q: &qm }),
                protos,
                tau,
                mode,
                lambda,
            )?;
            let mut current = g.current;
            if flip {
                current.add_scaled(&grad_reg_wrt_z(&case.q, protos, tau)?, -2.0 * lambda)?;
            }
            let mut analytic = current.into_data();
            analytic.extend(g.memory.expect("memory batch given").into_data());
            let mut joint = point.clone();
            joint.extend_from_slice(zm.matrix().data());
            let num = finite_difference_oracle(
                |x| {
                    let zc = free(&x[..n * d], n, d)?;
                    let zmm = free(&x[n * d..], nm, d)?;
                    let lc = soft_contrastive_loss(&batch_match_probabilities(&zc, &ps.caption_rows, tau)?, mode);
                    let lm = soft_contrastive_loss(&batch_match_probabilities(&zmm, &psm.caption_rows, tau)?, mode);
                    let lr = regularizer_loss(&class_probabilities(&zc, protos, tau)?).0;
                    Ok(cliptta_total(lc, Some(lm), lr, lambda))
                },
                &joint,
                h,
            )?;
            rel(&analytic, &num)
        }
        CheckedLoss::Oce => {
            // joint gradient in (s_1..s_N, alpha)
            let c = case.spec.c as f64;
            let mut point: Vec<f64> = (0..n).map(|_| 1.0 / c + (1.0 - 1.0 / c) * case.rng.uniform()).collect();
            point.push(0.3 + 0.5 * case.rng.uniform());
            let split = |x: &[f64]| outlier_weights(&x[..n], x[n]);
            let (ga, mut analytic) = grad_oce(&split(&point))?;
            analytic.push(ga);
            let num = finite_difference_oracle(|x| Ok(oce_loss(&split(x))?.loss), &point, h)?;
            rel(&analytic, &num)
        }
        CheckedLoss::EncoderGamma | CheckedLoss::EncoderBeta => check_encoder(case, loss == CheckedLoss::EncoderGamma),
    }
}

/// Full chain: encoder → soft-contrastive + regularizer + OCE on MCM
/// scores, differentiated in gamma or beta.
fn check_encoder(case: &mut Case, wrt_gamma: bool) -> Result<f64> {
    let (n, d, tau) = (case.spec.n, case.spec.d, case.spec.tau);
    let rng = &mut case.rng;
    let d_in = d + 2 + rng.index(6);
    let w = make_projection(d_in, d, rng)?;
    let mut params = EncoderParams::new(w.clone(), tau, 1e-5)?;
    params.gamma = (0..d_in).map(|_| 1.0 + 0.1 * (rng.uniform() - 0.5)).collect();
    params.beta = (0..d_in).map(|_| 0.02 * (rng.uniform() - 0.5)).collect();
    // Inputs whose embeddings land near the prototype cluster.
    let amp = (d_in as f64).sqrt();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let e = near(&case.base, 1.5 * tau.sqrt(), rng);
            let resid = rng.standard_normal(d_in);
            (0..d_in).map(|j| amp * (crate::numerics::dot(w.row(j), &e) + 0.05 * resid[j])).collect()
        })
        .collect();
    let x = Matrix::from_rows(&rows)?;
    let protos = &case.protos;
    let lambda_reg = 1.0;
    let lambda_oce = 1.0;
    let alpha = 1.0 / case.spec.c as f64 + 0.1;

    let cache = encode_with_cache(&x, &params)?;
    let q = class_probabilities(&cache.z, protos, tau)?;
    let ps = assign_pseudo_captions(&q, protos);
    let top = q.argmax();
    let scores = outlier_weights(&mcm_score(&q), alpha);
    let use_oce = oce_loss(&scores).is_ok();
    let mut gz = grad_cliptta_wrt_z(BatchView { z: &cache.z, ps: &ps, q: &q }, None, protos, tau, ScontMode::ImageToText, lambda_reg)?.current;
    if use_oce {
        let (_, gs) = grad_oce(&scores)?;
        gz.add_scaled(&grad_mcm_wrt_z(&q, protos, tau, &gs)?, lambda_oce)?;
    }
    let (gg, gb) = backprop_with_cache(&gz, &cache, &params)?;

    let objective = |p: &EncoderParams| -> Result<f64> {
        let z = encode(&x, p)?;
        let q = class_probabilities(&z, protos, tau)?;
        let pm = batch_match_probabilities(&z, &ps.caption_rows, tau)?;
        let mut l = soft_contrastive_loss(&pm, ScontMode::ImageToText) + lambda_reg * regularizer_loss(&q).0;
        if use_oce {
            // MCM along the base point's argmax branch
            let s: Vec<f64> = (0..q.n_samples()).map(|i| q.row(i)[top[i]]).collect();
            l += lambda_oce * oce_loss(&outlier_weights(&s, alpha))?.loss;
        }
        Ok(l)
    };
    if wrt_gamma {
        let num = finite_difference_oracle(
            |g| {
                let mut p = params.clone();
                p.gamma = g.to_vec();
                objective(&p)
            },
            &params.gamma,
            DEFAULT_FD_STEP,
        )?;
        rel(&gg, &num)
    } else {
        let num = finite_difference_oracle(
            |b| {
                let mut p = params.clone();
                p.beta = b.to_vec();
                objective(&p)
            },
            &params.beta,
            DEFAULT_FD_STEP,
        )?;
        rel(&gb, &num)
    }
}

/// Draws the sizes of configuration `index`; temperatures cycle through
/// [`TAUS`] so each gets an equal share.
pub fn config_spec(opts: &SuiteOptions, index: usize) -> ConfigSpec {
    let mut rng = Rng::derive(opts.seed, "gradcheck-sizes", index as u64);
    let (n_lo, n_hi) = opts.n_range;
    let (c_lo, c_hi) = opts.c_range;
    ConfigSpec {
        index,
        seed: opts.seed,
        n: n_lo + rng.index(n_hi - n_lo + 1),
        c: c_lo + rng.index(c_hi - c_lo + 1),
        d: 2 + rng.index(11),
        tau: TAUS[index % TAUS.len()],
    }
}

/// Runs every checked loss on `n_configs` random configurations.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut losses: Vec<LossSummary> =
        CheckedLoss::ALL.iter().map(|&loss| LossSummary { loss, configs: 0, max_rel_error: 0.0, worst: None }).collect();
    let mut configs = Vec::with_capacity(opts.n_configs);
    for index in 0..opts.n_configs {
        let spec = config_spec(opts, index);
        let mut case = Case::new(spec)?;
        for summary in &mut losses {
            let err = check_loss(&mut case, summary.loss, opts.fault)?;
            let err = if err.is_nan() { f64::INFINITY } else { err };
            summary.configs += 1;
            if summary.worst.is_none() || err > summary.max_rel_error {
                summary.max_rel_error = err;
                summary.worst = Some(spec);
            }
        }
        configs.push(spec);
    }
    Ok(SuiteReport { losses, configs, elapsed: start.elapsed() })
}
