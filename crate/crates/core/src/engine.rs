//! Non-episodic test-time adaptation loop.
//!
//! Per batch: record metrics from the current parameters, run
//! `inner_iterations` Adam steps on the method's objective, then offer the
//! batch's confident samples to the memory. Parameters carry over to the
//! next batch.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::datagen::LabeledBatch;
use crate::error::{Error, Result};
use crate::gradients::{
    backprop_with_cache, grad_cliptta_wrt_z, grad_hard_contrastive_wrt_z, grad_mcm_wrt_z, grad_oce, grad_tent_wrt_z,
    BatchView,
};
use crate::losses::{
    cliptta_total, hard_contrastive_loss, oce_loss, outlier_weights, regularizer_loss, soft_contrastive_loss,
    tent_loss, LossReport, ScontMode,
};
use crate::memory::MemoryState;
use crate::metrics::{
    accuracy, auroc_fpr95, histogram_entropy, improvement_deterioration, mean_confidence_entropy, unique_classes,
    MetricRecord,
};
use crate::model::{
    batch_match_probabilities, class_probabilities, encode, encode_with_cache, mcm_score, ClassPrototypes,
    EncoderParams, ProbMatrix,
};
use crate::numerics::{Matrix, Rng};
use crate::pseudo::assign_pseudo_captions;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Cliptta,
    Tent,
    HardContrastive,
    ZeroShot,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Cliptta => "cliptta",
            Method::Tent => "tent",
            Method::HardContrastive => "hard_contrastive",
            Method::ZeroShot => "zero_shot",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "cliptta" => Ok(Method::Cliptta),
            "tent" => Ok(Method::Tent),
            "hard_contrastive" => Ok(Method::HardContrastive),
            "zero_shot" => Ok(Method::ZeroShot),
            other => Err(Error::Parse(format!(
                "unknown method '{other}' (expected cliptta, tent, hard_contrastive or zero_shot)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineConfig {
    pub method: Method,
    pub batch_size: usize,
    pub inner_iterations: usize,
    pub learning_rate: f64,
    pub lambda_reg: f64,
    pub lambda_oce: f64,
    pub open_set: bool,
    pub alpha_init: f64,
    pub tau: f64,
    pub seed: u64,
    pub scont_mode: ScontMode,
    pub memory_enabled: bool,
    /// Debug only: restore the initial parameters after every batch.
    pub episodic: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            method: Method::Cliptta,
            batch_size: 128,
            inner_iterations: 10,
            learning_rate: 1e-4,
            lambda_reg: 1.0,
            lambda_oce: 1.0,
            open_set: false,
            alpha_init: 0.5,
            tau: 0.01,
            seed: 0,
            scont_mode: ScontMode::ImageToText,
            memory_enabled: true,
            episodic: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Invalid(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.inner_iterations == 0 {
            return Err(Error::Invalid("inner_iterations must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Temperature(self.tau));
        }
        for (name, v) in [("lambda_reg", self.lambda_reg), ("lambda_oce", self.lambda_oce), ("alpha_init", self.alpha_init)] {
            if !v.is_finite() {
                return Err(Error::Invalid(format!("{name} must be finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// One Adam update in place. `t` is incremented before bias correction.
pub fn adam_step(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: &mut u64, lr: f64) -> Result<()> {
    if grads.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(Error::Shape(format!("{} params vs {} gradients", params.len(), grads.len())));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::GradientBlowUp(format!(
            "gradient entry {i} is {} (max |param| {:.3e}, optimizer step {})",
            grads[i],
            params.iter().fold(0.0f64, |a, p| a.max(p.abs())),
            *t
        )));
    }
    *t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powf(*t as f64);
    let bc2 = 1.0 - ADAM_BETA2.powf(*t as f64);
    for i in 0..params.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grads[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        let step = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
        params[i] -= step;
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::GradientBlowUp(format!("parameters became non-finite at optimizer step {}", *t)));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AdaptationState {
    pub params: EncoderParams,
    pub alpha: f64,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub adam_t: u64,
    pub memory: MemoryState,
    pub history: Vec<MetricRecord>,
    batches_seen: u64,
    rng: Rng,
}

/// Trace of one `adapt_batch` call.
#[derive(Debug, Clone, Default)]
pub struct BatchOutcome {
    /// Loss report of every inner iteration, before its update.
    pub losses: Vec<LossReport>,
    /// Rows that entered the contrastive objective at the last iteration.
    pub contributed: Vec<bool>,
    pub memory_inserted: usize,
}

impl AdaptationState {
    pub fn new(params: EncoderParams, n_classes: usize, cfg: &EngineConfig) -> Self {
        let n = params.trainable().len() + usize::from(cfg.open_set);
        Self {
            params,
            alpha: cfg.alpha_init,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            adam_t: 0,
            memory: MemoryState::for_batch_size(n_classes, cfg.batch_size),
            history: Vec::new(),
            batches_seen: 0,
            rng: Rng::derive(cfg.seed, "memory", 0),
        }
    }

    /// FNV-1a over the bit patterns of all trainable values.
    pub fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.params.trainable().iter().chain(std::iter::once(&self.alpha)) {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    fn flat(&self, open_set: bool) -> Vec<f64> {
        let mut f = self.params.trainable();
        if open_set {
            f.push(self.alpha);
        }
        f
    }

    fn set_flat(&mut self, flat: &[f64], open_set: bool) -> Result<()> {
        let k = self.params.trainable().len();
        self.params.set_trainable(&flat[..k])?;
        if open_set {
            self.alpha = flat[k];
        }
        Ok(())
    }

    /// Runs the inner optimization loop on one batch.
    pub fn adapt_batch(&mut self, x_raw: &Matrix, protos: &ClassPrototypes, cfg: &EngineConfig) -> Result<BatchOutcome> {
        let mut outcome = BatchOutcome::default();
        if cfg.method == Method::ZeroShot || x_raw.rows() == 0 {
            self.batches_seen += 1;
            return Ok(outcome);
        }
        let tau = cfg.tau;
        let mut last: Option<(ProbMatrix, Vec<usize>, Vec<f64>, Option<Vec<f64>>)> = None;
        let mut memory_x: Option<Matrix> = None;
        for iter in 0..cfg.inner_iterations {
            let cache = encode_with_cache(x_raw, &self.params)?;
            let q = class_probabilities(&cache.z, protos, tau)?;
            let n = q.n_samples();
            let scores = cfg.open_set.then(|| outlier_weights(&mcm_score(&q), self.alpha));
            let selected: Vec<usize> = match &scores {
                Some(sc) => (0..n).filter(|&i| sc.w[i] > 0.5).collect(),
                None => (0..n).collect(),
            };
            if iter == 0 && cfg.method == Method::Cliptta && cfg.memory_enabled && !selected.is_empty() {
                memory_x = self.memory.batch(selected.len(), &mut self.rng);
            }

            let mut report = LossReport::default();
            let mut grad_z = Matrix::zeros(n, protos.dim());
            let mut grad_mem: Option<(Matrix, crate::model::EncoderCache)> = None;
            if !selected.is_empty() {
                let z_s = cache.z.select(&selected);
                let q_s = q.select(&selected);
                let ps_s = assign_pseudo_captions(&q_s, protos);
                let pm = batch_match_probabilities(&z_s, &ps_s.caption_rows, tau)?;
                report.l_scont = soft_contrastive_loss(&pm, cfg.scont_mode);
                let (l_reg, q_bar) = regularizer_loss(&q_s);
                report.l_reg = l_reg;
                report.q_bar = q_bar;
                let g_s = match cfg.method {
                    Method::Cliptta => {
                        let mem = match &memory_x {
                            Some(mx) => {
                                let mc = encode_with_cache(mx, &self.params)?;
                                let qm = class_probabilities(&mc.z, protos, tau)?;
                                let psm = assign_pseudo_captions(&qm, protos);
                                let pmm = batch_match_probabilities(&mc.z, &psm.caption_rows, tau)?;
                                report.l_scont_mem = Some(soft_contrastive_loss(&pmm, cfg.scont_mode));
                                Some((mc, qm, psm))
                            }
                            None => None,
                        };
                        report.l_total = cliptta_total(report.l_scont, report.l_scont_mem, l_reg, cfg.lambda_reg);
                        let view = BatchView { z: &z_s, ps: &ps_s, q: &q_s };
                        let mem_view = mem.as_ref().map(|(mc, qm, psm)| BatchView { z: &mc.z, ps: psm, q: qm });
                        let g = grad_cliptta_wrt_z(view, mem_view, protos, tau, cfg.scont_mode, cfg.lambda_reg)?;
                        if let (Some(gm), Some((mc, _, _))) = (g.memory, mem) {
                            grad_mem = Some((gm, mc));
                        }
                        g.current
                    }
                    Method::Tent => {
                        let l = tent_loss(&q_s);
                        report.l_tent = Some(l);
                        report.l_total = l;
                        grad_tent_wrt_z(&q_s, protos, tau)?
                    }
                    Method::HardContrastive => {
                        let l = hard_contrastive_loss(&z_s, &ps_s, tau)?;
                        report.l_cont_hard = Some(l);
                        report.l_total = l;
                        grad_hard_contrastive_wrt_z(&z_s, &ps_s, protos, &q_s, tau)?
                    }
                    Method::ZeroShot => unreachable!(),
                };
                for (r, &i) in selected.iter().enumerate() {
                    grad_z.row_mut(i).copy_from_slice(g_s.row(r));
                }
            }

            let mut grad_alpha = 0.0;
            if let Some(sc) = &scores {
                if let Ok(oce) = oce_loss(sc) {
                    report.l_oce = Some(oce.loss);
                    report.l_total += cfg.lambda_oce * oce.loss;
                    if cfg.lambda_oce != 0.0 {
                        let (ga, gs) = grad_oce(sc)?;
                        grad_alpha = cfg.lambda_oce * ga;
                        let g = grad_mcm_wrt_z(&q, protos, tau, &gs)?;
                        grad_z.add_scaled(&g, cfg.lambda_oce)?;
                    }
                }
            }

            let (mut g_gamma, mut g_beta) = backprop_with_cache(&grad_z, &cache, &self.params)?;
            if let Some((gm, mc)) = &grad_mem {
                let (a, b) = backprop_with_cache(gm, mc, &self.params)?;
                g_gamma.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
                g_beta.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            }
            let mut grads = g_gamma;
            grads.extend(g_beta);
            if cfg.open_set {
                grads.push(grad_alpha);
            }
            let mut flat = self.flat(cfg.open_set);
            adam_step(&mut flat, &grads, &mut self.adam_m, &mut self.adam_v, &mut self.adam_t, cfg.learning_rate)?;
            self.set_flat(&flat, cfg.open_set)?;

            outcome.losses.push(report);
            let mut mask = vec![false; n];
            selected.iter().for_each(|&i| mask[i] = true);
            outcome.contributed = mask;
            let (s, w) = match scores {
                Some(sc) => (sc.s, Some(sc.w)),
                None => (mcm_score(&q), None),
            };
            last = Some((q, selected, s, w));
        }

        if cfg.method == Method::Cliptta && cfg.memory_enabled {
            if let Some((q, selected, s, w)) = last {
                let labels = q.argmax();
                for &i in &selected {
                    let x = x_raw.row(i).to_vec();
                    let stored = match &w {
                        Some(w) => self.memory.insert_filtered(x, labels[i], s[i], self.batches_seen, w[i])?,
                        None => self.memory.insert(x, labels[i], s[i], self.batches_seen)?,
                    };
                    outcome.memory_inserted += usize::from(stored);
                }
            }
        }
        self.batches_seen += 1;
        Ok(outcome)
    }
}

/// Held-out evaluation of one parameter setting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub prediction_entropy: f64,
    pub unique_predicted_classes: usize,
    pub auroc: Option<f64>,
    pub fpr95: Option<f64>,
    pub mu_id_minus_mu_ood: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub state: AdaptationState,
    pub history: Vec<MetricRecord>,
    pub zero_shot_eval: Option<EvalSummary>,
    pub final_eval: Option<EvalSummary>,
    /// Loss trace of every batch's inner loop.
    pub loss_traces: Vec<Vec<f64>>,
}

fn predictions(x: &Matrix, params: &EncoderParams, protos: &ClassPrototypes, tau: f64) -> Result<ProbMatrix> {
    class_probabilities(&encode(x, params)?, protos, tau)
}

fn id_indices(batch: &LabeledBatch) -> Vec<usize> {
    (0..batch.len()).filter(|&i| !batch.ood_mask[i]).collect()
}

/// Accuracy, histogram entropy and OOD statistics of `q` on `batch`.
fn summarize(batch: &LabeledBatch, q: &ProbMatrix, alpha: f64, open_set: bool) -> Result<EvalSummary> {
    let pred = q.argmax();
    let id = id_indices(batch);
    let id_pred: Vec<usize> = id.iter().map(|&i| pred[i]).collect();
    let mut out = EvalSummary {
        accuracy: accuracy(&pred, &batch.labels, &batch.id_mask())?,
        prediction_entropy: histogram_entropy(&id_pred, q.n_classes()),
        unique_predicted_classes: unique_classes(&id_pred),
        auroc: None,
        fpr95: None,
        mu_id_minus_mu_ood: None,
    };
    if open_set {
        let s = mcm_score(q);
        if batch.has_ood() {
            let s_id: Vec<f64> = id.iter().map(|&i| s[i]).collect();
            let s_ood: Vec<f64> = (0..batch.len()).filter(|&i| batch.ood_mask[i]).map(|i| s[i]).collect();
            let (a, f) = auroc_fpr95(&s_id, &s_ood)?;
            out.auroc = Some(a);
            out.fpr95 = Some(f);
        }
        out.mu_id_minus_mu_ood = oce_loss(&outlier_weights(&s, alpha)).ok().map(|r| r.mu_id - r.mu_ood);
    }
    Ok(out)
}

/// Folds `adapt_batch` over the stream, recording one metric row per batch
/// from the parameters in effect before that batch's update, then evaluates
/// the final parameters on `eval` when given.
pub fn run_stream(
    cfg: &EngineConfig,
    protos: &ClassPrototypes,
    initial: &EncoderParams,
    stream: &[LabeledBatch],
    eval: Option<&LabeledBatch>,
) -> Result<RunResult> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(Error::Invalid("empty stream".into()));
    }
    let mut state = AdaptationState::new(initial.clone(), protos.n_classes(), cfg);
    let mut history = Vec::with_capacity(stream.len());
    let mut loss_traces = Vec::with_capacity(stream.len());
    for (b, batch) in stream.iter().enumerate() {
        let q = predictions(&batch.x_raw, &state.params, protos, cfg.tau)?;
        let pre = summarize(batch, &q, state.alpha, cfg.open_set)?;
        let id = id_indices(batch);
        let q_id = q.select(&id);
        let alpha_pre = state.alpha;

        let outcome = state.adapt_batch(&batch.x_raw, protos, cfg)?;

        let zs = predictions(&batch.x_raw, initial, protos, cfg.tau)?.argmax();
        let post = predictions(&batch.x_raw, &state.params, protos, cfg.tau)?.argmax();
        let truth: Vec<usize> = id.iter().map(|&i| batch.labels[i].unwrap_or(usize::MAX)).collect();
        let pick = |v: &[usize]| id.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let (imp, det) = improvement_deterioration(&pick(&zs), &pick(&post), &truth)?;

        history.push(MetricRecord {
            batch_index: b,
            accuracy: pre.accuracy,
            mean_prediction_entropy: pre.prediction_entropy,
            mean_confidence_entropy: mean_confidence_entropy(&q_id),
            unique_predicted_classes: pre.unique_predicted_classes,
            improvement_ratio: imp,
            deterioration_ratio: det,
            auroc: pre.auroc,
            fpr95: pre.fpr95,
            mu_id_minus_mu_ood: pre.mu_id_minus_mu_ood,
            alpha: cfg.open_set.then_some(alpha_pre),
            loss_terms: outcome.losses.first().cloned(),
        });
        loss_traces.push(outcome.losses.iter().map(|l| l.l_total).collect());
        if cfg.episodic {
            state = AdaptationState { history: Vec::new(), ..AdaptationState::new(initial.clone(), protos.n_classes(), cfg) };
        }
    }
    let (zero_shot_eval, final_eval) = match eval {
        Some(e) => {
            let q0 = predictions(&e.x_raw, initial, protos, cfg.tau)?;
            let q1 = predictions(&e.x_raw, &state.params, protos, cfg.tau)?;
            (
                Some(summarize(e, &q0, cfg.alpha_init, cfg.open_set)?),
                Some(summarize(e, &q1, state.alpha, cfg.open_set)?),
            )
        }
        None => (None, None),
    };
    state.history = history.clone();
    Ok(RunResult { state, history, zero_shot_eval, final_eval, loss_traces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{Shift, StreamSpec, Surrogate};
    use crate::metrics::records_to_csv;

    fn world(spec: &StreamSpec) -> (Surrogate, EncoderParams, Vec<LabeledBatch>) {
        let s = Surrogate::build(spec).unwrap();
        let p = EncoderParams::new(s.w_proj.clone(), 0.01, 1e-5).unwrap();
        let stream = s.stream().unwrap();
        (s, p, stream)
    }

    fn small() -> StreamSpec {
        StreamSpec { samples_per_batch: 32, n_batches: 4, shift: Shift::AdditiveBias(0.6), ..StreamSpec::default() }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0];
        let mut m = vec![0.1, 0.2];
        let mut v = vec![0.01, 0.02];
        let mut t = 3;
        adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, &mut t, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert!((m[0] - 0.09).abs() < 1e-15 && (v[1] - 0.02 * 0.999).abs() < 1e-15);
        assert_eq!(t, 4);
    }

    #[test]
    fn adam_constant_gradient_steps_approach_lr() {
        let lr = 1e-4;
        let mut p = vec![0.0];
        let (mut m, mut v, mut t) = (vec![0.0], vec![0.0], 0);
        let mut prev = 0.0;
        for _ in 0..5000 {
            prev = p[0];
            adam_step(&mut p, &[0.37], &mut m, &mut v, &mut t, lr).unwrap();
        }
        let step = prev - p[0];
        assert!((step - lr).abs() < 1e-9 * 1e3 * lr, "step {step}");
        // first step is exactly lr·g/(|g| + eps)
        let mut p = vec![0.0];
        let (mut m, mut v, mut t) = (vec![0.0], vec![0.0], 0);
        adam_step(&mut p, &[0.37], &mut m, &mut v, &mut t, lr).unwrap();
        assert!((p[0] + lr * 0.37 / (0.37 + ADAM_EPS)).abs() < 1e-18);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = vec![0.0];
        let (mut m, mut v, mut t) = (vec![0.0], vec![0.0], 0);
        let e = adam_step(&mut p, &[f64::NAN], &mut m, &mut v, &mut t, 1e-3).unwrap_err();
        assert!(matches!(e, Error::GradientBlowUp(_)));
    }

    #[test]
    fn zero_shot_leaves_state_unchanged() {
        let (s, p, stream) = world(&small());
        let cfg = EngineConfig { method: Method::ZeroShot, batch_size: 32, ..Default::default() };
        let r = run_stream(&cfg, &s.protos, &p, &stream[..1], None).unwrap();
        assert_eq!(r.history.len(), 1);
        assert_eq!(r.state.params, p);
        assert_eq!(r.state.adam_t, 0);
        let q = class_probabilities(&encode(&stream[0].x_raw, &p).unwrap(), &s.protos, 0.01).unwrap();
        let acc = accuracy(&q.argmax(), &stream[0].labels, &stream[0].id_mask()).unwrap();
        assert_eq!(r.history[0].accuracy, acc);
    }

    #[test]
    fn zero_learning_rate_matches_zero_shot_predictions() {
        let (s, p, stream) = world(&small());
        let zs = run_stream(&EngineConfig { method: Method::ZeroShot, batch_size: 32, ..Default::default() }, &s.protos, &p, &stream, None).unwrap();
        for method in [Method::Cliptta, Method::Tent] {
            let cfg = EngineConfig { method, batch_size: 32, learning_rate: 0.0, ..Default::default() };
            let r = run_stream(&cfg, &s.protos, &p, &stream, None).unwrap();
            assert_eq!(r.state.params, p);
            for (a, b) in r.history.iter().zip(&zs.history) {
                assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
                assert_eq!(a.mean_prediction_entropy.to_bits(), b.mean_prediction_entropy.to_bits());
                assert_eq!(a.improvement_ratio, b.improvement_ratio);
                assert_eq!(a.deterioration_ratio, b.deterioration_ratio);
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let (s, p, stream) = world(&small());
        let cfg = EngineConfig { batch_size: 32, learning_rate: 1e-2, ..Default::default() };
        let a = run_stream(&cfg, &s.protos, &p, &stream, None).unwrap();
        let b = run_stream(&cfg, &s.protos, &p, &stream, None).unwrap();
        assert_eq!(records_to_csv(&a.history), records_to_csv(&b.history));
    }

    #[test]
    fn parameters_carry_over_between_batches() {
        let (s, p, stream) = world(&small());
        let cfg = EngineConfig { batch_size: 32, learning_rate: 1e-2, ..Default::default() };
        let mut state = AdaptationState::new(p.clone(), s.protos.n_classes(), &cfg);
        let h0 = state.param_hash();
        state.adapt_batch(&stream[0].x_raw, &s.protos, &cfg).unwrap();
        let h1 = state.param_hash();
        assert_ne!(h0, h1);
        let before = state.params.clone();
        state.adapt_batch(&stream[1].x_raw, &s.protos, &cfg).unwrap();
        // second batch started from the first batch's result, not from p
        assert_eq!(state.adam_t, 2 * cfg.inner_iterations as u64);
        assert_ne!(before, p);
        let mut fresh = AdaptationState::new(p.clone(), s.protos.n_classes(), &cfg);
        fresh.adapt_batch(&stream[1].x_raw, &s.protos, &cfg).unwrap();
        assert_ne!(fresh.param_hash(), state.param_hash());
    }

    #[test]
    fn open_set_filter_excludes_low_weight_rows() {
        let spec = StreamSpec { ood_fraction: 0.5, ..small() };
        let (s, p, stream) = world(&spec);
        let cfg = EngineConfig { batch_size: 32, open_set: true, learning_rate: 1e-2, alpha_init: 0.6, ..Default::default() };
        let mut state = AdaptationState::new(p, s.protos.n_classes(), &cfg);
        for batch in &stream {
            let q = class_probabilities(&encode(&batch.x_raw, &state.params).unwrap(), &s.protos, cfg.tau).unwrap();
            let alpha = state.alpha;
            let one_iter = EngineConfig { inner_iterations: 1, ..cfg.clone() };
            let out = state.adapt_batch(&batch.x_raw, &s.protos, &one_iter).unwrap();
            let w = outlier_weights(&mcm_score(&q), alpha).w;
            for (i, &c) in out.contributed.iter().enumerate() {
                assert_eq!(c, w[i] > 0.5);
            }
        }
    }

    #[test]
    fn single_batch_loss_mostly_decreases() {
        let spec = StreamSpec { samples_per_batch: 32, n_batches: 1, cluster_spread: 0.3, ..StreamSpec::default() };
        let mut monotone = 0;
        for seed in 0..10 {
            let (s, p, stream) = world(&StreamSpec { seed, ..spec.clone() });
            let cfg = EngineConfig { batch_size: 32, learning_rate: 1e-3, ..Default::default() };
            let mut state = AdaptationState::new(p, s.protos.n_classes(), &cfg);
            let out = state.adapt_batch(&stream[0].x_raw, &s.protos, &cfg).unwrap();
            let t: Vec<f64> = out.losses.iter().map(|l| l.l_total).collect();
            monotone += usize::from(t.windows(2).all(|w| w[1] <= w[0]));
        }
        assert!(monotone >= 9, "{monotone}/10 monotone");
    }
}
