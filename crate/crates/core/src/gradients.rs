//! Closed-form gradients of every objective with respect to the visual
//! embeddings, the chain rule back to the affine encoder parameters, and a
//! central finite-difference oracle.
//!
//! Pseudo-labels are constants during differentiation. Every embedding
//! gradient carries the `1/tau` factor of the similarity logits.

use crate::error::{Error, Result};
use crate::losses::{OodScores, ScontMode};
use crate::model::{
    batch_match_probabilities, encode_with_cache, ClassPrototypes, EmbeddingMatrix, EncoderCache, EncoderParams,
    ProbMatrix,
};
use crate::numerics::{dot, entropy, safe_ln, Matrix};
use crate::pseudo::PseudoLabelSummary;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Intermediate coefficients and the resulting soft-contrastive gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientWorkspace {
    /// `β[i][j] = p(t̂_j|x_i)·(1 + log p(t̂_j|x_i))`.
    pub beta: Matrix,
    /// `w[i][k] = N_k q_ik / Σ_c N_c q_ic`.
    pub w_class: Matrix,
    pub grad_z: Matrix,
    pub grad_gamma: Option<Vec<f64>>,
    pub grad_beta_shift: Option<Vec<f64>>,
    pub grad_alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Analytic-versus-numeric comparison. The relative error divides by
/// `max(‖analytic‖∞, 1e-8)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckResult {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub per_parameter: Vec<ParamError>,
}

impl GradCheckResult {
    pub fn compare(analytic: &[f64], numeric: &[f64]) -> Result<Self> {
        if analytic.len() != numeric.len() {
            return Err(Error::Shape(format!("{} analytic vs {} numeric", analytic.len(), numeric.len())));
        }
        let scale = analytic.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-8);
        let per_parameter: Vec<ParamError> = analytic
            .iter()
            .zip(numeric)
            .enumerate()
            .map(|(index, (&a, &n))| ParamError { index, analytic: a, numeric: n })
            .collect();
        let max_abs_error = per_parameter.iter().fold(0.0_f64, |m, p| m.max((p.analytic - p.numeric).abs()));
        Ok(Self { max_rel_error: max_abs_error / scale, max_abs_error, per_parameter })
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(Error::Temperature(tau))
    }
}

/// Composition-reweighted class distribution `w_{k,i}` for every sample.
pub fn class_weights(q: &ProbMatrix, counts: &[usize]) -> Matrix {
    let (n, c) = q.matrix().shape();
    let mut w = Matrix::zeros(n, c);
    for i in 0..n {
        let row = q.row(i);
        let den: f64 = row.iter().zip(counts).map(|(qv, &nk)| nk as f64 * qv).sum();
        for k in 0..c {
            w[(i, k)] = counts[k] as f64 * row[k] / den;
        }
    }
    w
}

/// `Σ_k w[i][k] t_k` for every sample.
fn weighted_prototypes(w: &Matrix, protos: &ClassPrototypes) -> Matrix {
    let (n, c) = w.shape();
    let d = protos.dim();
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        for k in 0..c {
            let wk = w[(i, k)];
            if wk == 0.0 {
                continue;
            }
            for (o, t) in out.row_mut(i).iter_mut().zip(protos.row(k)) {
                *o += wk * t;
            }
        }
    }
    out
}

/// Image-to-text soft-contrastive gradient via the β / w decomposition:
/// row `i` is `(1/τ) Σ_j β_ij (−ẑ_j + Σ_k w_ki t_k)`.
pub fn grad_scont_wrt_z(
    z: &EmbeddingMatrix,
    ps: &PseudoLabelSummary,
    protos: &ClassPrototypes,
    q: &ProbMatrix,
    tau: f64,
) -> Result<GradientWorkspace> {
    check_tau(tau)?;
    let n = z.len();
    if ps.len() != n || q.n_samples() != n {
        return Err(Error::Shape(format!("{n} embeddings, {} labels, {} prob rows", ps.len(), q.n_samples())));
    }
    let pm = batch_match_probabilities(z, &ps.caption_rows, tau)?;
    let mut beta = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let p = pm.p_i2t[(i, j)];
            beta[(i, j)] = p * (1.0 + safe_ln(p));
        }
    }
    let w_class = class_weights(q, &ps.counts);
    let repel = weighted_prototypes(&w_class, protos);
    let d = protos.dim();
    let mut grad_z = Matrix::zeros(n, d);
    for i in 0..n {
        let beta_sum: f64 = beta.row(i).iter().sum();
        let g = grad_z.row_mut(i);
        for j in 0..n {
            let b = beta[(i, j)];
            for (gv, cap) in g.iter_mut().zip(ps.caption_rows.row(j)) {
                *gv -= b * cap;
            }
        }
        for (gv, r) in g.iter_mut().zip(repel.row(i)) {
            *gv = (*gv + beta_sum * r) / tau;
        }
    }
    Ok(GradientWorkspace { beta, w_class, grad_z, grad_gamma: None, grad_beta_shift: None, grad_alpha: None })
}

/// Gradient of the text-to-image entropies `Σ_i H(p(·|t̂_i))` with respect
/// to every embedding.
pub fn grad_scont_t2i_wrt_z(z: &EmbeddingMatrix, ps: &PseudoLabelSummary, tau: f64) -> Result<Matrix> {
    check_tau(tau)?;
    let pm = batch_match_probabilities(z, &ps.caption_rows, tau)?;
    let n = z.len();
    let mut grad = Matrix::zeros(n, z.matrix().cols());
    for i in 0..n {
        let r = pm.p_t2i.row(i);
        let h = entropy(r);
        let cap = ps.caption_rows.row(i);
        for m in 0..n {
            let coef = -r[m] * (safe_ln(r[m]) + h) / tau;
            for (g, c) in grad.row_mut(m).iter_mut().zip(cap) {
                *g += coef * c;
            }
        }
    }
    Ok(grad)
}

/// Soft-contrastive gradient for either mode.
pub fn grad_scont_mode(
    z: &EmbeddingMatrix,
    ps: &PseudoLabelSummary,
    protos: &ClassPrototypes,
    q: &ProbMatrix,
    tau: f64,
    mode: ScontMode,
) -> Result<Matrix> {
    let mut g = grad_scont_wrt_z(z, ps, protos, q, tau)?.grad_z;
    if mode == ScontMode::Symmetric {
        g.add_scaled(&grad_scont_t2i_wrt_z(z, ps, tau)?, 1.0)?;
    }
    Ok(g)
}

/// Two-class closed form:
/// `(1/τ)[β_a q_b − β_b q_a] · N_a N_b / (N_a q_a + N_b q_b) · (t_b − t_a)`.
///
/// `beta_row` holds `(β_{i,a}, β_{i,b})`, the β of any caption of class
/// `a` and `b` respectively.
pub fn grad_binary_closed_form(
    z_i: &[f64],
    q_row: &[f64],
    counts: [usize; 2],
    beta_row: [f64; 2],
    protos: &ClassPrototypes,
    tau: f64,
) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if protos.n_classes() != 2 || q_row.len() != 2 {
        return Err(Error::Invalid(format!(
            "binary closed form needs 2 classes, got {}",
            protos.n_classes()
        )));
    }
    if z_i.len() != protos.dim() {
        return Err(Error::Shape(format!("embedding dim {} vs {}", z_i.len(), protos.dim())));
    }
    let coef = binary_composition_coefficient(q_row, counts);
    let bracket = beta_row[0] * q_row[1] - beta_row[1] * q_row[0];
    let s = bracket * coef / tau;
    Ok(protos.row(1).iter().zip(protos.row(0)).map(|(b, a)| s * (b - a)).collect())
}

/// `N_a N_b / (N_a q_a + N_b q_b)`, the batch-composition damping factor.
pub fn binary_composition_coefficient(q_row: &[f64], counts: [usize; 2]) -> f64 {
    let (na, nb) = (counts[0] as f64, counts[1] as f64);
    let den = na * q_row[0] + nb * q_row[1];
    if na * nb == 0.0 {
        0.0
    } else {
        na * nb / den
    }
}

/// Row `i`: `−(1/τ) Σ_k [Σ_c log(q_ik/q_ic) q_ic] q_ik t_k`.
pub fn grad_tent_wrt_z(q: &ProbMatrix, protos: &ClassPrototypes, tau: f64) -> Result<Matrix> {
    check_tau(tau)?;
    let (n, c) = q.matrix().shape();
    let mut coef = Matrix::zeros(n, c);
    for i in 0..n {
        let row = q.row(i);
        let logs: Vec<f64> = row.iter().map(|&v| safe_ln(v)).collect();
        for k in 0..c {
            let inner: f64 = (0..c).map(|cc| (logs[k] - logs[cc]) * row[cc]).sum();
            coef[(i, k)] = -inner * row[k] / tau;
        }
    }
    Ok(weighted_prototypes(&coef, protos))
}

/// Row `i`: `(1/τ)(−ẑ_i + Σ_k w_ki t_k)`.
pub fn grad_hard_contrastive_wrt_z(
    z: &EmbeddingMatrix,
    ps: &PseudoLabelSummary,
    protos: &ClassPrototypes,
    q: &ProbMatrix,
    tau: f64,
) -> Result<Matrix> {
    check_tau(tau)?;
    if ps.len() != z.len() {
        return Err(Error::Shape(format!("{} embeddings vs {} labels", z.len(), ps.len())));
    }
    let w = class_weights(q, &ps.counts);
    let mut g = weighted_prototypes(&w, protos);
    for i in 0..z.len() {
        for (gv, cap) in g.row_mut(i).iter_mut().zip(ps.caption_rows.row(i)) {
            *gv = (*gv - cap) / tau;
        }
    }
    Ok(g)
}

/// Row `i`: `(1/(Nτ)) Σ_k [Σ_j q_ij log(q̄_k/q̄_j)] q_ik t_k`.
pub fn grad_reg_wrt_z(q: &ProbMatrix, protos: &ClassPrototypes, tau: f64) -> Result<Matrix> {
    check_tau(tau)?;
    let (n, c) = q.matrix().shape();
    let logs: Vec<f64> = q.class_means().iter().map(|&v| safe_ln(v)).collect();
    let mut coef = Matrix::zeros(n, c);
    for i in 0..n {
        let row = q.row(i);
        for k in 0..c {
            let inner: f64 = (0..c).map(|j| row[j] * (logs[k] - logs[j])).sum();
            coef[(i, k)] = inner * row[k] / (n as f64 * tau);
        }
    }
    Ok(weighted_prototypes(&coef, protos))
}

/// One batch as seen by the soft-contrastive loss.
#[derive(Debug, Clone, Copy)]
pub struct BatchView<'a> {
    pub z: &'a EmbeddingMatrix,
    pub ps: &'a PseudoLabelSummary,
    pub q: &'a ProbMatrix,
}

/// Embedding gradients of the combined objective.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedGradient {
    pub current: Matrix,
    pub memory: Option<Matrix>,
}

/// Gradient of `½[L_s(current) + L_s(memory)] + λ_reg L_reg(current)`, or of
/// `L_s(current) + λ_reg L_reg(current)` without a memory batch.
pub fn grad_cliptta_wrt_z(
    current: BatchView<'_>,
    memory: Option<BatchView<'_>>,
    protos: &ClassPrototypes,
    tau: f64,
    mode: ScontMode,
    lambda_reg: f64,
) -> Result<CombinedGradient> {
    let half = if memory.is_some() { 0.5 } else { 1.0 };
    let mut g = grad_scont_mode(current.z, current.ps, protos, current.q, tau, mode)?;
    if half != 1.0 {
        g = g.scale(half);
    }
    if lambda_reg != 0.0 {
        g.add_scaled(&grad_reg_wrt_z(current.q, protos, tau)?, lambda_reg)?;
    }
    let memory = match memory {
        Some(m) => Some(grad_scont_mode(m.z, m.ps, protos, m.q, tau, mode)?.scale(half)),
        None => None,
    };
    Ok(CombinedGradient { current: g, memory })
}

/// Exact partial derivatives of `−(μ_id − μ_ood)²` with respect to the
/// scores `s_i` and the threshold `α`, through `w_i = sigmoid(s_i − α)`.
pub fn grad_oce(scores: &OodScores) -> Result<(f64, Vec<f64>)> {
    let n = scores.s.len();
    if n == 0 || scores.w.len() != n {
        return Err(Error::Shape(format!("{} scores vs {} weights", n, scores.w.len())));
    }
    let sw: f64 = scores.w.iter().sum();
    let sv: f64 = scores.w.iter().map(|w| 1.0 - w).sum();
    if sw < 1e-12 || sv < 1e-12 {
        return Err(Error::DegeneratePartition);
    }
    let mu_id = scores.w.iter().zip(&scores.s).map(|(w, s)| w * s).sum::<f64>() / sw;
    let mu_ood = scores.w.iter().zip(&scores.s).map(|(w, s)| (1.0 - w) * s).sum::<f64>() / sv;
    let outer = -2.0 * (mu_id - mu_ood);
    let mut grad_s = Vec::with_capacity(n);
    let mut grad_alpha = 0.0;
    for (&s, &w) in scores.s.iter().zip(&scores.w) {
        let dw = w * (1.0 - w);
        // d(μ_id − μ_ood)/dw_i
        let via_w = (s - mu_id) / sw + (s - mu_ood) / sv;
        let direct = w / sw - (1.0 - w) / sv;
        grad_s.push(outer * (direct + via_w * dw));
        grad_alpha -= outer * via_w * dw;
    }
    Ok((grad_alpha, grad_s))
}

/// Chains score gradients through `s_i = max_c q_ic`, taking the argmax
/// branch (lowest index on ties): `∂s_i/∂z_i = (1/τ) q_iĉ (t_ĉ − Σ_k q_ik t_k)`.
pub fn grad_mcm_wrt_z(q: &ProbMatrix, protos: &ClassPrototypes, tau: f64, grad_s: &[f64]) -> Result<Matrix> {
    check_tau(tau)?;
    let (n, c) = q.matrix().shape();
    if grad_s.len() != n {
        return Err(Error::Shape(format!("{} score gradients for {n} samples", grad_s.len())));
    }
    let top = q.argmax();
    let mut coef = Matrix::zeros(n, c);
    for i in 0..n {
        let row = q.row(i);
        let s = row[top[i]];
        let scale = grad_s[i] * s / tau;
        for k in 0..c {
            coef[(i, k)] = -scale * row[k];
        }
        coef[(i, top[i])] += scale;
    }
    Ok(weighted_prototypes(&coef, protos))
}

/// Chain rule from embedding gradients to `(∂L/∂gamma, ∂L/∂beta)`.
pub fn backprop_through_encoder(grad_z: &Matrix, x_raw: &Matrix, params: &EncoderParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let cache = encode_with_cache(x_raw, params)?;
    backprop_with_cache(grad_z, &cache, params)
}

/// Same as [`backprop_through_encoder`] with a forward cache.
pub fn backprop_with_cache(
    grad_z: &Matrix,
    cache: &EncoderCache,
    params: &EncoderParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let z = cache.z.matrix();
    if grad_z.shape() != z.shape() {
        return Err(Error::Shape(format!("gradient {:?} vs embeddings {:?}", grad_z.shape(), z.shape())));
    }
    let d_in = params.d_in();
    let w = params.w_proj();
    let mut g_gamma = vec![0.0; d_in];
    let mut g_beta = vec![0.0; d_in];
    let mut g_u = vec![0.0; params.d_emb()];
    for i in 0..z.rows() {
        let zi = z.row(i);
        let gz = grad_z.row(i);
        let proj = dot(zi, gz);
        for ((gu, zv), gv) in g_u.iter_mut().zip(zi).zip(gz) {
            *gu = (gv - zv * proj) / cache.u_norm[i];
        }
        let xh = cache.x_hat.row(i);
        for j in 0..d_in {
            let g_h = dot(w.row(j), &g_u);
            g_gamma[j] += g_h * xh[j];
            g_beta[j] += g_h;
        }
    }
    Ok((g_gamma, g_beta))
}

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h` per coordinate.
pub fn finite_difference_oracle<F>(mut loss_fn: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        let (up, down) = (orig + h, orig - h);
        x[i] = up;
        let fp = loss_fn(&x)?;
        x[i] = down;
        let fm = loss_fn(&x)?;
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite-difference loss evaluation"));
        }
        // divide by the step actually taken after rounding
        out.push((fp - fm) / (up - down));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{
        hard_contrastive_loss, oce_loss, outlier_weights, regularizer_loss, soft_contrastive_loss, tent_loss,
    };
    use crate::model::{class_probabilities, encode};
    use crate::numerics::{l2_normalize, Rng};
    use crate::pseudo::assign_pseudo_captions;

    /// Embeddings and prototypes clustered around one direction so logits
    /// stay O(1) at every temperature.
    fn setup(n: usize, c: usize, d: usize, tau: f64, seed: u64) -> (EmbeddingMatrix, ClassPrototypes) {
        let mut rng = Rng::new(seed);
        let base = rng.unit_vector(d);
        let spread = 1.5 * tau.sqrt();
        let near = |rng: &mut Rng| {
            let noise = rng.standard_normal(d);
            let v: Vec<f64> = base.iter().zip(&noise).map(|(b, e)| b + spread * e).collect();
            l2_normalize(&v).unwrap()
        };
        let protos: Vec<Vec<f64>> = (0..c).map(|_| near(&mut rng)).collect();
        let z: Vec<Vec<f64>> = (0..n).map(|_| near(&mut rng)).collect();
        (
            EmbeddingMatrix::new(Matrix::from_rows(&z).unwrap()).unwrap(),
            ClassPrototypes::from_raw(&Matrix::from_rows(&protos).unwrap()).unwrap(),
        )
    }

    /// Free (unnormalized) embedding coordinates, matching what the
    /// analytic gradients differentiate against.
    fn embed(flat: &[f64], n: usize, d: usize) -> Result<EmbeddingMatrix> {
        Ok(EmbeddingMatrix::unchecked(Matrix::from_vec(n, d, flat.to_vec())?))
    }

    fn rel(analytic: &Matrix, numeric: &[f64]) -> f64 {
        GradCheckResult::compare(analytic.data(), numeric).unwrap().max_rel_error
    }

    #[test]
    fn fd_oracle_examples() {
        let g = finite_difference_oracle(|x| Ok(x[0] * x[0] + x[1] * x[1]), &[1.0, 2.0], DEFAULT_FD_STEP).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-9 && (g[1] - 4.0).abs() < 1e-9);
        let g = finite_difference_oracle(|x| Ok(3.0 * x[0]), &[5.0], DEFAULT_FD_STEP).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-10);
        assert!(finite_difference_oracle(|_| Ok(f64::NAN), &[0.0], 1e-5).is_err());
        assert!(finite_difference_oracle(|x| Ok(x[0]), &[0.0], 0.0).is_err());
    }

    #[test]
    fn scont_gradient_matches_fd() {
        for (seed, tau) in [(1, 0.01), (2, 0.1), (3, 1.0)] {
            let (z, protos) = setup(6, 3, 5, tau, seed);
            let q = class_probabilities(&z, &protos, tau).unwrap();
            let ps = assign_pseudo_captions(&q, &protos);
            let ws = grad_scont_wrt_z(&z, &ps, &protos, &q, tau).unwrap();
            let num = finite_difference_oracle(
                |x| {
                    let zz = embed(x, 6, 5)?;
                    let pm = batch_match_probabilities(&zz, &ps.caption_rows, tau)?;
                    Ok(soft_contrastive_loss(&pm, ScontMode::ImageToText))
                },
                z.matrix().data(),
                DEFAULT_FD_STEP,
            )
            .unwrap();
            assert!(rel(&ws.grad_z, &num) < 1e-6, "tau {tau}: {}", rel(&ws.grad_z, &num));
        }
    }

    #[test]
    fn symmetric_gradient_matches_fd() {
        let tau = 0.1;
        let (z, protos) = setup(5, 3, 4, tau, 8);
        let q = class_probabilities(&z, &protos, tau).unwrap();
        let ps = assign_pseudo_captions(&q, &protos);
        let g = grad_scont_mode(&z, &ps, &protos, &q, tau, ScontMode::Symmetric).unwrap();
        let num = finite_difference_oracle(
            |x| {
                let pm = batch_match_probabilities(&embed(x, 5, 4)?, &ps.caption_rows, tau)?;
                Ok(soft_contrastive_loss(&pm, ScontMode::Symmetric))
            },
            z.matrix().data(),
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(rel(&g, &num) < 1e-6);
    }

    #[test]
    fn beta_and_weights_invariants() {
        let tau = 0.1;
        let (z, protos) = setup(7, 4, 5, tau, 4);
        let q = class_probabilities(&z, &protos, tau).unwrap();
        let ps = assign_pseudo_captions(&q, &protos);
        let ws = grad_scont_wrt_z(&z, &ps, &protos, &q, tau).unwrap();
        let pm = batch_match_probabilities(&z, &ps.caption_rows, tau).unwrap();
        for i in 0..7 {
            assert!((ws.w_class.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-10);
            for j in 0..7 {
                let p = pm.p_i2t[(i, j)];
                assert!((ws.beta[(i, j)] - p * (1.0 + p.ln())).abs() < 1e-12);
                assert_eq!(ws.beta[(i, j)] < 0.0, p < (-1.0_f64).exp());
            }
        }
    }

    #[test]
    fn collapsed_batch_has_zero_scont_gradient() {
        let tau = 0.05;
        let (z, protos) = setup(8, 3, 5, tau, 5);
        let q = class_probabilities(&z, &protos, tau).unwrap();
        let ps = PseudoLabelSummary::from_labels(vec![1; 8], &protos);
        let ws = grad_scont_wrt_z(&z, &ps, &protos, &q, tau).unwrap();
        assert!(ws.grad_z.max_abs() <= 1e-12);
        let hard = grad_hard_contrastive_wrt_z(&z, &ps, &protos, &q, tau).unwrap();
        assert!(hard.max_abs() <= 1e-12);
    }

    #[test]
    fn binary_closed_form_matches_general_formula() {
        let tau = 0.1;
        let (z, protos) = setup(9, 2, 4, tau, 6);
        let q = class_probabilities(&z, &protos, tau).unwrap();
        let ps = PseudoLabelSummary::from_labels(vec![0, 0, 0, 0, 0, 0, 1, 1, 0], &protos);
        let ws = grad_scont_wrt_z(&z, &ps, &protos, &q, tau).unwrap();
        for i in 0..9 {
            let beta_a = ws.beta[(i, 0)];
            let beta_b = ws.beta[(i, 6)];
            let g = grad_binary_closed_form(
                z.matrix().row(i),
                q.row(i),
                [ps.counts[0], ps.counts[1]],
                [beta_a, beta_b],
                &protos,
                tau,
            )
            .unwrap();
            for (a, b) in g.iter().zip(ws.grad_z.row(i)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn binary_closed_form_degenerate_cases() {
        let protos = ClassPrototypes::from_raw(&Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap()).unwrap();
        let g = grad_binary_closed_form(&[1.0, 0.0], &[0.7, 0.3], [5, 0], [0.1, -0.2], &protos, 1.0).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        // β_a q_b = β_b q_a
        let g = grad_binary_closed_form(&[1.0, 0.0], &[0.6, 0.4], [3, 2], [0.3, 0.2], &protos, 1.0).unwrap();
        assert!(g.iter().all(|&v| v.abs() < 1e-15));
        let three = ClassPrototypes::from_raw(&Rng::new(1).normal_matrix(3, 2)).unwrap();
        assert!(grad_binary_closed_form(&[1.0, 0.0], &[0.6, 0.4], [3, 2], [0.2, 0.3], &three, 1.0).is_err());
    }

    #[test]
    fn tent_gradient_examples() {
        let tau = 0.1;
        let (z, protos) = setup(4, 3, 5, tau, 9);
        let q = class_probabilities(&z, &protos, tau).unwrap();
        let g = grad_tent_wrt_z(&q, &protos, tau).unwrap();
        let num = finite_difference_oracle(
            |x| Ok(tent_loss(&class_probabilities(&embed(x, 4, 5)?, &protos, tau)?)),
            z.matrix().data(),
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(rel(&g, &num) < 1e-6);

        let uniform = ProbMatrix::new(Matrix::from_rows(&[[1.0 / 3.0; 3]]).unwrap()).unwrap();
        assert!(grad_tent_wrt_z(&uniform, &protos, tau).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn tent_gradient_reinforces_confident_prediction() {
        let protos = ClassPrototypes::from_raw(&Rng::new(2).normal_matrix(3, 4)).unwrap();
        let q = ProbMatrix::new(Matrix::from_rows(&[[0.99, 0.006, 0.004]]).unwrap()).unwrap();
        let g = grad_tent_wrt_z(&q, &protos, 1.0).unwrap();
        // descent direction −g moves toward the predicted class relative to the mean prototype
        let mean: Vec<f64> =
            (0..4).map(|j| (0..3).map(|k| q.row(0)[k] * protos.row(k)[j]).sum::<f64>()).collect();
        let toward: Vec<f64> = protos.row(0).iter().zip(&mean).map(|(a, b)| a - b).collect();
        assert!(-dot(g.row(0), &toward) > 0.0);
    }

    #[test]
    fn hard_contrastive_gradient_examples() {
        let tau = 0.1;
        let (z, protos) = setup(6, 3, 5, tau, 10);
        let q = class_probabilities(&z, &protos, tau).unwrap();
        let ps = assign_pseudo_captions(&q, &protos);
        let g = grad_hard_contrastive_wrt_z(&z, &ps, &protos, &q, tau).unwrap();
        let num = finite_difference_oracle(
            |x| hard_contrastive_loss(&embed(x, 6, 5)?, &ps, tau),
            z.matrix().data(),
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(rel(&g, &num) < 1e-6);

        // equal counts reduce w to q
        let balanced = PseudoLabelSummary::from_labels(vec![0, 1, 2, 0, 1, 2], &protos);
        let g = grad_hard_contrastive_wrt_z(&z, &balanced, &protos, &q, tau).unwrap();
        for i in 0..6 {
            for j in 0..5 {
                let mix: f64 = (0..3).map(|k| q.row(i)[k] * protos.row(k)[j]).sum();
                let expect = (mix - balanced.caption_rows[(i, j)]) / tau;
                assert!((g[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reg_gradient_examples() {
        let tau = 0.1;
        let (z, protos) = setup(7, 4, 5, tau, 11);
        let q = class_probabilities(&z, &protos, tau).unwrap();
        let g = grad_reg_wrt_z(&q, &protos, tau).unwrap();
        let num = finite_difference_oracle(
            |x| Ok(regularizer_loss(&class_probabilities(&embed(x, 7, 5)?, &protos, tau)?).0),
            z.matrix().data(),
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(rel(&g, &num) < 1e-6);

        let uniform = ProbMatrix::new(Matrix::from_rows(&[[0.7, 0.3], [0.3, 0.7]]).unwrap()).unwrap();
        let p2 = ClassPrototypes::from_raw(&Rng::new(3).normal_matrix(2, 3)).unwrap();
        assert!(grad_reg_wrt_z(&uniform, &p2, tau).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn reg_gradient_pushes_toward_underrepresented_classes() {
        let protos = ClassPrototypes::from_raw(&Matrix::identity(3)).unwrap();
        // class 0 dominates the batch marginal
        let q = ProbMatrix::new(
            Matrix::from_rows(&[[0.8, 0.1, 0.1], [0.7, 0.2, 0.1], [0.6, 0.2, 0.2], [0.4, 0.3, 0.3]]).unwrap(),
        )
        .unwrap();
        let g = grad_reg_wrt_z(&q, &protos, 1.0).unwrap();
        for i in 0..4 {
            // descent −g decreases the dominant coordinate relative to the others
            let step: Vec<f64> = g.row(i).iter().map(|v| -v).collect();
            assert!(step[0] < step[1] && step[0] < step[2]);
        }
    }

    #[test]
    fn cliptta_gradient_reduces_to_scont_without_regularizer() {
        let tau = 0.1;
        let (z, protos) = setup(6, 3, 5, tau, 12);
        let q = class_probabilities(&z, &protos, tau).unwrap();
        let ps = assign_pseudo_captions(&q, &protos);
        let view = BatchView { z: &z, ps: &ps, q: &q };
        let g = grad_cliptta_wrt_z(view, None, &protos, tau, ScontMode::ImageToText, 0.0).unwrap();
        assert_eq!(g.current, grad_scont_wrt_z(&z, &ps, &protos, &q, tau).unwrap().grad_z);
    }

    #[test]
    fn oce_gradient_matches_fd() {
        let s = [0.9, 0.1];
        let alpha = 0.5;
        let (ga, gs) = grad_oce(&outlier_weights(&s, alpha)).unwrap();
        let num_s =
            finite_difference_oracle(|x| Ok(oce_loss(&outlier_weights(x, alpha))?.loss), &s, DEFAULT_FD_STEP).unwrap();
        let num_a =
            finite_difference_oracle(|a| Ok(oce_loss(&outlier_weights(&s, a[0]))?.loss), &[alpha], DEFAULT_FD_STEP)
                .unwrap();
        let scale = gs.iter().fold(ga.abs(), |m, v| m.max(v.abs()));
        for (a, n) in gs.iter().zip(&num_s) {
            assert!((a - n).abs() / scale < 1e-7);
        }
        assert!((ga - num_a[0]).abs() / scale < 1e-7);

        let (ga, gs) = grad_oce(&outlier_weights(&[0.4, 0.4, 0.4], 0.2)).unwrap();
        assert_eq!(ga, 0.0);
        assert!(gs.iter().all(|&v| v == 0.0));

        let (ga, gs) = grad_oce(&outlier_weights(&[0.9, 0.2, 0.5], 20.0)).unwrap();
        assert!(ga.is_finite() && gs.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mcm_chain_matches_fd() {
        let tau = 0.1;
        let (z, protos) = setup(5, 3, 4, tau, 13);
        let q = class_probabilities(&z, &protos, tau).unwrap();
        let weights = [0.3, -1.2, 0.7, 2.0, -0.4];
        let g = grad_mcm_wrt_z(&q, &protos, tau, &weights).unwrap();
        let num = finite_difference_oracle(
            |x| {
                let qq = class_probabilities(&embed(x, 5, 4)?, &protos, tau)?;
                Ok(crate::model::mcm_score(&qq).iter().zip(&weights).map(|(s, w)| s * w).sum())
            },
            z.matrix().data(),
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(rel(&g, &num) < 1e-6);
    }

    #[test]
    fn encoder_backprop_zero_gradient() {
        let mut rng = Rng::new(14);
        let params = EncoderParams::new(rng.normal_matrix(4, 3), 0.1, 1e-5).unwrap();
        let x = rng.normal_matrix(3, 4);
        let (gg, gb) = backprop_through_encoder(&Matrix::zeros(3, 3), &x, &params).unwrap();
        assert!(gg.iter().chain(&gb).all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_backprop_hand_unrolled_two_dims() {
        // x = [a, -a] standardizes to [1, -1] (up to eps); identity projection
        let eps = 1e-5;
        let mut params = EncoderParams::new(Matrix::identity(2), 1.0, eps).unwrap();
        params.gamma = vec![1.5, 0.5];
        params.beta = vec![0.2, -0.1];
        let x = Matrix::from_rows(&[[2.0, -2.0]]).unwrap();
        let s = (4.0_f64 + eps).sqrt();
        let xh = [2.0 / s, -2.0 / s];
        let u = [1.5 * xh[0] + 0.2, 0.5 * xh[1] - 0.1];
        let nu = (u[0] * u[0] + u[1] * u[1]).sqrt();
        let z = [u[0] / nu, u[1] / nu];
        let gz = [0.7, -0.3];
        let proj = z[0] * gz[0] + z[1] * gz[1];
        let gu = [(gz[0] - z[0] * proj) / nu, (gz[1] - z[1] * proj) / nu];
        let (gg, gb) =
            backprop_through_encoder(&Matrix::from_rows(&[gz]).unwrap(), &x, &params).unwrap();
        for j in 0..2 {
            assert!((gg[j] - gu[j] * xh[j]).abs() < 1e-14);
            assert!((gb[j] - gu[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn encoder_backprop_matches_fd() {
        let mut rng = Rng::new(15);
        let mut params = EncoderParams::new(rng.normal_matrix(6, 4), 0.1, 1e-5).unwrap();
        params.gamma = rng.standard_normal(6).iter().map(|g| 1.0 + 0.2 * g).collect();
        params.beta = rng.standard_normal(6).iter().map(|b| 0.2 * b).collect();
        let x = rng.normal_matrix(5, 6);
        let probe = rng.normal_matrix(5, 4);
        let (gg, gb) = backprop_through_encoder(&probe, &x, &params).unwrap();
        let mut analytic = gg.clone();
        analytic.extend_from_slice(&gb);
        let num = finite_difference_oracle(
            |flat| {
                let mut p = params.clone();
                p.set_trainable(flat)?;
                let z = encode(&x, &p)?;
                Ok(dot(z.matrix().data(), probe.data()))
            },
            &params.trainable(),
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(GradCheckResult::compare(&analytic, &num).unwrap().max_rel_error < 1e-6);
    }
}
