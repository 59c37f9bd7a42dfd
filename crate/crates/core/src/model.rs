//! Surrogate vision-language model.
//!
//! Fixed class prototypes stand in for text embeddings. The visual encoder
//! standardizes each input row, applies a per-feature affine map
//! (`gamma`, `beta`), projects through a frozen matrix and l2-normalizes.
//! The affine parameters are the only trainable state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, matmul, matmul_transpose_b, norm, softmax, Matrix};

pub const DEFAULT_TAU: f64 = 0.01;
pub const DEFAULT_EPS_NORM: f64 = 1e-5;

/// Unit-norm class vectors, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypes {
    protos: Matrix,
    class_names: Vec<String>,
}

impl ClassPrototypes {
    pub fn new(protos: Matrix, class_names: Vec<String>) -> Result<Self> {
        let c = protos.rows();
        if c < 2 {
            return Err(Error::Invalid(format!("need at least 2 classes, got {c}")));
        }
        if class_names.len() != c {
            return Err(Error::Shape(format!("{} names for {c} prototypes", class_names.len())));
        }
        if !protos.is_finite() {
            return Err(Error::NonFinite("prototypes"));
        }
        for (k, row) in protos.row_iter().enumerate() {
            if (norm(row) - 1.0).abs() > 1e-10 {
                return Err(Error::Invalid(format!("prototype {k} is not unit-norm")));
            }
        }
        for a in 0..c {
            for b in a + 1..c {
                if protos.row(a) == protos.row(b) {
                    return Err(Error::Invalid(format!("prototypes {a} and {b} coincide")));
                }
            }
        }
        Ok(Self { protos, class_names })
    }

    /// Normalizes every row, then validates. Classes are named `c0, c1, ...`.
    pub fn from_raw(raw: &Matrix) -> Result<Self> {
        let rows = raw.row_iter().map(l2_normalize).collect::<Result<Vec<_>>>()?;
        let names = (0..raw.rows()).map(|k| format!("c{k}")).collect();
        Self::new(Matrix::from_rows(&rows)?, names)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.protos
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.protos.row(k)
    }

    pub fn n_classes(&self) -> usize {
        self.protos.rows()
    }

    pub fn dim(&self) -> usize {
        self.protos.cols()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// CSV with header `class,dim0,...,dim{d-1}`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for j in 0..self.dim() {
            out.push_str(&format!(",dim{j}"));
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(self.protos.row_iter()) {
            out.push_str(name);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty prototype file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first().map(|s| s.trim()) != Some("class") {
            return Err(Error::Parse("prototype header must start with `class`".into()));
        }
        for (j, c) in cols.iter().enumerate().skip(1) {
            if c.trim() != format!("dim{}", j - 1) {
                return Err(Error::Parse(format!("unexpected header column `{c}`")));
            }
        }
        let d = cols.len() - 1;
        let mut names = Vec::new();
        let mut rows = Vec::new();
        for (ln, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 1 {
                return Err(Error::Parse(format!("row {} has {} fields", ln + 1, fields.len())));
            }
            names.push(fields[0].trim().to_string());
            let row = fields[1..]
                .iter()
                .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Parse(format!("row {}: {e}", ln + 1))))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Self::new(Matrix::from_rows(&rows)?, names)
    }
}

/// Visual encoder parameters. Only `gamma` and `beta` are trainable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    w_proj: Matrix,
    tau: f64,
    eps_norm: f64,
}

impl EncoderParams {
    /// Identity affine map (`gamma = 1`, `beta = 0`) over a frozen projection.
    pub fn new(w_proj: Matrix, tau: f64, eps_norm: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Temperature(tau));
        }
        if !(eps_norm > 0.0) {
            return Err(Error::Invalid(format!("eps_norm must be positive, got {eps_norm}")));
        }
        let d_in = w_proj.rows();
        Ok(Self { gamma: vec![1.0; d_in], beta: vec![0.0; d_in], w_proj, tau, eps_norm })
    }

    pub fn w_proj(&self) -> &Matrix {
        &self.w_proj
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn eps_norm(&self) -> f64 {
        self.eps_norm
    }

    pub fn d_in(&self) -> usize {
        self.w_proj.rows()
    }

    pub fn d_emb(&self) -> usize {
        self.w_proj.cols()
    }

    /// Trainable entries flattened as `[gamma.., beta..]`.
    pub fn trainable(&self) -> Vec<f64> {
        let mut v = self.gamma.clone();
        v.extend_from_slice(&self.beta);
        v
    }

    pub fn set_trainable(&mut self, flat: &[f64]) -> Result<()> {
        let d = self.d_in();
        if flat.len() != 2 * d {
            return Err(Error::Shape(format!("{} trainable values, expected {}", flat.len(), 2 * d)));
        }
        self.gamma.copy_from_slice(&flat[..d]);
        self.beta.copy_from_slice(&flat[d..]);
        Ok(())
    }
}

/// Unit-norm visual embeddings, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Matrix);

impl EmbeddingMatrix {
    pub fn new(z: Matrix) -> Result<Self> {
        for (i, row) in z.row_iter().enumerate() {
            if (norm(row) - 1.0).abs() > 1e-10 {
                return Err(Error::Invalid(format!("embedding row {i} is not unit-norm")));
            }
        }
        Ok(Self(z))
    }

    /// Skips the unit-norm check. Used when differentiating with respect
    /// to free embedding coordinates.
    pub fn unchecked(z: Matrix) -> Self {
        Self(z)
    }

    /// Normalizes each row first.
    pub fn from_raw(raw: &Matrix) -> Result<Self> {
        let rows = raw.row_iter().map(l2_normalize).collect::<Result<Vec<_>>>()?;
        Ok(Self(Matrix::from_rows(&rows)?))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self(self.0.select_rows(idx))
    }
}

/// Row-stochastic class probabilities `q[i][c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix(Matrix);

impl ProbMatrix {
    pub fn new(q: Matrix) -> Result<Self> {
        for (i, row) in q.row_iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-10 || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Invalid(format!("row {i} is not a probability vector")));
            }
        }
        Ok(Self(q))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn n_samples(&self) -> usize {
        self.0.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.0.cols()
    }

    /// Column means `q̄_c`.
    pub fn class_means(&self) -> Vec<f64> {
        let n = self.0.rows() as f64;
        let mut m = vec![0.0; self.0.cols()];
        for row in self.0.row_iter() {
            for (acc, v) in m.iter_mut().zip(row) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Argmax per row, lowest index on ties.
    pub fn argmax(&self) -> Vec<usize> {
        self.0.row_iter().map(argmax).collect()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self(self.0.select_rows(idx))
    }
}

/// Image-to-text and text-to-image matching distributions within a batch.
///
/// `p_i2t` row `i` is the distribution of image `i` over the batch's
/// pseudo-captions. `p_t2i` row `i` is the distribution of pseudo-caption
/// `i` over the batch's images, so `p_t2i[i][j] = p(x_j | t̂_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMatchMatrix {
    pub p_i2t: Matrix,
    pub p_t2i: Matrix,
}

/// Per-sample quantities kept by the encoder forward pass for backprop.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    /// Standardized inputs.
    pub x_hat: Matrix,
    /// Pre-normalization norms `‖u_i‖`.
    pub u_norm: Vec<f64>,
    pub z: EmbeddingMatrix,
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn standardize(x_raw: &Matrix, eps_norm: f64) -> Matrix {
    let d = x_raw.cols() as f64;
    let mut out = x_raw.clone();
    for i in 0..x_raw.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let s = (var + eps_norm).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) / s);
    }
    out
}

/// Forward pass keeping intermediates.
pub fn encode_with_cache(x_raw: &Matrix, params: &EncoderParams) -> Result<EncoderCache> {
    if x_raw.cols() != params.d_in() {
        return Err(Error::Shape(format!(
            "input has {} features, encoder expects {}",
            x_raw.cols(),
            params.d_in()
        )));
    }
    if !x_raw.is_finite() {
        return Err(Error::NonFinite("encoder input"));
    }
    let x_hat = standardize(x_raw, params.eps_norm);
    let mut h = x_hat.clone();
    for i in 0..h.rows() {
        for (j, v) in h.row_mut(i).iter_mut().enumerate() {
            *v = params.gamma[j] * *v + params.beta[j];
        }
    }
    let u = matmul(&h, &params.w_proj)?;
    let mut u_norm = Vec::with_capacity(u.rows());
    let mut z = Matrix::zeros(u.rows(), u.cols());
    for i in 0..u.rows() {
        let n = norm(u.row(i));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm);
        }
        u_norm.push(n);
        for (dst, src) in z.row_mut(i).iter_mut().zip(u.row(i)) {
            *dst = src / n;
        }
    }
    Ok(EncoderCache { x_hat, u_norm, z: EmbeddingMatrix(z) })
}

pub fn encode(x_raw: &Matrix, params: &EncoderParams) -> Result<EmbeddingMatrix> {
    Ok(encode_with_cache(x_raw, params)?.z)
}

/// `q_ic = softmax_c(z_i · t_c / tau)`.
pub fn class_probabilities(z: &EmbeddingMatrix, protos: &ClassPrototypes, tau: f64) -> Result<ProbMatrix> {
    if !(tau > 0.0) {
        return Err(Error::Temperature(tau));
    }
    if z.matrix().cols() != protos.dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs prototype dim {}",
            z.matrix().cols(),
            protos.dim()
        )));
    }
    let sims = matmul_transpose_b(z.matrix(), protos.matrix())?;
    let mut q = Matrix::zeros(sims.rows(), sims.cols());
    for i in 0..sims.rows() {
        let logits: Vec<f64> = sims.row(i).iter().map(|s| s / tau).collect();
        q.row_mut(i).copy_from_slice(&softmax(&logits)?);
    }
    Ok(ProbMatrix(q))
}

pub fn batch_match_probabilities(
    z: &EmbeddingMatrix,
    pseudo_caption_rows: &Matrix,
    tau: f64,
) -> Result<BatchMatchMatrix> {
    if !(tau > 0.0) {
        return Err(Error::Temperature(tau));
    }
    if z.len() != pseudo_caption_rows.rows() || z.len() == 0 {
        return Err(Error::Shape(format!(
            "{} images vs {} pseudo-captions",
            z.len(),
            pseudo_caption_rows.rows()
        )));
    }
    let sims = matmul_transpose_b(z.matrix(), pseudo_caption_rows)?.scale(1.0 / tau);
    let n = sims.rows();
    let mut p_i2t = Matrix::zeros(n, n);
    for i in 0..n {
        p_i2t.row_mut(i).copy_from_slice(&softmax(sims.row(i))?);
    }
    let sims_t = sims.transpose();
    let mut p_t2i = Matrix::zeros(n, n);
    for i in 0..n {
        p_t2i.row_mut(i).copy_from_slice(&softmax(sims_t.row(i))?);
    }
    Ok(BatchMatchMatrix { p_i2t, p_t2i })
}

/// Maximum class probability per sample.
pub fn mcm_score(q: &ProbMatrix) -> Vec<f64> {
    q.matrix().row_iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect()
}

/// Cosine similarities of every sample to every prototype.
pub fn similarities(z: &EmbeddingMatrix, protos: &ClassPrototypes) -> Result<Matrix> {
    matmul_transpose_b(z.matrix(), protos.matrix())
}
