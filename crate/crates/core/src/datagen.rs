//! Synthetic surrogate streams.
//!
//! Inputs live in `R^{d_in}`. The frozen projection `W` (`d_in × d_emb`) has
//! orthonormal columns orthogonal to the all-ones vector, so per-row mean
//! subtraction in the encoder leaves the projected signal intact and an
//! input `x = e Wᵀ` encodes (at `gamma = 1`, `beta = 0`) to `e / ‖e‖`.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ClassPrototypes;
use crate::numerics::{dot, l2_normalize, Matrix, Rng};

const MAX_PROTOTYPE_ATTEMPTS: usize = 10_000;

/// Parameterized analogue of a corruption.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Shift {
    #[default]
    None,
    /// Rotation by this angle (radians) inside a fixed plane of the
    /// embedding subspace.
    Rotation(f64),
    /// Constant offset of this magnitude along a fixed embedding direction.
    AdditiveBias(f64),
    /// Extra isotropic Gaussian noise with this standard deviation.
    Noise(f64),
}

impl fmt::Display for Shift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shift::None => write!(f, "none"),
            Shift::Rotation(a) => write!(f, "rotation:{a}"),
            Shift::AdditiveBias(m) => write!(f, "additive_bias:{m}"),
            Shift::Noise(s) => write!(f, "noise:{s}"),
        }
    }
}

impl FromStr for Shift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "none" {
            return Ok(Shift::None);
        }
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("shift '{s}': expected none or kind:value")))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("shift '{s}': '{value}' is not a number")))?;
        if !v.is_finite() {
            return Err(Error::Parse(format!("shift '{s}': magnitude must be finite")));
        }
        match kind.trim() {
            "rotation" => Ok(Shift::Rotation(v)),
            "additive_bias" => Ok(Shift::AdditiveBias(v)),
            "noise" if v >= 0.0 => Ok(Shift::Noise(v)),
            "noise" => Err(Error::Parse(format!("shift '{s}': noise sigma must be non-negative"))),
            other => Err(Error::Parse(format!("unknown shift kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamSpec {
    pub n_classes: usize,
    pub d_in: usize,
    pub d_emb: usize,
    /// In-distribution rows per batch.
    pub samples_per_batch: usize,
    pub n_batches: usize,
    pub cluster_spread: f64,
    pub shift: Shift,
    /// Fraction of each batch's rows that are OOD.
    pub ood_fraction: f64,
    pub prototype_margin: f64,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            d_in: 32,
            d_emb: 16,
            samples_per_batch: 64,
            n_batches: 40,
            cluster_spread: 0.25,
            shift: Shift::None,
            ood_fraction: 0.0,
            prototype_margin: 0.5,
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.n_classes < 2 {
            return bad(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.d_emb < 2 || self.d_emb >= self.d_in {
            return bad(format!("need 2 <= d_emb < d_in, got d_emb={} d_in={}", self.d_emb, self.d_in));
        }
        if self.samples_per_batch == 0 || self.n_batches == 0 {
            return bad("samples_per_batch and n_batches must be positive".into());
        }
        if !(self.cluster_spread.is_finite() && self.cluster_spread >= 0.0) {
            return bad(format!("cluster_spread must be finite and >= 0, got {}", self.cluster_spread));
        }
        if !(0.0..1.0).contains(&self.ood_fraction) {
            return bad(format!("ood_fraction must lie in [0, 1), got {}", self.ood_fraction));
        }
        if !(self.prototype_margin > 0.0 && self.prototype_margin < 2.0) {
            return bad(format!("prototype_margin must lie in (0, 2), got {}", self.prototype_margin));
        }
        Ok(())
    }

    /// OOD rows added next to the `samples_per_batch` ID rows.
    pub fn ood_rows_per_batch(&self) -> usize {
        if self.ood_fraction == 0.0 {
            return 0;
        }
        (self.samples_per_batch as f64 * self.ood_fraction / (1.0 - self.ood_fraction)).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub x_raw: Matrix,
    /// `None` marks an OOD row.
    pub labels: Vec<Option<usize>>,
    pub ood_mask: Vec<bool>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id_mask(&self) -> Vec<bool> {
        self.ood_mask.iter().map(|o| !o).collect()
    }

    pub fn has_ood(&self) -> bool {
        self.ood_mask.iter().any(|&o| o)
    }
}

/// Rejection-samples `n` unit vectors with pairwise cosine at most
/// `1 − margin`, continuing from `existing` rows (which count toward the
/// constraint). Each candidate is pushed away from the accepted set by an
/// amount that grows with the number of failures, so tight margins stay
/// reachable.
fn sample_separated(existing: &[Vec<f64>], n: usize, d: usize, margin: f64, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let max_cos = 1.0 - margin;
    let mut accepted: Vec<Vec<f64>> = existing.to_vec();
    let mut attempts = 0;
    let mut fresh = Vec::with_capacity(n);
    while fresh.len() < n {
        let mut failures = 0usize;
        loop {
            attempts += 1;
            if attempts > MAX_PROTOTYPE_ATTEMPTS {
                return Err(Error::MarginInfeasible { margin, attempts: MAX_PROTOTYPE_ATTEMPTS });
            }
            let mut v = rng.standard_normal(d);
            if !accepted.is_empty() && failures > 0 {
                let push = failures as f64 / 50.0;
                for a in &accepted {
                    v.iter_mut().zip(a).for_each(|(x, y)| *x -= push * y);
                }
            }
            let Ok(v) = l2_normalize(&v) else { continue };
            if accepted.iter().all(|a| dot(a, &v) <= max_cos) {
                accepted.push(v.clone());
                fresh.push(v);
                break;
            }
            failures += 1;
        }
    }
    Ok(fresh)
}

/// ID class prototypes for `spec`.
pub fn make_prototypes(spec: &StreamSpec, rng: &mut Rng) -> Result<ClassPrototypes> {
    spec.validate()?;
    let rows = sample_separated(&[], spec.n_classes, spec.d_emb, spec.prototype_margin, rng)?;
    ClassPrototypes::from_raw(&Matrix::from_rows(&rows)?)
}

/// Frozen projection: `d_in × d_emb`, orthonormal columns, each
/// orthogonal to the all-ones vector.
pub fn make_projection(d_in: usize, d_emb: usize, rng: &mut Rng) -> Result<Matrix> {
    if d_emb >= d_in {
        return Err(Error::Shape(format!("d_emb {d_emb} must be below d_in {d_in}")));
    }
    let ones = vec![1.0 / (d_in as f64).sqrt(); d_in];
    let mut basis: Vec<Vec<f64>> = vec![ones];
    while basis.len() < d_emb + 1 {
        let mut v = rng.standard_normal(d_in);
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        if let Ok(u) = l2_normalize(&v) {
            basis.push(u);
        }
    }
    let mut w = Matrix::zeros(d_in, d_emb);
    for (k, col) in basis[1..].iter().enumerate() {
        for j in 0..d_in {
            w[(j, k)] = col[j];
        }
    }
    Ok(w)
}

/// Everything fixed for one stream seed: prototypes, the projection, OOD
/// prototypes and the shift geometry.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub spec: StreamSpec,
    pub protos: ClassPrototypes,
    pub ood_protos: Matrix,
    pub w_proj: Matrix,
    /// Input-space images of the shift directions.
    shift_a: Vec<f64>,
    shift_b: Vec<f64>,
}

impl Surrogate {
    pub fn build(spec: &StreamSpec) -> Result<Self> {
        spec.validate()?;
        let protos = make_prototypes(spec, &mut Rng::derive(spec.seed, "prototypes", 0))?;
        let w_proj = make_projection(spec.d_in, spec.d_emb, &mut Rng::derive(spec.seed, "projection", 0))?;
        let ood_protos = if spec.ood_fraction > 0.0 {
            let existing: Vec<Vec<f64>> = protos.matrix().row_iter().map(<[f64]>::to_vec).collect();
            let rows = sample_separated(
                &existing,
                spec.n_classes,
                spec.d_emb,
                spec.prototype_margin,
                &mut Rng::derive(spec.seed, "ood-prototypes", 0),
            )?;
            Matrix::from_rows(&rows)?
        } else {
            Matrix::zeros(0, spec.d_emb)
        };
        let mut rng = Rng::derive(spec.seed, "shift", 0);
        let v1 = rng.unit_vector(spec.d_emb);
        let mut v2 = rng.standard_normal(spec.d_emb);
        let c = dot(&v1, &v2);
        v2.iter_mut().zip(&v1).for_each(|(x, y)| *x -= c * y);
        let v2 = l2_normalize(&v2)?;
        let shift_a = lift(&v1, &w_proj);
        let shift_b = lift(&v2, &w_proj);
        Ok(Self { spec: spec.clone(), protos, ood_protos, w_proj, shift_a, shift_b })
    }

    fn sample_row(&self, center: &[f64], rng: &mut Rng) -> Vec<f64> {
        let spec = &self.spec;
        let amp = (spec.d_in as f64).sqrt();
        let noise = rng.standard_normal(spec.d_in);
        let mut x: Vec<f64> = lift(center, &self.w_proj)
            .iter()
            .zip(&noise)
            .map(|(s, e)| amp * (s + spec.cluster_spread * e))
            .collect();
        match spec.shift {
            Shift::None => {}
            Shift::AdditiveBias(m) => x.iter_mut().zip(&self.shift_a).for_each(|(v, a)| *v += amp * m * a),
            Shift::Noise(s) => {
                let extra = rng.standard_normal(spec.d_in);
                x.iter_mut().zip(&extra).for_each(|(v, e)| *v += amp * s * e);
            }
            Shift::Rotation(theta) => {
                let (pa, pb) = (dot(&x, &self.shift_a), dot(&x, &self.shift_b));
                let (c, s) = (theta.cos(), theta.sin());
                for ((v, a), b) in x.iter_mut().zip(&self.shift_a).zip(&self.shift_b) {
                    *v += (c - 1.0) * (pa * a + pb * b) + s * (pa * b - pb * a);
                }
            }
        }
        x
    }

    /// One batch: `n_id` ID rows plus `n_ood` OOD rows, shuffled together.
    pub fn sample_batch(&self, n_id: usize, n_ood: usize, rng: &mut Rng) -> Result<LabeledBatch> {
        if n_ood > 0 && self.ood_protos.rows() == 0 {
            return Err(Error::Invalid("OOD rows requested but the stream has no OOD prototypes".into()));
        }
        let total = n_id + n_ood;
        let order = rng.sample_without_replacement(total, total);
        let mut rows = vec![Vec::new(); total];
        let mut labels = vec![None; total];
        let mut ood_mask = vec![false; total];
        for (slot, &dst) in order.iter().enumerate() {
            if slot < n_id {
                let c = rng.index(self.spec.n_classes);
                rows[dst] = self.sample_row(self.protos.row(c), rng);
                labels[dst] = Some(c);
            } else {
                let k = rng.index(self.ood_protos.rows());
                rows[dst] = self.sample_row(self.ood_protos.row(k), rng);
                ood_mask[dst] = true;
            }
        }
        Ok(LabeledBatch { x_raw: Matrix::from_rows(&rows)?, labels, ood_mask })
    }

    pub fn stream(&self) -> Result<Vec<LabeledBatch>> {
        let n_ood = self.spec.ood_rows_per_batch();
        (0..self.spec.n_batches)
            .map(|b| self.sample_batch(self.spec.samples_per_batch, n_ood, &mut Rng::derive(self.spec.seed, "batch", b as u64)))
            .collect()
    }

    /// Held-out evaluation set drawn from the same (shifted) distribution.
    pub fn eval_set(&self, n_id: usize) -> Result<LabeledBatch> {
        let n_ood = if self.spec.ood_fraction > 0.0 {
            (n_id as f64 * self.spec.ood_fraction / (1.0 - self.spec.ood_fraction)).round() as usize
        } else {
            0
        };
        self.sample_batch(n_id, n_ood, &mut Rng::derive(self.spec.seed, "eval", 0))
    }
}

/// `e Wᵀ`: the input whose projection is `e`.
fn lift(e: &[f64], w: &Matrix) -> Vec<f64> {
    (0..w.rows()).map(|j| dot(w.row(j), e)).collect()
}

/// Stream for `spec` around the given prototypes. Uses `rng` only to pick
/// the projection; batch contents come from per-batch derived streams.
pub fn generate_stream(spec: &StreamSpec, protos: &ClassPrototypes, rng: &mut Rng) -> Result<Vec<LabeledBatch>> {
    let mut s = Surrogate::build(spec)?;
    if protos.dim() != spec.d_emb {
        return Err(Error::Shape(format!("prototypes have dim {}, spec d_emb {}", protos.dim(), spec.d_emb)));
    }
    s.protos = protos.clone();
    s.w_proj = make_projection(spec.d_in, spec.d_emb, rng)?;
    s.stream()
}

/// CSV with columns `batch,row,label,ood,x0..`; OOD labels read `unknown`.
pub fn stream_to_csv(batches: &[LabeledBatch]) -> String {
    let d = batches.first().map_or(0, |b| b.x_raw.cols());
    let mut out = String::from("batch,row,label,ood");
    for j in 0..d {
        out.push_str(&format!(",x{j}"));
    }
    out.push('\n');
    for (b, batch) in batches.iter().enumerate() {
        for i in 0..batch.len() {
            let label = batch.labels[i].map_or_else(|| "unknown".to_string(), |c| c.to_string());
            out.push_str(&format!("{b},{i},{label},{}", u8::from(batch.ood_mask[i])));
            for v in batch.x_raw.row(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    out
}

pub fn stream_from_csv(text: &str) -> Result<Vec<LabeledBatch>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty stream CSV".into()))?;
    let d = header.split(',').count().checked_sub(4).ok_or_else(|| Error::Parse("stream CSV header too short".into()))?;
    let mut batches: Vec<(Vec<Vec<f64>>, Vec<Option<usize>>, Vec<bool>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        let err = |m: &str| Error::Parse(format!("stream CSV line {}: {m}", n + 2));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 4 {
            return Err(err("wrong field count"));
        }
        let b: usize = fields[0].parse().map_err(|_| err("bad batch index"))?;
        let label = match fields[2] {
            "unknown" => None,
            s => Some(s.parse::<usize>().map_err(|_| err("bad label"))?),
        };
        let ood = match fields[3] {
            "0" => false,
            "1" => true,
            _ => return Err(err("ood flag must be 0 or 1")),
        };
        if ood != label.is_none() {
            return Err(err("OOD rows must have label 'unknown' and ID rows a class"));
        }
        let x = fields[4..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| err("bad feature value")))
            .collect::<Result<Vec<_>>>()?;
        if b > batches.len() {
            return Err(err("batches must appear in order"));
        }
        if b == batches.len() {
            batches.push(Default::default());
        }
        let slot = &mut batches[b];
        slot.0.push(x);
        slot.1.push(label);
        slot.2.push(ood);
    }
    batches
        .into_iter()
        .map(|(rows, labels, ood_mask)| Ok(LabeledBatch { x_raw: Matrix::from_rows(&rows)?, labels, ood_mask }))
        .collect()
}
