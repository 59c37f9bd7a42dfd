//! Small fixed scenarios shared by the CLI and the browser demo.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gradients::{grad_cliptta_wrt_z, grad_scont_mode, grad_tent_wrt_z, BatchView};
use crate::losses::ScontMode;
use crate::model::{class_probabilities, ClassPrototypes, EmbeddingMatrix};
use crate::numerics::{dot, Matrix};
use crate::pseudo::assign_pseudo_captions;

/// A batch on the unit circle with one ambiguous sample.
#[derive(Debug, Clone)]
pub struct ToyBatch {
    pub protos: ClassPrototypes,
    pub z: EmbeddingMatrix,
    pub ambiguous: usize,
    pub tau: f64,
}

fn circle(deg: f64) -> [f64; 2] {
    let r = deg.to_radians();
    [r.cos(), r.sin()]
}

impl ToyBatch {
    pub fn from_angles(proto_deg: &[f64], sample_deg: &[f64], ambiguous: usize, tau: f64) -> Result<Self> {
        if ambiguous >= sample_deg.len() {
            return Err(Error::Invalid(format!("ambiguous index {ambiguous} out of {} samples", sample_deg.len())));
        }
        let p: Vec<[f64; 2]> = proto_deg.iter().map(|&a| circle(a)).collect();
        let z: Vec<[f64; 2]> = sample_deg.iter().map(|&a| circle(a)).collect();
        Ok(Self {
            protos: ClassPrototypes::from_raw(&Matrix::from_rows(&p)?)?,
            z: EmbeddingMatrix::new(Matrix::from_rows(&z)?)?,
            ambiguous,
            tau,
        })
    }

    /// Three classes at 0°, 120°, 240°. Sample 0 (at 66°) is predicted as
    /// class 1 with class 0 runner-up; no other sample is labelled class 0.
    pub fn reference() -> Self {
        Self::from_angles(&[0.0, 120.0, 240.0], &[66.0, 126.0, 204.0, 253.0, 118.0, 238.0], 0, 0.2)
            .expect("reference toy is valid")
    }
}

/// Inner products of each loss's descent direction (negative gradient,
/// projected onto the tangent of the unit sphere at the sample) with every
/// prototype.
#[derive(Debug, Clone, Serialize)]
pub struct DirectionReport {
    pub q: Vec<f64>,
    pub predicted: usize,
    pub runner_up: usize,
    pub tent: Vec<f64>,
    pub scont: Vec<f64>,
    pub cliptta: Vec<f64>,
}

fn descent_inner_products(g: &[f64], z: &[f64], protos: &ClassPrototypes) -> Vec<f64> {
    let radial = dot(g, z);
    let d: Vec<f64> = g.iter().zip(z).map(|(gv, zv)| -(gv - zv * radial)).collect();
    (0..protos.n_classes()).map(|k| dot(&d, protos.row(k))).collect()
}

pub fn gradient_directions(toy: &ToyBatch, lambda_reg: f64) -> Result<DirectionReport> {
    let q = class_probabilities(&toy.z, &toy.protos, toy.tau)?;
    let ps = assign_pseudo_captions(&q, &toy.protos);
    let i = toy.ambiguous;
    let row = q.row(i).to_vec();
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let zi = toy.z.matrix().row(i);
    let tent = grad_tent_wrt_z(&q, &toy.protos, toy.tau)?;
    let scont = grad_scont_mode(&toy.z, &ps, &toy.protos, &q, toy.tau, ScontMode::ImageToText)?;
    let full = grad_cliptta_wrt_z(
        BatchView { z: &toy.z, ps: &ps, q: &q },
        None,
        &toy.protos,
        toy.tau,
        ScontMode::ImageToText,
        lambda_reg,
    )?
    .current;
    Ok(DirectionReport {
        predicted: order[0],
        runner_up: order[1],
        tent: descent_inner_products(tent.row(i), zi, &toy.protos),
        scont: descent_inner_products(scont.row(i), zi, &toy.protos),
        cliptta: descent_inner_products(full.row(i), zi, &toy.protos),
        q: row,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_toy_contrasts_tent_and_cliptta() {
        let r = gradient_directions(&ToyBatch::reference(), 1.0).unwrap();
        assert_eq!((r.predicted, r.runner_up), (1, 0));
        assert!(r.q[1] < 0.75);
        assert!(r.tent[r.predicted] > 0.0);
        assert!(r.cliptta[r.runner_up] > 0.0);
    }
}
