//! Comparison back-ends: discriminative PLDA (a linear model over the
//! quadratic pair expansion) and the pairwise Gaussian back-end. Both
//! operate on preprocessed embeddings.

use crate::error::{Error, Result};
use crate::io::{trial_targets, EmbeddingSet, Trial};
use crate::plda::ScoreMatrices;
use nalgebra::{DMatrix, DVector};

/// Weight vector over the quadratic expansion; length `2d^2 + d + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DpldaModel {
    pub w: DVector<f64>,
}

impl DpldaModel {
    pub fn zeros(dim: usize) -> Self {
        DpldaModel {
            w: DVector::zeros(expansion_len(dim)),
        }
    }

    /// Processed-embedding dimension recovered from the weight length.
    pub fn embedding_dim(&self) -> Result<usize> {
        let len = self.w.len();
        let mut d = 0usize;
        while expansion_len(d) < len {
            d += 1;
        }
        if expansion_len(d) != len {
            return Err(Error::Dimension(format!(
                "weight length {len} is not of the form 2d^2 + d + 1"
            )));
        }
        Ok(d)
    }
}

pub fn expansion_len(dim: usize) -> usize {
    2 * dim * dim + dim + 1
}

/// Quadratic trial expansion:
/// `[vec(e t' + t e'); vec(e e' + t t'); e + t; 1]`, row-major vec.
/// Symmetric under pair swap by construction.
pub fn dplda_expand(e: &DVector<f64>, t: &DVector<f64>) -> Result<DVector<f64>> {
    let d = e.len();
    if t.len() != d {
        return Err(Error::Dimension(format!(
            "expansion of vectors with lengths {d} and {}",
            t.len()
        )));
    }
    let mut out = DVector::zeros(expansion_len(d));
    let mut at = 0;
    for r in 0..d {
        for c in 0..d {
            out[at] = e[r] * t[c] + t[r] * e[c];
            at += 1;
        }
    }
    for r in 0..d {
        for c in 0..d {
            out[at] = e[r] * e[c] + t[r] * t[c];
            at += 1;
        }
    }
    for r in 0..d {
        out[at] = e[r] + t[r];
        at += 1;
    }
    out[at] = 1.0;
    Ok(out)
}

/// Pack P into the cross block and Q into the self block so the dot
/// product with the expansion reproduces the closed-form pair score.
pub fn dplda_init_from_plda(pq: &ScoreMatrices) -> DpldaModel {
    let d = pq.dim();
    let mut w = DVector::zeros(expansion_len(d));
    let mut at = 0;
    for r in 0..d {
        for c in 0..d {
            w[at] = pq.p[(r, c)];
            at += 1;
        }
    }
    for r in 0..d {
        for c in 0..d {
            w[at] = pq.q[(r, c)];
            at += 1;
        }
    }
    DpldaModel { w }
}

/// `w' phi`.
pub fn dplda_score(m: &DpldaModel, phi: &DVector<f64>) -> Result<f64> {
    if m.w.len() != phi.len() {
        return Err(Error::Dimension(format!(
            "weight length {} against expansion length {}",
            m.w.len(),
            phi.len()
        )));
    }
    Ok(m.w.dot(phi))
}

/// Class-conditional Gaussians over stacked trial pairs `[e; t]`.
#[derive(Debug, Clone)]
pub struct PairwiseGaussian {
    pub mu_t: DVector<f64>,
    pub mu_nt: DVector<f64>,
    pub sigma_t: DMatrix<f64>,
    pub sigma_nt: DMatrix<f64>,
}

impl PairwiseGaussian {
    pub fn stacked_dim(&self) -> usize {
        self.mu_t.len()
    }
}

const GB_RIDGE_SCALE: f64 = 1e-4;
const GB_MAX_CONDITION: f64 = 1e10;

fn class_moments(pairs: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let dim = pairs[0].len();
    let n = pairs.len() as f64;
    let mut mean = DVector::zeros(dim);
    for p in pairs {
        mean += p;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for p in pairs {
        let y = p - &mean;
        cov += &y * y.transpose();
    }
    cov /= n;
    (mean, cov)
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = ((m + m.transpose()) * 0.5).symmetric_eigen();
    let mut max = f64::MIN;
    let mut min = f64::MAX;
    for &v in eig.eigenvalues.iter() {
        max = max.max(v.abs());
        min = min.min(v.abs());
    }
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn ridge_if_needed(cov: &mut DMatrix<f64>, n_samples: usize) {
    let dim = cov.nrows();
    if n_samples < 2 * dim || condition_number(cov) > GB_MAX_CONDITION {
        let ridge = (GB_RIDGE_SCALE * cov.trace() / dim as f64).max(1e-8);
        for i in 0..dim {
            cov[(i, i)] += ridge;
        }
    }
}

/// Sample means and covariances of target and non-target stacked pairs.
/// Covariances are MLE (divide by N) so duplicating the whole trial list
/// changes nothing; small or ill-conditioned classes get a ridge.
pub fn gb_estimate(trials: &[Trial], set: &EmbeddingSet) -> Result<PairwiseGaussian> {
    let targets = trial_targets(trials)?;
    let resolved = set.resolve_trials(trials)?;
    let d = set.dim();
    let mut tar = Vec::new();
    let mut non = Vec::new();
    for (&(e, t), &is_target) in resolved.iter().zip(&targets) {
        let mut stacked = DVector::zeros(2 * d);
        stacked.rows_mut(0, d).copy_from(&set.entries()[e].vector);
        stacked.rows_mut(d, d).copy_from(&set.entries()[t].vector);
        if is_target {
            tar.push(stacked);
        } else {
            non.push(stacked);
        }
    }
    if tar.is_empty() || non.is_empty() {
        return Err(Error::Domain(format!(
            "pairwise gaussian needs both classes: {} targets, {} non-targets",
            tar.len(),
            non.len()
        )));
    }
    let (mu_t, mut sigma_t) = class_moments(&tar);
    let (mu_nt, mut sigma_nt) = class_moments(&non);
    ridge_if_needed(&mut sigma_t, tar.len());
    ridge_if_needed(&mut sigma_nt, non.len());
    Ok(PairwiseGaussian {
        mu_t,
        mu_nt,
        sigma_t,
        sigma_nt,
    })
}

/// Full Gaussian log-likelihood ratio of the stacked pair, quadratic
/// forms and log-determinants both halved. Higher means more
/// target-like.
pub fn gb_score(g: &PairwiseGaussian, e: &DVector<f64>, t: &DVector<f64>) -> Result<f64> {
    let dim = g.stacked_dim();
    if e.len() + t.len() != dim {
        return Err(Error::Dimension(format!(
            "pair of lengths {} and {} against stacked dimension {dim}",
            e.len(),
            t.len()
        )));
    }
    let mut x = DVector::zeros(dim);
    x.rows_mut(0, e.len()).copy_from(e);
    x.rows_mut(e.len(), t.len()).copy_from(t);

    let half_form = |mean: &DVector<f64>, cov: &DMatrix<f64>| -> Result<(f64, f64)> {
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("class covariance is not positive definite".into()))?;
        let mut log_det = 0.0;
        for i in 0..dim {
            log_det += 2.0 * chol.l()[(i, i)].ln();
        }
        let diff = &x - mean;
        Ok((diff.dot(&chol.solve(&diff)), log_det))
    };
    let (q_t, ld_t) = half_form(&g.mu_t, &g.sigma_t)?;
    let (q_nt, ld_nt) = half_form(&g.mu_nt, &g.sigma_nt)?;
    Ok(0.5 * (q_nt - q_t) + 0.5 * (ld_nt - ld_t))
}
