//! Generative PLDA: EM estimation of the latent-factor model
//! `eta = mu + Phi w + eps`, closed-form pair scoring through the P/Q
//! matrices, an exact joint-Gaussian log-likelihood-ratio oracle, and a
//! synthetic-data sampler.

use crate::error::{Error, Result};
use crate::io::{Embedding, EmbeddingSet, Gender};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

const EM_MAX_ITERS: usize = 50;
const EM_REL_TOL: f64 = 1e-6;
// Relative and absolute eigenvalue floors applied to Sigma each M-step.
const SIGMA_FLOOR_REL: f64 = 1e-6;
const SIGMA_FLOOR_ABS: f64 = 1e-10;
const MAX_CONDITION: f64 = 1e12;

/// The estimated model: global mean, speaker subspace and residual
/// covariance, all in the processed embedding space.
#[derive(Debug, Clone)]
pub struct GenerativePlda {
    pub mu: DVector<f64>,
    /// d x r speaker subspace.
    pub phi: DMatrix<f64>,
    /// d x d symmetric positive-definite residual covariance.
    pub sigma: DMatrix<f64>,
}

impl GenerativePlda {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn rank(&self) -> usize {
        self.phi.ncols()
    }

    /// Across-class covariance `Phi Phi'`.
    pub fn sigma_ac(&self) -> DMatrix<f64> {
        &self.phi * self.phi.transpose()
    }

    /// Total covariance `Phi Phi' + Sigma`.
    pub fn sigma_tot(&self) -> DMatrix<f64> {
        self.sigma_ac() + &self.sigma
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.phi.nrows() != d || self.sigma.nrows() != d || self.sigma.ncols() != d {
            return Err(Error::Dimension(format!(
                "plda blocks disagree: mu {}, Phi {}x{}, Sigma {}x{}",
                d,
                self.phi.nrows(),
                self.phi.ncols(),
                self.sigma.nrows(),
                self.sigma.ncols()
            )));
        }
        if self.phi.ncols() > d {
            return Err(Error::Dimension(format!(
                "plda rank {} exceeds dimension {d}",
                self.phi.ncols()
            )));
        }
        Ok(())
    }
}

/// Symmetric pair-scoring matrices derived from a generative model.
#[derive(Debug, Clone)]
pub struct ScoreMatrices {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl ScoreMatrices {
    pub fn dim(&self) -> usize {
        self.p.nrows()
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = symmetrize(m).symmetric_eigen();
    let mut max = f64::MIN;
    let mut min = f64::MAX;
    for &v in eig.eigenvalues.iter() {
        let a = v.abs();
        max = max.max(a);
        min = min.min(a);
    }
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn checked_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if condition_number(m) > MAX_CONDITION {
        return Err(Error::Numerical(format!(
            "{what} is singular (condition number > {MAX_CONDITION:.0e})"
        )));
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical(format!("{what} is not invertible")))
}

/// Derive the P/Q scoring matrices. Both are symmetrized after the
/// inversions so downstream code can rely on exact symmetry.
pub fn derive_pq(m: &GenerativePlda) -> Result<ScoreMatrices> {
    m.validate()?;
    let tot = m.sigma_tot();
    let ac = m.sigma_ac();
    let tot_inv = checked_inverse(&tot, "total covariance")?;
    let schur = &tot - &ac * &tot_inv * &ac;
    let schur_inv = checked_inverse(&schur, "conditional covariance")?;
    let q = symmetrize(&(&tot_inv - &schur_inv));
    let p = symmetrize(&(&tot_inv * &ac * &schur_inv));
    Ok(ScoreMatrices { p, q })
}

/// Quadratic pair score `e'Qe + t'Qt + 2 e'Pt`, computed so swapping the
/// arguments returns the bit-identical value.
pub fn score_pair(pq: &ScoreMatrices, e: &DVector<f64>, t: &DVector<f64>) -> Result<f64> {
    let d = pq.dim();
    if e.len() != d || t.len() != d {
        return Err(Error::Dimension(format!(
            "score_pair: vectors of length {} and {} against {d}x{d} matrices",
            e.len(),
            t.len()
        )));
    }
    let qe = e.dot(&(&pq.q * e));
    let qt = t.dot(&(&pq.q * t));
    // averaging the two cross products keeps the score exactly symmetric
    let cross = 0.5 * (e.dot(&(&pq.p * t)) + t.dot(&(&pq.p * e)));
    Ok((qe + qt) + 2.0 * cross)
}

/// Log-density of `N(mean, cov)` at `x` via Cholesky factorization.
fn gaussian_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol: Cholesky<f64, Dyn> = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
    let dim = x.len() as f64;
    let mut log_det = 0.0;
    for i in 0..x.len() {
        log_det += chol.l()[(i, i)].ln();
    }
    let diff = x - mean;
    let sol = chol.solve(&diff);
    Ok(-0.5 * dim * (2.0 * std::f64::consts::PI).ln() - log_det - 0.5 * diff.dot(&sol))
}

/// Exact log-likelihood ratio of the same-speaker vs independent joint
/// Gaussians implied by the model, computed by explicit 2d x 2d
/// factorization. Serves as the verification oracle for [`score_pair`].
pub fn llr_oracle(m: &GenerativePlda, e: &DVector<f64>, t: &DVector<f64>) -> Result<f64> {
    m.validate()?;
    let d = m.dim();
    if e.len() != d || t.len() != d {
        return Err(Error::Dimension(format!(
            "llr_oracle: vectors of length {} and {} against model dimension {d}",
            e.len(),
            t.len()
        )));
    }
    let tot = m.sigma_tot();
    let ac = m.sigma_ac();
    let mut joint_tar = DMatrix::zeros(2 * d, 2 * d);
    let mut joint_non = DMatrix::zeros(2 * d, 2 * d);
    joint_tar.view_mut((0, 0), (d, d)).copy_from(&tot);
    joint_tar.view_mut((d, d), (d, d)).copy_from(&tot);
    joint_tar.view_mut((0, d), (d, d)).copy_from(&ac);
    joint_tar.view_mut((d, 0), (d, d)).copy_from(&ac);
    joint_non.view_mut((0, 0), (d, d)).copy_from(&tot);
    joint_non.view_mut((d, d), (d, d)).copy_from(&tot);

    let mut x = DVector::zeros(2 * d);
    x.rows_mut(0, d).copy_from(e);
    x.rows_mut(d, d).copy_from(t);
    let mut mean = DVector::zeros(2 * d);
    mean.rows_mut(0, d).copy_from(&m.mu);
    mean.rows_mut(d, d).copy_from(&m.mu);

    Ok(gaussian_logpdf(&x, &mean, &joint_tar)? - gaussian_logpdf(&x, &mean, &joint_non)?)
}

fn group_positions(set: &EmbeddingSet) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (pos, e) in set.entries().iter().enumerate() {
        let spk = e
            .speaker_id
            .clone()
            .ok_or_else(|| Error::Domain(format!("embedding {:?} has no speaker label", e.id)))?;
        groups.entry(spk).or_default().push(pos);
    }
    Ok(groups)
}

/// Clamp the eigenvalues of a symmetric matrix from below.
fn floor_eigenvalues(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let floor = (SIGMA_FLOOR_REL * max).max(SIGMA_FLOOR_ABS);
    let vals = DVector::from_fn(eig.eigenvalues.len(), |i, _| eig.eigenvalues[i].max(floor));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()))
}

/// EM fit of the latent-factor model. Returns the model and the
/// per-iteration marginal log-likelihood trace.
pub fn estimate_plda_detailed(
    set: &EmbeddingSet,
    rank: usize,
) -> Result<(GenerativePlda, Vec<f64>)> {
    let d = set.dim();
    if rank == 0 || rank > d {
        return Err(Error::Domain(format!("plda rank {rank} out of range 1..={d}")));
    }
    let groups = group_positions(set)?;
    if groups.len() < 2 {
        return Err(Error::Domain(format!(
            "plda estimation needs at least 2 speakers, found {}",
            groups.len()
        )));
    }
    let n = set.len() as f64;
    let mu = crate::preprocess::estimate_centering(set)?;

    // centered data, per-speaker sums, and the (constant) total scatter
    let centered: Vec<DVector<f64>> = set.entries().iter().map(|e| &e.vector - &mu).collect();
    let speakers: Vec<&Vec<usize>> = groups.values().collect();
    let sums: Vec<DVector<f64>> = speakers
        .iter()
        .map(|positions| {
            let mut f = DVector::zeros(d);
            for &p in positions.iter() {
                f += &centered[p];
            }
            f
        })
        .collect();
    let mut total_scatter = DMatrix::zeros(d, d);
    for y in &centered {
        total_scatter += y * y.transpose();
    }

    // moment-matching initialization: Phi from the between-speaker
    // scatter, Sigma from the within-speaker scatter
    let mut between = DMatrix::zeros(d, d);
    let mut within = DMatrix::zeros(d, d);
    for (positions, f) in speakers.iter().zip(&sums) {
        let ns = positions.len() as f64;
        let mean_s = f / ns;
        between += ns * &mean_s * mean_s.transpose();
        for &p in positions.iter() {
            let r = &centered[p] - &mean_s;
            within += &r * r.transpose();
        }
    }
    between /= n;
    within /= n;

    let eig = symmetrize(&between).symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut phi = DMatrix::zeros(d, rank);
    for (c, &i) in order.iter().take(rank).enumerate() {
        let scale = eig.eigenvalues[i].max(0.0).sqrt();
        phi.column_mut(c).copy_from(&(eig.eigenvectors.column(i) * scale));
    }
    let mut sigma = floor_eigenvalues(&within);

    let mut history = Vec::new();
    for _ in 0..EM_MAX_ITERS {
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("residual covariance lost positive definiteness".into()))?;
        let sigma_inv = chol.inverse();
        let mut sigma_log_det = 0.0;
        for i in 0..d {
            sigma_log_det += 2.0 * chol.l()[(i, i)].ln();
        }
        let t_mat = phi.transpose() * &sigma_inv; // r x d

        let mut log_lik = -0.5 * n * (d as f64) * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * n * sigma_log_det
            - 0.5 * (&sigma_inv * &total_scatter).trace();

        let mut r1 = DMatrix::zeros(d, rank);
        let mut r2 = DMatrix::zeros(rank, rank);
        for (positions, f) in speakers.iter().zip(&sums) {
            let ns = positions.len() as f64;
            let lambda = DMatrix::identity(rank, rank) + ns * &t_mat * &phi;
            let lam_chol = symmetrize(&lambda)
                .cholesky()
                .ok_or_else(|| Error::Numerical("posterior precision not positive definite".into()))?;
            let b = &t_mat * f;
            let m_s = lam_chol.solve(&b);
            let cov_s = lam_chol.inverse();
            let mut lam_log_det = 0.0;
            for i in 0..rank {
                lam_log_det += 2.0 * lam_chol.l()[(i, i)].ln();
            }
            log_lik += -0.5 * lam_log_det + 0.5 * b.dot(&m_s);

            r1 += f * m_s.transpose();
            r2 += ns * (&cov_s + &m_s * m_s.transpose());
        }
        history.push(log_lik);

        // M-step
        let r2_chol = symmetrize(&r2)
            .cholesky()
            .ok_or_else(|| Error::Numerical("latent second-moment matrix is singular".into()))?;
        let phi_new = r2_chol.solve(&r1.transpose()).transpose();
        let sigma_new = (&total_scatter - &phi_new * r1.transpose()) / n;
        phi = phi_new;
        sigma = floor_eigenvalues(&sigma_new);

        if history.len() >= 2 {
            let prev = history[history.len() - 2];
            let cur = history[history.len() - 1];
            if (cur - prev).abs() / prev.abs().max(1.0) < EM_REL_TOL {
                break;
            }
        }
    }

    Ok((GenerativePlda { mu, phi, sigma }, history))
}

/// EM fit of the latent-factor model on a speaker-labeled set.
pub fn estimate_plda(set: &EmbeddingSet, rank: usize) -> Result<GenerativePlda> {
    estimate_plda_detailed(set, rank).map(|(m, _)| m)
}

/// Population-level structure applied on top of the latent-factor
/// sampler: a per-gender mean offset (`+shift` for male speakers,
/// `-shift` for female) and a per-source session offset (`+shift` for
/// "tel" sessions, `-shift` for "vid"). Real embedding populations carry
/// exactly this kind of metadata structure, which is why training trials
/// are matched by gender and source.
#[derive(Debug, Clone, Default)]
pub struct PopulationShifts {
    pub gender: Option<DVector<f64>>,
    pub source: Option<DVector<f64>>,
}

impl PopulationShifts {
    /// Deterministic unit-direction shifts scaled by the given offsets.
    pub fn random(dim: usize, gender_offset: f64, source_offset: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851f42d4c957f2d);
        let mut unit = || {
            let g = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let n = g.norm();
            g / n
        };
        let gender_dir = unit();
        let source_dir = unit();
        PopulationShifts {
            gender: (gender_offset != 0.0).then(|| gender_dir * gender_offset),
            source: (source_offset != 0.0).then(|| source_dir * source_offset),
        }
    }
}

/// Draw `n_speakers * n_sessions` embeddings from the model:
/// `eta = mu + Phi w + eps` with one latent `w` per speaker. Gender
/// alternates per speaker and source per session, so sampled sets carry
/// the metadata the trial sampler matches on.
pub fn sample_synthetic(
    m: &GenerativePlda,
    n_speakers: usize,
    n_sessions: usize,
    seed: u64,
) -> Result<EmbeddingSet> {
    sample_structured(m, n_speakers, n_sessions, &PopulationShifts::default(), seed)
}

/// [`sample_synthetic`] with optional gender/source mean shifts.
pub fn sample_structured(
    m: &GenerativePlda,
    n_speakers: usize,
    n_sessions: usize,
    shifts: &PopulationShifts,
    seed: u64,
) -> Result<EmbeddingSet> {
    m.validate()?;
    if n_speakers == 0 || n_sessions == 0 {
        return Err(Error::Domain(
            "speaker and session counts must be positive".into(),
        ));
    }
    let d = m.dim();
    let r = m.rank();
    for shift in [&shifts.gender, &shifts.source].into_iter().flatten() {
        if shift.len() != d {
            return Err(Error::Dimension(format!(
                "population shift of length {} against dimension {d}",
                shift.len()
            )));
        }
    }
    let chol = m
        .sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("residual covariance is not positive definite".into()))?;
    let l = chol.l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n_speakers * n_sessions);
    for s in 0..n_speakers {
        let omega = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut speaker_mean = &m.mu + &m.phi * omega;
        let gender = if s % 2 == 0 { Gender::Male } else { Gender::Female };
        if let Some(shift) = &shifts.gender {
            match gender {
                Gender::Male => speaker_mean += shift,
                _ => speaker_mean -= shift,
            }
        }
        for j in 0..n_sessions {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let source = if j % 2 == 0 { "tel" } else { "vid" };
            let mut vector = &speaker_mean + &l * z;
            if let Some(shift) = &shifts.source {
                if source == "tel" {
                    vector += shift;
                } else {
                    vector -= shift;
                }
            }
            entries.push(Embedding {
                id: format!("spk{s:04}_sess{j:03}"),
                vector,
                speaker_id: Some(format!("spk{s:04}")),
                gender: Some(gender),
                source: Some(source.to_string()),
            });
        }
    }
    EmbeddingSet::new(entries)
}

/// A reproducible random population model for synthetic experiments:
/// random orthogonal speaker directions with geometrically decaying
/// variances over a rotated anisotropic residual.
pub fn random_population(dim: usize, rank: usize, seed: u64) -> Result<GenerativePlda> {
    if dim == 0 || rank == 0 || rank > dim {
        return Err(Error::Domain(format!(
            "population rank {rank} out of range 1..={dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let basis = qr.q();
    let mut phi = DMatrix::zeros(dim, rank);
    for c in 0..rank {
        let var: f64 = 6.0 * 0.9_f64.powi(c as i32);
        phi.column_mut(c).copy_from(&(basis.column(c) * var.sqrt()));
    }
    let g2 = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let rot = g2.qr().q();
    let resid = DVector::from_fn(dim, |i, _| 0.25 + 0.5 * (i as f64) / (dim.max(2) - 1) as f64);
    let sigma = symmetrize(&(&rot * DMatrix::from_diagonal(&resid) * rot.transpose()));
    let mu = DVector::from_fn(dim, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
    Ok(GenerativePlda { mu, phi, sigma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_model(sigma_ac: f64, sigma_tot: f64) -> GenerativePlda {
        GenerativePlda {
            mu: DVector::zeros(1),
            phi: DMatrix::from_element(1, 1, sigma_ac.sqrt()),
            sigma: DMatrix::from_element(1, 1, sigma_tot - sigma_ac),
        }
    }

    fn random_model(d: usize, r: usize, seed: u64) -> GenerativePlda {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = DMatrix::from_fn(d, r, |_, _| rng.sample::<f64, _>(StandardNormal)) * 0.8;
        let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal)) * 0.3;
        let sigma = &g * g.transpose() + DMatrix::identity(d, d) * 0.5;
        let mu = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        GenerativePlda { mu, phi, sigma }
    }

    #[test]
    fn pq_vanish_without_speaker_variability() {
        let m = GenerativePlda {
            mu: DVector::zeros(3),
            phi: DMatrix::zeros(3, 1),
            sigma: DMatrix::identity(3, 3),
        };
        let pq = derive_pq(&m).unwrap();
        assert!(pq.p.norm() < 1e-14);
        assert!(pq.q.norm() < 1e-14);
    }

    #[test]
    fn pq_scalar_hand_case() {
        // sigma_ac = 0.5, sigma_tot = 1: Q = 1 - 1/(1 - 0.25) = -1/3,
        // P = 0.5 / 0.75 = 2/3
        let pq = derive_pq(&scalar_model(0.5, 1.0)).unwrap();
        assert_abs_diff_eq!(pq.q[(0, 0)], -1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pq.p[(0, 0)], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn pq_matches_block_inverse_oracle() {
        let m = random_model(5, 2, 42);
        let pq = derive_pq(&m).unwrap();
        let d = 5;
        let tot = m.sigma_tot();
        let ac = m.sigma_ac();
        let mut joint = DMatrix::zeros(2 * d, 2 * d);
        joint.view_mut((0, 0), (d, d)).copy_from(&tot);
        joint.view_mut((d, d), (d, d)).copy_from(&tot);
        joint.view_mut((0, d), (d, d)).copy_from(&ac);
        joint.view_mut((d, 0), (d, d)).copy_from(&ac);
        let joint_inv = joint.try_inverse().unwrap();
        let tot_inv = tot.try_inverse().unwrap();
        // Q = Sigma_tot^-1 - [joint^-1]_11, P = -[joint^-1]_12
        for i in 0..d {
            for j in 0..d {
                let q_ref = tot_inv[(i, j)] - joint_inv[(i, j)];
                let p_ref = -joint_inv[(i, j + d)];
                assert!((pq.q[(i, j)] - q_ref).abs() < 1e-8, "Q ({i},{j})");
                assert!((pq.p[(i, j)] - p_ref).abs() < 1e-8, "P ({i},{j})");
            }
        }
    }

    #[test]
    fn score_pair_trivial_cases() {
        let pq = ScoreMatrices {
            p: DMatrix::identity(2, 2),
            q: DMatrix::zeros(2, 2),
        };
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        assert_abs_diff_eq!(score_pair(&pq, &e1, &e1).unwrap(), 2.0, epsilon = 1e-15);

        let zero = ScoreMatrices {
            p: DMatrix::zeros(2, 2),
            q: DMatrix::zeros(2, 2),
        };
        let t = DVector::from_vec(vec![0.3, -0.7]);
        assert_eq!(score_pair(&zero, &e1, &t).unwrap(), 0.0);
    }

    #[test]
    fn score_pair_swap_is_bit_identical() {
        let m = random_model(4, 2, 7);
        let pq = derive_pq(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let e = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let t = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let ab = score_pair(&pq, &e, &t).unwrap();
            let ba = score_pair(&pq, &t, &e).unwrap();
            assert_eq!(ab.to_bits(), ba.to_bits());
        }
    }

    #[test]
    fn llr_zero_when_hypotheses_coincide() {
        let m = GenerativePlda {
            mu: DVector::from_vec(vec![0.4, -0.1]),
            phi: DMatrix::zeros(2, 1),
            sigma: DMatrix::identity(2, 2),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let e = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let t = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            assert!(llr_oracle(&m, &e, &t).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn llr_scalar_hand_case() {
        let m = scalar_model(0.5, 1.0);
        let zero = DVector::zeros(1);
        let llr = llr_oracle(&m, &zero, &zero).unwrap();
        assert_abs_diff_eq!(llr, -0.5 * (1.0 - 0.25f64).ln(), epsilon = 1e-10);
        assert_abs_diff_eq!(llr, 0.14384, epsilon = 1e-5);
    }

    #[test]
    fn llr_is_symmetric() {
        let m = random_model(3, 2, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let e = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let t = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let ab = llr_oracle(&m, &e, &t).unwrap();
            let ba = llr_oracle(&m, &t, &e).unwrap();
            assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn score_minus_twice_llr_is_constant() {
        let m = random_model(4, 2, 31);
        let pq = derive_pq(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut offsets = Vec::new();
        for _ in 0..100 {
            let e = DVector::from_fn(4, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
            let t = DVector::from_fn(4, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
            let s = score_pair(&pq, &(&e - &m.mu), &(&t - &m.mu)).unwrap();
            let llr = llr_oracle(&m, &e, &t).unwrap();
            offsets.push(s - 2.0 * llr);
        }
        let first = offsets[0];
        for o in &offsets {
            assert!((o - first).abs() < 1e-8, "offset drift: {} vs {first}", o);
        }
    }

    #[test]
    fn em_recovers_across_class_covariance() {
        let d = 10;
        let r = 3;
        let truth = random_model(d, r, 100);
        let data = sample_synthetic(&truth, 500, 10, 200).unwrap();
        let (est, _) = estimate_plda_detailed(&data, r).unwrap();
        let diff = est.sigma_ac() - truth.sigma_ac();
        let rel = diff.norm() / truth.sigma_ac().norm();
        assert!(rel < 0.15, "Sigma_ac relative error {rel}");
    }

    #[test]
    fn em_log_likelihood_nondecreasing() {
        let truth = random_model(6, 2, 55);
        let data = sample_synthetic(&truth, 40, 5, 56).unwrap();
        let (_, history) = estimate_plda_detailed(&data, 2).unwrap();
        assert!(history.len() >= 2);
        for w in history.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "log-likelihood decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn em_degenerate_identical_embeddings() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let entries: Vec<Embedding> = (0..6)
            .map(|i| Embedding {
                id: format!("e{i}"),
                vector: v.clone(),
                speaker_id: Some(format!("s{i}")),
                gender: None,
                source: None,
            })
            .collect();
        let set = EmbeddingSet::new(entries).unwrap();
        let model = estimate_plda(&set, 1).unwrap();
        // Sigma collapses toward zero but stays positive definite
        assert!(model.sigma.clone().cholesky().is_some());
        assert!(model.sigma.norm() < 1e-6);
    }

    #[test]
    fn em_rejects_bad_rank_and_few_speakers() {
        let truth = random_model(4, 2, 60);
        let data = sample_synthetic(&truth, 3, 2, 61).unwrap();
        assert!(estimate_plda(&data, 5).is_err());
        let one = sample_synthetic(&truth, 1, 4, 62).unwrap();
        assert!(estimate_plda(&one, 2).is_err());
    }

    #[test]
    fn sampler_counts_and_determinism() {
        let m = random_model(4, 2, 70);
        let a = sample_synthetic(&m, 2, 3, 7).unwrap();
        assert_eq!(a.len(), 6);
        let speakers: std::collections::BTreeSet<_> = a
            .entries()
            .iter()
            .map(|e| e.speaker_id.clone().unwrap())
            .collect();
        assert_eq!(speakers.len(), 2);

        let b = sample_synthetic(&m, 2, 3, 7).unwrap();
        for (x, y) in a.entries().iter().zip(b.entries()) {
            assert_eq!(x.vector, y.vector);
            assert_eq!(x.id, y.id);
        }
    }

    #[test]
    fn sampler_isotropic_covariance() {
        let d = 10;
        let m = GenerativePlda {
            mu: DVector::zeros(d),
            phi: DMatrix::zeros(d, 2),
            sigma: DMatrix::identity(d, d),
        };
        let set = sample_synthetic(&m, 500, 10, 99).unwrap();
        let mean = crate::preprocess::estimate_centering(&set).unwrap();
        let mut cov = DMatrix::zeros(d, d);
        for e in set.entries() {
            let y = &e.vector - &mean;
            cov += &y * y.transpose();
        }
        cov /= set.len() as f64;
        let rel = (cov - DMatrix::identity(d, d)).norm() / (d as f64).sqrt();
        assert!(rel < 0.1, "sample covariance deviation {rel}");
    }
}
