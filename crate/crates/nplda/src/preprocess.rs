//! Embedding pre-processing: centering, Fisher LDA and unit-length
//! normalization. These are the steps the pairwise network later absorbs
//! as its own layers.

use crate::error::{Error, Result};
use crate::io::{Embedding, EmbeddingSet};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

/// Zero-vector guard for length normalization.
pub const NORM_EPS: f64 = 1e-12;

/// `y = weight * x + bias`
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl AffineTransform {
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.weight * x + &self.bias
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Arithmetic mean of the set's vectors.
pub fn estimate_centering(set: &EmbeddingSet) -> Result<DVector<f64>> {
    if set.is_empty() {
        return Err(Error::Domain("cannot estimate centering of an empty set".into()));
    }
    let mut mean = DVector::zeros(set.dim());
    for e in set.entries() {
        mean += &e.vector;
    }
    Ok(mean / set.len() as f64)
}

/// Group entry positions by speaker id; errors when any entry is
/// unlabeled.
fn group_by_speaker(set: &EmbeddingSet) -> Result<BTreeMap<&str, Vec<usize>>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (pos, e) in set.entries().iter().enumerate() {
        let spk = e
            .speaker_id
            .as_deref()
            .ok_or_else(|| Error::Domain(format!("embedding {:?} has no speaker label", e.id)))?;
        groups.entry(spk).or_default().push(pos);
    }
    Ok(groups)
}

/// Between- and within-class scatter matrices of a labeled set.
pub fn scatter_matrices(set: &EmbeddingSet) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let groups = group_by_speaker(set)?;
    let d = set.dim();
    let global = estimate_centering(set)?;
    let mut s_b = DMatrix::zeros(d, d);
    let mut s_w = DMatrix::zeros(d, d);
    for positions in groups.values() {
        let mut mean = DVector::zeros(d);
        for &p in positions {
            mean += &set.entries()[p].vector;
        }
        mean /= positions.len() as f64;
        let diff = &mean - &global;
        s_b += positions.len() as f64 * &diff * diff.transpose();
        for &p in positions {
            let r = &set.entries()[p].vector - &mean;
            s_w += &r * r.transpose();
        }
    }
    Ok((s_b, s_w))
}

/// Solve the generalized eigenproblem `S_b w = lambda S_w w` and keep the
/// `out_dim` leading eigenvectors as rows, each scaled so `w' S_w w = 1`.
/// The within scatter is ridge-regularized with `1e-6 * trace(S_w)/D * I`
/// before factorization.
pub fn lda_from_scatters(
    s_b: &DMatrix<f64>,
    s_w: &DMatrix<f64>,
    out_dim: usize,
) -> Result<DMatrix<f64>> {
    let d = s_w.nrows();
    if out_dim == 0 || out_dim > d {
        return Err(Error::Domain(format!(
            "lda output dimension {out_dim} out of range 1..={d}"
        )));
    }
    let ridge = 1e-6 * s_w.trace() / d as f64;
    let mut s_w_reg = s_w.clone();
    for i in 0..d {
        s_w_reg[(i, i)] += ridge;
    }
    let chol = s_w_reg
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("within-class scatter is singular".into()))?;
    let l_inv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("within-class scatter is singular".into()))?;
    let mut m = &l_inv * s_b * l_inv.transpose();
    m = (&m + m.transpose()) * 0.5;
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut rows = DMatrix::zeros(out_dim, d);
    for (r, &i) in order.iter().take(out_dim).enumerate() {
        let u = eig.eigenvectors.column(i);
        let w = l_inv.transpose() * u;
        rows.row_mut(r).copy_from(&w.transpose());
    }
    Ok(rows)
}

/// Fisher LDA on a speaker-labeled set. The bias centers the projected
/// output at zero.
pub fn estimate_lda(set: &EmbeddingSet, out_dim: usize) -> Result<AffineTransform> {
    let groups = group_by_speaker(set)?;
    let n_speakers = groups.len();
    if n_speakers < 2 {
        return Err(Error::Domain(format!(
            "lda needs at least 2 speakers, found {n_speakers}"
        )));
    }
    let max_dim = set.dim().min(n_speakers - 1);
    if out_dim == 0 || out_dim > max_dim {
        return Err(Error::Domain(format!(
            "lda output dimension {out_dim} exceeds min(D, n_speakers - 1) = {max_dim}"
        )));
    }
    let (s_b, s_w) = scatter_matrices(set)?;
    let weight = lda_from_scatters(&s_b, &s_w, out_dim)?;
    let global = estimate_centering(set)?;
    let bias = -(&weight * global);
    Ok(AffineTransform { weight, bias })
}

/// `v / ||v||`; errors on near-zero input.
pub fn length_normalize(v: &DVector<f64>) -> Result<DVector<f64>> {
    let n = v.norm();
    if n <= NORM_EPS {
        return Err(Error::Numerical(format!(
            "cannot length-normalize a vector with norm {n:.3e}"
        )));
    }
    Ok(v / n)
}

/// Jacobian of length normalization: `(I - v_hat v_hat') / ||v||`.
pub fn length_normalize_jacobian(v: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = v.norm();
    if n <= NORM_EPS {
        return Err(Error::Numerical(format!(
            "cannot differentiate length normalization at norm {n:.3e}"
        )));
    }
    let hat = v / n;
    let d = v.len();
    let mut j = DMatrix::identity(d, d);
    j -= &hat * hat.transpose();
    Ok(j / n)
}

/// The full pre-processing chain: `lengthnorm(lda.weight * (x - mean) + lda.bias)`.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    pub mean: DVector<f64>,
    pub lda: AffineTransform,
}

impl Preprocessor {
    /// Estimate centering on the raw set, then LDA on the centered set.
    pub fn estimate(set: &EmbeddingSet, lda_dim: usize) -> Result<Self> {
        let mean = estimate_centering(set)?;
        let centered: Vec<Embedding> = set
            .entries()
            .iter()
            .map(|e| Embedding {
                vector: &e.vector - &mean,
                ..e.clone()
            })
            .collect();
        let centered = EmbeddingSet::new(centered)?;
        let lda = estimate_lda(&centered, lda_dim)?;
        Ok(Preprocessor { mean, lda })
    }

    pub fn in_dim(&self) -> usize {
        self.lda.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.lda.out_dim()
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::Dimension(format!(
                "preprocessor expects dimension {}, input has {}",
                self.in_dim(),
                x.len()
            )));
        }
        length_normalize(&self.lda.apply(&(x - &self.mean)))
    }

    /// Process every entry, keeping ids and metadata.
    pub fn apply_set(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        if set.dim() != self.in_dim() {
            return Err(Error::Dimension(format!(
                "preprocessor expects dimension {}, set has {}",
                self.in_dim(),
                set.dim()
            )));
        }
        let entries = set
            .entries()
            .iter()
            .map(|e| {
                Ok(Embedding {
                    vector: self.apply(&e.vector)?,
                    ..e.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        EmbeddingSet::new(entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_distr::StandardNormal;

    fn set_from(vectors: Vec<(&str, &str, Vec<f64>)>) -> EmbeddingSet {
        let entries = vectors
            .into_iter()
            .map(|(id, spk, v)| Embedding {
                id: id.to_string(),
                vector: DVector::from_vec(v),
                speaker_id: Some(spk.to_string()),
                gender: None,
                source: None,
            })
            .collect();
        EmbeddingSet::new(entries).unwrap()
    }

    #[test]
    fn centering_is_the_mean() {
        let set = set_from(vec![("a", "s1", vec![1.0, 1.0]), ("b", "s2", vec![3.0, 3.0])]);
        let mean = estimate_centering(&set).unwrap();
        assert_eq!(mean, DVector::from_vec(vec![2.0, 2.0]));
    }

    #[test]
    fn centering_of_single_vector_is_that_vector() {
        let set = set_from(vec![("a", "s1", vec![0.5, -1.5, 2.0])]);
        assert_eq!(estimate_centering(&set).unwrap(), set.entries()[0].vector);
    }

    #[test]
    fn centering_monte_carlo() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let m = [0.7, -1.2, 0.3];
        let entries: Vec<Embedding> = (0..1000)
            .map(|i| Embedding {
                id: format!("e{i}"),
                vector: DVector::from_fn(3, |r, _| m[r] + rng.sample::<f64, _>(StandardNormal)),
                speaker_id: None,
                gender: None,
                source: None,
            })
            .collect();
        let set = EmbeddingSet::new(entries).unwrap();
        let mean = estimate_centering(&set).unwrap();
        for r in 0..3 {
            assert!((mean[r] - m[r]).abs() < 0.15, "coord {r}: {} vs {}", mean[r], m[r]);
        }
    }

    #[test]
    fn lda_finds_separating_axis() {
        // two speakers separated along axis 0 with symmetric
        // within-class offsets: the scatters are exactly diagonal, so
        // the leading generalized eigenvector is exactly axis 0
        let offsets = [
            vec![0.01, 0.0, 0.0],
            vec![-0.01, 0.0, 0.0],
            vec![0.0, 0.5, 0.0],
            vec![0.0, -0.5, 0.0],
            vec![0.0, 0.0, 0.5],
            vec![0.0, 0.0, -0.5],
        ];
        let mut entries = Vec::new();
        for (s, center) in [("s1", 5.0), ("s2", -5.0)] {
            for (k, off) in offsets.iter().enumerate() {
                entries.push(Embedding {
                    id: format!("{s}_{k}"),
                    vector: DVector::from_vec(vec![center + off[0], off[1], off[2]]),
                    speaker_id: Some(s.to_string()),
                    gender: None,
                    source: None,
                });
            }
        }
        let set = EmbeddingSet::new(entries).unwrap();
        let lda = estimate_lda(&set, 1).unwrap();
        let row = lda.weight.row(0).transpose();
        let cos = row[0].abs() / row.norm();
        assert!(cos.acos() < 1e-3, "angle to axis 0 too large: {}", cos.acos());
    }

    #[test]
    fn lda_degenerate_identity_scatters() {
        let d = 4;
        let eye = DMatrix::identity(d, d);
        let w = lda_from_scatters(&eye, &eye, d).unwrap();
        // rows are generalized eigenvectors normalized to w' S_w w = 1,
        // so W S_w W' should be close to the identity
        let g = &w * &eye * w.transpose();
        for i in 0..d {
            for j in 0..d {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(g[(i, j)], expect, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn lda_out_dim_equal_speaker_count_errors() {
        let set = set_from(vec![
            ("a", "s1", vec![1.0, 0.0]),
            ("b", "s1", vec![1.1, 0.0]),
            ("c", "s2", vec![-1.0, 0.1]),
            ("d", "s2", vec![-1.1, 0.0]),
        ]);
        assert!(estimate_lda(&set, 2).is_err());
        assert!(estimate_lda(&set, 1).is_ok());
    }

    #[test]
    fn lda_translation_invariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let make = |shift: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            let entries: Vec<Embedding> = (0..60)
                .map(|i| {
                    let spk = i % 3;
                    let mut v =
                        DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
                    v[spk] += 4.0;
                    Embedding {
                        id: format!("e{i}"),
                        vector: v.add_scalar(shift),
                        speaker_id: Some(format!("s{spk}")),
                        gender: None,
                        source: None,
                    }
                })
                .collect();
            EmbeddingSet::new(entries).unwrap()
        };
        let mut rng2 = rng.clone();
        let base = estimate_lda(&make(0.0, &mut rng), 2).unwrap();
        let shifted = estimate_lda(&make(10.0, &mut rng2), 2).unwrap();
        for r in 0..2 {
            let a = base.weight.row(r).transpose();
            let b = shifted.weight.row(r).transpose();
            let cos = a.dot(&b).abs() / (a.norm() * b.norm());
            assert!(cos > 1.0 - 1e-6, "row {r} changed under translation, cos={cos}");
        }
    }

    #[test]
    fn length_normalize_basics() {
        let v = DVector::from_vec(vec![3.0, 4.0]);
        let n = length_normalize(&v).unwrap();
        assert_abs_diff_eq!(n[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(n[1], 0.8, epsilon = 1e-15);

        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(length_normalize(&e1).unwrap(), e1);

        assert!(length_normalize(&DVector::from_vec(vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn length_normalize_idempotent() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let v = DVector::from_fn(5, |_, _| rng.gen_range(-4.0..4.0));
            if v.norm() <= NORM_EPS {
                continue;
            }
            let once = length_normalize(&v).unwrap();
            let twice = length_normalize(&once).unwrap();
            assert!((once.norm() - 1.0).abs() < 1e-12);
            assert!((&once - &twice).norm() < 1e-12);
        }
    }

    #[test]
    fn jacobian_analytic_case() {
        let v = DVector::from_vec(vec![1.0, 0.0]);
        let j = length_normalize_jacobian(&v).unwrap();
        assert_abs_diff_eq!(j[(0, 0)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(j[(0, 1)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(j[(1, 0)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(j[(1, 1)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn jacobian_annihilates_input_and_is_symmetric() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let v = DVector::from_fn(5, |_, _| rng.gen_range(-2.0..2.0));
            let j = length_normalize_jacobian(&v).unwrap();
            assert!((&j * &v).norm() < 1e-12);
            assert!((&j - j.transpose()).norm() < 1e-14);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let v = DVector::from_fn(5, |_, _| rng.gen_range(-2.0..2.0));
        let j = length_normalize_jacobian(&v).unwrap();
        let h = 1e-6;
        for k in 0..5 {
            let mut hi = v.clone();
            let mut lo = v.clone();
            hi[k] += h;
            lo[k] -= h;
            let fd = (length_normalize(&hi).unwrap() - length_normalize(&lo).unwrap()) / (2.0 * h);
            for r in 0..5 {
                assert!(
                    (fd[r] - j[(r, k)]).abs() < 1e-6,
                    "entry ({r},{k}): fd {} analytic {}",
                    fd[r],
                    j[(r, k)]
                );
            }
        }
    }
}
