//! The pairwise discriminative network: affine layer (LDA init),
//! unit-length normalization, a second affine layer (centering init) and
//! a symmetric quadratic scoring layer with learnable decision
//! thresholds. Forward scoring caches per-embedding activations so the
//! hand-derived backward pass is a single sweep.

use crate::error::{Error, Result};
use crate::io::{EmbeddingSet, ScoreSet, Trial};
use crate::plda::{derive_pq, GenerativePlda, ScoreMatrices};
use crate::preprocess::{AffineTransform, NORM_EPS};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Initial decision thresholds `[ln 99, ln 199]`.
pub fn default_thresholds() -> [f64; 2] {
    [99.0_f64.ln(), 199.0_f64.ln()]
}

/// All trainable parameters of the pairwise network.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralPldaParams {
    /// d x D first affine layer.
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// d x d second affine layer.
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    /// d x d symmetric quadratic terms.
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Decision thresholds (theta1, theta2), trained with the soft cost.
    pub theta: [f64; 2],
}

/// Gradients, field-for-field with [`NeuralPldaParams`].
#[derive(Debug, Clone)]
pub struct ParamGradients {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub theta: [f64; 2],
}

impl NeuralPldaParams {
    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn layer_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.layer_dim();
        let input = self.input_dim();
        let shapes = [
            ("W2", self.w2.nrows(), self.w2.ncols()),
            ("P", self.p.nrows(), self.p.ncols()),
            ("Q", self.q.nrows(), self.q.ncols()),
        ];
        for (name, r, c) in shapes {
            if r != d || c != d {
                return Err(Error::Dimension(format!(
                    "{name} is {r}x{c}, expected {d}x{d} (W1 is {d}x{input})"
                )));
            }
        }
        if self.b1.len() != d || self.b2.len() != d {
            return Err(Error::Dimension("bias length disagrees with layer width".into()));
        }
        let finite = self.w1.iter().chain(self.w2.iter()).chain(self.p.iter()).chain(self.q.iter()).all(|v| v.is_finite())
            && self.b1.iter().chain(self.b2.iter()).all(|v| v.is_finite())
            && self.theta.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numerical("parameters contain non-finite values".into()));
        }
        Ok(())
    }

    /// Force exact symmetry on the quadratic terms.
    pub fn resymmetrize(&mut self) {
        self.p = (&self.p + self.p.transpose()) * 0.5;
        self.q = (&self.q + self.q.transpose()) * 0.5;
    }

    /// Map a raw embedding through both affine layers and the
    /// length normalization between them.
    pub fn features(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let a = &self.w1 * x + &self.b1;
        let n = a.norm();
        if n <= NORM_EPS {
            return Err(Error::Numerical(
                "zero-norm intermediate at the length-normalization layer".into(),
            ));
        }
        Ok(&self.w2 * (a / n) + &self.b2)
    }
}

/// Build the network from the generative baseline: LDA and centering
/// become the affine layers, `derive_pq` fills the quadratic layer.
pub fn init_from_generative(
    mean: &DVector<f64>,
    lda: &AffineTransform,
    m: &GenerativePlda,
) -> Result<NeuralPldaParams> {
    if lda.in_dim() != mean.len() {
        return Err(Error::Dimension(format!(
            "lda expects input {}, mean has {}",
            lda.in_dim(),
            mean.len()
        )));
    }
    if m.dim() != lda.out_dim() {
        return Err(Error::Dimension(format!(
            "plda dimension {} disagrees with lda output {}",
            m.dim(),
            lda.out_dim()
        )));
    }
    let ScoreMatrices { p, q } = derive_pq(m)?;
    let d = lda.out_dim();
    Ok(NeuralPldaParams {
        w1: lda.weight.clone(),
        b1: -(&lda.weight * mean) + &lda.bias,
        w2: DMatrix::identity(d, d),
        b2: -m.mu.clone(),
        p,
        q,
        theta: default_thresholds(),
    })
}

fn random_orthonormal_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    // QR of a cols x rows Gaussian matrix gives orthonormal columns;
    // transpose to get orthonormal rows
    let g = DMatrix::from_fn(cols, rows, |_, _| StandardNormal.sample(rng));
    g.qr().q().transpose()
}

/// Random initialization: orthonormal-row affine layers, small random
/// symmetric quadratic terms, zero biases.
pub fn init_random(input_dim: usize, layer_dim: usize, seed: u64) -> Result<NeuralPldaParams> {
    if layer_dim == 0 || layer_dim > input_dim {
        return Err(Error::Domain(format!(
            "layer width {layer_dim} out of range 1..={input_dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w1 = random_orthonormal_rows(layer_dim, input_dim, &mut rng);
    let w2 = random_orthonormal_rows(layer_dim, layer_dim, &mut rng);
    let sym = |rng: &mut ChaCha8Rng| {
        let g = DMatrix::from_fn(layer_dim, layer_dim, |_, _| StandardNormal.sample(rng));
        (&g + g.transpose()) * 0.05 // (g + g')/2 scaled by 0.1
    };
    let p = sym(&mut rng);
    let q = sym(&mut rng);
    Ok(NeuralPldaParams {
        w1,
        b1: DVector::zeros(layer_dim),
        w2,
        b2: DVector::zeros(layer_dim),
        p,
        q,
        theta: default_thresholds(),
    })
}

/// Score one raw pair. Symmetric in its inputs by construction.
pub fn forward(p: &NeuralPldaParams, e_raw: &DVector<f64>, t_raw: &DVector<f64>) -> Result<f64> {
    if e_raw.len() != p.input_dim() || t_raw.len() != p.input_dim() {
        return Err(Error::Dimension(format!(
            "forward: inputs of length {} and {} against input dimension {}",
            e_raw.len(),
            t_raw.len(),
            p.input_dim()
        )));
    }
    let fe = p.features(e_raw)?;
    let ft = p.features(t_raw)?;
    let qe = fe.dot(&(&p.q * &fe));
    let qt = ft.dot(&(&p.q * &ft));
    let cross = 0.5 * (fe.dot(&(&p.p * &ft)) + ft.dot(&(&p.p * &fe)));
    Ok((qe + qt) + 2.0 * cross)
}

/// Cached activations for one scored batch. Activations are stored once
/// per distinct embedding referenced by the batch; trials index into
/// that pool.
pub struct ForwardCache {
    /// Distinct embedding positions, ascending.
    uniq: Vec<usize>,
    /// Raw input, pre-normalization activation norm, normalized vector
    /// and final feature per distinct embedding.
    x: Vec<DVector<f64>>,
    norm: Vec<f64>,
    v: Vec<DVector<f64>>,
    f: Vec<DVector<f64>>,
    /// Q f and P f per distinct embedding.
    qf: Vec<DVector<f64>>,
    pf: Vec<DVector<f64>>,
    /// (enroll, test) indices into the pool, one per trial.
    pairs: Vec<(usize, usize)>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Score a batch of trials, returning scores in trial order plus the
/// cached intermediates backward needs.
pub fn forward_batch_cached(
    p: &NeuralPldaParams,
    set: &EmbeddingSet,
    trials: &[Trial],
) -> Result<(Vec<f64>, ForwardCache)> {
    p.validate()?;
    if set.dim() != p.input_dim() {
        return Err(Error::Dimension(format!(
            "embedding dimension {} disagrees with network input {}",
            set.dim(),
            p.input_dim()
        )));
    }
    let resolved = set.resolve_trials(trials)?;
    forward_cached_from_pairs(p, set, &resolved)
}

/// Like [`forward_batch_cached`] but over already-resolved position
/// pairs, skipping id lookups inside the training loop.
pub(crate) fn forward_cached_from_pairs(
    p: &NeuralPldaParams,
    set: &EmbeddingSet,
    resolved: &[(usize, usize)],
) -> Result<(Vec<f64>, ForwardCache)> {
    let mut uniq: Vec<usize> = resolved.iter().flat_map(|&(e, t)| [e, t]).collect();
    uniq.sort_unstable();
    uniq.dedup();
    let pool_of = |pos: usize| uniq.binary_search(&pos).expect("position in uniq");

    let n_uniq = uniq.len();
    let mut x = Vec::with_capacity(n_uniq);
    let mut norm = Vec::with_capacity(n_uniq);
    let mut v = Vec::with_capacity(n_uniq);
    let mut f = Vec::with_capacity(n_uniq);
    let mut qf = Vec::with_capacity(n_uniq);
    let mut pf = Vec::with_capacity(n_uniq);
    for &pos in uniq.iter() {
        let xi = set.entries()[pos].vector.clone();
        let a = &p.w1 * &xi + &p.b1;
        let n = a.norm();
        if n <= NORM_EPS {
            return Err(Error::Numerical(format!(
                "zero-norm intermediate for embedding {:?}",
                set.entries()[pos].id
            )));
        }
        let vi = a / n;
        let fi = &p.w2 * &vi + &p.b2;
        qf.push(&p.q * &fi);
        pf.push(&p.p * &fi);
        x.push(xi);
        norm.push(n);
        v.push(vi);
        f.push(fi);
    }

    let mut scores = Vec::with_capacity(resolved.len());
    let mut pairs = Vec::with_capacity(resolved.len());
    for &(e, t) in resolved {
        let (ie, it) = (pool_of(e), pool_of(t));
        let qe = f[ie].dot(&qf[ie]);
        let qt = f[it].dot(&qf[it]);
        let cross = 0.5 * (f[ie].dot(&pf[it]) + f[it].dot(&pf[ie]));
        scores.push((qe + qt) + 2.0 * cross);
        pairs.push((ie, it));
    }
    let cache = ForwardCache {
        uniq,
        x,
        norm,
        v,
        f,
        qf,
        pf,
        pairs,
    };
    Ok((scores, cache))
}

/// Score trials into a [`ScoreSet`], order-preserving.
pub fn forward_batch(
    p: &NeuralPldaParams,
    trials: &[Trial],
    set: &EmbeddingSet,
) -> Result<ScoreSet> {
    let (scores, _) = forward_batch_cached(p, set, trials)?;
    ScoreSet::new(trials.to_vec(), scores)
}

/// Exact gradients of `sum_i dloss_dscore[i] * s_i` with respect to every
/// parameter, back through the quadratic layer, the second affine layer
/// and the length-normalization Jacobian `(I - v v')/||a||`. P and Q
/// gradients are symmetrized to match the symmetric parametrization; the
/// theta slots are left at zero for the loss to fill in.
pub fn backward(
    p: &NeuralPldaParams,
    cache: &ForwardCache,
    dloss_dscore: &[f64],
) -> Result<ParamGradients> {
    if dloss_dscore.len() != cache.pairs.len() {
        return Err(Error::Dimension(format!(
            "{} gradient entries for {} cached trials",
            dloss_dscore.len(),
            cache.pairs.len()
        )));
    }
    let d = p.layer_dim();
    let input = p.input_dim();
    let n_uniq = cache.uniq.len();

    let mut grad_p = DMatrix::zeros(d, d);
    let mut df: Vec<DVector<f64>> = vec![DVector::zeros(d); n_uniq];
    // per-embedding weight for the Q gradient: sum of g_i over the
    // trials the embedding participates in
    let mut q_weight = vec![0.0; n_uniq];

    for (&(ie, it), &g) in cache.pairs.iter().zip(dloss_dscore) {
        if g == 0.0 {
            continue;
        }
        q_weight[ie] += g;
        q_weight[it] += g;
        // ds/df_e = 2 Q f_e + 2 P f_t, ds/df_t symmetric
        df[ie] += (&cache.qf[ie] + &cache.pf[it]) * (2.0 * g);
        df[it] += (&cache.qf[it] + &cache.pf[ie]) * (2.0 * g);
        // ds/dP (symmetrized) = f_e f_t' + f_t f_e'
        grad_p += (&cache.f[ie] * cache.f[it].transpose()) * g;
    }
    grad_p = &grad_p + grad_p.transpose();

    let mut grad_q = DMatrix::zeros(d, d);
    let mut grad_w2 = DMatrix::zeros(d, d);
    let mut grad_b2 = DVector::zeros(d);
    let mut grad_w1 = DMatrix::zeros(d, input);
    let mut grad_b1 = DVector::zeros(d);
    for i in 0..n_uniq {
        if q_weight[i] != 0.0 {
            grad_q += (&cache.f[i] * cache.f[i].transpose()) * q_weight[i];
        }
        if df[i].iter().all(|&v| v == 0.0) {
            continue;
        }
        grad_w2 += &df[i] * cache.v[i].transpose();
        grad_b2 += &df[i];
        let dv = p.w2.transpose() * &df[i];
        let da = (&dv - &cache.v[i] * cache.v[i].dot(&dv)) / cache.norm[i];
        grad_w1 += &da * cache.x[i].transpose();
        grad_b1 += &da;
    }
    grad_q = (&grad_q + grad_q.transpose()) * 0.5;

    Ok(ParamGradients {
        w1: grad_w1,
        b1: grad_b1,
        w2: grad_w2,
        b2: grad_b2,
        p: grad_p,
        q: grad_q,
        theta: [0.0, 0.0],
    })
}

// Flat parameter packing used by the trainer: W1 row-major, b1, W2
// row-major, b2, P row-major, Q row-major, theta.
impl NeuralPldaParams {
    pub fn num_params(&self) -> usize {
        let d = self.layer_dim();
        let input = self.input_dim();
        d * input + d + d * d + d + 2 * d * d + 2
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        push_matrix(&mut out, &self.w1);
        out.extend(self.b1.iter());
        push_matrix(&mut out, &self.w2);
        out.extend(self.b2.iter());
        push_matrix(&mut out, &self.p);
        push_matrix(&mut out, &self.q);
        out.extend_from_slice(&self.theta);
        out
    }

    /// Write flat values back; re-symmetrizes P and Q.
    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        take_matrix(flat, &mut at, &mut self.w1);
        take_vector(flat, &mut at, &mut self.b1);
        take_matrix(flat, &mut at, &mut self.w2);
        take_vector(flat, &mut at, &mut self.b2);
        take_matrix(flat, &mut at, &mut self.p);
        take_matrix(flat, &mut at, &mut self.q);
        self.theta = [flat[at], flat[at + 1]];
        self.resymmetrize();
        Ok(())
    }
}

impl ParamGradients {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        push_matrix(&mut out, &self.w1);
        out.extend(self.b1.iter());
        push_matrix(&mut out, &self.w2);
        out.extend(self.b2.iter());
        push_matrix(&mut out, &self.p);
        push_matrix(&mut out, &self.q);
        out.extend_from_slice(&self.theta);
        out
    }
}

fn push_matrix(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
}

fn take_matrix(flat: &[f64], at: &mut usize, m: &mut DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            m[(r, c)] = flat[*at];
            *at += 1;
        }
    }
}

fn take_vector(flat: &[f64], at: &mut usize, v: &mut DVector<f64>) {
    for r in 0..v.len() {
        v[r] = flat[*at];
        *at += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::Embedding;
    use crate::plda::{sample_synthetic, score_pair};
    use crate::preprocess::Preprocessor;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_set(n: usize, dim: usize, seed: u64) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries: Vec<Embedding> = (0..n)
            .map(|i| Embedding {
                id: format!("e{i}"),
                vector: DVector::from_fn(dim, |_, _| rng.gen_range(-2.0..2.0)),
                speaker_id: Some(format!("s{}", i % 4)),
                gender: None,
                source: None,
            })
            .collect();
        EmbeddingSet::new(entries).unwrap()
    }

    fn pipeline_fixture() -> (EmbeddingSet, Preprocessor, GenerativePlda, NeuralPldaParams) {
        let truth = crate::plda::random_population(8, 3, 5).unwrap();
        let raw = sample_synthetic(&truth, 30, 4, 6).unwrap();
        let preproc = Preprocessor::estimate(&raw, 4).unwrap();
        let processed = preproc.apply_set(&raw).unwrap();
        let model = crate::plda::estimate_plda(&processed, 3).unwrap();
        let params = init_from_generative(&preproc.mean, &preproc.lda, &model).unwrap();
        (raw, preproc, model, params)
    }

    #[test]
    fn theta_initialized_to_log_betas() {
        let t = default_thresholds();
        assert_abs_diff_eq!(t[0], 4.5951, epsilon = 1e-4);
        assert_abs_diff_eq!(t[1], 5.2933, epsilon = 1e-4);
    }

    #[test]
    fn generative_init_matches_closed_form() {
        let (raw, preproc, model, params) = pipeline_fixture();
        let pq = derive_pq(&model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let i = rng.gen_range(0..raw.len());
            let j = rng.gen_range(0..raw.len());
            let e = &raw.entries()[i].vector;
            let t = &raw.entries()[j].vector;
            let net = forward(&params, e, t).unwrap();
            let pe = preproc.apply(e).unwrap() - &model.mu;
            let pt = preproc.apply(t).unwrap() - &model.mu;
            let closed = score_pair(&pq, &pe, &pt).unwrap();
            assert!((net - closed).abs() < 1e-10, "net {net} closed {closed}");
        }
    }

    #[test]
    fn zero_speaker_variability_scores_zero() {
        let d = 3;
        let lda = AffineTransform {
            weight: DMatrix::identity(d, d),
            bias: DVector::zeros(d),
        };
        let m = GenerativePlda {
            mu: DVector::zeros(d),
            phi: DMatrix::zeros(d, 1),
            sigma: DMatrix::identity(d, d),
        };
        let params = init_from_generative(&DVector::zeros(d), &lda, &m).unwrap();
        let e = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let t = DVector::from_vec(vec![0.5, -2.0, 0.25]);
        assert!(forward(&params, &e, &t).unwrap().abs() < 1e-14);
    }

    #[test]
    fn random_init_is_deterministic_and_symmetric() {
        let a = init_random(6, 3, 11).unwrap();
        let b = init_random(6, 3, 11).unwrap();
        assert_eq!(a, b);
        let c = init_random(6, 3, 12).unwrap();
        assert_ne!(a, c);
        assert_eq!((&a.p - a.p.transpose()).norm(), 0.0);
        assert_eq!((&a.q - a.q.transpose()).norm(), 0.0);
        // orthonormal rows
        let g = &a.w1 * a.w1.transpose();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(g[(i, j)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn forward_swap_symmetry_is_exact() {
        let params = init_random(5, 3, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let e = DVector::from_fn(5, |_, _| rng.gen_range(-2.0..2.0));
            let t = DVector::from_fn(5, |_, _| rng.gen_range(-2.0..2.0));
            let ab = forward(&params, &e, &t).unwrap();
            let ba = forward(&params, &t, &e).unwrap();
            assert_eq!(ab.to_bits(), ba.to_bits());
        }
    }

    #[test]
    fn batch_equals_per_trial_loop() {
        let set = random_set(40, 5, 31);
        let params = init_random(5, 3, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let trials: Vec<Trial> = (0..1000)
            .map(|_| {
                let i = rng.gen_range(0..set.len());
                let j = rng.gen_range(0..set.len());
                Trial::new(set.entries()[i].id.clone(), set.entries()[j].id.clone(), None)
            })
            .collect();
        let batch = forward_batch(&params, &trials, &set).unwrap();
        for (trial, &score) in trials.iter().zip(batch.scores()) {
            let e = &set.get(&trial.enroll_id).unwrap().vector;
            let t = &set.get(&trial.test_id).unwrap().vector;
            let single = forward(&params, e, t).unwrap();
            assert!((score - single).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_batch_gives_empty_scores() {
        let set = random_set(4, 5, 41);
        let params = init_random(5, 2, 42).unwrap();
        let s = forward_batch(&params, &[], &set).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn unresolved_id_is_an_error() {
        let set = random_set(4, 5, 51);
        let params = init_random(5, 2, 52).unwrap();
        let trials = vec![Trial::new("missing", "e0", None)];
        assert!(forward_batch(&params, &trials, &set).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let set = random_set(10, 5, 61);
        let params = init_random(5, 3, 62).unwrap();
        let trials: Vec<Trial> = (0..8)
            .map(|i| {
                Trial::new(
                    set.entries()[i % set.len()].id.clone(),
                    set.entries()[(i + 3) % set.len()].id.clone(),
                    None,
                )
            })
            .collect();
        let (_, cache) = forward_batch_cached(&params, &set, &trials).unwrap();
        let g = backward(&params, &cache, &vec![0.0; trials.len()]).unwrap();
        assert_eq!(g.w1.norm(), 0.0);
        assert_eq!(g.b1.norm(), 0.0);
        assert_eq!(g.w2.norm(), 0.0);
        assert_eq!(g.b2.norm(), 0.0);
        assert_eq!(g.p.norm(), 0.0);
        assert_eq!(g.q.norm(), 0.0);
    }

    #[test]
    fn doubling_upstream_gradient_doubles_gradients() {
        let set = random_set(12, 6, 71);
        let params = init_random(6, 3, 72).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let trials: Vec<Trial> = (0..16)
            .map(|_| {
                let i = rng.gen_range(0..set.len());
                let j = rng.gen_range(0..set.len());
                Trial::new(set.entries()[i].id.clone(), set.entries()[j].id.clone(), None)
            })
            .collect();
        let g1: Vec<f64> = (0..trials.len()).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        let g2: Vec<f64> = g1.iter().map(|v| 2.0 * v).collect();
        let (_, cache) = forward_batch_cached(&params, &set, &trials).unwrap();
        let a = backward(&params, &cache, &g1).unwrap().to_flat();
        let b = backward(&params, &cache, &g2).unwrap().to_flat();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(2.0 * x, *y, epsilon = 1e-12);
        }
    }

    // Central finite differences over every parameter entry. P and Q are
    // perturbed symmetrically, matching their symmetric parametrization.
    #[test]
    fn gradients_match_finite_differences() {
        let set = random_set(10, 6, 81);
        let params = init_random(6, 3, 82).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let trials: Vec<Trial> = (0..16)
            .map(|_| {
                let i = rng.gen_range(0..set.len());
                let j = rng.gen_range(0..set.len());
                Trial::new(set.entries()[i].id.clone(), set.entries()[j].id.clone(), None)
            })
            .collect();
        let weights: Vec<f64> = (0..trials.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss_of = |p: &NeuralPldaParams| -> f64 {
            let (scores, _) = forward_batch_cached(p, &set, &trials).unwrap();
            scores.iter().zip(&weights).map(|(s, w)| s * w).sum()
        };

        let (_, cache) = forward_batch_cached(&params, &set, &trials).unwrap();
        let analytic = backward(&params, &cache, &weights).unwrap();
        let h = 1e-5;

        let fd_matrix = |name: &str,
                         get: &dyn Fn(&NeuralPldaParams) -> &DMatrix<f64>,
                         grad: &DMatrix<f64>,
                         symmetric: bool| {
            let base = get(&params).clone();
            for r in 0..base.nrows() {
                for c in 0..base.ncols() {
                    if symmetric && c < r {
                        continue;
                    }
                    let mut hi = params.clone();
                    let mut lo = params.clone();
                    {
                        let m = match name {
                            "W1" => &mut hi.w1,
                            "W2" => &mut hi.w2,
                            "P" => &mut hi.p,
                            _ => &mut hi.q,
                        };
                        m[(r, c)] += h;
                        if symmetric && r != c {
                            m[(c, r)] += h;
                        }
                    }
                    {
                        let m = match name {
                            "W1" => &mut lo.w1,
                            "W2" => &mut lo.w2,
                            "P" => &mut lo.p,
                            _ => &mut lo.q,
                        };
                        m[(r, c)] -= h;
                        if symmetric && r != c {
                            m[(c, r)] -= h;
                        }
                    }
                    let fd = (loss_of(&hi) - loss_of(&lo)) / (2.0 * h);
                    // symmetric off-diagonal perturbation moves two
                    // entries, so the directional derivative is
                    // grad[(r,c)] + grad[(c,r)]
                    let expect = if symmetric && r != c {
                        grad[(r, c)] + grad[(c, r)]
                    } else {
                        grad[(r, c)]
                    };
                    let err = (fd - expect).abs();
                    let tol = 1e-4 * expect.abs().max(fd.abs()) + 1e-7;
                    assert!(err < tol, "{name}({r},{c}): fd {fd} analytic {expect}");
                }
            }
        };

        fd_matrix("W1", &|p| &p.w1, &analytic.w1, false);
        fd_matrix("W2", &|p| &p.w2, &analytic.w2, false);
        fd_matrix("P", &|p| &p.p, &analytic.p, true);
        fd_matrix("Q", &|p| &p.q, &analytic.q, true);

        for (bias, grad) in [(0usize, &analytic.b1), (1, &analytic.b2)] {
            for r in 0..3 {
                let mut hi = params.clone();
                let mut lo = params.clone();
                if bias == 0 {
                    hi.b1[r] += h;
                    lo.b1[r] -= h;
                } else {
                    hi.b2[r] += h;
                    lo.b2[r] -= h;
                }
                let fd = (loss_of(&hi) - loss_of(&lo)) / (2.0 * h);
                let err = (fd - grad[r]).abs();
                let tol = 1e-4 * grad[r].abs().max(fd.abs()) + 1e-7;
                assert!(err < tol, "b{}({r}): fd {fd} analytic {}", bias + 1, grad[r]);
            }
        }
    }

    #[test]
    fn flat_roundtrip_preserves_params() {
        let params = init_random(7, 4, 91).unwrap();
        let flat = params.to_flat();
        assert_eq!(flat.len(), params.num_params());
        let mut other = init_random(7, 4, 92).unwrap();
        other.set_from_flat(&flat).unwrap();
        assert_eq!(params, other);
    }
}
