//! Scoring pipelines: a preprocessor paired with each back-end, scoring
//! raw-embedding trial lists end to end. Each distinct embedding is
//! preprocessed once per call.

use crate::baselines::{dplda_expand, dplda_score, gb_score, DpldaModel, PairwiseGaussian};
use crate::error::Result;
use crate::io::{EmbeddingSet, ScoreSet, Trial};
use crate::plda::{derive_pq, score_pair, GenerativePlda};
use crate::preprocess::Preprocessor;
use nalgebra::DVector;

/// Preprocess every embedding a trial list touches; returns processed
/// vectors aligned with set positions (untouched positions stay `None`).
pub(crate) fn processed_pool(
    preproc: &Preprocessor,
    set: &EmbeddingSet,
    resolved: &[(usize, usize)],
) -> Result<Vec<Option<DVector<f64>>>> {
    let mut pool: Vec<Option<DVector<f64>>> = vec![None; set.len()];
    for &(e, t) in resolved {
        for pos in [e, t] {
            if pool[pos].is_none() {
                pool[pos] = Some(preproc.apply(&set.entries()[pos].vector)?);
            }
        }
    }
    Ok(pool)
}

/// Centering + LDA + length norm followed by closed-form PLDA scoring.
#[derive(Debug, Clone)]
pub struct GenerativePipeline {
    pub preproc: Preprocessor,
    pub plda: GenerativePlda,
}

impl GenerativePipeline {
    pub fn score_trials(&self, trials: &[Trial], set: &EmbeddingSet) -> Result<ScoreSet> {
        let pq = derive_pq(&self.plda)?;
        let resolved = set.resolve_trials(trials)?;
        let mut pool = processed_pool(&self.preproc, set, &resolved)?;
        for slot in pool.iter_mut().flatten() {
            *slot -= &self.plda.mu;
        }
        let scores = resolved
            .iter()
            .map(|&(e, t)| {
                score_pair(
                    &pq,
                    pool[e].as_ref().expect("processed"),
                    pool[t].as_ref().expect("processed"),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        ScoreSet::new(trials.to_vec(), scores)
    }
}

/// Preprocessing followed by the quadratic-expansion linear scorer.
/// The expansion is taken of the centered processed vectors, so a
/// weight vector packed from P/Q reproduces the closed-form PLDA score.
#[derive(Debug, Clone)]
pub struct DpldaPipeline {
    pub preproc: Preprocessor,
    /// Subtracted after preprocessing; the PLDA mean of the processed
    /// space for generative-derived models.
    pub center: DVector<f64>,
    pub model: DpldaModel,
}

impl DpldaPipeline {
    pub(crate) fn centered_pool(
        &self,
        set: &EmbeddingSet,
        resolved: &[(usize, usize)],
    ) -> Result<Vec<Option<DVector<f64>>>> {
        let mut pool = processed_pool(&self.preproc, set, resolved)?;
        for slot in pool.iter_mut().flatten() {
            *slot -= &self.center;
        }
        Ok(pool)
    }

    pub fn score_trials(&self, trials: &[Trial], set: &EmbeddingSet) -> Result<ScoreSet> {
        let resolved = set.resolve_trials(trials)?;
        let pool = self.centered_pool(set, &resolved)?;
        let scores = resolved
            .iter()
            .map(|&(e, t)| {
                let phi = dplda_expand(
                    pool[e].as_ref().expect("processed"),
                    pool[t].as_ref().expect("processed"),
                )?;
                dplda_score(&self.model, &phi)
            })
            .collect::<Result<Vec<_>>>()?;
        ScoreSet::new(trials.to_vec(), scores)
    }
}

/// Preprocessing followed by the pairwise Gaussian LLR.
#[derive(Debug, Clone)]
pub struct GbPipeline {
    pub preproc: Preprocessor,
    pub model: PairwiseGaussian,
}

impl GbPipeline {
    pub fn score_trials(&self, trials: &[Trial], set: &EmbeddingSet) -> Result<ScoreSet> {
        let resolved = set.resolve_trials(trials)?;
        let pool = processed_pool(&self.preproc, set, &resolved)?;
        let scores = resolved
            .iter()
            .map(|&(e, t)| {
                gb_score(
                    &self.model,
                    pool[e].as_ref().expect("processed"),
                    pool[t].as_ref().expect("processed"),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        ScoreSet::new(trials.to_vec(), scores)
    }
}
