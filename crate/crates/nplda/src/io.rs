//! Embedding, trial and score file handling.
//!
//! All persisted artifacts are line-oriented TSV so fixtures stay
//! human-auditable:
//!
//! * embedding: `<id>\t<speaker|->\t<gender|->\t<source|->\t<v1> <v2> ... <vD>`
//! * trial:     `<enroll_id>\t<test_id>[\t<target|nontarget>]`
//! * score:     `<enroll_id>\t<test_id>\t<score>`
//!
//! `-` marks absent metadata. Parsing is order-preserving and
//! deterministic; every parse error names the offending line.

use crate::error::{Error, Result};
use nalgebra::DVector;
use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

impl Gender {
    fn parse(tok: &str) -> Option<Option<Gender>> {
        match tok {
            "-" => Some(None),
            "male" => Some(Some(Gender::Male)),
            "female" => Some(Some(Gender::Female)),
            "unknown" => Some(Some(Gender::Unknown)),
            _ => None,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gender::Male => write!(f, "male"),
            Gender::Female => write!(f, "female"),
            Gender::Unknown => write!(f, "unknown"),
        }
    }
}

/// A fixed-dimensional speaker embedding with optional metadata.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub id: String,
    pub vector: DVector<f64>,
    pub speaker_id: Option<String>,
    pub gender: Option<Gender>,
    pub source: Option<String>,
}

/// An ordered collection of embeddings sharing one dimension, with an
/// id -> position index.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    dim: usize,
    entries: Vec<Embedding>,
    index: HashMap<String, usize>,
}

impl EmbeddingSet {
    pub fn new(entries: Vec<Embedding>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Domain("no embeddings".into()));
        }
        let dim = entries[0].vector.len();
        if dim == 0 {
            return Err(Error::Dimension("embedding dimension must be >= 1".into()));
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (pos, e) in entries.iter().enumerate() {
            if e.vector.len() != dim {
                return Err(Error::Dimension(format!(
                    "embedding {:?} has dimension {} but the set has dimension {}",
                    e.id,
                    e.vector.len(),
                    dim
                )));
            }
            if index.insert(e.id.clone(), pos).is_some() {
                return Err(Error::Domain(format!("duplicate embedding id {:?}", e.id)));
            }
        }
        Ok(EmbeddingSet {
            dim,
            entries,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Embedding] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&Embedding> {
        self.index.get(id).map(|&p| &self.entries[p])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Map each trial to (enroll position, test position).
    pub fn resolve_trials(&self, trials: &[Trial]) -> Result<Vec<(usize, usize)>> {
        trials
            .iter()
            .map(|t| {
                let e = self
                    .position(&t.enroll_id)
                    .ok_or_else(|| Error::UnresolvedId(t.enroll_id.clone()))?;
                let u = self
                    .position(&t.test_id)
                    .ok_or_else(|| Error::UnresolvedId(t.test_id.clone()))?;
                Ok((e, u))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Target,
    Nontarget,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Target => write!(f, "target"),
            Label::Nontarget => write!(f, "nontarget"),
        }
    }
}

/// One (enrollment, test) pair, the scoring unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub label: Option<Label>,
}

impl Trial {
    pub fn new(enroll_id: impl Into<String>, test_id: impl Into<String>, label: Option<Label>) -> Self {
        Trial {
            enroll_id: enroll_id.into(),
            test_id: test_id.into(),
            label,
        }
    }
}

/// Extract 0/1 targets from labeled trials; errors on the first
/// unlabeled trial.
pub fn trial_targets(trials: &[Trial]) -> Result<Vec<bool>> {
    trials
        .iter()
        .map(|t| match t.label {
            Some(Label::Target) => Ok(true),
            Some(Label::Nontarget) => Ok(false),
            None => Err(Error::Domain(format!(
                "trial ({}, {}) has no label",
                t.enroll_id, t.test_id
            ))),
        })
        .collect()
}

/// Parallel trials and scores.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    trials: Vec<Trial>,
    scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(trials: Vec<Trial>, scores: Vec<f64>) -> Result<Self> {
        if trials.len() != scores.len() {
            return Err(Error::Dimension(format!(
                "{} trials but {} scores",
                trials.len(),
                scores.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Numerical(format!("non-finite score {s}")));
        }
        Ok(ScoreSet { trials, scores })
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Same trials with scores mapped elementwise.
    pub fn map_scores(&self, f: impl Fn(f64) -> f64) -> Result<ScoreSet> {
        ScoreSet::new(self.trials.clone(), self.scores.iter().map(|&s| f(s)).collect())
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file).lines())
}

fn meta_token(tok: &str) -> Option<String> {
    if tok == "-" {
        None
    } else {
        Some(tok.to_string())
    }
}

/// Load an embedding set from TSV; fails on malformed lines,
/// inconsistent dimensions and duplicate ids.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let mut entries = Vec::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in open_lines(path)?.enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 5 tab-separated fields, found {}", fields.len()),
            ));
        }
        let gender = Gender::parse(fields[2]).ok_or_else(|| {
            Error::parse(path, lineno, format!("unknown gender token {:?}", fields[2]))
        })?;
        let mut values = Vec::new();
        for tok in fields[4].split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| {
                Error::parse(path, lineno, format!("bad float {tok:?} in vector"))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(path, lineno, format!("non-finite value {tok:?}")));
            }
            values.push(v);
        }
        if values.is_empty() {
            return Err(Error::parse(path, lineno, "empty vector"));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("dimension mismatch: expected {d}, found {}", values.len()),
                ))
            }
            _ => {}
        }
        entries.push(Embedding {
            id: fields[0].to_string(),
            vector: DVector::from_vec(values),
            speaker_id: meta_token(fields[1]),
            gender,
            source: meta_token(fields[3]),
        });
    }
    EmbeddingSet::new(entries)
}

pub fn write_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in set.entries() {
        let values: Vec<String> = e.vector.iter().map(|v| format!("{v}")).collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            e.id,
            e.speaker_id.as_deref().unwrap_or("-"),
            e.gender.map(|g| g.to_string()).unwrap_or_else(|| "-".into()),
            e.source.as_deref().unwrap_or("-"),
            values.join(" ")
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load a trial list; the label column is optional per line.
pub fn load_trials(path: &Path) -> Result<Vec<Trial>> {
    let mut trials = Vec::new();
    for (lineno, line) in open_lines(path)?.enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let label = match fields.len() {
            2 => None,
            3 => match fields[2] {
                "target" => Some(Label::Target),
                "nontarget" => Some(Label::Nontarget),
                other => {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("unknown label token {other:?}"),
                    ))
                }
            },
            n => {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("expected 2 or 3 tab-separated fields, found {n}"),
                ))
            }
        };
        trials.push(Trial::new(fields[0], fields[1], label));
    }
    Ok(trials)
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in trials {
        match t.label {
            Some(l) => writeln!(w, "{}\t{}\t{}", t.enroll_id, t.test_id, l),
            None => writeln!(w, "{}\t{}", t.enroll_id, t.test_id),
        }
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write one `<enroll>\t<test>\t<score>` line per trial. Scores carry
/// nine decimal places so threshold sweeps survive a save/load cycle.
pub fn write_scores(path: &Path, s: &ScoreSet) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (t, score) in s.trials().iter().zip(s.scores()) {
        writeln!(w, "{}\t{}\t{score:.9}", t.enroll_id, t.test_id).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load a score file. Labels are not stored in score files; attach them
/// from a trial list with [`ScoreSet::with_labels_from`].
pub fn load_scores(path: &Path) -> Result<ScoreSet> {
    let mut trials = Vec::new();
    let mut scores = Vec::new();
    for (lineno, line) in open_lines(path)?.enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let score: f64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad score {:?}", fields[2])))?;
        trials.push(Trial::new(fields[0], fields[1], None));
        scores.push(score);
    }
    ScoreSet::new(trials, scores)
}

impl ScoreSet {
    /// Attach labels to a loaded score set from a trial list with the
    /// same (enroll, test) pairs in the same order.
    pub fn with_labels_from(&self, trials: &[Trial]) -> Result<ScoreSet> {
        if trials.len() != self.len() {
            return Err(Error::Dimension(format!(
                "score set has {} trials but label list has {}",
                self.len(),
                trials.len()
            )));
        }
        let mut labeled = Vec::with_capacity(self.len());
        for (mine, theirs) in self.trials.iter().zip(trials) {
            if mine.enroll_id != theirs.enroll_id || mine.test_id != theirs.test_id {
                return Err(Error::Domain(format!(
                    "trial mismatch: scores have ({}, {}) where trial list has ({}, {})",
                    mine.enroll_id, mine.test_id, theirs.enroll_id, theirs.test_id
                )));
            }
            labeled.push(theirs.clone());
        }
        ScoreSet::new(labeled, self.scores.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        // leak the tempdir so the path stays alive for the test body
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    #[test]
    fn parses_two_embeddings() {
        let p = tmpfile("emb.tsv");
        std::fs::write(&p, "a\tspk1\tmale\ttel\t1 2 3\nb\tspk2\tfemale\tvid\t4 5 6\n").unwrap();
        let set = load_embeddings(&p).unwrap();
        assert_eq!(set.dim(), 3);
        assert_eq!(set.len(), 2);
        assert_eq!(set.entries()[0].id, "a");
        assert_eq!(set.entries()[1].vector[2], 6.0);
        assert_eq!(set.entries()[0].gender, Some(Gender::Male));
    }

    #[test]
    fn empty_file_is_an_error() {
        let p = tmpfile("empty.tsv");
        std::fs::write(&p, "").unwrap();
        let err = load_embeddings(&p).unwrap_err();
        assert!(err.to_string().contains("no embeddings"), "{err}");
    }

    #[test]
    fn dimension_mismatch_names_line() {
        let p = tmpfile("emb.tsv");
        std::fs::write(&p, "a\t-\t-\t-\t1 2 3\nb\t-\t-\t-\t1 2 3 4\n").unwrap();
        let err = load_embeddings(&p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":2:"), "{msg}");
        assert!(msg.contains("dimension mismatch"), "{msg}");
    }

    #[test]
    fn duplicate_id_rejected() {
        let p = tmpfile("emb.tsv");
        std::fs::write(&p, "a\t-\t-\t-\t1 2\na\t-\t-\t-\t3 4\n").unwrap();
        assert!(load_embeddings(&p).is_err());
    }

    #[test]
    fn trial_lines_parse() {
        let p = tmpfile("trials.tsv");
        std::fs::write(&p, "e1\tt1\ttarget\ne1\tt2\n").unwrap();
        let trials = load_trials(&p).unwrap();
        assert_eq!(trials[0].label, Some(Label::Target));
        assert_eq!(trials[1].label, None);
    }

    #[test]
    fn bad_label_token_named() {
        let p = tmpfile("trials.tsv");
        std::fs::write(&p, "e1\tt1\tmaybe\n").unwrap();
        let err = load_trials(&p).unwrap_err();
        assert!(err.to_string().contains("maybe"), "{err}");
    }

    #[test]
    fn score_line_format() {
        let p = tmpfile("scores.tsv");
        let s = ScoreSet::new(vec![Trial::new("e1", "t1", None)], vec![0.5]).unwrap();
        write_scores(&p, &s).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "e1\tt1\t0.500000000\n");
    }

    #[test]
    fn empty_score_set_writes_empty_file() {
        let p = tmpfile("scores.tsv");
        let s = ScoreSet::new(vec![], vec![]).unwrap();
        write_scores(&p, &s).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "");
        assert_eq!(load_scores(&p).unwrap().len(), 0);
    }

    #[test]
    fn score_roundtrip_within_1e9() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let trials: Vec<Trial> = (0..100)
            .map(|i| Trial::new(format!("e{i}"), format!("t{i}"), None))
            .collect();
        let scores: Vec<f64> = (0..100).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let s = ScoreSet::new(trials, scores.clone()).unwrap();
        let p = tmpfile("scores.tsv");
        write_scores(&p, &s).unwrap();
        let back = load_scores(&p).unwrap();
        let max_err = scores
            .iter()
            .zip(back.scores())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-9, "round-trip error {max_err}");
    }

    #[test]
    fn embedding_roundtrip_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let entries: Vec<Embedding> = (0..20)
            .map(|i| Embedding {
                id: format!("e{i}"),
                vector: DVector::from_fn(6, |_, _| rng.gen_range(-3.0..3.0)),
                speaker_id: Some(format!("s{}", i % 4)),
                gender: Some(if i % 2 == 0 { Gender::Male } else { Gender::Female }),
                source: None,
            })
            .collect();
        let set = EmbeddingSet::new(entries).unwrap();
        let p = tmpfile("emb.tsv");
        write_embeddings(&p, &set).unwrap();
        let back = load_embeddings(&p).unwrap();
        for (a, b) in set.entries().iter().zip(back.entries()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.vector, b.vector);
            assert_eq!(a.source, b.source);
        }
    }
}
