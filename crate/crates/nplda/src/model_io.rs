//! Self-describing text model files.
//!
//! Line 1 is `NPLDA-MODEL v1 D=<D> d=<d>`, followed by named blocks:
//! `MATRIX <name> <rows> <cols>` and then `<rows>` lines of
//! whitespace-separated floats in row-major order. Vectors are stored as
//! `1 x n` blocks. Floats are written in shortest round-trip form, so a
//! save/load cycle reproduces every entry exactly.
//!
//! The block-name set determines the model kind:
//!
//! * `W1 b1 W2 b2 P Q theta` — pairwise network parameters
//! * `mu Phi Sigma` — bare generative model (processed space)
//! * `mean lda_w lda_b mu Phi Sigma` — preprocessing + generative model
//! * `mean lda_w lda_b center w` — preprocessing + quadratic-expansion weights
//! * `mean lda_w lda_b mu_t mu_nt Sigma_t Sigma_nt` — preprocessing +
//!   pairwise Gaussian

use crate::baselines::{expansion_len, DpldaModel, PairwiseGaussian};
use crate::error::{Error, Result};
use crate::neural::NeuralPldaParams;
use crate::pipeline::{DpldaPipeline, GbPipeline, GenerativePipeline};
use crate::plda::GenerativePlda;
use crate::preprocess::{AffineTransform, Preprocessor};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

const MAGIC: &str = "NPLDA-MODEL";
const VERSION: &str = "v1";

/// Any persistable model.
#[derive(Debug, Clone)]
pub enum Model {
    NeuralPlda(NeuralPldaParams),
    Generative(GenerativePlda),
    GenerativePipeline(GenerativePipeline),
    Dplda(DpldaPipeline),
    PairwiseGb(GbPipeline),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::NeuralPlda(_) => "neural-plda",
            Model::Generative(_) => "generative-plda",
            Model::GenerativePipeline(_) => "generative-pipeline",
            Model::Dplda(_) => "dplda",
            Model::PairwiseGb(_) => "pairwise-gb",
        }
    }

    fn header_dims(&self) -> (usize, usize) {
        match self {
            Model::NeuralPlda(p) => (p.input_dim(), p.layer_dim()),
            Model::Generative(m) => (m.dim(), m.rank()),
            Model::GenerativePipeline(p) => (p.preproc.in_dim(), p.preproc.out_dim()),
            Model::Dplda(p) => (p.preproc.in_dim(), p.preproc.out_dim()),
            Model::PairwiseGb(p) => (p.preproc.in_dim(), p.preproc.out_dim()),
        }
    }
}

fn row_matrix(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, v.len(), |_, c| v[c])
}

fn write_block(w: &mut impl Write, path: &Path, name: &str, m: &DMatrix<f64>) -> Result<()> {
    writeln!(w, "MATRIX {name} {} {}", m.nrows(), m.ncols()).map_err(|e| Error::io(path, e))?;
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{}", m[(r, c)])).collect();
        writeln!(w, "{}", row.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let (big_d, small_d) = model.header_dims();
    writeln!(w, "{MAGIC} {VERSION} D={big_d} d={small_d}").map_err(|e| Error::io(path, e))?;
    match model {
        Model::NeuralPlda(p) => {
            write_block(&mut w, path, "W1", &p.w1)?;
            write_block(&mut w, path, "b1", &row_matrix(&p.b1))?;
            write_block(&mut w, path, "W2", &p.w2)?;
            write_block(&mut w, path, "b2", &row_matrix(&p.b2))?;
            write_block(&mut w, path, "P", &p.p)?;
            write_block(&mut w, path, "Q", &p.q)?;
            let theta = DMatrix::from_fn(1, 2, |_, c| p.theta[c]);
            write_block(&mut w, path, "theta", &theta)?;
        }
        Model::Generative(m) => {
            write_block(&mut w, path, "mu", &row_matrix(&m.mu))?;
            write_block(&mut w, path, "Phi", &m.phi)?;
            write_block(&mut w, path, "Sigma", &m.sigma)?;
        }
        Model::GenerativePipeline(p) => {
            write_block(&mut w, path, "mean", &row_matrix(&p.preproc.mean))?;
            write_block(&mut w, path, "lda_w", &p.preproc.lda.weight)?;
            write_block(&mut w, path, "lda_b", &row_matrix(&p.preproc.lda.bias))?;
            write_block(&mut w, path, "mu", &row_matrix(&p.plda.mu))?;
            write_block(&mut w, path, "Phi", &p.plda.phi)?;
            write_block(&mut w, path, "Sigma", &p.plda.sigma)?;
        }
        Model::Dplda(p) => {
            write_block(&mut w, path, "mean", &row_matrix(&p.preproc.mean))?;
            write_block(&mut w, path, "lda_w", &p.preproc.lda.weight)?;
            write_block(&mut w, path, "lda_b", &row_matrix(&p.preproc.lda.bias))?;
            write_block(&mut w, path, "center", &row_matrix(&p.center))?;
            write_block(&mut w, path, "w", &row_matrix(&p.model.w))?;
        }
        Model::PairwiseGb(p) => {
            write_block(&mut w, path, "mean", &row_matrix(&p.preproc.mean))?;
            write_block(&mut w, path, "lda_w", &p.preproc.lda.weight)?;
            write_block(&mut w, path, "lda_b", &row_matrix(&p.preproc.lda.bias))?;
            write_block(&mut w, path, "mu_t", &row_matrix(&p.model.mu_t))?;
            write_block(&mut w, path, "mu_nt", &row_matrix(&p.model.mu_nt))?;
            write_block(&mut w, path, "Sigma_t", &p.model.sigma_t)?;
            write_block(&mut w, path, "Sigma_nt", &p.model.sigma_nt)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Blocks {
    map: BTreeMap<String, DMatrix<f64>>,
    big_d: usize,
    small_d: usize,
}

impl Blocks {
    fn names(&self) -> Vec<&str> {
        self.map.keys().map(|s| s.as_str()).collect()
    }

    fn get(&self, name: &str, rows: usize, cols: usize) -> Result<&DMatrix<f64>> {
        let m = self
            .map
            .get(name)
            .ok_or_else(|| Error::Dimension(format!("missing matrix block {name:?}")))?;
        if m.nrows() != rows || m.ncols() != cols {
            return Err(Error::Dimension(format!(
                "block {name} is {}x{}, expected {rows}x{cols}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(m)
    }

    fn vector(&self, name: &str, len: usize) -> Result<DVector<f64>> {
        let m = self.get(name, 1, len)?;
        Ok(DVector::from_fn(len, |r, _| m[(0, r)]))
    }
}

fn parse_blocks(path: &Path) -> Result<Blocks> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.is_empty() {
        return Err(Error::parse(path, 1, "empty model file"));
    }
    let header: Vec<&str> = lines[0].split_whitespace().collect();
    if header.len() != 4 || header[0] != MAGIC {
        return Err(Error::parse(path, 1, format!("bad header {:?}", lines[0])));
    }
    if header[1] != VERSION {
        return Err(Error::Version {
            found: header[1].to_string(),
            expected: VERSION.to_string(),
        });
    }
    let dim_field = |tok: &str, prefix: &str| -> Result<usize> {
        tok.strip_prefix(prefix)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(path, 1, format!("bad header field {tok:?}")))
    };
    let big_d = dim_field(header[2], "D=")?;
    let small_d = dim_field(header[3], "d=")?;

    let mut map = BTreeMap::new();
    let mut at = 1;
    while at < lines.len() {
        if lines[at].trim().is_empty() {
            at += 1;
            continue;
        }
        let head: Vec<&str> = lines[at].split_whitespace().collect();
        if head.len() != 4 || head[0] != "MATRIX" {
            return Err(Error::parse(
                path,
                at + 1,
                format!("expected `MATRIX <name> <rows> <cols>`, found {:?}", lines[at]),
            ));
        }
        let name = head[1].to_string();
        let rows: usize = head[2]
            .parse()
            .map_err(|_| Error::parse(path, at + 1, format!("bad row count {:?}", head[2])))?;
        let cols: usize = head[3]
            .parse()
            .map_err(|_| Error::parse(path, at + 1, format!("bad column count {:?}", head[3])))?;
        at += 1;
        let mut m = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            if at >= lines.len() {
                return Err(Error::parse(
                    path,
                    lines.len(),
                    format!("truncated file: block {name} ends after {r} of {rows} rows"),
                ));
            }
            let values: Vec<&str> = lines[at].split_whitespace().collect();
            if values.len() != cols {
                return Err(Error::parse(
                    path,
                    at + 1,
                    format!("block {name}: expected {cols} values, found {}", values.len()),
                ));
            }
            for (c, tok) in values.iter().enumerate() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::parse(path, at + 1, format!("bad float {tok:?}")))?;
                if !v.is_finite() {
                    return Err(Error::parse(path, at + 1, format!("non-finite value {tok:?}")));
                }
                m[(r, c)] = v;
            }
            at += 1;
        }
        if map.insert(name.clone(), m).is_some() {
            return Err(Error::parse(path, at, format!("duplicate block {name:?}")));
        }
    }
    Ok(Blocks { map, big_d, small_d })
}

fn preproc_from(blocks: &Blocks) -> Result<Preprocessor> {
    let (big_d, small_d) = (blocks.big_d, blocks.small_d);
    Ok(Preprocessor {
        mean: blocks.vector("mean", big_d)?,
        lda: AffineTransform {
            weight: blocks.get("lda_w", small_d, big_d)?.clone(),
            bias: blocks.vector("lda_b", small_d)?,
        },
    })
}

pub fn load_model(path: &Path) -> Result<Model> {
    let blocks = parse_blocks(path)?;
    let (big_d, small_d) = (blocks.big_d, blocks.small_d);
    let names = blocks.names();
    match names.as_slice() {
        ["P", "Q", "W1", "W2", "b1", "b2", "theta"] => {
            let theta = blocks.get("theta", 1, 2)?;
            let p = NeuralPldaParams {
                w1: blocks.get("W1", small_d, big_d)?.clone(),
                b1: blocks.vector("b1", small_d)?,
                w2: blocks.get("W2", small_d, small_d)?.clone(),
                b2: blocks.vector("b2", small_d)?,
                p: blocks.get("P", small_d, small_d)?.clone(),
                q: blocks.get("Q", small_d, small_d)?.clone(),
                theta: [theta[(0, 0)], theta[(0, 1)]],
            };
            p.validate()?;
            Ok(Model::NeuralPlda(p))
        }
        ["Phi", "Sigma", "mu"] => {
            let phi = blocks.map.get("Phi").expect("present");
            if phi.nrows() != big_d || phi.ncols() != small_d {
                return Err(Error::Dimension(format!(
                    "block Phi is {}x{}, expected {big_d}x{small_d}",
                    phi.nrows(),
                    phi.ncols()
                )));
            }
            let m = GenerativePlda {
                mu: blocks.vector("mu", big_d)?,
                phi: phi.clone(),
                sigma: blocks.get("Sigma", big_d, big_d)?.clone(),
            };
            m.validate()?;
            Ok(Model::Generative(m))
        }
        ["Phi", "Sigma", "lda_b", "lda_w", "mean", "mu"] => {
            let preproc = preproc_from(&blocks)?;
            let phi = blocks.map.get("Phi").expect("present");
            if phi.nrows() != small_d || phi.ncols() > small_d {
                return Err(Error::Dimension(format!(
                    "block Phi is {}x{}, expected {small_d} rows and at most {small_d} columns",
                    phi.nrows(),
                    phi.ncols()
                )));
            }
            let plda = GenerativePlda {
                mu: blocks.vector("mu", small_d)?,
                phi: phi.clone(),
                sigma: blocks.get("Sigma", small_d, small_d)?.clone(),
            };
            plda.validate()?;
            Ok(Model::GenerativePipeline(GenerativePipeline { preproc, plda }))
        }
        ["center", "lda_b", "lda_w", "mean", "w"] => {
            let preproc = preproc_from(&blocks)?;
            let center = blocks.vector("center", small_d)?;
            let w = blocks.vector("w", expansion_len(small_d))?;
            Ok(Model::Dplda(DpldaPipeline {
                preproc,
                center,
                model: DpldaModel { w },
            }))
        }
        ["Sigma_nt", "Sigma_t", "lda_b", "lda_w", "mean", "mu_nt", "mu_t"] => {
            let preproc = preproc_from(&blocks)?;
            let two_d = 2 * small_d;
            Ok(Model::PairwiseGb(GbPipeline {
                preproc,
                model: PairwiseGaussian {
                    mu_t: blocks.vector("mu_t", two_d)?,
                    mu_nt: blocks.vector("mu_nt", two_d)?,
                    sigma_t: blocks.get("Sigma_t", two_d, two_d)?.clone(),
                    sigma_nt: blocks.get("Sigma_nt", two_d, two_d)?.clone(),
                },
            }))
        }
        other => Err(Error::Dimension(format!(
            "unrecognized block set {other:?} in model file"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::init_random;
    use crate::plda::random_population;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    #[test]
    fn neural_roundtrip_is_exact() {
        let mut params = init_random(8, 4, 3).unwrap();
        // denormal-ish and negative values should survive too
        params.b1[0] = -1.2345678901234567e-300;
        params.theta = [99.0_f64.ln(), 199.0_f64.ln()];
        let p = tmp("m.model");
        save_model(&p, &Model::NeuralPlda(params.clone())).unwrap();
        match load_model(&p).unwrap() {
            Model::NeuralPlda(back) => {
                assert_eq!(params, back);
            }
            other => panic!("wrong kind {:?}", other.kind()),
        }
    }

    #[test]
    fn generative_roundtrip_is_exact() {
        let m = random_population(6, 3, 9).unwrap();
        let p = tmp("g.model");
        save_model(&p, &Model::Generative(m.clone())).unwrap();
        match load_model(&p).unwrap() {
            Model::Generative(back) => {
                assert_eq!(m.mu, back.mu);
                assert_eq!(m.phi, back.phi);
                assert_eq!(m.sigma, back.sigma);
            }
            other => panic!("wrong kind {:?}", other.kind()),
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let p = tmp("v.model");
        std::fs::write(&p, "NPLDA-MODEL v999 D=4 d=2\n").unwrap();
        match load_model(&p) {
            Err(Error::Version { found, .. }) => assert_eq!(found, "v999"),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_pq_blocks_are_rejected() {
        let params = init_random(6, 4, 5).unwrap();
        let p = tmp("bad.model");
        save_model(&p, &Model::NeuralPlda(params)).unwrap();
        // shrink Q to 3x3 in the text
        let text = std::fs::read_to_string(&p).unwrap();
        let mut out = String::new();
        let mut in_q = false;
        let mut q_rows = 0;
        for line in text.lines() {
            if line.starts_with("MATRIX Q") {
                in_q = true;
                q_rows = 0;
                out.push_str("MATRIX Q 3 3\n");
                continue;
            }
            if in_q {
                q_rows += 1;
                if q_rows <= 3 {
                    let vals: Vec<&str> = line.split_whitespace().take(3).collect();
                    out.push_str(&vals.join(" "));
                    out.push('\n');
                }
                if q_rows == 4 {
                    in_q = false;
                }
                continue;
            }
            out.push_str(line);
            out.push('\n');
        }
        std::fs::write(&p, out).unwrap();
        match load_model(&p) {
            Err(Error::Dimension(msg)) => assert!(msg.contains('Q'), "{msg}"),
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_reported() {
        let params = init_random(6, 3, 6).unwrap();
        let p = tmp("trunc.model");
        save_model(&p, &Model::NeuralPlda(params)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        // drop the final row of the last block
        std::fs::write(&p, lines[..lines.len() - 1].join("\n")).unwrap();
        let err = load_model(&p).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn random_matrices_roundtrip_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = GenerativePlda {
            mu: nalgebra::DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0) * 1e-7),
            phi: nalgebra::DMatrix::from_fn(5, 2, |_, _| rng.gen_range(-10.0..10.0)),
            sigma: {
                let g = nalgebra::DMatrix::<f64>::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
                &g * g.transpose() + nalgebra::DMatrix::identity(5, 5)
            },
        };
        let p = tmp("bits.model");
        save_model(&p, &Model::Generative(m.clone())).unwrap();
        if let Model::Generative(back) = load_model(&p).unwrap() {
            for (a, b) in m.sigma.iter().zip(back.sigma.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        } else {
            panic!("wrong kind");
        }
    }
}
