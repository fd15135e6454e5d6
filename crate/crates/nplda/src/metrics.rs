//! Hard evaluation metrics — miss/false-alarm rates, normalized
//! detection costs, minimum primary cost, EER — and affine score
//! calibration. Tie conventions are fixed: a target scoring below the
//! threshold is a miss, a non-target scoring at or above it is an alarm.

use crate::error::{Error, Result};
use crate::io::{trial_targets, ScoreSet};
use crate::losses::sigmoid;

pub const BETA1: f64 = 99.0;
pub const BETA2: f64 = 199.0;

/// Scores split into parallel score/label arrays with class counts.
struct Labeled {
    scores: Vec<f64>,
    targets: Vec<bool>,
    n_t: usize,
    n_nt: usize,
}

fn labeled(s: &ScoreSet) -> Result<Labeled> {
    if s.is_empty() {
        return Err(Error::Domain("metrics over an empty score set".into()));
    }
    let targets = trial_targets(s.trials())?;
    let n_t = targets.iter().filter(|&&t| t).count();
    let n_nt = targets.len() - n_t;
    if n_t == 0 || n_nt == 0 {
        return Err(Error::Domain(format!(
            "metrics need both classes: {n_t} targets, {n_nt} non-targets"
        )));
    }
    Ok(Labeled {
        scores: s.scores().to_vec(),
        targets,
        n_t,
        n_nt,
    })
}

fn rates_at(l: &Labeled, theta: f64) -> (f64, f64) {
    let mut misses = 0usize;
    let mut alarms = 0usize;
    for (&s, &t) in l.scores.iter().zip(&l.targets) {
        if t {
            if s < theta {
                misses += 1;
            }
        } else if s >= theta {
            alarms += 1;
        }
    }
    (misses as f64 / l.n_t as f64, alarms as f64 / l.n_nt as f64)
}

/// Miss and false-alarm rates at a threshold.
pub fn hard_pmiss_pfa(s: &ScoreSet, theta: f64) -> Result<(f64, f64)> {
    Ok(rates_at(&labeled(s)?, theta))
}

/// `P_miss(theta) + beta * P_fa(theta)`.
pub fn c_norm(s: &ScoreSet, beta: f64, theta: f64) -> Result<f64> {
    let (pmiss, pfa) = hard_pmiss_pfa(s, theta)?;
    Ok(pmiss + beta * pfa)
}

/// Candidate thresholds: one below every score, midpoints between
/// adjacent distinct scores, one above every score. The cost is
/// piecewise constant between scores, so this sweep is exact.
fn candidate_thresholds(sorted: &[f64]) -> Vec<f64> {
    let mut cands = Vec::with_capacity(sorted.len() + 1);
    cands.push(sorted[0] - 1.0);
    for w in sorted.windows(2) {
        if w[1] > w[0] {
            cands.push(0.5 * (w[0] + w[1]));
        }
    }
    cands.push(sorted[sorted.len() - 1] + 1.0);
    cands
}

/// Operating points (theta, pmiss, pfa) over all candidate thresholds in
/// ascending order, computed from one sort and cumulative counts.
fn sweep(l: &Labeled) -> Vec<(f64, f64, f64)> {
    let mut order: Vec<usize> = (0..l.scores.len()).collect();
    order.sort_by(|&a, &b| l.scores[a].partial_cmp(&l.scores[b]).unwrap());
    let sorted: Vec<f64> = order.iter().map(|&i| l.scores[i]).collect();
    let cands = candidate_thresholds(&sorted);

    let mut points = Vec::with_capacity(cands.len());
    let mut below = 0usize; // scores strictly below the current candidate
    let mut misses = 0usize;
    for &theta in &cands {
        while below < sorted.len() && sorted[below] < theta {
            if l.targets[order[below]] {
                misses += 1;
            }
            below += 1;
        }
        let alarms = l.n_nt - (below - misses);
        points.push((
            theta,
            misses as f64 / l.n_t as f64,
            alarms as f64 / l.n_nt as f64,
        ));
    }
    points
}

fn min_cost_over_sweep(points: &[(f64, f64, f64)], beta: f64) -> (f64, f64) {
    let mut best = f64::INFINITY;
    let mut best_theta = points[0].0;
    for &(theta, pmiss, pfa) in points {
        let c = pmiss + beta * pfa;
        if c < best {
            best = c;
            best_theta = theta;
        }
    }
    (best, best_theta)
}

/// Minimum of `C_norm(beta, theta)` over all thresholds, with the
/// minimizing threshold (the lowest among ties).
pub fn min_c_norm(s: &ScoreSet, beta: f64) -> Result<(f64, f64)> {
    let l = labeled(s)?;
    Ok(min_cost_over_sweep(&sweep(&l), beta))
}

/// Minimum primary cost: the average of the per-beta minima of the
/// normalized cost over all thresholds. Returns the minimizing
/// thresholds as well (the lowest among ties).
pub fn min_c_primary(s: &ScoreSet) -> Result<(f64, f64, f64)> {
    let l = labeled(s)?;
    let points = sweep(&l);
    let (c1, t1) = min_cost_over_sweep(&points, BETA1);
    let (c2, t2) = min_cost_over_sweep(&points, BETA2);
    Ok((0.5 * (c1 + c2), t1, t2))
}

/// Primary cost at the fixed Bayes thresholds `log beta1`, `log beta2`;
/// meaningful when scores are calibrated log-likelihood ratios.
pub fn actual_c_primary(s: &ScoreSet) -> Result<f64> {
    let c1 = c_norm(s, BETA1, BETA1.ln())?;
    let c2 = c_norm(s, BETA2, BETA2.ln())?;
    Ok(0.5 * (c1 + c2))
}

/// Equal error rate, located on the sweep where the miss rate overtakes
/// the false-alarm rate, with linear interpolation between the adjacent
/// operating points.
pub fn eer(s: &ScoreSet) -> Result<f64> {
    let l = labeled(s)?;
    let points = sweep(&l);
    // pmiss - pfa is nondecreasing along the sweep from -1 to +1
    let mut prev = points[0];
    for &pt in &points {
        let g = pt.1 - pt.2;
        if g >= 0.0 {
            if g == 0.0 {
                return Ok(pt.1);
            }
            let g_prev = prev.1 - prev.2;
            let span = g - g_prev;
            if span <= 0.0 {
                return Ok(0.5 * (pt.1 + pt.2));
            }
            let t = -g_prev / span;
            return Ok(prev.1 + t * (pt.1 - prev.1));
        }
        prev = pt;
    }
    Ok(1.0) // unreachable: the final candidate always has pmiss = 1, pfa = 0
}

/// Fit `sigmoid(a s + b)` to the labels by Newton iterations with
/// backtracking, constrained to `a >= 0`. Returns `(a, b)`.
pub fn affine_calibrate(dev: &ScoreSet) -> Result<(f64, f64)> {
    let l = labeled(dev)?;
    let n = l.scores.len() as f64;
    let nll = |a: f64, b: f64| -> f64 {
        let mut sum = 0.0;
        for (&s, &t) in l.scores.iter().zip(&l.targets) {
            let z = a * s + b;
            // softplus forms of -log sigmoid / -log(1-sigmoid)
            sum += if t {
                (-z).max(0.0) + (-(-z).abs()).exp().ln_1p()
            } else {
                z.max(0.0) + (-z.abs()).exp().ln_1p()
            };
        }
        sum / n
    };

    let (mut a, mut b) = (1.0, 0.0);
    let mut loss = nll(a, b);
    for _ in 0..100 {
        let mut ga = 0.0;
        let mut gb = 0.0;
        let mut haa = 0.0;
        let mut hab = 0.0;
        let mut hbb = 0.0;
        for (&s, &t) in l.scores.iter().zip(&l.targets) {
            let p = sigmoid(a * s + b);
            let r = p - if t { 1.0 } else { 0.0 };
            let w = p * (1.0 - p);
            ga += r * s;
            gb += r;
            haa += w * s * s;
            hab += w * s;
            hbb += w;
        }
        ga /= n;
        gb /= n;
        haa /= n;
        hab /= n;
        hbb /= n;
        if ga.abs().max(gb.abs()) < 1e-10 {
            return Ok((a.max(0.0), b));
        }
        let det = haa * hbb - hab * hab;
        let (mut da, mut db) = if det.abs() > 1e-300 {
            ((-ga * hbb + gb * hab) / det, (-gb * haa + ga * hab) / det)
        } else {
            (-ga, -gb)
        };
        // backtracking line search, projecting onto a >= 0
        let mut improved = false;
        for _ in 0..60 {
            let na = (a + da).max(0.0);
            let nb = b + db;
            let nl = nll(na, nb);
            if nl <= loss {
                if (na - a).abs().max((nb - b).abs()) < 1e-14 {
                    return Ok((na, nb));
                }
                a = na;
                b = nb;
                loss = nl;
                improved = true;
                break;
            }
            da *= 0.5;
            db *= 0.5;
        }
        if !improved {
            return Ok((a, b));
        }
    }
    Err(Error::Numerical(
        "affine calibration did not converge within 100 iterations".into(),
    ))
}

/// Apply `s -> a s + b` to every score.
pub fn apply_affine(s: &ScoreSet, a: f64, b: f64) -> Result<ScoreSet> {
    s.map_scores(|x| a * x + b)
}
