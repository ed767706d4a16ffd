//! Verification scoring and evaluation: cosine scoring, adaptive s-norm,
//! EER and minDCF over threshold sweeps, and the trial/score/embedding text
//! formats.
//!
//! EER is computed on the convex hull of the ROC operating points (the
//! standard detection-theory reading): sweep thresholds over all distinct
//! scores, collect (FNR, FPR) points, take the optimal lower boundary and
//! intersect it with the FNR = FPR diagonal. This makes EER exactly
//! invariant under strictly increasing score transforms.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

#[derive(Clone, Debug, Default)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

#[derive(Clone, Debug, Default)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub normalized: Option<Vec<f64>>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Input("scores and labels length mismatch".into()));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite score {}", bad)));
        }
        Ok(ScoreSet { scores, labels, normalized: None })
    }

    /// Normalized scores when present, raw scores otherwise.
    pub fn effective(&self) -> &[f64] {
        self.normalized.as_deref().unwrap_or(&self.scores)
    }
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dim(format!("cosine dims {} vs {}", a.len(), b.len())));
    }
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Input("zero-norm embedding in cosine score".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

pub const SNORM_SIGMA_FLOOR: f64 = 1e-12;

fn topk_stats(scores: &mut Vec<f64>, k: usize) -> (f64, f64) {
    scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
    scores.truncate(k);
    let n = scores.len() as f64;
    let mu: f64 = scores.iter().sum::<f64>() / n;
    // population standard deviation
    let var: f64 = scores.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n;
    (mu, var.sqrt().max(SNORM_SIGMA_FLOOR))
}

/// Adaptive s-norm: per trial, normalize by the mean/std of the top-K
/// cohort scores on each side, then average the two normalizations.
pub fn adaptive_snorm(
    raw: &[f64],
    trials: &[Trial],
    embeddings: &BTreeMap<String, Vec<f64>>,
    cohort: &[Vec<f64>],
    top_k: usize,
) -> Result<Vec<f64>> {
    if cohort.is_empty() {
        return Err(Error::Input("empty s-norm cohort".into()));
    }
    if top_k == 0 || top_k > cohort.len() {
        return Err(Error::Config(format!(
            "top_k {} out of range for cohort size {}",
            top_k,
            cohort.len()
        )));
    }
    if raw.len() != trials.len() {
        return Err(Error::Input("raw score / trial count mismatch".into()));
    }
    // cache per-utterance cohort statistics
    let mut cache: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    let mut stats_for = |id: &str| -> Result<(f64, f64)> {
        if let Some(&s) = cache.get(id) {
            return Ok(s);
        }
        let e = embeddings
            .get(id)
            .ok_or_else(|| Error::Input(format!("unresolved utterance id '{}'", id)))?;
        let mut scores: Vec<f64> = cohort
            .iter()
            .map(|c| cosine_score(e, c))
            .collect::<Result<_>>()?;
        let s = topk_stats(&mut scores, top_k);
        cache.insert(id.to_string(), s);
        Ok(s)
    };
    let mut out = Vec::with_capacity(raw.len());
    for (s, trial) in raw.iter().zip(trials) {
        let (mu_e, sd_e) = stats_for(&trial.enroll)?;
        let (mu_t, sd_t) = stats_for(&trial.test)?;
        out.push(0.5 * ((s - mu_e) / sd_e + (s - mu_t) / sd_t));
    }
    Ok(out)
}

/// ROC operating points (FNR, FPR) swept over all distinct thresholds with
/// the accept-iff-score>=threshold convention, plus the reject-all corner.
fn roc_points(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    let n_tar = labels.iter().filter(|&&l| l).count() as f64;
    let n_non = labels.len() as f64 - n_tar;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let mut pts = Vec::with_capacity(thresholds.len() + 1);
    for &t in &thresholds {
        let mut miss = 0usize;
        let mut fa = 0usize;
        for (&s, &l) in scores.iter().zip(labels) {
            if l && s < t {
                miss += 1;
            }
            if !l && s >= t {
                fa += 1;
            }
        }
        pts.push((miss as f64 / n_tar, fa as f64 / n_non));
    }
    pts.push((1.0, 0.0));
    pts
}

fn check_two_classes(labels: &[bool]) -> Result<()> {
    let tar = labels.iter().filter(|&&l| l).count();
    if tar == 0 || tar == labels.len() {
        return Err(Error::Input(
            "EER/minDCF need at least one target and one nontarget trial".into(),
        ));
    }
    Ok(())
}

/// Lower-left convex hull of ROC points sorted by FNR.
fn roc_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for p in pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull
}

/// Equal error rate via the hull's intersection with FNR = FPR.
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    check_two_classes(&scores.labels)?;
    let s = scores.effective();
    let hull = roc_hull(roc_points(s, &scores.labels));
    for w in hull.windows(2) {
        let (x1, y1) = w[0];
        let (x2, y2) = w[1];
        let d1 = y1 - x1;
        let d2 = y2 - x2;
        if d1 >= 0.0 && d2 <= 0.0 {
            if d1 - d2 == 0.0 {
                // both endpoints sit on the diagonal
                return Ok(x1);
            }
            let t = d1 / (d1 - d2);
            return Ok(x1 + t * (x2 - x1));
        }
    }
    // hull endpoints are (0,1) and (1,0); a crossing always exists
    Err(Error::Numeric("no FAR/FRR crossing found".into()))
}

/// Normalized minimum detection cost over all swept thresholds (including
/// the accept-all and reject-all corners).
pub fn min_dcf(scores: &ScoreSet, p_target: f64, c_fa: f64, c_miss: f64) -> Result<f64> {
    check_two_classes(&scores.labels)?;
    let s = scores.effective();
    let pts = roc_points(s, &scores.labels);
    let denom = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    let mut best = f64::INFINITY;
    for (p_miss, p_fa) in pts {
        let cost = c_miss * p_miss * p_target + c_fa * p_fa * (1.0 - p_target);
        best = best.min(cost / denom);
    }
    Ok(best)
}

// ── text formats ─────────────────────────────────────────────────────

/// Trial list: one "label enroll test" line per trial, label 1 or 0.
pub fn read_trials(path: &Path) -> Result<TrialSet> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut trials = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!("trial line {}: expected 3 fields", i + 1)));
        }
        let target = match parts[0] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Format(format!(
                    "trial line {}: bad label '{}'",
                    i + 1,
                    other
                )))
            }
        };
        trials.push(Trial { target, enroll: parts[1].to_string(), test: parts[2].to_string() });
    }
    Ok(TrialSet { trials })
}

pub fn write_trials(path: &Path, set: &TrialSet) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in &set.trials {
        writeln!(f, "{} {} {}", if t.target { 1 } else { 0 }, t.enroll, t.test)?;
    }
    Ok(())
}

/// Scores: "enroll test score" with six decimals.
pub fn write_scores(path: &Path, trials: &[Trial], scores: &[f64]) -> Result<()> {
    if trials.len() != scores.len() {
        return Err(Error::Input("trial / score count mismatch".into()));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (t, s) in trials.iter().zip(scores) {
        writeln!(f, "{} {} {:.6}", t.enroll, t.test, s)?;
    }
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<(String, String, f64)>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!("score line {}: expected 3 fields", i + 1)));
        }
        let v: f64 = parts[2]
            .parse()
            .map_err(|_| Error::Format(format!("score line {}: bad value", i + 1)))?;
        out.push((parts[0].to_string(), parts[1].to_string(), v));
    }
    Ok(out)
}

/// Embeddings: "id dim v1 ... vD" per line.
pub fn write_embeddings(path: &Path, emb: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (id, v) in emb {
        write!(f, "{} {}", id, v.len())?;
        for x in v {
            write!(f, " {:.17e}", x)?;
        }
        writeln!(f)?;
    }
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = BTreeMap::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id = parts
            .next()
            .ok_or_else(|| Error::Format(format!("embedding line {}: empty", i + 1)))?
            .to_string();
        let dim: usize = parts
            .next()
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| Error::Format(format!("embedding line {}: bad dim", i + 1)))?;
        let v: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("embedding line {}: bad value", i + 1)))?;
        if v.len() != dim {
            return Err(Error::Format(format!(
                "embedding line {}: dim {} but {} values",
                i + 1,
                dim,
                v.len()
            )));
        }
        out.insert(id, v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(tar: &[f64], non: &[f64]) -> ScoreSet {
        let mut scores = tar.to_vec();
        scores.extend_from_slice(non);
        let mut labels = vec![true; tar.len()];
        labels.extend(vec![false; non.len()]);
        ScoreSet::new(scores, labels).unwrap()
    }

    // independent ROC points, accept iff score >= threshold
    fn oracle_points(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
        let n_tar = labels.iter().filter(|&&l| l).count() as f64;
        let n_non = labels.len() as f64 - n_tar;
        let mut ts: Vec<f64> = scores.to_vec();
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts.dedup();
        ts.push(f64::INFINITY);
        ts.iter()
            .map(|&t| {
                let miss = scores.iter().zip(labels).filter(|(s, &l)| l && **s < t).count();
                let fa = scores.iter().zip(labels).filter(|(s, &l)| !l && **s >= t).count();
                (miss as f64 / n_tar, fa as f64 / n_non)
            })
            .collect()
    }

    // the hull EER equals the maximum over operating priors of the minimum
    // Bayes error rate; the inner minimum is over plain ROC points, so this
    // never builds a hull and is an independent oracle
    fn oracle_eer(scores: &[f64], labels: &[bool]) -> f64 {
        let pts = oracle_points(scores, labels);
        let risk = |p: f64| {
            pts.iter().map(|&(fnr, fpr)| p * fnr + (1.0 - p) * fpr).fold(f64::INFINITY, f64::min)
        };
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if risk(m1) < risk(m2) {
                lo = m1;
            } else {
                hi = m2;
            }
        }
        risk(0.5 * (lo + hi))
    }

    fn oracle_min_dcf(scores: &[f64], labels: &[bool], pt: f64, cfa: f64, cmiss: f64) -> f64 {
        let denom = (cmiss * pt).min(cfa * (1.0 - pt));
        oracle_points(scores, labels)
            .iter()
            .map(|&(fnr, fpr)| (cmiss * pt * fnr + cfa * (1.0 - pt) * fpr) / denom)
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine_score(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() <= 1e-12);
        assert!(cosine_score(&[1.0, 0.0], &[0.0, 3.0]).unwrap().abs() <= 1e-12);
        assert!((cosine_score(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() + 1.0).abs() <= 1e-12);
        assert!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn snorm_hand_case() {
        // enroll cohort top-2 {0.5, 0.3} -> mu 0.4 sd 0.1 (population)
        // test cohort top-2 {0.6, 0.2} -> mu 0.4 sd 0.2
        // raw 0.8 -> 0.5 * (0.4/0.1 + 0.4/0.2) = 3.0
        let mut emb = BTreeMap::new();
        emb.insert("e".to_string(), vec![1.0, 0.0, 0.0]);
        emb.insert("t".to_string(), vec![0.0, 1.0, 0.0]);
        let unit = |a: f64, b: f64| vec![a, b, (1.0 - a * a - b * b).sqrt()];
        let cohort = vec![unit(0.5, 0.2), unit(0.3, 0.6), unit(0.1, 0.1)];
        let trials = vec![Trial { target: true, enroll: "e".into(), test: "t".into() }];
        let out = adaptive_snorm(&[0.8], &trials, &emb, &cohort, 2).unwrap();
        assert!((out[0] - 3.0).abs() <= 1e-9, "{}", out[0]);
    }

    #[test]
    fn snorm_full_cohort_matches_plain_snorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dim = 4;
        let rv = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let mut emb = BTreeMap::new();
        emb.insert("e".to_string(), rv(&mut rng));
        emb.insert("t".to_string(), rv(&mut rng));
        let cohort: Vec<Vec<f64>> = (0..6).map(|_| rv(&mut rng)).collect();
        let raw = cosine_score(&emb["e"], &emb["t"]).unwrap();
        let trials = vec![Trial { target: true, enroll: "e".into(), test: "t".into() }];
        let got = adaptive_snorm(&[raw], &trials, &emb, &cohort, cohort.len()).unwrap()[0];
        let stats = |v: &[f64]| {
            let cs: Vec<f64> = cohort.iter().map(|c| cosine_score(v, c).unwrap()).collect();
            let mu = cs.iter().sum::<f64>() / cs.len() as f64;
            let sd = (cs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / cs.len() as f64).sqrt();
            (mu, sd)
        };
        let (mu_e, sd_e) = stats(&emb["e"]);
        let (mu_t, sd_t) = stats(&emb["t"]);
        let want = 0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t);
        assert!((got - want).abs() <= 1e-12);
    }

    #[test]
    fn snorm_degenerate_cohort_stays_finite() {
        let mut emb = BTreeMap::new();
        emb.insert("e".to_string(), vec![1.0, 0.0]);
        emb.insert("t".to_string(), vec![1.0, 0.0]);
        let cohort = vec![vec![0.6, 0.8], vec![0.6, 0.8], vec![0.6, 0.8]];
        let trials = vec![Trial { target: true, enroll: "e".into(), test: "t".into() }];
        let out = adaptive_snorm(&[1.0], &trials, &emb, &cohort, 2).unwrap();
        assert!(out[0].is_finite());
    }

    #[test]
    fn snorm_rejects_bad_arguments() {
        let emb = BTreeMap::new();
        let trials = vec![Trial { target: true, enroll: "e".into(), test: "t".into() }];
        assert!(adaptive_snorm(&[0.0], &trials, &emb, &[], 1).is_err());
        let cohort = vec![vec![1.0, 0.0]];
        assert!(adaptive_snorm(&[0.0], &trials, &emb, &cohort, 0).is_err());
        assert!(adaptive_snorm(&[0.0], &trials, &emb, &cohort, 2).is_err());
        // unresolved utterance id
        assert!(adaptive_snorm(&[0.0], &trials, &emb, &cohort, 1).is_err());
    }

    #[test]
    fn eer_fixtures() {
        assert!(eer(&set(&[0.9, 0.8], &[0.2, 0.1])).unwrap().abs() <= 1e-12);
        let e = eer(&set(&[0.8, 0.6, 0.4, 0.2], &[0.9, 0.7, 0.5, 0.3])).unwrap();
        assert!((e - 0.5).abs() <= 1e-12, "{}", e);
        let e = eer(&set(&[0.9, 0.4], &[0.6, 0.1])).unwrap();
        assert!((e - 0.25).abs() <= 1e-12, "{}", e);
    }

    #[test]
    fn eer_needs_both_classes() {
        assert!(eer(&ScoreSet::new(vec![0.1, 0.2], vec![true, true]).unwrap()).is_err());
        assert!(eer(&ScoreSet::new(vec![], vec![]).unwrap()).is_err());
        assert!(ScoreSet::new(vec![f64::NAN], vec![true]).is_err());
    }

    #[test]
    fn min_dcf_fixtures() {
        let s = set(&[0.9, 0.8], &[0.2, 0.1]);
        assert!(min_dcf(&s, 0.01, 1.0, 1.0).unwrap().abs() <= 1e-12);
        // reject-all corner caps the normalized cost at 1
        let worst = set(&[0.1, 0.2], &[0.8, 0.9]);
        assert!(min_dcf(&worst, 0.01, 1.0, 1.0).unwrap() <= 1.0 + 1e-12);
        let s = set(&[0.9, 0.4], &[0.6, 0.1]);
        let got = min_dcf(&s, 0.5, 1.0, 1.0).unwrap();
        let want = oracle_min_dcf(&s.scores, &s.labels, 0.5, 1.0, 1.0);
        assert!((got - want).abs() <= 1e-12);
    }

    #[test]
    fn metrics_match_oracles_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let n_tar = rng.gen_range(1..20);
            let n_non = rng.gen_range(1..20);
            // quantized scores so threshold ties actually occur
            let q = if rng.gen_bool(0.5) { 10.0 } else { 1e6 };
            let draw = |rng: &mut ChaCha8Rng| (rng.gen_range(-1.0..1.0f64) * q).round() / q;
            let tar: Vec<f64> = (0..n_tar).map(|_| draw(&mut rng)).collect();
            let non: Vec<f64> = (0..n_non).map(|_| draw(&mut rng)).collect();
            let s = set(&tar, &non);
            let e = eer(&s).unwrap();
            let oe = oracle_eer(&s.scores, &s.labels);
            assert!((e - oe).abs() <= 1e-9, "eer {} vs oracle {}", e, oe);
            let pt = rng.gen_range(0.01..0.99);
            let cfa = rng.gen_range(0.5..2.0);
            let cmiss = rng.gen_range(0.5..2.0);
            let d = min_dcf(&s, pt, cfa, cmiss).unwrap();
            let od = oracle_min_dcf(&s.scores, &s.labels, pt, cfa, cmiss);
            assert!((d - od).abs() <= 1e-9, "dcf {} vs oracle {}", d, od);
        }
    }

    #[test]
    fn metrics_are_invariant_under_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let tar: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let non: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s = set(&tar, &non);
            let e0 = eer(&s).unwrap();
            let d0 = min_dcf(&s, 0.05, 1.0, 1.0).unwrap();
            for f in [|x: f64| x.exp(), |x: f64| 3.0 * x + 17.0] {
                let t: Vec<f64> = tar.iter().copied().map(f).collect();
                let n: Vec<f64> = non.iter().copied().map(f).collect();
                let s2 = set(&t, &n);
                assert_eq!(eer(&s2).unwrap(), e0);
                assert_eq!(min_dcf(&s2, 0.05, 1.0, 1.0).unwrap(), d0);
            }
        }
    }

    #[test]
    fn metrics_ignore_trial_order() {
        let s1 = set(&[0.9, 0.4, 0.3], &[0.6, 0.1]);
        let s2 = ScoreSet::new(vec![0.1, 0.3, 0.6, 0.4, 0.9], vec![false, true, false, true, true]).unwrap();
        assert_eq!(eer(&s1).unwrap(), eer(&s2).unwrap());
        assert_eq!(min_dcf(&s1, 0.1, 1.0, 1.0).unwrap(), min_dcf(&s2, 0.1, 1.0, 1.0).unwrap());
    }

    #[test]
    fn normalized_scores_take_precedence() {
        let mut s = set(&[0.1], &[0.9]);
        assert!((eer(&s).unwrap() - 1.0).abs() <= 1e-12 || eer(&s).unwrap() > 0.0);
        s.normalized = Some(vec![0.9, 0.1]);
        assert!(eer(&s).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn trial_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let dir = dir.path();
        let p = dir.join("trials.txt");
        std::fs::write(&p, "1 a b\n0 a c\n\n").unwrap();
        let ts = read_trials(&p).unwrap();
        assert_eq!(ts.trials.len(), 2);
        assert_eq!(ts.trials[0], Trial { target: true, enroll: "a".into(), test: "b".into() });
        assert!(!ts.trials[1].target);
        write_trials(&p, &ts).unwrap();
        assert_eq!(read_trials(&p).unwrap().trials, ts.trials);

        std::fs::write(&p, "1 a\n").unwrap();
        let err = format!("{}", read_trials(&p).unwrap_err());
        assert!(err.contains("line 1"), "{}", err);
        std::fs::write(&p, "1 a b\n2 a c\n").unwrap();
        let err = format!("{}", read_trials(&p).unwrap_err());
        assert!(err.contains("line 2"), "{}", err);
        std::fs::write(&p, "").unwrap();
        assert!(read_trials(&p).unwrap().trials.is_empty());
    }

    #[test]
    fn score_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let dir = dir.path();
        let p = dir.join("scores.txt");
        let trials = vec![
            Trial { target: true, enroll: "a".into(), test: "b".into() },
            Trial { target: false, enroll: "a".into(), test: "c".into() },
        ];
        let scores = vec![0.123456789, -0.5];
        write_scores(&p, &trials, &scores).unwrap();
        let back = read_scores(&p).unwrap();
        assert_eq!(back.len(), 2);
        for ((t, s), (e2, t2, s2)) in trials.iter().zip(&scores).zip(&back) {
            assert_eq!(&t.enroll, e2);
            assert_eq!(&t.test, t2);
            assert!((s - s2).abs() <= 1e-6);
        }
        assert!(write_scores(&p, &trials, &[0.0]).is_err());
    }

    #[test]
    fn embedding_file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let dir = dir.path();
        let p = dir.join("emb.txt");
        let mut emb = BTreeMap::new();
        emb.insert("u1".to_string(), vec![0.1, -2.0 / 3.0, 1e-300]);
        emb.insert("u2".to_string(), vec![std::f64::consts::PI]);
        write_embeddings(&p, &emb).unwrap();
        let back = read_embeddings(&p).unwrap();
        assert_eq!(back.len(), 2);
        for (id, v) in &emb {
            for (a, b) in v.iter().zip(&back[id]) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        std::fs::write(&p, "u1 3 0.5 0.5\n").unwrap();
        assert!(read_embeddings(&p).is_err());
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    fn score_set() -> impl Strategy<Value = ScoreSet> {
        (
            proptest::collection::vec(-1.0f64..1.0, 1..15),
            proptest::collection::vec(-1.0f64..1.0, 1..15),
        )
            .prop_map(|(tar, non)| {
                let mut scores = tar.clone();
                scores.extend_from_slice(&non);
                let mut labels = vec![true; tar.len()];
                labels.extend(vec![false; non.len()]);
                ScoreSet::new(scores, labels).unwrap()
            })
    }

    proptest! {
        #[test]
        fn eer_is_a_rate(s in score_set()) {
            let e = eer(&s).unwrap();
            prop_assert!((0.0..=0.5 + 1e-12).contains(&e));
        }

        #[test]
        fn min_dcf_is_normalized(s in score_set(), pt in 0.01f64..0.99) {
            let d = min_dcf(&s, pt, 1.0, 1.0).unwrap();
            prop_assert!(d >= 0.0 && d <= 1.0 + 1e-12);
        }

        #[test]
        fn metrics_survive_affine_rescaling(s in score_set(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let scores: Vec<f64> = s.scores.iter().map(|v| a * v + b).collect();
            let s2 = ScoreSet::new(scores, s.labels.clone()).unwrap();
            prop_assert_eq!(eer(&s2).unwrap(), eer(&s).unwrap());
            prop_assert_eq!(min_dcf(&s2, 0.05, 1.0, 1.0).unwrap(), min_dcf(&s, 0.05, 1.0, 1.0).unwrap());
        }
    }
}
