//! Detection metrics (EER, AUC, DET), diagonal band mass of affinity
//! matrices, evaluation reports and affinity heat-map export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::LabeledPair;
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};
use crate::tensor::Tensor;

/// One threshold of the sweep. A score is accepted when `score >= threshold`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub false_alarm: f64,
    pub miss: f64,
}

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("detection scores"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::param("labels must be 0 or 1"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::param("both positive and negative examples are required"));
    }
    Ok((pos, neg))
}

/// Sweep over every unique score plus `+∞`, in increasing threshold order:
/// starts at `(1, 0)` and ends at `(0, 1)`.
pub fn det_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<DetPoint>> {
    let (n_pos, n_neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut points = Vec::new();
    // Counts strictly below the current threshold.
    let (mut pos_below, mut neg_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let thr = scores[order[i]];
        points.push(DetPoint {
            threshold: thr,
            false_alarm: (n_neg - neg_below) as f64 / n_neg as f64,
            miss: pos_below as f64 / n_pos as f64,
        });
        while i < order.len() && scores[order[i]] == thr {
            if labels[order[i]] == 1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        false_alarm: 0.0,
        miss: 1.0,
    });
    Ok(points)
}

/// Rate at which false alarms equal misses, interpolated linearly between
/// the two sweep points that bracket the crossing.
pub fn compute_eer(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let det = det_curve(scores, labels)?;
    let gap = |p: &DetPoint| p.false_alarm - p.miss;
    let j = det
        .iter()
        .position(|p| gap(p) <= 0.0)
        .ok_or_else(|| Error::Contract("DET sweep never crosses".into()))?;
    let cur = det[j];
    if gap(&cur) == 0.0 || j == 0 {
        return Ok(cur.false_alarm);
    }
    let prev = det[j - 1];
    let t = gap(&prev) / (gap(&prev) - gap(&cur));
    Ok(prev.false_alarm + t * (cur.false_alarm - prev.false_alarm))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from exact integer counts.
pub fn compute_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_pos, n_neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the number of winning pairs plus the number of tied pairs.
    let mut doubled: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut pos_here, mut neg_here) = (0u128, 0u128);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            i += 1;
        }
        doubled += pos_here * (2 * neg_below + neg_here);
        neg_below += neg_here;
    }
    Ok(doubled as f64 / (2 * n_pos as u128 * n_neg as u128) as f64)
}

/// Half-width of the diagonal band, as a fraction of the audio length.
pub const BAND_HALF_WIDTH: f64 = 0.1;

/// Mean over text rows of the affinity mass within
/// `|j/T_a − i/T_t| ≤ 0.1` (1-based positions).
pub fn diagonal_band_mass(a: &Tensor) -> Result<f64> {
    let (t_t, t_a) = a.dims2()?;
    if t_t == 0 || t_a == 0 {
        return Err(Error::EmptyInput("affinity matrix"));
    }
    let mut total = 0.0;
    for i in 1..=t_t {
        let row = a.row(i - 1);
        total += (1..=t_a)
            .filter(|&j| (j as f64 / t_a as f64 - i as f64 / t_t as f64).abs() <= BAND_HALF_WIDTH + 1e-12)
            .map(|j| row[j - 1])
            .sum::<f64>();
    }
    Ok(total / t_t as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsetReport {
    pub n_pos: usize,
    pub n_neg: usize,
    /// Absent when the subset holds a single class.
    pub eer: Option<f64>,
    pub auc: Option<f64>,
}

impl SubsetReport {
    fn new(scores: &[f64], labels: &[u8]) -> Self {
        let n_pos = labels.iter().filter(|&&l| l == 1).count();
        SubsetReport {
            n_pos,
            n_neg: labels.len() - n_pos,
            eer: compute_eer(scores, labels).ok(),
            auc: compute_auc(scores, labels).ok(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub eer: f64,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// `(false alarm, miss)` in increasing threshold order.
    pub det: Vec<(f64, f64)>,
    /// Keyed by phrase word count.
    pub by_length: BTreeMap<usize, SubsetReport>,
    pub by_difficulty: BTreeMap<String, SubsetReport>,
    pub by_match_type: BTreeMap<String, MatchTypeSummary>,
    /// Mean diagonal band mass over positive pairs.
    pub positive_band_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchTypeSummary {
    pub count: usize,
    pub mean_score: f64,
}

/// Per-pair model outputs kept for reporting.
#[derive(Clone, Debug)]
pub struct Scored {
    pub score: f64,
    pub band_mass: f64,
    pub affinity: Tensor,
}

pub fn score_pairs(params: &ModelParams, pairs: &[LabeledPair], threads: usize) -> Result<Vec<Scored>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::param(format!("thread pool: {e}")))?;
    pool.install(|| {
        pairs
            .par_iter()
            .map(|p| {
                let out = forward(&p.features, &p.phonemes, params)?;
                Ok(Scored {
                    score: out.prob,
                    band_mass: diagonal_band_mass(&out.affinity)?,
                    affinity: out.affinity,
                })
            })
            .collect()
    })
}

pub fn build_report(pairs: &[LabeledPair], scored: &[Scored]) -> Result<EvalReport> {
    if pairs.len() != scored.len() {
        return Err(Error::shape("one score per pair required"));
    }
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let labels: Vec<u8> = pairs.iter().map(|p| p.label).collect();
    let det = det_curve(&scores, &labels)?;

    let subset = |keep: &dyn Fn(&LabeledPair) -> bool| {
        let (s, l): (Vec<f64>, Vec<u8>) = pairs
            .iter()
            .zip(&scores)
            .filter(|(p, _)| keep(p))
            .map(|(p, &s)| (s, p.label))
            .unzip();
        SubsetReport::new(&s, &l)
    };
    let lengths: std::collections::BTreeSet<usize> = pairs.iter().map(|p| p.n_words).collect();
    let by_length = lengths.into_iter().map(|n| (n, subset(&|p| p.n_words == n))).collect();
    let kinds: std::collections::BTreeSet<_> = pairs.iter().filter_map(|p| p.difficulty).collect();
    let by_difficulty = kinds
        .into_iter()
        .map(|k| (k.name().to_string(), subset(&|p| p.difficulty == Some(k))))
        .collect();

    let mut by_match_type: BTreeMap<String, MatchTypeSummary> = BTreeMap::new();
    for (p, s) in pairs.iter().zip(&scores) {
        let e = by_match_type
            .entry(p.match_type.name().to_string())
            .or_insert(MatchTypeSummary {
                count: 0,
                mean_score: 0.0,
            });
        e.count += 1;
        e.mean_score += s;
    }
    by_match_type.values_mut().for_each(|e| e.mean_score /= e.count as f64);

    let pos_mass: Vec<f64> = pairs
        .iter()
        .zip(scored)
        .filter(|(p, _)| p.label == 1)
        .map(|(_, s)| s.band_mass)
        .collect();
    Ok(EvalReport {
        eer: compute_eer(&scores, &labels)?,
        auc: compute_auc(&scores, &labels)?,
        n_pos: pos_mass.len(),
        n_neg: labels.len() - pos_mass.len(),
        det: det.iter().map(|p| (p.false_alarm, p.miss)).collect(),
        by_length,
        by_difficulty,
        by_match_type,
        positive_band_mass: pos_mass.iter().sum::<f64>() / pos_mass.len() as f64,
    })
}

pub fn evaluate(params: &ModelParams, pairs: &[LabeledPair], threads: usize) -> Result<EvalReport> {
    build_report(pairs, &score_pairs(params, pairs, threads)?)
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

pub fn det_csv(points: &[DetPoint]) -> String {
    let mut s = String::from("threshold,false_alarm,miss\n");
    for p in points {
        writeln!(s, "{},{},{}", p.threshold, p.false_alarm, p.miss).ok();
    }
    s
}

/// Paths written by [`export_affinity`].
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityFiles {
    pub csv: PathBuf,
    pub pgm: PathBuf,
}

/// Writes `<stem>.csv` (text rows, full precision) and `<stem>.pgm`, an 8-bit
/// greyscale image of the transpose with audio frames as rows, scaled
/// min → 0 and max → 255. A constant matrix maps to mid-grey 128.
pub fn export_affinity(a: &Tensor, stem: &Path) -> Result<AffinityFiles> {
    let (t_t, t_a) = a.dims2()?;
    if t_t == 0 || t_a == 0 {
        return Err(Error::EmptyInput("affinity matrix"));
    }
    let csv = stem.with_extension("csv");
    let pgm = stem.with_extension("pgm");

    let mut text = String::new();
    for i in 0..t_t {
        let row: Vec<String> = a.row(i).iter().map(|v| v.to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(&csv, text).map_err(|e| Error::io(&csv, e))?;
    fs::write(&pgm, pgm_bytes(a)?).map_err(|e| Error::io(&pgm, e))?;
    Ok(AffinityFiles { csv, pgm })
}

pub fn pgm_bytes(a: &Tensor) -> Result<Vec<u8>> {
    let (t_t, t_a) = a.dims2()?;
    let lo = a.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = a.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{t_t} {t_a}\n255\n").into_bytes();
    for j in 0..t_a {
        for i in 0..t_t {
            let px = if hi > lo {
                (255.0 * (a.at(i, j) - lo) / (hi - lo)).round() as u8
            } else {
                128
            };
            out.push(px);
        }
    }
    Ok(out)
}

/// Parses a CSV written by [`export_affinity`].
pub fn read_affinity_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = text
        .lines()
        .enumerate()
        .map(|(n, line)| {
            line.split(',')
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|e| Error::Parse {
                        path: path.to_path_buf(),
                        line: n + 1,
                        reason: e.to_string(),
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive sweep: every candidate threshold, then the crossing located
    /// by scanning all adjacent pairs.
    fn brute_det(scores: &[f64], labels: &[u8]) -> Vec<(f64, f64)> {
        let mut thr: Vec<f64> = scores.to_vec();
        thr.sort_by(f64::total_cmp);
        thr.dedup();
        thr.push(f64::INFINITY);
        let np = labels.iter().filter(|&&l| l == 1).count() as f64;
        let nn = labels.len() as f64 - np;
        thr.iter()
            .map(|&t| {
                let fa = scores.iter().zip(labels).filter(|(s, l)| **l == 0 && **s >= t).count() as f64 / nn;
                let miss = scores.iter().zip(labels).filter(|(s, l)| **l == 1 && **s < t).count() as f64 / np;
                (fa, miss)
            })
            .collect()
    }

    fn brute_eer(scores: &[f64], labels: &[u8]) -> f64 {
        let det = brute_det(scores, labels);
        for k in 0..det.len() {
            let (fa, miss) = det[k];
            if fa == miss {
                return fa;
            }
            if k > 0 {
                let (pf, pm) = det[k - 1];
                if pf > pm && fa < miss {
                    let t = (pf - pm) / ((pf - pm) - (fa - miss));
                    return pf + t * (fa - pf);
                }
            }
        }
        unreachable!()
    }

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (s, l) in scores.iter().zip(labels) {
            for (t, m) in scores.iter().zip(labels) {
                if *l == 1 && *m == 0 {
                    den += 1.0;
                    num += if s > t {
                        1.0
                    } else if s == t {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn eer_examples() {
        assert_eq!(compute_eer(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 0.0);
        assert_eq!(compute_eer(&[0.8, 0.4, 0.6, 0.2], &[1, 1, 0, 0]).unwrap(), 0.5);
        assert_eq!(compute_eer(&[0.3, 0.7], &[1, 0]).unwrap(), 1.0);
        assert!(compute_eer(&[0.3, 0.7], &[1, 1]).is_err());
        assert!(compute_eer(&[0.3], &[1, 0]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(compute_auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(compute_auc(&[0.8, 0.4, 0.6, 0.2], &[1, 1, 0, 0]).unwrap(), 0.75);
        assert_eq!(compute_auc(&[0.5; 4], &[1, 0, 1, 0]).unwrap(), 0.5);
        assert!(compute_auc(&[0.1, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn det_examples() {
        let det = det_curve(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap();
        assert_eq!(det.len(), 5);
        assert!(det.iter().any(|p| p.false_alarm == 0.0 && p.miss == 0.0));
        assert_eq!((det[0].false_alarm, det[0].miss), (1.0, 0.0));
        let last = det.last().unwrap();
        assert_eq!((last.false_alarm, last.miss), (0.0, 1.0));
        let det = det_curve(&[0.8, 0.4, 0.6, 0.2], &[1, 1, 0, 0]).unwrap();
        assert!(det.windows(2).any(|w| {
            let d0 = w[0].false_alarm - w[0].miss;
            let d1 = w[1].false_alarm - w[1].miss;
            d0 >= 0.0 && d1 <= 0.0
        }));
    }

    #[test]
    fn band_mass_cases() {
        let eye = Tensor::identity(4);
        assert!((diagonal_band_mass(&eye).unwrap() - 1.0).abs() < 1e-12);
        let anti = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(diagonal_band_mass(&anti).unwrap(), 0.0);
        let uniform = Tensor::full(&[2, 10], 0.1);
        // Row 1 centre 0.5 covers j = 4..6, row 2 centre 1.0 covers j = 9, 10.
        assert!((diagonal_band_mass(&uniform).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn affinity_export() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::from_rows(&[vec![0.1, 0.2, 0.7], vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]]).unwrap();
        let files = export_affinity(&a, &dir.path().join("aff")).unwrap();
        assert_eq!(read_affinity_csv(&files.csv).unwrap(), a);
        let pgm = fs::read(&files.pgm).unwrap();
        let header = b"P5\n2 3\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        let px = &pgm[header.len()..];
        assert_eq!(px.len(), 6);
        // Row j of the image is audio frame j: [a[0][j], a[1][j]].
        assert_eq!(px[0], 0);
        assert_eq!(px[4], 255);

        let flat = export_affinity(&Tensor::full(&[2, 2], 0.5), &dir.path().join("flat")).unwrap();
        let pgm = fs::read(flat.pgm).unwrap();
        assert!(pgm[pgm.len() - 4..].iter().all(|&p| p == 128));
        assert!(export_affinity(&Tensor::zeros(&[0, 3]), &dir.path().join("e")).is_err());
        assert!(matches!(
            export_affinity(&a, &dir.path().join("missing/dir/aff")),
            Err(Error::Io { .. })
        ));
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..=20).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..8).prop_map(|v| v as f64 / 8.0), n),
                prop::collection::vec(0u8..=1, n),
            )
                .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn metrics_match_brute_force((scores, labels) in instance()) {
            prop_assert_eq!(compute_auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
            prop_assert_eq!(compute_eer(&scores, &labels).unwrap(), brute_eer(&scores, &labels));
            let det: Vec<(f64, f64)> = det_curve(&scores, &labels).unwrap().iter().map(|p| (p.false_alarm, p.miss)).collect();
            prop_assert_eq!(det, brute_det(&scores, &labels));
        }

        #[test]
        fn det_is_monotone((scores, labels) in instance()) {
            let det = det_curve(&scores, &labels).unwrap();
            for w in det.windows(2) {
                prop_assert!(w[1].threshold > w[0].threshold);
                prop_assert!(w[1].false_alarm <= w[0].false_alarm);
                prop_assert!(w[1].miss >= w[0].miss);
            }
        }

        #[test]
        fn auc_monotone_invariant((scores, labels) in instance()) {
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(compute_auc(&scores, &labels).unwrap(), compute_auc(&warped, &labels).unwrap());
        }

        #[test]
        fn eer_flip_symmetry((scores, labels) in instance()) {
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
            let a = compute_eer(&scores, &labels).unwrap();
            let b = compute_eer(&neg, &flipped).unwrap();
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
    }
}
