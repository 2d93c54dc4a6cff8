//! Point-detection scoring: radius matching, precision/recall/F1, sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::postprocess::{detect, Detection, PostprocessConfig, ThresholdMode};
use crate::targets::{Heatmap, Point};

pub const MATCH_RADIUS: f64 = 20.0;

/// Index bias that makes lower-index detections win exact distance ties.
const TIE_BIAS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// Maximum number of matches, then minimum total distance.
    Optimal,
    /// Pairs taken in ascending distance order.
    Greedy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruePositive {
    pub det: usize,
    pub gt: usize,
    pub dist: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: Vec<TruePositive>,
    /// Unmatched detection indices.
    pub fp: Vec<usize>,
    /// Unmatched ground-truth indices.
    pub missed: Vec<usize>,
}

impl MatchResult {
    pub fn total_distance(&self) -> f64 {
        self.tp.iter().map(|t| t.dist).sum()
    }
}

/// One-to-one matching of detections to ground truth within `radius`
/// (inclusive, Euclidean).
pub fn match_points(dets: &[Point], gts: &[Point], radius: f64, matcher: Matcher) -> MatchResult {
    assert!(radius > 0.0, "match radius must be positive");
    let mut pairs = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let dist = d.dist(g);
            if dist <= radius {
                pairs.push((i, j, dist));
            }
        }
    }
    let assigned = match matcher {
        Matcher::Greedy => greedy(&mut pairs, dets.len(), gts.len()),
        Matcher::Optimal => optimal(&pairs, dets.len(), gts.len(), radius),
    };
    let mut det_used = vec![false; dets.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut tp: Vec<TruePositive> = assigned
        .into_iter()
        .map(|(det, gt, dist)| {
            det_used[det] = true;
            gt_used[gt] = true;
            TruePositive { det, gt, dist }
        })
        .collect();
    tp.sort_by_key(|t| t.det);
    MatchResult {
        tp,
        fp: (0..dets.len()).filter(|&i| !det_used[i]).collect(),
        missed: (0..gts.len()).filter(|&j| !gt_used[j]).collect(),
    }
}

fn greedy(pairs: &mut [(usize, usize, f64)], nd: usize, ng: usize) -> Vec<(usize, usize, f64)> {
    pairs.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut det_used = vec![false; nd];
    let mut gt_used = vec![false; ng];
    let mut out = Vec::new();
    for &(i, j, d) in pairs.iter() {
        if !det_used[i] && !gt_used[j] {
            det_used[i] = true;
            gt_used[j] = true;
            out.push((i, j, d));
        }
    }
    out
}

/// Solves each connected cluster of the within-radius graph as a square
/// assignment problem where non-edges cost more than any feasible matching.
fn optimal(pairs: &[(usize, usize, f64)], nd: usize, ng: usize, radius: f64) -> Vec<(usize, usize, f64)> {
    // Union-find over detections [0, nd) and ground truth [nd, nd + ng).
    let mut parent: Vec<usize> = (0..nd + ng).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for &(i, j, _) in pairs {
        let (a, b) = (root(&mut parent, i), root(&mut parent, nd + j));
        parent[a.max(b)] = a.min(b);
    }
    let mut clusters: std::collections::BTreeMap<usize, (Vec<usize>, Vec<usize>)> = Default::default();
    for &(i, j, _) in pairs {
        let r = root(&mut parent, i);
        let e = clusters.entry(r).or_default();
        if !e.0.contains(&i) {
            e.0.push(i);
        }
        if !e.1.contains(&j) {
            e.1.push(j);
        }
    }
    let mut out = Vec::new();
    for (dets, gts) in clusters.values_mut() {
        dets.sort_unstable();
        gts.sort_unstable();
        let n = dets.len().max(gts.len());
        let big = radius * (n as f64 + 1.0) + 1.0;
        let mut cost = vec![big; n * n];
        let mut dist = vec![f64::NAN; n * n];
        for &(i, j, d) in pairs {
            if let (Ok(r), Ok(c)) = (dets.binary_search(&i), gts.binary_search(&j)) {
                cost[r * n + c] = d + TIE_BIAS * i as f64;
                dist[r * n + c] = d;
            }
        }
        for (r, c) in hungarian(&cost, n).into_iter().enumerate() {
            if r < dets.len() && c < gts.len() && !dist[r * n + c].is_nan() {
                out.push((dets[r], gts[c], dist[r * n + c]));
            }
        }
    }
    out
}

/// Minimum-cost perfect assignment on an `n x n` matrix (row -> column).
fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // Potentials formulation with 1-based sentinel column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for c in 1..=n {
                if used[c] {
                    continue;
                }
                let cur = cost[(r - 1) * n + (c - 1)] - u[r] - v[c];
                if cur < minv[c] {
                    minv[c] = cur;
                    way[c] = col0;
                }
                if minv[c] < delta {
                    delta = minv[c];
                    col1 = c;
                }
            }
            for c in 0..=n {
                if used[c] {
                    u[owner[c]] += delta;
                    v[c] -= delta;
                } else {
                    minv[c] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for c in 1..=n {
        assign[owner[c] - 1] = c - 1;
    }
    assign
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean distance of true positives, input pixels.
    pub mean_tp_dist_px: f64,
    pub frames: usize,
}

/// Accumulates matches over frames.
#[derive(Clone, Debug, Default)]
pub struct Tally {
    tp: usize,
    fp: usize,
    fn_: usize,
    dist_sum: f64,
    frames: usize,
}

impl Tally {
    pub fn add(&mut self, m: &MatchResult) {
        self.tp += m.tp.len();
        self.fp += m.fp.len();
        self.fn_ += m.missed.len();
        self.dist_sum += m.total_distance();
        self.frames += 1;
    }

    pub fn report(&self, threshold: Option<f64>) -> EvalReport {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        EvalReport {
            threshold,
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            precision,
            recall,
            f1: f1(precision, recall),
            mean_tp_dist_px: if self.tp == 0 { 0.0 } else { self.dist_sum / self.tp as f64 },
            frames: self.frames,
        }
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn score(m: &MatchResult) -> EvalReport {
    let mut t = Tally::default();
    t.add(m);
    t.report(None)
}

/// One frame's score map and ground truth.
#[derive(Clone, Debug)]
pub struct EvalFrame {
    pub scores: Heatmap,
    pub truth: Vec<Point>,
}

pub fn evaluate_detections(frames: &[(Vec<Detection>, Vec<Point>)], radius: f64, matcher: Matcher) -> EvalReport {
    let mut t = Tally::default();
    for (dets, gts) in frames {
        let pts: Vec<Point> = dets.iter().map(Detection::point).collect();
        t.add(&match_points(&pts, gts, radius, matcher));
    }
    t.report(None)
}

/// Runs postprocess, matching and scoring at every fixed threshold.
pub fn sweep(frames: &[EvalFrame], thresholds: &[f64], post: &PostprocessConfig, radius: f64) -> Result<Vec<EvalReport>> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(CoreError::Config("sweep thresholds must be sorted ascending".into()));
    }
    Ok(thresholds
        .iter()
        .map(|&th| {
            let cfg = PostprocessConfig { threshold: ThresholdMode::Fixed(th), ..*post };
            let mut t = Tally::default();
            for f in frames {
                let dets: Vec<Point> = detect(&f.scores, &cfg).iter().map(Detection::point).collect();
                t.add(&match_points(&dets, &f.truth, radius, Matcher::Optimal));
            }
            t.report(Some(th))
        })
        .collect())
}

pub fn write_curve_csv(rows: &[EvalReport], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("threshold,precision,recall,f1,mean_tp_dist_px\n");
    for r in rows {
        writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.4}",
            r.threshold.map(|t| format!("{t}")).unwrap_or_default(),
            r.precision,
            r.recall,
            r.f1,
            r.mean_tp_dist_px
        )
        .expect("string write");
    }
    fs::write(path, s)?;
    Ok(())
}

/// Free-response ROC: recall against false positives per frame.
pub fn write_roc_csv(rows: &[EvalReport], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("threshold,recall,fp_per_frame\n");
    for r in rows {
        let fppf = if r.frames == 0 { 0.0 } else { r.fp as f64 / r.frames as f64 };
        writeln!(s, "{},{:.6},{:.4}", r.threshold.map(|t| format!("{t}")).unwrap_or_default(), r.recall, fppf)
            .expect("string write");
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn write_report_json(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::make_heatmap;

    fn p(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    #[test]
    fn exact_hit() {
        let m = match_points(&[p(5.0, 5.0)], &[p(5.0, 5.0)], MATCH_RADIUS, Matcher::Optimal);
        assert_eq!(m.tp, vec![TruePositive { det: 0, gt: 0, dist: 0.0 }]);
        let r = score(&m);
        assert_eq!((r.precision, r.recall, r.f1, r.mean_tp_dist_px), (1.0, 1.0, 1.0, 0.0));
    }

    #[test]
    fn radius_is_inclusive() {
        let m = match_points(&[p(21.0, 0.0)], &[p(0.0, 0.0)], MATCH_RADIUS, Matcher::Optimal);
        assert_eq!((m.tp.len(), m.fp.len(), m.missed.len()), (0, 1, 1));
        let m = match_points(&[p(12.0, 16.0)], &[p(0.0, 0.0)], MATCH_RADIUS, Matcher::Optimal);
        assert_eq!(m.tp.len(), 1);
    }

    #[test]
    fn closest_detection_wins() {
        for matcher in [Matcher::Optimal, Matcher::Greedy] {
            let m = match_points(&[p(15.0, 0.0), p(5.0, 0.0)], &[p(0.0, 0.0)], MATCH_RADIUS, matcher);
            assert_eq!(m.tp, vec![TruePositive { det: 1, gt: 0, dist: 5.0 }]);
            assert_eq!(m.fp, vec![0]);
        }
    }

    #[test]
    fn equidistant_tie_goes_to_lower_index() {
        for matcher in [Matcher::Optimal, Matcher::Greedy] {
            let m = match_points(&[p(-5.0, 0.0), p(5.0, 0.0)], &[p(0.0, 0.0)], MATCH_RADIUS, matcher);
            assert_eq!(m.tp[0].det, 0);
        }
    }

    #[test]
    fn optimal_beats_greedy_on_chain() {
        // Greedy grabs the 10 px pair and strands the second ground truth.
        let gts = [p(0.0, 0.0), p(25.0, 0.0)];
        let dets = [p(10.0, 0.0), p(-15.0, 0.0)];
        assert_eq!(match_points(&dets, &gts, MATCH_RADIUS, Matcher::Greedy).tp.len(), 1);
        let m = match_points(&dets, &gts, MATCH_RADIUS, Matcher::Optimal);
        assert_eq!(m.tp.len(), 2);
        assert!((m.total_distance() - 30.0).abs() < 1e-12);
    }

    #[test]
    fn f1_examples() {
        assert!((f1(0.9, 0.8) - 0.8471).abs() < 1e-4);
        let mut t = Tally::default();
        t.tp = 90;
        t.fp = 10;
        t.fn_ = 20;
        let r = t.report(None);
        assert!((r.precision - 0.9).abs() < 1e-12);
        assert!((r.recall - 0.818).abs() < 1e-3);
        assert!((r.f1 - 0.857).abs() < 1e-3);
        assert_eq!(Tally::default().report(None).f1, 0.0);
    }

    #[test]
    fn sweep_endpoints_and_monotone_recall() {
        let truth = vec![p(40.0, 40.0), p(100.0, 60.0), p(160.0, 120.0)];
        let mut scores = make_heatmap(&truth, 200, 160, 1, 3.5).normalized(crate::targets::gaussian_peak(3.5));
        // Weaken one object so thresholds separate them.
        for v in scores.values.iter_mut().skip(60 / 2 * 100).take(100 * 10) {
            *v *= 0.5;
        }
        let frames = vec![EvalFrame { scores, truth }];
        let th: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let rows = sweep(&frames, &th, &PostprocessConfig::default(), MATCH_RADIUS).unwrap();
        assert_eq!(rows.len(), 10);
        assert_eq!(rows[9].recall, 0.0);
        assert!(rows[0].recall >= rows.iter().map(|r| r.recall).fold(0.0, f64::max));
        assert!(rows.windows(2).all(|w| w[1].recall <= w[0].recall));
        assert!(sweep(&frames, &[0.5, 0.2], &PostprocessConfig::default(), MATCH_RADIUS).is_err());
    }

    #[test]
    fn curve_csv_has_one_row_per_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<EvalReport> = (0..3).map(|i| EvalReport { threshold: Some(i as f64), ..Default::default() }).collect();
        let path = dir.path().join("c.csv");
        write_curve_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next(), Some("threshold,precision,recall,f1,mean_tp_dist_px"));
        assert_eq!(text.lines().count(), 4);
    }

    /// Exhaustive search: most matches, then least total distance.
    fn brute_force(dets: &[Point], gts: &[Point], radius: f64) -> (usize, f64) {
        fn go(i: usize, dets: &[Point], gts: &[Point], r: f64, used: &mut Vec<bool>, acc: (usize, f64), best: &mut (usize, f64)) {
            if i == dets.len() {
                if acc.0 > best.0 || (acc.0 == best.0 && acc.1 < best.1) {
                    *best = acc;
                }
                return;
            }
            go(i + 1, dets, gts, r, used, acc, best);
            for j in 0..gts.len() {
                let d = dets[i].dist(&gts[j]);
                if !used[j] && d <= r {
                    used[j] = true;
                    go(i + 1, dets, gts, r, used, (acc.0 + 1, acc.1 + d), best);
                    used[j] = false;
                }
            }
        }
        let mut best = (0, 0.0);
        go(0, dets, gts, radius, &mut vec![false; gts.len()], (0, 0.0), &mut best);
        best
    }

    fn points(max: usize) -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec((0.0f64..60.0, 0.0f64..60.0).prop_map(|(x, y)| Point::new(x, y)), 0..max)
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn optimal_matches_exhaustive_search(dets in points(7), gts in points(7)) {
            let m = match_points(&dets, &gts, MATCH_RADIUS, Matcher::Optimal);
            let (count, total) = brute_force(&dets, &gts, MATCH_RADIUS);
            prop_assert_eq!(m.tp.len(), count);
            prop_assert!((m.total_distance() - total).abs() < 1e-6);
            prop_assert_eq!(m.tp.len() + m.missed.len(), gts.len());
            prop_assert_eq!(m.tp.len() + m.fp.len(), dets.len());
            let g = match_points(&dets, &gts, MATCH_RADIUS, Matcher::Greedy);
            prop_assert!(g.tp.len() <= m.tp.len());
        }

        #[test]
        fn counts_ignore_order(dets in points(8), gts in points(8), rot in 0usize..8) {
            let m = match_points(&dets, &gts, MATCH_RADIUS, Matcher::Optimal);
            let mut d2 = dets.clone();
            let mut g2 = gts.clone();
            if !d2.is_empty() { let k = rot % d2.len(); d2.rotate_left(k); }
            g2.reverse();
            let m2 = match_points(&d2, &g2, MATCH_RADIUS, Matcher::Optimal);
            prop_assert_eq!((m.tp.len(), m.fp.len(), m.missed.len()), (m2.tp.len(), m2.fp.len(), m2.missed.len()));
            prop_assert!((m.total_distance() - m2.total_distance()).abs() < 1e-6);
        }
    }
}
