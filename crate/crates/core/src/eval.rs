//! Detection and counting evaluation.
//!
//! Detections are matched to ground-truth boxes one-to-one by greedy
//! descending IoU. Precision, recall and F1 are computed per frame and
//! averaged per dataset over the IoU thresholds 0.01, 0.02, ..., 0.99.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::count::MAX_COUNT;
use crate::imaging::{bbox_iou, BoundingBox};

const CLASSES: usize = MAX_COUNT + 1;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no frames to evaluate")]
    NoFrames,
    #[error("{pred} predictions for {truth} ground-truth counts")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("count {value} at index {index} outside 0..={max}", max = MAX_COUNT)]
    CountOutOfRange { index: usize, value: usize },
    #[error("IoU threshold {0} outside (0, 1)")]
    Threshold(f64),
}

/// The 99 thresholds 0.01..=0.99.
pub fn iou_grid() -> Vec<f64> {
    (1..=99).map(|i| f64::from(i) / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub detection: usize,
    pub ground_truth: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub matches: Vec<Match>,
}

/// All overlapping (det, gt) pairs, best IoU first; ties by index.
fn ranked_pairs(dets: &[BoundingBox], gts: &[BoundingBox]) -> Vec<Match> {
    let mut pairs = Vec::new();
    for (d, db) in dets.iter().enumerate() {
        for (g, gb) in gts.iter().enumerate() {
            let iou = bbox_iou(db, gb);
            if iou > 0.0 {
                pairs.push(Match {
                    detection: d,
                    ground_truth: g,
                    iou,
                });
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.iou
            .total_cmp(&a.iou)
            .then(a.detection.cmp(&b.detection))
            .then(a.ground_truth.cmp(&b.ground_truth))
    });
    pairs
}

fn greedy(pairs: &[Match], n_dets: usize, n_gts: usize, threshold: f64) -> MatchResult {
    let mut det_used = vec![false; n_dets];
    let mut gt_used = vec![false; n_gts];
    let mut matches = Vec::new();
    for p in pairs.iter().take_while(|p| p.iou >= threshold) {
        if !det_used[p.detection] && !gt_used[p.ground_truth] {
            det_used[p.detection] = true;
            gt_used[p.ground_truth] = true;
            matches.push(*p);
        }
    }
    MatchResult {
        tp: matches.len(),
        fp: n_dets - matches.len(),
        fn_: n_gts - matches.len(),
        matches,
    }
}

/// Greedy one-to-one matching: pairs are taken in order of decreasing IoU
/// while the IoU is at least `threshold` and neither box is matched yet.
pub fn match_detections(dets: &[BoundingBox], gts: &[BoundingBox], threshold: f64) -> Result<MatchResult, EvalError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(EvalError::Threshold(threshold));
    }
    Ok(greedy(&ranked_pairs(dets, gts), dets.len(), gts.len(), threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsPoint {
    pub iou_threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Precision, recall and F1 of one match result; 0/0 resolves to 0.
pub fn metrics_point(m: &MatchResult, iou_threshold: f64) -> MetricsPoint {
    let precision = ratio(m.tp, m.tp + m.fp);
    let recall = ratio(m.tp, m.tp + m.fn_);
    MetricsPoint {
        iou_threshold,
        precision,
        recall,
        f1: harmonic(precision, recall),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameBoxes {
    pub frame: String,
    pub detections: Vec<BoundingBox>,
    pub ground_truth: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsCurve {
    pub dataset: String,
    pub method: String,
    pub points: Vec<MetricsPoint>,
}

/// Per-frame metrics averaged over frames at every grid threshold. Frames
/// without ground truth enter the precision and F1 averages but not recall.
pub fn metrics_over_iou_grid(dataset: &str, method: &str, frames: &[FrameBoxes]) -> Result<MetricsCurve, EvalError> {
    if frames.is_empty() {
        return Err(EvalError::NoFrames);
    }
    let ranked: Vec<Vec<Match>> = frames
        .iter()
        .map(|f| ranked_pairs(&f.detections, &f.ground_truth))
        .collect();
    let with_gt = frames.iter().filter(|f| !f.ground_truth.is_empty()).count();
    let points = iou_grid()
        .into_iter()
        .map(|t| {
            let (mut p, mut r, mut f1) = (0.0, 0.0, 0.0);
            for (f, pairs) in frames.iter().zip(&ranked) {
                let m = metrics_point(&greedy(pairs, f.detections.len(), f.ground_truth.len(), t), t);
                p += m.precision;
                f1 += m.f1;
                if !f.ground_truth.is_empty() {
                    r += m.recall;
                }
            }
            let n = frames.len() as f64;
            MetricsPoint {
                iou_threshold: t,
                precision: p / n,
                recall: if with_gt == 0 { 0.0 } else { r / with_gt as f64 },
                f1: f1 / n,
            }
        })
        .collect();
    Ok(MetricsCurve {
        dataset: dataset.to_string(),
        method: method.to_string(),
        points,
    })
}

pub fn curve_csv(curve: &MetricsCurve) -> String {
    let mut s = String::from("iou,precision,recall,f1\n");
    for p in &curve.points {
        let _ = writeln!(s, "{:.2},{},{},{}", p.iou_threshold, p.precision, p.recall, p.f1);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountConfusion {
    /// `matrix[true][predicted]`.
    pub matrix: [[u64; CLASSES]; CLASSES],
}

impl CountConfusion {
    pub fn total(&self) -> u64 {
        self.matrix.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let trace: u64 = (0..CLASSES).map(|i| self.matrix[i][i]).sum();
        ratio(trace as usize, self.total() as usize)
    }

    /// Diagonal fraction of the true-zero row: how often a patch without
    /// fruit is rejected. `None` when no such patch exists.
    pub fn false_positive_rejection_rate(&self) -> Option<f64> {
        let row: u64 = self.matrix[0].iter().sum();
        (row > 0).then(|| self.matrix[0][0] as f64 / row as f64)
    }

    pub fn row_sums(&self) -> [u64; CLASSES] {
        self.matrix.map(|r| r.iter().sum())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for c in 0..CLASSES {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (t, row) in self.matrix.iter().enumerate() {
            let _ = write!(s, "{t}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn counting_confusion(pred: &[usize], truth: &[usize]) -> Result<CountConfusion, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let mut matrix = [[0u64; CLASSES]; CLASSES];
    for (index, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        for value in [p, t] {
            if value > MAX_COUNT {
                return Err(EvalError::CountOutOfRange { index, value });
            }
        }
        matrix[t][p] += 1;
    }
    Ok(CountConfusion { matrix })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Precision,
    Recall,
    F1,
}

impl Metric {
    fn of(self, p: &MetricsPoint) -> f64 {
        match self {
            Metric::Precision => p.precision,
            Metric::Recall => p.recall,
            Metric::F1 => p.f1,
        }
    }

    fn title(self) -> &'static str {
        match self {
            Metric::Precision => "Precision",
            Metric::Recall => "Recall",
            Metric::F1 => "F1-measure",
        }
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One panel per dataset (in first-seen order), each plotting `metric`
/// against the IoU threshold for every method.
pub fn render_metric_svg(curves: &[MetricsCurve], metric: Metric) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    for c in curves {
        if !datasets.contains(&c.dataset.as_str()) {
            datasets.push(&c.dataset);
        }
        if !methods.contains(&c.method.as_str()) {
            methods.push(&c.method);
        }
    }
    let cols = datasets.len().clamp(1, 4);
    let rows = datasets.len().div_ceil(cols).max(1);
    let (pw, ph, pad) = (240.0, 200.0, 40.0);
    let width = cols as f64 * (pw + pad) + pad;
    let height = rows as f64 * (ph + pad) + pad + 30.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        metric.title()
    );
    for (i, ds) in datasets.iter().enumerate() {
        let x0 = pad + (i % cols) as f64 * (pw + pad);
        let y0 = 30.0 + pad + (i / cols) as f64 * (ph + pad);
        let _ = writeln!(s, r##"<g class="panel">"##);
        let _ = writeln!(
            s,
            r##"<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + pw / 2.0,
            y0 - 6.0,
            escape(ds)
        );
        for tick in [0.0, 0.5, 1.0] {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{tick}</text>"#,
                x0 + tick * pw,
                y0 + ph + 14.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{tick}</text>"#,
                x0 - 4.0,
                y0 + ph - tick * ph + 4.0
            );
        }
        for c in curves.iter().filter(|c| c.dataset == *ds) {
            let color = PALETTE[methods.iter().position(|m| *m == c.method).unwrap_or(0) % PALETTE.len()];
            let pts: Vec<String> = c
                .points
                .iter()
                .map(|p| format!("{:.1},{:.1}", x0 + p.iou_threshold * pw, y0 + ph - metric.of(p) * ph))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                pts.join(" ")
            );
        }
        let _ = writeln!(s, "</g>");
    }
    for (i, m) in methods.iter().enumerate() {
        let y = height - 10.0;
        let x = pad + i as f64 * 120.0;
        let _ = writeln!(
            s,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            x + 20.0,
            PALETTE[i % PALETTE.len()],
            x + 24.0,
            y + 4.0,
            escape(m)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x: u32, y: u32, w: u32, h: u32) -> BoundingBox {
        BoundingBox::new(x, y, w, h)
    }

    #[test]
    fn identical_and_disjoint_sets() {
        let gts = vec![b(0, 0, 10, 10), b(20, 0, 10, 10), b(40, 5, 8, 8)];
        for t in [0.01, 0.5, 0.99] {
            let m = match_detections(&gts, &gts, t).unwrap();
            assert_eq!((m.tp, m.fp, m.fn_), (3, 0, 0));
        }
        let dets = vec![b(100, 100, 5, 5), b(200, 0, 5, 5)];
        let m = match_detections(&dets, &gts, 0.1).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (0, 2, 3));
        assert!(match_detections(&dets, &gts, 1.0).is_err());
        assert!(match_detections(&dets, &gts, 0.0).is_err());
    }

    #[test]
    fn greedy_takes_best_pair_first() {
        // Det 0 overlaps both gts; gt 1 is its better match.
        let dets = vec![b(5, 0, 10, 10), b(0, 0, 10, 10)];
        let gts = vec![b(0, 0, 10, 10), b(6, 0, 10, 10)];
        let m = match_detections(&dets, &gts, 0.3).unwrap();
        assert_eq!(m.tp, 2);
        assert!(m.matches.iter().any(|x| x.detection == 1 && x.ground_truth == 0 && x.iou == 1.0));
    }

    #[test]
    fn point_examples() {
        let m = |tp, fp, fn_| MatchResult { tp, fp, fn_, matches: vec![] };
        let p = metrics_point(&m(10, 0, 0), 0.5);
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = metrics_point(&m(1, 1, 1), 0.5);
        assert_eq!((p.precision, p.recall, p.f1), (0.5, 0.5, 0.5));
        let p = metrics_point(&m(0, 0, 0), 0.5);
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
    }

    /// Maximum one-to-one matching size at `t`, by exhaustive search.
    fn optimal_tp(dets: &[BoundingBox], gts: &[BoundingBox], t: f64) -> usize {
        fn go(d: usize, dets: &[BoundingBox], gts: &[BoundingBox], used: &mut Vec<bool>, t: f64) -> usize {
            if d == dets.len() {
                return 0;
            }
            let mut best = go(d + 1, dets, gts, used, t);
            for g in 0..gts.len() {
                if !used[g] && bbox_iou(&dets[d], &gts[g]) >= t {
                    used[g] = true;
                    best = best.max(1 + go(d + 1, dets, gts, used, t));
                    used[g] = false;
                }
            }
            best
        }
        go(0, dets, gts, &mut vec![false; gts.len()], t)
    }

    fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BoundingBox> {
        (0..n)
            .map(|_| b(rng.random_range(0..30), rng.random_range(0..30), rng.random_range(4..14), rng.random_range(4..14)))
            .collect()
    }

    #[test]
    fn greedy_against_optimal_assignment() {
        let mut equal = 0;
        for seed in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dets = random_boxes(&mut rng, 5);
            let gts = random_boxes(&mut rng, 5);
            let t = rng.random_range(0.05..0.7);
            let greedy = match_detections(&dets, &gts, t).unwrap().tp;
            let opt = optimal_tp(&dets, &gts, t);
            assert!(greedy <= opt);
            equal += usize::from(greedy == opt);
        }
        assert!(equal >= 950, "{equal}/1000");
    }

    proptest! {
        #[test]
        fn match_bookkeeping(seed in any::<u64>(), nd in 0usize..7, ng in 0usize..7, t in 0.01f64..0.99) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dets = random_boxes(&mut rng, nd);
            let gts = random_boxes(&mut rng, ng);
            let m = match_detections(&dets, &gts, t).unwrap();
            prop_assert_eq!(m.tp + m.fn_, ng);
            prop_assert_eq!(m.tp + m.fp, nd);
            prop_assert_eq!(m.tp, m.matches.len());
            let mut ds: Vec<usize> = m.matches.iter().map(|x| x.detection).collect();
            let mut gs: Vec<usize> = m.matches.iter().map(|x| x.ground_truth).collect();
            ds.sort();
            ds.dedup();
            gs.sort();
            gs.dedup();
            prop_assert_eq!(ds.len(), m.tp);
            prop_assert_eq!(gs.len(), m.tp);
            let p = metrics_point(&m, t);
            if p.precision > 0.0 && p.recall > 0.0 {
                prop_assert!(p.f1 >= p.precision.min(p.recall) - 1e-12);
                prop_assert!(p.f1 <= p.precision.max(p.recall) + 1e-12);
            }
        }

        #[test]
        fn recall_is_monotone(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames: Vec<FrameBoxes> = (0..3)
                .map(|i| FrameBoxes {
                    frame: format!("f{i}"),
                    detections: random_boxes(&mut rng, 6),
                    ground_truth: random_boxes(&mut rng, 4),
                })
                .collect();
            let c = metrics_over_iou_grid("d", "m", &frames).unwrap();
            for w in c.points.windows(2) {
                prop_assert!(w[1].recall <= w[0].recall);
            }
        }
    }

    #[test]
    fn perfect_detections_give_flat_curve() {
        let gts = vec![b(0, 0, 10, 10), b(30, 30, 7, 9)];
        let frames = vec![FrameBoxes {
            frame: "f".into(),
            detections: gts.clone(),
            ground_truth: gts,
        }];
        let c = metrics_over_iou_grid("d", "m", &frames).unwrap();
        assert_eq!(c.points.len(), 99);
        assert!(c.points.iter().all(|p| p.precision == 1.0 && p.recall == 1.0 && p.f1 == 1.0));
        assert_eq!(metrics_over_iou_grid("d", "m", &[]), Err(EvalError::NoFrames));
        let csv = curve_csv(&c);
        assert_eq!(csv.lines().count(), 100);
        assert_eq!(csv.lines().nth(1).unwrap(), "0.01,1,1,1");
    }

    #[test]
    fn curve_equals_framewise_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut frames: Vec<FrameBoxes> = (0..3)
            .map(|i| FrameBoxes {
                frame: format!("f{i}"),
                detections: random_boxes(&mut rng, 5),
                ground_truth: random_boxes(&mut rng, 3),
            })
            .collect();
        frames[2].ground_truth.clear();
        let c = metrics_over_iou_grid("d", "m", &frames).unwrap();
        for p in &c.points {
            let per: Vec<MetricsPoint> = frames
                .iter()
                .map(|f| metrics_point(&match_detections(&f.detections, &f.ground_truth, p.iou_threshold).unwrap(), p.iou_threshold))
                .collect();
            let precision = per.iter().map(|m| m.precision).sum::<f64>() / 3.0;
            let recall = (per[0].recall + per[1].recall) / 2.0;
            let f1 = per.iter().map(|m| m.f1).sum::<f64>() / 3.0;
            assert!((p.precision - precision).abs() < 1e-12);
            assert!((p.recall - recall).abs() < 1e-12);
            assert!((p.f1 - f1).abs() < 1e-12);
        }
    }

    #[test]
    fn confusion_examples() {
        let truth = [0, 1, 2, 3, 3, 0, 6, 2, 1, 0];
        let pred = [0, 1, 3, 3, 2, 1, 6, 2, 1, 0];
        let c = counting_confusion(&pred, &truth).unwrap();
        let mut expected = [[0u64; 7]; 7];
        for (t, p) in [(0, 0), (1, 1), (2, 3), (3, 3), (3, 2), (0, 1), (6, 6), (2, 2), (1, 1), (0, 0)] {
            expected[t][p] += 1;
        }
        assert_eq!(c.matrix, expected);
        assert_eq!(c.accuracy(), 0.7);
        assert_eq!(c.false_positive_rejection_rate(), Some(2.0 / 3.0));
        assert_eq!(c.row_sums(), [3, 2, 2, 2, 0, 0, 1]);
        assert_eq!(c.to_csv().lines().count(), 8);

        let same = counting_confusion(&truth, &truth).unwrap();
        assert_eq!(same.accuracy(), 1.0);
        assert!((0..7).all(|i| (0..7).all(|j| i == j || same.matrix[i][j] == 0)));

        assert!(matches!(counting_confusion(&[1], &[]), Err(EvalError::LengthMismatch { .. })));
        assert_eq!(
            counting_confusion(&[7], &[1]),
            Err(EvalError::CountOutOfRange { index: 0, value: 7 })
        );
    }

    #[test]
    fn svg_has_one_panel_per_dataset() {
        let curves: Vec<MetricsCurve> = (1..=7)
            .flat_map(|d| {
                ["SLIC-GMM", "U-Net"].map(|m| MetricsCurve {
                    dataset: format!("Dataset-{d}"),
                    method: m.into(),
                    points: iou_grid()
                        .into_iter()
                        .map(|t| MetricsPoint { iou_threshold: t, precision: 1.0 - t, recall: 1.0 - t, f1: 1.0 - t })
                        .collect(),
                })
            })
            .collect();
        let svg = render_metric_svg(&curves, Metric::Recall);
        assert_eq!(svg.matches(r#"<g class="panel">"#).count(), 7);
        assert_eq!(svg.matches("<polyline").count(), 14);
        assert!(svg.contains("Dataset-7") && svg.contains(">Recall<"));
    }
}
