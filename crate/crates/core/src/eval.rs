//! Labeling metrics, anytime curves over cost budgets, and their area under
//! the curve.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::VOID;
use crate::dhm::predict_labels;
use crate::error::{Error, Result};
use crate::policy::{Policy, Runner, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub pixel_acc: f64,
    /// Mean per-class recall over classes present in the truth.
    pub class_acc: f64,
    /// Mean intersection-over-union over classes present in the truth.
    pub miou: f64,
}

/// Metrics over non-VOID pixels.
pub fn compute_metrics(pred: &[u8], truth: &[u8], num_classes: usize) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(Error::Validation(format!(
            "prediction has {} pixels, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    let k = num_classes;
    let mut confusion = vec![vec![0u64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        if t == VOID {
            continue;
        }
        let (t, p) = (t as usize, p as usize);
        if t >= k || p >= k {
            return Err(Error::Validation(format!("label {} outside {k} classes", t.max(p))));
        }
        confusion[t][p] += 1;
    }
    let labeled: u64 = confusion.iter().flatten().sum();
    if labeled == 0 {
        return Err(Error::Degenerate("no labeled pixels".into()));
    }
    let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
    let (mut recall, mut iou, mut present) = (0.0, 0.0, 0usize);
    for c in 0..k {
        let truth_c: u64 = confusion[c].iter().sum();
        if truth_c == 0 {
            continue;
        }
        let pred_c: u64 = (0..k).map(|t| confusion[t][c]).sum();
        let tp = confusion[c][c] as f64;
        recall += tp / truth_c as f64;
        iou += tp / (truth_c + pred_c - confusion[c][c]) as f64;
        present += 1;
    }
    Ok(Metrics {
        pixel_acc: correct as f64 / labeled as f64,
        class_acc: recall / present as f64,
        miou: iou / present as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub budget: f64,
    /// Mean cumulative cost actually spent.
    pub cost: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub method: String,
    pub points: Vec<CurvePoint>,
}

/// `n` budgets spaced logarithmically from `start` to `end` (linearly when
/// `start` is not positive). Always strictly increasing.
pub fn budget_grid(start: f64, end: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    let end = if end > start { end } else { start + 1.0 };
    let mut grid: Vec<f64> = if start > 0.0 {
        let (a, b) = (start.ln(), end.ln());
        (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
    } else {
        (0..n).map(|i| start + (end - start) * i as f64 / (n - 1) as f64).collect()
    };
    grid[0] = start;
    grid[n - 1] = end;
    grid.dedup();
    grid
}

/// Mean cumulative cost of unlimited rollouts.
pub fn mean_full_cost(policy: &Policy, scenes: &[&Scene], runner: &Runner) -> f64 {
    let total: f64 = scenes
        .iter()
        .map(|s| runner.rollout(policy, s, f64::INFINITY, None, false).final_state().cost)
        .sum();
    total / scenes.len().max(1) as f64
}

/// Per-image metrics of the unlimited trajectory truncated at each budget.
pub fn per_image_curves(policy: &Policy, scenes: &[&Scene], runner: &Runner, grid: &[f64]) -> Vec<Vec<(f64, Metrics)>> {
    scenes
        .iter()
        .map(|scene| {
            let traj = runner.rollout(policy, scene, f64::INFINITY, None, false);
            let mut cache: Vec<Option<Metrics>> = vec![None; traj.states.len()];
            grid.iter()
                .map(|&b| {
                    let n = traj.steps_within(b);
                    let state = &traj.states[n];
                    let m = *cache[n].get_or_insert_with(|| {
                        let pred = predict_labels(state, &scene.tree);
                        compute_metrics(&pred, &scene.labels, scene.tree.num_classes).unwrap_or_default()
                    });
                    (state.cost, m)
                })
                .collect()
        })
        .collect()
}

/// Image-averaged metrics at every budget of `grid`.
pub fn anytime_curve(policy: &Policy, scenes: &[&Scene], runner: &Runner, grid: &[f64], method: &str) -> MetricCurve {
    let per_image = per_image_curves(policy, scenes, runner, grid);
    let n = scenes.len().max(1) as f64;
    let points = grid
        .iter()
        .enumerate()
        .map(|(i, &budget)| {
            let mut cost = 0.0;
            let mut m = Metrics::default();
            for img in &per_image {
                let (c, x) = img[i];
                cost += c;
                m.pixel_acc += x.pixel_acc;
                m.class_acc += x.class_acc;
                m.miou += x.miou;
            }
            CurvePoint {
                budget,
                cost: cost / n,
                metrics: Metrics {
                    pixel_acc: m.pixel_acc / n,
                    class_acc: m.class_acc / n,
                    miou: m.miou / n,
                },
            }
        })
        .collect();
    MetricCurve {
        method: method.to_string(),
        points,
    }
}

/// The curve as fractions of its last point's budget and metrics.
pub fn normalized_curve(curve: &MetricCurve) -> MetricCurve {
    let Some(last) = curve.points.last().copied() else {
        return curve.clone();
    };
    let frac = |v: f64, of: f64| if of > 0.0 { v / of } else { 0.0 };
    MetricCurve {
        method: curve.method.clone(),
        points: curve
            .points
            .iter()
            .map(|p| CurvePoint {
                budget: frac(p.budget, last.budget),
                cost: frac(p.cost, last.cost),
                metrics: Metrics {
                    pixel_acc: frac(p.metrics.pixel_acc, last.metrics.pixel_acc),
                    class_acc: frac(p.metrics.class_acc, last.metrics.class_acc),
                    miou: frac(p.metrics.miou, last.metrics.miou),
                },
            })
            .collect(),
    }
}

/// Trapezoidal area under pixel accuracy over budget, divided by the budget
/// span.
pub fn auc(curve: &MetricCurve) -> Result<f64> {
    auc_of(&curve.points.iter().map(|p| (p.budget, p.metrics.pixel_acc)).collect::<Vec<_>>())
}

/// Normalized trapezoidal area of `(x, y)` points with increasing `x`.
pub fn auc_of(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Validation("area under a curve needs at least two points".into()));
    }
    let span = points[points.len() - 1].0 - points[0].0;
    if !(span > 0.0) {
        return Err(Error::Validation("curve budgets must increase".into()));
    }
    let area: f64 = points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum();
    Ok(area / span)
}

/// Writes `method,budget,cost,pixel_acc,class_acc,miou` rows.
pub fn write_curves_csv<W: Write>(out: W, curves: &[MetricCurve]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Serde(e.to_string());
    w.write_record(["method", "budget", "cost", "pixel_acc", "class_acc", "miou"]).map_err(err)?;
    for c in curves {
        for p in &c.points {
            w.write_record([
                c.method.clone(),
                format!("{:.6}", p.budget),
                format!("{:.6}", p.cost),
                format!("{:.6}", p.metrics.pixel_acc),
                format!("{:.6}", p.metrics.class_acc),
                format!("{:.6}", p.metrics.miou),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_boundaries() {
        let truth = [0, 1, 0, 1];
        let m = compute_metrics(&truth, &truth, 2).unwrap();
        assert_eq!((m.pixel_acc, m.class_acc, m.miou), (1.0, 1.0, 1.0));
        let m = compute_metrics(&[1; 4], &[0; 4], 2).unwrap();
        assert_eq!((m.pixel_acc, m.class_acc, m.miou), (0.0, 0.0, 0.0));
        let m = compute_metrics(&[0, 1, 1], &[0, VOID, 1], 2).unwrap();
        assert_eq!(m.pixel_acc, 1.0);
        assert!(compute_metrics(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn auc_examples() {
        assert!((auc_of(&[(1.0, 0.8), (3.0, 0.8), (7.0, 0.8)]).unwrap() - 0.8).abs() < 1e-12);
        assert!((auc_of(&[(0.0, 0.0), (1.0, 1.0)]).unwrap() - 0.5).abs() < 1e-12);
        assert!(auc_of(&[(0.0, 1.0)]).is_err());
    }

    #[test]
    fn grid_is_log_spaced_and_increasing() {
        let g = budget_grid(1.0, 100.0, 3);
        assert_eq!(g.len(), 3);
        assert!((g[1] - 10.0).abs() < 1e-9);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        let lin = budget_grid(0.0, 4.0, 5);
        assert_eq!(lin, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }
}
