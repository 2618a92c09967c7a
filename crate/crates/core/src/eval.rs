//! Instance- and bag-level metrics, mean-pooling bag inference, pseudo-label
//! quality and score-map export for grid datasets.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::MilDataset;
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::pplg::PseudoLabelStore;
use crate::trainer::TrainState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Accuracy of `score >= 0.5`.
    pub threshold_accuracy: f64,
}

/// ROC AUC via the Mann–Whitney rank sum, with midranks for tied scores:
/// `(Σ ranks of positives − n_pos (n_pos + 1) / 2) / (n_pos n_neg)`.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocResult> {
    if scores.len() != labels.len() {
        return Err(Error::dim("roc_auc labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN score".into()));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Validation(format!("label {l} not in {{0,1}}")));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc { n_pos, n_neg });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        pos_rank_sum += midrank * pos_in_tie as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let auc = (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n);

    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= 0.5) == (l == 1))
        .count();
    Ok(RocResult {
        auc,
        n_pos,
        n_neg,
        threshold_accuracy: correct as f64 / scores.len() as f64,
    })
}

/// Positive-class probability of every instance in global instance order.
pub fn predict_instances(state: &TrainState, ds: &MilDataset) -> Result<Vec<f64>> {
    if ds.d_raw != state.d_raw {
        return Err(Error::dim("dataset features vs trained encoder", state.d_raw, ds.d_raw));
    }
    let rows: Vec<&[f64]> = ds.instances().map(|i| i.features.as_slice()).collect();
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    state.models.predict_proba(&Matrix::from_rows(&rows)?)
}

/// Mean of the instance probabilities of each bag; `bag_sizes` partitions
/// `instance_probs` in order.
pub fn predict_bags(instance_probs: &[f64], bag_sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = bag_sizes.iter().sum();
    if total != instance_probs.len() {
        return Err(Error::dim("bag structure", instance_probs.len(), total));
    }
    let mut out = Vec::with_capacity(bag_sizes.len());
    let mut start = 0;
    for (b, &n) in bag_sizes.iter().enumerate() {
        if n == 0 {
            return Err(Error::Data(format!("bag {b} has no instances")));
        }
        out.push(instance_probs[start..start + n].iter().sum::<f64>() / n as f64);
        start += n;
    }
    Ok(out)
}

/// AUC of the positive pseudo-label component against instance truth,
/// optionally restricted to positive-bag instances.
pub fn pseudo_label_quality(
    store: &PseudoLabelStore,
    truth: &[u8],
    restrict_to_positive_bags: bool,
) -> Result<f64> {
    if truth.len() != store.len() {
        return Err(Error::dim("truth labels", store.len(), truth.len()));
    }
    let (scores, labels): (Vec<f64>, Vec<u8>) = (0..store.len())
        .filter(|&i| !restrict_to_positive_bags || !store.is_negative_bag(i))
        .map(|i| (store.get(i)[1], truth[i]))
        .unzip();
    Ok(roc_auc(&scores, &labels)?.auc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagScore {
    pub bag_id: u64,
    pub score: f64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instance: Option<RocResult>,
    pub bag: RocResult,
    pub per_bag_scores: Vec<BagScore>,
}

/// Instance metrics cover every instance, or only positive-bag instances when
/// `restrict_to_positive_bags` is set, and are present only when the dataset
/// carries instance truth.
pub fn evaluate(state: &TrainState, ds: &MilDataset, restrict_to_positive_bags: bool) -> Result<(EvalReport, Vec<f64>)> {
    let probs = predict_instances(state, ds)?;
    let sizes: Vec<usize> = ds.bags.iter().map(|b| b.instances.len()).collect();
    let bag_scores = predict_bags(&probs, &sizes)?;
    let bag_labels: Vec<u8> = ds.bags.iter().map(|b| b.label).collect();
    let bag = roc_auc(&bag_scores, &bag_labels)?;

    let instance = match ds.instance_truth() {
        Some(truth) => {
            let bag_of_inst = ds.instance_bag_labels();
            let (s, t): (Vec<f64>, Vec<u8>) = probs
                .iter()
                .zip(&truth)
                .zip(&bag_of_inst)
                .filter(|(_, &bl)| !restrict_to_positive_bags || bl == 1)
                .map(|((&p, &t), _)| (p, t))
                .unzip();
            Some(roc_auc(&s, &t)?)
        }
        None => None,
    };
    let per_bag_scores = ds
        .bags
        .iter()
        .zip(&bag_scores)
        .map(|(b, &score)| BagScore {
            bag_id: b.bag_id,
            score,
            label: b.label,
        })
        .collect();
    Ok((
        EvalReport {
            instance,
            bag,
            per_bag_scores,
        },
        probs,
    ))
}

const CELL_PX: usize = 20;

/// Blue-to-red ramp; `p = 0` maps to the minimum colour.
pub fn colormap(p: f64) -> (u8, u8, u8) {
    let t = p.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    (lerp(49.0, 215.0), lerp(54.0, 48.0), lerp(149.0, 39.0))
}

fn hex(rgb: (u8, u8, u8)) -> String {
    format!("#{:02x}{:02x}{:02x}", rgb.0, rgb.1, rgb.2)
}

/// CSV rows `row,col,probability,truth` for one grid bag.
pub fn score_map_csv(grid_side: usize, probs: &[f64], truth: Option<&[u8]>) -> String {
    let mut s = String::from("row,col,probability,truth\n");
    for (i, p) in probs.iter().enumerate() {
        let t = truth.map(|t| t[i].to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{p},{t}", i / grid_side, i % grid_side);
    }
    s
}

/// SVG heatmap for one grid bag. When truth is given, every cell edge that
/// separates a truth-positive cell from a non-positive cell (or the border)
/// is drawn, so the outline encloses exactly the truth-positive cells.
pub fn score_map_svg(grid_side: usize, probs: &[f64], truth: Option<&[u8]>) -> String {
    let size = grid_side * CELL_PX;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">"
    );
    for (i, &p) in probs.iter().enumerate() {
        let (r, c) = (i / grid_side, i % grid_side);
        let _ = writeln!(
            s,
            "<rect class=\"cell\" x=\"{}\" y=\"{}\" width=\"{CELL_PX}\" height=\"{CELL_PX}\" fill=\"{}\"/>",
            c * CELL_PX,
            r * CELL_PX,
            hex(colormap(p))
        );
    }
    if let Some(t) = truth {
        let pos = |r: isize, c: isize| {
            r >= 0
                && c >= 0
                && (r as usize) < grid_side
                && (c as usize) < grid_side
                && t[r as usize * grid_side + c as usize] == 1
        };
        for r in 0..grid_side as isize {
            for c in 0..grid_side as isize {
                if !pos(r, c) {
                    continue;
                }
                let (x0, y0) = (c as usize * CELL_PX, r as usize * CELL_PX);
                let (x1, y1) = (x0 + CELL_PX, y0 + CELL_PX);
                let edges = [
                    (!pos(r - 1, c), (x0, y0, x1, y0)),
                    (!pos(r + 1, c), (x0, y1, x1, y1)),
                    (!pos(r, c - 1), (x0, y0, x0, y1)),
                    (!pos(r, c + 1), (x1, y0, x1, y1)),
                ];
                for (draw, (a, b, cc, d)) in edges {
                    if draw {
                        let _ = writeln!(
                            s,
                            "<line class=\"truth\" x1=\"{a}\" y1=\"{b}\" x2=\"{cc}\" y2=\"{d}\" stroke=\"#000000\" stroke-width=\"2\"/>"
                        );
                    }
                }
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `bag_<id>.csv` and `bag_<id>.svg` for every bag of a grid dataset.
pub fn export_score_map(ds: &MilDataset, instance_probs: &[f64], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let side = ds
        .grid_side()
        .ok_or_else(|| Error::Usage("dataset was not produced by the grid generator".into()))?;
    if instance_probs.len() != ds.num_instances() {
        return Err(Error::dim("instance probabilities", ds.num_instances(), instance_probs.len()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut start = 0;
    for bag in &ds.bags {
        let n = bag.instances.len();
        if n != side * side {
            return Err(Error::dim(format!("grid bag {}", bag.bag_id), side * side, n));
        }
        let probs = &instance_probs[start..start + n];
        start += n;
        let truth = bag.truth();
        let csv_path = dir.join(format!("bag_{}.csv", bag.bag_id));
        fs::write(&csv_path, score_map_csv(side, probs, truth.as_deref())).map_err(|e| Error::io(&csv_path, e))?;
        let svg_path = dir.join(format!("bag_{}.svg", bag.bag_id));
        fs::write(&svg_path, score_map_svg(side, probs, truth.as_deref())).map_err(|e| Error::io(&svg_path, e))?;
    }
    Ok(())
}
