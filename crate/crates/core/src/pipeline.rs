//! Stage functions shared by the simulator and the command line: per-plane
//! detection, merging, feature assembly, calibration sets and prediction.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{Candidate, Detector};
use crate::error::{Error, Result};
use crate::evalstats::{match_detections, Located};
use crate::fusion::{predict_rows, ForestModel, LabeledSet, Layout};
use crate::scanmodel::PointUm;
use crate::seeds::SeedTree;
use crate::zmerge::{merge_candidates, MergedCandidate};

/// Candidates of every plane in `planes`, concatenated in plane order.
pub fn detect_planes(det: &dyn Detector, planes: &[f64]) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for &z in planes {
        out.extend(det.detect_plane(z)?);
    }
    Ok(out)
}

/// Detection on `planes` followed by cross-plane merging.
pub fn detect_and_merge(det: &dyn Detector, planes: &[f64], radius_um: f64) -> Result<Vec<MergedCandidate>> {
    Ok(merge_candidates(&detect_planes(det, planes)?, radius_um))
}

/// One feature row per merged candidate (plane-major, see [`Layout`]).
pub fn feature_rows(merged: &[MergedCandidate], det: &dyn Detector, layout: &Arc<Layout>) -> Result<Vec<Vec<f64>>> {
    crate::par::try_map(merged, |mc| {
        crate::fusion::assemble_features(mc, det, layout).map(|fv| fv.values)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationParams {
    pub match_cutoff_um: f64,
    /// At most this many negatives per positive are kept.
    pub neg_ratio: f64,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        CalibrationParams {
            match_cutoff_um: crate::evalstats::DEFAULT_MATCH_CUTOFF_UM,
            neg_ratio: 3.0,
        }
    }
}

/// Labels merged candidates of a calibration slide. Candidates matched to a
/// ground-truth mitosis are positives; candidates farther than the cutoff
/// from every mitosis are negatives, subsampled to `neg_ratio` per positive.
/// Candidates within the cutoff but left unmatched are ambiguous and dropped.
/// The negative subsample ranks candidates by a hash of their id, so it does
/// not depend on candidate order.
pub fn calibration_set(
    merged: &[MergedCandidate],
    rows: &[Vec<f64>],
    gts: &[Located],
    layout: &Layout,
    params: &CalibrationParams,
    seed: u64,
) -> Result<LabeledSet> {
    let dets: Vec<Located> = merged.iter().map(rep_located).collect();
    let m = match_detections(&dets, gts, params.match_cutoff_um);
    let matched: std::collections::HashSet<&str> = m.pairs.iter().map(|p| p.det_id.as_str()).collect();
    let near: Vec<bool> = {
        let pts: Vec<_> = gts.iter().map(|g| g.pos).collect();
        dets.iter()
            .map(|d| pts.iter().any(|p| p.dist(&d.pos) <= params.match_cutoff_um))
            .collect()
    };
    let tree = SeedTree::new(seed);
    let mut negatives: Vec<(u64, usize)> = Vec::new();
    let mut positives = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        if matched.contains(d.id.as_str()) {
            positives.push(i);
        } else if !near[i] {
            negatives.push((tree.child(&d.id).seed(), i));
        }
    }
    negatives.sort();
    let keep = ((positives.len() as f64 * params.neg_ratio).floor() as usize).max(1);
    negatives.truncate(keep);
    let mut chosen: Vec<(usize, bool)> = positives.into_iter().map(|i| (i, true)).collect();
    chosen.extend(negatives.into_iter().map(|(_, i)| (i, false)));
    chosen.sort();
    let mut set = LabeledSet::new(layout.clone());
    for (i, label) in chosen {
        set.push(rows[i].clone(), label)?;
    }
    Ok(set)
}

/// Feature rows at `n` seeded random positions inside `[0, w] x [0, h]`
/// that lie farther than `min_dist_um` from every point in `avoid`. Used to
/// give a calibration set negatives when the slide produced none.
pub fn background_rows(
    det: &dyn Detector,
    layout: &Layout,
    avoid: &[PointUm],
    extent_um: (f64, f64),
    n: usize,
    min_dist_um: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = SeedTree::new(seed).rng();
    let mut out = Vec::with_capacity(n);
    let mut misses = 0usize;
    while out.len() < n {
        let p = PointUm::new(rng.random_range(0.0..extent_um.0), rng.random_range(0.0..extent_um.1));
        if avoid.iter().any(|a| a.dist(&p) <= min_dist_um) {
            misses += 1;
            if misses > 100 * n.max(1) {
                return Err(Error::Contract(format!(
                    "no room for background samples farther than {min_dist_um} µm from {} points",
                    avoid.len()
                )));
            }
            continue;
        }
        let mut row = Vec::with_capacity(layout.len());
        for &z in &layout.plane_offsets_um {
            row.extend(det.score_patch(p, z, &layout.model_ids)?.scores);
        }
        out.push(row);
    }
    Ok(out)
}

pub fn rep_located(mc: &MergedCandidate) -> Located {
    Located {
        id: mc.rep.id.clone(),
        pos: mc.rep.pos,
    }
}

/// A merged candidate with its fused probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub x_um: f64,
    pub y_um: f64,
    pub proba: f64,
    pub mitosis: bool,
}

pub fn predict_merged(
    model: &ForestModel,
    layout: &Arc<Layout>,
    merged: &[MergedCandidate],
    rows: &[Vec<f64>],
) -> Result<Vec<Prediction>> {
    let probs = predict_rows(model, layout, rows)?;
    Ok(merged
        .iter()
        .zip(probs)
        .map(|(mc, p)| Prediction {
            id: mc.rep.id.clone(),
            x_um: mc.rep.pos.x_um,
            y_um: mc.rep.pos.y_um,
            proba: p,
            mitosis: p >= model.decision_threshold,
        })
        .collect())
}

/// Positive predictions as matchable detections.
pub fn positives(preds: &[Prediction]) -> Vec<Located> {
    preds
        .iter()
        .filter(|p| p.mitosis)
        .map(|p| Located::new(p.id.clone(), p.x_um, p.y_um))
        .collect()
}

/// Fraction of ground truth within the cutoff of at least one candidate.
pub fn candidate_recall(reps: &[Located], gts: &[Located], cutoff_um: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let hit = gts
        .iter()
        .filter(|g| reps.iter().any(|r| r.pos.dist(&g.pos) <= cutoff_um))
        .count();
    Some(hit as f64 / gts.len() as f64)
}
