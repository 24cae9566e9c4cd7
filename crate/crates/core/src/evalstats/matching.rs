//! Detection-to-ground-truth matching.
//!
//! Pairs within the cutoff are matched so that the number of pairs is
//! maximal and, among maximal matchings, the summed distance is minimal.
//! The problem splits into independent connected components of the
//! "within cutoff" graph; each is solved as a rectangular assignment
//! problem where an admissible pair costs `distance - BIG` and a
//! non-admissible one costs 0, with `BIG` larger than any achievable
//! distance sum so that cardinality always dominates.

use serde::{Deserialize, Serialize};

use crate::scanmodel::PointUm;
use crate::zmerge::components;

/// Default true-positive distance cutoff in µm (30 px at 0.25 µm/px).
pub const DEFAULT_MATCH_CUTOFF_UM: f64 = 7.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Located {
    pub id: String,
    pub pos: PointUm,
}

impl Located {
    pub fn new(id: impl Into<String>, x_um: f64, y_um: f64) -> Self {
        Located {
            id: id.into(),
            pos: PointUm::new(x_um, y_um),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub det_id: String,
    pub gt_id: String,
    pub distance_um: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub pairs: Vec<MatchPair>,
    pub cutoff_um: f64,
}

impl MatchResult {
    /// Sums counts (and concatenates pairs) of per-slide results.
    pub fn pooled<'a>(parts: impl IntoIterator<Item = &'a MatchResult>, cutoff_um: f64) -> MatchResult {
        let mut out = MatchResult {
            tp: 0,
            fp: 0,
            fn_: 0,
            pairs: Vec::new(),
            cutoff_um,
        };
        for p in parts {
            out.tp += p.tp;
            out.fp += p.fp;
            out.fn_ += p.fn_;
            out.pairs.extend(p.pairs.iter().cloned());
        }
        out
    }
}

/// Min-cost assignment of every row to a distinct column (`rows <= cols`).
/// Returns the column of each row.
pub(crate) fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs rows <= cols");
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Maximum-cardinality, then minimum-distance matching within `cutoff_um`.
pub fn match_detections(dets: &[Located], gts: &[Located], cutoff_um: f64) -> MatchResult {
    assert!(cutoff_um > 0.0, "cutoff must be positive");
    let mut dets: Vec<&Located> = dets.iter().collect();
    let mut gts: Vec<&Located> = gts.iter().collect();
    dets.sort_by(|a, b| a.id.cmp(&b.id));
    gts.sort_by(|a, b| a.id.cmp(&b.id));

    // joint components; det-det and gt-gt links only coarsen the split
    let pts: Vec<PointUm> = gts.iter().chain(dets.iter()).map(|l| l.pos).collect();
    let reach = cutoff_um * (1.0 + 1e-12) + 1e-12;
    let ng = gts.len();
    let mut pairs: Vec<MatchPair> = Vec::new();
    for comp in components(&pts, reach) {
        let g: Vec<usize> = comp.iter().copied().filter(|&i| i < ng).collect();
        let d: Vec<usize> = comp.iter().copied().filter(|&i| i >= ng).map(|i| i - ng).collect();
        if g.is_empty() || d.is_empty() {
            continue;
        }
        let big = cutoff_um * (g.len().min(d.len()) as f64 + 1.0) + 1.0;
        let dist = |gi: usize, di: usize| gts[gi].pos.dist(&dets[di].pos);
        let rows_are_gts = g.len() <= d.len();
        let (rows, cols) = if rows_are_gts { (&g, &d) } else { (&d, &g) };
        let cost: Vec<Vec<f64>> = rows
            .iter()
            .map(|&r| {
                cols.iter()
                    .map(|&c| {
                        let dd = if rows_are_gts { dist(r, c) } else { dist(c, r) };
                        if dd <= cutoff_um {
                            dd - big
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        for (ri, ci) in hungarian(&cost).into_iter().enumerate() {
            let (gi, di) = if rows_are_gts {
                (rows[ri], cols[ci])
            } else {
                (cols[ci], rows[ri])
            };
            let dd = dist(gi, di);
            if dd <= cutoff_um {
                pairs.push(MatchPair {
                    det_id: dets[di].id.clone(),
                    gt_id: gts[gi].id.clone(),
                    distance_um: dd,
                });
            }
        }
    }
    pairs.sort_by(|a, b| a.gt_id.cmp(&b.gt_id).then_with(|| a.det_id.cmp(&b.det_id)));
    let tp = pairs.len();
    MatchResult {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
        pairs,
        cutoff_um,
    }
}

/// `tp / (tp + fn)`, or `None` when there is no ground truth.
pub fn sensitivity(m: &MatchResult) -> Option<f64> {
    let d = m.tp + m.fn_;
    (d > 0).then(|| m.tp as f64 / d as f64)
}

/// `tp / (tp + fp)`, or `None` when there are no detections.
pub fn precision(m: &MatchResult) -> Option<f64> {
    let d = m.tp + m.fp;
    (d > 0).then(|| m.tp as f64 / d as f64)
}
