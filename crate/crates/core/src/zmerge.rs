//! Cross-plane candidate merging.
//!
//! Two candidates closer than the merge radius are duplicates; clusters are
//! the connected components of that "closer than" graph. Edges are found on
//! a uniform grid with cell side = radius (so only the 3x3 neighbourhood can
//! hold partners) and components are joined with a union-find.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::detector::Candidate;
use crate::scanmodel::PointUm;

/// Merge radius in µm (10 px at 0.25 µm/px).
pub const DEFAULT_MERGE_RADIUS_UM: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedCandidate {
    pub rep: Candidate,
    pub members: Vec<Candidate>,
    /// Distinct plane offsets among the members, ascending.
    pub planes_present: Vec<f64>,
}

struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let gp = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = gp;
            x = gp;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra as usize] < self.size[rb as usize] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb as usize] = ra;
        self.size[ra as usize] += self.size[rb as usize];
    }
}

/// Connected components of the graph joining points closer than `radius`.
/// Each component lists point indices ascending; components are ordered by
/// their smallest index.
pub fn components(points: &[PointUm], radius: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    assert!(radius > 0.0, "merge radius must be positive");
    let r2 = radius * radius;
    let inv = 1.0 / radius;
    let key = |p: &PointUm| ((p.x_um * inv).floor() as i64, (p.y_um * inv).floor() as i64);

    let mut order: Vec<u32> = (0..n as u32).collect();
    let keys: Vec<(i64, i64)> = points.iter().map(key).collect();
    order.sort_unstable_by_key(|&i| keys[i as usize]);

    let mut cells: HashMap<(i64, i64), (usize, usize)> = HashMap::with_capacity(n);
    let mut start = 0;
    while start < n {
        let k = keys[order[start] as usize];
        let mut end = start + 1;
        while end < n && keys[order[end] as usize] == k {
            end += 1;
        }
        cells.insert(k, (start, end));
        start = end;
    }

    let mut uf = UnionFind::new(n);
    // half stencil: each unordered cell pair is visited once
    const STENCIL: [(i64, i64); 4] = [(1, -1), (1, 0), (1, 1), (0, 1)];
    let mut cell_list: Vec<_> = cells.iter().collect();
    cell_list.sort_unstable_by_key(|(k, _)| **k);
    for (&(cx, cy), &(s, e)) in cell_list {
        let here = &order[s..e];
        for (a_pos, &a) in here.iter().enumerate() {
            let pa = points[a as usize];
            for &b in &here[a_pos + 1..] {
                if pa.dist2(&points[b as usize]) < r2 {
                    uf.union(a, b);
                }
            }
        }
        for (dx, dy) in STENCIL {
            if let Some(&(s2, e2)) = cells.get(&(cx + dx, cy + dy)) {
                for &a in here {
                    let pa = points[a as usize];
                    for &b in &order[s2..e2] {
                        if pa.dist2(&points[b as usize]) < r2 {
                            uf.union(a, b);
                        }
                    }
                }
            }
        }
    }

    let mut label: Vec<u32> = vec![u32::MAX; n];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let r = uf.find(i as u32) as usize;
        if label[r] == u32::MAX {
            label[r] = comps.len() as u32;
            comps.push(Vec::new());
        }
        comps[label[r] as usize].push(i);
    }
    comps
}

/// Canonical member order: plane offset, then x, y, id.
fn canonical_cmp(a: &Candidate, b: &Candidate) -> Ordering {
    a.plane_offset_um
        .total_cmp(&b.plane_offset_um)
        .then(a.pos.x_um.total_cmp(&b.pos.x_um))
        .then(a.pos.y_um.total_cmp(&b.pos.y_um))
        .then_with(|| a.id.cmp(&b.id))
}

/// Representative preference: highest seg score, then the canonical order.
fn rep_cmp(a: &Candidate, b: &Candidate) -> Ordering {
    b.seg_score
        .total_cmp(&a.seg_score)
        .then_with(|| canonical_cmp(a, b))
}

fn output_cmp(a: &MergedCandidate, b: &MergedCandidate) -> Ordering {
    a.rep
        .pos
        .y_um
        .total_cmp(&b.rep.pos.y_um)
        .then(a.rep.pos.x_um.total_cmp(&b.rep.pos.x_um))
        .then_with(|| canonical_cmp(&a.rep, &b.rep))
}

fn build_cluster(mut members: Vec<Candidate>) -> MergedCandidate {
    members.sort_by(canonical_cmp);
    let rep = members
        .iter()
        .min_by(|a, b| rep_cmp(a, b))
        .expect("cluster is non-empty")
        .clone();
    let mut planes: Vec<f64> = members.iter().map(|c| c.plane_offset_um).collect();
    planes.dedup_by(|a, b| a == b);
    MergedCandidate {
        rep,
        members,
        planes_present: planes,
    }
}

/// Merges candidates from all planes (and overlapping tiles) into clusters.
/// Output is sorted by the representative's `(y, x)`.
pub fn merge_candidates(cands: &[Candidate], radius_um: f64) -> Vec<MergedCandidate> {
    let pts: Vec<PointUm> = cands.iter().map(|c| c.pos).collect();
    let mut out: Vec<MergedCandidate> = components(&pts, radius_um)
        .into_iter()
        .map(|idx| build_cluster(idx.into_iter().map(|i| cands[i].clone()).collect()))
        .collect();
    out.sort_by(output_cmp);
    out
}

/// Representatives after deduplicating one plane, in first-seen input order.
pub fn dedup_plane(cands: &[Candidate], radius_um: f64) -> Vec<Candidate> {
    let pts: Vec<PointUm> = cands.iter().map(|c| c.pos).collect();
    let mut reps: Vec<(usize, Candidate)> = components(&pts, radius_um)
        .into_iter()
        .map(|idx| {
            let best = *idx
                .iter()
                .min_by(|&&a, &&b| rep_cmp(&cands[a], &cands[b]))
                .expect("non-empty");
            (best, cands[best].clone())
        })
        .collect();
    reps.sort_by_key(|(i, _)| *i);
    reps.into_iter().map(|(_, c)| c).collect()
}

/// Removes duplicates produced by overlapping tile halos: merges within each
/// plane only, returning representatives sorted by (plane, y, x).
pub fn strip_halo_duplicates(per_tile: &[Candidate], radius_um: f64) -> Vec<Candidate> {
    let mut by_plane: Vec<(f64, Vec<Candidate>)> = Vec::new();
    for c in per_tile {
        match by_plane
            .iter_mut()
            .find(|(z, _)| *z == c.plane_offset_um)
        {
            Some((_, v)) => v.push(c.clone()),
            None => by_plane.push((c.plane_offset_um, vec![c.clone()])),
        }
    }
    by_plane.sort_by(|a, b| a.0.total_cmp(&b.0));
    by_plane
        .into_iter()
        .flat_map(|(_, v)| merge_candidates(&v, radius_um).into_iter().map(|m| m.rep))
        .collect()
}
