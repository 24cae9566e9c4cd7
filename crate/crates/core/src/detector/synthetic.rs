use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{defocus_response, plane_key, Candidate, CandidateSource, DefocusParams, Detector, ScoreVector};
use crate::error::Result;
use crate::scanmodel::PointUm;
use crate::seeds::SeedTree;
use crate::simkit::{ObjectKind, SimObject, SyntheticSlide};
use crate::zmerge::{dedup_plane, DEFAULT_MERGE_RADIUS_UM};

const GRID_UM: f64 = 10.0;
/// Scores at positions with no object nearby.
const BACKGROUND_LEVEL: f64 = 0.02;

/// Analytic detector: an object at depth `z` seen on plane `p` responds with
/// `amplitude * exp(-(p - z)^2 / (2 sigma^2))` plus independent Gaussian
/// noise per (object, plane, channel).
pub struct SyntheticDetector<'a> {
    slide: &'a SyntheticSlide,
    params: DefocusParams,
    seeds: SeedTree,
    merge_radius_um: f64,
    lookup_radius_um: f64,
    grid: HashMap<(i64, i64), Vec<usize>>,
}

impl<'a> SyntheticDetector<'a> {
    pub fn new(slide: &'a SyntheticSlide, params: DefocusParams, seeds: SeedTree) -> Self {
        let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, o) in slide.objects.iter().enumerate() {
            grid.entry(grid_key(o.pos)).or_default().push(i);
        }
        SyntheticDetector {
            slide,
            lookup_radius_um: DEFAULT_MERGE_RADIUS_UM + 2.0 * params.jitter_um,
            params,
            seeds,
            merge_radius_um: DEFAULT_MERGE_RADIUS_UM,
            grid,
        }
    }

    pub fn with_merge_radius(mut self, r: f64) -> Self {
        self.merge_radius_um = r;
        self.lookup_radius_um = r + 2.0 * self.params.jitter_um;
        self
    }

    pub fn params(&self) -> &DefocusParams {
        &self.params
    }

    fn noise(&self, channel: SeedTree, obj: usize, plane: f64) -> f64 {
        if self.params.noise_sd == 0.0 {
            return 0.0;
        }
        let z: f64 = channel
            .index(obj as u64)
            .index(plane_key(plane) as u64)
            .rng()
            .sample(StandardNormal);
        z * self.params.noise_sd
    }

    /// Noise-free response of an object on a plane.
    pub fn response(&self, o: &SimObject, plane: f64) -> f64 {
        o.amplitude * defocus_response(plane - o.depth_um, self.params.sigma_um)
    }

    /// Fraction of the response a verification model reports for an object.
    fn model_gain(&self, obj: usize, model: &str) -> f64 {
        let o = &self.slide.objects[obj];
        let lo = self.params.imposter_gain_min;
        if o.kind == ObjectKind::Mitosis || lo >= 1.0 {
            return 1.0;
        }
        let u: f64 = self.seeds.child("gain").child(model).index(obj as u64).rng().random();
        lo + (1.0 - lo) * u
    }

    pub fn seg_score(&self, obj: usize, plane: f64) -> f64 {
        let o = &self.slide.objects[obj];
        (self.response(o, plane) + self.noise(self.seeds.child("seg"), obj, plane)).clamp(0.0, 1.0)
    }

    fn jittered(&self, obj: usize, plane: f64) -> PointUm {
        let o = &self.slide.objects[obj];
        if self.params.jitter_um == 0.0 {
            return o.pos;
        }
        let mut rng = self
            .seeds
            .child("jitter")
            .index(obj as u64)
            .index(plane_key(plane) as u64)
            .rng();
        let r = self.params.jitter_um * rng.random::<f64>().sqrt();
        let t = rng.random::<f64>() * std::f64::consts::TAU;
        PointUm::new(o.pos.x_um + r * t.cos(), o.pos.y_um + r * t.sin())
            .clamped(self.slide.width_um, self.slide.height_um)
    }

    fn nearest_object(&self, pos: PointUm) -> Option<usize> {
        let (cx, cy) = grid_key(pos);
        let r2 = self.lookup_radius_um * self.lookup_radius_um;
        let mut best: Option<(f64, usize)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for &i in self.grid.get(&(cx + dx, cy + dy)).into_iter().flatten() {
                    let d = self.slide.objects[i].pos.dist2(&pos);
                    if d <= r2 && best.is_none_or(|(bd, bi)| d < bd || (d == bd && i < bi)) {
                        best = Some((d, i));
                    }
                }
            }
        }
        best.map(|(_, i)| i)
    }
}

fn grid_key(p: PointUm) -> (i64, i64) {
    ((p.x_um / GRID_UM).floor() as i64, (p.y_um / GRID_UM).floor() as i64)
}

impl Detector for SyntheticDetector<'_> {
    fn detect_plane(&self, plane_offset_um: f64) -> Result<Vec<Candidate>> {
        let tau = self.params.seg_threshold;
        let n = self.slide.objects.len();
        let found: Vec<Option<Candidate>> = crate::par::map_range(n, |i| {
            let s = self.seg_score(i, plane_offset_um);
            (s >= tau).then(|| Candidate {
                id: format!("{}/o{}/z{}", self.slide.slide_id, self.slide.objects[i].id, plane_key(plane_offset_um)),
                pos: self.jittered(i, plane_offset_um),
                plane_offset_um,
                seg_score: s,
                source: CandidateSource::Synthetic,
                tile_id: None,
            })
        });
        let cands: Vec<Candidate> = found.into_iter().flatten().collect();
        Ok(dedup_plane(&cands, self.merge_radius_um))
    }

    fn score_patch(
        &self,
        pos: PointUm,
        plane_offset_um: f64,
        model_ids: &[String],
    ) -> Result<ScoreVector> {
        let base = self.seeds.child("score");
        let scores = match self.nearest_object(pos) {
            Some(i) => {
                let r = self.response(&self.slide.objects[i], plane_offset_um);
                model_ids
                    .iter()
                    .map(|m| {
                        (r * self.model_gain(i, m) + self.noise(base.child(m), i, plane_offset_um)).clamp(0.0, 1.0)
                    })
                    .collect()
            }
            None => {
                // background: key the noise on the quantised position
                let qx = (pos.x_um * 4.0).round() as i64 as u64;
                let qy = (pos.y_um * 4.0).round() as i64 as u64;
                model_ids
                    .iter()
                    .map(|m| {
                        let z: f64 = base
                            .child("background")
                            .child(m)
                            .index(qx)
                            .index(qy)
                            .index(plane_key(plane_offset_um) as u64)
                            .rng()
                            .sample(StandardNormal);
                        (BACKGROUND_LEVEL + z * self.params.noise_sd).clamp(0.0, 1.0)
                    })
                    .collect()
            }
        };
        ScoreVector::new(model_ids.to_vec(), scores)
    }
}
