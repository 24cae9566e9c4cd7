use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{plane_key, Candidate, CandidateSource, Detector, ScoreVector};
use crate::error::{Error, Result};
use crate::scanmodel::PointUm;
use crate::seeds::SeedTree;
use crate::tilestore::{plan_tiles, StoreHandle, TileImage, TileSpec, DEFAULT_HALO_PX, DEFAULT_TILE_PX};
use crate::zmerge::{strip_halo_duplicates, DEFAULT_MERGE_RADIUS_UM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterParams {
    pub tile_size_px: usize,
    pub halo_px: usize,
    pub seg_threshold: f64,
    /// Per-model score noise added on top of the sampled intensity.
    pub noise_sd: f64,
    pub merge_radius_um: f64,
}

impl Default for RasterParams {
    fn default() -> Self {
        RasterParams {
            tile_size_px: DEFAULT_TILE_PX,
            halo_px: DEFAULT_HALO_PX,
            seg_threshold: 0.5,
            noise_sd: 0.0,
            merge_radius_um: DEFAULT_MERGE_RADIUS_UM,
        }
    }
}

/// Blob detector over a plane-stack store: stage-1 candidates are local
/// intensity maxima above threshold, and a model's score is the local peak
/// intensity at the queried position plus that model's noise.
pub struct RasterDetector {
    store: StoreHandle,
    params: RasterParams,
    seeds: SeedTree,
    planes: Vec<(f64, OnceLock<std::result::Result<TileImage, String>>)>,
}

impl RasterDetector {
    pub fn new(store: StoreHandle, params: RasterParams, seeds: SeedTree) -> Self {
        let planes = store
            .manifest()
            .plane_offsets_um()
            .into_iter()
            .map(|z| (z, OnceLock::new()))
            .collect();
        RasterDetector {
            store,
            params,
            seeds,
            planes,
        }
    }

    pub fn store(&self) -> &StoreHandle {
        &self.store
    }

    fn whole_plane(&self, z: f64) -> Result<&TileImage> {
        let (_, cell) = self
            .planes
            .iter()
            .find(|(p, _)| (p - z).abs() < 1e-9)
            .ok_or_else(|| Error::OutOfBounds(format!("no plane at {z} µm")))?;
        let m = self.store.manifest();
        cell.get_or_init(|| {
            self.store
                .read_region(z, 0, 0, m.width_px, m.height_px)
                .map_err(|e| e.to_string())
        })
        .as_ref()
        .map_err(|e| Error::Store(e.clone()))
    }

    fn tile_candidates(&self, spec: &TileSpec) -> Result<Vec<Candidate>> {
        let tile = self.store.read_tile(spec)?;
        let m = self.store.manifest();
        let tau = self.params.seg_threshold as f32;
        let (w, h) = (tile.width, tile.height);
        let mut out = Vec::new();
        for j in 0..h {
            for i in 0..w {
                let v = tile.value(i, j);
                if v < tau {
                    continue;
                }
                let (gx, gy) = (tile.x0_px + i, tile.y0_px + j);
                // a maximum on a cut edge may belong to the neighbouring tile
                let cut = (i == 0 && gx > 0)
                    || (j == 0 && gy > 0)
                    || (i + 1 == w && gx + 1 < m.width_px)
                    || (j + 1 == h && gy + 1 < m.height_px);
                if cut || !is_local_max(&tile, i, j) {
                    continue;
                }
                let (sx, sy) = subpixel(&tile, i, j);
                out.push(Candidate {
                    id: format!(
                        "{}/z{}/t{}/{}_{}",
                        m.slide_id,
                        plane_key(spec.plane_offset_um),
                        spec.index,
                        gx,
                        gy
                    ),
                    pos: tile.pixel_to_um(i as f64 + sx, j as f64 + sy),
                    plane_offset_um: spec.plane_offset_um,
                    seg_score: v as f64,
                    source: CandidateSource::Raster,
                    tile_id: Some(spec.index),
                });
            }
        }
        Ok(out)
    }
}

/// Maximum over the 3x3 neighbourhood; plateaus resolve to their first pixel
/// in raster order.
fn is_local_max(t: &TileImage, i: usize, j: usize) -> bool {
    let v = t.data[j * t.width + i];
    for dj in -1i64..=1 {
        for di in -1i64..=1 {
            if di == 0 && dj == 0 {
                continue;
            }
            let (x, y) = (i as i64 + di, j as i64 + dj);
            if x < 0 || y < 0 || x >= t.width as i64 || y >= t.height as i64 {
                continue;
            }
            let u = t.data[y as usize * t.width + x as usize];
            let earlier = dj < 0 || (dj == 0 && di < 0);
            if u > v || (u == v && earlier) {
                return false;
            }
        }
    }
    true
}

fn subpixel(t: &TileImage, i: usize, j: usize) -> (f64, f64) {
    let at = |x: usize, y: usize| t.value(x, y) as f64;
    let fit = |a: f64, b: f64, c: f64| {
        let d = a - 2.0 * b + c;
        if d < 0.0 {
            (0.5 * (a - c) / d).clamp(-0.5, 0.5)
        } else {
            0.0
        }
    };
    let sx = if i > 0 && i + 1 < t.width {
        fit(at(i - 1, j), at(i, j), at(i + 1, j))
    } else {
        0.0
    };
    let sy = if j > 0 && j + 1 < t.height {
        fit(at(i, j - 1), at(i, j), at(i, j + 1))
    } else {
        0.0
    };
    (sx, sy)
}

impl Detector for RasterDetector {
    fn detect_plane(&self, plane_offset_um: f64) -> Result<Vec<Candidate>> {
        if self.store.manifest().plane(plane_offset_um).is_none() {
            return Err(Error::OutOfBounds(format!("no plane at {plane_offset_um} µm")));
        }
        let plan: Vec<TileSpec> = plan_tiles(self.store.manifest(), self.params.tile_size_px, self.params.halo_px)?
            .into_iter()
            .filter(|t| (t.plane_offset_um - plane_offset_um).abs() < 1e-9)
            .collect();
        let per_tile = crate::par::try_map(&plan, |spec| self.tile_candidates(spec))?;
        let all: Vec<Candidate> = per_tile.into_iter().flatten().collect();
        Ok(strip_halo_duplicates(&all, self.params.merge_radius_um))
    }

    fn score_patch(
        &self,
        pos: PointUm,
        plane_offset_um: f64,
        model_ids: &[String],
    ) -> Result<ScoreVector> {
        let plane = self.whole_plane(plane_offset_um)?;
        let (px, py) = (pos.x_um / plane.mpp, pos.y_um / plane.mpp);
        let (ix, iy) = (px.round() as i64, py.round() as i64);
        if ix < 0 || iy < 0 || ix >= plane.width as i64 || iy >= plane.height as i64 {
            return Err(Error::OutOfBounds(format!(
                "position ({:.2}, {:.2}) µm outside the slide",
                pos.x_um, pos.y_um
            )));
        }
        let mut peak = 0.0f32;
        for y in (iy - 1).max(0)..=(iy + 1).min(plane.height as i64 - 1) {
            for x in (ix - 1).max(0)..=(ix + 1).min(plane.width as i64 - 1) {
                peak = peak.max(plane.value(x as usize, y as usize));
            }
        }
        let scores = model_ids
            .iter()
            .map(|m| {
                let noise = if self.params.noise_sd > 0.0 {
                    let z: f64 = self
                        .seeds
                        .child(m)
                        .index(ix as u64)
                        .index(iy as u64)
                        .index(plane_key(plane_offset_um) as u64)
                        .rng()
                        .sample(StandardNormal);
                    z * self.params.noise_sd
                } else {
                    0.0
                };
                (peak as f64 + noise).clamp(0.0, 1.0)
            })
            .collect();
        ScoreVector::new(model_ids.to_vec(), scores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GrayImage;
    use crate::scanmodel::{presets, WorkingResolution};
    use crate::tilestore::{write_store, StoreManifest, TileFormat};

    fn blob_store(dir: &std::path::Path, centers: &[(f64, f64, f32)]) -> StoreHandle {
        let m = StoreManifest::new(
            "b",
            presets::p480dx_single(),
            WorkingResolution::default(),
            400,
            300,
            100,
            TileFormat::Raw16,
        )
        .unwrap();
        let img = GrayImage::from_fn(400, 300, 0.25, PointUm::default(), |i, j| {
            centers
                .iter()
                .map(|&(cx, cy, a)| {
                    let d2 = (i as f64 - cx).powi(2) + (j as f64 - cy).powi(2);
                    a * (-d2 / (2.0 * 36.0)).exp() as f32
                })
                .fold(0.0, f32::max)
        });
        write_store(dir, &m, &[img]).unwrap()
    }

    #[test]
    fn finds_blobs_across_tile_cuts_once() {
        let dir = tempfile::tempdir().unwrap();
        // the second blob sits right on a core boundary (stride 128 - 2*16 = 96)
        let store = blob_store(dir.path(), &[(40.0, 40.0, 0.9), (96.0, 150.0, 0.8), (300.0, 250.0, 0.3)]);
        let params = RasterParams {
            tile_size_px: 128,
            halo_px: 16,
            ..Default::default()
        };
        let d = RasterDetector::new(store, params, SeedTree::new(0));
        let c = d.detect_plane(0.0).unwrap();
        assert_eq!(c.len(), 2, "{c:?}");
        assert!(c.iter().any(|c| c.pos.dist(&PointUm::new(10.0, 10.0)) < 0.2));
        assert!(c.iter().any(|c| c.pos.dist(&PointUm::new(24.0, 37.5)) < 0.2));
        let v = d
            .score_patch(PointUm::new(10.0, 10.0), 0.0, &["a".to_string(), "b".to_string()])
            .unwrap();
        assert!((v.scores[0] - 0.9).abs() < 1e-4);
        assert_eq!(v.scores[0], v.scores[1]);
        assert!(d.score_patch(PointUm::new(-5.0, 10.0), 0.0, &["a".to_string()]).is_err());
        assert!(d.detect_plane(0.6).is_err());
    }
}
