//! Synthetic multi-plane slides and paired single-layer vs z-stack experiments.

mod texture;

pub use texture::{ProceduralTissue, WarpedSource};

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::detector::{default_model_ids, DefocusParams, Detector, SyntheticDetector};
use crate::error::{Error, Result};
use crate::evalstats::{
    match_detections, precision, sensitivity, LayerMode, Located, MatchResult, Metric, MetricSample,
};
use crate::fusion::{recalibrate, ForestHyper, Layout};
use crate::pipeline::{
    background_rows, calibration_set, candidate_recall, detect_and_merge, feature_rows, positives, predict_merged, rep_located,
    CalibrationParams,
};
use crate::raster::GrayImage;
use crate::scanmodel::{nearest_to_focus, PointUm, ScanProfile, WorkingResolution};
use crate::seeds::SeedTree;
use crate::tilestore::{write_store, StoreHandle, StoreManifest, TileFormat};
use crate::zmerge::DEFAULT_MERGE_RADIUS_UM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Mitosis,
    Imposter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimObject {
    pub id: usize,
    pub pos: PointUm,
    /// True depth of the object relative to nominal focus.
    pub depth_um: f64,
    /// In-focus response.
    pub amplitude: f64,
    pub kind: ObjectKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSlide {
    pub slide_id: String,
    pub width_um: f64,
    pub height_um: f64,
    pub objects: Vec<SimObject>,
}

impl SyntheticSlide {
    pub fn mitoses(&self) -> impl Iterator<Item = &SimObject> {
        self.objects.iter().filter(|o| o.kind == ObjectKind::Mitosis)
    }

    pub fn imposters(&self) -> impl Iterator<Item = &SimObject> {
        self.objects.iter().filter(|o| o.kind == ObjectKind::Imposter)
    }

    /// Mitoses as matchable ground truth (`{slide}/gt{id}`).
    pub fn ground_truth(&self) -> Vec<Located> {
        self.mitoses()
            .map(|o| Located {
                id: format!("{}/gt{}", self.slide_id, o.id),
                pos: o.pos,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub slide_w_um: f64,
    pub slide_h_um: f64,
    /// Mitoses per slide.
    pub n_mitoses: usize,
    /// Depths are uniform on `[-r, r]`.
    pub mitosis_depth_range_um: f64,
    pub min_spacing_um: f64,
    pub defocus: DefocusParams,
    pub plane_offsets_um: Vec<f64>,
    pub n_runs: usize,
    pub master_seed: u64,
    /// Test slides per run (one more slide per run is used for calibration).
    pub n_test_slides: usize,
    pub scanner: String,
    pub pipeline: String,
    pub model_ids: Vec<String>,
    pub forest: ForestHyper,
    pub merge_radius_um: f64,
    pub calibration: CalibrationParams,
    /// Also emit one sample per test slide (for slide-level bootstrap).
    pub slide_samples: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            slide_w_um: 4000.0,
            slide_h_um: 4000.0,
            n_mitoses: 150,
            mitosis_depth_range_um: 1.5,
            min_spacing_um: 10.0,
            defocus: DefocusParams::default(),
            plane_offsets_um: vec![-1.2, -0.6, 0.0, 0.6, 1.2],
            n_runs: 20,
            master_seed: 2024,
            n_test_slides: 4,
            scanner: "SIM".into(),
            pipeline: "defocus-rf".into(),
            model_ids: default_model_ids(),
            forest: ForestHyper::default(),
            merge_radius_um: DEFAULT_MERGE_RADIUS_UM,
            calibration: CalibrationParams::default(),
            slide_samples: false,
        }
    }
}

impl SimConfig {
    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.slide_w_um > 0.0 && self.slide_h_um > 0.0) {
            bad.push(format!(
                "slide dimensions must be positive (got {} x {})",
                self.slide_w_um, self.slide_h_um
            ));
        }
        if self.n_mitoses < 1 {
            bad.push("n_mitoses must be >= 1".into());
        }
        if !(self.mitosis_depth_range_um >= 0.0) {
            bad.push(format!(
                "mitosis_depth_range_um must be >= 0 (got {})",
                self.mitosis_depth_range_um
            ));
        }
        if !(self.min_spacing_um >= 0.0) {
            bad.push(format!("min_spacing_um must be >= 0 (got {})", self.min_spacing_um));
        }
        if let Err(e) = self.defocus.validate() {
            bad.push(format!("defocus: {e}"));
        }
        if let Err(e) = self.profile() {
            bad.push(format!("plane_offsets_um: {e}"));
        }
        if self.n_runs < 1 {
            bad.push("n_runs must be >= 1".into());
        }
        if self.n_test_slides < 1 {
            bad.push("n_test_slides must be >= 1".into());
        }
        if self.model_ids.is_empty() {
            bad.push("model_ids must not be empty".into());
        }
        if let Err(e) = self.forest.validate() {
            bad.push(format!("forest: {e}"));
        }
        if !(self.merge_radius_um > 0.0) {
            bad.push(format!("merge_radius_um must be > 0 (got {})", self.merge_radius_um));
        }
        if !(self.calibration.match_cutoff_um > 0.0) {
            bad.push("calibration.match_cutoff_um must be > 0".into());
        }
        if !(self.calibration.neg_ratio > 0.0) {
            bad.push("calibration.neg_ratio must be > 0".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Simulation(bad.join("; ")))
        }
    }

    /// Scan profile implied by the plane offsets (checks their spacing).
    pub fn profile(&self) -> Result<ScanProfile> {
        let offs = self.plane_offsets_um.clone();
        let spacing = (offs.len() > 1).then(|| offs[1] - offs[0]);
        ScanProfile::new(self.scanner.clone(), WorkingResolution::default().mpp(), offs, spacing, "simulated")
    }

    pub fn single_plane_um(&self) -> f64 {
        nearest_to_focus(&self.plane_offsets_um)
    }

    fn imposter_count(&self) -> usize {
        let area_mm2 = self.slide_w_um * self.slide_h_um / 1e6;
        (self.defocus.imposter_rate_per_mm2 * area_mm2).round() as usize
    }
}

/// Rejection sampling of positions with a minimum pairwise spacing.
fn place(n: usize, w: f64, h: f64, spacing: f64, rng: &mut impl Rng) -> Result<Vec<PointUm>> {
    const MAX_MISSES: usize = 2000;
    let cell = spacing.max(1e-9);
    let key = |p: PointUm| ((p.x_um / cell).floor() as i64, (p.y_um / cell).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<PointUm>> = HashMap::new();
    let mut out = Vec::with_capacity(n);
    let mut misses = 0;
    while out.len() < n {
        let p = PointUm::new(rng.random::<f64>() * w, rng.random::<f64>() * h);
        let (cx, cy) = key(p);
        let clash = spacing > 0.0
            && (-1..=1).any(|dx| {
                (-1..=1).any(|dy| {
                    grid.get(&(cx + dx, cy + dy))
                        .is_some_and(|v| v.iter().any(|q| q.dist(&p) < spacing))
                })
            });
        if clash {
            misses += 1;
            if misses >= MAX_MISSES {
                return Err(Error::Simulation(format!(
                    "spacing infeasible: placed {} of {n} objects {spacing} µm apart on {w} x {h} µm",
                    out.len()
                )));
            }
            continue;
        }
        misses = 0;
        grid.entry((cx, cy)).or_default().push(p);
        out.push(p);
    }
    Ok(out)
}

/// A slide with `n_mitoses` mitoses and the configured imposter density.
pub fn generate_slide(cfg: &SimConfig, seed: u64) -> Result<SyntheticSlide> {
    generate_named(cfg, seed, &format!("s{seed:016x}"))
}

pub fn generate_named(cfg: &SimConfig, seed: u64, slide_id: &str) -> Result<SyntheticSlide> {
    cfg.validate()?;
    let n_imp = cfg.imposter_count();
    let total = cfg.n_mitoses + n_imp;
    // hexagonal packing bound
    let capacity = cfg.slide_w_um * cfg.slide_h_um / (cfg.min_spacing_um.powi(2) * 3f64.sqrt() / 2.0).max(1e-12);
    if cfg.min_spacing_um > 0.0 && total as f64 > 0.5 * capacity {
        return Err(Error::Simulation(format!(
            "spacing infeasible: {total} objects {} µm apart do not fit on {} x {} µm",
            cfg.min_spacing_um, cfg.slide_w_um, cfg.slide_h_um
        )));
    }
    let tree = SeedTree::new(seed);
    let pos = place(total, cfg.slide_w_um, cfg.slide_h_um, cfg.min_spacing_um, &mut tree.child("positions").rng())?;
    let mut rng = tree.child("attributes").rng();
    let beta = Beta::new(2.0, 5.0).map_err(|e| Error::Simulation(e.to_string()))?;
    let r = cfg.mitosis_depth_range_um;
    let objects = pos
        .into_iter()
        .enumerate()
        .map(|(id, p)| {
            let depth_um = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
            let (kind, amplitude) = if id < cfg.n_mitoses {
                (ObjectKind::Mitosis, cfg.defocus.base_detectability)
            } else {
                (ObjectKind::Imposter, beta.sample(&mut rng) * cfg.defocus.imposter_scale)
            };
            SimObject {
                id,
                pos: p,
                depth_um,
                amplitude: amplitude.min(1.0),
                kind,
            }
        })
        .collect();
    Ok(SyntheticSlide {
        slide_id: slide_id.to_string(),
        width_um: cfg.slide_w_um,
        height_um: cfg.slide_h_um,
        objects,
    })
}

/// Rasterises the noise-free defocus responses as Gaussian blobs into a
/// plane-stack store at the working resolution.
pub fn render_store(
    slide: &SyntheticSlide,
    params: &DefocusParams,
    profile: &ScanProfile,
    blob_sigma_um: f64,
    dir: &Path,
) -> Result<StoreHandle> {
    let res = WorkingResolution::default();
    let mpp = res.mpp();
    let (w, h) = (
        (slide.width_um / mpp).ceil() as usize,
        (slide.height_um / mpp).ceil() as usize,
    );
    let manifest = StoreManifest::new(&slide.slide_id, profile.clone(), res, w, h, 512, TileFormat::Raw16)?;
    let reach = 4.0 * blob_sigma_um;
    let two_s2 = 2.0 * blob_sigma_um * blob_sigma_um;
    let offsets = profile.plane_offsets_um();
    let planes: Vec<GrayImage> = crate::par::map(offsets, |&z| {
        let mut img = GrayImage::new(w, h, mpp, PointUm::default());
        for o in &slide.objects {
            let a = o.amplitude * crate::detector::defocus_response(z - o.depth_um, params.sigma_um);
            let lo = |c: f64| ((c - reach) / mpp).ceil().max(0.0) as usize;
            let hi = |c: f64, n: usize| (((c + reach) / mpp).floor().max(-1.0) + 1.0).min(n as f64) as usize;
            for j in lo(o.pos.y_um)..hi(o.pos.y_um, h) {
                for i in lo(o.pos.x_um)..hi(o.pos.x_um, w) {
                    let d2 = o.pos.dist2(&PointUm::new(i as f64 * mpp, j as f64 * mpp));
                    if d2 <= reach * reach {
                        let px = &mut img.data[j * w + i];
                        *px = px.max((a * (-d2 / two_s2).exp()) as f32);
                    }
                }
            }
        }
        img
    });
    write_store(dir, &manifest, &planes)
}

/// Outcome of one layer mode in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeOutcome {
    pub layer_mode: LayerMode,
    pub pooled: MatchResult,
    pub per_slide: Vec<MatchResult>,
    /// Candidate-stage recall per test slide.
    pub candidate_recall: Vec<f64>,
    pub n_calibration_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run_index: u32,
    pub modes: Vec<ModeOutcome>,
}

/// Seeds of one run: slides, detector noise, forest and negative sampling.
pub fn run_seeds(cfg: &SimConfig, run_index: u32) -> SeedTree {
    SeedTree::new(cfg.master_seed).child("run").index(run_index as u64)
}

/// Slides of one run: index 0 is the calibration slide, the rest are test
/// slides. Ids are `r{run:02}-s{i}`.
pub fn run_slides(cfg: &SimConfig, run_index: u32) -> Result<Vec<SyntheticSlide>> {
    let seeds = run_seeds(cfg, run_index);
    (0..=cfg.n_test_slides)
        .map(|i| {
            let id = format!("r{run_index:02}-s{i}");
            generate_named(cfg, seeds.child("slide").index(i as u64).seed(), &id)
        })
        .collect()
}

/// One run: a calibration slide plus `n_test_slides` test slides, evaluated
/// in both layer modes with shared slides, detector noise and seeds.
pub fn run_once(cfg: &SimConfig, run_index: u32) -> Result<RunOutcome> {
    cfg.validate()?;
    let seeds = run_seeds(cfg, run_index);
    let slides = run_slides(cfg, run_index)?;
    let dets: Vec<SyntheticDetector> = slides
        .iter()
        .enumerate()
        .map(|(i, s)| {
            SyntheticDetector::new(s, cfg.defocus.clone(), seeds.child("detector").index(i as u64))
                .with_merge_radius(cfg.merge_radius_um)
        })
        .collect();
    let forest_seed = seeds.child("forest").seed();
    let neg_seed = seeds.child("negatives").seed();
    let cutoff = cfg.calibration.match_cutoff_um;

    let mut modes = Vec::new();
    for mode in [LayerMode::Single, LayerMode::Zstack] {
        let planes = match mode {
            LayerMode::Single => vec![cfg.single_plane_um()],
            LayerMode::Zstack => cfg.plane_offsets_um.clone(),
        };
        let layout = Arc::new(Layout::new(planes.clone(), cfg.model_ids.clone())?);
        let calib_det: &dyn Detector = &dets[0];
        let merged = detect_and_merge(calib_det, &planes, cfg.merge_radius_um)?;
        let rows = feature_rows(&merged, calib_det, &layout)?;
        let gts0 = slides[0].ground_truth();
        let mut set = calibration_set(&merged, &rows, &gts0, &layout, &cfg.calibration, neg_seed)?;
        if set.n_positive() == set.len() && !set.is_empty() {
            // no usable negatives among the candidates: sample background
            let mut avoid: Vec<PointUm> = gts0.iter().map(|g| g.pos).collect();
            avoid.extend(merged.iter().map(|m| m.rep.pos));
            let n = ((set.len() as f64 * cfg.calibration.neg_ratio).floor() as usize).max(1);
            let extent = (cfg.slide_w_um, cfg.slide_h_um);
            for row in background_rows(calib_det, &layout, &avoid, extent, n, cutoff, seeds.child("background").seed())? {
                set.push(row, false)?;
            }
        }
        let model = recalibrate(&cfg.forest, &set, forest_seed)?;

        let mut per_slide = Vec::new();
        let mut recall = Vec::new();
        for (slide, det) in slides.iter().zip(&dets).skip(1) {
            let merged = detect_and_merge(det, &planes, cfg.merge_radius_um)?;
            let rows = feature_rows(&merged, det, &layout)?;
            let preds = predict_merged(&model, &layout, &merged, &rows)?;
            let gts = slide.ground_truth();
            let reps: Vec<Located> = merged.iter().map(rep_located).collect();
            recall.push(candidate_recall(&reps, &gts, cutoff).unwrap_or(0.0));
            per_slide.push(match_detections(&positives(&preds), &gts, cutoff));
        }
        modes.push(ModeOutcome {
            layer_mode: mode,
            pooled: MatchResult::pooled(&per_slide, cutoff),
            per_slide,
            candidate_recall: recall,
            n_calibration_rows: set.len(),
        });
    }
    Ok(RunOutcome { run_index, modes })
}

/// Metric samples of one run (run-level, plus per-slide if configured).
pub fn run_samples(cfg: &SimConfig, outcome: &RunOutcome) -> Vec<MetricSample> {
    let mut out = Vec::new();
    let mut emit = |mode: LayerMode, m: &MatchResult, slide_id: Option<String>| {
        for (metric, v) in [(Metric::Sensitivity, sensitivity(m)), (Metric::Precision, precision(m))] {
            match v {
                Some(value) => out.push(MetricSample {
                    scanner: cfg.scanner.clone(),
                    pipeline: cfg.pipeline.clone(),
                    layer_mode: mode,
                    run_index: outcome.run_index,
                    metric,
                    value,
                    slide_id: slide_id.clone(),
                }),
                None => log::warn!(
                    "run {} {} {}: {} undefined, sample skipped",
                    outcome.run_index,
                    mode.as_str(),
                    slide_id.as_deref().unwrap_or("pooled"),
                    metric.as_str()
                ),
            }
        }
    };
    for mo in &outcome.modes {
        emit(mo.layer_mode, &mo.pooled, None);
        if cfg.slide_samples {
            for (i, m) in mo.per_slide.iter().enumerate() {
                emit(mo.layer_mode, m, Some(format!("r{:02}-s{}", outcome.run_index, i + 1)));
            }
        }
    }
    out
}

/// All runs, in run order.
pub fn run_experiment_outcomes(cfg: &SimConfig) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    crate::par::try_map_range(cfg.n_runs, |r| run_once(cfg, r as u32 + 1))
}

/// MetricSamples of both layer modes for every run.
pub fn run_experiment(cfg: &SimConfig) -> Result<Vec<MetricSample>> {
    Ok(run_experiment_outcomes(cfg)?
        .iter()
        .flat_map(|o| run_samples(cfg, o))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            slide_w_um: 1000.0,
            slide_h_um: 1000.0,
            n_mitoses: 60,
            n_runs: 2,
            n_test_slides: 2,
            forest: ForestHyper {
                n_trees: 20,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn slide_invariants() {
        let cfg = small();
        let s = generate_slide(&cfg, 1).unwrap();
        assert_eq!(s.mitoses().count(), 60);
        assert_eq!(s.imposters().count(), 20);
        for o in &s.objects {
            assert!(o.pos.x_um >= 0.0 && o.pos.x_um <= 1000.0 && o.pos.y_um >= 0.0 && o.pos.y_um <= 1000.0);
            assert!(o.depth_um.abs() <= 1.5);
        }
        for (i, a) in s.objects.iter().enumerate() {
            for b in &s.objects[i + 1..] {
                assert!(a.pos.dist(&b.pos) >= 10.0);
            }
        }
        assert_eq!(s, generate_slide(&cfg, 1).unwrap());
        assert_ne!(s.objects, generate_slide(&cfg, 2).unwrap().objects);
        let one = SimConfig { n_mitoses: 1, ..small() };
        assert_eq!(generate_slide(&one, 3).unwrap().ground_truth().len(), 1);
    }

    #[test]
    fn infeasible_spacing_errors() {
        let cfg = SimConfig {
            slide_w_um: 50.0,
            slide_h_um: 50.0,
            n_mitoses: 100,
            ..small()
        };
        let e = generate_slide(&cfg, 0).unwrap_err().to_string();
        assert!(e.contains("spacing infeasible"), "{e}");
    }

    #[test]
    fn corpus_density_fits() {
        let cfg = SimConfig {
            slide_w_um: 10_000.0,
            slide_h_um: 10_000.0,
            n_mitoses: 289,
            ..Default::default()
        };
        assert_eq!(generate_slide(&cfg, 7).unwrap().mitoses().count(), 289);
    }

    #[test]
    fn validation_lists_everything() {
        let cfg = SimConfig {
            slide_w_um: -1.0,
            n_mitoses: 0,
            plane_offsets_um: vec![0.6, 0.0],
            ..Default::default()
        };
        let e = cfg.validate().unwrap_err().to_string();
        assert!(e.contains("slide dimensions") && e.contains("n_mitoses") && e.contains("plane_offsets_um"), "{e}");
    }

    #[test]
    fn experiment_is_reproducible() {
        let cfg = small();
        let a = run_experiment(&cfg).unwrap();
        assert_eq!(a.len(), 2 * 2 * 2);
        assert_eq!(a, run_experiment(&cfg).unwrap());
    }

    #[test]
    fn single_plane_stack_reduces_to_single_layer() {
        let cfg = SimConfig {
            plane_offsets_um: vec![0.0],
            n_runs: 1,
            ..small()
        };
        let o = run_once(&cfg, 1).unwrap();
        assert_eq!(o.modes[0].pooled, o.modes[1].pooled);
        assert_eq!(o.modes[0].per_slide, o.modes[1].per_slide);
    }

    #[test]
    fn stack_candidate_recall_dominates() {
        let o = run_once(&small(), 1).unwrap();
        for (s, z) in o.modes[0].candidate_recall.iter().zip(&o.modes[1].candidate_recall) {
            assert!(z >= s);
        }
    }

    #[test]
    fn rendered_store_has_blobs() {
        let cfg = SimConfig {
            slide_w_um: 60.0,
            slide_h_um: 40.0,
            n_mitoses: 2,
            defocus: DefocusParams {
                imposter_rate_per_mm2: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let slide = generate_slide(&cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let store = render_store(&slide, &cfg.defocus, &cfg.profile().unwrap(), 1.5, dir.path()).unwrap();
        assert_eq!(store.manifest().plane_offsets_um().len(), 5);
        let o = &slide.objects[0];
        let best = cfg
            .plane_offsets_um
            .iter()
            .copied()
            .min_by(|a, b| (a - o.depth_um).abs().total_cmp(&(b - o.depth_um).abs()))
            .unwrap();
        let img = store.read_region(best, 0, 0, 240, 160).unwrap();
        let (i, j) = ((o.pos.x_um / 0.25) as usize, (o.pos.y_um / 0.25) as usize);
        assert!(img.value(i.min(239), j.min(159)) > 0.3);
    }
}
