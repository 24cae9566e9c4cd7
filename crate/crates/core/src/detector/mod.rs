//! Candidate generation and patch scoring.
//!
//! A [`Detector`] is bound to one slide and answers two questions: which
//! candidates does the stage-1 model propose on a given plane, and what does
//! each verification model say about a position on a given plane. Three
//! implementations share the interface:
//!
//! * [`ExternalScores`]: precomputed score-exchange JSONL from models run out of process.
//! * [`RasterDetector`]: local-maximum blob detection on a plane-stack store.
//! * [`SyntheticDetector`]: the analytic defocus model over a simulated slide.

mod external;
mod raster;
mod synthetic;

pub use external::{read_score_records, write_score_records, ExternalScores, ScoreRecord};
pub use raster::{RasterDetector, RasterParams};
pub use synthetic::SyntheticDetector;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scanmodel::PointUm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateSource {
    External,
    Synthetic,
    Raster,
}

/// A proposed mitosis location on one plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub pos: PointUm,
    pub plane_offset_um: f64,
    pub seg_score: f64,
    pub source: CandidateSource,
    /// Tile that produced the candidate, when detection ran tile by tile.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile_id: Option<usize>,
}

/// Verification scores for one position and plane, one per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub model_ids: Vec<String>,
    pub scores: Vec<f64>,
}

impl ScoreVector {
    pub fn new(model_ids: Vec<String>, scores: Vec<f64>) -> Result<Self> {
        if model_ids.len() != scores.len() {
            return Err(Error::Contract(format!(
                "{} model ids but {} scores",
                model_ids.len(),
                scores.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Contract(format!("score {s} outside [0, 1]")));
        }
        Ok(ScoreVector { model_ids, scores })
    }
}

/// Parameters of the analytic defocus model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefocusParams {
    /// Defocus scale of the Gaussian response (µm).
    pub sigma_um: f64,
    /// In-focus response of a mitosis.
    pub base_detectability: f64,
    /// Stage-1 threshold on the segmentation score.
    pub seg_threshold: f64,
    /// Standard deviation of additive score noise.
    pub noise_sd: f64,
    /// Look-alike (non-mitotic) structures per mm².
    pub imposter_rate_per_mm2: f64,
    /// Imposter in-focus response is `Beta(2, 5) * imposter_scale`.
    pub imposter_scale: f64,
    /// Per-plane localisation jitter radius (µm).
    pub jitter_um: f64,
    /// Each verification model sees an imposter at a fixed fraction of its
    /// response drawn from `U(imposter_gain_min, 1)`; 1 disables the effect.
    pub imposter_gain_min: f64,
}

impl Default for DefocusParams {
    fn default() -> Self {
        DefocusParams {
            sigma_um: 0.6,
            base_detectability: 0.9,
            seg_threshold: 0.5,
            noise_sd: 0.05,
            imposter_rate_per_mm2: 20.0,
            imposter_scale: 1.0,
            jitter_um: 0.3,
            imposter_gain_min: 0.0,
        }
    }
}

impl DefocusParams {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.sigma_um > 0.0) {
            bad.push(format!("sigma_um must be > 0 (got {})", self.sigma_um));
        }
        if !(self.base_detectability > 0.0 && self.base_detectability <= 1.0) {
            bad.push(format!(
                "base_detectability must be in (0, 1] (got {})",
                self.base_detectability
            ));
        }
        if !(self.seg_threshold > 0.0 && self.seg_threshold < 1.0) {
            bad.push(format!(
                "seg_threshold must be in (0, 1) (got {})",
                self.seg_threshold
            ));
        }
        if !(self.noise_sd >= 0.0) {
            bad.push(format!("noise_sd must be >= 0 (got {})", self.noise_sd));
        }
        if !(self.imposter_rate_per_mm2 >= 0.0) {
            bad.push(format!(
                "imposter_rate_per_mm2 must be >= 0 (got {})",
                self.imposter_rate_per_mm2
            ));
        }
        if !(self.imposter_scale >= 0.0) {
            bad.push(format!("imposter_scale must be >= 0 (got {})", self.imposter_scale));
        }
        if !(self.jitter_um >= 0.0) {
            bad.push(format!("jitter_um must be >= 0 (got {})", self.jitter_um));
        }
        if !(0.0..=1.0).contains(&self.imposter_gain_min) {
            bad.push(format!(
                "imposter_gain_min must be in [0, 1] (got {})",
                self.imposter_gain_min
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Contract(bad.join("; ")))
        }
    }
}

/// Gaussian defocus response `exp(-dz^2 / (2 sigma^2))`.
pub fn defocus_response(dz_um: f64, sigma_um: f64) -> f64 {
    (-(dz_um * dz_um) / (2.0 * sigma_um * sigma_um)).exp()
}

/// Default verification model ids (four patch classifiers).
pub fn default_model_ids() -> Vec<String> {
    ["cnn-a", "cnn-b", "cnn-c", "cnn-d"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

pub trait Detector: Sync {
    /// Stage-1 candidates on one plane, deduplicated within the plane.
    fn detect_plane(&self, plane_offset_um: f64) -> Result<Vec<Candidate>>;

    /// One verification score per requested model at `pos` on `plane_offset_um`.
    fn score_patch(
        &self,
        pos: PointUm,
        plane_offset_um: f64,
        model_ids: &[String],
    ) -> Result<ScoreVector>;
}

/// Integer key for a plane offset (nanometres), used in hashes and seeds.
pub(crate) fn plane_key(z_um: f64) -> i64 {
    (z_um * 1000.0).round() as i64
}
