//! Multi-plane score fusion.
//!
//! Every merged candidate is re-scored on every plane by every verification
//! model; the resulting plane-major `P x M` vector is classified by a random
//! forest refitted per (scanner, layer mode) on one calibration slide.

mod forest;

pub use forest::{
    predict_proba, predict_rows, recalibrate, recalibrate_threshold, train_forest, ForestHyper, ForestModel,
    tree_bootstrap_rows, RecalibrateMode, TreeNode, FOREST_FORMAT, FOREST_VERSION,
};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::zmerge::MergedCandidate;

/// Index meaning of a feature vector: `values[p * M + m]` is model `m` on plane `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub plane_offsets_um: Vec<f64>,
    pub model_ids: Vec<String>,
}

impl Layout {
    pub fn new(plane_offsets_um: Vec<f64>, model_ids: Vec<String>) -> Result<Self> {
        if plane_offsets_um.is_empty() || model_ids.is_empty() {
            return Err(Error::Contract("layout needs at least one plane and one model".into()));
        }
        Ok(Layout {
            plane_offsets_um,
            model_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.plane_offsets_um.len() * self.model_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, plane: usize, model: usize) -> usize {
        plane * self.model_ids.len() + model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub layout: Arc<Layout>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Contract(format!(
                "feature vector has {} values, layout expects {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(FeatureVector { values, layout })
    }
}

/// Training rows sharing one layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub layout: Layout,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
}

impl LabeledSet {
    pub fn new(layout: Layout) -> Self {
        LabeledSet {
            layout,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, values: Vec<f64>, label: bool) -> Result<()> {
        if values.len() != self.layout.len() {
            return Err(Error::Contract(format!(
                "row has {} values, layout expects {}",
                values.len(),
                self.layout.len()
            )));
        }
        self.features.push(values);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

/// Scores the cluster representative on every plane with every model.
pub fn assemble_features(
    mc: &MergedCandidate,
    detector: &dyn Detector,
    layout: &Arc<Layout>,
) -> Result<FeatureVector> {
    let mut values = Vec::with_capacity(layout.len());
    for &plane in &layout.plane_offsets_um {
        let sv = detector.score_patch(mc.rep.pos, plane, &layout.model_ids)?;
        if sv.scores.len() != layout.model_ids.len() {
            return Err(Error::Contract(format!(
                "detector returned {} scores for {} models",
                sv.scores.len(),
                layout.model_ids.len()
            )));
        }
        values.extend(sv.scores);
    }
    FeatureVector::new(values, Arc::clone(layout))
}
