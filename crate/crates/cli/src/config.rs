//! Run configuration: TOML on disk, defaults from the owning modules,
//! command-line overrides applied last.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use zmitosis::detector::{default_model_ids, DefocusParams, RasterParams};
use zmitosis::evalstats::{LayerMode, ReportOptions, ResampleUnit, DEFAULT_MATCH_CUTOFF_UM, DEFAULT_N_BOOT};
use zmitosis::fusion::ForestHyper;
use zmitosis::pipeline::CalibrationParams;
use zmitosis::registration::{GlobalParams, LocalParams};
use zmitosis::seeds::SeedTree;
use zmitosis::simkit::SimConfig;
use zmitosis::zmerge::DEFAULT_MERGE_RADIUS_UM;

use crate::errors::CliError;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "ZMITOSIS_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    #[default]
    Synthetic,
    Raster,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    /// Position tolerance when looking up external scores (1 px).
    pub lookup_tol_um: f64,
    pub defocus: DefocusParams,
    pub raster: RasterParams,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            kind: DetectorKind::Synthetic,
            lookup_tol_um: 0.25,
            defocus: DefocusParams::default(),
            raster: RasterParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub neg_ratio: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            neg_ratio: CalibrationParams::default().neg_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub n_boot: usize,
    pub alpha: f64,
    pub resample_unit: ResampleUnit,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            n_boot: DEFAULT_N_BOOT,
            alpha: 0.05,
            resample_unit: ResampleUnit::Runs,
        }
    }
}

/// Slide geometry of the simulator. Seeds, run count, detector, forest and
/// merge settings come from the top level of the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub slide_w_um: f64,
    pub slide_h_um: f64,
    pub n_mitoses: usize,
    pub mitosis_depth_range_um: f64,
    pub min_spacing_um: f64,
    pub plane_offsets_um: Vec<f64>,
    pub n_test_slides: usize,
    pub scanner: String,
    pub pipeline: String,
    pub slide_samples: bool,
    /// `simulate` also rasterises the slides of run 1 into tile stores.
    pub render_stores: bool,
    pub blob_sigma_um: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let d = SimConfig::default();
        SimulationSection {
            slide_w_um: d.slide_w_um,
            slide_h_um: d.slide_h_um,
            n_mitoses: d.n_mitoses,
            mitosis_depth_range_um: d.mitosis_depth_range_um,
            min_spacing_um: d.min_spacing_um,
            plane_offsets_um: d.plane_offsets_um,
            n_test_slides: d.n_test_slides,
            scanner: d.scanner,
            pipeline: d.pipeline,
            slide_samples: d.slide_samples,
            render_stores: false,
            blob_sigma_um: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreRole {
    Calibration,
    Test,
}

/// One scanned slide of a (scanner, pipeline, layer mode) condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreEntry {
    pub scanner: String,
    pub pipeline: String,
    pub layer_mode: LayerMode,
    pub role: StoreRole,
    /// Tile store directory (raster detector).
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Score-exchange file (external detector).
    #[serde(default)]
    pub scores: Option<PathBuf>,
    /// Ground-truth CSV in this scan's coordinates.
    pub annotations: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationSection {
    /// Thumbnail resolution for the global stage.
    pub thumb_mpp: f64,
    pub supersample: usize,
    pub refine: bool,
    pub global: GlobalParams,
    pub local: LocalParams,
}

impl Default for RegistrationSection {
    fn default() -> Self {
        RegistrationSection {
            thumb_mpp: 16.0,
            supersample: 4,
            refine: true,
            global: GlobalParams::default(),
            local: LocalParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub n_runs: usize,
    /// Not part of the hashed config: outputs do not depend on where they go.
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
    pub merge_radius_um: f64,
    pub match_cutoff_um: f64,
    pub model_ids: Vec<String>,
    pub detector: DetectorConfig,
    pub forest: ForestHyper,
    pub calibration: CalibrationSection,
    pub report: ReportSection,
    pub simulation: SimulationSection,
    pub registration: RegistrationSection,
    /// Real-data conditions; when empty, `run-all` runs the simulator.
    pub stores: Vec<StoreEntry>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: 2024,
            n_runs: 20,
            output_dir: PathBuf::from("zmitosis-out"),
            merge_radius_um: DEFAULT_MERGE_RADIUS_UM,
            match_cutoff_um: DEFAULT_MATCH_CUTOFF_UM,
            model_ids: default_model_ids(),
            detector: DetectorConfig::default(),
            forest: ForestHyper::default(),
            calibration: CalibrationSection::default(),
            report: ReportSection::default(),
            simulation: SimulationSection::default(),
            registration: RegistrationSection::default(),
            stores: Vec::new(),
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub master_seed: Option<u64>,
    pub n_runs: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub n_boot: Option<usize>,
}

impl RunConfig {
    /// Reads a TOML config, or the `config` object of a run manifest.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            let inner = v.get("config").cloned().unwrap_or(v);
            serde_json::from_value(inner).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.master_seed {
            self.master_seed = s;
        }
        if let Some(n) = o.n_runs {
            self.n_runs = n;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(n) = o.n_boot {
            self.report.n_boot = n;
        }
    }

    /// Every violation, each prefixed with the offending key.
    pub fn violations(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.n_runs < 1 {
            bad.push("n_runs: must be >= 1".into());
        }
        if !(self.merge_radius_um > 0.0) {
            bad.push(format!("merge_radius_um: must be > 0 (got {})", self.merge_radius_um));
        }
        if !(self.match_cutoff_um > 0.0) {
            bad.push(format!("match_cutoff_um: must be > 0 (got {})", self.match_cutoff_um));
        }
        if self.model_ids.is_empty() {
            bad.push("model_ids: must not be empty".into());
        }
        if !(self.detector.lookup_tol_um > 0.0) {
            bad.push("detector.lookup_tol_um: must be > 0".into());
        }
        if let Err(e) = self.detector.defocus.validate() {
            bad.push(format!("detector.defocus: {e}"));
        }
        if let Err(e) = self.forest.validate() {
            bad.push(format!("forest: {e}"));
        }
        if !(self.calibration.neg_ratio > 0.0) {
            bad.push("calibration.neg_ratio: must be > 0".into());
        }
        if self.report.n_boot < 1 {
            bad.push("report.n_boot: must be >= 1".into());
        }
        if !(self.report.alpha > 0.0 && self.report.alpha < 1.0) {
            bad.push(format!("report.alpha: must be in (0, 1) (got {})", self.report.alpha));
        }
        if !(self.registration.thumb_mpp > 0.0) {
            bad.push("registration.thumb_mpp: must be > 0".into());
        }
        if self.stores.is_empty() {
            if let Err(e) = self.sim_config().validate() {
                bad.push(format!("simulation: {e}"));
            }
        }
        if !self.stores.is_empty() && self.detector.kind == DetectorKind::Synthetic {
            bad.push("detector.kind: stores need \"raster\" or \"external\"".into());
        }
        for (i, s) in self.stores.iter().enumerate() {
            let key = |f: &str| format!("stores[{i}].{f}");
            if let Some(p) = s.path.as_ref().filter(|p| !p.is_dir()) {
                bad.push(format!("{}: {} does not exist", key("path"), p.display()));
            }
            if let Some(p) = s.scores.as_ref().filter(|p| !p.is_file()) {
                bad.push(format!("{}: {} does not exist", key("scores"), p.display()));
            }
            match self.detector.kind {
                DetectorKind::Raster if s.path.is_none() => {
                    bad.push(format!("{}: required by the raster detector", key("path")))
                }
                DetectorKind::External if s.scores.is_none() => {
                    bad.push(format!("{}: required by the external detector", key("scores")))
                }
                _ => {}
            }
            if !s.annotations.is_file() {
                bad.push(format!("{}: {} does not exist", key("annotations"), s.annotations.display()));
            }
        }
        for (cond, roles) in self.conditions() {
            let calib = roles.iter().filter(|&&(r, _)| r == StoreRole::Calibration).count();
            let tests = roles.len() - calib;
            if calib != 1 || tests == 0 {
                bad.push(format!(
                    "stores: condition {}/{}/{} needs exactly one calibration store and at least one test store \
                     (has {calib} and {tests})",
                    cond.0,
                    cond.1,
                    cond.2.as_str()
                ));
            }
        }
        bad
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = self.violations();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::validation(bad))
        }
    }

    /// Store indices grouped by (scanner, pipeline, layer mode).
    pub fn conditions(&self) -> BTreeMap<(String, String, LayerMode), Vec<(StoreRole, usize)>> {
        let mut out: BTreeMap<(String, String, LayerMode), Vec<(StoreRole, usize)>> = BTreeMap::new();
        for (i, s) in self.stores.iter().enumerate() {
            out.entry((s.scanner.clone(), s.pipeline.clone(), s.layer_mode))
                .or_default()
                .push((s.role, i));
        }
        out
    }

    pub fn calibration_params(&self) -> CalibrationParams {
        CalibrationParams {
            match_cutoff_um: self.match_cutoff_um,
            neg_ratio: self.calibration.neg_ratio,
        }
    }

    /// Simulator settings implied by this config.
    pub fn sim_config(&self) -> SimConfig {
        let s = &self.simulation;
        SimConfig {
            slide_w_um: s.slide_w_um,
            slide_h_um: s.slide_h_um,
            n_mitoses: s.n_mitoses,
            mitosis_depth_range_um: s.mitosis_depth_range_um,
            min_spacing_um: s.min_spacing_um,
            defocus: self.detector.defocus.clone(),
            plane_offsets_um: s.plane_offsets_um.clone(),
            n_runs: self.n_runs,
            master_seed: self.master_seed,
            n_test_slides: s.n_test_slides,
            scanner: s.scanner.clone(),
            pipeline: s.pipeline.clone(),
            model_ids: self.model_ids.clone(),
            forest: self.forest.clone(),
            merge_radius_um: self.merge_radius_um,
            calibration: self.calibration_params(),
            slide_samples: s.slide_samples,
        }
    }

    pub fn report_options(&self) -> ReportOptions {
        ReportOptions {
            n_boot: self.report.n_boot,
            seed: SeedTree::new(self.master_seed).child("report").seed(),
            alpha: self.report.alpha,
            unit: self.report.resample_unit,
            match_cutoff_um: self.match_cutoff_um,
        }
    }

    /// Canonical JSON of the effective config (stable key order).
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serialises");
        serde_json::to_string(&v).expect("config serialises")
    }

    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_json().as_bytes());
        format!("{:x}", h.finalize())
    }
}
