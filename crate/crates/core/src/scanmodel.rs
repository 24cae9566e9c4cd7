//! Scan profiles, physical coordinates and unit-safe rescaling.
//!
//! Geometry crosses module boundaries in micrometres only; pixels show up at
//! the tile store and detector edges, converted through a [`WorkingResolution`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for the equal-spacing check on plane offsets.
pub const PLANE_SPACING_TOL_UM: f64 = 1e-9;

/// Default working resolution of the pipeline (µm per pixel).
pub const DEFAULT_WORKING_MPP: f64 = 0.25;

/// Scanner settings for one scan mode (one row of a scan-settings table).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScanProfile", into = "RawScanProfile")]
pub struct ScanProfile {
    scanner_id: String,
    native_mpp: f64,
    plane_offsets_um: Vec<f64>,
    interplane_um: Option<f64>,
    objective: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawScanProfile {
    scanner_id: String,
    native_mpp: f64,
    plane_offsets_um: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    interplane_um: Option<f64>,
    #[serde(default)]
    objective: String,
}

impl TryFrom<RawScanProfile> for ScanProfile {
    type Error = Error;

    fn try_from(r: RawScanProfile) -> Result<Self> {
        ScanProfile::new(
            r.scanner_id,
            r.native_mpp,
            r.plane_offsets_um,
            r.interplane_um,
            r.objective,
        )
    }
}

impl From<ScanProfile> for RawScanProfile {
    fn from(p: ScanProfile) -> Self {
        RawScanProfile {
            scanner_id: p.scanner_id,
            native_mpp: p.native_mpp,
            plane_offsets_um: p.plane_offsets_um,
            interplane_um: p.interplane_um,
            objective: p.objective,
        }
    }
}

impl ScanProfile {
    pub fn new(
        scanner_id: impl Into<String>,
        native_mpp: f64,
        plane_offsets_um: Vec<f64>,
        interplane_um: Option<f64>,
        objective: impl Into<String>,
    ) -> Result<Self> {
        let p = ScanProfile {
            scanner_id: scanner_id.into(),
            native_mpp,
            plane_offsets_um,
            interplane_um,
            objective: objective.into(),
        };
        p.validate()?;
        Ok(p)
    }

    /// Evenly spaced planes centred on the nominal focus.
    pub fn centered(
        scanner_id: impl Into<String>,
        native_mpp: f64,
        n_planes: usize,
        interplane_um: f64,
        objective: impl Into<String>,
    ) -> Result<Self> {
        if n_planes == 0 {
            return Err(Error::InvalidProfile("profile needs at least one plane".into()));
        }
        let half = (n_planes as f64 - 1.0) / 2.0;
        let offsets = (0..n_planes)
            .map(|i| (i as f64 - half) * interplane_um)
            .collect();
        let spacing = (n_planes > 1).then_some(interplane_um);
        ScanProfile::new(scanner_id, native_mpp, offsets, spacing, objective)
    }

    fn validate(&self) -> Result<()> {
        if !(self.native_mpp.is_finite() && self.native_mpp > 0.0) {
            return Err(Error::InvalidProfile(format!(
                "native_mpp must be positive, got {}",
                self.native_mpp
            )));
        }
        let offs = &self.plane_offsets_um;
        if offs.is_empty() {
            return Err(Error::InvalidProfile("profile needs at least one plane".into()));
        }
        if offs.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidProfile("plane offsets must be finite".into()));
        }
        if offs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidProfile(format!(
                "plane offsets must be strictly increasing: {offs:?}"
            )));
        }
        match (offs.len(), self.interplane_um) {
            (1, None) => {}
            (1, Some(d)) => {
                return Err(Error::InvalidProfile(format!(
                    "single-plane profile cannot declare an interplane distance ({d})"
                )))
            }
            (_, None) => {
                return Err(Error::InvalidProfile(
                    "multi-plane profile needs interplane_um".into(),
                ))
            }
            (_, Some(d)) => {
                if let Some(w) = offs
                    .windows(2)
                    .find(|w| ((w[1] - w[0]) - d).abs() > PLANE_SPACING_TOL_UM)
                {
                    return Err(Error::InvalidProfile(format!(
                        "plane spacing {} differs from interplane_um {d}",
                        w[1] - w[0]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn scanner_id(&self) -> &str {
        &self.scanner_id
    }

    pub fn native_mpp(&self) -> f64 {
        self.native_mpp
    }

    pub fn plane_offsets_um(&self) -> &[f64] {
        &self.plane_offsets_um
    }

    pub fn interplane_um(&self) -> Option<f64> {
        self.interplane_um
    }

    pub fn objective(&self) -> &str {
        &self.objective
    }

    pub fn n_planes(&self) -> usize {
        self.plane_offsets_um.len()
    }

    pub fn is_single_layer(&self) -> bool {
        self.plane_offsets_um.len() == 1
    }

    /// The plane whose offset is closest to nominal focus (ties go to the lower offset).
    pub fn focus_plane_um(&self) -> f64 {
        nearest_to_focus(&self.plane_offsets_um)
    }
}

pub fn nearest_to_focus(offsets: &[f64]) -> f64 {
    offsets
        .iter()
        .copied()
        .min_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)))
        .unwrap_or(0.0)
}

/// Scanner presets (single-layer and five-plane z-stack settings).
pub mod presets {
    use super::ScanProfile;

    fn build(id: &str, mpp: f64, planes: usize, spacing: f64, objective: &str) -> ScanProfile {
        ScanProfile::centered(id, mpp, planes, spacing, objective).expect("preset profile is valid")
    }

    pub fn p480dx_single() -> ScanProfile {
        build("P480DX", 0.121, 1, 0.0, "41x, WI")
    }

    pub fn p480dx_zstack() -> ScanProfile {
        build("P480DX", 0.121, 5, 0.6, "41x, WI")
    }

    pub fn gt450_single() -> ScanProfile {
        build("GT 450", 0.263, 1, 0.0, "40x, Air")
    }

    pub fn gt450_zstack() -> ScanProfile {
        build("GT 450", 0.263, 5, 0.75, "40x, Air")
    }

    pub fn axioscan7_single() -> ScanProfile {
        build("AxioScan 7", 0.086, 1, 0.0, "40x, Air")
    }

    pub fn axioscan7_zstack() -> ScanProfile {
        build("AxioScan 7", 0.086, 5, 0.6, "40x, Air")
    }

    pub fn all() -> Vec<ScanProfile> {
        vec![
            p480dx_single(),
            p480dx_zstack(),
            gt450_single(),
            gt450_zstack(),
            axioscan7_single(),
            axioscan7_zstack(),
        ]
    }
}

/// A point on the slide plane, in µm from the slide origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PointUm {
    pub x_um: f64,
    pub y_um: f64,
}

impl PointUm {
    pub const fn new(x_um: f64, y_um: f64) -> Self {
        PointUm { x_um, y_um }
    }

    pub fn is_finite(&self) -> bool {
        self.x_um.is_finite() && self.y_um.is_finite()
    }

    pub fn dist(&self, other: &PointUm) -> f64 {
        self.dist2(other).sqrt()
    }

    pub fn dist2(&self, other: &PointUm) -> f64 {
        let dx = self.x_um - other.x_um;
        let dy = self.y_um - other.y_um;
        dx * dx + dy * dy
    }

    /// Clamps into `[0, w] x [0, h]`.
    pub fn clamped(&self, w_um: f64, h_um: f64) -> PointUm {
        PointUm::new(self.x_um.clamp(0.0, w_um), self.y_um.clamp(0.0, h_um))
    }
}

/// A real-valued pixel position at some resolution.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct WorkingResolution {
    mpp: f64,
}

impl WorkingResolution {
    pub fn new(mpp: f64) -> Result<Self> {
        if mpp.is_finite() && mpp > 0.0 {
            Ok(WorkingResolution { mpp })
        } else {
            Err(Error::InvalidGeometry(format!(
                "resolution must be positive, got {mpp} mpp"
            )))
        }
    }

    pub fn mpp(&self) -> f64 {
        self.mpp
    }
}

impl Default for WorkingResolution {
    fn default() -> Self {
        WorkingResolution {
            mpp: DEFAULT_WORKING_MPP,
        }
    }
}

impl TryFrom<f64> for WorkingResolution {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        WorkingResolution::new(v)
    }
}

impl From<WorkingResolution> for f64 {
    fn from(r: WorkingResolution) -> f64 {
        r.mpp
    }
}

pub fn um_to_px(p: PointUm, res: WorkingResolution) -> Result<PixelPoint> {
    if !p.is_finite() {
        return Err(Error::InvalidGeometry(format!("non-finite point {p:?}")));
    }
    Ok(PixelPoint {
        x: p.x_um / res.mpp,
        y: p.y_um / res.mpp,
    })
}

pub fn px_to_um(p: PixelPoint, res: WorkingResolution) -> Result<PointUm> {
    if !(p.x.is_finite() && p.y.is_finite()) {
        return Err(Error::InvalidGeometry(format!("non-finite pixel {p:?}")));
    }
    Ok(PointUm::new(p.x * res.mpp, p.y * res.mpp))
}

/// Multiplier taking native-resolution pixel coordinates to working pixels.
pub fn rescale_factor(from: &ScanProfile, to: WorkingResolution) -> f64 {
    from.native_mpp / to.mpp
}
