//! Two-stage annotation transfer: a global similarity transform estimated
//! on thumbnails, then per-point NCC refinement on full-resolution patches.

mod global;
mod local;

pub use global::{estimate_global, thumbnail, GlobalEstimate, GlobalParams};
pub use local::{LocalParams, LocalRefiner};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scanmodel::PointUm;

/// `q = scale * R(rotation) * p + translation`, all in µm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalTransform {
    pub scale: f64,
    pub rotation_deg: f64,
    pub translation_um: (f64, f64),
}

impl Default for GlobalTransform {
    fn default() -> Self {
        GlobalTransform::identity()
    }
}

impl GlobalTransform {
    pub fn identity() -> Self {
        GlobalTransform {
            scale: 1.0,
            rotation_deg: 0.0,
            translation_um: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(0.9..=1.1).contains(&self.scale) {
            bad.push(format!("scale {} outside [0.9, 1.1]", self.scale));
        }
        if !(self.rotation_deg.abs() <= 5.0) {
            bad.push(format!("rotation {}° exceeds 5°", self.rotation_deg));
        }
        if !(self.translation_um.0.is_finite() && self.translation_um.1.is_finite()) {
            bad.push("translation must be finite".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Registration(bad.join("; ")))
        }
    }

    pub fn apply(&self, p: PointUm) -> PointUm {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        PointUm::new(
            self.scale * (c * p.x_um - s * p.y_um) + self.translation_um.0,
            self.scale * (s * p.x_um + c * p.y_um) + self.translation_um.1,
        )
    }

    pub fn inverse_apply(&self, q: PointUm) -> PointUm {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (x, y) = (q.x_um - self.translation_um.0, q.y_um - self.translation_um.1);
        PointUm::new((c * x + s * y) / self.scale, (-s * x + c * y) / self.scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferStatus {
    Refined,
    GlobalOnly,
    Failed,
}

impl TransferStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransferStatus::Refined => "refined",
            TransferStatus::GlobalOnly => "global_only",
            TransferStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferredAnnotation {
    pub source: PointUm,
    /// Absent when the transfer failed.
    pub mapped: Option<PointUm>,
    pub local_shift_um: (f64, f64),
    pub ncc_peak: f64,
    pub status: TransferStatus,
}

/// Maps every point through `global`, then refines it locally when a
/// refiner is given. Output order follows input order; failures are
/// reported per point.
pub fn transfer_annotations(
    points: &[PointUm],
    global: &GlobalTransform,
    refiner: Option<&LocalRefiner>,
) -> Vec<TransferredAnnotation> {
    crate::par::map(points, |&p| match refiner {
        Some(r) => r.refine(p, global),
        None if p.is_finite() => TransferredAnnotation {
            source: p,
            mapped: Some(global.apply(p)),
            local_shift_um: (0.0, 0.0),
            ncc_peak: 0.0,
            status: TransferStatus::GlobalOnly,
        },
        None => TransferredAnnotation {
            source: p,
            mapped: None,
            local_shift_um: (0.0, 0.0),
            ncc_peak: 0.0,
            status: TransferStatus::Failed,
        },
    })
}

/// One ground-truth annotation row (`slide_id,x_um,y_um,class`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub slide_id: String,
    pub x_um: f64,
    pub y_um: f64,
    pub class: String,
}

impl Annotation {
    pub fn pos(&self) -> PointUm {
        PointUm::new(self.x_um, self.y_um)
    }
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, rows: &[Annotation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for a in rows {
        w.serialize(a)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub slide_id: String,
    pub x_um: f64,
    pub y_um: f64,
    pub class: String,
    pub mapped_x_um: Option<f64>,
    pub mapped_y_um: Option<f64>,
    pub status: TransferStatus,
    pub ncc_peak: f64,
}

pub fn write_transfer_report(path: &Path, anns: &[Annotation], transferred: &[TransferredAnnotation]) -> Result<()> {
    if anns.len() != transferred.len() {
        return Err(Error::Contract(format!(
            "{} annotations but {} transfer results",
            anns.len(),
            transferred.len()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    for (a, t) in anns.iter().zip(transferred) {
        w.serialize(TransferRow {
            slide_id: a.slide_id.clone(),
            x_um: a.x_um,
            y_um: a.y_um,
            class: a.class.clone(),
            mapped_x_um: t.mapped.map(|m| m.x_um),
            mapped_y_um: t.mapped.map(|m| m.y_um),
            status: t.status,
            ncc_peak: t.ncc_peak,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_transfer_copies() {
        let pts = vec![PointUm::new(1.0, 2.0), PointUm::new(300.0, 4.5)];
        let t = transfer_annotations(&pts, &GlobalTransform::identity(), None);
        assert_eq!(t.iter().map(|a| a.mapped.unwrap()).collect::<Vec<_>>(), pts);
        assert!(t.iter().all(|a| a.status == TransferStatus::GlobalOnly));
    }

    #[test]
    fn validation() {
        assert!(GlobalTransform::identity().validate().is_ok());
        let g = GlobalTransform {
            scale: 1.2,
            rotation_deg: 7.0,
            ..Default::default()
        };
        let e = g.validate().unwrap_err().to_string();
        assert!(e.contains("scale") && e.contains("rotation"));
    }

    #[test]
    fn report_csv() {
        let dir = tempfile::tempdir().unwrap();
        let anns = vec![Annotation {
            slide_id: "s".into(),
            x_um: 1.0,
            y_um: 2.0,
            class: "mitosis".into(),
        }];
        write_annotations(&dir.path().join("a.csv"), &anns).unwrap();
        assert_eq!(read_annotations(&dir.path().join("a.csv")).unwrap(), anns);
        let t = transfer_annotations(&[anns[0].pos()], &GlobalTransform::identity(), None);
        let p = dir.path().join("r.csv");
        write_transfer_report(&p, &anns, &t).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.starts_with("slide_id,x_um,y_um,class,mapped_x_um,mapped_y_um,status,ncc_peak"));
        assert!(text.contains("global_only"));
    }

    proptest! {
        #[test]
        fn inverse_round_trip(s in 0.9f64..1.1, r in -5.0f64..5.0, tx in -500.0f64..500.0, ty in -500.0f64..500.0,
                              x in 0.0f64..5000.0, y in 0.0f64..5000.0) {
            let g = GlobalTransform { scale: s, rotation_deg: r, translation_um: (tx, ty) };
            let p = PointUm::new(x, y);
            prop_assert!(g.inverse_apply(g.apply(p)).dist(&p) < 1e-9);
        }
    }
}
