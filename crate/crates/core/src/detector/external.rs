use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{plane_key, Candidate, CandidateSource, Detector, ScoreVector};
use crate::error::{Error, Result};
use crate::scanmodel::PointUm;
use crate::zmerge::{dedup_plane, DEFAULT_MERGE_RADIUS_UM};

/// One line of the score-exchange file: a candidate seen on one plane, with
/// optionally one verification model's score at that position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub x_um: f64,
    pub y_um: f64,
    pub plane_um: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub seg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl ScoreRecord {
    fn validate(&self, line: usize) -> Result<()> {
        let bad = |what: String| Err(Error::Adapter(format!("record on line {line}: {what}")));
        if !(self.x_um.is_finite() && self.y_um.is_finite() && self.plane_um.is_finite()) {
            return bad("non-finite coordinate".into());
        }
        if !(0.0..=1.0).contains(&self.seg) {
            return bad(format!("seg {} outside [0, 1]", self.seg));
        }
        match (&self.model, self.score) {
            (Some(_), Some(s)) if !(0.0..=1.0).contains(&s) => bad(format!("score {s} outside [0, 1]")),
            (Some(m), None) => bad(format!("model {m:?} without a score")),
            (None, Some(_)) => bad("score without a model".into()),
            _ => Ok(()),
        }
    }

    pub fn pos(&self) -> PointUm {
        PointUm::new(self.x_um, self.y_um)
    }
}

pub fn read_score_records<R: Read>(reader: R) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::Adapter(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Adapter(format!("record on line {}: {e}", i + 1)))?;
        rec.validate(i + 1)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_score_records<W: Write>(mut w: W, recs: &[ScoreRecord]) -> Result<()> {
    for r in recs {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

const CELL_UM: f64 = 1.0;

/// Detector backed by a precomputed score-exchange file.
#[derive(Debug, Clone)]
pub struct ExternalScores {
    records: Vec<ScoreRecord>,
    /// Positions match when within this distance (1 px at working resolution).
    lookup_tol_um: f64,
    merge_radius_um: f64,
    index: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl ExternalScores {
    pub fn new(records: Vec<ScoreRecord>, lookup_tol_um: f64) -> Self {
        let mut index: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            index.entry(cell(r.plane_um, r.pos())).or_default().push(i);
        }
        ExternalScores {
            records,
            lookup_tol_um,
            merge_radius_um: DEFAULT_MERGE_RADIUS_UM,
            index,
        }
    }

    pub fn with_merge_radius(mut self, r: f64) -> Self {
        self.merge_radius_um = r;
        self
    }

    pub fn from_path(path: &Path, lookup_tol_um: f64) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let recs = read_score_records(f)
            .map_err(|e| Error::Adapter(format!("{}: {e}", path.display())))?;
        Ok(ExternalScores::new(recs, lookup_tol_um))
    }

    pub fn records(&self) -> &[ScoreRecord] {
        &self.records
    }

    fn nearby(&self, plane: f64, pos: PointUm) -> impl Iterator<Item = &ScoreRecord> + '_ {
        let (pk, cx, cy) = cell(plane, pos);
        let tol2 = self.lookup_tol_um * self.lookup_tol_um;
        let reach = (self.lookup_tol_um / CELL_UM).ceil() as i64;
        (-reach..=reach)
            .flat_map(move |dx| (-reach..=reach).map(move |dy| (pk, cx + dx, cy + dy)))
            .filter_map(move |k| self.index.get(&k))
            .flatten()
            .map(move |&i| &self.records[i])
            .filter(move |r| r.pos().dist2(&pos) <= tol2)
    }
}

fn cell(plane: f64, p: PointUm) -> (i64, i64, i64) {
    (
        plane_key(plane),
        (p.x_um / CELL_UM).floor() as i64,
        (p.y_um / CELL_UM).floor() as i64,
    )
}

impl Detector for ExternalScores {
    fn detect_plane(&self, plane_offset_um: f64) -> Result<Vec<Candidate>> {
        let pk = plane_key(plane_offset_um);
        let mut seen: Vec<Candidate> = Vec::new();
        let mut taken: HashMap<(i64, i64), Vec<PointUm>> = HashMap::new();
        let tol2 = self.lookup_tol_um * self.lookup_tol_um;
        for (line, r) in self.records.iter().enumerate() {
            if plane_key(r.plane_um) != pk {
                continue;
            }
            // several model records describe the same candidate
            let (_, cx, cy) = cell(r.plane_um, r.pos());
            let dup = (-1..=1).any(|dx| {
                (-1..=1).any(|dy| {
                    taken
                        .get(&(cx + dx, cy + dy))
                        .is_some_and(|v| v.iter().any(|p| p.dist2(&r.pos()) <= tol2))
                })
            });
            if dup {
                continue;
            }
            taken.entry((cx, cy)).or_default().push(r.pos());
            seen.push(Candidate {
                id: r.id.clone().unwrap_or_else(|| format!("ext-{}", line + 1)),
                pos: r.pos(),
                plane_offset_um,
                seg_score: r.seg,
                source: CandidateSource::External,
                tile_id: None,
            });
        }
        Ok(dedup_plane(&seen, self.merge_radius_um))
    }

    fn score_patch(
        &self,
        pos: PointUm,
        plane_offset_um: f64,
        model_ids: &[String],
    ) -> Result<ScoreVector> {
        let scores = model_ids
            .iter()
            .map(|m| {
                self.nearby(plane_offset_um, pos)
                    .filter(|r| r.model.as_deref() == Some(m.as_str()))
                    .min_by(|a, b| a.pos().dist2(&pos).total_cmp(&b.pos().dist2(&pos)))
                    .and_then(|r| r.score)
                    .ok_or_else(|| {
                        Error::Adapter(format!(
                            "no score for model {m:?} at ({:.3}, {:.3}) µm on plane {plane_offset_um} µm",
                            pos.x_um, pos.y_um
                        ))
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        ScoreVector::new(model_ids.to_vec(), scores)
    }
}
