use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use zmitosis::detector::{
    read_score_records, write_score_records, Candidate, CandidateSource, Detector, ExternalScores, RasterDetector,
    ScoreRecord,
};
use zmitosis::evalstats::{
    build_report, match_detections, precision, read_samples, sensitivity, write_samples, LayerMode, Located,
    MatchResult, Metric, MetricSample,
};
use zmitosis::fusion::{recalibrate, ForestModel, Layout};
use zmitosis::pipeline::{
    background_rows, calibration_set, feature_rows, positives, predict_merged, Prediction,
};
use zmitosis::raster::GrayImage;
use zmitosis::registration::{
    estimate_global, read_annotations, thumbnail, transfer_annotations, write_annotations, write_transfer_report,
    Annotation, LocalRefiner,
};
use zmitosis::scanmodel::{nearest_to_focus, PointUm, ScanProfile, WorkingResolution};
use zmitosis::seeds::SeedTree;
use zmitosis::simkit::{render_store, run_experiment, run_slides, ObjectKind};
use zmitosis::tilestore::{ingest_planes, open_store, StoreHandle, TileFormat};
use zmitosis::zmerge::{merge_candidates, MergedCandidate};

use crate::config::{DetectorKind, RunConfig, StoreRole};
use crate::errors::{CliError, StageContext};
use crate::manifest::RunManifest;

pub const SAMPLES_FILE: &str = "samples.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const RUN_MANIFEST: &str = "run-manifest.json";
pub const MITOSIS_CLASS: &str = "mitosis";

pub fn report_file(metric: Metric) -> String {
    format!("report_{}.csv", metric.as_str())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).stage("output", Some(dir))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Per-command manifest next to a file output: `<file>.manifest.json`.
fn manifest_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn run_tree(cfg: &RunConfig, run_index: u32) -> SeedTree {
    SeedTree::new(cfg.master_seed).child("run").index(run_index as u64)
}

// ---- detector sources ----

/// Where candidates and patch scores come from.
pub enum Source {
    Store(Box<RasterDetector>),
    Scores(Box<ExternalScores>),
}

impl Source {
    pub fn open(cfg: &RunConfig, store: Option<&Path>, scores: Option<&Path>) -> Result<Self, CliError> {
        match (store, scores) {
            (Some(p), None) => {
                let h = open_store(p).stage("open-store", Some(p))?;
                let seeds = SeedTree::new(cfg.master_seed)
                    .child("detector")
                    .child(&h.manifest().slide_id);
                Ok(Source::Store(Box::new(RasterDetector::new(h, cfg.detector.raster.clone(), seeds))))
            }
            (None, Some(p)) => {
                let ext = ExternalScores::from_path(p, cfg.detector.lookup_tol_um)
                    .stage("read-scores", Some(p))?
                    .with_merge_radius(cfg.merge_radius_um);
                Ok(Source::Scores(Box::new(ext)))
            }
            _ => Err(CliError::usage("give exactly one of --store or --scores")),
        }
    }

    pub fn detector(&self) -> &dyn Detector {
        match self {
            Source::Store(d) => d.as_ref(),
            Source::Scores(d) => d.as_ref(),
        }
    }

    pub fn planes(&self) -> Vec<f64> {
        match self {
            Source::Store(d) => d.store().manifest().plane_offsets_um(),
            Source::Scores(d) => {
                let mut z: Vec<f64> = d.records().iter().map(|r| r.plane_um).collect();
                z.sort_by(f64::total_cmp);
                z.dedup();
                z
            }
        }
    }

    /// Slide extent in µm (bounding box of the records for score files).
    pub fn extent_um(&self) -> (f64, f64) {
        match self {
            Source::Store(d) => (d.store().manifest().width_um(), d.store().manifest().height_um()),
            Source::Scores(d) => d
                .records()
                .iter()
                .fold((0.0f64, 0.0f64), |(w, h), r| (w.max(r.x_um), h.max(r.y_um))),
        }
    }
}

fn parse_planes(s: Option<&str>, available: Vec<f64>) -> Result<Vec<f64>, CliError> {
    let Some(s) = s else { return Ok(available) };
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let z: f64 = part
            .parse()
            .map_err(|_| CliError::usage(format!("--planes: cannot parse {part:?}")))?;
        if !available.iter().any(|a| (a - z).abs() < 1e-9) {
            return Err(CliError::usage(format!("--planes: no plane at {z} µm (have {available:?})")));
        }
        out.push(z);
    }
    if out.is_empty() {
        return Err(CliError::usage("--planes: empty list"));
    }
    Ok(out)
}

// ---- JSONL candidates ----

fn candidate_record(c: &Candidate) -> ScoreRecord {
    ScoreRecord {
        x_um: c.pos.x_um,
        y_um: c.pos.y_um,
        plane_um: c.plane_offset_um,
        model: None,
        seg: c.seg_score,
        score: None,
        id: Some(c.id.clone()),
    }
}

fn write_candidates(path: &Path, cands: &[Candidate]) -> Result<(), CliError> {
    let recs: Vec<ScoreRecord> = cands.iter().map(candidate_record).collect();
    let f = fs::File::create(path).stage("write-candidates", Some(path))?;
    let mut w = std::io::BufWriter::new(f);
    write_score_records(&mut w, &recs).stage("write-candidates", Some(path))?;
    std::io::Write::flush(&mut w).stage("write-candidates", Some(path))
}

/// Candidate lines of a JSONL file (score lines are skipped).
fn read_candidates(path: &Path) -> Result<Vec<Candidate>, CliError> {
    let f = fs::File::open(path).stage("read-candidates", Some(path))?;
    let recs = read_score_records(f).stage("read-candidates", Some(path))?;
    Ok(recs
        .into_iter()
        .filter(|r| r.model.is_none())
        .enumerate()
        .map(|(i, r)| Candidate {
            id: r.id.clone().unwrap_or_else(|| format!("c{i}")),
            pos: r.pos(),
            plane_offset_um: r.plane_um,
            seg_score: r.seg,
            source: CandidateSource::External,
            tile_id: None,
        })
        .collect())
}

fn as_merged(cands: Vec<Candidate>) -> Vec<MergedCandidate> {
    cands
        .into_iter()
        .map(|c| MergedCandidate {
            planes_present: vec![c.plane_offset_um],
            members: vec![c.clone()],
            rep: c,
        })
        .collect()
}

fn ground_truth(path: &Path, slide_id: Option<&str>) -> Result<Vec<Located>, CliError> {
    let anns = read_annotations(path).stage("read-annotations", Some(path))?;
    Ok(anns
        .iter()
        .enumerate()
        .filter(|(_, a)| a.class == MITOSIS_CLASS && slide_id.is_none_or(|s| a.slide_id == s))
        .map(|(i, a)| Located::new(format!("{}/a{i}", a.slide_id), a.x_um, a.y_um))
        .collect())
}

fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).stage("write-predictions", Some(path))?;
    for p in preds {
        w.serialize(p).stage("write-predictions", Some(path))?;
    }
    w.flush().stage("write-predictions", Some(path))
}

fn read_predictions(path: &Path) -> Result<Vec<Prediction>, CliError> {
    let mut r = csv::Reader::from_path(path).stage("read-predictions", Some(path))?;
    r.deserialize()
        .collect::<Result<Vec<Prediction>, _>>()
        .stage("read-predictions", Some(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).stage("output", Some(path))
}

// ---- ingest ----

pub struct IngestArgs {
    pub input: PathBuf,
    pub out: PathBuf,
    pub slide_id: String,
    pub scanner: String,
    pub native_mpp: f64,
    pub objective: String,
    pub tile_size: usize,
    pub format: TileFormat,
}

/// Plane offset from a page file stem such as `z-0.6` or `z+1.2`.
fn page_offset(stem: &str) -> Option<f64> {
    stem.strip_prefix('z')?.parse().ok()
}

pub fn ingest(cfg: &RunConfig, a: &IngestArgs) -> Result<(), CliError> {
    let mut pages: Vec<(f64, PathBuf)> = Vec::new();
    for e in fs::read_dir(&a.input).stage("ingest", Some(&a.input))? {
        let p = e.stage("ingest", Some(&a.input))?.path();
        let is_png = p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png"));
        if let (true, Some(z)) = (is_png, p.file_stem().and_then(|s| s.to_str()).and_then(page_offset)) {
            pages.push((z, p));
        }
    }
    if pages.is_empty() {
        return Err(CliError::stage(
            "ingest",
            Some(&a.input),
            "no page images named z<offset>.png",
        ));
    }
    pages.sort_by(|x, y| x.0.total_cmp(&y.0));
    let offsets: Vec<f64> = pages.iter().map(|p| p.0).collect();
    let spacing = (offsets.len() > 1).then(|| offsets[1] - offsets[0]);
    let profile = ScanProfile::new(&a.scanner, a.native_mpp, offsets, spacing, &a.objective)
        .stage("ingest", Some(&a.input))?;
    let images = pages
        .iter()
        .map(|(_, p)| GrayImage::load(p, a.native_mpp).stage("ingest", Some(p)))
        .collect::<Result<Vec<_>, _>>()?;
    ingest_planes(
        &a.out,
        &a.slide_id,
        profile,
        &images,
        WorkingResolution::default(),
        a.tile_size,
        a.format,
    )
    .stage("ingest", Some(&a.out))?;
    let mut m = RunManifest::new("ingest", cfg);
    m.arg("slide_id", &a.slide_id).arg("native_mpp", a.native_mpp).arg("tile_size", a.tile_size);
    for (z, p) in &pages {
        m.input(&format!("page/{z}"), p)?;
    }
    m.output(&a.out, &a.out.join(zmitosis::tilestore::MANIFEST_FILE))?;
    m.write(&a.out.join("run-manifest-ingest.json"))?;
    Ok(())
}

// ---- simulate ----

/// Writes the metric samples and ground truth of the simulated experiment
/// (and optionally rendered stores of run 1) into `dir`.
pub fn simulate_into(cfg: &RunConfig, dir: &Path, m: &mut RunManifest) -> Result<(), CliError> {
    ensure_dir(dir)?;
    let sim = cfg.sim_config();
    let samples = run_experiment(&sim).stage("simulate", None)?;
    let samples_path = dir.join(SAMPLES_FILE);
    write_samples(&samples_path, &samples).stage("simulate", Some(&samples_path))?;
    m.output(dir, &samples_path)?;

    let mut anns = Vec::new();
    for r in 1..=sim.n_runs as u32 {
        for slide in run_slides(&sim, r).stage("simulate", None)? {
            for o in &slide.objects {
                anns.push(Annotation {
                    slide_id: slide.slide_id.clone(),
                    x_um: o.pos.x_um,
                    y_um: o.pos.y_um,
                    class: match o.kind {
                        ObjectKind::Mitosis => MITOSIS_CLASS.into(),
                        ObjectKind::Imposter => "imposter".into(),
                    },
                });
            }
        }
    }
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    write_annotations(&gt_path, &anns).stage("simulate", Some(&gt_path))?;
    m.output(dir, &gt_path)?;

    if cfg.simulation.render_stores {
        let profile = sim.profile().stage("simulate", None)?;
        for slide in run_slides(&sim, 1).stage("simulate", None)? {
            let sd = dir.join("stores").join(&slide.slide_id);
            render_store(&slide, &sim.defocus, &profile, cfg.simulation.blob_sigma_um, &sd)
                .stage("render-store", Some(&sd))?;
            m.output(dir, &sd.join(zmitosis::tilestore::MANIFEST_FILE))?;
        }
    }
    Ok(())
}

pub fn simulate(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let mut m = RunManifest::new("simulate", cfg);
    simulate_into(cfg, dir, &mut m)?;
    m.write(&dir.join("run-manifest-simulate.json"))?;
    Ok(())
}

// ---- detect / merge ----

pub struct SourceArgs {
    pub store: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub planes: Option<String>,
}

fn record_source(m: &mut RunManifest, s: &SourceArgs) -> Result<(), CliError> {
    if let Some(p) = &s.store {
        m.input("store", &p.join(zmitosis::tilestore::MANIFEST_FILE))?;
    }
    if let Some(p) = &s.scores {
        m.input("scores", p)?;
    }
    if let Some(p) = &s.planes {
        m.arg("planes", p);
    }
    Ok(())
}

pub fn detect(cfg: &RunConfig, src: &SourceArgs, out: &Path) -> Result<(), CliError> {
    let source = Source::open(cfg, src.store.as_deref(), src.scores.as_deref())?;
    let planes = parse_planes(src.planes.as_deref(), source.planes())?;
    let cands = zmitosis::pipeline::detect_planes(source.detector(), &planes).stage("detect", None)?;
    ensure_dir(&parent_dir(out))?;
    write_candidates(out, &cands)?;
    let mut m = RunManifest::new("detect", cfg);
    record_source(&mut m, src)?;
    m.output(&parent_dir(out), out)?;
    m.write(&manifest_path_for(out))?;
    Ok(())
}

pub fn merge(cfg: &RunConfig, input: &Path, out: &Path) -> Result<(), CliError> {
    let cands = read_candidates(input)?;
    let merged = merge_candidates(&cands, cfg.merge_radius_um);
    let reps: Vec<Candidate> = merged.into_iter().map(|mc| mc.rep).collect();
    ensure_dir(&parent_dir(out))?;
    write_candidates(out, &reps)?;
    let mut m = RunManifest::new("merge", cfg);
    m.input("candidates", input)?;
    m.output(&parent_dir(out), out)?;
    m.write(&manifest_path_for(out))?;
    Ok(())
}

// ---- fusion ----

/// Calibration set of one slide, topped up with background negatives when
/// no candidate qualifies as a negative.
#[allow(clippy::too_many_arguments)]
fn calibration_rows(
    cfg: &RunConfig,
    det: &dyn Detector,
    layout: &Arc<Layout>,
    merged: &[MergedCandidate],
    rows: &[Vec<f64>],
    gts: &[Located],
    extent: (f64, f64),
    seeds: &SeedTree,
) -> Result<zmitosis::fusion::LabeledSet, CliError> {
    let params = cfg.calibration_params();
    let mut set = calibration_set(merged, rows, gts, layout, &params, seeds.child("negatives").seed())
        .stage("calibration-set", None)?;
    if set.n_positive() == set.len() && !set.is_empty() {
        let mut avoid: Vec<PointUm> = gts.iter().map(|g| g.pos).collect();
        avoid.extend(merged.iter().map(|m| m.rep.pos));
        let n = ((set.len() as f64 * params.neg_ratio).floor() as usize).max(1);
        let bg = background_rows(det, layout, &avoid, extent, n, params.match_cutoff_um, seeds.child("background").seed())
            .stage("calibration-set", None)?;
        for row in bg {
            set.push(row, false).stage("calibration-set", None)?;
        }
    }
    Ok(set)
}

pub struct FuseTrainArgs {
    pub source: SourceArgs,
    pub candidates: PathBuf,
    pub annotations: PathBuf,
    pub slide_id: Option<String>,
    pub run_index: u32,
    pub out: PathBuf,
}

pub fn fuse_train(cfg: &RunConfig, a: &FuseTrainArgs) -> Result<(), CliError> {
    let source = Source::open(cfg, a.source.store.as_deref(), a.source.scores.as_deref())?;
    let planes = parse_planes(a.source.planes.as_deref(), source.planes())?;
    let layout = Arc::new(Layout::new(planes, cfg.model_ids.clone()).stage("fuse-train", None)?);
    let merged = as_merged(read_candidates(&a.candidates)?);
    let rows = feature_rows(&merged, source.detector(), &layout).stage("features", Some(&a.candidates))?;
    let gts = ground_truth(&a.annotations, a.slide_id.as_deref())?;
    let seeds = run_tree(cfg, a.run_index);
    let set = calibration_rows(cfg, source.detector(), &layout, &merged, &rows, &gts, source.extent_um(), &seeds)?;
    let model = recalibrate(&cfg.forest, &set, seeds.child("forest").seed()).stage("fuse-train", None)?;
    ensure_dir(&parent_dir(&a.out))?;
    write_text(&a.out, &model.to_json().stage("fuse-train", Some(&a.out))?)?;
    let mut m = RunManifest::new("fuse-train", cfg);
    record_source(&mut m, &a.source)?;
    m.input("candidates", &a.candidates)?.input("annotations", &a.annotations)?;
    m.arg("run_index", a.run_index);
    if let Some(s) = &a.slide_id {
        m.arg("slide_id", s);
    }
    m.output(&parent_dir(&a.out), &a.out)?;
    m.write(&manifest_path_for(&a.out))?;
    Ok(())
}

pub struct FusePredictArgs {
    pub source: SourceArgs,
    pub candidates: PathBuf,
    pub model: PathBuf,
    pub out: PathBuf,
}

pub fn fuse_predict(cfg: &RunConfig, a: &FusePredictArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.model).stage("fuse-predict", Some(&a.model))?;
    let model = ForestModel::from_json(&text).stage("fuse-predict", Some(&a.model))?;
    let source = Source::open(cfg, a.source.store.as_deref(), a.source.scores.as_deref())?;
    let layout = Arc::new(model.layout.clone());
    let merged = as_merged(read_candidates(&a.candidates)?);
    let rows = feature_rows(&merged, source.detector(), &layout).stage("features", Some(&a.candidates))?;
    let preds = predict_merged(&model, &layout, &merged, &rows).stage("fuse-predict", None)?;
    ensure_dir(&parent_dir(&a.out))?;
    write_predictions(&a.out, &preds)?;
    let mut m = RunManifest::new("fuse-predict", cfg);
    record_source(&mut m, &a.source)?;
    m.input("candidates", &a.candidates)?.input("model", &a.model)?;
    m.output(&parent_dir(&a.out), &a.out)?;
    m.write(&manifest_path_for(&a.out))?;
    Ok(())
}

// ---- register ----

pub struct RegisterArgs {
    pub reference: PathBuf,
    pub target: PathBuf,
    pub annotations: PathBuf,
    pub out: PathBuf,
}

/// The plane nearest nominal focus as one raster.
fn focus_plane(store: &StoreHandle) -> Result<GrayImage, CliError> {
    let m = store.manifest();
    let z = nearest_to_focus(&m.plane_offsets_um());
    store
        .read_region(z, 0, 0, m.width_px, m.height_px)
        .map(|t| t.to_gray())
        .stage("register", Some(store.root()))
}

pub fn register(cfg: &RunConfig, a: &RegisterArgs) -> Result<(), CliError> {
    let r = &cfg.registration;
    let rs = open_store(&a.reference).stage("register", Some(&a.reference))?;
    let ts = open_store(&a.target).stage("register", Some(&a.target))?;
    let ref_img = focus_plane(&rs)?;
    let tgt_img = focus_plane(&ts)?;
    let thumb = |img: &GrayImage, s: &StoreHandle| {
        thumbnail(
            img,
            PointUm::default(),
            s.manifest().width_um(),
            s.manifest().height_um(),
            r.thumb_mpp,
            r.supersample,
        )
    };
    let est = estimate_global(&thumb(&ref_img, &rs), &thumb(&tgt_img, &ts), &r.global)
        .stage("register-global", Some(&a.target))?;
    let anns = read_annotations(&a.annotations).stage("register", Some(&a.annotations))?;
    let points: Vec<PointUm> = anns.iter().map(Annotation::pos).collect();
    let refiner = LocalRefiner::new(&ref_img, &tgt_img, r.local.clone());
    let transferred = transfer_annotations(&points, &est.transform, r.refine.then_some(&refiner));
    ensure_dir(&parent_dir(&a.out))?;
    write_transfer_report(&a.out, &anns, &transferred).stage("register", Some(&a.out))?;
    let mut m = RunManifest::new("register", cfg);
    m.input("reference", &a.reference.join(zmitosis::tilestore::MANIFEST_FILE))?
        .input("target", &a.target.join(zmitosis::tilestore::MANIFEST_FILE))?
        .input("annotations", &a.annotations)?;
    m.result = Some(serde_json::to_value(&est).expect("estimate serialises"));
    m.output(&parent_dir(&a.out), &a.out)?;
    m.write(&manifest_path_for(&a.out))?;
    Ok(())
}

// ---- evaluate / report ----

#[derive(Debug, Serialize, Deserialize)]
pub struct Evaluation {
    pub sensitivity: Option<f64>,
    pub precision: Option<f64>,
    #[serde(rename = "match")]
    pub matching: MatchResult,
}

pub struct EvaluateArgs {
    pub predictions: PathBuf,
    pub annotations: PathBuf,
    pub slide_id: Option<String>,
    pub out: PathBuf,
    /// Appends metric samples for this condition when set.
    pub samples_out: Option<PathBuf>,
    pub scanner: String,
    pub pipeline: String,
    pub layer_mode: LayerMode,
    pub run_index: u32,
}

pub fn evaluate(cfg: &RunConfig, a: &EvaluateArgs) -> Result<(), CliError> {
    let preds = read_predictions(&a.predictions)?;
    let gts = ground_truth(&a.annotations, a.slide_id.as_deref())?;
    let mr = match_detections(&positives(&preds), &gts, cfg.match_cutoff_um);
    let ev = Evaluation {
        sensitivity: sensitivity(&mr),
        precision: precision(&mr),
        matching: mr,
    };
    ensure_dir(&parent_dir(&a.out))?;
    write_text(&a.out, &(serde_json::to_string_pretty(&ev).expect("evaluation serialises") + "\n"))?;
    let mut m = RunManifest::new("evaluate", cfg);
    m.input("predictions", &a.predictions)?.input("annotations", &a.annotations)?;
    m.output(&parent_dir(&a.out), &a.out)?;
    if let Some(sp) = &a.samples_out {
        let mut samples = if sp.is_file() {
            read_samples(sp).stage("evaluate", Some(sp))?
        } else {
            Vec::new()
        };
        for (metric, v) in [(Metric::Sensitivity, ev.sensitivity), (Metric::Precision, ev.precision)] {
            if let Some(value) = v {
                samples.push(MetricSample {
                    scanner: a.scanner.clone(),
                    pipeline: a.pipeline.clone(),
                    layer_mode: a.layer_mode,
                    run_index: a.run_index,
                    metric,
                    value,
                    slide_id: a.slide_id.clone(),
                });
            }
        }
        write_samples(sp, &samples).stage("evaluate", Some(sp))?;
    }
    m.write(&manifest_path_for(&a.out))?;
    Ok(())
}

/// Writes one report CSV per metric into `dir`.
pub fn report_into(cfg: &RunConfig, samples_path: &Path, dir: &Path, m: &mut RunManifest) -> Result<(), CliError> {
    let samples = read_samples(samples_path).stage("report", Some(samples_path))?;
    let opts = cfg.report_options();
    let reports = build_report(&samples, &opts).stage("report", Some(samples_path))?;
    ensure_dir(dir)?;
    for r in reports {
        let p = dir.join(report_file(r.metric));
        write_text(&p, &r.to_csv(&opts))?;
        m.output(dir, &p)?;
    }
    Ok(())
}

pub fn report(cfg: &RunConfig, samples_path: &Path, dir: &Path) -> Result<(), CliError> {
    let mut m = RunManifest::new("report", cfg);
    m.input("samples", samples_path)?;
    report_into(cfg, samples_path, dir, &mut m)?;
    m.write(&dir.join("run-manifest-report.json"))?;
    Ok(())
}

// ---- run-all ----

struct PreparedSlide {
    source: Source,
    layout: Arc<Layout>,
    merged: Vec<MergedCandidate>,
    rows: Vec<Vec<f64>>,
    gts: Vec<Located>,
    slide: String,
}

fn prepare(cfg: &RunConfig, idx: usize) -> Result<PreparedSlide, CliError> {
    let s = &cfg.stores[idx];
    let stage = format!("stores[{idx}]");
    let source = match cfg.detector.kind {
        DetectorKind::External => Source::open(cfg, None, s.scores.as_deref())?,
        _ => Source::open(cfg, s.path.as_deref(), None)?,
    };
    let planes = match s.layer_mode {
        LayerMode::Zstack => source.planes(),
        LayerMode::Single => vec![nearest_to_focus(&source.planes())],
    };
    let layout = Arc::new(Layout::new(planes.clone(), cfg.model_ids.clone()).stage(&stage, None)?);
    let merged = zmitosis::pipeline::detect_and_merge(source.detector(), &planes, cfg.merge_radius_um)
        .stage(&format!("{stage}.detect"), s.path.as_deref().or(s.scores.as_deref()))?;
    let rows = feature_rows(&merged, source.detector(), &layout).stage(&format!("{stage}.features"), None)?;
    let gts = ground_truth(&s.annotations, None)?;
    let slide = match (&s.path, &s.scores) {
        (Some(p), _) | (None, Some(p)) => p.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        _ => stage.clone(),
    };
    Ok(PreparedSlide {
        source,
        layout,
        merged,
        rows,
        gts,
        slide,
    })
}

/// Metric samples of every configured condition over `n_runs` runs. Runs
/// differ only in forest and negative-sampling seeds.
fn store_samples(cfg: &RunConfig) -> Result<Vec<MetricSample>, CliError> {
    let mut out = Vec::new();
    for ((scanner, pipeline, mode), members) in cfg.conditions() {
        let calib_idx = members.iter().find(|m| m.0 == StoreRole::Calibration).map(|m| m.1).expect("validated");
        let calib = prepare(cfg, calib_idx)?;
        let tests = members
            .iter()
            .filter(|m| m.0 == StoreRole::Test)
            .map(|m| prepare(cfg, m.1))
            .collect::<Result<Vec<_>, _>>()?;
        for t in &tests {
            if t.layout != calib.layout {
                return Err(CliError::stage(
                    "run-all",
                    None,
                    format!("{scanner}/{pipeline}/{}: test slide {} has other planes than the calibration slide", mode.as_str(), t.slide),
                ));
            }
        }
        for r in 1..=cfg.n_runs as u32 {
            let seeds = run_tree(cfg, r);
            let set = calibration_rows(
                cfg,
                calib.source.detector(),
                &calib.layout,
                &calib.merged,
                &calib.rows,
                &calib.gts,
                calib.source.extent_um(),
                &seeds,
            )?;
            let model = recalibrate(&cfg.forest, &set, seeds.child("forest").seed()).stage("fuse-train", None)?;
            let mut per_slide = Vec::new();
            for t in &tests {
                let preds = predict_merged(&model, &t.layout, &t.merged, &t.rows).stage("fuse-predict", None)?;
                let located: Vec<Located> = positives(&preds);
                per_slide.push((t.slide.clone(), match_detections(&located, &t.gts, cfg.match_cutoff_um)));
            }
            let pooled = MatchResult::pooled(per_slide.iter().map(|p| &p.1), cfg.match_cutoff_um);
            let mut emit = |m: &MatchResult, slide: Option<String>| {
                for (metric, v) in [(Metric::Sensitivity, sensitivity(m)), (Metric::Precision, precision(m))] {
                    if let Some(value) = v {
                        out.push(MetricSample {
                            scanner: scanner.clone(),
                            pipeline: pipeline.clone(),
                            layer_mode: mode,
                            run_index: r,
                            metric,
                            value,
                            slide_id: slide.clone(),
                        });
                    }
                }
            };
            emit(&pooled, None);
            for (s, m) in &per_slide {
                emit(m, Some(s.clone()));
            }
        }
    }
    Ok(out)
}

pub fn run_all(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    ensure_dir(dir)?;
    let mut m = RunManifest::new("run-all", cfg);
    if cfg.stores.is_empty() {
        simulate_into(cfg, dir, &mut m)?;
    } else {
        for (i, s) in cfg.stores.iter().enumerate() {
            if let Some(p) = &s.path {
                m.input(&format!("stores[{i}].path"), &p.join(zmitosis::tilestore::MANIFEST_FILE))?;
            }
            if let Some(p) = &s.scores {
                m.input(&format!("stores[{i}].scores"), p)?;
            }
            m.input(&format!("stores[{i}].annotations"), &s.annotations)?;
        }
        let samples = store_samples(cfg)?;
        let p = dir.join(SAMPLES_FILE);
        write_samples(&p, &samples).stage("run-all", Some(&p))?;
        m.output(dir, &p)?;
    }
    report_into(cfg, &dir.join(SAMPLES_FILE), dir, &mut m)?;
    m.write(&dir.join(RUN_MANIFEST))?;
    Ok(())
}

/// Summary printed on stdout after `--validate-only`.
pub fn validation_summary(cfg: &RunConfig) -> String {
    let mut v = BTreeMap::new();
    v.insert("valid", serde_json::Value::Bool(true));
    v.insert("config_sha256", serde_json::Value::String(cfg.sha256()));
    serde_json::to_string(&v).expect("summary serialises")
}
