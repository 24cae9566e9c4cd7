use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::GlobalTransform;
use crate::error::{Error, Result};
use crate::raster::GrayImage;
use crate::scanmodel::PointUm;
use crate::seeds::SeedTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalParams {
    /// Coarse rotations span `[-rot_range_deg, rot_range_deg]`.
    pub rot_range_deg: f64,
    pub rot_step_deg: f64,
    pub scales: Vec<f64>,
    /// Extra starts with seeded random rotation and scale.
    pub n_random_starts: usize,
    /// Best starts refined by pattern search.
    pub top_k: usize,
    pub seed: u64,
    /// Minimum fraction of target pixels that must overlap the reference.
    pub min_overlap: f64,
    pub min_peak: f64,
}

impl Default for GlobalParams {
    fn default() -> Self {
        GlobalParams {
            rot_range_deg: 5.0,
            rot_step_deg: 1.0,
            scales: vec![0.97, 1.0, 1.03],
            n_random_starts: 4,
            top_k: 3,
            seed: 0,
            min_overlap: 0.25,
            min_peak: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalEstimate {
    pub transform: GlobalTransform,
    pub ncc_peak: f64,
}

const SCALE_MIN: f64 = 0.9;
const SCALE_MAX: f64 = 1.1;
const ROT_MAX_DEG: f64 = 5.0;

/// Target pixel `(i, j)` maps to reference pixel `o + i * di + j * dj`
/// under `g^-1`.
struct PixelMap {
    o: (f64, f64),
    di: (f64, f64),
    dj: (f64, f64),
}

impl PixelMap {
    fn new(reference: &GrayImage, target: &GrayImage, g: &GlobalTransform) -> Self {
        let at = |i: f64, j: f64| reference.um_to_pixel(g.inverse_apply(target.pixel_to_um(i, j)));
        let o = at(0.0, 0.0);
        let (a, b) = (at(1.0, 0.0), at(0.0, 1.0));
        PixelMap {
            o,
            di: (a.0 - o.0, a.1 - o.1),
            dj: (b.0 - o.0, b.1 - o.1),
        }
    }

    fn at(&self, i: usize, j: usize) -> (f64, f64) {
        let (i, j) = (i as f64, j as f64);
        (
            self.o.0 + i * self.di.0 + j * self.dj.0,
            self.o.1 + i * self.di.1 + j * self.dj.1,
        )
    }
}

/// NCC between the target thumbnail and the reference pulled through `g`,
/// over overlapping pixels; `None` when the overlap is too small.
fn score(reference: &GrayImage, target: &GrayImage, g: &GlobalTransform, min_overlap: f64) -> Option<f64> {
    let n = target.width * target.height;
    let map = PixelMap::new(reference, target, g);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for j in 0..target.height {
        for i in 0..target.width {
            let (x, y) = map.at(i, j);
            if let Some(v) = reference.bilinear(x, y) {
                a.push(target.get(i, j));
                b.push(v);
            }
        }
    }
    if (a.len() as f64) < min_overlap * n as f64 {
        return None;
    }
    Some(crate::raster::ncc(&a, &b))
}

struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    fn run(&self, data: &mut [Complex<f64>], inverse: bool) {
        let n = self.n;
        let f = if inverse { &self.inv } else { &self.fwd };
        f.process(data);
        let mut t = vec![Complex::default(); n * n];
        for j in 0..n {
            for i in 0..n {
                t[i * n + j] = data[j * n + i];
            }
        }
        f.process(&mut t);
        for j in 0..n {
            for i in 0..n {
                data[j * n + i] = t[i * n + j];
            }
        }
    }
}

fn hann(i: usize, n: usize) -> f64 {
    if n < 2 {
        return 1.0;
    }
    0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / (n - 1) as f64).cos()
}

fn padded(img: &[f32], w: usize, h: usize, n: usize) -> Vec<Complex<f64>> {
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len().max(1) as f64;
    let mut out = vec![Complex::default(); n * n];
    for j in 0..h {
        let wy = hann(j, h);
        for i in 0..w {
            out[j * n + i] = Complex::new((img[j * w + i] as f64 - mean) * wy * hann(i, w), 0.0);
        }
    }
    out
}

/// Phase correlation against a fixed image whose spectrum is computed once.
struct Correlator {
    fft: Fft2,
    w: usize,
    h: usize,
    fixed: Vec<Complex<f64>>,
}

impl Correlator {
    fn new(a: &[f32], w: usize, h: usize) -> Self {
        let n = (2 * w.max(h)).next_power_of_two();
        let fft = Fft2::new(n);
        let mut fixed = padded(a, w, h, n);
        fft.run(&mut fixed, false);
        Correlator { fft, w, h, fixed }
    }

    /// Shift `s` (pixels) such that `a(x) ~ b(x - s)`.
    fn shift(&self, b: &[f32]) -> (f64, f64) {
        let n = self.fft.n;
        let mut fb = padded(b, self.w, self.h, n);
        self.fft.run(&mut fb, false);
        for (y, x) in fb.iter_mut().zip(&self.fixed) {
            let c = *x * y.conj();
            let m = c.norm();
            *y = if m > 1e-15 { c / m } else { Complex::default() };
        }
        self.fft.run(&mut fb, true);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (k, v) in fb.iter().enumerate() {
            if v.re > best.0 {
                best = (v.re, k);
            }
        }
        let signed = |v: usize| if v > n / 2 { v as f64 - n as f64 } else { v as f64 };
        (signed(best.1 % n), signed(best.1 / n))
    }
}

#[cfg(test)]
fn phase_correlate(a: &[f32], b: &[f32], w: usize, h: usize) -> (f64, f64) {
    Correlator::new(a, w, h).shift(b)
}

/// Translation for a given scale and rotation by phase correlation.
fn translation_for(reference: &GrayImage, target: &GrayImage, corr: &Correlator, scale: f64, rot_deg: f64) -> GlobalTransform {
    let g0 = GlobalTransform {
        scale,
        rotation_deg: rot_deg,
        translation_um: (0.0, 0.0),
    };
    let mean = reference.data.iter().sum::<f32>() / reference.data.len().max(1) as f32;
    let map = PixelMap::new(reference, target, &g0);
    let warped: Vec<f32> = (0..target.height)
        .flat_map(|j| (0..target.width).map(move |i| (i, j)))
        .map(|(i, j)| {
            let (x, y) = map.at(i, j);
            reference.bilinear(x, y).unwrap_or(mean)
        })
        .collect();
    let (sx, sy) = corr.shift(&warped);
    GlobalTransform {
        translation_um: (sx * target.mpp, sy * target.mpp),
        ..g0
    }
}

fn pattern_search(
    reference: &GrayImage,
    target: &GrayImage,
    start: GlobalTransform,
    start_score: f64,
    min_overlap: f64,
) -> (GlobalTransform, f64) {
    let mpp = target.mpp;
    let mut x = [start.scale, start.rotation_deg, start.translation_um.0, start.translation_um.1];
    let mut best = start_score;
    let mut step = [0.01, 0.5, mpp, mpp];
    let to_t = |x: &[f64; 4]| GlobalTransform {
        scale: x[0],
        rotation_deg: x[1],
        translation_um: (x[2], x[3]),
    };
    let mut evals = 0;
    while step[2] > 0.005 * mpp && evals < 3000 {
        let mut improved: Option<([f64; 4], f64)> = None;
        for d in 0..4 {
            for sign in [-1.0, 1.0] {
                let mut y = x;
                y[d] += sign * step[d];
                y[0] = y[0].clamp(SCALE_MIN, SCALE_MAX);
                y[1] = y[1].clamp(-ROT_MAX_DEG, ROT_MAX_DEG);
                evals += 1;
                if let Some(s) = score(reference, target, &to_t(&y), min_overlap) {
                    if s > improved.map_or(best, |v| v.1) {
                        improved = Some((y, s));
                    }
                }
            }
        }
        match improved {
            Some((y, s)) => {
                x = y;
                best = s;
            }
            None => step.iter_mut().for_each(|s| *s *= 0.5),
        }
    }
    (to_t(&x), best)
}

/// Similarity transform mapping reference thumbnail coordinates onto the
/// target thumbnail, maximising NCC. Deterministic for fixed `params.seed`.
pub fn estimate_global(reference: &GrayImage, target: &GrayImage, params: &GlobalParams) -> Result<GlobalEstimate> {
    if ((reference.mpp - target.mpp) / target.mpp).abs() > 1e-6 {
        return Err(Error::Registration(format!(
            "thumbnail resolutions differ ({} vs {} µm/px)",
            reference.mpp, target.mpp
        )));
    }
    if reference.width < 8 || reference.height < 8 || target.width < 8 || target.height < 8 {
        return Err(Error::Registration("thumbnails must be at least 8 x 8 px".into()));
    }
    let mut starts: Vec<(f64, f64)> = Vec::new();
    let n_rot = (params.rot_range_deg / params.rot_step_deg.max(1e-9)).floor() as i64;
    for k in -n_rot..=n_rot {
        for &s in &params.scales {
            starts.push((s, k as f64 * params.rot_step_deg));
        }
    }
    let mut rng = SeedTree::new(params.seed).child("global-starts").rng();
    let (smin, smax) = params
        .scales
        .iter()
        .fold((1.0f64, 1.0f64), |(a, b), &s| (a.min(s), b.max(s)));
    for _ in 0..params.n_random_starts {
        let s = if smax > smin { rng.random_range(smin..=smax) } else { smin };
        let r = rng.random_range(-params.rot_range_deg..=params.rot_range_deg);
        starts.push((s, r));
    }
    let corr = Correlator::new(&target.data, target.width, target.height);
    let scored: Vec<(GlobalTransform, f64)> = crate::par::map(&starts, |&(s, r)| {
        let g = translation_for(reference, target, &corr, s, r);
        let v = score(reference, target, &g, params.min_overlap).unwrap_or(f64::NEG_INFINITY);
        (g, v)
    });
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].1.total_cmp(&scored[a].1).then(a.cmp(&b)));
    let top: Vec<usize> = order
        .into_iter()
        .filter(|&i| scored[i].1.is_finite())
        .take(params.top_k.max(1))
        .collect();
    let refined: Vec<(GlobalTransform, f64)> = crate::par::map(&top, |&i| {
        pattern_search(reference, target, scored[i].0.clone(), scored[i].1, params.min_overlap)
    });
    let best = refined
        .into_iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
        .map(|(_, v)| v);
    match best {
        Some((t, peak)) if peak >= params.min_peak => Ok(GlobalEstimate { transform: t, ncc_peak: peak }),
        Some((_, peak)) => Err(Error::Registration(format!(
            "global registration failed: NCC peak {peak:.3} < {}",
            params.min_peak
        ))),
        None => Err(Error::Registration(
            "global registration failed: no start overlaps the reference".into(),
        )),
    }
}

/// Thumbnail of `src` over `[origin, origin + size)` at `mpp`, box-filtered
/// from `supersample`-times finer point samples.
pub fn thumbnail(
    src: &dyn crate::raster::PatchSource,
    origin: PointUm,
    width_um: f64,
    height_um: f64,
    mpp: f64,
    supersample: usize,
) -> GrayImage {
    let ss = supersample.max(1);
    let fine = mpp / ss as f64;
    let w = (width_um / mpp).floor() as usize * ss;
    let h = (height_um / mpp).floor() as usize * ss;
    GrayImage::render(src, w, h, fine, origin).downsample_box(ss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkit::{ProceduralTissue, WarpedSource};

    #[test]
    fn phase_correlation_recovers_integer_shift() {
        let t = ProceduralTissue::new(5);
        let a = thumbnail(&t, PointUm::new(0.0, 0.0), 1600.0, 1600.0, 16.0, 1);
        // b(x) = a(x + s): content of a appears in b shifted by -s
        let b = thumbnail(&t, PointUm::new(12.0 * 16.0, -7.0 * 16.0), 1600.0, 1600.0, 16.0, 1);
        let (sx, sy) = phase_correlate(&b.data, &a.data, a.width, a.height);
        assert_eq!((sx, sy), (-12.0, 7.0));
    }

    #[test]
    fn identity_and_shift_and_rotation() {
        let t = ProceduralTissue::new(9);
        let o = PointUm::default();
        let r = thumbnail(&t, o, 2000.0, 2000.0, 16.0, 4);
        let e = estimate_global(&r, &r, &GlobalParams::default()).unwrap();
        assert!((e.transform.scale - 1.0).abs() < 0.03);
        assert!(e.transform.rotation_deg.abs() < 1.0);
        assert!(e.transform.translation_um.0.abs() < 16.0 && e.transform.translation_um.1.abs() < 16.0);
        assert!(e.ncc_peak > 0.99);

        let w = WarpedSource::similarity(&t, 1.0, 0.0, (12.0 * 16.0, -7.0 * 16.0));
        let tg = thumbnail(&w, o, 2000.0, 2000.0, 16.0, 4);
        let e = estimate_global(&r, &tg, &GlobalParams::default()).unwrap();
        assert!((e.transform.translation_um.0 - 192.0).abs() < 16.0, "{:?}", e);
        assert!((e.transform.translation_um.1 + 112.0).abs() < 16.0, "{:?}", e);

        let w = WarpedSource::similarity(&t, 1.0, 2f64.to_radians(), (0.0, 0.0));
        let tg = thumbnail(&w, o, 2000.0, 2000.0, 16.0, 4);
        let e = estimate_global(&r, &tg, &GlobalParams::default()).unwrap();
        assert!((e.transform.rotation_deg - 2.0).abs() < 0.5, "{:?}", e);
    }

    #[test]
    fn brightness_invariance_and_failure() {
        let t = ProceduralTissue::new(2);
        let o = PointUm::default();
        let r = thumbnail(&t, o, 1600.0, 1600.0, 16.0, 2);
        let w = WarpedSource::similarity(&t, 1.01, 0.01, (30.0, 40.0));
        let tg = thumbnail(&w, o, 1600.0, 1600.0, 16.0, 2);
        let a = estimate_global(&r, &tg, &GlobalParams::default()).unwrap();
        let b = estimate_global(&r, &tg.map_values(|v| 0.5 * v + 0.2), &GlobalParams::default()).unwrap();
        assert!((a.transform.translation_um.0 - b.transform.translation_um.0).abs() < 0.5);
        assert!((a.transform.scale - b.transform.scale).abs() < 1e-3);
        let flat = r.map_values(|_| 0.5);
        assert!(estimate_global(&r, &flat, &GlobalParams::default()).is_err());
    }
}
