//! Procedural tissue-like intensity fields for registration experiments.

use crate::raster::PatchSource;
use crate::scanmodel::PointUm;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, octave: u64, ix: i64, iy: i64) -> f64 {
    let h = mix(seed ^ mix(octave ^ mix(ix as u64 ^ mix(iy as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise: slow "tissue" structure plus cell-sized detail.
#[derive(Debug, Clone, PartialEq)]
pub struct ProceduralTissue {
    pub seed: u64,
    /// `(cell size µm, weight)` per octave.
    pub octaves: Vec<(f64, f64)>,
}

impl ProceduralTissue {
    pub fn new(seed: u64) -> Self {
        ProceduralTissue {
            seed,
            octaves: vec![(400.0, 0.35), (160.0, 0.25), (64.0, 0.2), (20.0, 0.12), (7.0, 0.08)],
        }
    }

    fn noise(&self, octave: usize, cell: f64, p: PointUm) -> f64 {
        let (fx, fy) = (p.x_um / cell, p.y_um / cell);
        let (ix, iy) = (fx.floor(), fy.floor());
        let (tx, ty) = (smooth(fx - ix), smooth(fy - iy));
        let (ix, iy) = (ix as i64, iy as i64);
        let o = octave as u64;
        let a = lattice(self.seed, o, ix, iy);
        let b = lattice(self.seed, o, ix + 1, iy);
        let c = lattice(self.seed, o, ix, iy + 1);
        let d = lattice(self.seed, o, ix + 1, iy + 1);
        let top = a + (b - a) * tx;
        let bot = c + (d - c) * tx;
        top + (bot - top) * ty
    }
}

impl PatchSource for ProceduralTissue {
    fn sample_um(&self, p: PointUm) -> f32 {
        let total: f64 = self.octaves.iter().map(|o| o.1).sum();
        let v: f64 = self
            .octaves
            .iter()
            .enumerate()
            .map(|(k, &(cell, w))| w * self.noise(k, cell, p))
            .sum();
        (v / total) as f32
    }
}

/// `src` seen through a similarity transform `q = s R p + t` plus an
/// optional smooth local displacement, with an intensity gain and offset.
///
/// Sampling at `q` reads `src` at `G^-1(q) + d(q)` where `d` is a sinusoidal
/// field of amplitude `local_amp_um`.
pub struct WarpedSource<'a> {
    pub src: &'a dyn PatchSource,
    pub scale: f64,
    pub rotation_rad: f64,
    pub translation_um: (f64, f64),
    pub local_amp_um: f64,
    pub local_period_um: f64,
    pub gain: f32,
    pub offset: f32,
}

impl<'a> WarpedSource<'a> {
    pub fn similarity(src: &'a dyn PatchSource, scale: f64, rotation_rad: f64, t: (f64, f64)) -> Self {
        WarpedSource {
            src,
            scale,
            rotation_rad,
            translation_um: t,
            local_amp_um: 0.0,
            local_period_um: 500.0,
            gain: 1.0,
            offset: 0.0,
        }
    }

    pub fn global_forward(&self, p: PointUm) -> PointUm {
        let (s, c) = self.rotation_rad.sin_cos();
        PointUm::new(
            self.scale * (c * p.x_um - s * p.y_um) + self.translation_um.0,
            self.scale * (s * p.x_um + c * p.y_um) + self.translation_um.1,
        )
    }

    pub fn global_inverse(&self, q: PointUm) -> PointUm {
        let (s, c) = self.rotation_rad.sin_cos();
        let (x, y) = (q.x_um - self.translation_um.0, q.y_um - self.translation_um.1);
        PointUm::new((c * x + s * y) / self.scale, (-s * x + c * y) / self.scale)
    }

    fn displacement(&self, q: PointUm) -> (f64, f64) {
        if self.local_amp_um == 0.0 {
            return (0.0, 0.0);
        }
        let k = std::f64::consts::TAU / self.local_period_um;
        (
            self.local_amp_um * (k * q.y_um).sin(),
            self.local_amp_um * (k * q.x_um).cos(),
        )
    }

    /// Moving-image position of the reference point `p` (exact inverse of
    /// the sampling map, by fixed-point iteration).
    pub fn forward(&self, p: PointUm) -> PointUm {
        let mut q = self.global_forward(p);
        for _ in 0..50 {
            let d = self.displacement(q);
            let next = self.global_forward(PointUm::new(p.x_um - d.0, p.y_um - d.1));
            if next.dist(&q) < 1e-9 {
                return next;
            }
            q = next;
        }
        q
    }
}

impl PatchSource for WarpedSource<'_> {
    fn sample_um(&self, q: PointUm) -> f32 {
        let g = self.global_inverse(q);
        let d = self.displacement(q);
        self.gain * self.src.sample_um(PointUm::new(g.x_um + d.0, g.y_um + d.1)) + self.offset
    }
}
