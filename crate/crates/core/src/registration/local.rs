use serde::{Deserialize, Serialize};

use super::{GlobalTransform, TransferStatus, TransferredAnnotation};
use crate::raster::{ncc, PatchSource};
use crate::scanmodel::PointUm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalParams {
    pub patch_um: f64,
    pub margin_um: f64,
    /// Sampling pitch of patch and window.
    pub mpp: f64,
    pub min_peak: f64,
}

impl Default for LocalParams {
    fn default() -> Self {
        LocalParams {
            patch_um: 64.0,
            margin_um: 16.0,
            mpp: 2.0,
            min_peak: 0.5,
        }
    }
}

/// Patch-level refinement. The reference patch is pulled through the global
/// transform into the target frame, so only a residual translation is left
/// to search for.
pub struct LocalRefiner<'a> {
    pub reference: &'a dyn PatchSource,
    pub target: &'a dyn PatchSource,
    pub params: LocalParams,
}

fn parabolic(a: f64, b: f64, c: f64) -> f64 {
    let d = a - 2.0 * b + c;
    if d < 0.0 {
        (0.5 * (a - c) / d).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

impl LocalRefiner<'_> {
    pub fn new<'a>(reference: &'a dyn PatchSource, target: &'a dyn PatchSource, params: LocalParams) -> LocalRefiner<'a> {
        LocalRefiner {
            reference,
            target,
            params,
        }
    }

    pub fn refine(&self, p: PointUm, g: &GlobalTransform) -> TransferredAnnotation {
        let failed = |peak: f64| TransferredAnnotation {
            source: p,
            mapped: None,
            local_shift_um: (0.0, 0.0),
            ncc_peak: peak,
            status: TransferStatus::Failed,
        };
        if !p.is_finite() {
            return failed(0.0);
        }
        let lp = &self.params;
        let q0 = g.apply(p);
        let n = (lp.patch_um / lp.mpp).round().max(3.0) as i64;
        let r = (lp.margin_um / lp.mpp).round().max(1.0) as i64;
        let half = (n - 1) as f64 / 2.0;

        // per-direction search radius, clipped to the target bounds
        let (mut rx0, mut rx1, mut ry0, mut ry1) = (r, r, r, r);
        if let Some((lo, hi)) = self.target.bounds_um() {
            let fit = |room_um: f64| (room_um / lp.mpp).floor() as i64;
            rx0 = rx0.min(fit(q0.x_um - half * lp.mpp - lo.x_um));
            rx1 = rx1.min(fit(hi.x_um - (q0.x_um + half * lp.mpp)));
            ry0 = ry0.min(fit(q0.y_um - half * lp.mpp - lo.y_um));
            ry1 = ry1.min(fit(hi.y_um - (q0.y_um + half * lp.mpp)));
            if rx0 < 0 || rx1 < 0 || ry0 < 0 || ry1 < 0 {
                log::warn!("patch at ({:.1}, {:.1}) µm leaves the target", q0.x_um, q0.y_um);
                return failed(0.0);
            }
            if (rx0, rx1, ry0, ry1) != (r, r, r, r) {
                log::warn!("search window at ({:.1}, {:.1}) µm clipped to the target", q0.x_um, q0.y_um);
            }
        }

        let at = |a: i64, b: i64| {
            PointUm::new(q0.x_um + (a as f64 - half) * lp.mpp, q0.y_um + (b as f64 - half) * lp.mpp)
        };
        let patch: Vec<f32> = (0..n)
            .flat_map(|b| (0..n).map(move |a| (a, b)))
            .map(|(a, b)| self.reference.sample_um(g.inverse_apply(at(a, b))))
            .collect();
        // window pixel (a, b) covers offset (a - rx0, b - ry0)
        let ww = n + rx0 + rx1;
        let wh = n + ry0 + ry1;
        let window: Vec<f32> = (0..wh)
            .flat_map(|b| (0..ww).map(move |a| (a, b)))
            .map(|(a, b)| self.target.sample_um(at(a - rx0, b - ry0)))
            .collect();

        let nx = (rx0 + rx1 + 1) as usize;
        let ny = (ry0 + ry1 + 1) as usize;
        let mut surface = vec![0.0f64; nx * ny];
        let mut buf = vec![0.0f32; (n * n) as usize];
        for sy in 0..ny {
            for sx in 0..nx {
                for b in 0..n as usize {
                    let row = (b + sy) * ww as usize + sx;
                    buf[b * n as usize..(b + 1) * n as usize].copy_from_slice(&window[row..row + n as usize]);
                }
                surface[sy * nx + sx] = ncc(&patch, &buf);
            }
        }
        let (mut bi, mut bv) = (0usize, f64::NEG_INFINITY);
        for (i, &v) in surface.iter().enumerate() {
            if v > bv {
                bv = v;
                bi = i;
            }
        }
        let (ix, iy) = (bi % nx, bi / nx);
        // a perfect match is already pixel-exact
        let exact = bv >= 1.0 - 1e-9;
        let fx = if !exact && ix > 0 && ix + 1 < nx {
            parabolic(surface[bi - 1], bv, surface[bi + 1])
        } else {
            0.0
        };
        let fy = if !exact && iy > 0 && iy + 1 < ny {
            parabolic(surface[bi - nx], bv, surface[bi + nx])
        } else {
            0.0
        };
        if bv < lp.min_peak {
            return TransferredAnnotation {
                source: p,
                mapped: Some(q0),
                local_shift_um: (0.0, 0.0),
                ncc_peak: bv.clamp(0.0, 1.0),
                status: TransferStatus::GlobalOnly,
            };
        }
        let m = lp.margin_um;
        let dx = (((ix as i64 - rx0) as f64 + fx) * lp.mpp).clamp(-m, m);
        let dy = (((iy as i64 - ry0) as f64 + fy) * lp.mpp).clamp(-m, m);
        TransferredAnnotation {
            source: p,
            mapped: Some(PointUm::new(q0.x_um + dx, q0.y_um + dy)),
            local_shift_um: (dx, dy),
            ncc_peak: bv,
            status: TransferStatus::Refined,
        }
    }
}
