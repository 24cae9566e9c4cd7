//! Single-channel float rasters anchored in slide coordinates.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scanmodel::PointUm;

/// Anything that can be sampled at a physical slide position.
pub trait PatchSource: Sync {
    fn sample_um(&self, p: PointUm) -> f32;

    /// Sampled extent as `(min, max)` corners, if bounded.
    fn bounds_um(&self) -> Option<(PointUm, PointUm)> {
        None
    }
}

/// Grayscale raster; pixel `(i, j)` sits at `origin + (i, j) * mpp`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub mpp: f64,
    pub origin_um: PointUm,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, mpp: f64, origin_um: PointUm) -> Self {
        GrayImage {
            width,
            height,
            mpp,
            origin_um,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mpp: f64,
        origin_um: PointUm,
        f: impl Fn(usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for j in 0..height {
            for i in 0..width {
                data.push(f(i, j));
            }
        }
        GrayImage {
            width,
            height,
            mpp,
            origin_um,
            data,
        }
    }

    /// Renders `src` on a `width x height` grid starting at `origin`.
    pub fn render<S: PatchSource + ?Sized>(
        src: &S,
        width: usize,
        height: usize,
        mpp: f64,
        origin_um: PointUm,
    ) -> Self {
        let rows = crate::par::map_range(height, |j| {
            (0..width)
                .map(|i| {
                    src.sample_um(PointUm::new(
                        origin_um.x_um + i as f64 * mpp,
                        origin_um.y_um + j as f64 * mpp,
                    ))
                })
                .collect::<Vec<f32>>()
        });
        GrayImage {
            width,
            height,
            mpp,
            origin_um,
            data: rows.concat(),
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[j * self.width + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[j * self.width + i] = v;
    }

    pub fn pixel_to_um(&self, i: f64, j: f64) -> PointUm {
        PointUm::new(
            self.origin_um.x_um + i * self.mpp,
            self.origin_um.y_um + j * self.mpp,
        )
    }

    pub fn um_to_pixel(&self, p: PointUm) -> (f64, f64) {
        (
            (p.x_um - self.origin_um.x_um) / self.mpp,
            (p.y_um - self.origin_um.y_um) / self.mpp,
        )
    }

    /// Bilinear sample at fractional pixel coordinates, `None` outside the grid.
    pub fn bilinear(&self, x: f64, y: f64) -> Option<f32> {
        if self.width == 0 || self.height == 0 {
            return None;
        }
        let maxx = (self.width - 1) as f64;
        let maxy = (self.height - 1) as f64;
        if !(x >= 0.0 && y >= 0.0 && x <= maxx && y <= maxy) {
            return None;
        }
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let a = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let b = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        Some(a * (1.0 - fy) + b * fy)
    }

    /// Bilinear resize to an explicit output size, preserving the physical extent.
    pub fn resize_bilinear(&self, new_w: usize, new_h: usize) -> GrayImage {
        let sx = self.width as f64 / new_w.max(1) as f64;
        let sy = self.height as f64 / new_h.max(1) as f64;
        let maxx = self.width.saturating_sub(1) as f64;
        let maxy = self.height.saturating_sub(1) as f64;
        let rows = crate::par::map_range(new_h, |j| {
            (0..new_w)
                .map(|i| {
                    // pixel-centre alignment
                    let x = ((i as f64 + 0.5) * sx - 0.5).clamp(0.0, maxx);
                    let y = ((j as f64 + 0.5) * sy - 0.5).clamp(0.0, maxy);
                    self.bilinear(x, y).unwrap_or(0.0)
                })
                .collect::<Vec<f32>>()
        });
        GrayImage {
            width: new_w,
            height: new_h,
            mpp: self.mpp * sx,
            origin_um: self.origin_um,
            data: rows.concat(),
        }
    }

    /// Box-filter downsampling by an integer factor (partial edge blocks dropped).
    pub fn downsample_box(&self, factor: usize) -> GrayImage {
        let f = factor.max(1);
        let w = self.width / f;
        let h = self.height / f;
        let norm = 1.0 / (f * f) as f32;
        let off = (f as f64 - 1.0) / 2.0;
        GrayImage::from_fn(
            w,
            h,
            self.mpp * f as f64,
            self.pixel_to_um(off, off),
            |i, j| {
                let mut s = 0.0;
                for dj in 0..f {
                    let row = (j * f + dj) * self.width;
                    for di in 0..f {
                        s += self.data[row + i * f + di];
                    }
                }
                s * norm
            },
        )
    }

    /// Cuts out the pixel rectangle `[x0, x0+w) x [y0, y0+h)` clipped to the image.
    pub fn crop(&self, x0: i64, y0: i64, w: usize, h: usize) -> GrayImage {
        let cx0 = x0.clamp(0, self.width as i64) as usize;
        let cy0 = y0.clamp(0, self.height as i64) as usize;
        let cx1 = (x0 + w as i64).clamp(0, self.width as i64) as usize;
        let cy1 = (y0 + h as i64).clamp(0, self.height as i64) as usize;
        GrayImage::from_fn(
            cx1 - cx0,
            cy1 - cy0,
            self.mpp,
            self.pixel_to_um(cx0 as f64, cy0 as f64),
            |i, j| self.get(cx0 + i, cy0 + j),
        )
    }

    pub fn map_values(&self, f: impl Fn(f32) -> f32) -> GrayImage {
        GrayImage {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Loads an 8- or 16-bit image as grayscale scaled to `[0, 1]`.
    pub fn load(path: &Path, mpp: f64) -> Result<GrayImage> {
        let img = image::open(path)?;
        let luma = img.to_luma16();
        let (w, h) = luma.dimensions();
        Ok(GrayImage {
            width: w as usize,
            height: h as usize,
            mpp,
            origin_um: PointUm::default(),
            data: luma.pixels().map(|p| p.0[0] as f32 / 65535.0).collect(),
        })
    }

    /// Saves as 8-bit PNG, clamping to `[0, 1]`.
    pub fn save_png8(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.data.iter().map(|&v| quantize_u8(v)).collect();
        image::save_buffer(
            path,
            &buf,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(Error::from)
    }
}

pub(crate) fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl PatchSource for GrayImage {
    fn sample_um(&self, p: PointUm) -> f32 {
        let (x, y) = self.um_to_pixel(p);
        self.bilinear(x, y).unwrap_or(0.0)
    }

    fn bounds_um(&self) -> Option<(PointUm, PointUm)> {
        Some((
            self.origin_um,
            self.pixel_to_um(
                self.width.saturating_sub(1) as f64,
                self.height.saturating_sub(1) as f64,
            ),
        ))
    }
}

/// Pearson correlation of two equally sized sample sets; 0 when either is flat.
pub fn ncc(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let (mut sa, mut sb) = (0.0f64, 0.0f64);
    for i in 0..n {
        sa += a[i] as f64;
        sb += b[i] as f64;
    }
    let ma = sa / n as f64;
    let mb = sb / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        let da = a[i] as f64 - ma;
        let db = b[i] as f64 - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    let denom = (saa * sbb).sqrt();
    if denom <= 1e-12 * n as f64 {
        0.0
    } else {
        (sab / denom).clamp(-1.0, 1.0)
    }
}
