//! Plane-stack store: a directory holding one tiled raster per focal plane at
//! working resolution, described by a `manifest.json`.
//!
//! ```text
//! store/
//!   manifest.json
//!   z-0.6/t_0_0.png  t_1_0.png ...
//!   z+0.0/...
//! ```
//!
//! Tiles are addressed `{dir}/t_{col}_{row}.{ext}` on the manifest's storage
//! grid. `png8` holds 8-bit grayscale; `raw16` holds little-endian `u16`
//! samples in row-major order with no header.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{quantize_u8, GrayImage};
use crate::scanmodel::{rescale_factor, PointUm, ScanProfile, WorkingResolution};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_HALO_PX: usize = 64;
pub const DEFAULT_TILE_PX: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TileFormat {
    #[default]
    Png8,
    Raw16,
}

impl TileFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            TileFormat::Png8 => "png",
            TileFormat::Raw16 => "raw",
        }
    }

    pub fn max_value(&self) -> u16 {
        match self {
            TileFormat::Png8 => u8::MAX as u16,
            TileFormat::Raw16 => u16::MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneEntry {
    pub z_offset_um: f64,
    pub dir: String,
}

/// Parsed and validated store manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreManifest {
    pub slide_id: String,
    pub profile: ScanProfile,
    pub mpp: f64,
    pub width_px: usize,
    pub height_px: usize,
    pub tile_size_px: usize,
    pub tile_format: TileFormat,
    pub planes: Vec<PlaneEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawManifest {
    slide_id: String,
    mpp: f64,
    width_px: usize,
    height_px: usize,
    tile_size_px: usize,
    #[serde(default)]
    tile_format: TileFormat,
    planes: Vec<PlaneEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    profile: Option<ScanProfile>,
}

impl StoreManifest {
    pub fn new(
        slide_id: impl Into<String>,
        profile: ScanProfile,
        res: WorkingResolution,
        width_px: usize,
        height_px: usize,
        tile_size_px: usize,
        tile_format: TileFormat,
    ) -> Result<Self> {
        let planes = profile
            .plane_offsets_um()
            .iter()
            .map(|&z| PlaneEntry {
                z_offset_um: z,
                dir: plane_dir_name(z),
            })
            .collect();
        let m = StoreManifest {
            slide_id: slide_id.into(),
            profile,
            mpp: res.mpp(),
            width_px,
            height_px,
            tile_size_px,
            tile_format,
            planes,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 || self.tile_size_px == 0 {
            return Err(Error::Store(format!(
                "width_px, height_px and tile_size_px must be positive (got {}x{}, tile {})",
                self.width_px, self.height_px, self.tile_size_px
            )));
        }
        WorkingResolution::new(self.mpp)?;
        let offs = self.profile.plane_offsets_um();
        if self.planes.len() != offs.len() {
            return Err(Error::Store(format!(
                "plane count mismatch: profile has {} planes, manifest lists {} plane dirs",
                offs.len(),
                self.planes.len()
            )));
        }
        for (p, &z) in self.planes.iter().zip(offs) {
            if (p.z_offset_um - z).abs() > 1e-9 {
                return Err(Error::Store(format!(
                    "plane {} does not match profile offset {z}",
                    p.z_offset_um
                )));
            }
        }
        Ok(())
    }

    pub fn resolution(&self) -> WorkingResolution {
        WorkingResolution::new(self.mpp).expect("validated")
    }

    pub fn width_um(&self) -> f64 {
        self.width_px as f64 * self.mpp
    }

    pub fn height_um(&self) -> f64 {
        self.height_px as f64 * self.mpp
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (
            self.width_px.div_ceil(self.tile_size_px),
            self.height_px.div_ceil(self.tile_size_px),
        )
    }

    pub fn plane(&self, z: f64) -> Option<&PlaneEntry> {
        self.planes.iter().find(|p| (p.z_offset_um - z).abs() < 1e-9)
    }

    pub fn plane_offsets_um(&self) -> Vec<f64> {
        self.planes.iter().map(|p| p.z_offset_um).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let raw = RawManifest {
            slide_id: self.slide_id.clone(),
            mpp: self.mpp,
            width_px: self.width_px,
            height_px: self.height_px,
            tile_size_px: self.tile_size_px,
            tile_format: self.tile_format,
            planes: self.planes.clone(),
            profile: Some(self.profile.clone()),
        };
        Ok(serde_json::to_string_pretty(&raw)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: RawManifest = serde_json::from_str(s)?;
        let profile = match raw.profile {
            Some(p) => p,
            None => {
                // no explicit profile: infer one from the plane list
                let mut offs: Vec<f64> = raw.planes.iter().map(|p| p.z_offset_um).collect();
                offs.sort_by(f64::total_cmp);
                let spacing = (offs.len() > 1).then(|| offs[1] - offs[0]);
                ScanProfile::new(raw.slide_id.clone(), raw.mpp, offs, spacing, "")?
            }
        };
        let mut planes = raw.planes;
        planes.sort_by(|a, b| a.z_offset_um.total_cmp(&b.z_offset_um));
        let m = StoreManifest {
            slide_id: raw.slide_id,
            profile,
            mpp: raw.mpp,
            width_px: raw.width_px,
            height_px: raw.height_px,
            tile_size_px: raw.tile_size_px,
            tile_format: raw.tile_format,
            planes,
        };
        m.validate()?;
        Ok(m)
    }
}

/// Directory name used for a plane offset, e.g. `z-1.2`, `z+0.0`.
pub fn plane_dir_name(z: f64) -> String {
    let z = if z == 0.0 { 0.0 } else { z };
    let s = format!("{z:+}");
    if s.contains('.') {
        format!("z{s}")
    } else {
        format!("z{s}.0")
    }
}

/// One unit of detector work: a tile with its halo, on one plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileSpec {
    /// Position of the tile in the per-plane row-major order.
    pub index: usize,
    pub plane_offset_um: f64,
    pub x0_px: usize,
    pub y0_px: usize,
    pub width_px: usize,
    pub height_px: usize,
    pub halo_px: usize,
    pub core_x0_px: usize,
    pub core_y0_px: usize,
    pub core_width_px: usize,
    pub core_height_px: usize,
}

impl TileSpec {
    pub fn core_contains_px(&self, x: usize, y: usize) -> bool {
        x >= self.core_x0_px
            && y >= self.core_y0_px
            && x < self.core_x0_px + self.core_width_px
            && y < self.core_y0_px + self.core_height_px
    }
}

/// Tiles of `tile_size_px` (including halo) whose cores, of side
/// `tile_size_px - 2*halo_px`, partition the slide. Ordered plane by plane
/// (ascending offset), row-major within a plane.
pub fn plan_tiles(
    manifest: &StoreManifest,
    tile_size_px: usize,
    halo_px: usize,
) -> Result<Vec<TileSpec>> {
    if tile_size_px <= 2 * halo_px {
        return Err(Error::Store(format!(
            "tile size {tile_size_px} must exceed twice the halo ({halo_px})"
        )));
    }
    plan_tiles_for(
        manifest.width_px,
        manifest.height_px,
        &manifest.plane_offsets_um(),
        tile_size_px,
        halo_px,
    )
}

pub(crate) fn plan_tiles_for(
    width_px: usize,
    height_px: usize,
    planes: &[f64],
    tile_size_px: usize,
    halo_px: usize,
) -> Result<Vec<TileSpec>> {
    if tile_size_px <= 2 * halo_px {
        return Err(Error::Store(format!(
            "tile size {tile_size_px} must exceed twice the halo ({halo_px})"
        )));
    }
    if width_px == 0 || height_px == 0 {
        log::warn!("degenerate slide {width_px}x{height_px}: empty tile plan");
        return Ok(Vec::new());
    }
    let stride = tile_size_px - 2 * halo_px;
    let cols = width_px.div_ceil(stride);
    let rows = height_px.div_ceil(stride);
    let mut out = Vec::with_capacity(cols * rows * planes.len());
    for &z in planes {
        for r in 0..rows {
            for c in 0..cols {
                let cx0 = c * stride;
                let cy0 = r * stride;
                let cw = stride.min(width_px - cx0);
                let ch = stride.min(height_px - cy0);
                let x0 = cx0.saturating_sub(halo_px);
                let y0 = cy0.saturating_sub(halo_px);
                let x1 = (cx0 + stride + halo_px).min(width_px);
                let y1 = (cy0 + stride + halo_px).min(height_px);
                out.push(TileSpec {
                    index: r * cols + c,
                    plane_offset_um: z,
                    x0_px: x0,
                    y0_px: y0,
                    width_px: x1 - x0,
                    height_px: y1 - y0,
                    halo_px,
                    core_x0_px: cx0,
                    core_y0_px: cy0,
                    core_width_px: cw,
                    core_height_px: ch,
                });
            }
        }
    }
    Ok(out)
}

/// Decoded tile region. Pixel `(i, j)` is working pixel `(x0+i, y0+j)`,
/// located at `((x0+i)*mpp, (y0+j)*mpp)` µm.
#[derive(Debug, Clone, PartialEq)]
pub struct TileImage {
    pub plane_offset_um: f64,
    pub x0_px: usize,
    pub y0_px: usize,
    pub width: usize,
    pub height: usize,
    pub mpp: f64,
    pub max_value: u16,
    pub data: Vec<u16>,
}

impl TileImage {
    pub fn value(&self, i: usize, j: usize) -> f32 {
        self.data[j * self.width + i] as f32 / self.max_value as f32
    }

    pub fn pixel_to_um(&self, i: f64, j: f64) -> PointUm {
        PointUm::new(
            (self.x0_px as f64 + i) * self.mpp,
            (self.y0_px as f64 + j) * self.mpp,
        )
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(
            self.width,
            self.height,
            self.mpp,
            self.pixel_to_um(0.0, 0.0),
            |i, j| self.value(i, j),
        )
    }
}

/// An opened, validated store.
#[derive(Debug, Clone)]
pub struct StoreHandle {
    root: PathBuf,
    manifest: StoreManifest,
}

pub fn open_store(path: &Path) -> Result<StoreHandle> {
    let root = if path.is_file() {
        path.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        path.to_path_buf()
    };
    let mpath = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = StoreManifest::from_json(&text)?;
    let handle = StoreHandle { root, manifest };
    let missing = handle.missing_tiles();
    if !missing.is_empty() {
        return Err(Error::MissingTiles {
            path: handle.root.clone(),
            missing,
        });
    }
    Ok(handle)
}

impl StoreHandle {
    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn tile_path(&self, plane: &PlaneEntry, col: usize, row: usize) -> PathBuf {
        self.root.join(&plane.dir).join(format!(
            "t_{col}_{row}.{}",
            self.manifest.tile_format.extension()
        ))
    }

    fn missing_tiles(&self) -> Vec<String> {
        let (cols, rows) = self.manifest.grid_dims();
        let mut missing = Vec::new();
        for p in &self.manifest.planes {
            for r in 0..rows {
                for c in 0..cols {
                    let path = self.tile_path(p, c, r);
                    if !path.is_file() {
                        missing.push(path.display().to_string());
                    }
                }
            }
        }
        missing
    }

    fn stored_tile_dims(&self, col: usize, row: usize) -> (usize, usize) {
        let t = self.manifest.tile_size_px;
        (
            t.min(self.manifest.width_px - col * t),
            t.min(self.manifest.height_px - row * t),
        )
    }

    fn load_stored_tile(&self, plane: &PlaneEntry, col: usize, row: usize) -> Result<Vec<u16>> {
        let path = self.tile_path(plane, col, row);
        let (w, h) = self.stored_tile_dims(col, row);
        match self.manifest.tile_format {
            TileFormat::Png8 => {
                let img = image::open(&path)?.to_luma8();
                if img.dimensions() != (w as u32, h as u32) {
                    return Err(Error::Store(format!(
                        "corrupt tile {}: expected {w}x{h}, found {:?}",
                        path.display(),
                        img.dimensions()
                    )));
                }
                Ok(img.into_raw().into_iter().map(u16::from).collect())
            }
            TileFormat::Raw16 => {
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                if bytes.len() != w * h * 2 {
                    return Err(Error::Store(format!(
                        "corrupt tile {}: expected {} bytes, found {}",
                        path.display(),
                        w * h * 2,
                        bytes.len()
                    )));
                }
                Ok(bytes
                    .chunks_exact(2)
                    .map(|b| u16::from_le_bytes([b[0], b[1]]))
                    .collect())
            }
        }
    }

    /// Decodes the spec's full (halo-inclusive) region.
    pub fn read_tile(&self, spec: &TileSpec) -> Result<TileImage> {
        let m = &self.manifest;
        let plane = m.plane(spec.plane_offset_um).ok_or_else(|| {
            Error::OutOfBounds(format!("no plane at {} µm", spec.plane_offset_um))
        })?;
        if spec.width_px == 0
            || spec.height_px == 0
            || spec.x0_px + spec.width_px > m.width_px
            || spec.y0_px + spec.height_px > m.height_px
        {
            return Err(Error::OutOfBounds(format!(
                "region {}x{} at ({}, {}) exceeds slide {}x{}",
                spec.width_px, spec.height_px, spec.x0_px, spec.y0_px, m.width_px, m.height_px
            )));
        }
        let t = m.tile_size_px;
        let mut data = vec![0u16; spec.width_px * spec.height_px];
        let (c0, c1) = (spec.x0_px / t, (spec.x0_px + spec.width_px - 1) / t);
        let (r0, r1) = (spec.y0_px / t, (spec.y0_px + spec.height_px - 1) / t);
        for row in r0..=r1 {
            for col in c0..=c1 {
                let tile = self.load_stored_tile(plane, col, row)?;
                let (tw, th) = self.stored_tile_dims(col, row);
                let (tx0, ty0) = (col * t, row * t);
                let x_lo = spec.x0_px.max(tx0);
                let x_hi = (spec.x0_px + spec.width_px).min(tx0 + tw);
                let y_lo = spec.y0_px.max(ty0);
                let y_hi = (spec.y0_px + spec.height_px).min(ty0 + th);
                for y in y_lo..y_hi {
                    let src = (y - ty0) * tw;
                    let dst = (y - spec.y0_px) * spec.width_px;
                    for x in x_lo..x_hi {
                        data[dst + x - spec.x0_px] = tile[src + x - tx0];
                    }
                }
            }
        }
        Ok(TileImage {
            plane_offset_um: spec.plane_offset_um,
            x0_px: spec.x0_px,
            y0_px: spec.y0_px,
            width: spec.width_px,
            height: spec.height_px,
            mpp: m.mpp,
            max_value: m.tile_format.max_value(),
            data,
        })
    }

    /// Reads an arbitrary clipped pixel window of one plane.
    pub fn read_region(
        &self,
        plane_offset_um: f64,
        x0: i64,
        y0: i64,
        w: usize,
        h: usize,
    ) -> Result<TileImage> {
        let m = &self.manifest;
        let cx0 = x0.clamp(0, m.width_px as i64) as usize;
        let cy0 = y0.clamp(0, m.height_px as i64) as usize;
        let cx1 = (x0 + w as i64).clamp(0, m.width_px as i64) as usize;
        let cy1 = (y0 + h as i64).clamp(0, m.height_px as i64) as usize;
        self.read_tile(&TileSpec {
            index: 0,
            plane_offset_um,
            x0_px: cx0,
            y0_px: cy0,
            width_px: cx1.saturating_sub(cx0),
            height_px: cy1.saturating_sub(cy0),
            halo_px: 0,
            core_x0_px: cx0,
            core_y0_px: cy0,
            core_width_px: cx1.saturating_sub(cx0),
            core_height_px: cy1.saturating_sub(cy0),
        })
    }
}

/// Writes a store from one working-resolution raster per plane (values in `[0, 1]`).
pub fn write_store(root: &Path, manifest: &StoreManifest, planes: &[GrayImage]) -> Result<StoreHandle> {
    if planes.len() != manifest.planes.len() {
        return Err(Error::Store(format!(
            "plane count mismatch: manifest lists {} planes, {} rasters given",
            manifest.planes.len(),
            planes.len()
        )));
    }
    for img in planes {
        if img.width != manifest.width_px || img.height != manifest.height_px {
            return Err(Error::Store(format!(
                "raster {}x{} does not match slide {}x{}",
                img.width, img.height, manifest.width_px, manifest.height_px
            )));
        }
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mpath = root.join(MANIFEST_FILE);
    fs::write(&mpath, manifest.to_json()?).map_err(|e| Error::io(&mpath, e))?;
    let handle = StoreHandle {
        root: root.to_path_buf(),
        manifest: manifest.clone(),
    };
    let (cols, rows) = manifest.grid_dims();
    let t = manifest.tile_size_px;
    for (plane, img) in manifest.planes.iter().zip(planes) {
        let dir = root.join(&plane.dir);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for r in 0..rows {
            for c in 0..cols {
                let (tw, th) = handle.stored_tile_dims(c, r);
                let path = handle.tile_path(plane, c, r);
                let pixels = (0..th)
                    .flat_map(|j| (0..tw).map(move |i| (c * t + i, r * t + j)))
                    .map(|(x, y)| img.get(x, y));
                match manifest.tile_format {
                    TileFormat::Png8 => {
                        let buf: Vec<u8> = pixels.map(quantize_u8).collect();
                        image::save_buffer(
                            &path,
                            &buf,
                            tw as u32,
                            th as u32,
                            image::ExtendedColorType::L8,
                        )?;
                    }
                    TileFormat::Raw16 => {
                        let buf: Vec<u8> = pixels
                            .flat_map(|v| {
                                ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_le_bytes()
                            })
                            .collect();
                        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
                    }
                }
            }
        }
    }
    Ok(handle)
}

/// Rescales native-resolution plane images to working resolution (bilinear)
/// and writes them as a store.
pub fn ingest_planes(
    root: &Path,
    slide_id: &str,
    profile: ScanProfile,
    pages: &[GrayImage],
    res: WorkingResolution,
    tile_size_px: usize,
    format: TileFormat,
) -> Result<StoreHandle> {
    let first = pages
        .first()
        .ok_or_else(|| Error::Store("no plane images to ingest".into()))?;
    if pages
        .iter()
        .any(|p| p.width != first.width || p.height != first.height)
    {
        return Err(Error::Store("plane images differ in size".into()));
    }
    let f = rescale_factor(&profile, res);
    let w = ((first.width as f64 * f).round() as usize).max(1);
    let h = ((first.height as f64 * f).round() as usize).max(1);
    let rescaled: Vec<GrayImage> = pages.iter().map(|p| p.resize_bilinear(w, h)).collect();
    let manifest = StoreManifest::new(slide_id, profile, res, w, h, tile_size_px, format)?;
    write_store(root, &manifest, &rescaled)
}
