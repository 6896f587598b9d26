//! Figure-style outputs: slice montages, variance heatmaps and the
//! checkerboard deformation visualization. All renders are deterministic:
//! identical inputs give byte-identical PNG payloads.

use std::io::Cursor;

use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};
use crate::field::DenseField;
use crate::volume::Volume;

/// Default soft-tissue display window in HU.
pub const DEFAULT_HU_WINDOW: (f64, f64) = (-160.0, 240.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl std::str::FromStr for Plane {
    type Err = AtlasError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            other => Err(AtlasError::InvalidConfig(format!("unknown plane {other:?}"))),
        }
    }
}

/// Extract a 2-D slice as `(width, height, values)`.
fn slice_values(v: &Volume, plane: Plane, slice_frac: f64) -> (usize, usize, Vec<f32>) {
    let [nx, ny, nz] = v.geom.dims;
    let pick = |n: usize| -> usize {
        ((slice_frac.clamp(0.0, 1.0) * (n as f64 - 1.0)).round()) as usize
    };
    match plane {
        Plane::Axial => {
            let z = pick(nz);
            let mut out = Vec::with_capacity(nx * ny);
            for y in 0..ny {
                for x in 0..nx {
                    out.push(v.at(x, y, z));
                }
            }
            (nx, ny, out)
        }
        Plane::Coronal => {
            let y = pick(ny);
            let mut out = Vec::with_capacity(nx * nz);
            for z in 0..nz {
                for x in 0..nx {
                    out.push(v.at(x, y, z));
                }
            }
            (nx, nz, out)
        }
        Plane::Sagittal => {
            let x = pick(nx);
            let mut out = Vec::with_capacity(ny * nz);
            for z in 0..nz {
                for y in 0..ny {
                    out.push(v.at(x, y, z));
                }
            }
            (ny, nz, out)
        }
    }
}

/// Linear HU windowing into 0..=255, clamped at the window ends.
#[inline]
fn window_to_u8(v: f64, window: (f64, f64)) -> u8 {
    let (lo, hi) = window;
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

fn encode_png_gray(img: GrayImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| AtlasError::Png(e.to_string()))?;
    Ok(bytes)
}

fn encode_png_rgb(img: RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| AtlasError::Png(e.to_string()))?;
    Ok(bytes)
}

/// Grayscale montage, one tile per volume laid out left to right; all
/// volumes must share a geometry.
pub fn render_montage(
    volumes: &[&Volume],
    plane: Plane,
    slice_frac: f64,
    hu_window: (f64, f64),
) -> Result<Vec<u8>> {
    if volumes.is_empty() {
        return Err(AtlasError::EmptyInput("no volumes to render"));
    }
    if hu_window.1 <= hu_window.0 {
        return Err(AtlasError::InvalidConfig("empty HU window".into()));
    }
    for v in &volumes[1..] {
        if !v.geom.approx_eq(&volumes[0].geom, 1e-6) {
            return Err(AtlasError::GeometryMismatch {
                context: "montage volumes",
            });
        }
    }
    let tiles: Vec<(usize, usize, Vec<f32>)> = volumes
        .iter()
        .map(|v| slice_values(v, plane, slice_frac))
        .collect();
    let (tw, th) = (tiles[0].0, tiles[0].1);
    let mut img = GrayImage::new((tw * tiles.len()) as u32, th as u32);
    for (t, (w, _, vals)) in tiles.iter().enumerate() {
        for y in 0..th {
            for x in 0..*w {
                let px = window_to_u8(f64::from(vals[x + w * y]), hu_window);
                img.put_pixel((t * tw + x) as u32, y as u32, image::Luma([px]));
            }
        }
    }
    encode_png_gray(img)
}

/// Three-stop variance ramp: yellow at zero through orange at `vmax / 2` to
/// red at `vmax`; values above `vmax` clamp to red.
#[inline]
pub fn variance_color(v: f64, vmax: f64) -> [u8; 3] {
    let t = (v / vmax).clamp(0.0, 1.0);
    let g = if t <= 0.5 {
        // yellow (255,255,0) -> orange (255,128,0)
        255.0 - (t / 0.5) * 127.0
    } else {
        // orange -> red (255,0,0)
        128.0 - ((t - 0.5) / 0.5) * 128.0
    };
    [255, g.round() as u8, 0]
}

pub fn render_variance_heatmap(
    variance: &Volume,
    plane: Plane,
    slice_frac: f64,
    vmax: f64,
) -> Result<Vec<u8>> {
    if vmax <= 0.0 {
        return Err(AtlasError::InvalidConfig(format!("vmax {vmax} must be > 0")));
    }
    let (w, h, vals) = slice_values(variance, plane, slice_frac);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let c = variance_color(f64::from(vals[x + w * y]), vmax);
            img.put_pixel(x as u32, y as u32, image::Rgb(c));
        }
    }
    encode_png_rgb(img)
}

/// Base color of a checkerboard cell: hue varies with the column, lightness
/// with the row. A pure function of `(col, row)` so corresponding cells in
/// atlas-space and deformed renders are identical.
pub fn cell_color(col: i64, row: i64) -> [u8; 3] {
    let hue = ((col.rem_euclid(12)) as f64) * 30.0;
    let light = 0.3 + 0.45 * ((row.rem_euclid(8)) as f64) / 7.0;
    hsl_to_rgb(hue, 0.85, light)
}

fn hsl_to_rgb(h: f64, s: f64, l: f64) -> [u8; 3] {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as i64 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// In-plane checkerboard pulled through the displacement field: each output
/// pixel takes the color of the checkerboard cell at its field-displaced
/// in-plane position, so bent cell borders trace the deformation.
pub fn render_checkerboard_deformation(
    field: &DenseField,
    plane: Plane,
    slice_index: usize,
    cell_px: usize,
) -> Result<Vec<u8>> {
    if cell_px == 0 {
        return Err(AtlasError::InvalidConfig("cell_px must be positive".into()));
    }
    let [nx, ny, nz] = field.geom.dims;
    let (w, h, axes) = match plane {
        Plane::Axial => {
            if slice_index >= nz {
                return Err(AtlasError::InvalidConfig(format!(
                    "slice {slice_index} out of {nz}"
                )));
            }
            (nx, ny, (0usize, 1usize))
        }
        Plane::Coronal => {
            if slice_index >= ny {
                return Err(AtlasError::InvalidConfig(format!(
                    "slice {slice_index} out of {ny}"
                )));
            }
            (nx, nz, (0usize, 2usize))
        }
        Plane::Sagittal => {
            if slice_index >= nx {
                return Err(AtlasError::InvalidConfig(format!(
                    "slice {slice_index} out of {nx}"
                )));
            }
            (ny, nz, (1usize, 2usize))
        }
    };
    let voxel = |i: usize, j: usize| -> [usize; 3] {
        match plane {
            Plane::Axial => [i, j, slice_index],
            Plane::Coronal => [i, slice_index, j],
            Plane::Sagittal => [slice_index, i, j],
        }
    };
    let mut img = RgbImage::new(w as u32, h as u32);
    for j in 0..h {
        for i in 0..w {
            let [x, y, z] = voxel(i, j);
            let d = field.at(x, y, z);
            let pi = i as f64 + f64::from(d[axes.0]);
            let pj = j as f64 + f64::from(d[axes.1]);
            let col = (pi / cell_px as f64).floor() as i64;
            let row = (pj / cell_px as f64).floor() as i64;
            img.put_pixel(i as u32, j as u32, image::Rgb(cell_color(col, row)));
        }
    }
    encode_png_rgb(img)
}
