//! Dataset bundle format and in-memory scene representation.
//!
//! A dataset is a directory of three files:
//! - `header.json`: dimensions, class names, palette, and the cube dtype
//! - `cube.bin`: `height * width * bands` little-endian f32, row-major
//!   (pixel-major, band fastest)
//! - `labels.bin`: `height * width` little-endian u16; 0 means unlabeled,
//!   classes are 1..=classes
//!
//! All writers go through [`write_atomic`] (write to a temporary name, then
//! rename), so readers never observe a half-written file.

pub mod config;
pub mod ppm;
pub mod synth;

pub use config::TrainConfig;
pub use synth::{generate_synthetic, SynthSpec};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Pixel position, `row` before `col`, both zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub row: usize,
    pub col: usize,
}

impl Coord {
    pub fn new(row: usize, col: usize) -> Self {
        Coord { row, col }
    }
}

/// In-memory hyperspectral scene with per-pixel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    /// `height * width * bands`, pixel-major with band fastest.
    pub data: Vec<f64>,
    /// `height * width`; 0 = unlabeled, 1..=classes otherwise.
    pub labels: Vec<u16>,
    pub class_names: Vec<String>,
    /// One RGB color per class (class `c` uses `palette[c - 1]`).
    pub palette: Vec<[u8; 3]>,
}

impl HsiCube {
    pub fn new(
        height: usize,
        width: usize,
        bands: usize,
        classes: usize,
        data: Vec<f64>,
        labels: Vec<u16>,
        class_names: Vec<String>,
        palette: Vec<[u8; 3]>,
    ) -> Result<Self> {
        if data.len() != height * width * bands {
            return Err(Error::Data(format!(
                "cube data has {} values, expected {} ({}x{}x{})",
                data.len(),
                height * width * bands,
                height,
                width,
                bands
            )));
        }
        if labels.len() != height * width {
            return Err(Error::Data(format!(
                "labels have {} entries, expected {}",
                labels.len(),
                height * width
            )));
        }
        if class_names.len() != classes {
            return Err(Error::Data(format!(
                "{} class names for {} classes",
                class_names.len(),
                classes
            )));
        }
        if palette.len() != classes {
            return Err(Error::Data(format!(
                "{} palette colors for {} classes",
                palette.len(),
                classes
            )));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l as usize > classes {
                return Err(Error::Data(format!(
                    "label {} at pixel ({}, {}) exceeds class count {}",
                    l,
                    i / width,
                    i % width,
                    classes
                )));
            }
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::data("cube contains non-finite values"));
        }
        Ok(HsiCube { height, width, bands, classes, data, labels, class_names, palette })
    }

    pub fn spectrum(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.width + col) * self.bands;
        &self.data[base..base + self.bands]
    }

    pub fn label(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Coordinates of every pixel carrying the given label, in scan order.
    pub fn coords_with_label(&self, label: u16) -> Vec<Coord> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if self.label(r, c) == label {
                    out.push(Coord::new(r, c));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetHeader {
    height: usize,
    width: usize,
    bands: usize,
    classes: usize,
    dtype: String,
    class_names: Vec<String>,
    #[serde(default)]
    palette: Option<Vec<[u8; 3]>>,
}

/// Writes bytes to `path` via a temporary sibling and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".to_string(),
    });
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Deterministic palette: evenly spaced hues at fixed saturation/value.
pub fn default_palette(classes: usize) -> Vec<[u8; 3]> {
    (0..classes)
        .map(|c| {
            let h = 360.0 * c as f64 / classes as f64;
            hsv_to_rgb(h, 0.65, 0.95)
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// Writes `header.json`, `cube.bin` (f32 LE), and `labels.bin` (u16 LE)
/// into `dir`, creating it if needed.
pub fn save_dataset(cube: &HsiCube, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = DatasetHeader {
        height: cube.height,
        width: cube.width,
        bands: cube.bands,
        classes: cube.classes,
        dtype: "f32le".to_string(),
        class_names: cube.class_names.clone(),
        palette: Some(cube.palette.clone()),
    };
    let header_json = serde_json::to_vec_pretty(&header)
        .map_err(|e| Error::Data(format!("header serialization failed: {e}")))?;
    write_atomic(&dir.join("header.json"), &header_json)?;

    let mut cube_bytes = Vec::with_capacity(cube.data.len() * 4);
    for &v in &cube.data {
        cube_bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(&dir.join("cube.bin"), &cube_bytes)?;

    let mut label_bytes = Vec::with_capacity(cube.labels.len() * 2);
    for &l in &cube.labels {
        label_bytes.extend_from_slice(&l.to_le_bytes());
    }
    write_atomic(&dir.join("labels.bin"), &label_bytes)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<HsiCube> {
    let header_path = dir.join("header.json");
    let header_bytes = fs::read(&header_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", header_path.display())))?;
    let header: DatasetHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Data(format!("invalid header.json: {e}")))?;
    if header.dtype != "f32le" {
        return Err(Error::Data(format!(
            "unknown cube dtype {:?} (this reader supports \"f32le\")",
            header.dtype
        )));
    }

    let cube_bytes = fs::read(dir.join("cube.bin"))?;
    let expected = header.height * header.width * header.bands * 4;
    if cube_bytes.len() != expected {
        return Err(Error::Data(format!(
            "cube.bin is {} bytes, expected {}",
            cube_bytes.len(),
            expected
        )));
    }
    let data: Vec<f64> = cube_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();

    let label_bytes = fs::read(dir.join("labels.bin"))?;
    let expected = header.height * header.width * 2;
    if label_bytes.len() != expected {
        return Err(Error::Data(format!(
            "labels.bin is {} bytes, expected {}",
            label_bytes.len(),
            expected
        )));
    }
    let labels: Vec<u16> = label_bytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();

    let palette = match header.palette {
        Some(p) => p,
        None => default_palette(header.classes),
    };
    HsiCube::new(
        header.height,
        header.width,
        header.bands,
        header.classes,
        data,
        labels,
        header.class_names,
        palette,
    )
}
