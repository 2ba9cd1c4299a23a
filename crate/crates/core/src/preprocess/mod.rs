//! Scene preparation: band-wise normalization, PCA projection, patch
//! extraction with mirror padding, and per-class train/test splits.

pub mod pca;

pub use pca::{fit_pca, jacobi_eigh, PcaModel};

use crate::dataio::{Coord, HsiCube};
use crate::numkit::{SeededRng, Tensor};
use crate::{Error, Result};

/// Rescales every band to [0, 1] by its own min/max over all pixels;
/// constant bands map to zero. Idempotent.
pub fn normalize_bands(cube: &HsiCube) -> HsiCube {
    let b = cube.bands;
    let px = cube.height * cube.width;
    let mut lo = vec![f64::INFINITY; b];
    let mut hi = vec![f64::NEG_INFINITY; b];
    for i in 0..px {
        for bi in 0..b {
            let v = cube.data[i * b + bi];
            lo[bi] = lo[bi].min(v);
            hi[bi] = hi[bi].max(v);
        }
    }
    let mut out = cube.clone();
    for i in 0..px {
        for bi in 0..b {
            let span = hi[bi] - lo[bi];
            out.data[i * b + bi] = if span > 0.0 {
                (cube.data[i * b + bi] - lo[bi]) / span
            } else {
                0.0
            };
        }
    }
    out
}

/// Matrix of spectra for the given pixels, one row per coordinate.
pub fn spectra_matrix(cube: &HsiCube, coords: &[Coord]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(coords.len() * cube.bands);
    for c in coords {
        if c.row >= cube.height || c.col >= cube.width {
            return Err(Error::Contract(format!(
                "pixel ({}, {}) outside a {}x{} scene",
                c.row, c.col, cube.height, cube.width
            )));
        }
        data.extend_from_slice(cube.spectrum(c.row, c.col));
    }
    Tensor::from_vec(&[coords.len(), cube.bands], data)
}

/// PCA score planes for a whole scene, cached so repeated patch extraction
/// does not re-project the cube.
#[derive(Debug, Clone)]
pub struct ProjectedCube {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Pixel-major, channel fastest.
    scores: Vec<f64>,
}

impl ProjectedCube {
    pub fn new(cube: &HsiCube, pca: &PcaModel) -> Result<Self> {
        let coords: Vec<Coord> = (0..cube.height)
            .flat_map(|r| (0..cube.width).map(move |c| Coord::new(r, c)))
            .collect();
        let spectra = spectra_matrix(cube, &coords)?;
        let scores = pca.project(&spectra)?;
        let channels = scores.shape()[1];
        Ok(ProjectedCube {
            height: cube.height,
            width: cube.width,
            channels,
            scores: scores.into_data(),
        })
    }

    fn score(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.scores[(row * self.width + col) * self.channels + ch]
    }
}

/// Mirror-reflect an offset position into [0, n) without repeating the edge
/// sample; valid for |offset| <= n - 1.
fn reflect(pos: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if pos < 0 { -pos } else if pos >= n { 2 * n - 2 - pos } else { pos };
    r as usize
}

/// Per-pixel inputs for the two encoder streams: full spectra `[n, bands]`
/// and PCA patch stacks `[n, channels, w, w]` cut around each coordinate
/// with mirror padding at scene borders.
pub fn extract_patches(
    cube: &HsiCube,
    projected: &ProjectedCube,
    coords: &[Coord],
    w: usize,
) -> Result<(Tensor, Tensor)> {
    if w % 2 == 0 || w == 0 {
        return Err(Error::Contract(format!("extract_patches: w = {w} must be odd")));
    }
    let pad = w / 2;
    if pad + 1 > cube.height || pad + 1 > cube.width {
        return Err(Error::Contract(format!(
            "extract_patches: w = {} too large for a {}x{} scene",
            w, cube.height, cube.width
        )));
    }
    let x_b = spectra_matrix(cube, coords)?;
    let ch = projected.channels;
    let mut x_p = vec![0.0; coords.len() * ch * w * w];
    for (i, c) in coords.iter().enumerate() {
        for cc in 0..ch {
            for dr in 0..w {
                let rr = reflect(c.row as isize + dr as isize - pad as isize, cube.height);
                for dc in 0..w {
                    let col = reflect(c.col as isize + dc as isize - pad as isize, cube.width);
                    x_p[((i * ch + cc) * w + dr) * w + dc] = projected.score(rr, col, cc);
                }
            }
        }
    }
    Ok((x_b, Tensor::from_vec(&[coords.len(), ch, w, w], x_p)?))
}

/// Draws `per_class` labeled pixels per class for training (uniformly,
/// via the supplied RNG); every other labeled pixel becomes test. Both
/// lists come back in scan order.
pub fn split_samples(
    cube: &HsiCube,
    per_class: usize,
    rng: &mut SeededRng,
) -> Result<(Vec<Coord>, Vec<Coord>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 1..=cube.classes as u16 {
        let mut coords = cube.coords_with_label(class);
        if coords.len() < per_class {
            let name = &cube.class_names[class as usize - 1];
            return Err(Error::Data(format!(
                "class {} ({}) has {} labeled pixels, fewer than per_class = {}",
                class,
                name,
                coords.len(),
                per_class
            )));
        }
        rng.shuffle(&mut coords);
        train.extend_from_slice(&coords[..per_class]);
        test.extend_from_slice(&coords[per_class..]);
    }
    train.sort();
    test.sort();
    Ok((train, test))
}
