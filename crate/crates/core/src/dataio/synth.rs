//! Synthetic labeled scenes for benchmarks and tests.
//!
//! Spatial structure comes from a Voronoi partition: each class owns
//! `regions_per_class` randomly placed sites, and every pixel takes the
//! class of its nearest site (ties to the lower site index). Each class has
//! a smooth spectral signature (a short sum of random sinusoids rescaled to
//! [0.2, 0.8]); pixels emit their class signature plus i.i.d. Gaussian
//! noise, optionally blended toward the nearest other-class signature near
//! region boundaries.
//!
//! Generation is a pure function of the parameter set: the same
//! [`SynthSpec`] (including its seed) reproduces the same scene bit for bit.

use super::{default_palette, HsiCube};
use crate::numkit::{rng::stream, SeededRng};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    pub regions_per_class: usize,
    /// In (0, 1]; 1.0 limits signatures to about one cycle across the
    /// spectrum, smaller values admit faster oscillation.
    pub smoothness: f64,
    /// Per-band Gaussian noise standard deviation (>= 0).
    pub sigma: f64,
    /// In [0, 1]; 0 disables boundary blending. At a region border the
    /// foreign-signature weight approaches `boundary_mix / 2`.
    pub boundary_mix: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            height: 64,
            width: 64,
            bands: 32,
            classes: 7,
            regions_per_class: 3,
            smoothness: 0.7,
            sigma: 0.05,
            boundary_mix: 0.0,
            seed: 1,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::config("synthetic scene: dimensions must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("synthetic scene: needs at least 2 classes"));
        }
        if self.regions_per_class == 0 {
            return Err(Error::config("synthetic scene: regions_per_class must be >= 1"));
        }
        if !(self.smoothness > 0.0 && self.smoothness <= 1.0) {
            return Err(Error::config("synthetic scene: smoothness must be in (0, 1]"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("synthetic scene: sigma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.boundary_mix) {
            return Err(Error::config("synthetic scene: boundary_mix must be in [0, 1]"));
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<HsiCube> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed).derive(stream::SYNTH);
    let (h, w, b, c) = (spec.height, spec.width, spec.bands, spec.classes);

    // Sites, grouped by class: site s belongs to class s / regions_per_class.
    let n_sites = c * spec.regions_per_class;
    let sites: Vec<(usize, usize)> = (0..n_sites)
        .map(|_| (rng.below(h), rng.below(w)))
        .collect();
    let site_class = |s: usize| s / spec.regions_per_class;

    // Per-class signatures: three random harmonics, rescaled to [0.2, 0.8].
    let max_freq = 1.0 + 3.0 * (1.0 - spec.smoothness);
    let mut signatures = Vec::with_capacity(c);
    for _ in 0..c {
        let harmonics: Vec<(f64, f64, f64)> = (1..=3)
            .map(|i| {
                (
                    rng.uniform(0.3, 1.0) / i as f64,
                    rng.uniform(0.5, max_freq.max(0.6)),
                    rng.uniform(0.0, std::f64::consts::TAU),
                )
            })
            .collect();
        let denom = if b > 1 { (b - 1) as f64 } else { 1.0 };
        let mut sig: Vec<f64> = (0..b)
            .map(|bi| {
                let t = bi as f64 / denom;
                harmonics
                    .iter()
                    .map(|&(a, f, p)| a * (std::f64::consts::TAU * f * t + p).sin())
                    .sum()
            })
            .collect();
        let lo = sig.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = sig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > 1e-12 {
            for v in sig.iter_mut() {
                *v = 0.2 + 0.6 * (*v - lo) / (hi - lo);
            }
        } else {
            for v in sig.iter_mut() {
                *v = 0.5;
            }
        }
        signatures.push(sig);
    }

    let mut data = vec![0.0; h * w * b];
    let mut labels = vec![0u16; h * w];
    for r in 0..h {
        for col in 0..w {
            // Nearest site overall, then nearest site of any other class.
            let mut d1 = f64::INFINITY;
            let mut s1 = 0usize;
            for (s, &(sr, sc)) in sites.iter().enumerate() {
                let d = dist2(r, col, sr, sc);
                if d < d1 {
                    d1 = d;
                    s1 = s;
                }
            }
            let own = site_class(s1);
            let mut d2 = f64::INFINITY;
            let mut s2 = s1;
            for (s, &(sr, sc)) in sites.iter().enumerate() {
                if site_class(s) == own {
                    continue;
                }
                let d = dist2(r, col, sr, sc);
                if d < d2 {
                    d2 = d;
                    s2 = s;
                }
            }
            labels[r * w + col] = (own + 1) as u16;

            let (d1, d2) = (d1.sqrt(), d2.sqrt());
            let alpha = if spec.boundary_mix > 0.0 && d2.is_finite() && d1 + d2 > 0.0 {
                spec.boundary_mix * d1 / (d1 + d2)
            } else {
                0.0
            };
            let (own_sig, other_sig) = (&signatures[own], &signatures[site_class(s2)]);
            let base = (r * w + col) * b;
            for bi in 0..b {
                let clean = (1.0 - alpha) * own_sig[bi] + alpha * other_sig[bi];
                let noise = if spec.sigma > 0.0 { spec.sigma * rng.standard_normal() } else { 0.0 };
                // Quantize through the storage dtype so a generated scene is
                // identical to the same scene after a save/load round trip.
                data[base + bi] = (clean + noise) as f32 as f64;
            }
        }
    }

    let class_names = (1..=c).map(|i| format!("class_{i}")).collect();
    HsiCube::new(h, w, b, c, data, labels, class_names, default_palette(c))
}

fn dist2(r: usize, c: usize, sr: usize, sc: usize) -> f64 {
    let dr = r as f64 - sr as f64;
    let dc = c as f64 - sc as f64;
    dr * dr + dc * dc
}
