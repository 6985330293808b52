//! Synthetic field generator with rule-based ground truth.
//!
//! Sites are placed at the highest composite score (flow accumulation plus
//! slope) inside each tile of a regular grid and drawn as disks. The disk
//! radius is chosen so the background/foreground ratio sits near a target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::terrain::{derive_terrain, flow_accumulation_d8, log_scale, synth_dem, Raster};
use super::{FieldStack, STACK_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Desired background/foreground pixel ratio.
    pub target_ratio: f64,
    /// Accepted ratio interval; the radius search stays inside it.
    pub ratio_bounds: (f64, f64),
    /// Edge of the square tiles that each receive one site.
    pub tile: usize,
    /// Weight of flow accumulation in the composite score (slope gets the rest).
    pub flow_weight: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            target_ratio: 120.0,
            ratio_bounds: (30.0, 800.0),
            tile: 256,
            flow_weight: 0.6,
        }
    }
}

/// Synthetic field with the default [`SynthSpec`].
pub fn synth_field(height: usize, width: usize, seed: u64) -> Result<FieldStack> {
    synth_field_with(height, width, seed, &SynthSpec::default())
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

pub fn synth_field_with(height: usize, width: usize, seed: u64, spec: &SynthSpec) -> Result<FieldStack> {
    if height < 3 || width < 3 {
        return Err(Error::config(format!("synthetic field must be at least 3x3, got {height}x{width}")));
    }
    if spec.tile == 0 || !(spec.ratio_bounds.0 < spec.ratio_bounds.1) {
        return Err(Error::config("synthetic tile must be >= 1 and ratio bounds increasing"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_hills = rng.gen_range(3..7);
    let dem = synth_dem(height, width, n_hills, rng.gen());
    let (slope, aspect) = derive_terrain(&dem);
    let flow = log_scale(&flow_accumulation_d8(&dem), height, width);
    let vigor = synth_dem(height, width, 4, rng.gen());
    let ndvi = Raster::from_fn(height, width, |r, c| {
        0.55 * vigor.get(r, c) + 0.45 * (1.0 - slope.get(r, c))
    })
    .normalized();
    let yield_ = Raster::from_fn(height, width, |r, c| {
        0.5 * ndvi.get(r, c) + 0.3 * vigor.get(r, c) + 0.2 * (1.0 - slope.get(r, c))
    })
    .normalized();

    let score = Raster::from_fn(height, width, |r, c| {
        spec.flow_weight * flow.get(r, c) + (1.0 - spec.flow_weight) * slope.get(r, c)
    });
    let sites = tile_maxima(&score, spec.tile);
    let mask = fit_disks(height, width, &sites, spec);

    let n = height * width;
    let mut data = Vec::with_capacity(STACK_CHANNELS * n);
    for raster in [&aspect, &flow, &slope, &ndvi, &yield_] {
        let band: Vec<f32> = raster.data.iter().map(|&v| quantize(v)).collect();
        for _ in 0..3 {
            data.extend_from_slice(&band);
        }
    }
    let attributes = Tensor::new(&[STACK_CHANNELS, height, width], data)?;
    FieldStack::new(format!("synth{seed}"), attributes, mask)
}

/// Argmax of `score` inside every `tile x tile` block (first index wins ties).
fn tile_maxima(score: &Raster, tile: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r0 in (0..score.height).step_by(tile) {
        for c0 in (0..score.width).step_by(tile) {
            let mut best = (f64::NEG_INFINITY, (r0, c0));
            for r in r0..(r0 + tile).min(score.height) {
                for c in c0..(c0 + tile).min(score.width) {
                    if score.get(r, c) > best.0 {
                        best = (score.get(r, c), (r, c));
                    }
                }
            }
            out.push(best.1);
        }
    }
    out
}

fn draw_disks(height: usize, width: usize, sites: &[(usize, usize)], radius: f64) -> Vec<u8> {
    let mut mask = vec![0u8; height * width];
    let r2 = radius * radius;
    let reach = radius.ceil() as isize;
    for &(sr, sc) in sites {
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (r, c) = (sr as isize + dr, sc as isize + dc);
                if r < 0 || c < 0 || r >= height as isize || c >= width as isize {
                    continue;
                }
                if (dr * dr + dc * dc) as f64 <= r2 {
                    mask[r as usize * width + c as usize] = 1;
                }
            }
        }
    }
    mask
}

fn ratio(mask: &[u8]) -> f64 {
    let fg = mask.iter().filter(|&&v| v == 1).count();
    (mask.len() - fg) as f64 / fg.max(1) as f64
}

/// Radius whose ratio is closest to the target, preferring radii inside the bounds.
fn fit_disks(height: usize, width: usize, sites: &[(usize, usize)], spec: &SynthSpec) -> Vec<u8> {
    let mut best: Option<(bool, f64, Vec<u8>)> = None;
    let max_radius = height.max(width) as f64;
    let mut radius = 0.0;
    while radius <= max_radius {
        let mask = draw_disks(height, width, sites, radius);
        let q = ratio(&mask);
        let inside = q >= spec.ratio_bounds.0 && q <= spec.ratio_bounds.1;
        let err = (q.ln() - spec.target_ratio.ln()).abs();
        let better = match &best {
            None => true,
            Some((bi, be, _)) => (inside && !bi) || (inside == *bi && err < *be),
        };
        if better {
            best = Some((inside, err, mask));
        }
        if q < spec.target_ratio.min(spec.ratio_bounds.0) {
            break;
        }
        radius += 0.5;
    }
    best.map(|b| b.2).unwrap_or_else(|| draw_disks(height, width, sites, 0.0))
}
