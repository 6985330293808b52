//! Synthetic elevation, slope/aspect and D8 flow accumulation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-major single-band raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width, "raster size mismatch");
        Raster { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Raster { height, width, data }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Affine rescale to `[0, 1]`; a constant raster becomes all zeros.
    pub fn normalized(&self) -> Raster {
        let lo = self.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let data = if span > 0.0 {
            self.data.iter().map(|v| (v - lo) / span).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Raster::new(self.height, self.width, data)
    }
}

/// A Gaussian bump.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hill {
    pub row: f64,
    pub col: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

/// Sum of the given bumps, without noise or normalization.
pub fn dem_from_hills(height: usize, width: usize, hills: &[Hill]) -> Raster {
    Raster::from_fn(height, width, |r, c| {
        hills
            .iter()
            .map(|h| {
                let d2 = (r as f64 - h.row).powi(2) + (c as f64 - h.col).powi(2);
                h.amplitude * (-d2 / (2.0 * h.sigma * h.sigma)).exp()
            })
            .sum()
    })
}

/// Seeded Gaussian hills plus low-amplitude smooth noise, normalized to `[0, 1]`.
pub fn synth_dem(height: usize, width: usize, n_hills: usize, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = height.min(width) as f64;
    let hills: Vec<Hill> = (0..n_hills.max(1))
        .map(|_| Hill {
            row: rng.gen_range(0.0..height as f64),
            col: rng.gen_range(0.0..width as f64),
            sigma: rng.gen_range(0.08..0.25) * scale,
            amplitude: rng.gen_range(0.5..1.0),
        })
        .collect();
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..3.0) / height as f64,
                rng.gen_range(0.5..3.0) / width as f64,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.01..0.05),
            )
        })
        .collect();
    let base = dem_from_hills(height, width, &hills);
    let tau = std::f64::consts::TAU;
    Raster::from_fn(height, width, |r, c| {
        let noise: f64 = waves
            .iter()
            .map(|&(fr, fc, ph, a)| a * (tau * (fr * r as f64 + fc * c as f64) + ph).sin())
            .sum();
        base.get(r, c) + noise
    })
    .normalized()
}

/// Central-difference slope and aspect, both mapped to `[0, 1]`.
///
/// Columns run east and rows run south. Aspect is the steepest-descent
/// direction measured clockwise from north, divided by 360; flat cells get 0.
/// Slope is the gradient magnitude divided by its maximum.
pub fn derive_terrain(dem: &Raster) -> (Raster, Raster) {
    let (h, w) = (dem.height, dem.width);
    let diff = |lo: f64, hi: f64, span: usize| if span == 0 { 0.0 } else { (hi - lo) / span as f64 };
    let mut mag = vec![0.0; h * w];
    let mut aspect = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (c0, c1) = (c.saturating_sub(1), (c + 1).min(w - 1));
            let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h - 1));
            let east = diff(dem.get(r, c0), dem.get(r, c1), c1 - c0);
            let north = diff(dem.get(r1, c), dem.get(r0, c), r1 - r0);
            let m = east.hypot(north);
            mag[r * w + c] = m;
            if m > 1e-12 {
                let deg = (-east).atan2(-north).to_degrees();
                aspect[r * w + c] = deg.rem_euclid(360.0) / 360.0;
            }
        }
    }
    let max = mag.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        mag.iter_mut().for_each(|v| *v /= max);
    }
    (Raster::new(h, w, mag), Raster::new(h, w, aspect))
}

/// Neighbor offsets `(drow, dcol)` in tie-break order N, NE, E, SE, S, SW, W, NW.
pub const D8_OFFSETS: [(isize, isize); 8] = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)];

/// Receiver of every cell under steepest descent, or `None` for pits and flats.
pub fn d8_receivers(dem: &Raster) -> Vec<Option<usize>> {
    let (h, w) = (dem.height as isize, dem.width as isize);
    let mut out = vec![None; dem.data.len()];
    for r in 0..h {
        for c in 0..w {
            let z = dem.get(r as usize, c as usize);
            let mut best: Option<(f64, usize)> = None;
            for &(dr, dc) in &D8_OFFSETS {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h || nc >= w {
                    continue;
                }
                let dist = if dr != 0 && dc != 0 { std::f64::consts::SQRT_2 } else { 1.0 };
                let drop = (z - dem.get(nr as usize, nc as usize)) / dist;
                if drop > 0.0 && best.map_or(true, |(b, _)| drop > b) {
                    best = Some((drop, (nr * w + nc) as usize));
                }
            }
            out[(r * w + c) as usize] = best.map(|(_, i)| i);
        }
    }
    out
}

/// Number of cells draining through each cell, counting the cell itself.
pub fn flow_accumulation_d8(dem: &Raster) -> Vec<u32> {
    let receivers = d8_receivers(dem);
    let mut order: Vec<usize> = (0..dem.data.len()).collect();
    // Stable sort: equal elevations never drain into each other.
    order.sort_by(|&a, &b| dem.data[b].total_cmp(&dem.data[a]));
    let mut acc = vec![1u32; dem.data.len()];
    for &i in &order {
        if let Some(j) = receivers[i] {
            acc[j] += acc[i];
        }
    }
    acc
}

/// `ln(acc) / ln(max acc)`, or zeros when every cell holds 1.
pub fn log_scale(acc: &[u32], height: usize, width: usize) -> Raster {
    let max = acc.iter().copied().max().unwrap_or(1);
    let denom = (max as f64).ln();
    let data = acc
        .iter()
        .map(|&a| if denom > 0.0 { (a as f64).ln() / denom } else { 0.0 })
        .collect();
    Raster::new(height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aspect_of_planes() {
        let east_up = Raster::from_fn(5, 5, |_, c| c as f64);
        let (slope, aspect) = derive_terrain(&east_up);
        assert!(aspect.data.iter().all(|&a| (a * 360.0 - 270.0).abs() < 1e-9));
        assert!(slope.data.iter().all(|&s| (s - 1.0).abs() < 1e-12));
        let north_up = Raster::from_fn(5, 5, |r, _| -(r as f64));
        let (_, a2) = derive_terrain(&north_up);
        assert!(a2.data.iter().all(|&a| (a * 360.0 - 180.0).abs() < 1e-9));
    }

    #[test]
    fn flat_dem() {
        let flat = Raster::from_fn(4, 4, |_, _| 2.0);
        let (slope, aspect) = derive_terrain(&flat);
        assert!(slope.data.iter().chain(&aspect.data).all(|&v| v == 0.0));
        assert!(flow_accumulation_d8(&flat).iter().all(|&a| a == 1));
    }

    #[test]
    fn single_centered_hill_peaks_at_center() {
        let hill = Hill {
            row: 10.0,
            col: 12.0,
            sigma: 4.0,
            amplitude: 1.0,
        };
        let dem = dem_from_hills(21, 25, &[hill]);
        let argmax = dem
            .data
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 10 * 25 + 12);
        assert_eq!(dem.data.iter().filter(|&&v| v == dem.data[argmax]).count(), 1);
    }

    #[test]
    fn synth_dem_deterministic_and_normalized() {
        let a = synth_dem(40, 50, 3, 9);
        assert_eq!(a, synth_dem(40, 50, 3, 9));
        assert_ne!(a, synth_dem(40, 50, 3, 10));
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn log_scale_bounds() {
        let r = log_scale(&[1, 4, 16], 1, 3);
        assert_eq!(r.data[0], 0.0);
        assert!((r.data[1] - 0.5).abs() < 1e-12);
        assert_eq!(r.data[2], 1.0);
    }
}
