//! Synthetic post-polish height maps for layouts without measured topography.
//!
//! Erosion is modeled as proportional to Gaussian-smoothed local copper
//! density, dishing as a fixed recess on every copper pixel, plus optional
//! seeded uniform noise:
//!
//! ```text
//! height = −max_erosion · G_σ(raster) − dishing · raster + noise
//! ```

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Grid2D;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    /// Gaussian width in pixels; sets the planarization length.
    pub planarization_sigma: f64,
    pub max_erosion_nm: f64,
    pub dishing_amp_nm: f64,
    pub noise_amp_nm: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            planarization_sigma: 8.0,
            max_erosion_nm: 40.0,
            dishing_amp_nm: 3.0,
            noise_amp_nm: 0.5,
            seed: 42,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.planarization_sigma > 0.0 && self.planarization_sigma.is_finite()) {
            return Err(Error::invalid("sigma", format!("{} must be positive", self.planarization_sigma)));
        }
        for (name, v) in [
            ("max erosion", self.max_erosion_nm),
            ("dishing amplitude", self.dishing_amp_nm),
            ("noise amplitude", self.noise_amp_nm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("{v} must be non-negative")));
            }
        }
        Ok(())
    }

    /// The `oracle.txt` provenance record.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "planarization_sigma {}", self.planarization_sigma);
        let _ = writeln!(s, "max_erosion_nm {}", self.max_erosion_nm);
        let _ = writeln!(s, "dishing_amp_nm {}", self.dishing_amp_nm);
        let _ = writeln!(s, "noise_amp_nm {}", self.noise_amp_nm);
        let _ = writeln!(s, "seed {}", self.seed);
        s
    }
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(grid: &Grid2D, sigma: f64) -> Result<Grid2D> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma", format!("{sigma} must be positive")));
    }
    let taps = gaussian_kernel(sigma);
    let r = (taps.len() / 2) as isize;
    let (h, w) = (grid.height(), grid.width());
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    let src = grid.values();
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..w {
            rows[y * w + x] = taps.iter().zip(-r..=r).map(|(t, d)| t * line[clamp(x as isize + d, w)]).sum();
        }
    }
    let mut out = grid.clone();
    let dst = out.values_mut();
    for y in 0..h {
        for x in 0..w {
            dst[y * w + x] = taps.iter().zip(-r..=r).map(|(t, d)| t * rows[clamp(y as isize + d, h) * w + x]).sum();
        }
    }
    Ok(out)
}

/// Height map in nm for a binary layout raster.
pub fn generate(raster: &Grid2D, cfg: &OracleConfig) -> Result<Grid2D> {
    cfg.validate()?;
    if !raster.is_binary() {
        return Err(Error::invalid("raster", "oracle input must be binary"));
    }
    let density = gaussian_blur(raster, cfg.planarization_sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = density;
    for (h, &copper) in out.values_mut().iter_mut().zip(raster.values()) {
        let noise = if cfg.noise_amp_nm > 0.0 { rng.gen_range(-cfg.noise_amp_nm..=cfg.noise_amp_nm) } else { 0.0 };
        *h = -cfg.max_erosion_nm * *h - cfg.dishing_amp_nm * copper + noise;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{dihedral, AUGMENTATIONS};

    fn quiet() -> OracleConfig {
        OracleConfig { noise_amp_nm: 0.0, ..Default::default() }
    }

    #[test]
    fn flat_dies() {
        let oxide = Grid2D::filled(20, 30, 1.0, 0.0).unwrap();
        assert!(generate(&oxide, &quiet()).unwrap().values().iter().all(|&v| v == 0.0));
        let copper = Grid2D::filled(20, 30, 1.0, 1.0).unwrap();
        for &v in generate(&copper, &quiet()).unwrap().values() {
            assert!((v + 43.0).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn rejects_non_binary() {
        let g = Grid2D::filled(4, 4, 1.0, 0.5).unwrap();
        assert!(generate(&g, &quiet()).is_err());
        assert!(gaussian_blur(&g, 0.0).is_err());
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let g = Grid2D::filled(9, 13, 1.0, 2.5).unwrap();
        for &v in gaussian_blur(&g, 1.7).unwrap().values() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(2.2);
        assert_eq!(k.len(), 2 * 7 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..k.len() {
            assert_eq!(k[i], k[k.len() - 1 - i]);
        }
    }

    #[test]
    fn impulse_response_is_dihedral_symmetric_and_mass_preserving() {
        let n = 41;
        let mut g = Grid2D::filled(n, n, 1.0, 0.0).unwrap();
        g.set(n / 2, n / 2, 1.0);
        let b = gaussian_blur(&g, 3.0).unwrap();
        assert!((b.values().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for id in 0..AUGMENTATIONS {
            let t = dihedral(&b, id).unwrap();
            for (x, y) in t.values().iter().zip(b.values()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn noise_is_bounded_and_seeded() {
        let g = Grid2D::filled(16, 16, 1.0, 0.0).unwrap();
        let cfg = OracleConfig { noise_amp_nm: 0.5, ..quiet() };
        let a = generate(&g, &cfg).unwrap();
        assert_eq!(a, generate(&g, &cfg).unwrap());
        assert!(a.values().iter().all(|v| v.abs() <= 0.5));
        assert!(a.values().iter().any(|&v| v != 0.0));
    }
}
