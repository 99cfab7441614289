//! Synthetic short-axis phantoms with nested lesion structure.

use std::f64::consts::PI;

use ndarray::{Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::CaseRecord;
use crate::error::{Error, Result};

/// Geometry and appearance ranges of a phantom case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Image side length in pixels.
    pub size: usize,
    pub slices: usize,
    pub cavity_radius_range: (f64, f64),
    pub ring_thickness_range: (f64, f64),
    /// Angular width of the infarct wedge, radians. `(0, 0)` gives a healthy case.
    pub lesion_angle_range: (f64, f64),
    /// Relative extent of the no-reflow blob inside the wedge.
    pub noreflow_fraction: f64,
    /// Mean intensity per label 0..=4.
    pub intensity_means: [f64; 5],
    pub noise_sigma: f64,
    /// Maximum displacement of the heart center from the image center.
    pub center_jitter: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::for_size(64)
    }
}

impl PhantomSpec {
    /// Default geometry scaled to an image of side `size`.
    pub fn for_size(size: usize) -> Self {
        let k = size as f64 / 64.0;
        Self {
            size,
            slices: 8,
            cavity_radius_range: (6.0 * k, 10.0 * k),
            ring_thickness_range: (4.0 * k, 6.0 * k),
            lesion_angle_range: (1.0, 2.2),
            noreflow_fraction: 0.6,
            intensity_means: [0.05, 0.55, 0.2, 0.95, 0.3],
            noise_sigma: 0.05,
            center_jitter: 4.0 * k,
        }
    }

    /// Same geometry without lesions.
    pub fn healthy(mut self) -> Self {
        self.lesion_angle_range = (0.0, 0.0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::PhantomSpec(msg));
        if self.size < 8 {
            return bad(format!("size {} is below 8 pixels", self.size));
        }
        if self.slices == 0 {
            return bad("at least one slice is required".into());
        }
        for (name, (lo, hi)) in [
            ("cavity_radius_range", self.cavity_radius_range),
            ("ring_thickness_range", self.ring_thickness_range),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} ({lo}, {hi}) must satisfy 0 < lo <= hi"));
            }
        }
        let (alo, ahi) = self.lesion_angle_range;
        if !(alo >= 0.0 && alo <= ahi && ahi <= 2.0 * PI) {
            return bad(format!("lesion_angle_range ({alo}, {ahi}) must lie in [0, 2π]"));
        }
        if !(0.0..=1.0).contains(&self.noreflow_fraction) {
            return bad(format!("noreflow_fraction {} outside [0,1]", self.noreflow_fraction));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        if self.center_jitter.is_nan() || self.center_jitter < 0.0 || self.intensity_means.iter().any(|m| !m.is_finite()) {
            return bad("center_jitter and intensity means must be finite".into());
        }
        let outer = self.cavity_radius_range.1 + self.ring_thickness_range.1 + self.center_jitter + 1.0;
        if outer >= self.size as f64 / 2.0 {
            return bad(format!(
                "outer radius {outer:.1} does not fit in a {}-pixel image",
                self.size
            ));
        }
        Ok(())
    }
}

/// Noise-free geometry of one phantom slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceGeometry {
    pub center: (f64, f64),
    pub cavity_radius: f64,
    pub ring_thickness: f64,
    /// `(mid_angle, width)` of the infarct wedge.
    pub lesion: Option<(f64, f64)>,
    pub noreflow_fraction: f64,
}

/// Wraps an angle difference into `(-π, π]`.
fn wrap(a: f64) -> f64 {
    let mut d = a % (2.0 * PI);
    if d > PI {
        d -= 2.0 * PI;
    } else if d <= -PI {
        d += 2.0 * PI;
    }
    d
}

impl SliceGeometry {
    pub fn radius_at(&self, row: usize, col: usize) -> f64 {
        (row as f64 - self.center.0).hypot(col as f64 - self.center.1)
    }

    pub fn in_cavity(&self, row: usize, col: usize) -> bool {
        self.radius_at(row, col) <= self.cavity_radius
    }

    pub fn in_annulus(&self, row: usize, col: usize) -> bool {
        let r = self.radius_at(row, col);
        r > self.cavity_radius && r <= self.cavity_radius + self.ring_thickness
    }

    /// Inside the infarct wedge's angular span (any radius).
    pub fn in_wedge(&self, row: usize, col: usize) -> bool {
        self.wedge_offset(row, col)
            .is_some_and(|(d, half)| d.abs() <= half)
    }

    fn wedge_offset(&self, row: usize, col: usize) -> Option<(f64, f64)> {
        let (mid, width) = self.lesion?;
        if width <= 0.0 {
            return None;
        }
        let phi = (col as f64 - self.center.1).atan2(row as f64 - self.center.0);
        Some((wrap(phi - mid), width / 2.0))
    }

    pub fn in_blob(&self, row: usize, col: usize) -> bool {
        if self.noreflow_fraction <= 0.0 || !self.in_annulus(row, col) {
            return false;
        }
        let Some((d, half)) = self.wedge_offset(row, col) else {
            return false;
        };
        if d.abs() > half {
            return false;
        }
        let f = self.noreflow_fraction;
        let mid_r = self.cavity_radius + self.ring_thickness / 2.0;
        let u = d / (f * half);
        let v = (self.radius_at(row, col) - mid_r) / (f * self.ring_thickness / 2.0);
        u * u + v * v <= 1.0
    }

    pub fn label_at(&self, row: usize, col: usize) -> u8 {
        if self.in_cavity(row, col) {
            1
        } else if self.in_annulus(row, col) {
            if self.in_blob(row, col) {
                4
            } else if self.in_wedge(row, col) {
                3
            } else {
                2
            }
        } else {
            0
        }
    }
}

/// Draws a phantom case; identical for identical `(spec, seed)`.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<CaseRecord> {
    generate_phantom_with_geometry(spec, seed).map(|(c, _)| c)
}

/// Like [`generate_phantom`], also returning each slice's noise-free geometry.
pub fn generate_phantom_with_geometry(
    spec: &PhantomSpec,
    seed: u64,
) -> Result<(CaseRecord, Vec<SliceGeometry>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.size;
    let nz = spec.slices;
    let half = n as f64 / 2.0;
    let (rlo, rhi) = spec.cavity_radius_range;
    let (tlo, thi) = spec.ring_thickness_range;
    let (alo, ahi) = spec.lesion_angle_range;

    let cx = half + rng.random_range(-1.0..=1.0) * spec.center_jitter;
    let cy = half + rng.random_range(-1.0..=1.0) * spec.center_jitter;
    let base_r = rng.random_range(rlo..=rhi);
    let base_t = rng.random_range(tlo..=thi);
    let lesion_mid = rng.random_range(0.0..2.0 * PI);
    let lesion_w = if ahi > 0.0 { rng.random_range(alo..=ahi) } else { 0.0 };

    let mut geometry = Vec::with_capacity(nz);
    for z in 0..nz {
        let zn = if nz > 1 { z as f64 / (nz - 1) as f64 } else { 0.0 };
        // Cavity shrinks towards the apex.
        let r = (rlo + (base_r - rlo) * (1.0 - 0.5 * zn) * rng.random_range(0.9..=1.0)).clamp(rlo, rhi);
        let t = (base_t + rng.random_range(-0.5..=0.5)).clamp(tlo, thi);
        let jitter = 0.5f64.min(spec.center_jitter);
        let center = (
            cx + rng.random_range(-1.0..=1.0) * jitter,
            cy + rng.random_range(-1.0..=1.0) * jitter,
        );
        let lesion = (lesion_w > 0.0).then(|| {
            let w = (alo + (lesion_w - alo) * rng.random_range(0.8..=1.0)).clamp(alo, ahi);
            (lesion_mid + rng.random_range(-0.1..=0.1), w)
        });
        geometry.push(SliceGeometry {
            center,
            cavity_radius: r,
            ring_thickness: t,
            lesion,
            noreflow_fraction: spec.noreflow_fraction,
        });
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0))
        .map_err(|e| Error::PhantomSpec(e.to_string()))?;
    let mut labels = Array3::<u8>::zeros((n, n, nz));
    let mut image = Array3::<f64>::zeros((n, n, nz));
    for (z, g) in geometry.iter().enumerate() {
        for row in 0..n {
            for col in 0..n {
                let l = g.label_at(row, col);
                labels[[row, col, z]] = l;
                let eps = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                image[[row, col, z]] = spec.intensity_means[l as usize] + eps;
            }
        }
    }
    let case = CaseRecord::new(format!("Phantom_{seed:04}"), image, labels, [1.0, 1.0, 10.0])?;
    Ok((case, geometry))
}

/// `count` phantom cases; every third case is healthy. Case ids follow the
/// EMIDEC convention (`Case_P001` pathological, `Case_N003` normal).
pub fn generate_cohort(spec: &PhantomSpec, count: usize, seed: u64) -> Result<Vec<CaseRecord>> {
    if count == 0 {
        return Err(Error::PhantomSpec("cases must be >= 1".into()));
    }
    (0..count)
        .map(|k| {
            let healthy = k % 3 == 2;
            let s = if healthy { spec.clone().healthy() } else { spec.clone() };
            let case_seed = seed.wrapping_mul(1_000_003).wrapping_add(k as u64);
            let mut case = generate_phantom(&s, case_seed)?;
            case.case_id = format!("Case_{}{:03}", if healthy { 'N' } else { 'P' }, k + 1);
            Ok(case)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_noreflow_when_fraction_zero() {
        let spec = PhantomSpec {
            noreflow_fraction: 0.0,
            ..PhantomSpec::default()
        };
        let c = generate_phantom(&spec, 3).unwrap();
        assert!(c.labels.iter().all(|&l| l != 4));
        assert!(c.labels.iter().any(|&l| l == 3));
    }

    #[test]
    fn healthy_phantom_has_no_lesions() {
        let c = generate_phantom(&PhantomSpec::default().healthy(), 3).unwrap();
        assert!(c.labels.iter().all(|&l| l < 3));
        assert!(!c.pathological);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = PhantomSpec::default();
        assert_eq!(generate_phantom(&spec, 11).unwrap(), generate_phantom(&spec, 11).unwrap());
        assert_ne!(generate_phantom(&spec, 11).unwrap().image, generate_phantom(&spec, 12).unwrap().image);
    }

    #[test]
    fn infeasible_geometry_rejected() {
        let mut spec = PhantomSpec::for_size(16);
        spec.cavity_radius_range = (6.0, 8.0);
        assert!(matches!(generate_phantom(&spec, 0), Err(Error::PhantomSpec(_))));
        let spec = PhantomSpec {
            ring_thickness_range: (5.0, 4.0),
            ..PhantomSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    // Exhaustive scan of every pixel against the analytic regions.
    #[test]
    fn nesting_invariant_default_seed_7() {
        let (case, geo) = generate_phantom_with_geometry(&PhantomSpec::for_size(64), 7).unwrap();
        let mut n4 = 0;
        for (z, g) in geo.iter().enumerate() {
            for row in 0..64 {
                for col in 0..64 {
                    match case.labels[[row, col, z]] {
                        4 => {
                            n4 += 1;
                            assert!(g.in_annulus(row, col) && g.in_wedge(row, col));
                        }
                        3 => assert!(g.in_annulus(row, col) && g.in_wedge(row, col)),
                        2 => assert!(g.in_annulus(row, col) && !g.in_wedge(row, col)),
                        1 => assert!(g.in_cavity(row, col)),
                        _ => assert!(!g.in_cavity(row, col) && !g.in_annulus(row, col)),
                    }
                }
            }
        }
        assert!(n4 > 0);
    }
}
