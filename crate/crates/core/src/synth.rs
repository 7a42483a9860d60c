//! Deterministic synthetic face corpora for tests and benchmarks.
//!
//! A synthetic identity is a smooth base pattern built from a small
//! orthonormal cosine basis; each capture of that identity adds one of a few
//! per-identity appearance variants (pose, accessories, aging — anything
//! that shifts the whole image) plus per-pixel sensor noise. Appearance
//! variation is deliberately larger than sensor noise, so a probe taken
//! under a known variant sits much closer to its enrolled counterpart than
//! same-identity captures sit to each other. Base patterns dominate
//! variants, so different identities stay far apart.

use crate::raster::FaceRaster;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Standard deviation of per-pixel sensor noise.
pub const SENSOR_NOISE_SIGMA: f64 = 0.05;

/// Per-pixel contrast of identity base patterns. Far above the per-mode
/// noise and expression spectrum, so principal components lock onto the
/// identity space regardless of raster size.
pub const BASE_PIXEL_STD: f64 = 0.10;

/// Per-pixel contrast of per-identity appearance variants.
pub const VARIANT_PIXEL_STD: f64 = 0.04;

/// Number of cosine modes per axis in the expression block.
const EXPRESSION_MODES: usize = 8;

/// Coefficient amplitude giving a target per-pixel standard deviation over
/// the identity mode block.
pub fn coeff_amplitude(size: u32, pixel_std: f64) -> f64 {
    let dim = (size as f64) * (size as f64);
    pixel_std * (3.0 * dim / STRUCTURE_DIM as f64).sqrt()
}

/// Dimension of the pattern space every synthetic face lives in (a 4x4
/// block of orthonormal cosine modes). Corpora need more identities than
/// this for base patterns to spread across the whole space.
pub const STRUCTURE_DIM: usize = 16;

/// Component count used when training on these corpora. Keeping fewer
/// components than the pattern space leaves genuine identity structure in
/// the residual, the way real deployments do: the face threshold then
/// separates "face with unmodeled detail" from "not a face at all".
pub const RECOMMENDED_COMPONENTS: usize = STRUCTURE_DIM / 2;

const MODES: usize = 4;

/// One synthetic person: enrolled captures and held-out probe captures.
/// `probes[i]` shares the appearance variant of `enrolled[i]`.
pub struct SyntheticIdentity {
    pub enrolled: Vec<FaceRaster>,
    pub probes: Vec<FaceRaster>,
}

pub struct Corpus {
    pub size: u32,
    pub identities: Vec<SyntheticIdentity>,
}

impl Corpus {
    /// All enrolled captures grouped per identity, for threshold calibration.
    pub fn enrolled_groups(&self) -> Vec<Vec<FaceRaster>> {
        self.identities
            .iter()
            .map(|id| id.enrolled.clone())
            .collect()
    }

    pub fn training_set(&self) -> Vec<FaceRaster> {
        self.identities
            .iter()
            .flat_map(|id| id.enrolled.clone())
            .collect()
    }
}

/// Generates a corpus of `identities` people with `captures` enrolled images
/// and `captures` probe images each.
pub fn corpus(seed: u64, identities: usize, captures: usize, size: u32) -> Corpus {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let identities = (0..identities)
        .map(|_| {
            let base = pattern_field(&mut rng, size, coeff_amplitude(size, BASE_PIXEL_STD));
            let variants: Vec<Vec<f64>> = (0..captures)
                .map(|_| pattern_field(&mut rng, size, coeff_amplitude(size, VARIANT_PIXEL_STD)))
                .collect();
            let capture = |rng: &mut ChaCha20Rng, variant: &[f64]| {
                let expression = expression_field(rng, size);
                let pixels = base
                    .iter()
                    .zip(variant)
                    .zip(&expression)
                    .map(|((b, v), x)| {
                        (0.5 + b + v + x + gaussian(rng) * SENSOR_NOISE_SIGMA).clamp(0.0, 1.0)
                    })
                    .collect();
                FaceRaster::from_pixels(size, pixels).unwrap()
            };
            let enrolled = variants.iter().map(|v| capture(&mut rng, v)).collect();
            let probes = variants.iter().map(|v| capture(&mut rng, v)).collect();
            SyntheticIdentity { enrolled, probes }
        })
        .collect();
    Corpus { size, identities }
}

/// Zero-mean field inside the pattern space: a random combination of the
/// [`STRUCTURE_DIM`] orthonormal cosine modes with coefficients drawn
/// uniformly from `[-amplitude, amplitude]`.
pub fn pattern_field(rng: &mut ChaCha20Rng, size: u32, amplitude: f64) -> Vec<f64> {
    let basis = cosine_basis(size);
    let n = size as usize * size as usize;
    let mut out = vec![0.0; n];
    for mode in &basis {
        let coeff: f64 = rng.gen_range(-amplitude..amplitude);
        for (o, &b) in out.iter_mut().zip(mode) {
            *o += coeff * b;
        }
    }
    out
}

/// The orthonormal pattern basis itself, for tests that need in-span probes.
pub fn cosine_basis(size: u32) -> Vec<Vec<f64>> {
    mode_block(size, 0, MODES)
}

/// Per-capture expression: a random combination of higher cosine modes,
/// orthogonal to the identity pattern space. Expression never shifts the
/// identity weights; it keeps every capture's residual honestly spread the
/// way real out-of-model face variation does. Its total energy matches the
/// sensor noise energy, spread thinly over many modes so principal-component
/// selection never prefers an expression direction over an identity one.
pub fn expression_field(rng: &mut ChaCha20Rng, size: u32) -> Vec<f64> {
    let basis = mode_block(size, MODES, EXPRESSION_MODES);
    let dim = (size as usize * size as usize) as f64;
    // Total energy sigma^2 * D across the block: amplitude per coefficient.
    let amplitude = SENSOR_NOISE_SIGMA * (3.0 * dim / basis.len() as f64).sqrt();
    let n = size as usize * size as usize;
    let mut out = vec![0.0; n];
    for mode in &basis {
        let coeff: f64 = rng.gen_range(-amplitude..amplitude);
        for (o, &b) in out.iter_mut().zip(mode) {
            *o += coeff * b;
        }
    }
    out
}

fn mode_block(size: u32, first_mode: usize, modes: usize) -> Vec<Vec<f64>> {
    assert!(
        size as usize >= first_mode + modes,
        "raster too small for the mode set"
    );
    let r = size as usize;
    let phi = |u: usize, i: usize| -> f64 {
        if u == 0 {
            (1.0 / r as f64).sqrt()
        } else {
            (2.0 / r as f64).sqrt()
                * (std::f64::consts::PI * (2 * i + 1) as f64 * u as f64 / (2.0 * r as f64)).cos()
        }
    };
    let mut basis = Vec::with_capacity(modes * modes);
    for u in first_mode..first_mode + modes {
        for v in first_mode..first_mode + modes {
            let mut mode = Vec::with_capacity(r * r);
            for y in 0..r {
                for x in 0..r {
                    mode.push(phi(u, x) * phi(v, y));
                }
            }
            basis.push(mode);
        }
    }
    basis
}

/// A raster of uniform pixel noise — decidedly not a face.
pub fn noise_raster(rng: &mut ChaCha20Rng, size: u32) -> FaceRaster {
    let n = size as usize * size as usize;
    FaceRaster::from_pixels(size, (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

/// A fresh face unrelated to any corpus identity.
pub fn unseen_face(rng: &mut ChaCha20Rng, size: u32) -> FaceRaster {
    let pattern = pattern_field(rng, size, coeff_amplitude(size, BASE_PIXEL_STD));
    let expression = expression_field(rng, size);
    let pixels = pattern
        .into_iter()
        .zip(expression)
        .map(|(p, x)| (0.5 + p + x + gaussian(rng) * SENSOR_NOISE_SIGMA).clamp(0.0, 1.0))
        .collect();
    FaceRaster::from_pixels(size, pixels).unwrap()
}

/// An unseen face that passes a model's face gate: captures legitimately
/// spread past the threshold now and then, so tests that need a stranger
/// with a plausible face draw until one fits.
pub fn plausible_unseen(
    model: &crate::faceml::EigenfaceModel,
    max_dffs: f64,
    rng: &mut ChaCha20Rng,
    size: u32,
) -> FaceRaster {
    for _ in 0..64 {
        let candidate = unseen_face(rng, size);
        if model.project(&candidate).map(|e| e.dffs() <= max_dffs) == Ok(true) {
            return candidate;
        }
    }
    panic!("no plausible unseen face within {max_dffs} after 64 draws");
}

/// Standard normal sample via Box-Muller.
pub fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;

    #[test]
    fn corpus_is_deterministic() {
        let a = corpus(5, 3, 2, 16);
        let b = corpus(5, 3, 2, 16);
        for (x, y) in a.identities.iter().zip(&b.identities) {
            assert_eq!(x.enrolled, y.enrolled);
            assert_eq!(x.probes, y.probes);
        }
        let c = corpus(6, 3, 2, 16);
        assert_ne!(a.identities[0].enrolled[0], c.identities[0].enrolled[0]);
    }

    #[test]
    fn corpus_shapes_are_consistent() {
        let c = corpus(1, 4, 3, 16);
        assert_eq!(c.identities.len(), 4);
        for id in &c.identities {
            assert_eq!(id.enrolled.len(), 3);
            assert_eq!(id.probes.len(), 3);
            for r in id.enrolled.iter().chain(&id.probes) {
                assert_eq!(r.size(), 16);
            }
        }
        assert_eq!(c.training_set().len(), 12);
        assert_eq!(c.enrolled_groups().len(), 4);
    }

    #[test]
    fn pattern_basis_is_orthonormal() {
        let basis = cosine_basis(16);
        assert_eq!(basis.len(), STRUCTURE_DIM);
        for i in 0..basis.len() {
            for j in 0..basis.len() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((linalg::dot(&basis[i], &basis[j]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn captures_rarely_clip() {
        let c = corpus(9, 10, 4, 16);
        let mut clipped = 0usize;
        let mut total = 0usize;
        for id in &c.identities {
            for r in id.enrolled.iter().chain(&id.probes) {
                total += r.pixels().len();
                clipped += r
                    .pixels()
                    .iter()
                    .filter(|&&p| p == 0.0 || p == 1.0)
                    .count();
            }
        }
        assert!(
            (clipped as f64) < 0.001 * total as f64,
            "{clipped}/{total} clipped pixels distort the pattern space"
        );
    }

    #[test]
    fn gaussian_has_unit_scale() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let samples: Vec<f64> = (0..20_000).map(|_| gaussian(&mut rng)).collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var =
            samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / samples.len() as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }
}
