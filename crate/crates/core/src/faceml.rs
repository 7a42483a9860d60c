//! Eigenface model training and face embeddings.
//!
//! Training mean-centers the sample rasters, eigendecomposes the small
//! `M x M` inner-product matrix of the centered samples instead of the huge
//! `D x D` covariance, and maps the eigenvectors back into pixel space to
//! obtain an orthonormal eigenface basis. Projection expresses a centered
//! raster in that basis; the residual norm (distance from face space, "dffs")
//! separates faces from non-faces.
//!
//! Training is a pure function and models are immutable after construction,
//! so they are safe to share across threads.

use crate::linalg::{self, LinalgError};
use crate::raster::FaceRaster;
use crate::wire::{Reader, Writer};
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Model eigenvalues at or below this value are treated as numerically zero.
pub const EIGENVALUE_TOLERANCE: f64 = 1e-10;

/// Cumulative eigenvalue fraction used when no component count is requested.
pub const DEFAULT_ENERGY_FRACTION: f64 = 0.95;

const MODEL_MAGIC: &[u8; 4] = b"EFM1";

#[derive(Debug, Error, PartialEq)]
pub enum FaceMlError {
    #[error("training needs at least 2 samples, got {got}")]
    InsufficientSamples { got: usize },
    #[error("training set is degenerate: every eigenvalue is below tolerance")]
    DegenerateTrainingSet,
    #[error("raster size {got} does not match expected {expected}")]
    RasterMismatch { expected: u32, got: u32 },
    #[error("embedding lengths differ: {a} vs {b}")]
    EmbeddingMismatch { a: usize, b: usize },
    #[error("requested {requested} components, valid range is 1..={max}")]
    InvalidComponentCount { requested: usize, max: usize },
    #[error("threshold calibration needs at least one same-identity sample pair")]
    CalibrationUnderdetermined,
    #[error("malformed model file: {0}")]
    ModelFormat(String),
    #[error(transparent)]
    Eigensolver(#[from] LinalgError),
}

/// Projection of a centered raster onto the eigenface basis, plus the
/// residual norm left outside the basis span.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    weights: Vec<f64>,
    dffs: f64,
}

impl Embedding {
    /// Reassembles an embedding from stored parts.
    pub fn from_parts(weights: Vec<f64>, dffs: f64) -> Self {
        Self { weights, dffs }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dffs(&self) -> f64 {
        self.dffs
    }

    pub fn write_to(&self, w: &mut Writer) {
        w.put_u32(self.weights.len() as u32);
        for &v in &self.weights {
            w.put_f64(v);
        }
        w.put_f64(self.dffs);
    }

    pub fn read_from(r: &mut Reader<'_>) -> Result<Self, crate::wire::WireError> {
        let k = r.u32()? as usize;
        let weights = (0..k).map(|_| r.f64()).collect::<Result<_, _>>()?;
        let dffs = r.f64()?;
        Ok(Self { weights, dffs })
    }

    /// Euclidean distance between two weight vectors.
    pub fn distance(&self, other: &Embedding) -> Result<f64, FaceMlError> {
        if self.weights.len() != other.weights.len() {
            return Err(FaceMlError::EmbeddingMismatch {
                a: self.weights.len(),
                b: other.weights.len(),
            });
        }
        Ok(self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

/// Trained eigenface model: mean face, orthonormal basis, eigenvalues in
/// non-increasing order.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenfaceModel {
    raster_size: u32,
    mean: Vec<f64>,
    eigenvalues: Vec<f64>,
    basis: Vec<Vec<f64>>,
    training_count: u32,
}

impl EigenfaceModel {
    /// Trains a model from same-sized rasters.
    ///
    /// `k` requests an exact component count (clamped down to the number of
    /// eigenvalues above tolerance); `None` selects the smallest count whose
    /// cumulative eigenvalue fraction reaches [`DEFAULT_ENERGY_FRACTION`].
    pub fn train(samples: &[FaceRaster], k: Option<usize>) -> Result<Self, FaceMlError> {
        let m = samples.len();
        if m < 2 {
            return Err(FaceMlError::InsufficientSamples { got: m });
        }
        let raster_size = samples[0].size();
        for sample in samples {
            if sample.size() != raster_size {
                return Err(FaceMlError::RasterMismatch {
                    expected: raster_size,
                    got: sample.size(),
                });
            }
        }
        if let Some(requested) = k {
            if requested < 1 || requested > m - 1 {
                return Err(FaceMlError::InvalidComponentCount {
                    requested,
                    max: m - 1,
                });
            }
        }

        let dim = raster_size as usize * raster_size as usize;
        let vectors: Vec<&[f64]> = samples.iter().map(|s| s.pixels()).collect();
        let pca = principal_components(dim, &vectors)?;
        let rank = pca.eigenvalues.len();

        let chosen = match k {
            Some(requested) => requested.min(rank),
            None => {
                let total: f64 = pca.eigenvalues.iter().sum();
                let mut cumulative = 0.0;
                let mut chosen = rank;
                for (i, lambda) in pca.eigenvalues.iter().enumerate() {
                    cumulative += lambda;
                    if cumulative >= DEFAULT_ENERGY_FRACTION * total {
                        chosen = i + 1;
                        break;
                    }
                }
                chosen
            }
        };

        Ok(Self {
            raster_size,
            mean: pca.mean,
            eigenvalues: pca.eigenvalues[..chosen].to_vec(),
            basis: pca.axes[..chosen].to_vec(),
            training_count: m as u32,
        })
    }

    pub fn raster_size(&self) -> u32 {
        self.raster_size
    }

    /// Pixel-space dimension `D`.
    pub fn dim(&self) -> usize {
        self.raster_size as usize * self.raster_size as usize
    }

    /// Number of retained components `k`.
    pub fn component_count(&self) -> usize {
        self.basis.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    pub fn training_count(&self) -> u32 {
        self.training_count
    }

    /// Projects a raster onto the basis.
    pub fn project(&self, raster: &FaceRaster) -> Result<Embedding, FaceMlError> {
        if raster.size() != self.raster_size {
            return Err(FaceMlError::RasterMismatch {
                expected: self.raster_size,
                got: raster.size(),
            });
        }
        let centered: Vec<f64> = raster
            .pixels()
            .iter()
            .zip(&self.mean)
            .map(|(x, m)| x - m)
            .collect();
        let weights: Vec<f64> = self.basis.iter().map(|u| linalg::dot(u, &centered)).collect();
        let mut residual = centered;
        for (u, &w) in self.basis.iter().zip(&weights) {
            for (r, &ud) in residual.iter_mut().zip(u) {
                *r -= w * ud;
            }
        }
        Ok(Embedding {
            weights,
            dffs: linalg::norm(&residual),
        })
    }

    /// Projects many rasters; the data-parallel path processes rasters
    /// independently so results match the sequential fallback bit for bit.
    pub fn project_batch(&self, rasters: &[FaceRaster]) -> Result<Vec<Embedding>, FaceMlError> {
        #[cfg(feature = "parallel")]
        {
            rasters.par_iter().map(|r| self.project(r)).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            rasters.iter().map(|r| self.project(r)).collect()
        }
    }

    /// Reconstructs pixel space from an embedding: mean + weighted basis.
    pub fn reconstruct(&self, embedding: &Embedding) -> Result<Vec<f64>, FaceMlError> {
        if embedding.weights.len() != self.basis.len() {
            return Err(FaceMlError::EmbeddingMismatch {
                a: embedding.weights.len(),
                b: self.basis.len(),
            });
        }
        let mut out = self.mean.clone();
        for (u, &w) in self.basis.iter().zip(&embedding.weights) {
            for (o, &ud) in out.iter_mut().zip(u) {
                *o += w * ud;
            }
        }
        Ok(out)
    }

    /// Serializes the model; the round trip is bit-exact.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_raw(MODEL_MAGIC);
        w.put_u32(self.raster_size);
        w.put_u32(self.basis.len() as u32);
        w.put_u32(self.training_count);
        for &v in &self.mean {
            w.put_f64(v);
        }
        for &v in &self.eigenvalues {
            w.put_f64(v);
        }
        for axis in &self.basis {
            for &v in axis {
                w.put_f64(v);
            }
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FaceMlError> {
        let fail = |what: &str| FaceMlError::ModelFormat(what.to_string());
        let mut r = Reader::new(bytes);
        if r.take(4).map_err(|_| fail("truncated magic"))? != MODEL_MAGIC {
            return Err(fail("bad magic"));
        }
        let raster_size = r.u32().map_err(|_| fail("truncated header"))?;
        let k = r.u32().map_err(|_| fail("truncated header"))? as usize;
        let training_count = r.u32().map_err(|_| fail("truncated header"))?;
        let dim = raster_size as usize * raster_size as usize;
        if dim == 0 || k == 0 {
            return Err(fail("empty model"));
        }
        let mut take_vec = |n: usize| -> Result<Vec<f64>, FaceMlError> {
            (0..n)
                .map(|_| r.f64().map_err(|_| fail("truncated data")))
                .collect()
        };
        let mean = take_vec(dim)?;
        let eigenvalues = take_vec(k)?;
        let basis = (0..k).map(|_| take_vec(dim)).collect::<Result<_, _>>()?;
        Ok(Self {
            raster_size,
            mean,
            eigenvalues,
            basis,
            training_count,
        })
    }
}

pub(crate) struct PrincipalComponents {
    pub mean: Vec<f64>,
    /// Eigenvalues of the sample covariance, descending, above tolerance.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal axes paired with `eigenvalues`.
    pub axes: Vec<Vec<f64>>,
}

/// Principal axes of a sample population via the small inner-product matrix.
pub(crate) fn principal_components(
    dim: usize,
    samples: &[&[f64]],
) -> Result<PrincipalComponents, FaceMlError> {
    let m = samples.len();
    debug_assert!(m >= 2);
    debug_assert!(samples.iter().all(|s| s.len() == dim));

    let mut mean = vec![0.0; dim];
    for sample in samples {
        for (acc, &v) in mean.iter_mut().zip(*sample) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    let centered: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| s.iter().zip(&mean).map(|(x, mu)| x - mu).collect())
        .collect();

    // Inner-product (Gram) matrix rows are independent, so the parallel and
    // sequential paths produce identical floats.
    let upper_row = |i: usize| -> Vec<f64> {
        (i..m)
            .map(|j| linalg::dot(&centered[i], &centered[j]))
            .collect()
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<Vec<f64>> = (0..m).into_par_iter().map(upper_row).collect();
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Vec<f64>> = (0..m).map(upper_row).collect();

    let mut gram = vec![0.0; m * m];
    for (i, row) in rows.iter().enumerate() {
        for (offset, &v) in row.iter().enumerate() {
            let j = i + offset;
            gram[i * m + j] = v;
            gram[j * m + i] = v;
        }
    }

    let eigen = linalg::jacobi_eigen(&gram, m)?;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eigen.values[b]
            .partial_cmp(&eigen.values[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    // Covariance eigenvalues are the Gram eigenvalues scaled by 1/M.
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| eigen.values[i] / m as f64 > EIGENVALUE_TOLERANCE)
        .collect();
    if kept.is_empty() {
        return Err(FaceMlError::DegenerateTrainingSet);
    }
    let eigenvalues: Vec<f64> = kept.iter().map(|&i| eigen.values[i] / m as f64).collect();

    let back_project = |&idx: &usize| -> Vec<f64> {
        let coeffs = &eigen.vectors[idx];
        let mut axis = vec![0.0; dim];
        for (sample, &c) in centered.iter().zip(coeffs) {
            for (a, &s) in axis.iter_mut().zip(sample) {
                *a += c * s;
            }
        }
        let n = linalg::norm(&axis);
        for a in &mut axis {
            *a /= n;
        }
        axis
    };
    #[cfg(feature = "parallel")]
    let mut axes: Vec<Vec<f64>> = kept.par_iter().map(back_project).collect();
    #[cfg(not(feature = "parallel"))]
    let mut axes: Vec<Vec<f64>> = kept.iter().map(back_project).collect();

    // One Gram-Schmidt polish keeps near-degenerate directions orthonormal
    // well past the tolerance the rest of the system assumes.
    for i in 0..axes.len() {
        for j in 0..i {
            let proj = linalg::dot(&axes[i], &axes[j]);
            let prev = axes[j].clone();
            for (a, p) in axes[i].iter_mut().zip(prev) {
                *a -= proj * p;
            }
        }
        let n = linalg::norm(&axes[i]);
        for a in &mut axes[i] {
            *a /= n;
        }
        fix_sign(&mut axes[i]);
    }

    Ok(PrincipalComponents {
        mean,
        eigenvalues,
        axes,
    })
}

/// Flips an axis so its largest-magnitude coordinate is positive; ties keep
/// the lowest index. Removes the sign ambiguity of eigenvectors.
fn fix_sign(axis: &mut [f64]) {
    let mut best = 0;
    for (i, v) in axis.iter().enumerate() {
        if v.abs() > axis[best].abs() {
            best = i;
        }
    }
    if axis[best] < 0.0 {
        for v in axis.iter_mut() {
            *v = -*v;
        }
    }
}

/// Acceptance and face thresholds with data-driven defaults.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    /// Maximum embedding distance for a match.
    pub accept: f64,
    /// Maximum dffs for an image to count as a face.
    pub face: f64,
}

impl Thresholds {
    /// Derives default thresholds from identity-labeled training rasters:
    /// `accept` is 0.6x the median same-identity embedding distance, `face`
    /// is mean + 3 standard deviations of the training dffs.
    pub fn calibrate(
        model: &EigenfaceModel,
        groups: &[Vec<FaceRaster>],
    ) -> Result<Self, FaceMlError> {
        let mut intra = Vec::new();
        let mut dffs = Vec::new();
        for group in groups {
            let embeddings = model.project_batch(group)?;
            for e in &embeddings {
                dffs.push(e.dffs());
            }
            for i in 0..embeddings.len() {
                for j in i + 1..embeddings.len() {
                    intra.push(embeddings[i].distance(&embeddings[j])?);
                }
            }
        }
        if intra.is_empty() || dffs.is_empty() {
            return Err(FaceMlError::CalibrationUnderdetermined);
        }
        intra.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if intra.len() % 2 == 1 {
            intra[intra.len() / 2]
        } else {
            (intra[intra.len() / 2 - 1] + intra[intra.len() / 2]) / 2.0
        };
        let mean = dffs.iter().sum::<f64>() / dffs.len() as f64;
        let variance = dffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / dffs.len() as f64;
        Ok(Self {
            accept: 0.6 * median,
            face: mean + 3.0 * variance.sqrt(),
        })
    }
}
