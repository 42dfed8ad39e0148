//! Block compressive sensing: measurement matrices, measurements, noise and
//! 8-bit style matrix quantization.
//!
//! Pixels live on [0, 1] internally. Noise levels are quoted on the 0–255
//! range (σ = 10, 20, 30) and divided by 255 when applied.

use std::fmt;
use std::path::Path;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::rng::{mix_seed, Prng};
use crate::tensor::{self, Tensor};

/// Pixels per 33×33 block.
pub const BLOCK_PIXELS: usize = 1089;

/// Measurement counts used for 33×33 blocks at the four standard rates.
const STANDARD_RATES: [(f64, usize); 4] = [(0.25, 272), (0.10, 109), (0.04, 43), (0.01, 10)];

/// Number of measurements for a measurement rate.
///
/// For 1089-pixel blocks the standard rates 0.25, 0.10, 0.04 and 0.01 map to
/// 272, 109, 43 and 10; any other rate rounds `mr·n` into [1, n].
pub fn mr_to_m(mr: f64, n: usize) -> Result<usize> {
    if !(mr > 0.0 && mr <= 1.0) {
        return Err(Error::invalid(format!("measurement rate {mr} must be in (0, 1]")));
    }
    if n == BLOCK_PIXELS {
        if let Some(&(_, m)) = STANDARD_RATES.iter().find(|(r, _)| (r - mr).abs() < 1e-9) {
            return Ok(m);
        }
    }
    Ok(((mr * n as f64).round() as usize).clamp(1, n))
}

#[derive(Clone, Debug, PartialEq)]
pub enum MatrixKind {
    GaussianOrthonormal,
    Learned,
    Quantized { source: Box<MatrixKind>, bits: u32 },
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixKind::GaussianOrthonormal => write!(f, "gaussian-orthonormal"),
            MatrixKind::Learned => write!(f, "learned"),
            MatrixKind::Quantized { .. } => write!(f, "quantized"),
        }
    }
}

impl MatrixKind {
    fn parse_base(s: &str) -> Result<MatrixKind> {
        match s {
            "gaussian-orthonormal" => Ok(MatrixKind::GaussianOrthonormal),
            "learned" => Ok(MatrixKind::Learned),
            other => Err(Error::corrupt(format!("unknown matrix kind {other}"))),
        }
    }
}

/// Φ ∈ R^{m×n} with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementMatrix {
    pub phi: Tensor,
    pub mr: f64,
    pub kind: MatrixKind,
    pub seed: Option<u64>,
}

impl MeasurementMatrix {
    pub fn new(phi: Tensor, mr: f64, kind: MatrixKind, seed: Option<u64>) -> Result<Self> {
        let (m, n) = match phi.shape()[..] {
            [m, n] => (m, n),
            _ => return Err(Error::shape(format!("Φ must be 2-D, got {:?}", phi.shape()))),
        };
        if m > n {
            return Err(Error::invalid(format!("Φ has more rows ({m}) than columns ({n})")));
        }
        Ok(MeasurementMatrix { phi, mr, kind, seed })
    }

    pub fn m(&self) -> usize {
        self.phi.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.phi.shape()[1]
    }

    /// `max |ΦΦᵀ − I|`
    pub fn orthonormality_error(&self) -> f64 {
        let (m, n) = (self.m(), self.n());
        let p = self.phi.data();
        let mut worst = 0.0f64;
        for i in 0..m {
            for j in i..m {
                let dot: f64 = p[i * n..(i + 1) * n]
                    .iter()
                    .zip(&p[j * n..(j + 1) * n])
                    .map(|(a, b)| a * b)
                    .sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    pub(crate) fn write_meta(&self, c: &mut Container, prefix: &str) {
        match &self.kind {
            MatrixKind::Quantized { source, bits } => {
                c.set_meta(format!("{prefix}kind"), "quantized");
                c.set_meta(format!("{prefix}source"), source.as_ref());
                c.set_meta(format!("{prefix}bits"), bits);
            }
            kind => c.set_meta(format!("{prefix}kind"), kind),
        }
        c.set_meta(format!("{prefix}mr"), self.mr);
        if let Some(seed) = self.seed {
            c.set_meta(format!("{prefix}seed"), seed);
        }
    }

    pub(crate) fn read_meta(c: &Container, prefix: &str, phi: Tensor) -> Result<Self> {
        let kind_raw = c.meta(&format!("{prefix}kind"))?;
        let kind = if kind_raw == "quantized" {
            MatrixKind::Quantized {
                source: Box::new(MatrixKind::parse_base(c.meta(&format!("{prefix}source"))?)?),
                bits: c.meta_parse(&format!("{prefix}bits"))?,
            }
        } else {
            MatrixKind::parse_base(kind_raw)?
        };
        let mr = c.meta_parse(&format!("{prefix}mr"))?;
        let seed_key = format!("{prefix}seed");
        let seed = match c.metadata.contains_key(&seed_key) {
            true => Some(c.meta_parse(&seed_key)?),
            false => None,
        };
        MeasurementMatrix::new(phi, mr, kind, seed).map_err(|e| Error::corrupt(e.to_string()))
    }

    /// Standalone container: one tensor `phi` plus kind/mr/seed/bits metadata.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        self.write_meta(&mut c, "");
        c.push_tensor("phi", self.phi.clone());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        for (name, _) in &c.tensors {
            if name != "phi" {
                return Err(Error::corrupt(format!("unknown tensor name {name}")));
            }
        }
        let phi = c
            .tensor("phi")
            .ok_or_else(|| Error::corrupt("missing tensor phi"))?
            .clone();
        Self::read_meta(c, "", phi)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

const MAX_ORTHONORMALIZATION_ATTEMPTS: u64 = 8;

/// Φ with orthonormal rows: i.i.d. standard normal rows, orthonormalized by
/// modified Gram–Schmidt with one re-orthogonalization pass.
///
/// This equals the Q factor of a QR decomposition of Φᵀ with R's diagonal
/// positive. A numerically dependent row triggers a redraw from a seed
/// derived from `seed` and the attempt number.
pub fn gen_gaussian_orthonormal(n: usize, mr: f64, seed: u64) -> Result<MeasurementMatrix> {
    let m = mr_to_m(mr, n)?;
    for attempt in 0..MAX_ORTHONORMALIZATION_ATTEMPTS {
        let draw_seed = if attempt == 0 { seed } else { mix_seed(seed, attempt) };
        let mut rng = Prng::new(draw_seed);
        let mut rows = Tensor::gaussian(&[m, n], 0.0, 1.0, &mut rng)?;
        if orthonormalize_rows(rows.data_mut(), m, n) {
            return MeasurementMatrix::new(rows, mr, MatrixKind::GaussianOrthonormal, Some(seed));
        }
        log::warn!("rank-deficient Gaussian draw (seed {draw_seed}); redrawing");
    }
    Err(Error::RankDeficient(MAX_ORTHONORMALIZATION_ATTEMPTS as usize))
}

/// Returns false if some row is numerically in the span of its predecessors.
fn orthonormalize_rows(a: &mut [f64], m: usize, n: usize) -> bool {
    for i in 0..m {
        let (done, rest) = a.split_at_mut(i * n);
        let row = &mut rest[..n];
        let initial = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for _pass in 0..2 {
            for j in 0..i {
                let q = &done[j * n..(j + 1) * n];
                let dot: f64 = q.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                for (r, qv) in row.iter_mut().zip(q) {
                    *r -= dot * qv;
                }
            }
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-10 * initial) {
            return false;
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    true
}

/// `y = Φx`
pub fn sense(phi: &MeasurementMatrix, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != phi.n() {
        return Err(Error::shape(format!(
            "block has {} pixels, Φ expects {}",
            x.len(),
            phi.n()
        )));
    }
    let mut y = vec![0.0; phi.m()];
    tensor::matvec(phi.phi.data(), phi.m(), phi.n(), x, &mut y);
    Ok(y)
}

/// Measurement noise level on the 0–255 scale.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NoiseSpec {
    pub sigma_255: f64,
}

impl NoiseSpec {
    pub fn new(sigma_255: f64) -> Result<Self> {
        if !(sigma_255 >= 0.0) || !sigma_255.is_finite() {
            return Err(Error::invalid(format!("noise level {sigma_255} must be >= 0")));
        }
        Ok(NoiseSpec { sigma_255 })
    }

    pub fn noiseless() -> Self {
        NoiseSpec { sigma_255: 0.0 }
    }

    /// Standard deviation on the internal [0, 1] pixel scale.
    pub fn internal_std(&self) -> f64 {
        self.sigma_255 / 255.0
    }
}

/// `y + η` with η ~ N(0, (σ/255)²) per entry. σ = 0 returns `y` untouched
/// and consumes no random numbers.
pub fn add_noise(y: &[f64], spec: NoiseSpec, rng: &mut Prng) -> Vec<f64> {
    if spec.sigma_255 == 0.0 {
        return y.to_vec();
    }
    let std = spec.internal_std();
    y.iter().map(|&v| v + std * rng.normal()).collect()
}

/// Uniform quantization of Φ's entries onto `2^bits` levels spanning
/// [min Φ, max Φ]. The top level is pinned to max Φ exactly, which makes
/// re-quantization with the same bit depth a no-op.
pub fn quantize_matrix(phi: &MeasurementMatrix, bits: u32) -> Result<MeasurementMatrix> {
    if !(1..=16).contains(&bits) {
        return Err(Error::invalid(format!("bit depth {bits} must be in 1..=16")));
    }
    let source = match &phi.kind {
        MatrixKind::Quantized { source, .. } => source.clone(),
        other => Box::new(other.clone()),
    };
    let kind = MatrixKind::Quantized { source, bits };
    let (lo, hi) = phi
        .phi
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi == lo {
        return MeasurementMatrix::new(phi.phi.clone(), phi.mr, kind, phi.seed);
    }
    let top = (1u64 << bits) - 1;
    let step = (hi - lo) / top as f64;
    let data = phi
        .phi
        .data()
        .iter()
        .map(|&v| {
            let level = (((v - lo) / step).round() as u64).min(top);
            if level == top {
                hi
            } else {
                lo + level as f64 * step
            }
        })
        .collect();
    MeasurementMatrix::new(Tensor::from_vec(phi.phi.shape(), data)?, phi.mr, kind, phi.seed)
}

/// Quantization step of a `bits`-deep grid over Φ's range.
pub fn quantization_step(phi: &MeasurementMatrix, bits: u32) -> f64 {
    let (lo, hi) = phi
        .phi
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    (hi - lo) / ((1u64 << bits) - 1) as f64
}

/// Median over blocks of `sqrt(‖y_i − Φx̂_i‖² / m)`, given measurement /
/// reconstruction pairs.
pub fn estimate_noise_sigma(blocks: &[(Vec<f64>, Vec<f64>)], phi: &MeasurementMatrix) -> Result<f64> {
    if blocks.is_empty() {
        return Err(Error::invalid("noise estimate needs at least one block"));
    }
    let m = phi.m() as f64;
    let mut sigmas = blocks
        .iter()
        .map(|(y, x_hat)| {
            let pred = sense(phi, x_hat)?;
            if y.len() != pred.len() {
                return Err(Error::shape("measurement length differs from Φ rows"));
            }
            let r2: f64 = y.iter().zip(&pred).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok((r2 / m).sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    sigmas.sort_by(f64::total_cmp);
    let k = sigmas.len();
    Ok(if k % 2 == 1 {
        sigmas[k / 2]
    } else {
        0.5 * (sigmas[k / 2 - 1] + sigmas[k / 2])
    })
}
