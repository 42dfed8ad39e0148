//! Whole-image reconstruction by 33×33 tiling, PSNR, noise sweeps and
//! timing.

use std::fmt::Write as _;
use std::time::Instant;

use crate::datapipe::GrayImage;
use crate::error::{Error, Result};
use crate::models::{ReconNet, BLOCK_SIDE};
use crate::rng::{mix_seed, Prng};
use crate::sensing::{add_noise, sense, MeasurementMatrix, NoiseSpec};
use crate::synth;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileGeometry {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TileGeometry {
    pub fn of(height: usize, width: usize) -> Self {
        let rows = height.div_ceil(BLOCK_SIDE);
        let cols = width.div_ceil(BLOCK_SIDE);
        TileGeometry {
            height,
            width,
            padded_height: rows * BLOCK_SIDE,
            padded_width: cols * BLOCK_SIDE,
            rows,
            cols,
        }
    }

    pub fn blocks(&self) -> usize {
        self.rows * self.cols
    }
}

/// Mirror index for symmetric padding: `… 2 1 0 | 0 1 2 … n−1 | n−1 n−2 …`,
/// repeated with period 2n so any pad width is valid.
fn reflect(i: usize, n: usize) -> usize {
    let r = i % (2 * n);
    if r < n {
        r
    } else {
        2 * n - 1 - r
    }
}

/// Splits `img` into raster-ordered 33×33 blocks after symmetric padding
/// of the bottom and right edges up to multiples of 33.
pub fn tile_blocks(img: &GrayImage) -> (Vec<Vec<f64>>, TileGeometry) {
    let g = TileGeometry::of(img.height(), img.width());
    let mut blocks = Vec::with_capacity(g.blocks());
    for br in 0..g.rows {
        for bc in 0..g.cols {
            let mut b = Vec::with_capacity(BLOCK_SIDE * BLOCK_SIDE);
            for dy in 0..BLOCK_SIDE {
                let y = reflect(br * BLOCK_SIDE + dy, g.height);
                for dx in 0..BLOCK_SIDE {
                    b.push(img.get(y, reflect(bc * BLOCK_SIDE + dx, g.width)));
                }
            }
            blocks.push(b);
        }
    }
    (blocks, g)
}

/// Reassembles raster-ordered blocks, crops to the original size and
/// clamps to [0, 1] (non-finite values become 0).
pub fn stitch_blocks(blocks: &[Vec<f64>], g: &TileGeometry) -> Result<GrayImage> {
    if blocks.len() != g.blocks() {
        return Err(Error::shape(format!(
            "{} blocks for a {}×{} grid",
            blocks.len(),
            g.rows,
            g.cols
        )));
    }
    if let Some(bad) = blocks.iter().position(|b| b.len() != BLOCK_SIDE * BLOCK_SIDE) {
        return Err(Error::shape(format!("block {bad} is not 33×33")));
    }
    let mut pixels = Vec::with_capacity(g.height * g.width);
    for y in 0..g.height {
        for x in 0..g.width {
            let b = &blocks[(y / BLOCK_SIDE) * g.cols + x / BLOCK_SIDE];
            let v = b[(y % BLOCK_SIDE) * BLOCK_SIDE + x % BLOCK_SIDE];
            pixels.push(if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        }
    }
    GrayImage::new(g.height, g.width, pixels)
}

/// Senses every block of `img` with Φ, adds noise (block b draws from
/// substream b of `seed`), reconstructs each block and stitches. Returns
/// the image and the wall-clock seconds spent in network forward passes.
pub fn reconstruct_image(
    model: &ReconNet,
    phi: &MeasurementMatrix,
    img: &GrayImage,
    noise: NoiseSpec,
    seed: u64,
) -> Result<(GrayImage, f64)> {
    if model.m() != phi.m() {
        return Err(Error::shape(format!(
            "model takes {} measurements, Φ produces {}",
            model.m(),
            phi.m()
        )));
    }
    let (blocks, g) = tile_blocks(img);
    let root = Prng::new(seed);
    let measurements = blocks
        .iter()
        .enumerate()
        .map(|(b, x)| Ok(add_noise(&sense(phi, x)?, noise, &mut root.substream(b as u64))))
        .collect::<Result<Vec<_>>>()?;
    let start = Instant::now();
    let outputs = measurements
        .iter()
        .map(|y| model.forward(y))
        .collect::<Result<Vec<_>>>()?;
    let seconds = start.elapsed().as_secs_f64();
    Ok((stitch_blocks(&outputs, &g)?, seconds))
}

/// Forward passes a reconstruction of `img` performs.
pub fn forward_passes(img: &GrayImage) -> usize {
    TileGeometry::of(img.height(), img.width()).blocks()
}

pub fn psnr_with_peak(a: &GrayImage, b: &GrayImage, peak: f64) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(format!(
            "{}×{} vs {}×{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.pixels().len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

/// `10·log10(peak²/MSE)`; identical images give `+∞`.
pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    psnr_with_peak(a, b, 1.0)
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Mean PSNR over blocks (vectors on [0, 1]) of `model` outputs against the
/// targets, computed from the pooled MSE.
pub fn patch_psnr(model: &ReconNet, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    let mut se = 0.0;
    let mut count = 0usize;
    for (y, x) in inputs.iter().zip(targets) {
        let out = model.forward(y)?;
        se += out
            .iter()
            .zip(x)
            .map(|(a, b)| {
                let d = a.clamp(0.0, 1.0) - b;
                d * d
            })
            .sum::<f64>();
        count += x.len();
    }
    if count == 0 {
        return Err(Error::invalid("no blocks to score"));
    }
    Ok(psnr_from_mse(se / count as f64, 1.0))
}

/// Formats a PSNR for CSV: `inf` for the identical-image sentinel.
pub fn format_psnr(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub mr: f64,
    pub sigma: f64,
    pub variant: String,
    pub psnr_db: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

pub const CSV_HEADER: &str = "image,mr,sigma,variant,psnr_db,seconds";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6}",
                r.image,
                r.mr,
                r.sigma,
                r.variant,
                format_psnr(r.psnr_db),
                r.seconds
            );
        }
        s
    }

    /// Mean PSNR of the rows at noise level `sigma`.
    pub fn mean_psnr(&self, sigma: f64) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.sigma == sigma)
            .map(|r| r.psnr_db)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// A model under evaluation with the Φ it was trained for.
#[derive(Clone, Copy, Debug)]
pub struct EvalModel<'a> {
    pub variant: &'a str,
    pub model: &'a ReconNet,
    pub phi: &'a MeasurementMatrix,
}

/// Every (image, mr, sigma) combination, in that nesting order; within an
/// mr, models keep their list order. The noise seed of each row derives
/// from `seed` and the row's image, model and sigma indices.
pub fn run_eval(
    models: &[EvalModel<'_>],
    images: &[(String, GrayImage)],
    mrs: &[f64],
    sigmas: &[f64],
    seed: u64,
) -> Result<EvalReport> {
    for &mr in mrs {
        if !models.iter().any(|m| m.phi.mr == mr) {
            return Err(Error::invalid(format!("no model for measurement rate {mr}")));
        }
    }
    let noises = sigmas.iter().map(|&s| NoiseSpec::new(s)).collect::<Result<Vec<_>>>()?;
    let mut report = EvalReport::default();
    for (ii, (name, img)) in images.iter().enumerate() {
        for &mr in mrs {
            for (mi, em) in models.iter().enumerate().filter(|(_, m)| m.phi.mr == mr) {
                for (si, &noise) in noises.iter().enumerate() {
                    let row_seed = mix_seed(mix_seed(mix_seed(seed, ii as u64), mi as u64), si as u64);
                    let (out, seconds) = reconstruct_image(em.model, em.phi, img, noise, row_seed)?;
                    report.rows.push(EvalRow {
                        image: name.clone(),
                        mr,
                        sigma: noise.sigma_255,
                        variant: em.variant.to_string(),
                        psnr_db: psnr(img, &out)?,
                        seconds,
                    });
                }
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub side: usize,
    pub median_seconds: f64,
    pub samples: Vec<f64>,
}

/// Median forward-phase seconds over `repeats` noiseless reconstructions
/// of a synthetic `side`×`side` scene.
pub fn bench(model: &ReconNet, phi: &MeasurementMatrix, side: usize, repeats: usize) -> Result<BenchResult> {
    if repeats < 3 {
        return Err(Error::invalid(format!("bench needs at least 3 repeats, got {repeats}")));
    }
    if side == 0 {
        return Err(Error::invalid("bench image side must be positive"));
    }
    let img = synth::natural_image(side, side, 1)?;
    let mut samples = (0..repeats)
        .map(|_| reconstruct_image(model, phi, &img, NoiseSpec::noiseless(), 0).map(|r| r.1))
        .collect::<Result<Vec<_>>>()?;
    let raw = samples.clone();
    samples.sort_by(f64::total_cmp);
    Ok(BenchResult {
        side,
        median_seconds: samples[repeats / 2],
        samples: raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize) -> GrayImage {
        GrayImage::new(h, w, (0..h * w).map(|i| ((i * 13) % 256) as f64 / 255.0).collect()).unwrap()
    }

    #[test]
    fn tiling_counts() {
        assert_eq!(tile_blocks(&img(256, 256)).1.blocks(), 64);
        assert_eq!(tile_blocks(&img(512, 512)).1.blocks(), 256);
        let (b, g) = tile_blocks(&img(33, 33));
        assert_eq!((b.len(), g.padded_height), (1, 33));
        assert_eq!(b[0], img(33, 33).pixels());
    }

    #[test]
    fn tile_stitch_round_trip() {
        for (h, w) in [(1, 1), (5, 70), (33, 34), (100, 67)] {
            let x = img(h, w);
            let (b, g) = tile_blocks(&x);
            assert_eq!(stitch_blocks(&b, &g).unwrap(), x);
        }
    }

    #[test]
    fn stitch_clamps_and_checks_count() {
        let g = TileGeometry::of(10, 10);
        let out = stitch_blocks(&[vec![1.3; 1089]], &g).unwrap();
        assert!(out.pixels().iter().all(|&v| v == 1.0));
        assert!(stitch_blocks(&[], &g).is_err());
    }

    #[test]
    fn reflect_padding_mirrors() {
        assert_eq!(
            (0..8).map(|i| reflect(i, 3)).collect::<Vec<_>>(),
            vec![0, 1, 2, 2, 1, 0, 0, 1]
        );
        assert_eq!(reflect(40, 1), 0);
    }

    #[test]
    fn psnr_values() {
        let a = GrayImage::filled(4, 4, 0.5).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = GrayImage::filled(4, 4, 0.6).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &GrayImage::filled(4, 5, 0.5).unwrap()).is_err());
        assert_eq!(format_psnr(f64::INFINITY), "inf");
    }
}
