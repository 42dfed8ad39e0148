//! Deterministic synthetic grayscale scenes for tests, benchmarks and
//! desk-scale training when no photo corpus is at hand.
//!
//! A scene is a smooth low-frequency background, a handful of soft-edged
//! ellipses and rectangles, one patch of oriented texture, multi-octave
//! value noise with amplitude proportional to wavelength (a 1/f spectrum)
//! and faint sensor noise, snapped to the 8-bit grid.

use std::f64::consts::PI;

use crate::datapipe::GrayImage;
use crate::error::Result;
use crate::rng::Prng;

enum Shape {
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        angle: f64,
    },
    Rect {
        y0: f64,
        x0: f64,
        y1: f64,
        x1: f64,
    },
}

impl Shape {
    /// Signed inside-ness: positive inside, roughly in pixels near the edge.
    fn inside(&self, y: f64, x: f64) -> f64 {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = (c * dx + s * dy) / rx;
                let v = (-s * dx + c * dy) / ry;
                (1.0 - (u * u + v * v).sqrt()) * rx.min(ry)
            }
            Shape::Rect { y0, x0, y1, x1 } => (y - y0).min(y1 - y).min(x - x0).min(x1 - x),
        }
    }
}

/// Bilinearly interpolated lattice of normals with a smoothstep blend.
struct ValueNoise {
    cell: f64,
    cols: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(height: usize, width: usize, cell: f64, rng: &mut Prng) -> Self {
        let rows = (height as f64 / cell).ceil() as usize + 2;
        let cols = (width as f64 / cell).ceil() as usize + 2;
        let lattice = (0..rows * cols).map(|_| rng.normal()).collect();
        ValueNoise { cell, cols, lattice }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        let (gy, gx) = (y / self.cell, x / self.cell);
        let (iy, ix) = (gy.floor() as usize, gx.floor() as usize);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (ty, tx) = (s(gy.fract()), s(gx.fract()));
        let l = |r: usize, c: usize| self.lattice[r * self.cols + c];
        let top = l(iy, ix) + tx * (l(iy, ix + 1) - l(iy, ix));
        let bottom = l(iy + 1, ix) + tx * (l(iy + 1, ix + 1) - l(iy + 1, ix));
        top + ty * (bottom - top)
    }
}

fn soft_step(d: f64, width: f64) -> f64 {
    0.5 * (1.0 + (d / width).tanh())
}

/// A `height`×`width` scene determined entirely by `seed`.
pub fn natural_image(height: usize, width: usize, seed: u64) -> Result<GrayImage> {
    let mut rng = Prng::with_stream(seed, 0x5e_ed);
    let (h, w) = (height as f64, width as f64);
    let scale = h.max(w);

    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|k| {
            let wavelength = scale * (0.4 + 1.6 * rng.uniform());
            let dir = 2.0 * PI * rng.uniform();
            let amp = 0.25 / (1.0 + k as f64);
            (
                2.0 * PI / wavelength * dir.cos(),
                2.0 * PI / wavelength * dir.sin(),
                2.0 * PI * rng.uniform(),
                amp,
            )
        })
        .collect();

    let n_shapes = 5 + rng.below(5) as usize;
    let shapes: Vec<(Shape, f64, f64)> = (0..n_shapes)
        .map(|_| {
            let shape = if rng.uniform() < 0.6 {
                Shape::Ellipse {
                    cy: h * rng.uniform(),
                    cx: w * rng.uniform(),
                    ry: scale * (0.04 + 0.2 * rng.uniform()),
                    rx: scale * (0.04 + 0.2 * rng.uniform()),
                    angle: PI * rng.uniform(),
                }
            } else {
                let (y, x) = (h * rng.uniform(), w * rng.uniform());
                let (dh, dw) = (
                    scale * (0.05 + 0.3 * rng.uniform()),
                    scale * (0.05 + 0.3 * rng.uniform()),
                );
                Shape::Rect {
                    y0: y,
                    x0: x,
                    y1: y + dh,
                    x1: x + dw,
                }
            };
            let level = rng.uniform() - 0.5;
            let edge = 0.6 + 2.0 * rng.uniform();
            (shape, level, edge)
        })
        .collect();

    let texture = Shape::Ellipse {
        cy: h * rng.uniform(),
        cx: w * rng.uniform(),
        ry: scale * (0.1 + 0.15 * rng.uniform()),
        rx: scale * (0.1 + 0.15 * rng.uniform()),
        angle: PI * rng.uniform(),
    };
    let tex_dir = PI * rng.uniform();
    let tex_freq = 2.0 * PI / (4.0 + 8.0 * rng.uniform());
    let (tfy, tfx) = (tex_freq * tex_dir.sin(), tex_freq * tex_dir.cos());

    let roughness = 0.5 + rng.uniform();
    let octaves: Vec<(ValueNoise, f64)> = (1..=6)
        .map(|k| {
            let cell = (scale / f64::from(1u32 << k)).max(2.0);
            (
                ValueNoise::new(height, width, cell, &mut rng),
                0.12 * roughness * cell / scale,
            )
        })
        .collect();

    let mut raw = Vec::with_capacity(height * width);
    for yi in 0..height {
        for xi in 0..width {
            let (y, x) = (yi as f64, xi as f64);
            let mut v = 0.0;
            for &(fy, fx, phase, amp) in &waves {
                v += amp * (fy * y + fx * x + phase).cos();
            }
            for (shape, level, edge) in &shapes {
                v += level * soft_step(shape.inside(y, x), *edge);
            }
            v += 0.12 * soft_step(texture.inside(y, x), 1.5) * (tfy * y + tfx * x).sin();
            for (noise, amp) in &octaves {
                v += amp * noise.at(y, x);
            }
            v += 0.01 * rng.normal();
            raw.push(v);
        }
    }
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = (hi - lo).max(1e-12);
    let pixels = raw.iter().map(|v| 0.05 + 0.9 * (v - lo) / span).collect();
    Ok(GrayImage::new(height, width, pixels)?.quantized_8bit())
}
