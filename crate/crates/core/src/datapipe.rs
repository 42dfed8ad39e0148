//! Grayscale image I/O, luminance conversion, patch extraction and the
//! `RCD1` patch-dataset container.
//!
//! `RCD1` layout (little-endian):
//!
//! ```text
//! "RCD1"  u32 version  u32 patch count  u16 patch side
//! per patch: u32 source-name length, UTF-8 name, u32 x0, u32 y0,
//!            u8 split (0 = train, 1 = val), side² × f32 pixels
//! ```
//!
//! Patch pixels are held as `f32` in memory, the precision of the file
//! format, so a save/load round trip is bitwise.

use std::fs;
use std::path::{Path, PathBuf};

use crate::container::Reader;
use crate::error::{Error, Result};
use crate::rng::Prng;

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    /// Row-major pixels, each in [0, 1].
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "image extents {height}×{width} must be positive"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::shape(format!(
                "{height}×{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("pixel {bad} = {} outside [0, 1]", pixels[bad])));
        }
        Ok(GrayImage { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Each pixel snapped to the nearest multiple of 1/255.
    pub fn quantized_8bit(&self) -> GrayImage {
        GrayImage {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
        }
    }
}

fn to_u8(v: f64) -> u8 {
    // f64::round rounds half away from zero.
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

// ---------------------------------------------------------------------------
// PGM

/// Serializes `img` as binary PGM (P5, maxval 255).
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&v| to_u8(v)));
    out
}

/// Parses a binary PGM. Samples map to `v / maxval`.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::Unsupported(format!(
            "image format {magic:?}, only binary PGM (P5) is read"
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::corrupt("malformed PGM header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::corrupt("malformed PGM header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Unsupported(format!(
            "PGM maxval {maxval}, at most 255 is supported"
        )));
    }
    let count = width
        .checked_mul(height)
        .ok_or_else(|| Error::corrupt("PGM extents overflow"))?;
    let payload = bytes
        .get(pos..pos + count)
        .ok_or_else(|| Error::corrupt(format!("truncated PGM payload: {count} bytes expected")))?;
    if let Some(&v) = payload.iter().find(|&&v| v as usize > maxval) {
        return Err(Error::corrupt(format!("sample {v} exceeds maxval {maxval}")));
    }
    GrayImage::new(
        height,
        width,
        payload.iter().map(|&v| v as f64 / maxval as f64).collect(),
    )
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

/// BT.601 luma `0.299r + 0.587g + 0.114b`, evaluated as
/// `g + 0.299(r − g) + 0.114(b − g)` so grey inputs map to themselves
/// exactly. Inputs outside [0, 1] are clamped with a warning.
pub fn rgb_to_luma(r: f64, g: f64, b: f64) -> f64 {
    let clamp = |v: f64| {
        if !(0.0..=1.0).contains(&v) {
            log::warn!("colour component {v} clamped to [0, 1]");
        }
        v.clamp(0.0, 1.0)
    };
    let (r, g, b) = (clamp(r), clamp(g), clamp(b));
    (g + 0.299 * (r - g) + 0.114 * (b - g)).clamp(0.0, 1.0)
}

/// File extensions [`read_image`] accepts.
pub const IMAGE_EXTENSIONS: [&str; 5] = ["pgm", "png", "bmp", "jpg", "jpeg"];

/// Reads a PGM directly, or a PNG/BMP/JPEG reduced to its luma.
pub fn read_image(path: &Path) -> Result<GrayImage> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    if ext == "pgm" {
        return read_pgm(path);
    }
    if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
        return Err(Error::Unsupported(format!("image extension {ext:?}")));
    }
    let decoded = image::open(path).map_err(|e| Error::corrupt(format!("{}: {e}", path.display())))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let pixels = rgb
        .pixels()
        .map(|p| rgb_to_luma(p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0))
        .collect();
    GrayImage::new(h as usize, w as usize, pixels)
}

/// Supported image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

// ---------------------------------------------------------------------------
// Patches

pub const PATCH_SIDE: usize = 33;
pub const PATCH_STRIDE: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train = 0,
    Val = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub source: String,
    pub x0: u32,
    pub y0: u32,
    pub split: Split,
    pub pixels: Vec<f32>,
}

impl Patch {
    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchDataset {
    pub side: usize,
    pub patches: Vec<Patch>,
}

/// Patches along one axis: `floor((len − size)/stride) + 1`.
pub fn patch_positions(len: usize, size: usize, stride: usize) -> usize {
    if len < size || stride == 0 {
        0
    } else {
        (len - size) / stride + 1
    }
}

/// All `size`×`size` patches at multiples of `stride`, in raster order of
/// their top-left corners.
pub fn extract_patches(img: &GrayImage, source: &str, size: usize, stride: usize) -> Result<PatchDataset> {
    if size == 0 || stride == 0 {
        return Err(Error::invalid("patch size and stride must be positive"));
    }
    if img.height < size || img.width < size {
        return Err(Error::invalid(format!(
            "{}×{} image is smaller than a {size}×{size} patch",
            img.height, img.width
        )));
    }
    let (rows, cols) = (
        patch_positions(img.height, size, stride),
        patch_positions(img.width, size, stride),
    );
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (y0, x0) = (r * stride, c * stride);
            let mut pixels = Vec::with_capacity(size * size);
            for y in y0..y0 + size {
                pixels.extend(img.pixels[y * img.width + x0..][..size].iter().map(|&v| v as f32));
            }
            patches.push(Patch {
                source: source.to_string(),
                x0: x0 as u32,
                y0: y0 as u32,
                split: Split::Train,
                pixels,
            });
        }
    }
    Ok(PatchDataset { side: size, patches })
}

pub const DATASET_MAGIC: &[u8; 4] = b"RCD1";
pub const DATASET_VERSION: u32 = 1;

impl PatchDataset {
    pub fn empty(side: usize) -> Self {
        PatchDataset {
            side,
            patches: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Appends `other`'s patches; the patch sides must agree.
    pub fn extend(&mut self, other: PatchDataset) -> Result<()> {
        if other.side != self.side {
            return Err(Error::shape(format!("patch side {} vs {}", other.side, self.side)));
        }
        self.patches.extend(other.patches);
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        self.patches.iter().filter(|p| p.split == split).count()
    }

    /// Pixels of every patch with the given tag, in dataset order.
    pub fn blocks(&self, split: Split) -> Vec<Vec<f64>> {
        self.patches
            .iter()
            .filter(|p| p.split == split)
            .map(Patch::to_f64)
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let side = u16::try_from(self.side).map_err(|_| Error::invalid("patch side exceeds u16"))?;
        let count = u32::try_from(self.len()).map_err(|_| Error::invalid("too many patches"))?;
        let mut out = Vec::with_capacity(14 + self.len() * (4 * self.side * self.side + 16));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&side.to_le_bytes());
        for p in &self.patches {
            if p.pixels.len() != self.side * self.side {
                return Err(Error::shape("patch pixel count differs from side²"));
            }
            let name_len = u32::try_from(p.source.len()).map_err(|_| Error::invalid("source name too long"))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(p.source.as_bytes());
            out.extend_from_slice(&p.x0.to_le_bytes());
            out.extend_from_slice(&p.y0.to_le_bytes());
            out.push(p.split as u8);
            p.pixels.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != DATASET_MAGIC {
            return Err(Error::corrupt("bad magic, expected RCD1"));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Unsupported(format!("dataset version {version}")));
        }
        let count = r.u32()? as usize;
        let side = r.u16()? as usize;
        let mut ds = PatchDataset::empty(side);
        for i in 0..count {
            let name_len = r.u32()? as usize;
            let source = r.utf8(name_len)?;
            let x0 = r.u32()?;
            let y0 = r.u32()?;
            let split = match r.u8()? {
                0 => Split::Train,
                1 => Split::Val,
                t => return Err(Error::corrupt(format!("patch {i} has split tag {t}"))),
            };
            let pixels: Vec<f32> = r
                .take(side * side * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::corrupt(format!("patch {i} has pixels outside [0, 1]")));
            }
            ds.patches.push(Patch {
                source,
                x0,
                y0,
                split,
                pixels,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::corrupt("trailing bytes after last patch"));
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Tags `floor(val_fraction · N)` patches, chosen by a seeded shuffle, as
/// validation and the rest as training.
pub fn split_train_val(ds: &PatchDataset, val_fraction: f64, seed: u64) -> Result<PatchDataset> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::invalid(format!(
            "validation fraction {val_fraction} must be in [0, 1)"
        )));
    }
    let n_val = (val_fraction * ds.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    Prng::new(seed).shuffle(&mut order);
    let mut out = ds.clone();
    out.patches.iter_mut().for_each(|p| p.split = Split::Train);
    for &i in &order[..n_val] {
        out.patches[i].split = Split::Val;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> GrayImage {
        GrayImage::new(h, w, (0..h * w).map(|i| ((i * 7) % 256) as f64 / 255.0).collect()).unwrap()
    }

    #[test]
    fn pgm_round_trip_on_grid() {
        let img = ramp(5, 7);
        assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
        let zeros = GrayImage::filled(3, 3, 0.0).unwrap();
        assert_eq!(decode_pgm(&encode_pgm(&zeros)).unwrap(), zeros);
    }

    #[test]
    fn pgm_header_with_comment_and_errors() {
        let mut bytes = b"P5 # made by hand\n2 1\n# depth\n255\n".to_vec();
        bytes.extend([0, 255]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n0"), Err(Error::Unsupported(_))));
        assert!(matches!(
            decode_pgm(b"P5\n1 1\n65535\n\0\0"),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\0"), Err(Error::Corrupt(_))));
    }

    #[test]
    fn off_grid_values_round_half_away() {
        let img = GrayImage::new(1, 2, vec![0.5 / 255.0, 1.49 / 255.0]).unwrap();
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        assert_eq!(back.pixels(), &[1.0 / 255.0, 1.0 / 255.0]);
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-15);
        }
    }

    #[test]
    fn luma_values() {
        assert_eq!(rgb_to_luma(1.0, 1.0, 1.0), 1.0);
        assert_eq!(rgb_to_luma(0.3, 0.3, 0.3), 0.3);
        assert_eq!(rgb_to_luma(1.0, 0.0, 0.0), 0.299);
        assert_eq!(rgb_to_luma(2.0, 0.0, 0.0), 0.299);
    }

    #[test]
    fn patch_counts_and_contents() {
        assert_eq!(extract_patches(&ramp(33, 33), "a", 33, 14).unwrap().len(), 1);
        let ds = extract_patches(&ramp(256, 256), "b", 33, 14).unwrap();
        assert_eq!(ds.len(), 256);
        let p = &ds.patches[17];
        assert_eq!((p.x0, p.y0), (14, 14));
        assert!(extract_patches(&ramp(32, 40), "c", 33, 14).is_err());
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let ds = split_train_val(&extract_patches(&ramp(61, 47), "img.pgm", 33, 14).unwrap(), 0.5, 3).unwrap();
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(PatchDataset::from_bytes(&bytes).unwrap(), ds);
        let empty = PatchDataset::empty(33);
        assert_eq!(PatchDataset::from_bytes(&empty.to_bytes().unwrap()).unwrap(), empty);
        let mut bad = bytes.clone();
        bad[8] = 200;
        assert!(matches!(PatchDataset::from_bytes(&bad), Err(Error::Corrupt(_))));
        assert!(PatchDataset::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut ver = bytes;
        ver[4] = 2;
        assert!(matches!(PatchDataset::from_bytes(&ver), Err(Error::Unsupported(_))));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let mut ds = PatchDataset::empty(1);
        ds.patches = (0..21760)
            .map(|i| Patch {
                source: String::new(),
                x0: i,
                y0: 0,
                split: Split::Train,
                pixels: vec![0.0],
            })
            .collect();
        let a = split_train_val(&ds, 0.1, 9).unwrap();
        assert_eq!(a.count(Split::Val), 2176);
        assert_eq!(a, split_train_val(&ds, 0.1, 9).unwrap());
        assert_eq!(split_train_val(&ds, 0.0, 9).unwrap().count(Split::Val), 0);
        assert!(split_train_val(&ds, 1.0, 9).is_err());
    }
}
