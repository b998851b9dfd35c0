//! Dataset plumbing: IDX containers, quantization, patch corruption, the
//! in-painting error metric, and binary PGM images.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::inference::ObservationGrid;
use crate::sampling::state_to_intensity;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw byte images, all the same size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSet {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pixels: Vec<u8>,
}

impl ImageSet {
    pub fn new(count: usize, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != count * height * width {
            return Err(Error::LengthMismatch {
                expected: count * height * width,
                got: pixels.len(),
            });
        }
        Ok(ImageSet {
            count,
            height,
            width,
            pixels,
        })
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.pixels[i * n..(i + 1) * n]
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::TruncatedFile {
                offset: self.bytes.len(),
                needed: self.offset + n - self.bytes.len(),
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse an IDX image container (big-endian magic 0x00000803, count, rows,
/// cols, then raw bytes).
pub fn parse_idx_images(bytes: &[u8]) -> Result<ImageSet> {
    let mut r = Reader { bytes, offset: 0 };
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let pixels = r.take(count * rows * cols)?.to_vec();
    ImageSet::new(count, rows, cols, pixels)
}

/// Parse an IDX label container (magic 0x00000801). Labels are carried but
/// never used by the models.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader { bytes, offset: 0 };
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = r.u32_be()? as usize;
    Ok(r.take(count)?.to_vec())
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<ImageSet> {
    parse_idx_images(&std::fs::read(path)?)
}

/// Encode images back into IDX bytes (fixtures and round-trip tests).
pub fn write_idx_images(set: &ImageSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + set.count * set.height * set.width);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.count as u32).to_be_bytes());
    out.extend_from_slice(&(set.height as u32).to_be_bytes());
    out.extend_from_slice(&(set.width as u32).to_be_bytes());
    for i in 0..set.count {
        out.extend_from_slice(set.image(i));
    }
    out
}

/// Categorical pixel states after quantization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedSet {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub levels: usize,
    states: Vec<u16>,
}

impl QuantizedSet {
    pub fn states(&self, i: usize) -> &[u16] {
        let n = self.height * self.width;
        &self.states[i * n..(i + 1) * n]
    }

    /// Fully observed grid for image `i`.
    pub fn observation(&self, i: usize) -> ObservationGrid {
        ObservationGrid::from_states(vec![self.height, self.width], self.states(i))
            .expect("states sized by construction")
    }

    /// First `n` images (all of them when `n` exceeds the count).
    pub fn take(&self, n: usize) -> QuantizedSet {
        let count = n.min(self.count);
        QuantizedSet {
            count,
            height: self.height,
            width: self.width,
            levels: self.levels,
            states: self.states[..count * self.height * self.width].to_vec(),
        }
    }
}

/// Bucket bytes into `levels` states: `state = byte / (256 / levels)`.
/// Levels must be a power of two in 2..=256; 2 means black/white with the
/// threshold at byte 128, 16 means 16 grey levels.
pub fn quantize(images: &ImageSet, levels: usize) -> Result<QuantizedSet> {
    if !(2..=256).contains(&levels) || !levels.is_power_of_two() {
        return Err(Error::UnsupportedLevels(levels));
    }
    let bucket = (256 / levels) as u16;
    let states = images
        .pixels
        .iter()
        .map(|&b| b as u16 / bucket)
        .collect();
    Ok(QuantizedSet {
        count: images.count,
        height: images.height,
        width: images.width,
        levels,
        states,
    })
}

/// Missing patch of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorruptionMask {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CorruptionMask {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top
            && row < self.top + self.height
            && col >= self.left
            && col < self.left + self.width
    }
}

/// Hide one uniformly placed patch per image. Consumes exactly two draws
/// per image (top then left), in image order.
pub fn corrupt(
    set: &QuantizedSet,
    patch: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<ObservationGrid>, Vec<CorruptionMask>)> {
    let (ph, pw) = patch;
    if ph == 0 || pw == 0 || ph > set.height || pw > set.width {
        return Err(Error::ImageTooSmall {
            height: set.height,
            width: set.width,
            patch_h: ph,
            patch_w: pw,
        });
    }
    let mut observations = Vec::with_capacity(set.count);
    let mut masks = Vec::with_capacity(set.count);
    for i in 0..set.count {
        let top = rng.random_range(0..=set.height - ph);
        let left = rng.random_range(0..=set.width - pw);
        let mask = CorruptionMask {
            top,
            left,
            height: ph,
            width: pw,
        };
        let mut obs = set.observation(i);
        for r in top..top + ph {
            for c in left..left + pw {
                obs.set_missing(r * set.width + c);
            }
        }
        observations.push(obs);
        masks.push(mask);
    }
    Ok((observations, masks))
}

/// Mean squared error over the masked pixels of every image, pooled across
/// the whole set, with states mapped to [0, 1] by `state / (levels - 1)`.
pub fn mse_missing(
    truth: &QuantizedSet,
    completed: &[Vec<u16>],
    masks: &[CorruptionMask],
) -> Result<f64> {
    if completed.len() != truth.count || masks.len() != truth.count {
        return Err(Error::ShapeMismatch(format!(
            "{} truth images vs {} completions and {} masks",
            truth.count,
            completed.len(),
            masks.len()
        )));
    }
    let scale = (truth.levels - 1) as f64;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for i in 0..truth.count {
        if completed[i].len() != truth.height * truth.width {
            return Err(Error::ShapeMismatch(format!(
                "completion {} has {} pixels, expected {}",
                i,
                completed[i].len(),
                truth.height * truth.width
            )));
        }
        let t = truth.states(i);
        let mask = &masks[i];
        for r in mask.top..mask.top + mask.height {
            for c in mask.left..mask.left + mask.width {
                let idx = r * truth.width + c;
                let d = t[idx] as f64 / scale - completed[i][idx] as f64 / scale;
                sum += d * d;
                n += 1;
            }
        }
    }
    Ok(sum / n as f64)
}

/// Binary PGM (P5, maxval 255).
pub fn write_pgm(height: usize, width: usize, intensities: &[u8]) -> Vec<u8> {
    assert_eq!(intensities.len(), height * width, "pixel count");
    let mut out = format!("P5\n{} {}\n255\n", width, height).into_bytes();
    out.extend_from_slice(intensities);
    out
}

pub fn write_pgm_file(
    path: impl AsRef<Path>,
    height: usize,
    width: usize,
    intensities: &[u8],
) -> Result<()> {
    Ok(std::fs::write(path, write_pgm(height, width, intensities))?)
}

/// Parse a binary PGM; whitespace and `#` comments are allowed between
/// header tokens per the PNM rules. Returns (height, width, bytes).
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(Error::MalformedHeader("not a P5 file".into()));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => {
                    return Err(Error::MalformedHeader("header ends early".into()));
                }
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(Error::MalformedHeader(format!(
                "expected a number at byte {}",
                pos
            )));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("digits are utf8")
            .parse()
            .map_err(|_| Error::MalformedHeader("number too large".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::MalformedHeader(format!(
            "maxval {} unsupported, need 255",
            maxval
        )));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::MalformedHeader(
                "missing single whitespace after maxval".into(),
            ))
        }
    }
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(Error::TruncatedFile {
            offset: bytes.len(),
            needed: pos + n - bytes.len(),
        });
    }
    Ok((height, width, bytes[pos..pos + n].to_vec()))
}

pub fn read_pgm_file(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    read_pgm(&std::fs::read(path)?)
}

/// Render a state grid as intensities.
pub fn states_to_intensities(states: &[u16], levels: usize) -> Vec<u8> {
    states
        .iter()
        .map(|&s| state_to_intensity(s, levels))
        .collect()
}

/// Tile same-sized images into a contact sheet with a 1-pixel separator.
pub fn tile_images(
    height: usize,
    width: usize,
    images: &[Vec<u8>],
    cols: usize,
) -> (usize, usize, Vec<u8>) {
    assert!(cols > 0 && !images.is_empty());
    let rows = images.len().div_ceil(cols);
    let sheet_h = rows * height + rows - 1;
    let sheet_w = cols * width + cols - 1;
    let mut sheet = vec![0u8; sheet_h * sheet_w];
    for (i, img) in images.iter().enumerate() {
        let r0 = (i / cols) * (height + 1);
        let c0 = (i % cols) * (width + 1);
        for r in 0..height {
            let dst = (r0 + r) * sheet_w + c0;
            sheet[dst..dst + width].copy_from_slice(&img[r * width..(r + 1) * width]);
        }
    }
    (sheet_h, sheet_w, sheet)
}
