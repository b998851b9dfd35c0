//! Shared helpers for the integration tests: a deterministic synthetic
//! stroke corpus, an optional probe for a real IDX digit set, and small
//! file-writing utilities.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dlt::data::{load_idx_images, write_idx_images, ImageSet};

fn draw(img: &mut [u8], height: usize, width: usize, r: isize, c: isize) {
    if r >= 0 && (r as usize) < height && c >= 0 && (c as usize) < width {
        img[r as usize * width + c as usize] = 255;
    }
}

/// Deterministic stand-in for handwritten digits: black images with one to
/// three white strokes (bars, diagonals, small blobs). Ink fraction and
/// stroke continuity are what the trainer has to pick up, so the corpus is
/// sparse and spatially correlated like the real thing.
pub fn synthetic_strokes(count: usize, height: usize, width: usize, seed: u64) -> ImageSet {
    assert!(height >= 4 && width >= 4, "canvas too small for strokes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = vec![0u8; count * height * width];
    for img in pixels.chunks_mut(height * width) {
        let strokes = rng.random_range(1..=3);
        for _ in 0..strokes {
            let thick = rng.random_range(1..=2) as isize;
            match rng.random_range(0..4) {
                0 => {
                    let r = rng.random_range(0..height) as isize;
                    let c0 = rng.random_range(0..width / 2);
                    let len = rng.random_range(width / 3..=width - c0);
                    for dc in 0..len as isize {
                        for t in 0..thick {
                            draw(img, height, width, r + t, c0 as isize + dc);
                        }
                    }
                }
                1 => {
                    let c = rng.random_range(0..width) as isize;
                    let r0 = rng.random_range(0..height / 2);
                    let len = rng.random_range(height / 3..=height - r0);
                    for dr in 0..len as isize {
                        for t in 0..thick {
                            draw(img, height, width, r0 as isize + dr, c + t);
                        }
                    }
                }
                2 => {
                    let dc = if rng.random_bool(0.5) { 1isize } else { -1 };
                    let r0 = rng.random_range(0..height / 2) as isize;
                    let c0 = rng.random_range(0..width) as isize;
                    let len = rng.random_range(height / 3..=height - r0 as usize);
                    for i in 0..len as isize {
                        for t in 0..thick {
                            draw(img, height, width, r0 + i, c0 + i * dc + t);
                        }
                    }
                }
                _ => {
                    let bh = rng.random_range(2..=height.min(6));
                    let bw = rng.random_range(2..=width.min(6));
                    let r0 = rng.random_range(0..=height - bh);
                    let c0 = rng.random_range(0..=width - bw);
                    for r in r0..r0 + bh {
                        for c in c0..c0 + bw {
                            img[r * width + c] = 255;
                        }
                    }
                }
            }
        }
    }
    ImageSet::new(count, height, width, pixels).expect("pixel count matches by construction")
}

fn first_n(set: &ImageSet, n: usize) -> ImageSet {
    slice(set, 0, n)
}

/// Images `from..to` as their own set.
pub fn slice(set: &ImageSet, from: usize, to: usize) -> ImageSet {
    let mut pixels = Vec::with_capacity((to - from) * set.height * set.width);
    for i in from..to {
        pixels.extend_from_slice(set.image(i));
    }
    ImageSet::new(to - from, set.height, set.width, pixels).expect("slicing keeps shape")
}

/// Real 28x28 digit images when available, the synthetic stroke corpus
/// otherwise. Looks for an IDX image file under `$DLT_MNIST_DIR`, then under
/// `<workspace>/data/`. Returns the images and a label for logging.
pub fn training_images(count: usize) -> (ImageSet, &'static str) {
    let mut candidates: Vec<PathBuf> = Vec::new();
    if let Some(dir) = std::env::var_os("DLT_MNIST_DIR") {
        let dir = PathBuf::from(dir);
        candidates.push(dir.join("train-images-idx3-ubyte"));
        candidates.push(dir.join("train-images.idx3-ubyte"));
    }
    let workspace = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    candidates.push(workspace.join("data/train-images-idx3-ubyte"));
    candidates.push(workspace.join("data/train-images.idx3-ubyte"));
    for path in candidates {
        if let Ok(set) = load_idx_images(&path) {
            if set.height == 28 && set.width == 28 && set.count >= count {
                println!("using {} ({} images)", path.display(), set.count);
                return (first_n(&set, count), "idx digits");
            }
        }
    }
    println!("no 28x28 IDX digits found (set DLT_MNIST_DIR to use them); falling back to the synthetic stroke corpus");
    (synthetic_strokes(count, 28, 28, 0x5EED), "synthetic strokes")
}

pub fn write_idx(path: impl AsRef<Path>, set: &ImageSet) {
    std::fs::write(path, write_idx_images(set)).expect("write IDX file");
}
