//! Model checkpoints.
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! 8  bytes  magic "DLTCKPT\0"
//! u32       format version (1)
//! u32       ndim
//! u32       num_layers
//! per layer:  ndim x u32 extent, u32 states
//! per kernel: ndim x u32 size, ndim x u32 stride
//! u64       score count
//! f64 x N   scores, kernel tables bottom-up then the root prior scores
//! u64       FNV-1a hash of everything above
//! ```
//!
//! Scores are raw (pre-softmax) and survive a round-trip bit for bit.

use std::path::Path;

use crate::error::{Error, Result};
use crate::learning::Parameters;
use crate::topology::{build_topology, KernelSpec, LayerShape, ModelTopology};

pub const MAGIC: &[u8; 8] = b"DLTCKPT\0";
pub const VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn checkpoint_to_bytes(topo: &ModelTopology, params: &Parameters) -> Result<Vec<u8>> {
    params.check_shapes(topo)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(topo.ndim() as u32).to_le_bytes());
    out.extend_from_slice(&(topo.num_layers() as u32).to_le_bytes());
    for layer in topo.layers() {
        for &e in &layer.extent {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        out.extend_from_slice(&(layer.states as u32).to_le_bytes());
    }
    for kernel in topo.kernels() {
        for &s in &kernel.size {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for &s in &kernel.stride {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
    }
    out.extend_from_slice(&(params.flat_len() as u64).to_le_bytes());
    for l in 0..topo.num_layers() - 1 {
        for &s in params.kernel_scores(l) {
            out.extend_from_slice(&s.to_le_bytes());
        }
    }
    for &s in params.root_scores() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    let checksum = fnv1a(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    Ok(out)
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

    fn u32_le(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64_le(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64_le(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ModelTopology, Parameters)> {
    if bytes.len() < 8 {
        return Err(Error::TruncatedFile {
            offset: bytes.len(),
            needed: 8 - bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    // checksum covers everything before the trailing hash
    if bytes.len() < 16 {
        return Err(Error::TruncatedFile {
            offset: bytes.len(),
            needed: 16 - bytes.len(),
        });
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    if fnv1a(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }

    let mut r = Reader {
        bytes: body,
        offset: 8,
    };
    let version = r.u32_le()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (this build reads {})",
            version, VERSION
        )));
    }
    let ndim = r.u32_le()? as usize;
    let num_layers = r.u32_le()? as usize;
    if ndim == 0 || ndim > 8 || num_layers == 0 || num_layers > 64 {
        return Err(Error::Checkpoint(format!(
            "implausible header: ndim {}, layers {}",
            ndim, num_layers
        )));
    }
    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let mut extent = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            extent.push(r.u32_le()? as usize);
        }
        let states = r.u32_le()? as usize;
        layers.push(LayerShape { extent, states });
    }
    let mut kernels = Vec::with_capacity(num_layers - 1);
    for _ in 0..num_layers - 1 {
        let mut size = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            size.push(r.u32_le()? as usize);
        }
        let mut stride = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            stride.push(r.u32_le()? as usize);
        }
        kernels.push(KernelSpec { size, stride });
    }
    let topo = build_topology(layers, kernels)?;

    let count = r.u64_le()? as usize;
    let mut params = Parameters::zero_init(&topo);
    if count != params.flat_len() {
        return Err(Error::Checkpoint(format!(
            "score count {} does not match topology ({} expected)",
            count,
            params.flat_len()
        )));
    }
    for l in 0..topo.num_layers() - 1 {
        let dst = params.kernel_scores_mut(l);
        for i in 0..dst.len() {
            dst[i] = r.f64_le()?;
        }
    }
    {
        let dst = params.root_scores_mut();
        for i in 0..dst.len() {
            dst[i] = r.f64_le()?;
        }
    }
    if r.offset != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            body.len() - r.offset
        )));
    }
    Ok((topo, params))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    topo: &ModelTopology,
    params: &Parameters,
) -> Result<()> {
    Ok(std::fs::write(path, checkpoint_to_bytes(topo, params)?)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelTopology, Parameters)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
