//! Plain-text run configuration: `key=value` lines with section prefixes.
//!
//! ```text
//! # reference MNIST model
//! model.layer1.extent=28x28
//! model.layer1.states=2
//! model.kernel1.size=4x4
//! model.kernel1.stride=2x2
//! train.lr=0.05
//! data.levels=2
//! corrupt.patch=12x12
//! output.dir=out
//! ```
//!
//! Every key has a default except the data paths; the defaults describe the
//! reference MNIST model. Specifying *any* `model.*` key replaces the whole
//! model section, which must then be complete (layers 1..=L contiguous with
//! extent and states, kernels 1..=L-1 with size and stride). Extents and
//! kernel shapes are `HxW` for 2-D models or a single number for 1-D.
//! `corrupt.seed` defaults to `train.seed`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::learning::TrainConfig;
use crate::topology::{build_topology, KernelSpec, LayerShape, ModelTopology};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub layers: Vec<LayerShape>,
    pub kernels: Vec<KernelSpec>,
    pub train: TrainConfig,
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Quantization levels for input bytes; must equal layer 1 states.
    pub levels: usize,
    pub train_path: Option<String>,
    pub test_path: Option<String>,
    /// Height and width of the hidden patch.
    pub patch: (usize, usize),
    /// None means "use train.seed".
    pub corrupt_seed: Option<u64>,
    /// Hide a random patch in every training image before fitting.
    pub corrupt_train: bool,
    pub out_dir: String,
}

impl RunConfig {
    /// Reference 28x28 model: layers 2/32/64/1024 states, kernels
    /// 4x4 stride 2, 5x5 stride 2, 5x5 stride 1.
    pub fn default_mnist() -> Self {
        RunConfig {
            layers: vec![
                LayerShape::new_2d(28, 28, 2),
                LayerShape::new_2d(13, 13, 32),
                LayerShape::new_2d(5, 5, 64),
                LayerShape::new_2d(1, 1, 1024),
            ],
            kernels: vec![
                KernelSpec::new_2d((4, 4), (2, 2)),
                KernelSpec::new_2d((5, 5), (2, 2)),
                KernelSpec::new_2d((5, 5), (1, 1)),
            ],
            train: TrainConfig::default(),
            checkpoint_every: 10,
            levels: 2,
            train_path: None,
            test_path: None,
            patch: (12, 12),
            corrupt_seed: None,
            corrupt_train: true,
            out_dir: "out".into(),
        }
    }

    pub fn effective_corrupt_seed(&self) -> u64 {
        self.corrupt_seed.unwrap_or(self.train.seed)
    }

    pub fn topology(&self) -> Result<ModelTopology> {
        build_topology(self.layers.clone(), self.kernels.clone())
    }

    /// Canonical echo: parsing it reproduces this config exactly.
    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push_str(&format!(
                "model.layer{}.extent={}\n",
                i + 1,
                join_extent(&layer.extent)
            ));
            out.push_str(&format!("model.layer{}.states={}\n", i + 1, layer.states));
        }
        for (i, kernel) in self.kernels.iter().enumerate() {
            out.push_str(&format!(
                "model.kernel{}.size={}\n",
                i + 1,
                join_extent(&kernel.size)
            ));
            out.push_str(&format!(
                "model.kernel{}.stride={}\n",
                i + 1,
                join_extent(&kernel.stride)
            ));
        }
        out.push_str(&format!("train.lr={}\n", self.train.lr));
        out.push_str(&format!("train.momentum={}\n", self.train.momentum));
        out.push_str(&format!("train.epochs={}\n", self.train.epochs));
        out.push_str(&format!("train.batch_size={}\n", self.train.batch_size));
        out.push_str(&format!("train.seed={}\n", self.train.seed));
        out.push_str(&format!(
            "train.checkpoint_every={}\n",
            self.checkpoint_every
        ));
        out.push_str(&format!("data.levels={}\n", self.levels));
        if let Some(p) = &self.train_path {
            out.push_str(&format!("data.train={}\n", p));
        }
        if let Some(p) = &self.test_path {
            out.push_str(&format!("data.test={}\n", p));
        }
        out.push_str(&format!("corrupt.patch={}x{}\n", self.patch.0, self.patch.1));
        out.push_str(&format!("corrupt.seed={}\n", self.effective_corrupt_seed()));
        out.push_str(&format!("corrupt.train={}\n", self.corrupt_train));
        out.push_str(&format!("output.dir={}\n", self.out_dir));
        out
    }

    fn validate(&self) -> Result<()> {
        if !(2..=256).contains(&self.levels) || !self.levels.is_power_of_two() {
            return Err(Error::Config(format!(
                "data.levels={} must be a power of two in 2..=256",
                self.levels
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        if self.layers[0].states != self.levels {
            return Err(Error::Config(format!(
                "data.levels={} must equal model.layer1.states={}",
                self.levels, self.layers[0].states
            )));
        }
        if self.train.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !self.train.lr.is_finite() || self.train.lr <= 0.0 {
            return Err(Error::Config("train.lr must be finite and > 0".into()));
        }
        if !self.train.momentum.is_finite() || !(0.0..1.0).contains(&self.train.momentum) {
            return Err(Error::Config("train.momentum must be in [0, 1)".into()));
        }
        if self.patch.0 == 0 || self.patch.1 == 0 {
            return Err(Error::Config("corrupt.patch sides must be >= 1".into()));
        }
        Ok(())
    }
}

pub(crate) fn join_extent(dims: &[usize]) -> String {
    dims.iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

pub(crate) fn parse_extent(key: &str, value: &str) -> Result<Vec<usize>> {
    let dims: Vec<usize> = value
        .split('x')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{}: bad dimension {:?}", key, p)))
        })
        .collect::<Result<_>>()?;
    if dims.is_empty() || dims.len() > 2 || dims.contains(&0) {
        return Err(Error::Config(format!(
            "{}: expected N or HxW with positive sides, got {:?}",
            key, value
        )));
    }
    Ok(dims)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("{}: cannot parse {:?}", key, value)))
}

/// Index in `model.layer3.extent` style keys; 1-based in the file.
fn section_index(key: &str, part: &str, prefix: &str) -> Result<usize> {
    let idx: usize = part
        .strip_prefix(prefix)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Config(format!("bad model key {:?}", key)))?;
    if idx == 0 {
        return Err(Error::Config(format!("{}: indices start at 1", key)));
    }
    Ok(idx - 1)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default_mnist();
    let mut corrupt_seed_explicit = false;

    // model keys buffered so the section can be rebuilt as a whole
    let mut layer_extent: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut layer_states: BTreeMap<usize, usize> = BTreeMap::new();
    let mut kernel_size: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut kernel_stride: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut any_model_key = false;

    let mut seen: BTreeMap<String, ()> = BTreeMap::new();
    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value", line_no + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        if seen.insert(key.to_string(), ()).is_some() {
            return Err(Error::Config(format!("duplicate key {:?}", key)));
        }

        let parts: Vec<&str> = key.split('.').collect();
        match parts.as_slice() {
            ["model", layer, "extent"] if layer.starts_with("layer") => {
                any_model_key = true;
                let i = section_index(key, layer, "layer")?;
                layer_extent.insert(i, parse_extent(key, value)?);
            }
            ["model", layer, "states"] if layer.starts_with("layer") => {
                any_model_key = true;
                let i = section_index(key, layer, "layer")?;
                layer_states.insert(i, parse_num(key, value)?);
            }
            ["model", kernel, "size"] if kernel.starts_with("kernel") => {
                any_model_key = true;
                let i = section_index(key, kernel, "kernel")?;
                kernel_size.insert(i, parse_extent(key, value)?);
            }
            ["model", kernel, "stride"] if kernel.starts_with("kernel") => {
                any_model_key = true;
                let i = section_index(key, kernel, "kernel")?;
                kernel_stride.insert(i, parse_extent(key, value)?);
            }
            ["train", "lr"] => cfg.train.lr = parse_num(key, value)?,
            ["train", "momentum"] => cfg.train.momentum = parse_num(key, value)?,
            ["train", "epochs"] => cfg.train.epochs = parse_num(key, value)?,
            ["train", "batch_size"] => cfg.train.batch_size = parse_num(key, value)?,
            ["train", "seed"] => cfg.train.seed = parse_num(key, value)?,
            ["train", "checkpoint_every"] => cfg.checkpoint_every = parse_num(key, value)?,
            ["data", "levels"] => cfg.levels = parse_num(key, value)?,
            ["data", "train"] => cfg.train_path = Some(value.to_string()),
            ["data", "test"] => cfg.test_path = Some(value.to_string()),
            ["corrupt", "patch"] => {
                let dims = parse_extent(key, value)?;
                cfg.patch = match dims.as_slice() {
                    [s] => (*s, *s),
                    [h, w] => (*h, *w),
                    _ => unreachable!("parse_extent returns 1 or 2 dims"),
                };
            }
            ["corrupt", "seed"] => {
                cfg.corrupt_seed = Some(parse_num(key, value)?);
                corrupt_seed_explicit = true;
            }
            ["corrupt", "train"] => {
                cfg.corrupt_train = match value {
                    "true" => true,
                    "false" => false,
                    _ => {
                        return Err(Error::Config(format!(
                            "{}: expected true or false, got {:?}",
                            key, value
                        )))
                    }
                }
            }
            ["output", "dir"] => cfg.out_dir = value.to_string(),
            _ => return Err(Error::Config(format!("unknown key {:?}", key))),
        }
    }

    if any_model_key {
        let num_layers = layer_extent.len();
        fn contiguous<V>(m: &BTreeMap<usize, V>, n: usize) -> bool {
            m.len() == n && m.keys().copied().eq(0..n)
        }
        if num_layers == 0 || !contiguous(&layer_extent, num_layers) {
            return Err(Error::Config(
                "model.layerN.extent keys must cover 1..=L with no gaps".into(),
            ));
        }
        if !contiguous(&layer_states, num_layers) {
            return Err(Error::Config(
                "model.layerN.states keys must cover 1..=L".into(),
            ));
        }
        let nk = num_layers.saturating_sub(1);
        if !contiguous(&kernel_size, nk) || !contiguous(&kernel_stride, nk) {
            return Err(Error::Config(format!(
                "model.kernelN.size/stride keys must cover 1..={}",
                nk
            )));
        }
        cfg.layers = (0..num_layers)
            .map(|i| LayerShape {
                extent: layer_extent[&i].clone(),
                states: layer_states[&i],
            })
            .collect();
        cfg.kernels = (0..nk)
            .map(|i| KernelSpec {
                size: kernel_size[&i].clone(),
                stride: kernel_stride[&i].clone(),
            })
            .collect();
    }

    if !corrupt_seed_explicit {
        cfg.corrupt_seed = None;
    }
    cfg.validate()?;
    // geometry errors surface at parse time, not first use
    cfg.topology()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}
