//! Model structure: layer shapes, kernel connectivity and duplicate counts.
//!
//! Layers are indexed 0 (pixels) to `L-1` (root). Kernel `l` connects child
//! layer `l` to parent layer `l+1`. Spatial positions are flat row-major
//! indices; a child position `t` is covered by parent `p` at kernel offset
//! `k` when `stride * p + k == t` holds per dimension.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};

use crate::error::{Error, Result};

/// Spatial size and state count of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    /// Per-dimension spatial size (1-D or 2-D).
    pub extent: Vec<usize>,
    /// Number of categorical states.
    pub states: usize,
}

impl LayerShape {
    pub fn new_1d(extent: usize, states: usize) -> Self {
        LayerShape {
            extent: vec![extent],
            states,
        }
    }

    pub fn new_2d(height: usize, width: usize, states: usize) -> Self {
        LayerShape {
            extent: vec![height, width],
            states,
        }
    }

    /// Number of spatial positions (product of the extents).
    pub fn positions(&self) -> usize {
        self.extent.iter().product()
    }
}

/// Kernel geometry connecting two adjacent layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelSpec {
    /// Per-dimension kernel extent.
    pub size: Vec<usize>,
    /// Per-dimension step between kernel applications.
    pub stride: Vec<usize>,
}

impl KernelSpec {
    pub fn new_1d(size: usize, stride: usize) -> Self {
        KernelSpec {
            size: vec![size],
            stride: vec![stride],
        }
    }

    pub fn new_2d(size: (usize, usize), stride: (usize, usize)) -> Self {
        KernelSpec {
            size: vec![size.0, size.1],
            stride: vec![stride.0, stride.1],
        }
    }

    /// Number of kernel offsets (product of the sizes).
    pub fn offsets(&self) -> usize {
        self.size.iter().product()
    }
}

/// The validated graph skeleton: shapes, adjacency and duplicate counts.
#[derive(Debug, Clone)]
pub struct ModelTopology {
    layers: Vec<LayerShape>,
    kernels: Vec<KernelSpec>,
    /// duplicates[l][t] = number of materialized copies of position t in layer l.
    duplicates: Vec<Vec<BigUint>>,
    /// Same counts as f64, used as sampling exponents.
    duplicates_f64: Vec<Vec<f64>>,
    /// parents[l][t] = (parent position in layer l+1, flat kernel offset); l < L-1.
    parents: Vec<Vec<Vec<(usize, usize)>>>,
    /// children[l][p] = (child position in layer l, flat kernel offset), one
    /// entry per offset, ordered by offset.
    children: Vec<Vec<Vec<(usize, usize)>>>,
}

fn decode(extent: &[usize], flat: usize) -> Vec<usize> {
    let mut coords = vec![0; extent.len()];
    let mut rem = flat;
    for d in (0..extent.len()).rev() {
        coords[d] = rem % extent[d];
        rem /= extent[d];
    }
    coords
}

fn encode(extent: &[usize], coords: &[usize]) -> usize {
    let mut flat = 0;
    for d in 0..extent.len() {
        flat = flat * extent[d] + coords[d];
    }
    flat
}

/// Build and validate the full topology.
pub fn build_topology(layers: Vec<LayerShape>, kernels: Vec<KernelSpec>) -> Result<ModelTopology> {
    if layers.is_empty() {
        return Err(Error::GeometryMismatch {
            layer: 0,
            reason: "no layers".into(),
        });
    }
    if layers.len() != kernels.len() + 1 {
        return Err(Error::GeometryMismatch {
            layer: layers.len(),
            reason: format!(
                "{} layers need {} kernels, got {}",
                layers.len(),
                layers.len() - 1,
                kernels.len()
            ),
        });
    }
    let ndim = layers[0].extent.len();
    if ndim == 0 {
        return Err(Error::GeometryMismatch {
            layer: 0,
            reason: "zero-dimensional extent".into(),
        });
    }
    for (l, layer) in layers.iter().enumerate() {
        if layer.extent.len() != ndim {
            return Err(Error::GeometryMismatch {
                layer: l,
                reason: format!("expected {} dimensions, got {}", ndim, layer.extent.len()),
            });
        }
        if layer.extent.iter().any(|&e| e == 0) {
            return Err(Error::GeometryMismatch {
                layer: l,
                reason: "extent must be >= 1 in every dimension".into(),
            });
        }
        if layer.states == 0 {
            return Err(Error::GeometryMismatch {
                layer: l,
                reason: "states must be >= 1".into(),
            });
        }
    }
    let top = layers.len() - 1;
    if layers[top].extent.iter().any(|&e| e != 1) {
        return Err(Error::GeometryMismatch {
            layer: top,
            reason: format!("top layer extent must be 1, got {:?}", layers[top].extent),
        });
    }
    for (l, kernel) in kernels.iter().enumerate() {
        if kernel.size.len() != ndim || kernel.stride.len() != ndim {
            return Err(Error::GeometryMismatch {
                layer: l,
                reason: "kernel dimensionality does not match layers".into(),
            });
        }
        for d in 0..ndim {
            let child = layers[l].extent[d];
            let parent = layers[l + 1].extent[d];
            let size = kernel.size[d];
            let stride = kernel.stride[d];
            if size == 0 || stride == 0 {
                return Err(Error::GeometryMismatch {
                    layer: l,
                    reason: "kernel size and stride must be >= 1".into(),
                });
            }
            if size > child || (child - size) % stride != 0 || (child - size) / stride + 1 != parent
            {
                return Err(Error::GeometryMismatch {
                    layer: l,
                    reason: format!(
                        "dim {}: child extent {} with kernel {}/stride {} does not map onto parent extent {}",
                        d, child, size, stride, parent
                    ),
                });
            }
        }
    }

    // Adjacency, both directions.
    let mut parents: Vec<Vec<Vec<(usize, usize)>>> = Vec::with_capacity(kernels.len());
    let mut children: Vec<Vec<Vec<(usize, usize)>>> = Vec::with_capacity(kernels.len());
    for (l, kernel) in kernels.iter().enumerate() {
        let child_extent = &layers[l].extent;
        let parent_extent = &layers[l + 1].extent;
        let mut par: Vec<Vec<(usize, usize)>> = vec![Vec::new(); layers[l].positions()];
        let mut chi: Vec<Vec<(usize, usize)>> =
            vec![Vec::with_capacity(kernel.offsets()); layers[l + 1].positions()];
        for p in 0..layers[l + 1].positions() {
            let pc = decode(parent_extent, p);
            for k in 0..kernel.offsets() {
                let kc = decode(&kernel.size, k);
                let cc: Vec<usize> = (0..ndim)
                    .map(|d| kernel.stride[d] * pc[d] + kc[d])
                    .collect();
                let c = encode(child_extent, &cc);
                chi[p].push((c, k));
                par[c].push((p, k));
            }
        }
        parents.push(par);
        children.push(chi);
    }

    // Duplicate counts, root downward.
    let top_positions = layers[top].positions();
    let mut duplicates: Vec<Vec<BigUint>> = vec![Vec::new(); layers.len()];
    duplicates[top] = vec![BigUint::one(); top_positions];
    for l in (0..top).rev() {
        let mut dup = vec![BigUint::zero(); layers[l].positions()];
        for (t, cell) in dup.iter_mut().enumerate() {
            for &(p, _) in &parents[l][t] {
                *cell += &duplicates[l + 1][p];
            }
            debug_assert!(!cell.is_zero(), "position without parents");
        }
        duplicates[l] = dup;
    }
    let duplicates_f64 = duplicates
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|d| d.to_f64().unwrap_or(f64::INFINITY))
                .collect()
        })
        .collect();

    Ok(ModelTopology {
        layers,
        kernels,
        duplicates,
        duplicates_f64,
        parents,
        children,
    })
}

impl ModelTopology {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn ndim(&self) -> usize {
        self.layers[0].extent.len()
    }

    pub fn layer(&self, l: usize) -> &LayerShape {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn kernel(&self, l: usize) -> &KernelSpec {
        &self.kernels[l]
    }

    pub fn kernels(&self) -> &[KernelSpec] {
        &self.kernels
    }

    /// Total number of spatial positions over all layers (unique messages).
    pub fn total_positions(&self) -> usize {
        self.layers.iter().map(LayerShape::positions).sum()
    }

    /// Total number of nodes in the fully duplicated tree.
    pub fn total_nodes(&self) -> BigUint {
        self.duplicates
            .iter()
            .flat_map(|layer| layer.iter())
            .sum()
    }

    pub fn duplicates(&self, l: usize) -> &[BigUint] {
        &self.duplicates[l]
    }

    /// Duplicate count as an f64 exponent for sampling.
    pub fn duplicate_f64(&self, l: usize, t: usize) -> f64 {
        self.duplicates_f64[l][t]
    }

    pub fn max_duplicate(&self) -> &BigUint {
        self.duplicates
            .iter()
            .flat_map(|layer| layer.iter())
            .max()
            .expect("topology has at least one layer")
    }

    /// Parents of child position `t` in layer `l` (`l < L-1`), as
    /// (parent position, flat kernel offset) pairs.
    pub fn parents_of(&self, l: usize, t: usize) -> &[(usize, usize)] {
        &self.parents[l][t]
    }

    /// Children of parent position `p` in layer `l+1`, as
    /// (child position, flat kernel offset) pairs ordered by offset.
    pub fn children_of(&self, l: usize, p: usize) -> &[(usize, usize)] {
        &self.children[l][p]
    }

    /// Total number of weight parameters: kernel tables plus the root prior.
    pub fn count_parameters(&self) -> u64 {
        let kernels: u64 = self
            .kernels
            .iter()
            .enumerate()
            .map(|(l, k)| {
                k.offsets() as u64 * self.layers[l].states as u64 * self.layers[l + 1].states as u64
            })
            .sum();
        kernels + self.layers[self.layers.len() - 1].states as u64
    }
}

/// Closed forms for the 1-D kernel-4 / stride-2 family: per-layer sizes,
/// total positions and total node count.
pub fn closed_form_counts(num_layers: usize) -> (Vec<BigUint>, BigUint, BigUint) {
    assert!(num_layers >= 1, "need at least one layer");
    let l = num_layers as u32;
    let two = BigUint::from(2u32);
    let three = BigUint::from(3u32);
    // per-layer size 3 * 2^(L-l) - 2, listed bottom (pixels) to top (root)
    let per_layer: Vec<BigUint> = (1..=l)
        .map(|i| &three * two.pow(l - i) - BigUint::from(2u32))
        .collect();
    let total_positions = &three * two.pow(l) - BigUint::from(2 * l + 3);
    let total_nodes = (two.pow(2 * l) - BigUint::one()) / &three;
    (per_layer, total_positions, total_nodes)
}

/// Build the canonical 1-D kernel-4 / stride-2 topology with `num_layers`
/// layers (all state counts 1; structure only).
pub fn canonical_1d_topology(num_layers: usize) -> Result<ModelTopology> {
    let (per_layer, _, _) = closed_form_counts(num_layers);
    let layers: Vec<LayerShape> = per_layer
        .iter()
        .map(|e| LayerShape::new_1d(e.to_usize().expect("extent fits usize"), 1))
        .collect();
    let kernels = vec![KernelSpec::new_1d(4, 2); num_layers - 1];
    build_topology(layers, kernels)
}

/// Zero-overlap configuration: 2x2 kernels with stride 2 on every level
/// except the last, which collapses the remaining extent onto a single root.
pub fn quadtree_topology(input_extent: (usize, usize), states: &[usize]) -> Result<ModelTopology> {
    let num_layers = states.len();
    if num_layers < 2 {
        return Err(Error::GeometryMismatch {
            layer: 0,
            reason: "quadtree needs at least two layers".into(),
        });
    }
    let mut layers = Vec::with_capacity(num_layers);
    let mut kernels = Vec::with_capacity(num_layers - 1);
    let (mut h, mut w) = input_extent;
    layers.push(LayerShape::new_2d(h, w, states[0]));
    for (i, &f) in states.iter().enumerate().skip(1) {
        if i < num_layers - 1 {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::GeometryMismatch {
                    layer: i,
                    reason: format!("extent {}x{} not divisible by 2", h, w),
                });
            }
            h /= 2;
            w /= 2;
            kernels.push(KernelSpec::new_2d((2, 2), (2, 2)));
        } else {
            // final kernel swallows whatever extent is left
            kernels.push(KernelSpec::new_2d((h, w), (h, w)));
            h = 1;
            w = 1;
        }
        layers.push(LayerShape::new_2d(h, w, f));
    }
    build_topology(layers, kernels)
}
