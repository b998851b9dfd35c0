//! Constrained top-down sampling, in-painting and part visualization.
//!
//! All duplicates of a position must take one state, so the downward pass
//! samples each position once from the product of what every parent copy
//! wants, with each parent's vote raised to that parent's duplicate count:
//!
//! ```text
//! log pi[f] = D(l,t) * log u[f] + sum over parents (p,k) of
//!             D(l+1,p) * log w[k][z_parent][f]
//! ```
//!
//! Exponents stay in the log domain (counts multiply log-values), so no
//! linear-domain power is ever formed. Positions near the border simply
//! have fewer parents in the sum. Each position consumes exactly one
//! uniform draw, in layer-major then row-major order, so a fixed seed fixes
//! the whole grid.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::inference::{forward_pass, init_leaf_messages, MessageGrid, ObservationGrid};
use crate::learning::Weights;
use crate::topology::{build_topology, KernelSpec, LayerShape, ModelTopology};

/// One sampled state per (layer, position).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleGrid {
    states: Vec<Vec<u16>>,
}

impl SampleGrid {
    pub(crate) fn from_layers(states: Vec<Vec<u16>>) -> Self {
        SampleGrid { states }
    }

    /// States of layer `l`, row-major.
    pub fn layer(&self, l: usize) -> &[u16] {
        &self.states[l]
    }

    pub fn num_layers(&self) -> usize {
        self.states.len()
    }
}

/// `d * x` with the convention that a log-value of exact zero stays zero
/// for any count, including infinite ones from counts beyond f64 range.
fn dmul(d: f64, x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        d * x
    }
}

/// Draw from the categorical given by unnormalized log-weights. One uniform
/// draw; the cumulative walk uses strict inequality, so zero-mass states are
/// never chosen. `None` when every weight is zero.
fn categorical_from_log(log_weights: &[f64], rng: &mut ChaCha8Rng) -> Option<usize> {
    let max = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let draw: f64 = rng.random();
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut total = 0.0;
    for &lw in log_weights {
        total += (lw - max).exp();
    }
    let threshold = draw * total;
    let mut cum = 0.0;
    let mut last_nonzero = None;
    for (i, &lw) in log_weights.iter().enumerate() {
        let p = (lw - max).exp();
        if p > 0.0 {
            last_nonzero = Some(i);
        }
        cum += p;
        if cum > threshold {
            return Some(i);
        }
    }
    // rounding pushed the walk just short of the total
    last_nonzero
}

/// Sample the root state from the normalized product of prior and root
/// message. The error's location fields are filled in by the full-pass
/// drivers; standalone callers see layer 0, position 0.
pub fn sample_root(u_root: &[f64], prior: &[f64], rng: &mut ChaCha8Rng) -> Result<usize> {
    if u_root.len() != prior.len() {
        return Err(Error::LengthMismatch {
            expected: u_root.len(),
            got: prior.len(),
        });
    }
    let logits: Vec<f64> = u_root
        .iter()
        .zip(prior.iter())
        .map(|(&u, &w)| u + w.ln())
        .collect();
    categorical_from_log(&logits, rng).ok_or(Error::AllZeroPosterior {
        layer: 0,
        position: 0,
    })
}

/// Sample every position of layer `l` given the states of layer `l + 1`.
pub fn sample_layer(
    l: usize,
    z_above: &[u16],
    messages: &MessageGrid,
    weights: &Weights,
    topo: &ModelTopology,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u16>> {
    let f_states = topo.layer(l).states;
    let g_states = topo.layer(l + 1).states;
    if z_above.len() != topo.layer(l + 1).positions() {
        return Err(Error::LengthMismatch {
            expected: topo.layer(l + 1).positions(),
            got: z_above.len(),
        });
    }
    let table = weights.kernel(l);
    let mut out = Vec::with_capacity(topo.layer(l).positions());
    let mut logits = vec![0.0f64; f_states];
    for t in 0..topo.layer(l).positions() {
        let u = messages.log_message(l, t);
        let d_own = topo.duplicate_f64(l, t);
        for (f, slot) in logits.iter_mut().enumerate() {
            *slot = dmul(d_own, u[f]);
        }
        for &(p, k) in topo.parents_of(l, t) {
            let g = z_above[p] as usize;
            let d_parent = topo.duplicate_f64(l + 1, p);
            let row = &table[(k * g_states + g) * f_states..][..f_states];
            for (slot, &w) in logits.iter_mut().zip(row.iter()) {
                *slot += dmul(d_parent, w.ln());
            }
        }
        let f = categorical_from_log(&logits, rng).ok_or(Error::AllZeroPosterior {
            layer: l,
            position: t,
        })?;
        out.push(f as u16);
    }
    Ok(out)
}

fn sample_top_down(
    weights: &Weights,
    topo: &ModelTopology,
    grid: &MessageGrid,
    prior: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<SampleGrid> {
    let top = topo.num_layers() - 1;
    let mut states: Vec<Vec<u16>> = vec![Vec::new(); topo.num_layers()];
    let z_root = sample_root(grid.log_message(top, 0), prior, rng).map_err(|e| match e {
        Error::AllZeroPosterior { .. } => Error::AllZeroPosterior {
            layer: top,
            position: 0,
        },
        other => other,
    })?;
    states[top] = vec![z_root as u16];
    for l in (0..top).rev() {
        states[l] = sample_layer(l, &states[l + 1], grid, weights, topo, rng)?;
    }
    Ok(SampleGrid { states })
}

/// Sample a full state grid conditioned on the observations: one upward
/// message pass, then the constrained downward pass.
pub fn sample_conditional(
    weights: &Weights,
    topo: &ModelTopology,
    obs: &ObservationGrid,
    rng: &mut ChaCha8Rng,
) -> Result<SampleGrid> {
    let mut grid = init_leaf_messages(obs, topo)?;
    forward_pass(weights, topo, &mut grid)?;
    sample_top_down(weights, topo, &grid, weights.root(), rng)
}

/// Completed image: categorical states and their byte intensities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inpainted {
    pub extent: Vec<usize>,
    pub states: Vec<u16>,
    pub intensities: Vec<u8>,
}

/// Map a state index to a byte intensity on the uniform [0, 255] grid.
pub fn state_to_intensity(state: u16, levels: usize) -> u8 {
    if levels <= 1 {
        return 0;
    }
    ((state as f64 / (levels - 1) as f64) * 255.0).round() as u8
}

/// Fill the missing pixels of `obs` with one conditional sample; observed
/// pixels pass through untouched.
pub fn inpaint(
    weights: &Weights,
    topo: &ModelTopology,
    obs: &ObservationGrid,
    rng: &mut ChaCha8Rng,
) -> Result<Inpainted> {
    let sample = sample_conditional(weights, topo, obs, rng)?;
    let levels = topo.layer(0).states;
    let mut states = sample.layer(0).to_vec();
    for (t, s) in states.iter_mut().enumerate() {
        if let Some(o) = obs.get(t) {
            *s = o;
        }
    }
    let intensities = states
        .iter()
        .map(|&s| state_to_intensity(s, levels))
        .collect();
    Ok(Inpainted {
        extent: topo.layer(0).extent.clone(),
        states,
        intensities,
    })
}

/// Render what one state of one layer looks like: cut out the sub-model
/// rooted at a single layer-`layer` node, clamp its prior to `state`, and
/// draw an unconditional sample of its receptive field.
///
/// `layer` is 1-based as printed by `stats` (1 = pixel layer), valid from 2
/// to the number of layers. Returns the receptive-field extent and the
/// sampled intensities.
pub fn visualize_state(
    weights: &Weights,
    topo: &ModelTopology,
    layer: usize,
    state: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<u8>)> {
    if layer < 2 || layer > topo.num_layers() {
        return Err(Error::InvalidLayerOrState(format!(
            "layer {} out of range 2..={}",
            layer,
            topo.num_layers()
        )));
    }
    let li = layer - 1;
    if state >= topo.layer(li).states {
        return Err(Error::InvalidLayerOrState(format!(
            "state {} out of range for layer {} with {} states",
            state,
            layer,
            topo.layer(li).states
        )));
    }

    let mut layers = Vec::with_capacity(li + 1);
    for j in 0..=li {
        layers.push(LayerShape {
            extent: sub_extent(topo, li, j),
            states: topo.layer(j).states,
        });
    }
    let kernels: Vec<KernelSpec> = (0..li).map(|j| topo.kernel(j).clone()).collect();
    let sub_topo = build_topology(layers, kernels)?;

    let sub_weights = Weights::for_subtree(
        (0..li).map(|j| weights.kernel(j).to_vec()).collect(),
        one_hot(topo.layer(li).states, state),
    );
    let obs = ObservationGrid::all_missing(sub_topo.layer(0).extent.clone());
    let mut grid = init_leaf_messages(&obs, &sub_topo)?;
    forward_pass(&sub_weights, &sub_topo, &mut grid)?;
    let sample = sample_top_down(&sub_weights, &sub_topo, &grid, sub_weights.root(), rng)?;

    let levels = topo.layer(0).states;
    let bytes = sample
        .layer(0)
        .iter()
        .map(|&s| state_to_intensity(s, levels))
        .collect();
    Ok((sub_topo.layer(0).extent.clone(), bytes))
}

/// Extent at layer `j` of the sub-model rooted at one layer-`li` node: the
/// node's receptive field within layer `j`.
fn sub_extent(topo: &ModelTopology, li: usize, j: usize) -> Vec<usize> {
    let ndim = topo.ndim();
    let mut rf = vec![1usize; ndim];
    for jj in (j..li).rev() {
        let k = topo.kernel(jj);
        for d in 0..ndim {
            rf[d] = k.stride[d] * (rf[d] - 1) + k.size[d];
        }
    }
    rf
}

fn one_hot(len: usize, idx: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[idx] = 1.0;
    v
}
