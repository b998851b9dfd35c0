//! Upward message passing and the marginal log-likelihood.
//!
//! Observed pixels clamp their leaf message to a one-hot vector, missing
//! pixels send the all-ones message, and each parent message is the product
//! over its children of a weight-mixed child message. All duplicates of a
//! position share one message, so the pass touches every position exactly
//! once.
//!
//! Messages are stored as logs with `-inf` as exact zero. Each vector is
//! also kept in a max-scaled linear form (`exp(log u - max)` in `[0, 1]`)
//! so the per-parent mixing step is a plain dot product; an explicit
//! renormalization guard keeps long products away from underflow. The result
//! is identical to summing `logsumexp(log w + log u)` terms, including the
//! propagation of exact zeros.

use crate::error::{Error, Result};
use crate::learning::Weights;
use crate::math::logsumexp;
use crate::topology::ModelTopology;

/// Sentinel for an unobserved pixel.
pub const MISSING: u16 = u16::MAX;

/// Per-pixel evidence: an observed state index or missing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationGrid {
    extent: Vec<usize>,
    values: Vec<u16>,
}

impl ObservationGrid {
    /// Grid with every pixel missing.
    pub fn all_missing(extent: Vec<usize>) -> Self {
        let n = extent.iter().product();
        ObservationGrid {
            extent,
            values: vec![MISSING; n],
        }
    }

    /// Fully observed grid from row-major states.
    pub fn from_states(extent: Vec<usize>, states: &[u16]) -> Result<Self> {
        let n: usize = extent.iter().product();
        if states.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: states.len(),
            });
        }
        Ok(ObservationGrid {
            extent,
            values: states.to_vec(),
        })
    }

    pub fn extent(&self) -> &[usize] {
        &self.extent
    }

    pub fn positions(&self) -> usize {
        self.values.len()
    }

    pub fn set_observed(&mut self, t: usize, state: u16) {
        self.values[t] = state;
    }

    pub fn set_missing(&mut self, t: usize) {
        self.values[t] = MISSING;
    }

    /// Observed state at flat position `t`, or `None` when missing.
    pub fn get(&self, t: usize) -> Option<u16> {
        match self.values[t] {
            MISSING => None,
            s => Some(s),
        }
    }

    pub fn observed_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != MISSING).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<u16>> + '_ {
        self.values.iter().map(|&v| if v == MISSING { None } else { Some(v) })
    }
}

/// Log-domain messages for every (layer, position), plus the max-scaled
/// linear form used by the forward pass, gradient and sampler.
#[derive(Debug, Clone)]
pub struct MessageGrid {
    /// log_msg[l][t * F + f] = log u, -inf for exact zero.
    log_msg: Vec<Vec<f64>>,
    /// scaled[l][t * F + f] = exp(log u - max_log), in [0, 1].
    scaled: Vec<Vec<f64>>,
    /// max_log[l][t] = max over f of log_msg.
    max_log: Vec<Vec<f64>>,
}

impl MessageGrid {
    /// All-ones messages (log zeroes) everywhere.
    pub fn new(topo: &ModelTopology) -> Self {
        let mut log_msg = Vec::with_capacity(topo.num_layers());
        let mut scaled = Vec::with_capacity(topo.num_layers());
        let mut max_log = Vec::with_capacity(topo.num_layers());
        for l in 0..topo.num_layers() {
            let n = topo.layer(l).positions() * topo.layer(l).states;
            log_msg.push(vec![0.0; n]);
            scaled.push(vec![1.0; n]);
            max_log.push(vec![0.0; topo.layer(l).positions()]);
        }
        MessageGrid {
            log_msg,
            scaled,
            max_log,
        }
    }

    /// Log message vector at (layer `l`, position `t`).
    pub fn log_message(&self, l: usize, t: usize) -> &[f64] {
        let states = self.log_msg[l].len() / self.max_log[l].len();
        &self.log_msg[l][t * states..(t + 1) * states]
    }

    pub(crate) fn scaled_message(&self, l: usize, t: usize) -> &[f64] {
        let states = self.scaled[l].len() / self.max_log[l].len();
        &self.scaled[l][t * states..(t + 1) * states]
    }

    fn matches(&self, topo: &ModelTopology) -> bool {
        self.log_msg.len() == topo.num_layers()
            && (0..topo.num_layers()).all(|l| {
                self.log_msg[l].len() == topo.layer(l).positions() * topo.layer(l).states
            })
    }
}

/// Store a finished log-vector and derive its scaled form.
fn seal_position(log: &mut [f64], scaled: &mut [f64], max_out: &mut f64) {
    let m = log.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    *max_out = m;
    if m == f64::NEG_INFINITY {
        scaled.fill(0.0);
    } else {
        for (s, &v) in scaled.iter_mut().zip(log.iter()) {
            *s = (v - m).exp();
        }
    }
}

/// Turn pixel evidence into leaf messages; upper layers stay untouched.
pub fn init_leaf_messages(obs: &ObservationGrid, topo: &ModelTopology) -> Result<MessageGrid> {
    if obs.extent() != topo.layer(0).extent {
        return Err(Error::ExtentMismatch {
            expected: topo.layer(0).extent.clone(),
            got: obs.extent().to_vec(),
        });
    }
    let states = topo.layer(0).states;
    let mut grid = MessageGrid::new(topo);
    for t in 0..obs.positions() {
        if let Some(s) = obs.get(t) {
            let s = s as usize;
            if s >= states {
                return Err(Error::InvalidLayerOrState(format!(
                    "observed state {} at position {} but layer has {} states",
                    s, t, states
                )));
            }
            let log = &mut grid.log_msg[0][t * states..(t + 1) * states];
            log.fill(f64::NEG_INFINITY);
            log[s] = 0.0;
            let sc = &mut grid.scaled[0][t * states..(t + 1) * states];
            sc.fill(0.0);
            sc[s] = 1.0;
            // max stays 0
        }
    }
    Ok(grid)
}

/// Below this the running product is folded into a log offset.
const RENORM_FLOOR: f64 = 1e-250;

/// Fill every layer above the leaves, bottom-up.
///
/// For parent position p and parent state g the message is
/// `prod over children (c, k) of sum over f of w[l][k][g][f] * u_c[f]`,
/// taken in the log domain. Each child contributes its max-log once and a
/// scaled dot product `a in (0, 1]`; the running product of the `a` values
/// is renormalized whenever it drops below [`RENORM_FLOOR`].
pub fn forward_pass(
    weights: &Weights,
    topo: &ModelTopology,
    grid: &mut MessageGrid,
) -> Result<()> {
    weights.check_shapes(topo)?;
    if !grid.matches(topo) {
        return Err(Error::ShapeMismatch(
            "message grid does not match topology".into(),
        ));
    }
    for l in 0..topo.num_layers() - 1 {
        let f_states = topo.layer(l).states;
        let g_states = topo.layer(l + 1).states;
        let table = weights.kernel(l);
        let (log_lo, log_hi) = grid.log_msg.split_at_mut(l + 1);
        let (scaled_lo, scaled_hi) = grid.scaled.split_at_mut(l + 1);
        let (max_lo, max_hi) = grid.max_log.split_at_mut(l + 1);
        let child_scaled = &scaled_lo[l];
        let child_max = &max_lo[l];
        let parent_log = &mut log_hi[0];
        let parent_scaled = &mut scaled_hi[0];
        let parent_max = &mut max_hi[0];
        let _ = log_lo;

        let mut acc = vec![1.0f64; g_states];
        let mut shift = vec![0.0f64; g_states];
        for p in 0..topo.layer(l + 1).positions() {
            acc.fill(1.0);
            shift.fill(0.0);
            let mut base = 0.0f64;
            for &(c, k) in topo.children_of(l, p) {
                base += child_max[c];
                let v = &child_scaled[c * f_states..(c + 1) * f_states];
                for (g, acc_g) in acc.iter_mut().enumerate() {
                    let row = &table[(k * g_states + g) * f_states..][..f_states];
                    let mut a = 0.0f64;
                    for (w, x) in row.iter().zip(v.iter()) {
                        a += w * x;
                    }
                    *acc_g *= a;
                }
                for (acc_g, shift_g) in acc.iter_mut().zip(shift.iter_mut()) {
                    if *acc_g > 0.0 && *acc_g < RENORM_FLOOR {
                        *shift_g += acc_g.ln();
                        *acc_g = 1.0;
                    }
                }
            }
            let out = &mut parent_log[p * g_states..(p + 1) * g_states];
            for g in 0..g_states {
                out[g] = base + shift[g] + acc[g].ln();
            }
            seal_position(
                out,
                &mut parent_scaled[p * g_states..(p + 1) * g_states],
                &mut parent_max[p],
            );
        }
    }
    Ok(())
}

/// Marginal log-likelihood from the root message and a root prior:
/// `logsumexp over f of (log prior[f] + root_message[f])`.
pub fn log_likelihood(root_message: &[f64], root_prior: &[f64]) -> Result<f64> {
    if root_message.len() != root_prior.len() {
        return Err(Error::LengthMismatch {
            expected: root_message.len(),
            got: root_prior.len(),
        });
    }
    let terms: Vec<f64> = root_message
        .iter()
        .zip(root_prior.iter())
        .map(|(&u, &w)| u + w.ln())
        .collect();
    Ok(logsumexp(&terms))
}

/// Convenience: leaf init + forward pass + root contraction in one call.
pub fn log_likelihood_of(
    weights: &Weights,
    topo: &ModelTopology,
    obs: &ObservationGrid,
) -> Result<f64> {
    let mut grid = init_leaf_messages(obs, topo)?;
    forward_pass(weights, topo, &mut grid)?;
    let top = topo.num_layers() - 1;
    log_likelihood(grid.log_message(top, 0), weights.root())
}
