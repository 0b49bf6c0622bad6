//! Recurrent position encodings.
//!
//! The encoding `g` identifies "where" in the task structure. It is
//! updated per action by a learnable transition, `g_pi = act(g W_a)`,
//! normalised to a z-score before forming attention keys/queries, and
//! stabilised against drift by a gated pull toward the position retrieved
//! from memory at a recognised landmark:
//!
//!   g = g_pi + gate(g_ret, g_pi) * (g_ret - g_pi)      (elementwise)
//!
//! with `g_ret = map_mlp(raw retrieved position)` and
//! `gate = sigmoid(gate_mlp([g_ret, g_pi]))` in `(0,1)^n`, so each
//! coordinate of `g` lies between the path-integrated and retrieved
//! values. With no stored memories the combined encoding is exactly
//! `g_pi`.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::mlp::Mlp;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(Activation::Linear),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// One transition matrix per action id.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionWeights {
    pub matrices: Vec<Tensor>,
    pub activation: Activation,
}

impl TransitionWeights {
    pub fn n_actions(&self) -> usize {
        self.matrices.len()
    }

    pub fn n_g(&self) -> usize {
        self.matrices[0].rows
    }
}

/// Per-step position state.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionState {
    /// Combined encoding (path integration plus landmark correction).
    pub g: Vec<f64>,
    /// Pure path-integrated proposal.
    pub g_pi: Vec<f64>,
    /// Fixed-layernormed copy of `g` used to form keys/queries.
    pub g_norm: Vec<f64>,
}

/// `g_pi = act(g_prev W_a[action])`.
pub fn path_integrate(
    g_prev: &[f64],
    action: usize,
    weights: &TransitionWeights,
) -> Result<Vec<f64>> {
    let w = weights
        .matrices
        .get(action)
        .ok_or_else(|| Error::Param(format!("unknown action id {action}")))?;
    if g_prev.len() != w.rows {
        return Err(Error::Shape {
            op: "path_integrate",
            detail: format!("g has {} entries, W_a is {}x{}", g_prev.len(), w.rows, w.cols),
        });
    }
    let mut out = vec![0.0; w.cols];
    for (i, &gi) in g_prev.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += gi * wij;
        }
    }
    if weights.activation == Activation::Relu {
        for o in out.iter_mut() {
            *o = o.max(0.0);
        }
    }
    Ok(out)
}

/// Z-score: mean 0, population variance 1. Errors on vectors shorter than
/// 2 or (near-)constant vectors, whose z-score is undefined.
pub fn normalize_for_keys(g: &[f64]) -> Result<Vec<f64>> {
    let n = g.len();
    if n < 2 {
        return Err(Error::Param(format!(
            "z-score needs at least 2 entries, got {n}"
        )));
    }
    let mean = g.iter().sum::<f64>() / n as f64;
    let var = g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if var <= 1e-30 {
        return Err(Error::DegenerateLayerNorm);
    }
    let sigma = var.sqrt();
    Ok(g.iter().map(|v| (v - mean) / sigma).collect())
}

/// Gated combination of the path-integrated proposal with the memory
/// retrieval. `g_retrieved_raw` of `None` is the empty-store sentinel and
/// returns `g_pi` unchanged.
pub fn combine_position(
    g_pi: &[f64],
    g_retrieved_raw: Option<&[f64]>,
    gate_mlp: &Mlp,
    map_mlp: &Mlp,
) -> Result<Vec<f64>> {
    let raw = match g_retrieved_raw {
        Some(raw) => raw,
        None => return Ok(g_pi.to_vec()),
    };
    let n = g_pi.len();
    if raw.len() != n {
        return Err(Error::Shape {
            op: "combine_position",
            detail: format!("g_pi has {n} entries, retrieval has {}", raw.len()),
        });
    }
    let g_ret = map_mlp.forward(raw);
    let mut gate_in = Vec::with_capacity(2 * n);
    gate_in.extend_from_slice(&g_ret);
    gate_in.extend_from_slice(g_pi);
    let gate_logits = gate_mlp.forward(&gate_in);
    if gate_logits.len() != n || g_ret.len() != n {
        return Err(Error::Shape {
            op: "combine_position",
            detail: format!(
                "mlps must map to {n} entries, got gate {} / map {}",
                gate_logits.len(),
                g_ret.len()
            ),
        });
    }
    Ok((0..n)
        .map(|i| {
            let gate = sigmoid(gate_logits[i]);
            g_pi[i] + gate * (g_ret[i] - g_pi[i])
        })
        .collect())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
