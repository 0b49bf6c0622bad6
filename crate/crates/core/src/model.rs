//! The per-step model and episode-level loss.
//!
//! One step, given the carried state (g_prev, previous projected
//! observation) and the action taken since:
//!
//! 1. `g_pi = act(g_prev W_a[action])`   (path integration; at t = 1 the
//!    learnable initial encoding `g_0` is used directly)
//! 2. landmark correction: the previous observation's value together with
//!    the projected `g_pi` query the store in both-cue mode for the raw
//!    position recorded when that landmark was last seen — the current
//!    observation is not yet available and cannot inform its own
//!    prediction
//! 3. `g = g_pi + gate . (map(g_ret_raw) - g_pi)` (skipped while the
//!    store is empty: `g = g_pi` exactly)
//! 4. `g_norm = zscore(g)`, key `g_norm W_e`, sensory retrieval
//! 5. `logits = decoder(x_retrieved)`; an empty store retrieves the
//!    learnable default value instead
//! 6. once the true observation arrives, its (key, value, raw position)
//!    row is offered to the store, gated on conjunction similarity
//!
//! The loss per episode averages per step: cross entropy of the
//! prediction queried from `g_pi`, cross entropy queried from `g`, the
//! squared drift `|g - g_pi|^2` and `|g|^2`, plus an episode-level L2
//! penalty over weight matrices. Memories are live tape values, so
//! gradients flow from late predictions back into the encodings that
//! were stored earlier; only the add/skip gating decision is discrete.

use crate::diffcore::{Gradients, Precision, Tape, Tensor, Var};
use crate::envgen::Episode;
use crate::error::{Error, Result};
use crate::memstore::MemoryStore;
use crate::mlp::{BoundMlp, Mlp};
use crate::posenc::{Activation, PositionState, TransitionWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

// ── configuration ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WxMode {
    /// Fixed sparse projection mapping each stimulus to a distinct
    /// two-hot pattern.
    FixedTwoHot,
    /// Dense learnable projection.
    LearnableDense,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaBase {
    /// `beta_base = sqrt(d_k)`, so logits are `ln(count) * (q.k)`.
    SqrtDk,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_g: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_stim: usize,
    pub n_actions: usize,
    pub decoder_hidden: usize,
    pub activation: Activation,
    pub wx_mode: WxMode,
    pub beta_base: BetaBase,
    /// Similarity threshold for adding memories.
    pub gate_threshold: f64,
    pub precision: Precision,
    /// lambda_1..lambda_5: CE from the path-integration query, CE from
    /// the combined query, position drift, weight L2, encoding L2.
    pub loss_weights: [f64; 5],
}

impl ModelConfig {
    pub fn beta_base_value(&self) -> f64 {
        match self.beta_base {
            BetaBase::SqrtDk => (self.d_k as f64).sqrt(),
            BetaBase::Fixed(b) => b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_g < 2 || self.d_k < 1 || self.d_v < 1 {
            return Err(Error::Param("encoding dims must be positive (n_g >= 2)".into()));
        }
        if self.n_stim < 2 || self.n_actions < 1 {
            return Err(Error::Param("need n_stim >= 2 and n_actions >= 1".into()));
        }
        if !self.loss_weights.iter().all(|l| *l >= 0.0 && l.is_finite()) {
            return Err(Error::Param("loss weights must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.gate_threshold) {
            return Err(Error::Param("gate threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// FNV-1a over the serialised config block; stored in checkpoints so
    /// a mismatched load can warn.
    pub fn config_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        write_config(self, &mut bytes);
        fnv1a(&bytes)
    }
}

/// Distinct two-hot rows (two entries of 1/sqrt(2)), one per stimulus.
/// The assignment of unit pairs to stimulus ids is a seeded shuffle.
pub fn two_hot_projection(n_stim: usize, d_v: usize, seed: u64) -> Result<Tensor> {
    let n_pairs = d_v * d_v.saturating_sub(1) / 2;
    if n_pairs < n_stim {
        return Err(Error::Param(format!(
            "two-hot projection needs C(d_v, 2) >= n_stim; C({d_v}, 2) = {n_pairs} < {n_stim}"
        )));
    }
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..d_v {
        for j in (i + 1)..d_v {
            pairs.push((i, j));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates, explicit so the assignment is stable across rand versions.
    for i in (1..pairs.len()).rev() {
        let j = rng.random_range(0..=i);
        pairs.swap(i, j);
    }
    let mut w = Tensor::zeros(n_stim, d_v);
    let amp = 0.5f64.sqrt();
    for (s, &(i, j)) in pairs.iter().take(n_stim).enumerate() {
        w.set(s, i, amp);
        w.set(s, j, amp);
    }
    Ok(w)
}

// ── parameters ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub transition: TransitionWeights,
    /// Key/query projection, `n_g x d_k`.
    pub w_e: Tensor,
    /// Stimulus value projection, `n_stim x d_v`.
    pub w_x: Tensor,
    pub decoder: Mlp,
    pub gate_mlp: Mlp,
    pub map_mlp: Mlp,
    /// Learnable initial encoding, `1 x n_g`.
    pub g_0: Tensor,
    /// Learnable empty-store sentinel value, `1 x d_v`.
    pub value_default: Tensor,
}

/// Metadata for one parameter tensor, in the fixed enumeration order used
/// by the optimizer and checkpoints.
#[derive(Debug, Clone)]
pub struct LeafSpec {
    pub name: String,
    pub trainable: bool,
    /// Included in the lambda_4 weight penalty.
    pub weight_reg: bool,
}

impl ModelParams {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Near-identity transitions approximate persistence early on.
        let matrices = (0..cfg.n_actions)
            .map(|_| {
                let mut m = Tensor::randn(cfg.n_g, cfg.n_g, 0.01, &mut rng);
                for i in 0..cfg.n_g {
                    m.data[i * cfg.n_g + i] += 1.0;
                }
                m
            })
            .collect();
        let transition = TransitionWeights {
            matrices,
            activation: cfg.activation,
        };
        // Keep matched-key logits O(sqrt(d_k)) under z-scored input.
        let we_std = (cfg.n_g as f64).powf(-0.5) * (cfg.d_k as f64).powf(-0.25);
        let w_e = Tensor::randn(cfg.n_g, cfg.d_k, we_std, &mut rng);
        let w_x = match cfg.wx_mode {
            WxMode::FixedTwoHot => two_hot_projection(cfg.n_stim, cfg.d_v, seed ^ 0x5eed)?,
            WxMode::LearnableDense => {
                Tensor::randn(cfg.n_stim, cfg.d_v, (cfg.n_stim as f64).powf(-0.5), &mut rng)
            }
        };
        let decoder = Mlp::new(&[cfg.d_v, cfg.decoder_hidden, cfg.n_stim], &mut rng);
        let mut gate_mlp = Mlp::new(&[2 * cfg.n_g, cfg.n_g, cfg.n_g], &mut rng);
        // Start mostly closed: trust path integration until the retrieval
        // pathway has learned something.
        gate_mlp.biases[1].data.fill(-2.0);
        let map_mlp = Mlp::new(&[cfg.n_g, cfg.n_g, cfg.n_g], &mut rng);
        let mut g_0 = Tensor::randn(1, cfg.n_g, 0.5, &mut rng);
        for v in g_0.data.iter_mut() {
            *v = v.abs() + 0.1;
        }
        // Small but nonzero, so the first-step decoder input does not sit
        // exactly on the relu subgradient point.
        let value_default = Tensor::randn(1, cfg.d_v, 0.01, &mut rng);
        Ok(ModelParams {
            cfg,
            transition,
            w_e,
            w_x,
            decoder,
            gate_mlp,
            map_mlp,
            g_0,
            value_default,
        })
    }

    pub fn leaf_specs(&self) -> Vec<LeafSpec> {
        let mut specs = Vec::new();
        let mut push = |name: String, trainable: bool, weight_reg: bool| {
            specs.push(LeafSpec {
                name,
                trainable,
                weight_reg,
            })
        };
        for a in 0..self.transition.matrices.len() {
            push(format!("w_a{a}"), true, true);
        }
        push("w_e".into(), true, true);
        let wx_learnable = self.cfg.wx_mode == WxMode::LearnableDense;
        push("w_x".into(), wx_learnable, wx_learnable);
        for (mlp, tag) in [
            (&self.decoder, "decoder"),
            (&self.gate_mlp, "gate"),
            (&self.map_mlp, "map"),
        ] {
            for l in 0..mlp.n_layers() {
                push(format!("{tag}_w{l}"), true, true);
                push(format!("{tag}_b{l}"), true, false);
            }
        }
        push("g_0".into(), true, false);
        push("value_default".into(), true, false);
        specs
    }

    pub fn leaves(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.transition.matrices.iter().collect();
        out.push(&self.w_e);
        out.push(&self.w_x);
        for mlp in [&self.decoder, &self.gate_mlp, &self.map_mlp] {
            for l in 0..mlp.n_layers() {
                out.push(&mlp.weights[l]);
                out.push(&mlp.biases[l]);
            }
        }
        out.push(&self.g_0);
        out.push(&self.value_default);
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for m in self.transition.matrices.iter_mut() {
            out.push(m);
        }
        out.push(&mut self.w_e);
        out.push(&mut self.w_x);
        for mlp in [&mut self.decoder, &mut self.gate_mlp, &mut self.map_mlp] {
            for (w, b) in mlp.weights.iter_mut().zip(mlp.biases.iter_mut()) {
                out.push(w);
                out.push(b);
            }
        }
        out.push(&mut self.g_0);
        out.push(&mut self.value_default);
        out
    }

    /// Byte hash of all parameter data, for mutation checks.
    pub fn data_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for t in self.leaves() {
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }
}

// ── tape-resident episode machinery ─────────────────────────────────

struct Bound {
    w_a: Vec<Var>,
    w_e: Var,
    w_x: Var,
    decoder: BoundMlp,
    gate: BoundMlp,
    map: BoundMlp,
    g_0: Var,
    value_default: Var,
}

fn bind(params: &ModelParams, tape: &mut Tape) -> Bound {
    Bound {
        w_a: params
            .transition
            .matrices
            .iter()
            .map(|m| tape.leaf(m.clone()))
            .collect(),
        w_e: tape.leaf(params.w_e.clone()),
        w_x: tape.leaf(params.w_x.clone()),
        decoder: params.decoder.bind(tape),
        gate: params.gate_mlp.bind(tape),
        map: params.map_mlp.bind(tape),
        g_0: tape.leaf(params.g_0.clone()),
        value_default: tape.leaf(params.value_default.clone()),
    }
}

impl Bound {
    fn leaf_vars(&self) -> Vec<Var> {
        let mut out = self.w_a.clone();
        out.push(self.w_e);
        out.push(self.w_x);
        for mlp in [&self.decoder, &self.gate, &self.map] {
            for (w, b) in mlp.weights.iter().zip(&mlp.biases) {
                out.push(*w);
                out.push(*b);
            }
        }
        out.push(self.g_0);
        out.push(self.value_default);
        out
    }
}

/// Store rows as live tape values, with cached stacked matrices that are
/// invalidated on append.
struct TapedStore {
    plain: MemoryStore,
    keys: Vec<Var>,
    values: Vec<Var>,
    raws: Vec<Var>,
    stacks: Option<Stacks>,
}

#[derive(Clone, Copy)]
struct Stacks {
    keys_t: Var,
    values: Var,
    values_t: Var,
    raws: Var,
}

impl TapedStore {
    fn new(cfg: &ModelConfig) -> Self {
        TapedStore {
            plain: MemoryStore::new(cfg.d_k, cfg.d_v, cfg.n_g),
            keys: Vec::new(),
            values: Vec::new(),
            raws: Vec::new(),
            stacks: None,
        }
    }

    fn len(&self) -> usize {
        self.plain.len()
    }

    fn stacks(&mut self, tape: &mut Tape) -> Result<Stacks> {
        if let Some(s) = self.stacks {
            return Ok(s);
        }
        let keys = tape.stack_rows(&self.keys)?;
        let keys_t = tape.transpose(keys)?;
        let values = tape.stack_rows(&self.values)?;
        let values_t = tape.transpose(values)?;
        let raws = tape.stack_rows(&self.raws)?;
        let s = Stacks {
            keys_t,
            values,
            values_t,
            raws,
        };
        self.stacks = Some(s);
        Ok(s)
    }

    /// Gating decision on plain values (never differentiated); on append
    /// the live vars join the store and the stacks are rebuilt lazily.
    fn offer(
        &mut self,
        tape: &Tape,
        key: Var,
        value: Var,
        raw: Var,
        threshold: f64,
        append_always: bool,
    ) -> Result<bool> {
        let key_data = tape.value(key).data.clone();
        let value_data = tape.value(value).data.clone();
        let raw_data = tape.value(raw).data.clone();
        let added = if append_always {
            self.plain.push(key_data, value_data, raw_data)?;
            true
        } else {
            self.plain
                .maybe_add(key_data, value_data, raw_data, threshold)?
        };
        if added {
            self.keys.push(key);
            self.values.push(value);
            self.raws.push(raw);
            self.stacks = None;
        }
        Ok(added)
    }

    /// Rebuilds the live vars as constants on a fresh tape (forward-only
    /// truncation; values are copied bit-exactly).
    fn rebind(&mut self, tape: &mut Tape) {
        self.keys = self
            .plain
            .rows()
            .iter()
            .map(|r| tape.constant(Tensor::row_vector(r.key.clone())))
            .collect();
        self.values = self
            .plain
            .rows()
            .iter()
            .map(|r| tape.constant(Tensor::row_vector(r.value.clone())))
            .collect();
        self.raws = self
            .plain
            .rows()
            .iter()
            .map(|r| tape.constant(Tensor::row_vector(r.raw_g.clone())))
            .collect();
        self.stacks = None;
    }
}

fn one_hot(n: usize, idx: usize) -> Tensor {
    let mut t = Tensor::zeros(1, n);
    t.data[idx] = 1.0;
    t
}

fn taped_path_integrate(tape: &mut Tape, g: Var, w_a: Var, activation: Activation) -> Result<Var> {
    let lin = tape.matmul(g, w_a)?;
    match activation {
        Activation::Linear => Ok(lin),
        Activation::Relu => tape.relu(lin),
    }
}

/// Softmax weights over the store for a position query.
fn taped_sensory_weights(
    tape: &mut Tape,
    query: Var,
    stacks: Stacks,
    count: usize,
    cfg: &ModelConfig,
) -> Result<Var> {
    let sims = tape.matmul(query, stacks.keys_t)?;
    let beta = crate::memstore::adaptive_beta(count, cfg.beta_base_value());
    let logits = tape.scale(sims, beta / (cfg.d_k as f64).sqrt())?;
    tape.row_softmax(logits)
}

/// Softmax weights from the elementwise product of stimulus and position
/// similarities.
fn taped_both_weights(
    tape: &mut Tape,
    query_value: Var,
    query_key: Var,
    stacks: Stacks,
    count: usize,
    cfg: &ModelConfig,
) -> Result<Var> {
    let sim_x = tape.matmul(query_value, stacks.values_t)?;
    let sim_g = tape.matmul(query_key, stacks.keys_t)?;
    let prod = tape.mul(sim_x, sim_g)?;
    let beta = crate::memstore::adaptive_beta(count, cfg.beta_base_value());
    let logits = tape.scale(prod, beta / (cfg.d_k as f64).sqrt())?;
    tape.row_softmax(logits)
}

// ── episode runner ──────────────────────────────────────────────────

/// Per-step record for evaluation and analysis.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub position: PositionState,
    /// Sensory-mode attention weights (the memory-neuron activations);
    /// empty while the store is empty.
    pub attn_weights: Vec<f64>,
    pub logits: Vec<f64>,
    pub correct: bool,
    pub first_visit: crate::envgen::FirstVisit,
    pub store_len_before: usize,
    pub added: bool,
}

/// Mean per-step loss terms of one episode (unweighted), the episode's
/// weight penalty, and the lambda-weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub ce_pi: f64,
    pub ce_g: f64,
    pub g_drift: f64,
    pub weight_l2: f64,
    pub g_l2: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub record_trace: bool,
    /// Freeze the memory gate open (append every step); used by the
    /// gradient checks.
    pub append_always: bool,
    /// Forward-only: rebuild the tape every this many steps to bound
    /// memory on very long walks. Incompatible with gradients.
    pub reset_interval: Option<usize>,
    /// When > 0, flag relu inputs passing within this distance of zero
    /// (see [`EpisodeRun::kink_hit`]); used by the gradient check.
    pub kink_eps: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            record_trace: true,
            append_always: false,
            reset_interval: None,
            kink_eps: 0.0,
        }
    }
}

pub struct EpisodeRun {
    pub components: LossComponents,
    pub trace: Vec<StepRecord>,
    pub store: MemoryStore,
    /// Gradients per leaf (enumeration order), when requested.
    pub grads: Option<Vec<Tensor>>,
    /// Some relu input passed within `kink_eps` of its subgradient point.
    pub kink_hit: bool,
}

/// Runs one episode forward, optionally with the reverse pass.
pub fn run_episode(
    params: &ModelParams,
    episode: &Episode,
    opts: &RunOptions,
    compute_grads: bool,
) -> Result<EpisodeRun> {
    if episode.is_empty() {
        return Err(Error::Param("empty episode".into()));
    }
    if compute_grads && opts.reset_interval.is_some() {
        return Err(Error::Param(
            "tape resets discard history; gradients need the full tape".into(),
        ));
    }
    let cfg = &params.cfg;
    let lambdas = cfg.loss_weights;
    let need_ce_pi = compute_grads && lambdas[0] > 0.0;
    let t_len = episode.len();

    let mut tape = Tape::with_precision(cfg.precision);
    tape.set_kink_eps(opts.kink_eps);
    let mut bound = bind(params, &mut tape);
    let mut store = TapedStore::new(cfg);

    let mut g_state: Var = bound.g_0;
    let mut x_prev: Option<Var> = None;
    let mut kink_any = false;
    let mut trace = Vec::with_capacity(if opts.record_trace { t_len } else { 0 });
    let mut ce_pi_terms: Vec<Var> = Vec::new();
    let mut ce_g_terms: Vec<Var> = Vec::new();
    let mut drift_terms: Vec<Var> = Vec::new();
    let mut gl2_terms: Vec<Var> = Vec::new();
    let mut sums = LossComponents::default();

    for t in 0..t_len {
        // Forward-only truncation: restart the tape from plain snapshots.
        if let Some(k) = opts.reset_interval {
            if t > 0 && t % k == 0 {
                let g_now = tape.value(g_state).clone();
                let x_now = x_prev.map(|v| tape.value(v).clone());
                kink_any |= tape.kink_hit();
                tape = Tape::with_precision(cfg.precision);
                tape.set_kink_eps(opts.kink_eps);
                bound = bind(params, &mut tape);
                store.rebind(&mut tape);
                g_state = tape.constant(g_now);
                x_prev = x_now.map(|t_| tape.constant(t_));
            }
        }

        let obs = episode.observations[t] as usize;
        if obs >= cfg.n_stim {
            return Err(Error::Param(format!("stimulus {obs} out of range")));
        }

        // (1) path integration.
        let g_pi = if t == 0 {
            g_state
        } else {
            let action = episode.actions[t - 1] as usize;
            let w_a = *bound
                .w_a
                .get(action)
                .ok_or_else(|| Error::Param(format!("action {action} out of range")))?;
            taped_path_integrate(&mut tape, g_state, w_a, cfg.activation)?
        };
        let g_pi_norm = tape.fixed_layernorm(g_pi)?;
        let q_pi = tape.matmul(g_pi_norm, bound.w_e)?;

        // (2)+(3) landmark correction toward the position stored when the
        // previous observation was last seen.
        let count = store.len();
        let g = if let (true, Some(x_landmark)) = (count > 0, x_prev) {
            let stacks = store.stacks(&mut tape)?;
            let w_both =
                taped_both_weights(&mut tape, x_landmark, q_pi, stacks, count, cfg)?;
            let g_ret_raw = tape.matmul(w_both, stacks.raws)?;
            let g_ret = bound.map.forward(&mut tape, g_ret_raw)?;
            let gate_in = tape.concat_cols(g_ret, g_pi)?;
            let gate_logits = bound.gate.forward(&mut tape, gate_in)?;
            let gate = tape.sigmoid(gate_logits)?;
            let diff = tape.sub(g_ret, g_pi)?;
            let corr = tape.mul(gate, diff)?;
            tape.add(g_pi, corr)?
        } else {
            g_pi
        };

        // (4) combined-query retrieval and (5) prediction.
        let g_norm = tape.fixed_layernorm(g)?;
        let g_key = tape.matmul(g_norm, bound.w_e)?;
        let (x_ret, weights_var) = if count > 0 {
            let stacks = store.stacks(&mut tape)?;
            let w = taped_sensory_weights(&mut tape, g_key, stacks, count, cfg)?;
            (tape.matmul(w, stacks.values)?, Some(w))
        } else {
            (bound.value_default, None)
        };
        let logits = bound.decoder.forward(&mut tape, x_ret)?;

        if compute_grads {
            let ce_g = tape.cross_entropy_logits(logits, obs)?;
            ce_g_terms.push(ce_g);
            sums.ce_g += tape.scalar(ce_g)?;
            if need_ce_pi {
                let x_ret_pi = if count > 0 {
                    let stacks = store.stacks(&mut tape)?;
                    let w = taped_sensory_weights(&mut tape, q_pi, stacks, count, cfg)?;
                    tape.matmul(w, stacks.values)?
                } else {
                    bound.value_default
                };
                let logits_pi = bound.decoder.forward(&mut tape, x_ret_pi)?;
                let ce_pi = tape.cross_entropy_logits(logits_pi, obs)?;
                ce_pi_terms.push(ce_pi);
                sums.ce_pi += tape.scalar(ce_pi)?;
            }
            let d = tape.sub(g, g_pi)?;
            let d2 = tape.mul(d, d)?;
            let drift = tape.sum_all(d2)?;
            drift_terms.push(drift);
            sums.g_drift += tape.scalar(drift)?;
            let g2 = tape.mul(g, g)?;
            let gl2 = tape.sum_all(g2)?;
            gl2_terms.push(gl2);
            sums.g_l2 += tape.scalar(gl2)?;
        } else {
            let row = tape.value(logits).row(0);
            sums.ce_g += ce_from_logits(row, obs);
            let gv = tape.value(g).row(0);
            let pv = tape.value(g_pi).row(0);
            sums.g_drift += gv
                .iter()
                .zip(pv)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            sums.g_l2 += gv.iter().map(|v| v * v).sum::<f64>();
        }

        // (6) memory insertion, after the observation arrives.
        let x_onehot = tape.constant(one_hot(cfg.n_stim, obs));
        let x_now = tape.matmul(x_onehot, bound.w_x)?;
        let added = store.offer(
            &tape,
            g_key,
            x_now,
            g_norm,
            cfg.gate_threshold,
            opts.append_always,
        )?;

        if opts.record_trace {
            let logits_row = tape.value(logits).row(0).to_vec();
            let correct = argmax(&logits_row) == obs;
            trace.push(StepRecord {
                position: PositionState {
                    g_pi: tape.value(g_pi).row(0).to_vec(),
                    g: tape.value(g).row(0).to_vec(),
                    g_norm: tape.value(g_norm).row(0).to_vec(),
                },
                attn_weights: weights_var
                    .map(|w| tape.value(w).row(0).to_vec())
                    .unwrap_or_default(),
                logits: logits_row,
                correct,
                first_visit: episode.first_visit[t],
                store_len_before: count,
                added,
            });
        }

        g_state = g;
        x_prev = Some(x_now);
    }

    let inv_t = 1.0 / t_len as f64;
    sums.ce_pi *= inv_t;
    sums.ce_g *= inv_t;
    sums.g_drift *= inv_t;
    sums.g_l2 *= inv_t;
    sums.weight_l2 = weight_l2(params);
    sums.total = lambdas[0] * sums.ce_pi
        + lambdas[1] * sums.ce_g
        + lambdas[2] * sums.g_drift
        + lambdas[3] * sums.weight_l2
        + lambdas[4] * sums.g_l2;

    let grads = if compute_grads {
        let loss = assemble_loss(
            &mut tape,
            &bound,
            params,
            &ce_pi_terms,
            &ce_g_terms,
            &drift_terms,
            &gl2_terms,
            inv_t,
        )?;
        let total = tape.scalar(loss)?;
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "episode_loss" });
        }
        sums.total = total;
        let gradients = tape.backward(loss)?;
        Some(harvest(&tape, &gradients, &bound))
    } else {
        None
    };

    Ok(EpisodeRun {
        components: sums,
        trace,
        store: store.plain,
        grads,
        kink_hit: kink_any || tape.kink_hit(),
    })
}

fn weight_l2(params: &ModelParams) -> f64 {
    params
        .leaves()
        .iter()
        .zip(params.leaf_specs())
        .filter(|(_, s)| s.weight_reg)
        .map(|(t, _)| t.l2_sq())
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn assemble_loss(
    tape: &mut Tape,
    bound: &Bound,
    params: &ModelParams,
    ce_pi: &[Var],
    ce_g: &[Var],
    drift: &[Var],
    gl2: &[Var],
    inv_t: f64,
) -> Result<Var> {
    let lambdas = params.cfg.loss_weights;
    let mut total: Option<Var> = None;
    let mut add_term = |tape: &mut Tape, terms: &[Var], weight: f64| -> Result<()> {
        if weight == 0.0 || terms.is_empty() {
            return Ok(());
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        let scaled = tape.scale(acc, weight * inv_t)?;
        total = Some(match total {
            Some(tot) => tape.add(tot, scaled)?,
            None => scaled,
        });
        Ok(())
    };
    add_term(tape, ce_pi, lambdas[0])?;
    add_term(tape, ce_g, lambdas[1])?;
    add_term(tape, drift, lambdas[2])?;
    add_term(tape, gl2, lambdas[4])?;

    if lambdas[3] > 0.0 {
        let specs = params.leaf_specs();
        let vars = bound.leaf_vars();
        let mut reg: Option<Var> = None;
        for (var, spec) in vars.iter().zip(&specs) {
            if !spec.weight_reg {
                continue;
            }
            let sq = tape.mul(*var, *var)?;
            let s = tape.sum_all(sq)?;
            reg = Some(match reg {
                Some(r) => tape.add(r, s)?,
                None => s,
            });
        }
        if let Some(r) = reg {
            let scaled = tape.scale(r, lambdas[3])?;
            total = Some(match total {
                Some(tot) => tape.add(tot, scaled)?,
                None => scaled,
            });
        }
    }

    match total {
        Some(t) => Ok(t),
        // All-zero lambdas: a well-defined zero loss with zero gradients.
        None => Ok(tape.constant(Tensor::row_vector(vec![0.0]))),
    }
}

fn harvest(tape: &Tape, grads: &Gradients, bound: &Bound) -> Vec<Tensor> {
    bound
        .leaf_vars()
        .into_iter()
        .map(|v| grads.tensor(tape, v))
        .collect()
}

fn ce_from_logits(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    lse - row[target]
}

/// First maximal index; deterministic tie-break.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Loss and per-step trace of one episode under the configured lambdas.
/// Terms with a zero lambda are skipped entirely, so e.g. a pure
/// weight-penalty configuration never runs the network.
pub fn episode_loss(
    params: &ModelParams,
    episode: &Episode,
) -> Result<(LossComponents, Vec<StepRecord>)> {
    let lambdas = params.cfg.loss_weights;
    if lambdas[..3].iter().all(|l| *l == 0.0) && lambdas[4] == 0.0 {
        let mut c = LossComponents {
            weight_l2: weight_l2(params),
            ..Default::default()
        };
        c.total = lambdas[3] * c.weight_l2;
        return Ok((c, Vec::new()));
    }
    let run = run_episode(params, episode, &RunOptions::default(), true)?;
    Ok((run.components, run.trace))
}

// ── whole-model gradient check ──────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ModelGradCheck {
    pub max_rel_err: f64,
    pub worst_leaf: String,
    pub checked: usize,
    /// Coordinates excluded because a perturbed run put some relu input
    /// within `step` of its subgradient point.
    pub skipped: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl ModelGradCheck {
    pub fn summary(&self) -> String {
        format!(
            "gradcheck rel err {:.3e} over {} coordinates ({} skipped, worst: {}, tolerance {:.0e}): {}",
            self.max_rel_err,
            self.checked,
            self.skipped,
            self.worst_leaf,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Central-difference check of the full episode loss against the tape
/// gradients, with memory gating frozen open so the discrete add decision
/// cannot flip between perturbed evaluations.
pub fn model_grad_check(
    params: &ModelParams,
    episode: &Episode,
    step: f64,
    tolerance: f64,
) -> Result<ModelGradCheck> {
    let opts = RunOptions {
        record_trace: false,
        append_always: true,
        reset_interval: None,
        kink_eps: step,
    };
    let base = run_episode(params, episode, &opts, true)?;
    if base.kink_hit {
        return Err(Error::Param(
            "instance sits on a relu subgradient point; perturb the parameters or reseed".into(),
        ));
    }
    let analytic = base.grads.expect("gradients requested");
    let specs = params.leaf_specs();

    let mut work = params.clone();
    let mut max_rel_err = 0.0f64;
    let mut worst_leaf = String::new();
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for (leaf_idx, spec) in specs.iter().enumerate() {
        let n = analytic[leaf_idx].data.len();
        for i in 0..n {
            let orig = {
                let mut leaves = work.leaves_mut();
                let v = leaves[leaf_idx].data[i];
                leaves[leaf_idx].data[i] = v + step;
                v
            };
            let plus = run_episode(&work, episode, &opts, true)?;
            {
                let mut leaves = work.leaves_mut();
                leaves[leaf_idx].data[i] = orig - step;
            }
            let minus = run_episode(&work, episode, &opts, true)?;
            {
                let mut leaves = work.leaves_mut();
                leaves[leaf_idx].data[i] = orig;
            }
            if plus.kink_hit || minus.kink_hit {
                skipped += 1;
                continue;
            }
            let numeric = (plus.components.total - minus.components.total) / (2.0 * step);
            let a = analytic[leaf_idx].data[i];
            let denom = a.abs().max(numeric.abs());
            let rel = if denom < 1e-7 {
                0.0
            } else {
                (a - numeric).abs() / denom
            };
            checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_leaf = format!("{}[{i}]", spec.name);
            }
        }
    }
    Ok(ModelGradCheck {
        max_rel_err,
        worst_leaf,
        checked,
        skipped,
        tolerance,
        passed: max_rel_err < tolerance,
    })
}

/// The reference instance for the whole-model gradient check: a three
/// step episode on a 2x2 lattice with four stimuli, six encoding units,
/// learnable projections, and every loss term active.
pub fn gradcheck_reference_instance(seed: u64) -> Result<(ModelParams, Episode)> {
    let env = crate::envgen::generate_environment(
        crate::envgen::Topology::Square4,
        2,
        2,
        4,
        seed,
    )?;
    let episode = crate::envgen::sample_trajectory(&env, 3, seed ^ 0x9)?;
    let cfg = ModelConfig {
        n_g: 6,
        d_k: 4,
        d_v: 4,
        n_stim: 4,
        n_actions: 4,
        decoder_hidden: 8,
        activation: Activation::Relu,
        wx_mode: WxMode::LearnableDense,
        beta_base: BetaBase::SqrtDk,
        gate_threshold: 0.9,
        precision: Precision::F64,
        loss_weights: [1.0, 1.0, 0.1, 1e-4, 1e-4],
    };
    let params = ModelParams::init(cfg, seed.wrapping_add(4))?;
    Ok((params, episode))
}

// ── checkpoints ─────────────────────────────────────────────────────
//
// Versioned binary layout, all integers little-endian:
//
//   magic "TEMTCKP1" | version u32 | cfg_len u32 | cfg block | cfg fnv64
//   | n_leaves u32 | per leaf: name_len u32, name, rows u32, cols u32,
//   f64 data | fnv64 over everything before the trailer

const CHECKPOINT_MAGIC: &[u8; 8] = b"TEMTCKP1";
const CHECKPOINT_VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn write_config(cfg: &ModelConfig, out: &mut Vec<u8>) {
    for v in [
        cfg.n_g,
        cfg.d_k,
        cfg.d_v,
        cfg.n_stim,
        cfg.n_actions,
        cfg.decoder_hidden,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(match cfg.activation {
        Activation::Linear => 0,
        Activation::Relu => 1,
    });
    out.push(match cfg.wx_mode {
        WxMode::FixedTwoHot => 0,
        WxMode::LearnableDense => 1,
    });
    match cfg.beta_base {
        BetaBase::SqrtDk => {
            out.push(0);
            out.extend_from_slice(&0f64.to_le_bytes());
        }
        BetaBase::Fixed(b) => {
            out.push(1);
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out.extend_from_slice(&cfg.gate_threshold.to_le_bytes());
    out.push(match cfg.precision {
        Precision::F64 => 0,
        Precision::F32 => 1,
    });
    for l in cfg.loss_weights {
        out.extend_from_slice(&l.to_le_bytes());
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: needed {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn read_config(r: &mut ByteReader) -> Result<ModelConfig> {
    let n_g = r.u32()? as usize;
    let d_k = r.u32()? as usize;
    let d_v = r.u32()? as usize;
    let n_stim = r.u32()? as usize;
    let n_actions = r.u32()? as usize;
    let decoder_hidden = r.u32()? as usize;
    let activation = match r.u8()? {
        0 => Activation::Linear,
        1 => Activation::Relu,
        v => return Err(Error::Checkpoint(format!("bad activation tag {v}"))),
    };
    let wx_mode = match r.u8()? {
        0 => WxMode::FixedTwoHot,
        1 => WxMode::LearnableDense,
        v => return Err(Error::Checkpoint(format!("bad projection tag {v}"))),
    };
    let beta_tag = r.u8()?;
    let beta_val = r.f64()?;
    let beta_base = match beta_tag {
        0 => BetaBase::SqrtDk,
        1 => BetaBase::Fixed(beta_val),
        v => return Err(Error::Checkpoint(format!("bad beta tag {v}"))),
    };
    let gate_threshold = r.f64()?;
    let precision = match r.u8()? {
        0 => Precision::F64,
        1 => Precision::F32,
        v => return Err(Error::Checkpoint(format!("bad precision tag {v}"))),
    };
    let mut loss_weights = [0.0; 5];
    for l in loss_weights.iter_mut() {
        *l = r.f64()?;
    }
    Ok(ModelConfig {
        n_g,
        d_k,
        d_v,
        n_stim,
        n_actions,
        decoder_hidden,
        activation,
        wx_mode,
        beta_base,
        gate_threshold,
        precision,
        loss_weights,
    })
}

pub fn checkpoint_save(params: &ModelParams, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let mut cfg_block = Vec::new();
    write_config(&params.cfg, &mut cfg_block);
    out.extend_from_slice(&(cfg_block.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg_block);
    out.extend_from_slice(&fnv1a(&cfg_block).to_le_bytes());

    let specs = params.leaf_specs();
    let leaves = params.leaves();
    out.extend_from_slice(&(leaves.len() as u32).to_le_bytes());
    for (spec, tensor) in specs.iter().zip(&leaves) {
        out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.extend_from_slice(&(tensor.rows as u32).to_le_bytes());
        out.extend_from_slice(&(tensor.cols as u32).to_le_bytes());
        for v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&fnv1a(&out).to_le_bytes());
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 + 4 + 8 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored_total = u64::from_le_bytes(trailer.try_into().unwrap());
    if fnv1a(body) != stored_total {
        return Err(Error::Checkpoint("body hash mismatch (corrupt file)".into()));
    }
    let mut r = ByteReader { bytes: body, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let cfg_len = r.u32()? as usize;
    let cfg_start = r.pos;
    let cfg = read_config(&mut r)?;
    if r.pos - cfg_start != cfg_len {
        return Err(Error::Checkpoint("config block length mismatch".into()));
    }
    let stored_cfg_hash = r.u64()?;
    if fnv1a(&body[cfg_start..cfg_start + cfg_len]) != stored_cfg_hash {
        return Err(Error::Checkpoint("config hash mismatch (corrupt file)".into()));
    }

    let n_leaves = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_leaves);
    let mut names = Vec::with_capacity(n_leaves);
    for _ in 0..n_leaves {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("bad leaf name".into()))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f64()?);
        }
        names.push(name);
        tensors.push(Tensor { rows, cols, data });
    }

    // Rebuild over an initialised skeleton, then overwrite every leaf.
    let mut params = ModelParams::init(cfg, 0)?;
    let specs = params.leaf_specs();
    if specs.len() != n_leaves {
        return Err(Error::Checkpoint(format!(
            "expected {} leaves, found {n_leaves}",
            specs.len()
        )));
    }
    for ((spec, name), (slot, tensor)) in specs
        .iter()
        .zip(&names)
        .zip(params.leaves_mut().into_iter().zip(tensors))
    {
        if &spec.name != name {
            return Err(Error::Checkpoint(format!(
                "leaf order mismatch: expected {}, found {name}",
                spec.name
            )));
        }
        if slot.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "leaf {name} shape {:?} vs expected {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
    }
    Ok(params)
}
