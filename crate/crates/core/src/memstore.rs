//! Episodic memory with softmax retrieval, and the outer-product
//! attractor oracle it is verified against.
//!
//! Each stored memory is a row triple: projected position key
//! `g_tilde = g_norm W_e`, projected stimulus value `x_tilde = onehot(x) W_x`,
//! and the raw normalised position `g_norm` (kept so position memories can
//! be retrieved without undoing the key projection). Rows are append-only
//! within an episode and the store is reset between episodes.
//!
//! Retrieval modes (all softmax-weighted sums over stored rows):
//!
//! * sensory:  logits_t = beta * (q_g . g_tilde_t) / sqrt(d_k), read values
//! * landmark: logits_t = beta * (q_x . x_tilde_t) / sqrt(d_v), read raw_g
//! * both-cue: logits_t = beta * (q_x . x_tilde_t)(q_g . g_tilde_t) / sqrt(d_k),
//!   read raw_g — the elementwise product of the two similarity vectors
//!   lets the position cue disambiguate aliased stimuli
//!
//! with the adaptive sharpening `beta = beta_base * ln(max(count, 2))`, so
//! an exact-match weight stays bounded away from zero as the store grows.
//!
//! The oracle side stores flattened conjunctions `p = flatten(x^T g)` in a
//! Hebbian matrix `M = sum_t p_t^T p_t`; one linear attractor step returns
//! the dot-product-weighted memory sum, and summing the unflattened result
//! along one axis recovers the sensory or position component. The
//! verifier checks numerically that this route equals the factorised
//! attention forms for all three query modes.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRow {
    /// Projected position key, length `d_k`.
    pub key: Vec<f64>,
    /// Projected stimulus value, length `d_v`.
    pub value: Vec<f64>,
    /// Raw normalised position, length `n_g`.
    pub raw_g: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStore {
    rows: Vec<MemoryRow>,
    d_k: usize,
    d_v: usize,
    n_g: usize,
}

impl MemoryStore {
    pub fn new(d_k: usize, d_v: usize, n_g: usize) -> Self {
        MemoryStore {
            rows: Vec::new(),
            d_k,
            d_v,
            n_g,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[MemoryRow] {
        &self.rows
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn n_g(&self) -> usize {
        self.n_g
    }

    fn check_row(&self, key: &[f64], value: &[f64], raw_g: &[f64]) -> Result<()> {
        if key.len() != self.d_k || value.len() != self.d_v || raw_g.len() != self.n_g {
            return Err(Error::Shape {
                op: "memory_row",
                detail: format!(
                    "row dims ({}, {}, {}) vs store ({}, {}, {})",
                    key.len(),
                    value.len(),
                    raw_g.len(),
                    self.d_k,
                    self.d_v,
                    self.n_g
                ),
            });
        }
        Ok(())
    }

    /// Unconditional append (gating frozen).
    pub fn push(&mut self, key: Vec<f64>, value: Vec<f64>, raw_g: Vec<f64>) -> Result<()> {
        self.check_row(&key, &value, &raw_g)?;
        self.rows.push(MemoryRow { key, value, raw_g });
        Ok(())
    }

    /// Appends unless an existing memory already covers this conjunction:
    /// the similarity to row `t` is `cos(key, key_t) * cos(value, value_t)`
    /// and the row is added iff the maximum over stored rows is below
    /// `threshold` (an empty store always appends). Returns whether the
    /// row was appended. This decision is discrete and never
    /// differentiated through.
    pub fn maybe_add(
        &mut self,
        key: Vec<f64>,
        value: Vec<f64>,
        raw_g: Vec<f64>,
        threshold: f64,
    ) -> Result<bool> {
        self.check_row(&key, &value, &raw_g)?;
        let mut max_sim = f64::NEG_INFINITY;
        for row in &self.rows {
            let s = cosine(&key, &row.key) * cosine(&value, &row.value);
            if s > max_sim {
                max_sim = s;
            }
        }
        if self.rows.is_empty() || max_sim < threshold {
            self.rows.push(MemoryRow { key, value, raw_g });
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Debug dump: one row per memory with the full key/value/raw vectors.
    pub fn dump_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "tau")?;
        for i in 0..self.d_k {
            write!(w, ",key{i}")?;
        }
        for i in 0..self.d_v {
            write!(w, ",value{i}")?;
        }
        for i in 0..self.n_g {
            write!(w, ",raw_g{i}")?;
        }
        writeln!(w)?;
        for (tau, row) in self.rows.iter().enumerate() {
            write!(w, "{tau}")?;
            for v in row.key.iter().chain(&row.value).chain(&row.raw_g) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// `beta = beta_base * ln(max(count, 2))`.
pub fn adaptive_beta(count: usize, beta_base: f64) -> f64 {
    beta_base * (count.max(2) as f64).ln()
}

/// A retrieved vector plus the attention weights that produced it. The
/// weights are the memory-neuron activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub vector: Vec<f64>,
    pub weights: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn weighted_sum(rows: &[MemoryRow], weights: &[f64], pick: impl Fn(&MemoryRow) -> &[f64]) -> Vec<f64> {
    let dim = pick(&rows[0]).len();
    let mut out = vec![0.0; dim];
    for (row, &w) in rows.iter().zip(weights) {
        for (o, &v) in out.iter_mut().zip(pick(row)) {
            *o += w * v;
        }
    }
    out
}

/// Position-queried sensory retrieval. `None` is the empty-store
/// sentinel; the caller falls back to its learned prior.
pub fn attend_sensory(query_key: &[f64], store: &MemoryStore, beta_base: f64) -> Option<Retrieval> {
    if store.is_empty() {
        return None;
    }
    let beta = adaptive_beta(store.len(), beta_base);
    let scale = beta / (store.d_k as f64).sqrt();
    let logits: Vec<f64> = store
        .rows
        .iter()
        .map(|row| scale * dot(query_key, &row.key))
        .collect();
    let weights = softmax(&logits);
    let vector = weighted_sum(&store.rows, &weights, |r| &r.value);
    Some(Retrieval { vector, weights })
}

/// Stimulus-queried position retrieval ("where was I the last time I saw
/// this"), reading raw positions.
pub fn attend_landmark(
    query_value: &[f64],
    store: &MemoryStore,
    beta_base: f64,
) -> Option<Retrieval> {
    if store.is_empty() {
        return None;
    }
    let beta = adaptive_beta(store.len(), beta_base);
    let scale = beta / (store.d_v as f64).sqrt();
    let logits: Vec<f64> = store
        .rows
        .iter()
        .map(|row| scale * dot(query_value, &row.value))
        .collect();
    let weights = softmax(&logits);
    let vector = weighted_sum(&store.rows, &weights, |r| &r.raw_g);
    Some(Retrieval { vector, weights })
}

/// Position retrieval queried by stimulus and position together; the
/// elementwise product of the two similarity vectors disambiguates
/// aliased stimuli.
pub fn attend_both(
    query_value: &[f64],
    query_key: &[f64],
    store: &MemoryStore,
    beta_base: f64,
) -> Option<Retrieval> {
    let weights = both_cue_weights(query_value, query_key, store, beta_base)?;
    let vector = weighted_sum(&store.rows, &weights, |r| &r.raw_g);
    Some(Retrieval { vector, weights })
}

fn both_cue_weights(
    query_value: &[f64],
    query_key: &[f64],
    store: &MemoryStore,
    beta_base: f64,
) -> Option<Vec<f64>> {
    if store.is_empty() {
        return None;
    }
    let beta = adaptive_beta(store.len(), beta_base);
    let scale = beta / (store.d_k as f64).sqrt();
    let logits: Vec<f64> = store
        .rows
        .iter()
        .map(|row| scale * dot(query_value, &row.value) * dot(query_key, &row.key))
        .collect();
    Some(softmax(&logits))
}

/// Final value and the per-iteration maximum attention weight of an
/// iterated retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIterates {
    pub vector: Vec<f64>,
    pub weights: Vec<f64>,
    pub max_weight_per_iter: Vec<f64>,
}

/// Iterated sensory retrieval. The first iteration queries by position
/// alone unless a sensory estimate `x_init` is supplied; later iterations
/// feed the retrieved value back through the both-cue weighting.
pub fn iterate_retrieval(
    x_init: Option<&[f64]>,
    query_key: &[f64],
    store: &MemoryStore,
    n_iters: usize,
    beta_base: f64,
) -> Result<Option<RetrievalIterates>> {
    if n_iters < 1 {
        return Err(Error::Param("n_iters must be >= 1".into()));
    }
    if store.is_empty() {
        return Ok(None);
    }
    let mut trace = Vec::with_capacity(n_iters);
    let mut weights = match x_init {
        Some(x0) => both_cue_weights(x0, query_key, store, beta_base).unwrap(),
        None => attend_sensory(query_key, store, beta_base).unwrap().weights,
    };
    let mut value = weighted_sum(&store.rows, &weights, |r| &r.value);
    trace.push(weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    for _ in 1..n_iters {
        weights = both_cue_weights(&value, query_key, store, beta_base).unwrap();
        value = weighted_sum(&store.rows, &weights, |r| &r.value);
        trace.push(weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
    Ok(Some(RetrievalIterates {
        vector: value,
        weights,
        max_weight_per_iter: trace,
    }))
}

// ── attractor oracle ────────────────────────────────────────────────

/// Flattened outer product of a stimulus row and a position row: the
/// unflattened layout is `n_x` rows by `n_g` columns, entry (j, i) =
/// `x[j] * g[i]`.
pub fn conjunction(x: &[f64], g: &[f64]) -> Vec<f64> {
    let mut p = Vec::with_capacity(x.len() * g.len());
    for &xj in x {
        for &gi in g {
            p.push(xj * gi);
        }
    }
    p
}

/// Which factor of the conjunction to sum away in [`oracle_deconjunctify`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConjAxis {
    /// Sum over the position factor, leaving the sensory component.
    Position,
    /// Sum over the sensory factor, leaving the position component.
    Sensory,
}

/// Unflattens to `n_x x n_g` and sums over the requested axis.
pub fn oracle_deconjunctify(p: &[f64], n_x: usize, n_g: usize, axis: ConjAxis) -> Result<Vec<f64>> {
    if p.len() != n_x * n_g {
        return Err(Error::Shape {
            op: "oracle_deconjunctify",
            detail: format!("length {} does not factor as {n_x} x {n_g}", p.len()),
        });
    }
    match axis {
        ConjAxis::Position => {
            let mut out = vec![0.0; n_x];
            for j in 0..n_x {
                out[j] = p[j * n_g..(j + 1) * n_g].iter().sum();
            }
            Ok(out)
        }
        ConjAxis::Sensory => {
            let mut out = vec![0.0; n_g];
            for j in 0..n_x {
                for i in 0..n_g {
                    out[i] += p[j * n_g + i];
                }
            }
            Ok(out)
        }
    }
}

/// Hebbian fast-weight matrix over stored conjunctions,
/// `M = sum_t p_t^T p_t`. Symmetric positive semidefinite by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleMemory {
    pub m: Tensor,
}

/// Builds `M` from flattened conjunctions.
pub fn oracle_build(p_list: &[Vec<f64>]) -> Result<OracleMemory> {
    if p_list.is_empty() {
        return Err(Error::Param("oracle_build needs at least one memory".into()));
    }
    let dim = p_list[0].len();
    let mut m = Tensor::zeros(dim, dim);
    for p in p_list {
        if p.len() != dim {
            return Err(Error::Shape {
                op: "oracle_build",
                detail: format!("conjunction length {} != {dim}", p.len()),
            });
        }
        for (u, &pu) in p.iter().enumerate() {
            if pu == 0.0 {
                continue;
            }
            let row = &mut m.data[u * dim..(u + 1) * dim];
            for (cell, &pv) in row.iter_mut().zip(p) {
                *cell += pu * pv;
            }
        }
    }
    Ok(OracleMemory { m })
}

/// One attractor step `q M`, optionally rectified. With the linear
/// activation this equals the dot-product-weighted memory sum
/// `sum_t (q . p_t) p_t`.
pub fn oracle_attractor_step(
    q: &[f64],
    memory: &OracleMemory,
    activation: crate::posenc::Activation,
) -> Result<Vec<f64>> {
    let dim = memory.m.rows;
    if q.len() != dim {
        return Err(Error::Shape {
            op: "oracle_attractor_step",
            detail: format!("query length {} vs memory {dim}", q.len()),
        });
    }
    let mut out = vec![0.0; dim];
    for (u, &qu) in q.iter().enumerate() {
        if qu == 0.0 {
            continue;
        }
        let row = memory.m.row(u);
        for (o, &muv) in out.iter_mut().zip(row) {
            *o += qu * muv;
        }
    }
    if activation == crate::posenc::Activation::Relu {
        for o in out.iter_mut() {
            *o = o.max(0.0);
        }
    }
    Ok(out)
}

// ── transformer / attractor equivalence ─────────────────────────────

#[derive(Debug, Clone)]
pub struct EquivSizes {
    pub max_dim: usize,
    pub max_count: usize,
    pub instances: usize,
}

impl Default for EquivSizes {
    fn default() -> Self {
        EquivSizes {
            max_dim: 8,
            max_count: 16,
            instances: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EquivReport {
    /// Max abs deviation of the attractor route from the factorised form,
    /// per identity: position query, sensory query, both-cue query.
    pub max_dev: [f64; 3],
    pub instances: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl EquivReport {
    pub fn summary(&self) -> String {
        format!(
            "equivalence max dev [{:.3e}, {:.3e}, {:.3e}] over {} instances (tolerance {:.0e}): {}",
            self.max_dev[0],
            self.max_dev[1],
            self.max_dev[2],
            self.instances,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Checks, on random instances, that one linear attractor step over
/// stored conjunctions followed by deconjunctification equals the
/// factorised attention forms:
///
/// * position query `flatten(1^T g)`:
///   sensory out `= sum_t (g . g_t) gbar_t xbar_t x_t`
/// * sensory query `flatten(x^T 1)`:
///   position out `= sum_t (x . x_t) gbar_t xbar_t g_t`
/// * both-cue query `flatten(x^T g)`:
///   position out `= sum_t (x . x_t)(g . g_t) xbar_t g_t`
///
/// where `gbar_t`/`xbar_t` are entry sums of the stored rows. Element-wise
/// expansion forces the both-cue residual diagonal to be the value-sum
/// one; computing both routes independently confirms this numerically.
pub fn verify_equivalence(seed: u64, sizes: &EquivSizes) -> EquivReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tolerance = 1e-9;
    let mut max_dev = [0.0f64; 3];

    for _ in 0..sizes.instances {
        let n_g = rng.random_range(2..=sizes.max_dim);
        let n_x = rng.random_range(2..=sizes.max_dim);
        let count = rng.random_range(1..=sizes.max_count);
        let rand_vec = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let gs: Vec<Vec<f64>> = (0..count).map(|_| rand_vec(&mut rng, n_g)).collect();
        let xs: Vec<Vec<f64>> = (0..count).map(|_| rand_vec(&mut rng, n_x)).collect();
        let g_query = rand_vec(&mut rng, n_g);
        let x_query = rand_vec(&mut rng, n_x);

        let conjunctions: Vec<Vec<f64>> = xs
            .iter()
            .zip(&gs)
            .map(|(x, g)| conjunction(x, g))
            .collect();
        let memory = oracle_build(&conjunctions).unwrap();
        let gbar: Vec<f64> = gs.iter().map(|g| g.iter().sum()).collect();
        let xbar: Vec<f64> = xs.iter().map(|x| x.iter().sum()).collect();

        let ones_x = vec![1.0; n_x];
        let ones_g = vec![1.0; n_g];
        let linear = crate::posenc::Activation::Linear;

        // (i) position query, sensory component out.
        let q = conjunction(&ones_x, &g_query);
        let p_ret = oracle_attractor_step(&q, &memory, linear).unwrap();
        let attractor = oracle_deconjunctify(&p_ret, n_x, n_g, ConjAxis::Position).unwrap();
        let mut factorised = vec![0.0; n_x];
        for t in 0..count {
            let w = dot(&g_query, &gs[t]) * gbar[t] * xbar[t];
            for (f, &xv) in factorised.iter_mut().zip(&xs[t]) {
                *f += w * xv;
            }
        }
        max_dev[0] = max_dev[0].max(max_abs_diff(&attractor, &factorised));

        // (ii) sensory query, position component out.
        let q = conjunction(&x_query, &ones_g);
        let p_ret = oracle_attractor_step(&q, &memory, linear).unwrap();
        let attractor = oracle_deconjunctify(&p_ret, n_x, n_g, ConjAxis::Sensory).unwrap();
        let mut factorised = vec![0.0; n_g];
        for t in 0..count {
            let w = dot(&x_query, &xs[t]) * gbar[t] * xbar[t];
            for (f, &gv) in factorised.iter_mut().zip(&gs[t]) {
                *f += w * gv;
            }
        }
        max_dev[1] = max_dev[1].max(max_abs_diff(&attractor, &factorised));

        // (iii) both-cue query, position component out; only the value-sum
        // diagonal survives the contraction.
        let q = conjunction(&x_query, &g_query);
        let p_ret = oracle_attractor_step(&q, &memory, linear).unwrap();
        let attractor = oracle_deconjunctify(&p_ret, n_x, n_g, ConjAxis::Sensory).unwrap();
        let mut factorised = vec![0.0; n_g];
        for t in 0..count {
            let w = dot(&x_query, &xs[t]) * dot(&g_query, &gs[t]) * xbar[t];
            for (f, &gv) in factorised.iter_mut().zip(&gs[t]) {
                *f += w * gv;
            }
        }
        max_dev[2] = max_dev[2].max(max_abs_diff(&attractor, &factorised));
    }

    let passed = max_dev.iter().all(|&d| d < tolerance);
    EquivReport {
        max_dev,
        instances: sizes.instances,
        tolerance,
        passed,
    }
}

/// Max deviation of the exact-match attention weight from its closed
/// form on adversarial stores: `count - 1` orthonormal distractor keys
/// plus one key equal to the unit query. With `beta_base = sqrt(d_k)`
/// the weight is `count / (2 count - 1)`, bounded below by 1/2 however
/// large the store grows.
pub fn verify_adaptive_beta(counts: &[usize]) -> f64 {
    let mut max_err = 0.0f64;
    for &n in counts {
        let d_k = n.max(2);
        let mut store = MemoryStore::new(d_k, 1, 1);
        for i in 0..n {
            let mut key = vec![0.0; d_k];
            key[i] = 1.0;
            store.push(key, vec![0.0], vec![0.0]).unwrap();
        }
        let mut q = vec![0.0; d_k];
        q[0] = 1.0;
        let r = attend_sensory(&q, &store, (d_k as f64).sqrt()).expect("non-empty store");
        let want = n as f64 / (2.0 * n as f64 - 1.0);
        max_err = max_err.max((r.weights[0] - want).abs());
    }
    max_err
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posenc::Activation;

    fn store_from(rows: &[(&[f64], &[f64], &[f64])]) -> MemoryStore {
        let (k, v, g) = rows[0];
        let mut store = MemoryStore::new(k.len(), v.len(), g.len());
        for (k, v, g) in rows {
            store.push(k.to_vec(), v.to_vec(), g.to_vec()).unwrap();
        }
        store
    }

    #[test]
    fn singleton_store_returns_its_value_exactly() {
        let store = store_from(&[(&[1.0, 0.0], &[0.3, 0.7], &[2.0, -2.0, 0.5])]);
        let r = attend_sensory(&[0.2, 0.9], &store, 1.0).unwrap();
        assert_eq!(r.weights, vec![1.0]);
        assert_eq!(r.vector, vec![0.3, 0.7]);
        let r = attend_landmark(&[0.1, 0.1], &store, 1.0).unwrap();
        assert_eq!(r.vector, vec![2.0, -2.0, 0.5]);
        let r = attend_both(&[0.1, 0.1], &[1.0, 1.0], &store, 1.0).unwrap();
        assert_eq!(r.vector, vec![2.0, -2.0, 0.5]);
    }

    #[test]
    fn empty_store_is_the_sentinel() {
        let store = MemoryStore::new(2, 2, 2);
        assert!(attend_sensory(&[1.0, 0.0], &store, 1.0).is_none());
        assert!(attend_landmark(&[1.0, 0.0], &store, 1.0).is_none());
        assert!(attend_both(&[1.0, 0.0], &[1.0, 0.0], &store, 1.0).is_none());
    }

    #[test]
    fn matching_key_outweighs_orthogonal_key_and_matches_direct_softmax() {
        let k1 = [1.0, 0.0];
        let k2 = [0.0, 1.0];
        let store = store_from(&[
            (&k1, &[1.0, 0.0], &[0.0, 0.0]),
            (&k2, &[0.0, 1.0], &[0.0, 0.0]),
        ]);
        let beta_base = (2.0f64).sqrt();
        let r = attend_sensory(&k1, &store, beta_base).unwrap();
        assert!(r.weights[0] > r.weights[1]);
        // Direct softmax oracle.
        let beta = beta_base * (2.0f64).ln();
        let l1 = beta * 1.0 / (2.0f64).sqrt();
        let l2 = beta * 0.0 / (2.0f64).sqrt();
        let z = l1.exp() + l2.exp();
        assert!((r.weights[0] - l1.exp() / z).abs() < 1e-15);
        assert!((r.weights[1] - l2.exp() / z).abs() < 1e-15);
    }

    #[test]
    fn retrieval_is_permutation_invariant() {
        let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = vec![
            (vec![0.9, 0.1], vec![1.0, 0.0, 0.0], vec![0.5, 0.5]),
            (vec![-0.3, 0.8], vec![0.0, 1.0, 0.0], vec![-0.5, 0.2]),
            (vec![0.2, -0.7], vec![0.0, 0.0, 1.0], vec![0.1, -0.9]),
        ];
        let fwd = store_from(
            &rows
                .iter()
                .map(|(k, v, g)| (k.as_slice(), v.as_slice(), g.as_slice()))
                .collect::<Vec<_>>(),
        );
        let rev = store_from(
            &rows
                .iter()
                .rev()
                .map(|(k, v, g)| (k.as_slice(), v.as_slice(), g.as_slice()))
                .collect::<Vec<_>>(),
        );
        let q = [0.4, 0.3];
        let a = attend_sensory(&q, &fwd, 1.3).unwrap();
        let b = attend_sensory(&q, &rev, 1.3).unwrap();
        for (x, y) in a.vector.iter().zip(&b.vector) {
            assert!((x - y).abs() < 1e-15);
        }
        // Weights permute with the rows.
        for (i, w) in a.weights.iter().enumerate() {
            assert!((w - b.weights[rows.len() - 1 - i]).abs() < 1e-15);
        }
        let sum: f64 = a.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);

        // The other two modes share the property.
        let qv = [0.2, 0.5, 0.1];
        let la = attend_landmark(&qv, &fwd, 1.3).unwrap();
        let lb = attend_landmark(&qv, &rev, 1.3).unwrap();
        let ba = attend_both(&qv, &q, &fwd, 1.3).unwrap();
        let bb = attend_both(&qv, &q, &rev, 1.3).unwrap();
        for (x, y) in la.vector.iter().zip(&lb.vector) {
            assert!((x - y).abs() < 1e-15);
        }
        for (x, y) in ba.vector.iter().zip(&bb.vector) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((la.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((ba.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn landmark_averages_identical_stimuli() {
        let store = store_from(&[
            (&[1.0, 0.0], &[0.5, 0.5], &[1.0, 0.0]),
            (&[0.0, 1.0], &[0.5, 0.5], &[0.0, 1.0]),
        ]);
        let r = attend_landmark(&[0.5, 0.5], &store, 2.0).unwrap();
        assert!((r.weights[0] - 0.5).abs() < 1e-15);
        assert!((r.vector[0] - 0.5).abs() < 1e-15 && (r.vector[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn aliased_stimuli_give_a_convex_combination_matching_direct_softmax() {
        // Same stimulus value stored at two positions.
        let v = [1.0, 0.0];
        let store = store_from(&[
            (&[1.0, 0.0], &v, &[1.0, 0.0]),
            (&[0.0, 1.0], &v, &[0.0, 1.0]),
        ]);
        let beta_base = 1.7;
        let r = attend_landmark(&v, &store, beta_base).unwrap();
        // Symmetric logits: exact average of the two stored positions.
        assert!((r.vector[0] - 0.5).abs() < 1e-15);
        assert!((r.vector[1] - 0.5).abs() < 1e-15);

        // With the position cue pointing at memory 1, the both-cue weight
        // on memory 1 strictly exceeds the landmark weight.
        let rb = attend_both(&v, &[1.0, 0.0], &store, beta_base).unwrap();
        assert!(rb.weights[0] > r.weights[0]);
        // Direct evaluation of the both-cue formula.
        let beta = adaptive_beta(2, beta_base);
        let scale = beta / (2.0f64).sqrt();
        let l1 = scale * 1.0 * 1.0;
        let l2 = scale * 1.0 * 0.0;
        let z = l1.exp() + l2.exp();
        assert!((rb.weights[0] - l1.exp() / z).abs() < 1e-15);
    }

    #[test]
    fn constant_similarity_in_one_cue_reduces_to_the_other_mode() {
        // Identical unit stimulus values make the value similarities all 1,
        // so both-cue weights equal position-only weights.
        let v = [1.0, 0.0];
        let store = store_from(&[
            (&[0.8, 0.1], &v, &[1.0, 0.0]),
            (&[-0.2, 0.5], &v, &[0.0, 1.0]),
            (&[0.3, 0.3], &v, &[0.5, 0.5]),
        ]);
        let q = [0.4, -0.9];
        let both = attend_both(&v, &q, &store, 1.1).unwrap();
        let sens = attend_sensory(&q, &store, 1.1).unwrap();
        for (a, b) in both.weights.iter().zip(&sens.weights) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn maybe_add_gates_duplicates() {
        let mut store = MemoryStore::new(2, 2, 2);
        let k = vec![1.0, 0.2];
        let v = vec![0.0, 1.0];
        let g = vec![0.3, 0.4];
        assert!(store.maybe_add(k.clone(), v.clone(), g.clone(), 0.9).unwrap());
        // Exact re-presentation: similarity 1 >= threshold.
        assert!(!store.maybe_add(k.clone(), v.clone(), g.clone(), 0.9).unwrap());
        assert_eq!(store.len(), 1);
        // A different stimulus at the same position is novel.
        assert!(store.maybe_add(k, vec![1.0, 0.0], g, 0.9).unwrap());
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn store_count_plateaus_on_a_small_lattice() {
        // Frozen, well-separated per-node codes: a long random walk on a
        // 2x2 lattice adds at most one memory per (node, stimulus) pair.
        use crate::envgen::{generate_environment, sample_trajectory, Topology};
        let env = generate_environment(Topology::Square4, 2, 2, 5, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let node_codes: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let stim_codes: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let t = 200;
        let ep = sample_trajectory(&env, t, 7).unwrap();
        let mut store = MemoryStore::new(6, 4, 2);
        let mut added_at = Vec::new();
        for step in 0..t {
            let node = ep.node_trace[step] as usize;
            let stim = ep.observations[step] as usize;
            let added = store
                .maybe_add(
                    node_codes[node].clone(),
                    stim_codes[stim].clone(),
                    vec![0.0, 0.0],
                    0.9,
                )
                .unwrap();
            if added {
                added_at.push(step);
            }
        }
        assert!(store.len() <= t);
        assert!(store.len() <= env.n_nodes(), "count {} > nodes", store.len());
        // With every node visited early, the store stops growing.
        assert!(*added_at.last().unwrap() < 50);
    }

    #[test]
    fn adaptive_beta_closed_form_for_orthonormal_stores() {
        // N-1 orthonormal distractor keys plus one key equal to the unit
        // query; with beta_base = sqrt(d_k) the exact-match weight is
        // N / (2N - 1), bounded below by 1/2.
        for n in [2usize, 10, 100, 1000] {
            let d_k = n;
            let mut store = MemoryStore::new(d_k, 1, 1);
            for i in 0..n {
                let mut key = vec![0.0; d_k];
                key[i] = 1.0;
                store.push(key, vec![i as f64], vec![0.0]).unwrap();
            }
            let mut q = vec![0.0; d_k];
            q[0] = 1.0;
            let r = attend_sensory(&q, &store, (d_k as f64).sqrt()).unwrap();
            let want = n as f64 / (2.0 * n as f64 - 1.0);
            assert!(
                (r.weights[0] - want).abs() < 1e-12,
                "N={n}: weight {} vs closed form {want}",
                r.weights[0]
            );
            assert!(r.weights[0] >= 0.5);
        }
    }

    #[test]
    fn iterate_once_equals_attend_sensory() {
        let store = store_from(&[
            (&[1.0, 0.0], &[1.0, 0.0], &[0.1, 0.1]),
            (&[0.0, 1.0], &[0.0, 1.0], &[0.2, 0.2]),
        ]);
        let q = [0.7, 0.3];
        let it = iterate_retrieval(None, &q, &store, 1, 1.5).unwrap().unwrap();
        let direct = attend_sensory(&q, &store, 1.5).unwrap();
        assert_eq!(it.vector, direct.vector);
        assert_eq!(it.weights, direct.weights);
    }

    #[test]
    fn orthonormal_fixed_point_does_not_move() {
        let store = store_from(&[
            (&[1.0, 0.0], &[1.0, 0.0], &[0.0, 0.0]),
            (&[0.0, 1.0], &[0.0, 1.0], &[0.0, 0.0]),
        ]);
        // Sharp enough that the exact-match weight saturates; the update
        // then reproduces the same value every iteration.
        let q = [1.0, 0.0];
        let one = iterate_retrieval(None, &q, &store, 1, 100.0).unwrap().unwrap();
        let five = iterate_retrieval(None, &q, &store, 5, 100.0).unwrap().unwrap();
        for (a, b) in one.vector.iter().zip(&five.vector) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(five
            .max_weight_per_iter
            .windows(2)
            .all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn iteration_sharpens_a_noisy_query() {
        // Four memories; the query sits near key 0. The max both-cue
        // weight must not decrease across two iterations.
        let store = store_from(&[
            (&[1.0, 0.1, 0.0], &[1.0, 0.0, 0.0, 0.0], &[0.0]),
            (&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0, 0.0], &[0.0]),
            (&[0.0, 0.0, 1.0], &[0.0, 0.0, 1.0, 0.0], &[0.0]),
            (&[0.5, 0.5, 0.5], &[0.0, 0.0, 0.0, 1.0], &[0.0]),
        ]);
        let q = [0.9, 0.2, 0.1];
        let it = iterate_retrieval(None, &q, &store, 2, 6.0).unwrap().unwrap();
        assert_eq!(it.max_weight_per_iter.len(), 2);
        assert!(it.max_weight_per_iter[1] >= it.max_weight_per_iter[0] - 1e-12);
    }

    #[test]
    fn attractor_step_on_a_single_unit_memory_is_identity() {
        let p = vec![0.6, 0.8]; // unit norm
        let memory = oracle_build(&[p.clone()]).unwrap();
        let out = oracle_attractor_step(&p, &memory, Activation::Linear).unwrap();
        for (a, b) in out.iter().zip(&p) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn attractor_step_of_orthogonal_query_is_zero() {
        let memory = oracle_build(&[vec![1.0, 0.0]]).unwrap();
        let out = oracle_attractor_step(&[0.0, 1.0], &memory, Activation::Linear).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn attractor_step_matches_brute_force_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n_g = 4;
        let n_x = 3;
        let ps: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let x: Vec<f64> = (0..n_x).map(|_| rng.random_range(-1.0..1.0)).collect();
                let g: Vec<f64> = (0..n_g).map(|_| rng.random_range(-1.0..1.0)).collect();
                conjunction(&x, &g)
            })
            .collect();
        let memory = oracle_build(&ps).unwrap();
        let q: Vec<f64> = (0..n_x * n_g).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = oracle_attractor_step(&q, &memory, Activation::Linear).unwrap();
        let mut slow = vec![0.0; n_x * n_g];
        for p in &ps {
            let w = dot(&q, p);
            for (s, &pv) in slow.iter_mut().zip(p) {
                *s += w * pv;
            }
        }
        assert!(max_abs_diff(&fast, &slow) < 1e-12);
    }

    #[test]
    fn oracle_matrix_is_symmetric() {
        let memory = oracle_build(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]).unwrap();
        for u in 0..3 {
            for v in 0..3 {
                assert_eq!(memory.m.get(u, v), memory.m.get(v, u));
            }
        }
    }

    #[test]
    fn deconjunctify_single_conjunction() {
        let x = [0.5, -1.0, 2.0];
        let g = [1.0, 3.0];
        let p = conjunction(&x, &g);
        let sens = oracle_deconjunctify(&p, 3, 2, ConjAxis::Position).unwrap();
        let gbar: f64 = g.iter().sum();
        for (s, &xv) in sens.iter().zip(&x) {
            assert!((s - xv * gbar).abs() < 1e-15);
        }
        let pos = oracle_deconjunctify(&p, 3, 2, ConjAxis::Sensory).unwrap();
        let xbar: f64 = x.iter().sum();
        for (pv, &gv) in pos.iter().zip(&g) {
            assert!((pv - gv * xbar).abs() < 1e-15);
        }
    }

    #[test]
    fn deconjunctify_zero_and_bad_length() {
        assert_eq!(
            oracle_deconjunctify(&[0.0; 6], 3, 2, ConjAxis::Position).unwrap(),
            vec![0.0; 3]
        );
        assert!(oracle_deconjunctify(&[0.0; 5], 3, 2, ConjAxis::Position).is_err());
    }

    #[test]
    fn deconjunctify_matches_index_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n_x, n_g) = (5, 4);
        let p: Vec<f64> = (0..n_x * n_g).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sens = oracle_deconjunctify(&p, n_x, n_g, ConjAxis::Position).unwrap();
        for j in 0..n_x {
            let mut acc = 0.0;
            for i in 0..n_g {
                acc += p[j * n_g + i];
            }
            assert!((sens[j] - acc).abs() < 1e-12);
        }
        let pos = oracle_deconjunctify(&p, n_x, n_g, ConjAxis::Sensory).unwrap();
        for i in 0..n_g {
            let mut acc = 0.0;
            for j in 0..n_x {
                acc += p[j * n_g + i];
            }
            assert!((pos[i] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn equivalence_on_basis_vectors_is_exact() {
        // Standard basis rows everywhere: both routes reduce to integer
        // arithmetic and must agree exactly.
        let gs = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let xs = [[0.0, 1.0], [1.0, 0.0]];
        let conjs: Vec<Vec<f64>> = xs.iter().zip(&gs).map(|(x, g)| conjunction(x, g)).collect();
        let memory = oracle_build(&conjs).unwrap();
        let q = conjunction(&[1.0, 1.0], &gs[0]);
        let p_ret = oracle_attractor_step(&q, &memory, Activation::Linear).unwrap();
        let sens = oracle_deconjunctify(&p_ret, 2, 3, ConjAxis::Position).unwrap();
        // Only memory 0 matches the position query; gbar = xbar = 1.
        assert_eq!(sens, vec![0.0, 1.0]);
    }

    #[test]
    fn equivalence_single_memory_identity() {
        let g = [0.4, -0.2, 0.9];
        let x = [0.7, 0.3];
        let memory = oracle_build(&[conjunction(&x, &g)]).unwrap();
        let g_query = [1.0, 1.0, -1.0];
        let q = conjunction(&[1.0, 1.0], &g_query);
        let p_ret = oracle_attractor_step(&q, &memory, Activation::Linear).unwrap();
        let sens = oracle_deconjunctify(&p_ret, 2, 3, ConjAxis::Position).unwrap();
        let w = dot(&g_query, &g) * g.iter().sum::<f64>() * x.iter().sum::<f64>();
        for (s, &xv) in sens.iter().zip(&x) {
            assert!((s - w * xv).abs() < 1e-12);
        }
    }

    #[test]
    fn equivalence_verifier_passes_200_random_instances() {
        let report = verify_equivalence(2024, &EquivSizes::default());
        assert!(report.passed, "{}", report.summary());
    }

    #[test]
    fn csv_dump_has_one_line_per_memory_plus_header() {
        let store = store_from(&[(&[1.0], &[2.0], &[3.0]), (&[4.0], &[5.0], &[6.0])]);
        let mut buf = Vec::new();
        store.dump_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "tau,key0,value0,raw_g0");
        assert_eq!(lines[1], "0,1,2,3");
    }
}
