//! Sequence prediction on graph-structured environments with a causal
//! transformer whose position encodings are generated recurrently from
//! actions, and whose key/value set is an episodic memory grown as the
//! agent moves.
//!
//! The crate is organised around the data flow of one episode:
//!
//! * [`envgen`] builds environments (square or hexagonal lattices with
//!   randomly assigned stimuli) and samples random-walk episodes.
//! * [`diffcore`] is the reverse-mode differentiation substrate every
//!   learnable computation runs on.
//! * [`posenc`] generates and stabilises the recurrent position encoding
//!   `g` (path integration, fixed layer norm, gated landmark correction).
//! * [`memstore`] is the episodic memory: append-only rows of projected
//!   position keys and stimulus values, softmax retrieval in three query
//!   modes with an adaptive `beta`, plus the outer-product attractor
//!   oracle used to verify that one linear attractor step over stored
//!   conjunctions equals the factorised attention forms.
//! * [`model`] assembles the per-step computation and the five-part loss.
//! * [`train`] runs multi-environment truncated-history training with
//!   Adam updates and emits learning curves.
//! * [`analysis`] turns unit activity into rate maps and scores them
//!   (grid score, place score, remapping statistics).

pub mod analysis;
pub mod config;
pub mod diffcore;
pub mod envgen;
pub mod error;
pub mod memstore;
pub mod mlp;
pub mod model;
pub mod posenc;
pub mod train;

pub use error::{Error, Result};

/// SplitMix64 step, used to derive independent sub-seeds from one master
/// seed. Domain tags keep training / evaluation seed streams disjoint.
pub fn mix_seed(seed: u64, domain: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(domain.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(a.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(b.wrapping_mul(0x94d0_49bb_1331_11eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
