//! Multi-agent noise-robust training and a semi-supervised learn-label loop
//! on desk-scale synthetic classification data.
//!
//! The pieces:
//! - [`learner`]: MLP encoder with unit-norm embeddings, normalized class
//!   head, Arc/MV margin softmax losses, SGD with momentum.
//! - [`groupnet`]: the M-agent engine that ranks batch losses, discards the
//!   presumed-noisy tail, trains on the consensus-clean intersection and
//!   exchanges the ambiguous middle between agents over a shuffled ring.
//! - [`noise`]: noise-rate estimation from intra-class pair similarities via
//!   a two-component Gaussian mixture.
//! - [`data`]: synthetic blobs, label-noise injection, labelled/unlabelled
//!   splits, CSV ingestion.
//! - [`nroll`]: the loop of robust training, high-confidence labelling,
//!   labelled-set growth and re-estimation, plus open-set prototypes.
//! - [`eval`]: accuracy, pair verification with ROC, rank-1 identification,
//!   pseudo-label precision.
//! - [`config`] / [`runner`]: the experiment CLI plumbing.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod groupnet;
pub mod learner;
pub mod noise;
pub mod nroll;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};

/// Caps worker parallelism from `COTRAIN_THREADS`. Safe to call more than
/// once; only the first call configures the pool.
pub fn init_thread_pool() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        if let Ok(v) = std::env::var("COTRAIN_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}
