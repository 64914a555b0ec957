//! Numerical thresholds used across the pipeline.
//!
//! Every cutoff lives here so a run configuration can override it in one
//! place. Defaults are the values the rest of the crate is tested against.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Singular values below `rank_rel × largest` count as zero when
    /// determining numerical rank.
    pub rank_rel: f64,
    /// Relative gap under which two projection norms are reported as a
    /// selection tie.
    pub selection_tie: f64,
    /// Eigenvalue floor, relative to the trace, for inverting sandwich
    /// curvature matrices.
    pub eig_floor_rel: f64,
    /// Pivot threshold, relative to the largest pivot, for the QR step in
    /// factor normalization.
    pub normalization_rank: f64,
    /// Allowed relative decrease of the log-likelihood between half-sweeps
    /// before the solver flags non-monotone progress.
    pub monotone_slack: f64,
    /// Minimum relative gap between consecutive population singular values
    /// accepted by the simulation generator.
    pub gram_gap: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rank_rel: 1e-8,
            selection_tie: 1e-10,
            eig_floor_rel: 1e-12,
            normalization_rank: 1e-12,
            monotone_slack: 1e-10,
            gram_gap: 1e-6,
        }
    }
}
