//! Moment (NPA-type) semidefinite hierarchies for bipartite Bell games.
//!
//! The crate builds three flavors of moment relaxation for a Bell functional —
//! the sequential hierarchy (per-outcome blocks under a strong no-signaling
//! condition), the standard commuting-operator hierarchy, and a modified
//! hierarchy in which Alice's operators satisfy completeness only weakly —
//! solves them with a built-in interior-point SDP solver, and post-processes
//! the solutions:
//!
//! * rank-loop (flatness) detection and GNS extraction of an explicit
//!   finite-dimensional strategy from flat sequential solutions,
//! * almost-commuting / weakly-signaling strategies from standard-hierarchy
//!   solutions at any level,
//! * the no-signaling / signaling-isometric / residual decomposition of an
//!   operator family under input- and outcome-averaging projectors,
//! * sparse sum-of-squares certificates assembled from the solver's dual data
//!   and re-verified coefficient-wise from scratch,
//! * bound reports that combine a solved hierarchy value with a symbolic
//!   negligible term.
//!
//! Every capability has a runnable example:
//!
//! ```text
//! cargo run --example solve_game          # build + solve one hierarchy level
//! cargo run --example hierarchy_sweep     # levels 1..n of all three hierarchies
//! cargo run --example extract_strategy    # flatness check + GNS extraction
//! cargo run --example almost_commuting    # strategies from the standard hierarchy
//! cargo run --example decompose_family    # NS/SI/residual decomposition
//! cargo run --example sos_certificate     # dual -> sparse SOS certificate
//! cargo run --example export_sdpa        # solver-neutral SDPA file round trip
//! cargo run --example bound_report        # compiled-score bound report
//! ```
//!
//! The `bellmoment` binary exposes the same pipeline as subcommands
//! (`solve`, `export`, `extract`, `certify`, `decompose`, `report`).

pub mod algebra;
pub mod extract;
pub mod relax;
pub mod scenario;
pub mod sdp;
pub mod strategy;

pub use algebra::{canonicalize, enumerate_basis, Letter, Party, Word, WordBasis};
pub use extract::{
    check_flat, flat_extend, gns_build, numerical_rank, verify_model, ExtractError,
    FlatnessReport, GnsModel, ModelReport,
};
pub use relax::{build_modified, build_sequential, build_standard, MomentProblem, MomentSolution};
pub use scenario::{load_game, save_game, score, BellFunctional, Correlation, Scenario};
pub use sdp::{certify, solve, CertifiedReport, SolveStatus, SolverOptions};
pub use strategy::{
    almost_commuting_from_npa, commutator_residuals, sequentialize, signaling_residual,
    CommutatorReport, FiniteStrategy, SequentialStrategy, StrategyError,
};
