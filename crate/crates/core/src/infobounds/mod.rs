//! Information-theoretic checks: exact identities and bounds on small
//! discrete chains, and binned probes of learned features.

pub mod chain;
pub mod probe;
pub mod table;

pub use chain::{
    sandwich_check, verify_markov_identities, ChainTemplate, DiscreteChain, IdentityReport,
    MiReport,
};
pub use probe::{binned_mi, mi_probe, probe_features, FactorScores, ProbeReport, DEFAULT_BINS};
pub use table::{conditional_mi, mutual_info, JointTable};
