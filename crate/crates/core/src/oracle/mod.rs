//! Independent correctness checks: a trace auditor and a small-model
//! schedule explorer.

pub mod audit;
pub mod explore;

pub use audit::{audit, AuditReport, Lineage, Violation};
pub use explore::{
    direct_parent_templates, explore, vheight_templates, Alphabet, ExhaustiveReport, ExploreBound, ExploreError,
    ExploreProtocol, Template,
};
