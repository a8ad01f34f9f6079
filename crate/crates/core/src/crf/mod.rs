//! Two-layer CRF over per-pixel object and category labels.
//!
//! The energy is
//!
//! ```text
//! E = λ1 Σ ψO(o_i) + λ2 Σ ψC(c_i)
//!   + λ3 Σ_ij w_ij [o_i ≠ o_j] + λ4 Σ_ij w_ij [c_i ≠ c_j]
//!   + λ5 Σ [c_i ≠ M2(o_i)]
//! ```
//!
//! over 4-neighbor pairs, each counted once, and is minimized by
//! alpha-expansion with a max-flow core.

mod export;
mod inference;
mod maxflow;
mod problem;

pub use export::{export_result, object_color, read_label_png, write_label_png, write_overlay};
pub use inference::{
    infer_holistic, infer_paired, infer_separated, propose_move, InferenceOptions, LabelingResult, Move, MoveRecord, SweepRecord,
};
pub use maxflow::{Graph, Segment};
pub use problem::{
    build_category_unary, build_object_unary, build_problem, category_group, confidence_score, confidence_table,
    coupling_cost, object_categories, pairwise_weight, CategoryGroup, CrfProblem, Edge, EnergyTerms, MIN_CONFIDENCE,
};
