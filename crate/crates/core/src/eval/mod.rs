//! Scoring generated answers.
//!
//! [`rouge1`] and [`rouge_l`] compare token lists produced by [`tokens`]:
//! lowercase, ASCII punctuation removed, split on whitespace. An empty
//! candidate scores precision 0, and two empty strings score all zeros.
//!
//! Bias entries are scored against the accepted answer, except that a
//! response sitting close to the rejected answer gets similarity 0 (see
//! [`BiasRule`]). A set of entries reduces to mean P/R/F1, mean similarity
//! and `overall = F1 * similarity`.
//!
//! [`flops_ratio`] compares the inference cost of a baseline that must read
//! a long instruction with ours, which reads the question alone.

mod benchmark;
mod bias;
mod flops;
pub mod reference;
mod rouge;

pub use benchmark::{
    parse_metrics, render_table, run_benchmark, score_responses, BenchmarkReport, Metric, Scored,
    TaskRow,
};
pub use bias::{
    bias_score, overall, overall_bias, run_bias, similarity, BiasEntry, BiasEntryScore, BiasReport,
    BiasRule, BinaryBagCosine,
};
pub use flops::{
    check_reference_reductions, flops_ratio, flops_table, reference_comparisons, CostModel,
    FlopsComparison, FlopsRow,
};
pub use rouge::{clipped_matches, f1, lcs_len, rouge1, rouge_l, tokens, RougeScore};
