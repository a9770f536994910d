//! Clustering-agreement metrics for sense induction and pseudoword
//! recovery accuracy.

mod fuzzy;
mod hard;
mod pseudo;
mod report;

pub use fuzzy::{fuzzy_b_cubed, fuzzy_b_cubed_pr, fuzzy_nmi, memberships, Membership};
pub use hard::{paired_f_score, v_measure, v_measure_parts, Contingency};
pub use pseudo::pseudoword_accuracy;
pub use report::{avg, evaluate, read_labeling, EvalReport, LabeledInstance, TaskStyle, ALL};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("{total} instance ids appear on only one side; first: {}", first.join(", "))]
    Mismatch { total: usize, first: Vec<String> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
