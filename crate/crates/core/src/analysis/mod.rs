//! Measurement tools: Jensen-Shannon divergence between head distributions,
//! recall of routing plans against exact maximum inner product search, and
//! operation-count scaling of the attention kernels.

mod jsd;
mod mips;
mod scaling;

pub use jsd::{
    attention_distribution, head_distributions, jsd, jsd_report, mean_head_jsd, JsdReport, JsdRow, MeanStd,
    MAX_DENSE_N,
};
pub use mips::{exact_top_w, fit_centroids, mips_recall, routing_plan};
pub use scaling::{
    ceil_sqrt, measure, scaling_benchmark, BenchKind, ScalingReport, ScalingRow, DEFAULT_BENCH_WINDOW,
};
