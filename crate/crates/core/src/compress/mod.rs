//! Compression passes: near-zero pruning, bias-driven channel pruning, K-means weight
//! clustering, mixed-width quantization and BN folding, plus the per-stage ledger.
//!
//! Passes run in the order NZP -> BDP -> cluster -> quantize. Each pass returns a new
//! parameter set and never mutates its input.

mod analysis;
mod cluster;
mod fold;
mod ledger;
mod prune;
mod quant;

pub use analysis::{negative_rate, negative_rate_analysis, NegativeRateRow, NegativeRateTable};
pub use cluster::{
    apply_codebook, cluster_weights, kmeans_1d, sse, Codebook, KMeansConfig, KMeansMethod,
    LayerCodebook,
};
pub use fold::{
    fold_bn, fold_channel, pe_forward, pe_forward_with_pre, pe_plan, FoldedConv, FoldedLinear, FoldedPEParams,
    FoldedStage, PlanStage,
};
pub use ledger::{
    architecture_stage, build_ledger, reference_ledger, CompressionLedger, StageRecord,
    StageUnit, REFERENCE_STAGE_RATIOS, REFERENCE_TOTAL_RATIO,
};
pub use prune::{bias_driven_prune, near_zero_prune, PruneThresholds};
pub use quant::{quantize, QStage, QuantSpec, QuantStats, QuantizedModel, TensorFormatInfo};
