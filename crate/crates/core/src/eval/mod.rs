//! Evaluation protocols, the supervised baseline and report exports.

mod baseline;
mod export;
mod protocols;
mod report;

pub use baseline::{
    eval_supervised, predict_supervised, train_supervised_baseline, BaselineConfig, BaselineEpoch,
    SupervisedModel,
};
pub use export::{
    bank_rows, dataset_rows, export_attention_heatmap, export_confusion,
    export_confusion_difference, export_embeddings, parse_embeddings, prototype_rows,
    AttentionHeatmap, EmbeddingRow,
};
pub use protocols::{
    draw_support, eval_complete, eval_partial_restricted, eval_partial_strategy1,
    eval_partial_strategy2, eval_with_support_sets, partial_class_study, PartialStudy,
};
pub use report::{mean_std, ClassAccuracy, Confusion, EvalReport, Protocol, VariabilityReport};
