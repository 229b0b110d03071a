//! Step recognition from a (pre)trained encoder, and the evaluation
//! metrics.

mod finetune;
mod metrics;

pub use finetune::{
    classify_clip, clip_logits, evaluate, finetune_run, finetune_train, ClassifierHead, FinetuneConfig,
    FinetuneOutcome, Init, SplitSpec, TrainedClassifier, load_classifier, save_classifier,
};
pub use metrics::{compute_metrics, MetricsReport};
