//! Training loops, downstream probes, metrics and experiment orchestration.

pub mod downstream;
pub mod embed;
pub mod experiment;
pub mod metrics;
pub mod train;

pub use downstream::{train_downstream, LogisticRegression};
pub use embed::{extract_embeddings, extract_embeddings_multi, load_embeddings, save_embeddings, EmbeddingRecord};
pub use experiment::{prepare, prepare_for, Prepared, run_experiment, ExperimentConfig, MetricsReport, Method, Mode, ResultRow};
pub use metrics::{accuracy, median, roc_auc};
pub use train::{classifier_accuracy, finetune, pretrain, train_classifier, Objective, TrainConfig, TrainReport};
