//! Training, evaluation and the artifacts around them.

pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod pckh;
pub mod train;

pub use ablation::{
    AblationError, AblationPlan, AblationRow, AblationTable, CellStats, Protocol, TABLE_MASKS,
    ablation_suite,
};
pub use checkpoint::{
    CHECKPOINT_VERSION, Checkpoint, CheckpointError, CheckpointMeta, load_checkpoint,
    save_checkpoint,
};
pub use data::{
    AugmentConfig, ChannelStats, DataError, FeatureScaler, WindowPlan, WindowPolicy,
    featurize_sequence, plan_windows, split_gallery_probe,
};
pub use eval::{EvalError, EvalOptions, EvalReport, Metric, rank1_eval, rank1_from_embeddings};
pub use pckh::{PckhError, PckhScores, pckh};
pub use train::{TrainConfig, TrainError, TrainOutcome, train, train_with};
