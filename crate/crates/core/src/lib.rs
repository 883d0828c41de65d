//! Predicting true stress-strain curves from small punch test
//! load-displacement curves.
//!
//! The pipeline runs surrogate data generation ([`material`]), angular field
//! imaging ([`gaf`]), convolutional features ([`features`]), an attention
//! seq2seq regressor ([`model`]), training ([`trainer`]) with binary
//! checkpoints ([`checkpoint`]), and evaluation ([`metrics`]).

pub mod checkpoint;
pub mod error;
pub mod features;
pub mod gaf;
pub mod material;
pub mod metrics;
pub mod model;
pub mod params;
pub mod trainer;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta};
pub use error::{Result, SptError};
pub use features::{build_feature_matrix, FeatureExtractor, FeatureMatrix, PreparedSample};
pub use gaf::{gaf_transform, GafImage, GafMode};
pub use material::{
    flow_stress, generate_dataset, read_csv, sample_material, spt_load, write_csv, CurvePair, Dataset, GridSpec,
    MaterialSpec, NormStats, Split,
};
pub use metrics::{emit_plot, evaluate, evaluate_model, mae, predict_mpa, r2, EvalReport, ModelTag, SampleMetrics};
pub use model::{
    CrossAttention, Dropout, EncoderStates, ForwardOutput, LayerState, LstmStack, Mode, ModelConfig, Seq2Seq,
};
pub use params::{Bound, ParamId, ParamStore};
pub use trainer::{
    loss, loss_var, train, train_step, train_with, write_loss_history, LossKind, TrainConfig, TrainOutput,
};
