//! Small trainable embedder mapping raw features to unit-norm embeddings.

mod adamw;
mod model;
mod train;

pub use adamw::{adamw_step, AdamState, BETA1, BETA2, EPSILON};
pub use model::{
    batch_objective, embed, embed_all, load_params, read_params, save_params, write_params, Architecture, Dense,
    EmbedderParams, ModelConfig, ObjectiveValue, PARAMS_FORMAT,
};
pub use train::{
    balanced_batches, person_identities, train, write_train_log, EpochLog, TagSource, TrainConfig, TrainLog,
};
