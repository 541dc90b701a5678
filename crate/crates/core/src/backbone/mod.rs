mod checkpoint;
mod config;
mod model;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointHeader, ParamEntry, CHECKPOINT_MAGIC,
};
pub use config::{se_width, Activation, HeadConfig, Initializer, ModelConfig, StageConfig};
pub use model::{
    build_model, forward, init_params, mbconv, se_block, DenseParams, MbConvParams, Model, Network,
    SeParams, StageParams, DEPTHWISE_KERNEL, STEM_KERNEL,
};
