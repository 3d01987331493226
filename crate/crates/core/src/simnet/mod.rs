//! Encoder modules, the autoregressive GRU, mirror decoders, and the
//! checkpoint container.

mod checkpoint;
mod config;
mod decoder;
mod model;

pub use checkpoint::{read_container, write_container, Container, TensorEntry, FORMAT_VERSION};
pub use config::{
    default_module_specs, format_module_specs, inverse_output_padding, parse_module_specs, ConvSpec, ModelConfig,
    Variant, FULL_CLIP_LEN,
};
pub use decoder::{build_mirror_decoder, Decoder, DecoderConfig, DecoderLayer};
pub use model::{
    channel_major, module_prefix, parameter_layout, time_major, Encoded, ForwardNodes, LatentFrames, Mode, Model,
    ModuleNodes, Net, ParamGroup, AR_PREFIX, CLASSIFIER_PREFIX,
};
