//! Layer specifications, presets, parameter state, Siamese scoring, and
//! persistence.

mod checkpoint;
mod embeddings;
mod spec;
mod state;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION,
};
pub use embeddings::{
    export_embeddings, format_embeddings, import_embeddings, parse_embeddings, EmbeddingRecord,
};
pub use spec::{
    backbone_spec, head_spec, preset_spec, tower_spec, ActivationKind, LayerSpec, NetworkSpec,
    DEFAULT_L2, PRESETS,
};
pub use state::{build_network, count_parameters, extract_features, siamese_forward, NetworkState};
