pub mod coupling;
pub mod flatten;
pub mod model;
pub mod serialize;

pub use coupling::AdditiveCoupling;
pub use flatten::{
    build_flatten_flow, entropy_bits, factorization_gap, flatten_bpd, marginals, pushforward,
    verify_bijection, verify_bijection_map, BijectionReport, FlattenFlow, Pmf,
};
pub use model::{FlowModel, LatentBlock, Mode, ModelConfig, PermutationKind, PriorParams};
pub use serialize::{load_model, model_from_bytes, model_hash, model_to_bytes, save_model};
