//! GCN and GAT layer stacks, training and operation counting.

mod config;
mod flops;
mod model;
mod serialize;
mod topology;
mod train;

pub use config::{LayerShape, ModelConfig, ModelKind};
pub use flops::{count_flops, count_flops_topology, count_flops_with, FlopBreakdown};
pub use model::{apply_layer, gat_attention, BoundLayer, ForwardOptions, ForwardOutput, LayerParams, Model};
pub use serialize::{decode_masks, decode_model, encode_masks, encode_model, load_masks, load_model, save_masks, save_model};
pub use topology::{LayerEdges, LayerMask, Topology};
pub use train::{accuracy, mean_cross_entropy, train, EpochRecord, TrainConfig, TrainHook, TrainReport};
