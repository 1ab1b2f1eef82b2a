//! A small deterministic CNN with hand-written gradients, used to run the
//! sparsify → compress → finetune loop on synthetic data.

mod data;
mod gemm;
mod layer;
mod net;
mod train;

pub use data::{DatasetConfig, Split, SynthDataset};
pub use layer::{conv_forward, groupconv_forward, ConvGeometry, FeatureMap, GroupedLayer, LayerCache, LayerGrads};
pub use net::{BatchResult, Gradients, MicroNet, ACCEPTANCE_ARCH};
pub use train::{evaluate, train_epoch, EpochStats, LayerReg, RegTerm, Sgd, SgdConfig};
