//! Hierarchical class-incremental segmentation with hyperbolic hyperplane
//! classifiers.

pub mod autodiff;
pub mod cil;
pub mod config;
pub mod error;
pub mod head;
pub mod hier_loss;
pub mod increg;
pub mod poincare;
pub mod synth;
pub mod taxonomy;

pub use error::{Error, Result};
pub use head::{Architecture, HyperbolicHead, Model, ModelSnapshot, Rsgd};
pub use hier_loss::{HierLossConfig, Target};
pub use increg::{AnchorSets, RegWeights};
pub use synth::{ClassGenerator, Dataset, SynthConfig};
pub use poincare::{Curvature, PoincarePoint, TangentVector};
pub use taxonomy::{parse_taxonomy, ClassNode, LabelExpansion, NodeId, SlotIndex, TaxonomyTree};
