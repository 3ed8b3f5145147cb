//! Scale-aware crowd counting: a small reverse-mode tensor engine, the
//! regional/semantic attention blocks, the asymmetric multi-scale decoder
//! block, the full encoder-decoder network, synthetic data and training.

pub mod amm;
pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod net;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use amm::{AmmBlock, CostReport};
pub use attention::{RamBlock, SamBlock};
pub use autograd::{Activation, BinaryOp, ConvGeometry, Gradients, PoolKind, ReduceKind, Tape, Var};
pub use error::{Error, Result};
pub use net::{NetConfig, Saccn, SaccnModel};
pub use nn::{Conv2dLayer, LinearLayer, Module, ParamSet, Session};
pub use tensor::{Element, Precision, Tensor};
