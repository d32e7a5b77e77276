//! Adversary-aware sequence classification of user post histories.
//!
//! The crate is organised bottom-up: [`tensor`] is a small reverse-mode
//! autodiff engine, [`model`] builds the network on top of it, [`losses`]
//! holds the training objectives, [`attacks`] simulates next-post attacks and
//! [`train`] wires everything into cross-validated training and evaluation.

pub mod attacks;
pub mod data;
mod error;
pub mod hash;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod train;

pub use attacks::{apply_attack, AttackKind, AttackSpec, Attacker};
pub use data::{labels as labels_of, Post, RawPost, RawUser, UserSequence, Vocab};
pub use error::{Error, Result};
pub use losses::{cross_entropy, info_nce, total_loss, LossBundle};
pub use model::{Model, ModelConfig, ModelParams, Variant};
pub use tensor::{Adam, Graph, Tensor, Var};
