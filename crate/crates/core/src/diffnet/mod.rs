//! Minimal reverse-mode differentiation: a recording [`Tape`] over named
//! parameters in a [`ParamStore`], a few layer types, Adam, a central
//! difference gradient oracle and a JSON checkpoint format.

mod checkpoint;
mod gradcheck;
mod layers;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use layers::{
    argmax, entropy, gaussian_reparam_sample, log_softmax, softmax, Activation, GruCell, Linear,
    Mlp,
};
pub use params::{AdamConfig, Gradients, Init, Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
