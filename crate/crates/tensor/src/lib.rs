//! Minimal dense-tensor library with tape-based reverse-mode automatic
//! differentiation and an AdamW optimizer.
//!
//! All values are `f64`. A forward pass records primitives on a [`Tape`];
//! [`Tape::backward`] replays it in reverse. Model parameters live in a
//! [`ParamStore`] and are bound onto a tape through a [`Session`].
//!
//! ```
//! use csifm_tensor::{Tape, Tensor};
//!
//! let x = Tensor::scalar(3.0).with_requires_grad(true);
//! let mut tape = Tape::new();
//! let v = tape.leaf(&x);
//! let y = tape.mul(v, v).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(v).unwrap(), &[6.0]);
//! ```

pub mod check;
mod error;
pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{AdamWConfig, AdamWState};
pub use params::{derive_seed, splitmix, Init, ParamGrads, ParamId, ParamStore, Session};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
