//! Reverse-mode automatic differentiation over dense `NCHW` tensors.
//!
//! The engine is a plain Wengert list: every operation recorded on a
//! [`Tape`] stores its output value plus whatever it needs for the backward
//! pass, and [`Tape::backward`] walks the list in reverse. Everything runs on
//! the calling thread so results are bitwise reproducible.
//!
//! The op set is exactly what image-to-image GANs need: strided and
//! transposed convolutions, reflection padding, instance normalization,
//! pointwise nonlinearities, and the separable Gaussian window used by
//! structural-similarity losses.

mod conv;
mod element;
mod tape;
mod tensor;

pub use conv::{conv2d_output_size, conv_transpose2d_output_size};
pub use element::Element;
pub use tape::{gaussian_kernel, Gradients, Tape, Var};
pub use tensor::Tensor;
