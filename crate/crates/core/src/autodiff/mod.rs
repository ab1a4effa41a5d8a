//! Minimal reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! The primitive inventory is the closed set needed by the encoder, the CTC
//! loss, and the mask learners: matmul, elementwise add/mul, scalar scaling,
//! slicing/concatenation, gathers, transpose, relu/swish/sigmoid, sqrt,
//! clamp, layer normalization, dropout (counter-RNG masks), row softmax with
//! temperature, log-softmax, logsumexp/logaddexp, sum/mean reductions, and
//! 1-D (strided and depthwise) convolutions. Everything executes eagerly on a
//! [`Tape`]; `backward` replays the tape in reverse and accumulates gradients
//! into the [`ParamStore`].
//!
//! All randomness (dropout masks) is derived from counter-based streams keyed
//! on (seed, step, site), never from global state, so single-threaded runs
//! are bit-exact reproducible.

mod check;
mod params;
mod tape;
mod tensor;

pub use check::grad_check;
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{matmul_nn, matmul_nt, matmul_tn, Dtype, Scalar, Tensor};
