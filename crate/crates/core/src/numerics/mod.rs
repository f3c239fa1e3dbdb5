//! The numeric substrate: dense tensors, a reverse-mode autodiff tape, the
//! optimizer stack, and small neural-net building blocks. Everything is plain
//! Rust on contiguous `Real` buffers; determinism comes from fixed iteration
//! orders and named RNG streams, not from luck.

pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;
