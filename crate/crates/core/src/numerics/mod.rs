//! Dense numerics: tensors, kernels, the reverse-mode graph, seeded RNG and
//! the finite-difference gradient oracle.

pub mod grad_check;
pub mod graph;
pub mod ops;
pub mod param;
pub mod rng;
pub mod tensor;

pub use grad_check::{finite_diff_grad, relative_error, DEFAULT_FD_STEP};
pub use graph::{Gradients, Graph, Var};
pub use ops::{depthwise_conv1d, matmul, rms_norm, silu, softmax_rows, softplus};
pub use param::{ParamId, ParamStore, ParamTensor};
pub use rng::SeededRng;
pub use tensor::Tensor;
