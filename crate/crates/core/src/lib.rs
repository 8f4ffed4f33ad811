//! CPU convolution kernels (naive, direct-blocked, im2row, implicit GEMM and
//! Winograd F(2x2,3x3)) with a harness that measures latency, power and energy
//! per operation.

pub mod bench;
pub mod cli;
pub mod direct;
pub mod energy;
pub mod error;
pub mod gemm;
pub mod kernel;
pub mod lowering;
pub mod parallel;
pub mod problem;
pub mod reference;
pub mod report;
pub mod tensor;
pub mod winograd;

pub use error::{Error, Result};
pub use kernel::{run_kernel, KernelId, PreparedConv};
pub use problem::{featured_layer, format_descriptor, parse_descriptor, resnet50_conv_suite, ConvProblem};
pub use reference::{conv_naive, ConvInputs};
pub use tensor::{max_rel_diff, FillPattern, Layout, Tensor4D};
