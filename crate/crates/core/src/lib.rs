//! Reference model of an asymmetric-operand-size matrix multiply-accumulate
//! instruction (int8 activations x int4 weights into int16 accumulators) and
//! its symmetric int8 x int8 -> int32 counterpart.
//!
//! * [`matrix`]: integer containers, int4 packing and operand register layouts.
//! * [`isa`]: bit-exact instruction semantics in three accumulation modes.
//! * [`gemm`]: tiled GEMM kernels with instruction and load counters.
//! * [`conv`]: im2col lowering of convolution layers.
//! * [`overflow`]: accumulator-width overflow measurement over conv layers.
//! * [`systolic`]: output-stationary systolic array model.
//! * [`tensor_file`]: the `AQT1` tensor container.

pub mod conv;
pub mod error;
pub mod gemm;
pub mod isa;
pub mod matrix;
pub mod overflow;
pub mod reference;
pub mod systolic;
pub mod tensor_file;

pub use error::{Error, Result};
pub use isa::AccMode;
pub use matrix::{I4MatrixPacked, I8Matrix, Matrix};
