//! Integer-only transformer inference by scale propagation.
//!
//! Every activation travels as a pair `{x, s}` of an integer payload and a positive
//! rational scale, so that the represented value is `x / s`. Kernels update payload
//! and scale together; a protocol step re-scales any result that leaves the `p`-bit
//! range. With polynomial attention and L1 layer normalization in place of the
//! exponential and square-root based blocks, a whole encoder stack runs without a
//! single de-quantization.
//!
//! - [`tensor`]: payload/scale containers and shape transformations
//! - [`scale`]: scale initialization, quantize/de-quantize, matching, re-scaling
//! - [`ops`]: the integer kernel set
//! - [`protocol`]: the re-scaling protocol and the inference [`Session`]
//! - [`transformer`]: polynomial attention, L1 layer norm, FFN, layers, FP32 twin
//! - [`analysis`]: precision loss, ablation, storage and speed-up accounting
//! - [`format`]: the binary model file

pub mod analysis;
pub mod audit;
pub mod error;
pub mod format;
pub mod ops;
pub mod protocol;
pub mod scale;
pub mod tensor;
pub mod transformer;

pub use audit::{AuditOp, AuditRecord, KernelKind, Lane, ModuleSet, ModuleTag, OpAuditLog};
pub use error::{Error, Result};
pub use ops::Kernel;
pub use protocol::{protocol_apply, Session};
pub use scale::{
    dequantize, init_scale, quantize, rescale, scale_match, scale_match_dim, MatchRule,
    Precision, ScaleGranularity,
};
pub use tensor::{broadcast_scale, IntTensor, RationalTensor, ScaleTensor, ScaledTensor};
