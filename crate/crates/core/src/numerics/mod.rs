//! Reference executor: forward evaluation, reverse-mode gradients and
//! finite-difference gradient checking, generic over the float type.

mod exec;
mod gradcheck;
pub mod kernels;
mod params;
mod scalar;
mod tensor;

pub use exec::{
    backward, cross_entropy, forward, forward_on_branches, same_branches, sgd_step,
    update_running_stats, ExecError, ForwardResult, Gradients, Mode, Tape, BN_MOMENTUM,
};
pub use gradcheck::{
    grad_check, relative_error, BnStatistics, GradCheckConfig, GradReport, ParamCheck, Stencil,
    DEFAULT_GRADCHECK_BATCH,
};
pub use params::{
    bilinear_kernel, init_params, param_layout, Param, ParamRef, ParamRole, ParamStore,
};
pub use scalar::Scalar;
pub use tensor::{sample_input, Tensor};
