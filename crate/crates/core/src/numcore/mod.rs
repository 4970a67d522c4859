//! Dense f64 tensors, a define-by-run autodiff tape, AdamW and the
//! warm-up/cosine schedule.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod optim;
mod params;
mod schedule;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOpts, GradCheckReport, LeafReport};
pub use graph::{BnMode, BnStats, Conv2dOpts, CustomOp, Gradients, Graph, Var, BN_MOMENTUM, NORM_EPS};
pub use optim::{adamw_step, adamw_update, AdamWConfig, GroupHyper, OptimState};
pub use params::{Bound, Param, ParamGroup, ParamId, ParamStore};
pub use schedule::LrSchedule;
pub use tensor::Tensor;
