//! Density models on representations.

pub mod flow;
pub mod gmm;

pub use flow::{fit_flow, FlowConfig, FlowModel, FlowRun};
pub use gmm::{fit_em, fit_em_from, m_step, FitLog, GmmConfig, GmmModel};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;
