//! Piecewise exponential additive mixed models with an optional deep
//! component in the additive predictor.
//!
//! Survival records are expanded into a piecewise-exponential frame
//! ([`ped`]), modelled as a Poisson regression with log-exposure offset
//! ([`model`], [`train`]) and turned back into survival and cumulative
//! incidence curves ([`inference`]). [`metrics`] scores predictions with the
//! IPCW Brier score, [`simulate`] draws data from known hazards and
//! [`benchmark`] ties everything into replicated comparisons.

pub mod benchmark;
pub mod deep;
pub mod error;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod model;
pub mod ped;
pub mod simulate;
pub mod spline;
pub mod train;

pub use error::{Error, Result};
pub use inference::{cifs, predict_hazards, survival_curve, CifSet, SurvivalCurve};
pub use model::{BasisOptions, DeepSpec, HazardModel, ModelSpec, TermSpec};
pub use ped::{
    make_cut_points, to_ped, to_ped_named, CutPoints, CutStrategy, Dataset, PedFrame, PedRow,
    SurvivalRecord,
};
pub use train::{fit, tune, TrainConfig, TrainReport};
