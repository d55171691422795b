//! Predictive order determination.
//!
//! Given data `(X, Y)`, a dimension reducer producing ordered coordinates
//! and a family of learners, [`engine::select_order`] estimates the smallest
//! number of leading coordinates that keeps all of the predictive information
//! about `Y`. Each candidate order is checked by a cross-fitted one-sided
//! test comparing its risk with the risk at `d_max`.
//!
//! ```no_run
//! use pod_core::{select_order, Loss, PODConfig, ReducerSpec};
//! use pod_core::sim::gen_sdr_model;
//!
//! let data = gen_sdr_model(1, 200, 0.5, 7)?;
//! let config = PODConfig::new(Loss::Squared, ReducerSpec::Sir { slices: 10 });
//! let result = select_order(&data, &config)?;
//! println!("selected order {}", result.d_hat);
//! # Ok::<(), pod_core::PodError>(())
//! ```

pub mod baselines;
pub mod data;
pub mod engine;
pub mod error;
pub mod learners;
pub mod losses;
pub mod numerics;
pub mod reducers;
pub mod rng;
pub mod sim;

pub use data::{load_csv, parse_csv, CenterScale, Dataset, Response, ResponseKind, ResponseSpec};
pub use engine::{
    select_order, test_all, CrossFit, FoldPlan, FoldRisk, FoldSplit, PODConfig, PODResult, ReducerFit, TestResult,
    DEFAULT_SEED,
};
pub use error::{ErrorKind, PodError, Result};
pub use learners::LearnerSpec;
pub use losses::Loss;
pub use reducers::{ReducerSpec, ReductionMap};
pub use baselines::{BaselineMethod, BaselineResult};
pub use sim::{Scenario, StudyConfig, StudyReport};
