//! Demand forecaster, its two training regimes and their evaluation.

pub mod compare;
pub mod eval;
pub mod forecaster;
pub mod optim;
pub mod train;

pub use compare::{compare_runs, CompareConfig, Comparison, TableRow};
pub use eval::{evaluate, EvalReport, SampleEval, Stat};
pub use forecaster::{DemandModel, ForecasterParams, OracleForecaster, OutputClamp};
pub use train::{train, train_e2e, train_two_step, TraceRow, TrainConfig, TrainMode, TrainOutcome};
