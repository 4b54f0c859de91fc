//! Power-maximizing aggregation of cohort-year treatment effects in
//! longitudinal cluster-randomized trials.
//!
//! The crate is `no_std` (it needs `alloc`). It covers the panel data model,
//! per-group effect estimators, cluster-robust covariance, PWRD and
//! comparator weights with their tests, a random-intercept comparator, and
//! the synthetic trial generator used for power studies. File formats, the
//! command line, and parallel drivers live in the `pwrd` crate.

#![no_std]

extern crate alloc;

pub mod covariance;
pub mod dist;
pub mod effects;
pub mod error;
pub mod linalg;
pub mod mixed;
pub mod panel;
pub mod sim;
pub mod weights;

pub use covariance::{
    cluster_covariance, small_sample_df, CovarianceEstimate, CovarianceOptions, CovarianceVariant, DfRule,
};
pub use effects::{
    estimate_effects_diffmeans, estimate_effects_peters_belson, estimate_p0, exit_observation_estimate, EffectMethod,
    ExitRule, GroupEffects, TestInProportions,
};
pub use error::{Error, ErrorClass, Result};
pub use linalg::Matrix;
pub use mixed::{fit_random_intercept, MixedFit, MixedOptions, VarianceComponents};
pub use panel::{GroupInfo, GroupKey, Observation, PanelBuilder, PanelDataset, RawRow, TestInRule};
pub use sim::{
    apply_effect, calibrate_thresholds, estimate_power, generate_panel, icc_sweep, negative_effect_sweep, EffectSpec,
    Method, PowerResult, Regime, Scenario,
};
pub use weights::{
    aggregate_external, aggregate_test, flat_weights, pitman_relative_efficiency, pwrd_weights, test_slope,
    AggregatedTest, AggregationWeights, Alternative, PwrdOptions, WeightScheme,
};
