//! Rewards, evaluation statistics, experiment configuration and the
//! end-to-end pipeline.

mod checks;
mod config;
mod eval;
mod experiment;
mod reward;

pub use checks::{
    additivity_suite, analytic_suite, decomposition_suite, gradcheck, gradcheck_problem, ln2_check,
    random_simplex, relative_error, theorem1_suite, CheckReport, TiltInstance, ADDITIVITY_TOL,
    ANALYTIC_TOL, DECOMPOSITION_TOL, FD_STEP, GRADCHECK_TOL, LN2_TOL, THEOREM1_TOL,
};
pub use config::{ExperimentConfig, ObjectiveConfig, StageSeeds, SweepConfig};
pub use eval::{
    evaluate, evaluate_rewards, format_eval_csv, parse_eval_csv, EvalRecord, EvalReport, EvalRow,
    Stat, Target, EVAL_HEADER,
};
pub use experiment::{
    compare_msdda_soup, error_chain, pretrained_model, run_experiment, Comparison, RunOutputs,
    EVAL_FILE, FAILED_FILE, MANIFEST_FILE, PRETRAINED_FILE, SWEEP_FILE,
};
pub use reward::{weighted_reward, RewardFn};
