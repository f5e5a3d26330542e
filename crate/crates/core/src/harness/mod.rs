//! Configuration, experiment execution, run records and evaluators.

pub mod config;
pub mod eval;
pub mod fixtures;
pub mod run;
pub mod verify;

pub use config::{GuidanceSpec, Method, ModelSource, PromptSet, RewardSpec, TaskSpec};
pub use eval::{
    bootstrap_p_value, compare_methods, estimate_induced_kl, expected_gold_reward, induced_kl, total_variation, ComparisonReport,
    Estimate, GoldMode, KlEstimate,
};
pub use run::{read_jsonl, read_jsonl_file, run_experiment, verify_record, write_jsonl, write_jsonl_file, Resources, RunContext, RunRecord};
pub use verify::{bundled_fixtures, verify, VerifyFixture, VerifyReport};
