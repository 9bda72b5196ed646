//! Fault-injection harness: seeded plans, campaign execution, robustness
//! rating and report output.

pub mod campaign;
pub mod inject;
pub mod rating;
pub mod report;
pub mod stats;

pub use campaign::{
    failure_sweep, measure_baseline, run_campaign, Aggregates, CampaignConfig, CampaignReport,
    RunOutcome, RunRecord,
};
pub use inject::{inject_corruption, InjectError, InjectionEvent, InjectionKind, InjectionPlan};
pub use rating::{robustness_rating, Rating, RatingError};
pub use report::{strip_timing, to_csv, to_json, write_report, ReportFormat};
