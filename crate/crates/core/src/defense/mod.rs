//! Inference-time defenses: posterior noising, set-growth stealing
//! detection and input-anomaly detection.

pub mod membership;
pub mod noising;
pub mod re_detect;
pub mod stealing;

pub use membership::{membership_eval, MembershipRow};
pub use noising::{entropy, entropy_attack_auc, estimation_error, jsd, noise_posterior, NoiseConfig};
pub use re_detect::{re_detector_score, re_detector_train, DetectorModel, InputVerdict};
pub use stealing::{archive_update, stealing_alarm, QueryArchive, StealingMonitor, StreamVerdict};
