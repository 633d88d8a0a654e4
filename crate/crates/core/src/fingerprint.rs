//! State fingerprints and the semantic-identity test used for merging.
//!
//! A state is identified by its normalized URL, the canonical keys of the
//! effective actions executed since the most recent URL change, and the
//! optional screenshot digest. Two states are equivalent when the URLs match
//! and either the effective-action windows agree or the screenshot digests
//! are both present and identical.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::Trajectory;
use crate::urlnorm::{normalize_url, UrlError, UrlNormConfig};

/// Identity signature of one observed state.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateFingerprint {
    pub normalized_url: String,
    /// Canonical keys of effective actions since the last URL change, in order.
    /// The window anchors at the trajectory start until the first URL change.
    pub effective_prefix: Vec<String>,
    pub screenshot_hash: Option<String>,
}

#[derive(Debug, Error)]
pub enum FingerprintError {
    #[error(transparent)]
    Url(#[from] UrlError),
    #[error(
        "trajectory {trajectory_id:?} step {step_index}: effective flag unresolved; \
         annotate it or run a verifier before merging"
    )]
    UnresolvedEffectiveness { trajectory_id: String, step_index: usize },
}

/// Fingerprint every state `s_0 ..= s_T` of a trajectory.
///
/// Requires every step's `effective` flag to be resolved, since ineffective
/// actions are excluded from the window.
pub fn fingerprint_states(
    trajectory: &Trajectory,
    cfg: &UrlNormConfig,
) -> Result<Vec<StateFingerprint>, FingerprintError> {
    let states: Vec<_> = trajectory.states().collect();
    let mut fingerprints = Vec::with_capacity(states.len());

    let mut window: Vec<String> = Vec::new();
    let mut prev_url: Option<String> = None;
    for (t, state) in states.iter().enumerate() {
        let url = normalize_url(&state.url, cfg)?;
        if t > 0 {
            let step = &trajectory.steps[t - 1];
            let effective = step.effective.ok_or_else(|| {
                FingerprintError::UnresolvedEffectiveness {
                    trajectory_id: trajectory.trajectory_id.clone(),
                    step_index: step.index,
                }
            })?;
            if prev_url.as_deref() != Some(url.as_str()) {
                window.clear();
            } else if effective {
                window.push(step.action.canonical_key());
            }
        }
        fingerprints.push(StateFingerprint {
            normalized_url: url.clone(),
            effective_prefix: window.clone(),
            screenshot_hash: state.screenshot_hash.clone(),
        });
        prev_url = Some(url);
    }
    Ok(fingerprints)
}

/// Semantic identity: URLs match, and either the effective windows agree or
/// the screenshot digests are both present and identical.
pub fn states_equivalent(a: &StateFingerprint, b: &StateFingerprint) -> bool {
    a.normalized_url == b.normalized_url
        && (a.effective_prefix == b.effective_prefix
            || (a.screenshot_hash.is_some() && a.screenshot_hash == b.screenshot_hash))
}
