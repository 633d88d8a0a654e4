//! The TGPO objective: reward-weighted sigmoid preference loss over logit
//! margins, with analytic gradients and a minimal full-batch trainer.
//!
//! For a pair (a_w, a_l) at state s the logit margin is
//!
//! ```text
//! delta = [log pi(a_w|s) - log ref(a_w|s)] - [log pi(a_l|s) - log ref(a_l|s)]
//! ```
//!
//! and the per-pair loss is `-w * log(sigmoid(beta * delta))`, where `w` is
//! the pair's dynamic weight. Unit weighting (`w = 1`) is exactly the
//! standard DPO loss, kept as the baseline configuration.

use std::io::{self, BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::DumpError;
use crate::policy::{PolicyError, PolicyGradient, PolicyTable, ReferencePolicy, StateKey};
use crate::preference::PreferencePair;

/// Pair weighting mode: dynamic reward-gap weights, or the unit-weight
/// baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Dynamic,
    Unit,
}

impl std::str::FromStr for Weighting {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dynamic" => Ok(Weighting::Dynamic),
            "unit" => Ok(Weighting::Unit),
            other => Err(format!("unknown weighting {other:?} (expected dynamic|unit)")),
        }
    }
}

/// Trainer configuration. Runs are bit-reproducible given the seed and a
/// fixed pair order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub weighting: Weighting,
    /// `None` trains full-batch; `Some(n)` shuffles pairs each epoch with the
    /// seeded generator and updates per batch.
    pub batch_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.1,
            learning_rate: 1e-2,
            epochs: 2,
            seed: 0,
            weighting: Weighting::Dynamic,
            batch_size: None,
        }
    }
}

impl TrainConfig {
    fn effective_weight(&self, pair: &PreferencePair) -> f64 {
        match self.weighting {
            Weighting::Dynamic => pair.weight,
            Weighting::Unit => 1.0,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if !(self.beta > 0.0) {
            return Err(TrainError::InvalidConfig(format!("beta must be positive (got {})", self.beta)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate must be positive (got {})",
                self.learning_rate
            )));
        }
        if self.batch_size == Some(0) {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("cannot train on an empty pair list")]
    EmptyPairSet,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// `log(1 + exp(x))` with overflow-safe branching; accurate for |x| up to
/// 1e4 and beyond.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logit margin of a pair: policy-vs-reference log-ratio of the chosen action
/// minus that of the rejected action.
pub fn logit_margin(
    pair: &PreferencePair,
    policy: &PolicyTable,
    reference: &ReferencePolicy,
) -> Result<f64, PolicyError> {
    let key = StateKey::new(pair.task_id.clone(), pair.node_id);
    let chosen = policy.log_prob(&key, &pair.chosen.action)?
        - reference.log_prob(&key, &pair.chosen.action)?;
    let rejected = policy.log_prob(&key, &pair.rejected.action)?
        - reference.log_prob(&key, &pair.rejected.action)?;
    Ok(chosen - rejected)
}

/// Per-pair loss `-w * log(sigmoid(beta * delta))`, with `w` taken from the
/// pair in dynamic mode and fixed to 1 in unit mode.
pub fn tgpo_loss(pair: &PreferencePair, delta: f64, cfg: &TrainConfig) -> f64 {
    cfg.effective_weight(pair) * softplus(-cfg.beta * delta)
}

/// Mean loss and its analytic gradient over the policy logits.
///
/// `dL/ddelta = -w * beta * sigmoid(-beta * delta)`, chained through the
/// softmax log-probabilities. Both actions of a pair live in the same state
/// block, so the softmax normalizer cancels and each pair touches exactly its
/// chosen (+) and rejected (-) logits.
pub fn loss_gradient(
    pairs: &[PreferencePair],
    policy: &PolicyTable,
    reference: &ReferencePolicy,
    cfg: &TrainConfig,
) -> Result<(PolicyGradient, f64), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyPairSet);
    }
    let mut gradient = PolicyGradient::zeros_like(policy);
    let mut total_loss = 0.0;
    for pair in pairs {
        let key = StateKey::new(pair.task_id.clone(), pair.node_id);
        let delta = logit_margin(pair, policy, reference)?;
        total_loss += tgpo_loss(pair, delta, cfg);

        let dloss_ddelta = -cfg.effective_weight(pair) * cfg.beta * sigmoid(-cfg.beta * delta);
        let actions = policy.actions(&key).expect("state exists: log_prob succeeded");
        let chosen = actions.iter().position(|a| a == &pair.chosen.action);
        let rejected = actions.iter().position(|a| a == &pair.rejected.action);
        let (Some(chosen), Some(rejected)) = (chosen, rejected) else {
            unreachable!("actions exist: log_prob succeeded");
        };
        gradient.accumulate(&key, chosen, dloss_ddelta);
        gradient.accumulate(&key, rejected, -dloss_ddelta);
    }
    let n = pairs.len() as f64;
    gradient.scale(1.0 / n);
    Ok((gradient, total_loss / n))
}

/// One line of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub epoch: usize,
    pub mean_loss: f64,
    pub grad_norm: f64,
}

/// Trained policy plus the per-epoch loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub policy: PolicyTable,
    pub trace: Vec<TraceEntry>,
}

/// Gradient descent on the mean pair loss.
///
/// Full-batch by default, which makes the run deterministic without any
/// seeding; with `batch_size` set, pair order is shuffled per epoch by a
/// seeded generator, so runs are still reproducible. Each trace entry holds
/// the epoch's mean loss and gradient norm measured before its updates.
pub fn train(
    pairs: &[PreferencePair],
    theta0: &PolicyTable,
    reference: &ReferencePolicy,
    cfg: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyPairSet);
    }
    cfg.validate()?;

    let mut policy = theta0.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    for epoch in 0..cfg.epochs {
        let (epoch_gradient, mean_loss) = loss_gradient(pairs, &policy, reference, cfg)?;
        if !mean_loss.is_finite() {
            return Err(TrainError::Divergence { epoch, loss: mean_loss });
        }
        trace.push(TraceEntry { epoch, mean_loss, grad_norm: epoch_gradient.norm() });

        match cfg.batch_size {
            None => policy.apply_step(&epoch_gradient, cfg.learning_rate),
            Some(batch_size) => {
                order.shuffle(&mut rng);
                for batch in order.chunks(batch_size) {
                    let batch_pairs: Vec<PreferencePair> =
                        batch.iter().map(|&i| pairs[i].clone()).collect();
                    let (gradient, loss) = loss_gradient(&batch_pairs, &policy, reference, cfg)?;
                    if !loss.is_finite() {
                        return Err(TrainError::Divergence { epoch, loss });
                    }
                    policy.apply_step(&gradient, cfg.learning_rate);
                }
            }
        }
    }
    Ok(TrainResult { policy, trace })
}

/// Write the loss trace, one record per line.
pub fn dump_trace<W: Write>(trace: &[TraceEntry], mut writer: W) -> io::Result<()> {
    for entry in trace {
        serde_json::to_writer(&mut writer, entry)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Parse a loss trace dump.
pub fn parse_trace<R: BufRead>(reader: R) -> Result<Vec<TraceEntry>, DumpError> {
    let mut trace = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        trace.push(serde_json::from_str(trimmed).map_err(|e| DumpError::Malformed {
            line: idx + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preference::ActionRef;
    use rand::Rng;

    fn pair_with(task: &str, node: usize, chosen: &str, rejected: &str, weight: f64) -> PreferencePair {
        PreferencePair {
            task_id: task.into(),
            node_id: node,
            context: String::new(),
            chosen: ActionRef { action: chosen.into() },
            rejected: ActionRef { action: rejected.into() },
            r_w: weight,
            r_l: 0.0,
            weight,
        }
    }

    fn two_action_setup(weight: f64) -> (Vec<PreferencePair>, PolicyTable, ReferencePolicy) {
        let pairs = vec![pair_with("t", 0, "a1", "a2", weight)];
        let policy = PolicyTable::uniform_from_pairs(&pairs);
        let reference = ReferencePolicy::uniform_like(&policy);
        (pairs, policy, reference)
    }

    #[test]
    fn margin_is_zero_when_policy_equals_reference() {
        let (pairs, mut policy, _) = two_action_setup(1.0);
        let key = StateKey::new("t", 0);
        policy.set_logit(&key, "a1", 0.7).unwrap();
        policy.set_logit(&key, "a2", -1.3).unwrap();
        let reference = ReferencePolicy::copy_of(&policy);
        let delta = logit_margin(&pairs[0], &policy, &reference).unwrap();
        assert_eq!(delta, 0.0);
    }

    #[test]
    fn margin_against_uniform_reference_is_the_logit_difference() {
        let (pairs, mut policy, reference) = two_action_setup(1.0);
        policy.set_logit(&StateKey::new("t", 0), "a1", 1.0).unwrap();
        let delta = logit_margin(&pairs[0], &policy, &reference).unwrap();
        assert!((delta - 1.0).abs() < 1e-12);
    }

    #[test]
    fn swapping_the_pair_negates_the_margin() {
        let (_, mut policy, reference) = two_action_setup(1.0);
        let key = StateKey::new("t", 0);
        policy.set_logit(&key, "a1", 0.8).unwrap();
        policy.set_logit(&key, "a2", -0.4).unwrap();
        let forward = pair_with("t", 0, "a1", "a2", 1.0);
        let swapped = pair_with("t", 0, "a2", "a1", 1.0);
        let d1 = logit_margin(&forward, &policy, &reference).unwrap();
        let d2 = logit_margin(&swapped, &policy, &reference).unwrap();
        assert_eq!(d2, -d1);
    }

    #[test]
    fn loss_at_zero_margin_is_ln_two() {
        let cfg = TrainConfig { beta: 1.0, weighting: Weighting::Unit, ..Default::default() };
        let pair = pair_with("t", 0, "a", "b", 7.0); // weight ignored in unit mode
        assert!((tgpo_loss(&pair, 0.0, &cfg) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn weighted_loss_matches_direct_evaluation() {
        // Independent evaluation: w * (-ln(sigmoid(beta * delta))) computed
        // with the naive formula, safe at this magnitude.
        let cfg = TrainConfig { beta: 0.1, ..Default::default() };
        let pair = pair_with("t", 0, "a", "b", 2.0);
        let direct = 2.0 * -(1.0 / (1.0 + (-0.5f64).exp())).ln();
        assert!((tgpo_loss(&pair, 5.0, &cfg) - direct).abs() < 1e-12);
        assert!((direct - 0.9481539683602134).abs() < 1e-12);
    }

    #[test]
    fn loss_limits_and_extreme_margins_stay_finite() {
        let cfg = TrainConfig { beta: 1.0, weighting: Weighting::Unit, ..Default::default() };
        let pair = pair_with("t", 0, "a", "b", 1.0);
        assert!(tgpo_loss(&pair, 1e6, &cfg) == 0.0);
        let big_negative = tgpo_loss(&pair, -1e4, &cfg);
        assert!(big_negative.is_finite());
        assert!((big_negative - 1e4).abs() < 1e-9); // asymptote w * beta * |delta|
        assert!(tgpo_loss(&pair, -1e8, &cfg).is_finite());
    }

    #[test]
    fn loss_is_positive_and_decreasing_in_delta() {
        let cfg = TrainConfig::default();
        let pair = pair_with("t", 0, "a", "b", 1.5);
        let mut prev = f64::INFINITY;
        for delta in [-5.0, -1.0, 0.0, 1.0, 5.0, 50.0] {
            let loss = tgpo_loss(&pair, delta, &cfg);
            assert!(loss > 0.0);
            assert!(loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn gradient_at_uniform_init_is_half_beta_on_the_pair() {
        let (pairs, policy, reference) = two_action_setup(1.0);
        let cfg = TrainConfig { beta: 1.0, weighting: Weighting::Unit, ..Default::default() };
        let (gradient, loss) = loss_gradient(&pairs, &policy, &reference, &cfg).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        let key = StateKey::new("t", 0);
        // dL/ddelta = -1 * 1 * sigmoid(0) = -0.5, pushed to +chosen/-rejected.
        assert!((gradient.component(&key, 0).unwrap() + 0.5).abs() < 1e-15);
        assert!((gradient.component(&key, 1).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unit_and_dynamic_modes_agree_when_all_weights_are_one() {
        let pairs = vec![
            pair_with("t", 0, "a1", "a2", 1.0),
            pair_with("t", 1, "b2", "b1", 1.0),
        ];
        let policy = PolicyTable::uniform_from_pairs(&pairs);
        let reference = ReferencePolicy::uniform_like(&policy);
        let dynamic = TrainConfig::default();
        let unit = TrainConfig { weighting: Weighting::Unit, ..Default::default() };
        let (g_dyn, l_dyn) = loss_gradient(&pairs, &policy, &reference, &dynamic).unwrap();
        let (g_unit, l_unit) = loss_gradient(&pairs, &policy, &reference, &unit).unwrap();
        assert_eq!(l_dyn, l_unit);
        assert_eq!(g_dyn, g_unit);
    }

    /// Central finite differences over the mean loss, the oracle for the
    /// analytic gradient.
    fn finite_difference(
        pairs: &[PreferencePair],
        policy: &PolicyTable,
        reference: &ReferencePolicy,
        cfg: &TrainConfig,
        key: &StateKey,
        action: &str,
        h: f64,
    ) -> f64 {
        let mean_loss = |p: &PolicyTable| {
            pairs
                .iter()
                .map(|pair| {
                    let delta = logit_margin(pair, p, reference).unwrap();
                    tgpo_loss(pair, delta, cfg)
                })
                .sum::<f64>()
                / pairs.len() as f64
        };
        let base = policy.logit(key, action).unwrap();
        let mut plus = policy.clone();
        plus.set_logit(key, action, base + h).unwrap();
        let mut minus = policy.clone();
        minus.set_logit(key, action, base - h).unwrap();
        (mean_loss(&plus) - mean_loss(&minus)) / (2.0 * h)
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let mut pairs = Vec::new();
            for node in 0..6 {
                let actions = ["a", "b", "c"];
                let chosen = actions[rng.gen_range(0..3)];
                let rejected = loop {
                    let r = actions[rng.gen_range(0..3)];
                    if r != chosen {
                        break r;
                    }
                };
                pairs.push(pair_with("t", node, chosen, rejected, rng.gen_range(0.1..3.0)));
            }
            let mut policy = PolicyTable::uniform_from_pairs(&pairs);
            let keys: Vec<(StateKey, String)> = policy
                .iter()
                .map(|(k, a, _)| (k.clone(), a.to_owned()))
                .collect();
            for (key, action) in &keys {
                policy.set_logit(key, action, rng.gen_range(-2.0..2.0)).unwrap();
            }
            let reference = ReferencePolicy::uniform_like(&policy);
            let cfg = TrainConfig::default();
            let (gradient, _) = loss_gradient(&pairs, &policy, &reference, &cfg).unwrap();
            for (key, action) in &keys {
                let index = policy.actions(key).unwrap().iter().position(|a| a == action).unwrap();
                let analytic = gradient.component(key, index).unwrap();
                let numeric =
                    finite_difference(&pairs, &policy, &reference, &cfg, key, action, 1e-6);
                let scale = analytic.abs().max(numeric.abs());
                assert!(
                    (analytic - numeric).abs() <= 1e-5 * scale.max(1e-8),
                    "grad mismatch at {key:?}/{action}: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn satisfied_pairs_barely_move_the_policy() {
        let (pairs, mut policy, _) = two_action_setup(1.0);
        let key = StateKey::new("t", 0);
        policy.set_logit(&key, "a1", 30.0).unwrap();
        policy.set_logit(&key, "a2", -30.0).unwrap();
        let reference = ReferencePolicy::uniform_like(&policy);
        let cfg = TrainConfig { beta: 1.0, epochs: 3, ..Default::default() };
        let result = train(&pairs, &policy, &reference, &cfg).unwrap();
        assert!(result.trace[0].mean_loss < 1e-12);
        let moved = (result.policy.logit(&key, "a1").unwrap() - 30.0).abs();
        assert!(moved < 1e-10);
    }

    #[test]
    fn dynamic_weighting_moves_high_weight_blocks_further() {
        let pairs = vec![
            pair_with("t", 0, "a1", "a2", 2.0),
            pair_with("t", 1, "b1", "b2", 1.0),
        ];
        let policy = PolicyTable::uniform_from_pairs(&pairs);
        let reference = ReferencePolicy::uniform_like(&policy);
        let dynamic = TrainConfig::default();
        let unit = TrainConfig { weighting: Weighting::Unit, ..Default::default() };
        let (g_dyn, _) = loss_gradient(&pairs, &policy, &reference, &dynamic).unwrap();
        let (g_unit, _) = loss_gradient(&pairs, &policy, &reference, &unit).unwrap();
        let high = StateKey::new("t", 0);
        let low = StateKey::new("t", 1);
        assert!(g_dyn.block_norm(&high) > g_unit.block_norm(&high));
        assert_eq!(g_dyn.block_norm(&low), g_unit.block_norm(&low));
        assert!(g_dyn.block_norm(&high) > 1.999 * g_dyn.block_norm(&low));
    }

    #[test]
    fn training_is_deterministic_and_loss_non_increasing() {
        let pairs = vec![
            pair_with("t", 0, "a1", "a2", 2.0),
            pair_with("t", 1, "b2", "b1", 1.3),
            pair_with("u", 0, "c1", "c3", 0.4),
        ];
        let policy = PolicyTable::uniform_from_pairs(&pairs);
        let reference = ReferencePolicy::uniform_like(&policy);
        let cfg = TrainConfig { epochs: 20, ..Default::default() };
        let once = train(&pairs, &policy, &reference, &cfg).unwrap();
        let twice = train(&pairs, &policy, &reference, &cfg).unwrap();
        assert_eq!(once.policy, twice.policy);
        assert_eq!(once.trace, twice.trace);
        for window in once.trace.windows(2) {
            assert!(window[1].mean_loss <= window[0].mean_loss);
        }
        // Normalization after every update.
        for key in [StateKey::new("t", 0), StateKey::new("t", 1), StateKey::new("u", 0)] {
            let sum: f64 = once.policy.probs(&key).unwrap().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn minibatch_training_is_seed_reproducible() {
        let pairs: Vec<PreferencePair> = (0..7)
            .map(|i| pair_with("t", i, "x", "y", 1.0 + i as f64 * 0.1))
            .collect();
        let policy = PolicyTable::uniform_from_pairs(&pairs);
        let reference = ReferencePolicy::uniform_like(&policy);
        let cfg = TrainConfig { epochs: 4, batch_size: Some(2), seed: 9, ..Default::default() };
        let once = train(&pairs, &policy, &reference, &cfg).unwrap();
        let twice = train(&pairs, &policy, &reference, &cfg).unwrap();
        assert_eq!(once.policy, twice.policy);

        let other_seed = TrainConfig { seed: 10, ..cfg };
        let shifted = train(&pairs, &policy, &reference, &other_seed).unwrap();
        assert_ne!(once.policy, shifted.policy);
    }

    #[test]
    fn absurd_learning_rate_reports_divergence() {
        // beta * sigmoid = 15 > 1, so the first step overflows the logits to
        // infinity and the next epoch's loss is non-finite.
        let (pairs, policy, reference) = two_action_setup(1.0);
        let cfg = TrainConfig {
            learning_rate: f64::MAX,
            beta: 30.0,
            epochs: 5,
            ..Default::default()
        };
        let err = train(&pairs, &policy, &reference, &cfg).unwrap_err();
        assert!(matches!(err, TrainError::Divergence { .. }), "{err}");
    }

    #[test]
    fn empty_pair_list_is_rejected() {
        let (_, policy, reference) = two_action_setup(1.0);
        let err = train(&[], &policy, &reference, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::EmptyPairSet));
    }

    #[test]
    fn trace_dump_round_trips() {
        let trace = vec![
            TraceEntry { epoch: 0, mean_loss: 0.7, grad_norm: 0.05 },
            TraceEntry { epoch: 1, mean_loss: 0.64, grad_norm: 0.04 },
        ];
        let mut buf = Vec::new();
        dump_trace(&trace, &mut buf).unwrap();
        let parsed = parse_trace(buf.as_slice()).unwrap();
        assert_eq!(parsed, trace);
    }
}
