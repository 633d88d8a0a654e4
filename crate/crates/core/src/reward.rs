//! Step-level process rewards over a merged trajectory graph.
//!
//! Every action traversal gets four components:
//!
//! * subgoal — shortest-path progress `L_min / (steps taken + min steps to
//!   goal)`, evaluated at the destination state, 1.0 exactly on optimal paths;
//! * redundancy — a fixed penalty when the destination node was already
//!   visited earlier in the same trajectory;
//! * accuracy — a bonus when the action actually changed the interface;
//! * format — a bonus when the emitted action string is syntactically valid.
//!
//! The total is `accuracy + format + redundancy + alpha * subgoal`. Edges
//! additionally carry one canonical breakdown aggregated over their
//! traversals.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    edge_from_wire, edge_to_wire, node_from_wire, node_to_wire, DistanceIndex, DumpError, EdgeWire,
    NodeId, NodeWire, TaskWire, TrajectoryGraph,
};
use crate::trajectory::{Action, ActionKind, StateObservation, Step, TaskSpec, Trajectory};
use crate::urlnorm::{normalize_url, UrlNormConfig};

/// How an edge's canonical breakdown is derived from its traversals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Component-wise arithmetic mean over traversals.
    #[default]
    Mean,
    /// Like `Mean`, but the subgoal term is recomputed at the minimum
    /// observed destination prefix length.
    MinPrefix,
}

impl std::str::FromStr for Aggregation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "min_prefix" => Ok(Aggregation::MinPrefix),
            other => Err(format!("unknown aggregation {other:?} (expected mean|min_prefix)")),
        }
    }
}

/// Reward shaping parameters. The defaults are the reference setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Subgoal weight; must be positive.
    pub alpha: f64,
    pub redundancy_penalty: f64,
    pub accuracy_bonus: f64,
    pub format_bonus: f64,
    /// Subgoal value used when no goal is reachable from the node.
    pub unreachable_subgoal: f64,
    pub reward_aggregation: Aggregation,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: 3.0,
            redundancy_penalty: -1.0,
            accuracy_bonus: 1.0,
            format_bonus: 1.0,
            unreachable_subgoal: 0.0,
            reward_aggregation: Aggregation::Mean,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.alpha > 0.0) {
            return Err(RewardError::InvalidConfig(format!(
                "alpha must be positive (got {})",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// The four components and their alpha-combined total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub subgoal: f64,
    pub redundancy: f64,
    pub accuracy: f64,
    pub format: f64,
    pub total: f64,
}

impl RewardBreakdown {
    fn from_components(
        subgoal: f64,
        redundancy: f64,
        accuracy: f64,
        format: f64,
        alpha: f64,
    ) -> RewardBreakdown {
        RewardBreakdown {
            subgoal,
            redundancy,
            accuracy,
            format,
            total: accuracy + format + redundancy + alpha * subgoal,
        }
    }
}

/// Verdict of an effect verifier for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub effective: bool,
    pub format_valid: bool,
}

#[derive(Debug, Error)]
#[error("verifier failure: {0}")]
pub struct VerifierError(pub String);

/// Judges whether an action modified the interface and whether its emitted
/// string is well-formed. The reference implementation is [`RuleVerifier`];
/// a model-backed verifier can plug in behind the same contract.
pub trait EffectVerifier {
    fn judge(
        &self,
        before: &StateObservation,
        action: &Action,
        after: &StateObservation,
    ) -> Result<Verdict, VerifierError>;
}

/// Rule-based reference verifier.
///
/// Effective iff the observation changed: the normalized URL differs, or a
/// digest that is present on both sides differs. Format-valid iff `raw`
/// parses as `name` or `name(args)` with the name matching the structured
/// kind and the kind's required arguments present: click/navigate need a
/// target, type needs a target and a value.
#[derive(Debug, Clone, Default)]
pub struct RuleVerifier {
    pub url_cfg: UrlNormConfig,
}

impl RuleVerifier {
    pub fn new(url_cfg: UrlNormConfig) -> Self {
        RuleVerifier { url_cfg }
    }
}

impl EffectVerifier for RuleVerifier {
    fn judge(
        &self,
        before: &StateObservation,
        action: &Action,
        after: &StateObservation,
    ) -> Result<Verdict, VerifierError> {
        let url_before = normalize_url(&before.url, &self.url_cfg)
            .map_err(|e| VerifierError(e.to_string()))?;
        let url_after = normalize_url(&after.url, &self.url_cfg)
            .map_err(|e| VerifierError(e.to_string()))?;
        let digest_changed = |a: &Option<String>, b: &Option<String>| {
            matches!((a, b), (Some(x), Some(y)) if x != y)
        };
        let effective = url_before != url_after
            || digest_changed(&before.screenshot_hash, &after.screenshot_hash)
            || digest_changed(&before.dom_digest, &after.dom_digest);
        Ok(Verdict { effective, format_valid: raw_action_is_valid(action) })
    }
}

/// Syntax check for the verbatim action string, against the structured kind.
pub fn raw_action_is_valid(action: &Action) -> bool {
    let raw = action.raw.trim();
    let (name, args) = match raw.find('(') {
        None => (raw, Vec::new()),
        Some(open) => {
            let Some(rest) = raw[open + 1..].strip_suffix(')') else {
                return false;
            };
            let name = raw[..open].trim_end();
            // First comma splits target from payload; payloads may contain commas.
            let args: Vec<&str> = match rest.split_once(',') {
                None if rest.trim().is_empty() => Vec::new(),
                None => vec![rest.trim()],
                Some((first, second)) => vec![first.trim(), second.trim()],
            };
            (name, args)
        }
    };
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return false;
    }
    if action.kind != ActionKind::Other && name != action.kind.as_str() {
        return false;
    }
    match action.kind {
        ActionKind::Click | ActionKind::Navigate => args.first().is_some_and(|a| !a.is_empty()),
        ActionKind::Type => args.len() == 2 && args.iter().all(|a| !a.is_empty()),
        ActionKind::Scroll | ActionKind::Stop | ActionKind::Other => true,
    }
}

/// Accuracy and format rewards for one step. Pre-annotated flags take
/// precedence per flag; anything missing is judged by the verifier, and a
/// verifier failure surfaces as an error rather than a silent zero.
pub fn accuracy_and_format(
    step: &Step,
    before: &StateObservation,
    after: &StateObservation,
    verifier: &dyn EffectVerifier,
    cfg: &RewardConfig,
) -> Result<(f64, f64), VerifierError> {
    let (effective, format_valid) = match (step.effective, step.format_valid) {
        (Some(e), Some(f)) => (e, f),
        (annotated_e, annotated_f) => {
            let verdict = verifier.judge(before, &step.action, after)?;
            (
                annotated_e.unwrap_or(verdict.effective),
                annotated_f.unwrap_or(verdict.format_valid),
            )
        }
    };
    Ok((
        if effective { cfg.accuracy_bonus } else { 0.0 },
        if format_valid { cfg.format_bonus } else { 0.0 },
    ))
}

/// Fill in any missing `effective`/`format_valid` annotations using the
/// verifier. Existing annotations are never overwritten.
pub fn resolve_annotations(
    trajectories: &[Trajectory],
    verifier: &dyn EffectVerifier,
) -> Result<Vec<Trajectory>, VerifierError> {
    trajectories
        .iter()
        .map(|trajectory| {
            let mut resolved = trajectory.clone();
            let states: Vec<StateObservation> = trajectory.states().cloned().collect();
            for (t, step) in resolved.steps.iter_mut().enumerate() {
                if step.effective.is_some() && step.format_valid.is_some() {
                    continue;
                }
                let verdict = verifier.judge(&states[t], &step.action, &states[t + 1])?;
                step.effective = step.effective.or(Some(verdict.effective));
                step.format_valid = step.format_valid.or(Some(verdict.format_valid));
            }
            Ok(resolved)
        })
        .collect()
}

/// Shortest-path progress of an occurrence that reached `node` after
/// `prefix_length` steps: `L_min / (prefix_length + dist_to_goal)`.
///
/// Falls back to `cfg.unreachable_subgoal` when the node cannot reach a goal
/// (or the task has none). Clamped to [0, 1]: consistent graph distances
/// never exceed the bound, so the clamp only guards inconsistent annotated
/// inputs.
pub fn subgoal_reward(
    prefix_length: usize,
    node: NodeId,
    index: &DistanceIndex,
    cfg: &RewardConfig,
) -> f64 {
    let (Some(l_min), Some(to_goal)) = (index.l_min, index.dist_to_goal.get(node).copied().flatten())
    else {
        return cfg.unreachable_subgoal;
    };
    let denominator = prefix_length as f64 + f64::from(to_goal);
    if denominator == 0.0 {
        // Zero steps taken and already at a goal: maximal progress.
        return 1.0;
    }
    (f64::from(l_min) / denominator).clamp(0.0, 1.0)
}

/// Redundancy penalty for step `step_index` of a trajectory walk: penalized
/// iff the step's destination node already appears earlier in the walk.
pub fn redundancy_reward(walk: &[NodeId], step_index: usize, cfg: &RewardConfig) -> f64 {
    let destination = step_index + 1;
    if destination < walk.len() && walk[..destination].contains(&walk[destination]) {
        cfg.redundancy_penalty
    } else {
        0.0
    }
}

/// A graph whose traversals and edges carry reward breakdowns.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredGraph {
    pub graph: TrajectoryGraph,
    pub distances: DistanceIndex,
    /// Canonical breakdown per edge, parallel to `graph.edges`.
    pub edge_rewards: Vec<RewardBreakdown>,
    /// Per-traversal breakdowns, parallel to each edge's occurrence list.
    pub occurrence_rewards: Vec<Vec<RewardBreakdown>>,
    pub config: RewardConfig,
}

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
    #[error("inconsistent graph: {0}")]
    Inconsistent(String),
}

/// Score every traversal and aggregate one canonical breakdown per edge.
///
/// Deterministic: the same graph, distances, and config always produce a
/// byte-identical scored dump.
pub fn score_graph(
    graph: &TrajectoryGraph,
    index: &DistanceIndex,
    cfg: &RewardConfig,
) -> Result<ScoredGraph, RewardError> {
    cfg.validate()?;
    if index.dist_to_goal.len() != graph.nodes.len() {
        return Err(RewardError::Inconsistent(
            "distance index does not match graph node count".into(),
        ));
    }
    let walks = graph.walks();

    let mut edge_rewards = Vec::with_capacity(graph.edges.len());
    let mut occurrence_rewards = Vec::with_capacity(graph.edges.len());
    for edge in &graph.edges {
        let mut per_occurrence = Vec::with_capacity(edge.occurrences.len());
        for occ in &edge.occurrences {
            let walk = walks.get(&occ.trajectory_id).ok_or_else(|| {
                RewardError::Inconsistent(format!(
                    "edge occurrence references unknown trajectory {:?}",
                    occ.trajectory_id
                ))
            })?;
            if walk.get(occ.step_index + 1) != Some(&edge.to_node) {
                return Err(RewardError::Inconsistent(format!(
                    "walk of {:?} disagrees with edge occurrence at step {}",
                    occ.trajectory_id, occ.step_index
                )));
            }
            let destination_prefix = occ.step_index + 1;
            per_occurrence.push(RewardBreakdown::from_components(
                subgoal_reward(destination_prefix, edge.to_node, index, cfg),
                redundancy_reward(walk, occ.step_index, cfg),
                if occ.effective { cfg.accuracy_bonus } else { 0.0 },
                if occ.format_valid { cfg.format_bonus } else { 0.0 },
                cfg.alpha,
            ));
        }

        let n = per_occurrence.len() as f64;
        let mean = |f: fn(&RewardBreakdown) -> f64, items: &[RewardBreakdown]| {
            items.iter().map(f).sum::<f64>() / n
        };
        let subgoal = match cfg.reward_aggregation {
            Aggregation::Mean => mean(|r| r.subgoal, &per_occurrence),
            Aggregation::MinPrefix => {
                let min_prefix = edge
                    .occurrences
                    .iter()
                    .map(|o| o.step_index + 1)
                    .min()
                    .expect("edges have at least one occurrence");
                subgoal_reward(min_prefix, edge.to_node, index, cfg)
            }
        };
        edge_rewards.push(RewardBreakdown::from_components(
            subgoal,
            mean(|r| r.redundancy, &per_occurrence),
            mean(|r| r.accuracy, &per_occurrence),
            mean(|r| r.format, &per_occurrence),
            cfg.alpha,
        ));
        occurrence_rewards.push(per_occurrence);
    }

    Ok(ScoredGraph {
        graph: graph.clone(),
        distances: index.clone(),
        edge_rewards,
        occurrence_rewards,
        config: cfg.clone(),
    })
}

// --- scored dump -----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ScoredRecord {
    Task {
        #[serde(flatten)]
        base: TaskWire,
        l_min: Option<u32>,
        config: RewardConfig,
    },
    Node {
        #[serde(flatten)]
        base: NodeWire,
        dist_from_root: Option<u32>,
        dist_to_goal: Option<u32>,
    },
    Edge {
        #[serde(flatten)]
        base: EdgeWire,
        reward: RewardBreakdown,
        occurrence_rewards: Vec<RewardBreakdown>,
    },
}

impl ScoredGraph {
    /// Canonical dump: the graph dump's record shapes extended with distance
    /// and reward fields.
    pub fn dump<W: Write>(&self, mut writer: W) -> io::Result<()> {
        let task_id = &self.graph.task.task_id;
        let task = ScoredRecord::Task {
            base: TaskWire {
                task_id: task_id.clone(),
                instruction: self.graph.task.instruction.clone(),
                root_id: self.graph.root_id,
                goal_ids: self.graph.goal_ids.clone(),
            },
            l_min: self.distances.l_min,
            config: self.config.clone(),
        };
        serde_json::to_writer(&mut writer, &task)?;
        writer.write_all(b"\n")?;
        for node in &self.graph.nodes {
            let record = ScoredRecord::Node {
                base: node_to_wire(task_id, node),
                dist_from_root: self.distances.dist_from_root[node.node_id],
                dist_to_goal: self.distances.dist_to_goal[node.node_id],
            };
            serde_json::to_writer(&mut writer, &record)?;
            writer.write_all(b"\n")?;
        }
        for (i, edge) in self.graph.edges.iter().enumerate() {
            let record = ScoredRecord::Edge {
                base: edge_to_wire(task_id, edge),
                reward: self.edge_rewards[i],
                occurrence_rewards: self.occurrence_rewards[i].clone(),
            };
            serde_json::to_writer(&mut writer, &record)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn dump_string(&self) -> String {
        let mut buf = Vec::new();
        self.dump(&mut buf).expect("writing to Vec cannot fail");
        String::from_utf8(buf).expect("dump is UTF-8")
    }
}

/// Dump several scored graphs in canonical task order.
pub fn dump_scored_graphs<W: Write>(scored: &[ScoredGraph], mut writer: W) -> io::Result<()> {
    let mut ordered: Vec<&ScoredGraph> = scored.iter().collect();
    ordered.sort_by(|a, b| a.graph.task.task_id.cmp(&b.graph.task.task_id));
    for graph in ordered {
        graph.dump(&mut writer)?;
    }
    Ok(())
}

/// Parse a scored dump back, in dump order.
pub fn parse_scored_dump<R: BufRead>(reader: R) -> Result<Vec<ScoredGraph>, DumpError> {
    let malformed = |line: usize, reason: &str| DumpError::Malformed {
        line,
        reason: reason.to_owned(),
    };
    let mut scored: Vec<ScoredGraph> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record: ScoredRecord = serde_json::from_str(trimmed)
            .map_err(|e| DumpError::Malformed { line: line_no, reason: e.to_string() })?;
        match record {
            ScoredRecord::Task { base, l_min, config } => scored.push(ScoredGraph {
                graph: TrajectoryGraph {
                    task: TaskSpec { task_id: base.task_id, instruction: base.instruction },
                    nodes: Vec::new(),
                    edges: Vec::new(),
                    root_id: base.root_id,
                    goal_ids: base.goal_ids,
                },
                distances: DistanceIndex {
                    dist_from_root: Vec::new(),
                    dist_to_goal: Vec::new(),
                    l_min,
                },
                edge_rewards: Vec::new(),
                occurrence_rewards: Vec::new(),
                config,
            }),
            ScoredRecord::Node { base, dist_from_root, dist_to_goal } => {
                let entry = scored
                    .last_mut()
                    .filter(|s| s.graph.task.task_id == base.task_id)
                    .ok_or_else(|| malformed(line_no, "node before its task record"))?;
                if base.node_id != entry.graph.nodes.len() {
                    return Err(malformed(line_no, "node ids must be dense and in order"));
                }
                entry.graph.nodes.push(node_from_wire(base));
                entry.distances.dist_from_root.push(dist_from_root);
                entry.distances.dist_to_goal.push(dist_to_goal);
            }
            ScoredRecord::Edge { base, reward, occurrence_rewards } => {
                let entry = scored
                    .last_mut()
                    .filter(|s| s.graph.task.task_id == base.task_id)
                    .ok_or_else(|| malformed(line_no, "edge before its task record"))?;
                let edge = edge_from_wire(base, line_no)?;
                if occurrence_rewards.len() != edge.occurrences.len() {
                    return Err(malformed(line_no, "occurrence_rewards length mismatch"));
                }
                entry.graph.edges.push(edge);
                entry.edge_rewards.push(reward);
                entry.occurrence_rewards.push(occurrence_rewards);
            }
        }
    }
    Ok(scored)
}
