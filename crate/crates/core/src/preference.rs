//! Ranked preference pairs with dynamic weights, and the dataset metrics
//! (label conflicts, redundant steps) computed over merged graphs.
//!
//! At every node whose outgoing actions carry different canonical rewards,
//! higher-reward actions are preferred over lower-reward ones. Each pair is
//! weighted by `|r_w - r_l| / sigma(R_s)`, the reward gap standardized by the
//! population spread of all action rewards at that node, so weights compare
//! across nodes.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::graph::{DumpError, NodeId, TrajectoryGraph};
use crate::reward::ScoredGraph;

/// Canonical outgoing-action rewards at one node, plus their population spread.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRewardStats {
    pub node_id: NodeId,
    /// `(action_key, canonical total reward)`, sorted by action key.
    pub action_rewards: Vec<(String, f64)>,
    /// Population standard deviation over the listed rewards; zero iff all equal.
    pub sigma: f64,
}

/// Population standard deviation. All-equal inputs return exactly zero, and
/// the two-value case uses the closed form `|a - b| / 2`, which is exact
/// where the generic two-pass formula would round.
pub fn population_std(values: &[f64]) -> f64 {
    match values {
        [] | [_] => 0.0,
        _ if values.windows(2).all(|w| w[0] == w[1]) => 0.0,
        [a, b] => (a - b).abs() / 2.0,
        _ => {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
        }
    }
}

/// Per-node reward statistics for every node with outgoing edges.
///
/// When the same action key appears on several outgoing edges (logged
/// transitions disagreed on the destination), its canonical reward is the
/// traversal-count-weighted mean of those edges' totals.
pub fn node_reward_stats(scored: &ScoredGraph) -> Vec<NodeRewardStats> {
    let mut per_node: BTreeMap<NodeId, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    for (edge, reward) in scored.graph.edges.iter().zip(&scored.edge_rewards) {
        let (weighted_sum, count) = per_node
            .entry(edge.from_node)
            .or_default()
            .entry(edge.action_key.clone())
            .or_insert((0.0, 0));
        *weighted_sum += reward.total * edge.occurrences.len() as f64;
        *count += edge.occurrences.len();
    }
    per_node
        .into_iter()
        .map(|(node_id, actions)| {
            let action_rewards: Vec<(String, f64)> = actions
                .into_iter()
                .map(|(key, (sum, count))| (key, sum / count as f64))
                .collect();
            let rewards: Vec<f64> = action_rewards.iter().map(|(_, r)| *r).collect();
            NodeRewardStats { node_id, action_rewards, sigma: population_std(&rewards) }
        })
        .collect()
}

/// Which (chosen, rejected) combinations are emitted at a branch node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairingPolicy {
    /// Every ordered pair with strictly greater reward.
    #[default]
    AllStrictPairs,
    /// The best action against each strictly worse one.
    BestVsRest,
}

impl std::str::FromStr for PairingPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" | "all_strict_pairs" => Ok(PairingPolicy::AllStrictPairs),
            "best" | "best_vs_rest" => Ok(PairingPolicy::BestVsRest),
            other => Err(format!("unknown pairing policy {other:?} (expected all|best)")),
        }
    }
}

/// Reference to one side of a pair, shaped for the export format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRef {
    pub action: String,
}

/// A ranked preference pair ready for objective training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub task_id: String,
    pub node_id: NodeId,
    /// Instruction plus a fingerprint summary, for downstream prompting.
    pub context: String,
    pub chosen: ActionRef,
    pub rejected: ActionRef,
    pub r_w: f64,
    pub r_l: f64,
    /// Dynamic weight `|r_w - r_l| / sigma(R_s)`; strictly positive and finite.
    pub weight: f64,
}

/// Extract preference pairs from a scored graph, canonically ordered by
/// `(node_id, chosen action, rejected action)`. Nodes whose actions all share
/// one reward emit nothing.
pub fn extract_pairs(scored: &ScoredGraph, policy: PairingPolicy) -> Vec<PreferencePair> {
    let mut pairs = Vec::new();
    for stats in node_reward_stats(scored) {
        if stats.action_rewards.len() < 2 || stats.sigma == 0.0 {
            continue;
        }
        let node = &scored.graph.nodes[stats.node_id];
        let mut context = format!(
            "{} | url={}",
            scored.graph.task.instruction, node.fingerprint.normalized_url
        );
        if !node.fingerprint.effective_prefix.is_empty() {
            context.push_str(" | after=");
            context.push_str(&node.fingerprint.effective_prefix.join(";"));
        }

        let mut emit = |chosen: &(String, f64), rejected: &(String, f64)| {
            pairs.push(PreferencePair {
                task_id: scored.graph.task.task_id.clone(),
                node_id: stats.node_id,
                context: context.clone(),
                chosen: ActionRef { action: chosen.0.clone() },
                rejected: ActionRef { action: rejected.0.clone() },
                r_w: chosen.1,
                r_l: rejected.1,
                weight: (chosen.1 - rejected.1) / stats.sigma,
            });
        };
        match policy {
            PairingPolicy::AllStrictPairs => {
                for chosen in &stats.action_rewards {
                    for rejected in &stats.action_rewards {
                        if chosen.1 > rejected.1 {
                            emit(chosen, rejected);
                        }
                    }
                }
            }
            PairingPolicy::BestVsRest => {
                // First strict maximum, so reward ties resolve to the
                // lexicographically smallest action key.
                let best = stats
                    .action_rewards
                    .iter()
                    .reduce(|best, cur| if cur.1 > best.1 { cur } else { best })
                    .expect("non-empty action set");
                for rejected in &stats.action_rewards {
                    if best.1 > rejected.1 {
                        emit(best, rejected);
                    }
                }
            }
        }
    }
    pairs
}

/// Conflict counts over keyed `(node, action)` edges of one task graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConflictStats {
    /// Distinct `(node, action_key)` groups with at least one traversal.
    pub keyed_edges: usize,
    /// Groups traversed by both successful and failed trajectories.
    pub conflicting_keyed_edges: usize,
    /// All edge traversals.
    pub occurrences: usize,
    /// Traversals lying on conflicting groups.
    pub conflicting_occurrences: usize,
}

impl ConflictStats {
    /// Percentage of traversals on conflicting `(node, action)` groups.
    pub fn occurrence_percentage(&self) -> f64 {
        percentage(self.conflicting_occurrences, self.occurrences)
    }

    /// Percentage of keyed groups that conflict.
    pub fn keyed_percentage(&self) -> f64 {
        percentage(self.conflicting_keyed_edges, self.keyed_edges)
    }

    fn add(&mut self, other: &ConflictStats) {
        self.keyed_edges += other.keyed_edges;
        self.conflicting_keyed_edges += other.conflicting_keyed_edges;
        self.occurrences += other.occurrences;
        self.conflicting_occurrences += other.conflicting_occurrences;
    }
}

fn percentage(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

/// Conflicts of one task, with the offending `(node, action)` groups listed.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConflicts {
    pub task_id: String,
    pub stats: ConflictStats,
    pub conflicting_keys: Vec<(NodeId, String)>,
}

/// Conflict report over a whole corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ConflictReport {
    pub per_task: Vec<TaskConflicts>,
    pub aggregate: ConflictStats,
}

/// Label conflicts of one task graph. A keyed `(node, action)` group is
/// conflicting iff its traversals carry both outcome labels, i.e. raw
/// trajectory-level labeling would grade the identical decision both ways.
pub fn label_conflicts(graph: &TrajectoryGraph) -> TaskConflicts {
    let mut groups: BTreeMap<(NodeId, &str), (bool, bool, usize)> = BTreeMap::new();
    for edge in &graph.edges {
        let entry = groups.entry((edge.from_node, edge.action_key.as_str())).or_default();
        entry.0 |= edge.label_set.contains(&false);
        entry.1 |= edge.label_set.contains(&true);
        entry.2 += edge.occurrences.len();
    }
    let mut stats = ConflictStats::default();
    let mut conflicting_keys = Vec::new();
    for ((node, key), (has_failure, has_success, occurrences)) in groups {
        stats.keyed_edges += 1;
        stats.occurrences += occurrences;
        if has_failure && has_success {
            stats.conflicting_keyed_edges += 1;
            stats.conflicting_occurrences += occurrences;
            conflicting_keys.push((node, key.to_owned()));
        }
    }
    TaskConflicts { task_id: graph.task.task_id.clone(), stats, conflicting_keys }
}

/// Aggregate conflicts across task graphs, in canonical task order.
pub fn conflict_report(graphs: &[TrajectoryGraph]) -> ConflictReport {
    let mut per_task: Vec<TaskConflicts> = graphs.iter().map(label_conflicts).collect();
    per_task.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    let mut aggregate = ConflictStats::default();
    for task in &per_task {
        aggregate.add(&task.stats);
    }
    ConflictReport { per_task, aggregate }
}

/// One trajectory's replay through its graph, with per-step effectiveness.
#[derive(Debug, Clone, PartialEq)]
pub struct Walk {
    pub trajectory_id: String,
    pub label: bool,
    pub nodes: Vec<NodeId>,
    pub step_effective: Vec<bool>,
}

impl Walk {
    pub fn step_count(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }

    /// Steps that are redundant: the destination node was already visited in
    /// this walk, or the action was ineffective.
    pub fn redundant_step_count(&self) -> usize {
        (0..self.step_count())
            .filter(|&t| self.nodes[..=t].contains(&self.nodes[t + 1]) || !self.step_effective[t])
            .count()
    }
}

/// Reconstruct every trajectory's walk (with effectiveness flags) from the
/// graph's occurrence records, sorted by trajectory id.
pub fn graph_walks(graph: &TrajectoryGraph) -> Vec<Walk> {
    let mut effective: BTreeMap<(&str, usize), bool> = BTreeMap::new();
    let mut labels: BTreeMap<&str, bool> = BTreeMap::new();
    for edge in &graph.edges {
        for occ in &edge.occurrences {
            effective.insert((occ.trajectory_id.as_str(), occ.step_index), occ.effective);
            labels.insert(occ.trajectory_id.as_str(), occ.label);
        }
    }
    graph
        .walks()
        .into_iter()
        .map(|(trajectory_id, nodes)| {
            let step_effective = (0..nodes.len().saturating_sub(1))
                .map(|t| effective.get(&(trajectory_id.as_str(), t)).copied().unwrap_or(true))
                .collect();
            let label = labels.get(trajectory_id.as_str()).copied().unwrap_or(false);
            Walk { trajectory_id, label, nodes, step_effective }
        })
        .collect()
}

/// Dataset execution-efficiency metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RedundancyMetrics {
    /// Mean trajectory length in steps.
    pub avg_steps: f64,
    /// Mean per-trajectory count of redundant (revisit or ineffective) steps.
    pub redundant_steps: f64,
}

pub fn redundancy_metrics(walks: &[Walk]) -> RedundancyMetrics {
    if walks.is_empty() {
        return RedundancyMetrics { avg_steps: 0.0, redundant_steps: 0.0 };
    }
    let n = walks.len() as f64;
    RedundancyMetrics {
        avg_steps: walks.iter().map(|w| w.step_count() as f64).sum::<f64>() / n,
        redundant_steps: walks.iter().map(|w| w.redundant_step_count() as f64).sum::<f64>() / n,
    }
}

// --- pair export -----------------------------------------------------------

/// Write pairs in the export format, one record per line.
pub fn emit_pairs<W: Write>(pairs: &[PreferencePair], mut writer: W) -> io::Result<()> {
    for pair in pairs {
        serde_json::to_writer(&mut writer, pair)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn emit_pairs_string(pairs: &[PreferencePair]) -> String {
    let mut buf = Vec::new();
    emit_pairs(pairs, &mut buf).expect("writing to Vec cannot fail");
    String::from_utf8(buf).expect("pair export is UTF-8")
}

/// Parse a pair export, validating the pair invariants.
pub fn parse_pairs<R: BufRead>(reader: R) -> Result<Vec<PreferencePair>, DumpError> {
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let pair: PreferencePair = serde_json::from_str(trimmed)
            .map_err(|e| DumpError::Malformed { line: line_no, reason: e.to_string() })?;
        if !(pair.r_w > pair.r_l) {
            return Err(DumpError::Malformed {
                line: line_no,
                reason: format!("pair must satisfy r_w > r_l (got {} vs {})", pair.r_w, pair.r_l),
            });
        }
        if !(pair.weight > 0.0 && pair.weight.is_finite()) {
            return Err(DumpError::Malformed {
                line: line_no,
                reason: format!("pair weight must be positive and finite (got {})", pair.weight),
            });
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::StateFingerprint;
    use crate::graph::{
        build_graph, shortest_distances, ActionEdge, EdgeOccurrence, MergedNode,
    };
    use crate::reward::{score_graph, RewardConfig};
    use crate::trajectory::{parse_corpus, ParseMode, TaskSpec};
    use crate::urlnorm::UrlNormConfig;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    const BRANCHING_CHECKOUT: &str =
        include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/branching_checkout.jsonl"));

    fn scored_fixture() -> ScoredGraph {
        let (corpus, _) = parse_corpus(BRANCHING_CHECKOUT.as_bytes(), ParseMode::Strict).unwrap();
        let group = &corpus.groups[0];
        let graph = build_graph(&group.task, &group.trajectories, &UrlNormConfig::default())
            .unwrap();
        let index = shortest_distances(&graph);
        score_graph(&graph, &index, &RewardConfig::default()).unwrap()
    }

    /// Hand-built single-node fan-out: one node with one outgoing edge per
    /// (action, reward); enough structure for pair extraction.
    fn fan_out(rewards: &[(&str, f64)]) -> ScoredGraph {
        let task = TaskSpec { task_id: "fan".into(), instruction: "pick".into() };
        let fp = |i: usize| StateFingerprint {
            normalized_url: format!("https://fan.test/{i}"),
            effective_prefix: Vec::new(),
            screenshot_hash: None,
        };
        let mut nodes = vec![MergedNode {
            node_id: 0,
            fingerprint: fp(0),
            is_root: true,
            is_goal: false,
            occurrences: Vec::new(),
        }];
        let mut edges = Vec::new();
        let mut edge_rewards = Vec::new();
        let mut occurrence_rewards = Vec::new();
        for (i, (key, total)) in rewards.iter().enumerate() {
            nodes.push(MergedNode {
                node_id: i + 1,
                fingerprint: fp(i + 1),
                is_root: false,
                is_goal: false,
                occurrences: Vec::new(),
            });
            edges.push(ActionEdge {
                from_node: 0,
                to_node: i + 1,
                action_key: (*key).to_owned(),
                occurrences: vec![EdgeOccurrence {
                    trajectory_id: format!("t{i}"),
                    step_index: 0,
                    label: true,
                    effective: true,
                    format_valid: true,
                }],
                label_set: BTreeSet::from([true]),
            });
            let breakdown = crate::reward::RewardBreakdown {
                subgoal: 0.0,
                redundancy: 0.0,
                accuracy: 0.0,
                format: 0.0,
                total: *total,
            };
            edge_rewards.push(breakdown);
            occurrence_rewards.push(vec![breakdown]);
        }
        let n = nodes.len();
        ScoredGraph {
            graph: TrajectoryGraph { task, nodes, edges, root_id: 0, goal_ids: vec![] },
            distances: crate::graph::DistanceIndex {
                dist_from_root: vec![Some(0); n],
                dist_to_goal: vec![None; n],
                l_min: None,
            },
            edge_rewards,
            occurrence_rewards,
            config: RewardConfig::default(),
        }
    }

    #[test]
    fn two_action_node_yields_one_pair_with_weight_two() {
        let pairs = extract_pairs(&fan_out(&[("a", 3.0), ("b", 1.0)]), PairingPolicy::default());
        assert_eq!(pairs.len(), 1);
        let pair = &pairs[0];
        assert_eq!((pair.chosen.action.as_str(), pair.rejected.action.as_str()), ("a", "b"));
        assert_eq!((pair.r_w, pair.r_l), (3.0, 1.0));
        // sigma = |3 - 1| / 2 = 1, so w = 2 / 1 = 2.
        assert_eq!(pair.weight, 2.0);
    }

    #[test]
    fn three_action_node_emits_all_strict_pairs_with_population_sigma() {
        let pairs =
            extract_pairs(&fan_out(&[("a", 4.0), ("b", 2.0), ("c", 0.0)]), PairingPolicy::default());
        let combos: Vec<(&str, &str)> = pairs
            .iter()
            .map(|p| (p.chosen.action.as_str(), p.rejected.action.as_str()))
            .collect();
        assert_eq!(combos, vec![("a", "b"), ("a", "c"), ("b", "c")]);

        // Independent scalar computation: mean 2, deviations (2, 0, -2),
        // sigma = sqrt(8/3); w(a, c) = 4 / sigma.
        let sigma = (8.0f64 / 3.0).sqrt();
        assert!((sigma - 1.632993161855452).abs() < 1e-12);
        let w_ac = pairs[1].weight;
        assert!((w_ac - 4.0 / sigma).abs() < 1e-12);
        assert!((w_ac - 2.449489742783178).abs() < 1e-12);
    }

    #[test]
    fn equal_reward_node_emits_nothing() {
        assert!(extract_pairs(&fan_out(&[("a", 2.0), ("b", 2.0)]), PairingPolicy::default())
            .is_empty());
    }

    #[test]
    fn best_vs_rest_pairs_only_the_argmax() {
        let pairs = extract_pairs(
            &fan_out(&[("a", 4.0), ("b", 2.0), ("c", 0.0), ("d", 4.0)]),
            PairingPolicy::BestVsRest,
        );
        let combos: Vec<(&str, &str)> = pairs
            .iter()
            .map(|p| (p.chosen.action.as_str(), p.rejected.action.as_str()))
            .collect();
        // "a" wins the tie with "d" by key order; ties are never paired.
        assert_eq!(combos, vec![("a", "b"), ("a", "c")]);
    }

    #[test]
    fn fixture_yields_exactly_the_branch_pair() {
        let scored = scored_fixture();
        let pairs = extract_pairs(&scored, PairingPolicy::default());
        assert_eq!(pairs.len(), 1);
        let pair = &pairs[0];
        assert_eq!(pair.node_id, 2);
        assert_eq!(pair.chosen.action, "click(#add-first)");
        assert_eq!(pair.rejected.action, "click(#promo-banner)");
        assert_eq!((pair.r_w, pair.r_l), (5.0, 2.0));
        assert_eq!(pair.weight, 2.0);
        assert!(pair.context.contains("url=https://shop.test/results?sort=price"));
    }

    #[test]
    fn fixture_flags_exactly_the_shared_sort_edge() {
        let scored = scored_fixture();
        let conflicts = label_conflicts(&scored.graph);
        assert_eq!(conflicts.conflicting_keys, vec![(1, "click(#sort-price)".to_owned())]);
        assert_eq!(conflicts.stats.keyed_edges, 5);
        assert_eq!(conflicts.stats.occurrences, 6);
        assert_eq!(conflicts.stats.conflicting_occurrences, 2);
        assert!((conflicts.stats.occurrence_percentage() - 100.0 * 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn single_label_corpus_has_zero_conflicts() {
        let (corpus, _) = parse_corpus(BRANCHING_CHECKOUT.as_bytes(), ParseMode::Strict).unwrap();
        let group = &corpus.groups[0];
        let successes: Vec<_> =
            group.trajectories.iter().filter(|t| t.label).cloned().collect();
        let graph = build_graph(&group.task, &successes, &UrlNormConfig::default()).unwrap();
        let conflicts = label_conflicts(&graph);
        assert_eq!(conflicts.stats.conflicting_occurrences, 0);
        assert_eq!(conflicts.stats.occurrence_percentage(), 0.0);
    }

    #[test]
    fn conflict_percentage_counts_occurrences_not_edges() {
        // 4 of 10 traversals lie on the conflicting (node 0, "a") group.
        let task = TaskSpec { task_id: "built".into(), instruction: String::new() };
        let occ = |tid: &str, t: usize, label: bool| EdgeOccurrence {
            trajectory_id: tid.into(),
            step_index: t,
            label,
            effective: true,
            format_valid: true,
        };
        let fp = |i: usize| StateFingerprint {
            normalized_url: format!("https://c.test/{i}"),
            effective_prefix: Vec::new(),
            screenshot_hash: None,
        };
        let node = |i: usize| MergedNode {
            node_id: i,
            fingerprint: fp(i),
            is_root: i == 0,
            is_goal: false,
            occurrences: Vec::new(),
        };
        let graph = TrajectoryGraph {
            task,
            nodes: (0..3).map(node).collect(),
            edges: vec![
                ActionEdge {
                    from_node: 0,
                    to_node: 1,
                    action_key: "a".into(),
                    occurrences: vec![
                        occ("t1", 0, true),
                        occ("t2", 0, false),
                        occ("t3", 0, true),
                        occ("t4", 0, false),
                    ],
                    label_set: BTreeSet::from([false, true]),
                },
                ActionEdge {
                    from_node: 1,
                    to_node: 2,
                    action_key: "b".into(),
                    occurrences: (0..6).map(|i| occ(&format!("s{i}"), 1, true)).collect(),
                    label_set: BTreeSet::from([true]),
                },
            ],
            root_id: 0,
            goal_ids: vec![],
        };
        let conflicts = label_conflicts(&graph);
        assert_eq!(conflicts.stats.occurrences, 10);
        assert_eq!(conflicts.stats.conflicting_occurrences, 4);
        assert_eq!(conflicts.stats.occurrence_percentage(), 40.0);
        assert_eq!(conflicts.stats.keyed_percentage(), 50.0);
    }

    #[test]
    fn conflicting_group_split_across_destinations_is_detected() {
        // Same (node, action) but diverging logged destinations with opposite
        // labels: still one conflicting keyed group.
        let task = TaskSpec { task_id: "split".into(), instruction: String::new() };
        let fp = |i: usize| StateFingerprint {
            normalized_url: format!("https://c.test/{i}"),
            effective_prefix: Vec::new(),
            screenshot_hash: None,
        };
        let node = |i: usize| MergedNode {
            node_id: i,
            fingerprint: fp(i),
            is_root: i == 0,
            is_goal: false,
            occurrences: Vec::new(),
        };
        let edge = |to: usize, tid: &str, label: bool| ActionEdge {
            from_node: 0,
            to_node: to,
            action_key: "a".into(),
            occurrences: vec![EdgeOccurrence {
                trajectory_id: tid.into(),
                step_index: 0,
                label,
                effective: true,
                format_valid: true,
            }],
            label_set: BTreeSet::from([label]),
        };
        let graph = TrajectoryGraph {
            task,
            nodes: (0..3).map(node).collect(),
            edges: vec![edge(1, "t1", true), edge(2, "t2", false)],
            root_id: 0,
            goal_ids: vec![],
        };
        let conflicts = label_conflicts(&graph);
        assert_eq!(conflicts.stats.keyed_edges, 1);
        assert_eq!(conflicts.stats.conflicting_keyed_edges, 1);
        assert_eq!(conflicts.stats.conflicting_occurrences, 2);
    }

    #[test]
    fn early_stop_scores_below_the_productive_branch() {
        // A failed attempt stops at the results page; stopping is a self
        // transition, so it is both a revisit and ineffective, and the pair
        // at the results node prefers the sort click over stopping.
        let stop_line = concat!(
            r##"{"task_id":"fig-cart","instruction":"Find a usb cable, sort results by price, and add the first result to the cart","trajectory_id":"attempt-stop","label":0,"steps":["##,
            r##"{"index":0,"url":"https://shop.test/","screenshot_hash":"00aa00aa00aa00aa","action":{"kind":"type","target":"#search-box","value":"usb cable","raw":"type(#search-box, usb cable)"},"effective":true,"format_valid":true},"##,
            r##"{"index":1,"url":"https://shop.test/results","screenshot_hash":"11bb11bb11bb11bb","action":{"kind":"stop","target":"","raw":"stop()"},"effective":false,"format_valid":true}"##,
            r##"],"final_state":{"url":"https://shop.test/results","screenshot_hash":"11bb11bb11bb11bb"}}"##,
        );
        let corpus_text = format!("{BRANCHING_CHECKOUT}{stop_line}\n");
        let (corpus, _) = parse_corpus(corpus_text.as_bytes(), ParseMode::Strict).unwrap();
        let group = &corpus.groups[0];
        let graph =
            build_graph(&group.task, &group.trajectories, &UrlNormConfig::default()).unwrap();
        let index = shortest_distances(&graph);
        let scored = score_graph(&graph, &index, &RewardConfig::default()).unwrap();
        let pairs = extract_pairs(&scored, PairingPolicy::default());

        let results_node = 1;
        let stop_pair = pairs
            .iter()
            .find(|p| p.node_id == results_node && p.rejected.action == "stop()")
            .expect("stop should lose at the results node");
        assert_eq!(stop_pair.chosen.action, "click(#sort-price)");
        assert!(stop_pair.r_l < stop_pair.r_w);
    }

    #[test]
    fn walk_metrics_match_hand_counts() {
        let walk = |nodes: Vec<NodeId>, eff: Vec<bool>| Walk {
            trajectory_id: "t".into(),
            label: true,
            step_effective: eff,
            nodes,
        };
        // Spec-shaped example: [0,1,2,1,2,3,6] revisits at walk positions 3 and 4.
        let w = walk(vec![0, 1, 2, 1, 2, 3, 6], vec![true; 6]);
        assert_eq!(w.redundant_step_count(), 2);

        let clean = walk(vec![0, 1, 2, 3, 4, 5], vec![true; 5]);
        let metrics = redundancy_metrics(&[clean.clone(), clean]);
        assert_eq!(metrics.avg_steps, 5.0);
        assert_eq!(metrics.redundant_steps, 0.0);

        // Ineffective steps count even without a revisit.
        let lame = walk(vec![0, 1, 2], vec![false, true]);
        assert_eq!(lame.redundant_step_count(), 1);
        let mixed = redundancy_metrics(&[
            walk(vec![0, 1, 2, 1, 2, 3, 6], vec![true; 6]),
            walk(vec![0, 1, 2], vec![false, true]),
        ]);
        assert_eq!(mixed.avg_steps, 4.0);
        assert_eq!(mixed.redundant_steps, 1.5);
    }

    #[test]
    fn graph_walks_carry_effectiveness_from_edges() {
        let scored = scored_fixture();
        let walks = graph_walks(&scored.graph);
        assert_eq!(walks.len(), 2);
        assert!(walks.iter().all(|w| w.step_count() == 3));
        assert!(walks.iter().all(|w| w.step_effective.iter().all(|&e| e)));
        let metrics = redundancy_metrics(&walks);
        assert_eq!(metrics.avg_steps, 3.0);
        assert_eq!(metrics.redundant_steps, 0.0);
    }

    #[test]
    fn pair_export_round_trips() {
        let pairs = extract_pairs(
            &fan_out(&[("a", 4.0), ("b", 2.0), ("c", 0.0)]),
            PairingPolicy::default(),
        );
        let text = emit_pairs_string(&pairs);
        let parsed = parse_pairs(text.as_bytes()).unwrap();
        assert_eq!(parsed, pairs);

        let field_check: serde_json::Value =
            serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for field in ["task_id", "node_id", "context", "chosen", "rejected", "r_w", "r_l", "weight"]
        {
            assert!(field_check.get(field).is_some(), "missing export field {field}");
        }
        assert!(field_check["chosen"].get("action").is_some());
    }

    proptest! {
        /// Two-action nodes always get weight exactly 2 under population sigma.
        #[test]
        fn two_action_weight_is_exactly_two(
            lo in -50.0f64..50.0,
            gap in 1e-6f64..50.0,
        ) {
            let pairs =
                extract_pairs(&fan_out(&[("a", lo + gap), ("b", lo)]), PairingPolicy::default());
            prop_assert_eq!(pairs.len(), 1);
            prop_assert_eq!(pairs[0].weight, 2.0);
        }

        /// Rescaling all rewards at a node by c > 0 changes no pair and no weight.
        #[test]
        fn weights_are_scale_invariant(
            rewards in proptest::collection::vec(0.01f64..20.0, 2..5),
            scale in 0.01f64..100.0,
        ) {
            let named: Vec<(String, f64)> =
                rewards.iter().enumerate().map(|(i, r)| (format!("k{i}"), *r)).collect();
            let scaled: Vec<(String, f64)> =
                named.iter().map(|(k, r)| (k.clone(), r * scale)).collect();
            fn as_refs(v: &[(String, f64)]) -> Vec<(&str, f64)> {
                v.iter().map(|(k, r)| (k.as_str(), *r)).collect()
            }
            let base = extract_pairs(&fan_out(&as_refs(&named)), PairingPolicy::default());
            let scaled = extract_pairs(&fan_out(&as_refs(&scaled)), PairingPolicy::default());
            prop_assert_eq!(base.len(), scaled.len());
            for (a, b) in base.iter().zip(&scaled) {
                prop_assert_eq!(&a.chosen.action, &b.chosen.action);
                prop_assert_eq!(&a.rejected.action, &b.rejected.action);
                prop_assert!((a.weight - b.weight).abs() <= 1e-12 * a.weight.max(1.0));
                prop_assert!(a.weight > 0.0 && a.weight.is_finite());
                prop_assert!(a.r_w > a.r_l);
            }
        }
    }
}
