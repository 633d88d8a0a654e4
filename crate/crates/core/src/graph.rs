//! Merging K trajectories of one task into a rooted directed multigraph.
//!
//! States are merged under [`states_equivalent`] closed transitively with a
//! union-find, so the node set partitions all observed states. Node ids are
//! assigned breadth-first from the root with ties broken by lexicographic
//! fingerprint, which makes the canonical dump independent of trajectory
//! input order. Loops are allowed: a revisit becomes a back-edge, not a copy
//! of the node.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fingerprint::{fingerprint_states, states_equivalent, FingerprintError, StateFingerprint};
use crate::trajectory::{TaskSpec, Trajectory};
use crate::urlnorm::UrlNormConfig;

pub type NodeId = usize;

/// One visit of a trajectory to a merged node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeOccurrence {
    pub trajectory_id: String,
    /// Position of the state in its trajectory (`s_t` has index `t`).
    pub step_index: usize,
    /// Number of steps taken to reach this node in that trajectory.
    pub prefix_length: usize,
}

/// A merged state node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergedNode {
    pub node_id: NodeId,
    /// Canonical representative: the lexicographically smallest fingerprint
    /// of the merged equivalence class.
    pub fingerprint: StateFingerprint,
    pub is_root: bool,
    /// Terminal node of at least one label=1 trajectory.
    pub is_goal: bool,
    pub occurrences: Vec<NodeOccurrence>,
}

/// One traversal of an action edge by a trajectory step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeOccurrence {
    pub trajectory_id: String,
    pub step_index: usize,
    /// Outcome label of the whole trajectory this traversal belongs to.
    pub label: bool,
    pub effective: bool,
    pub format_valid: bool,
}

/// An action transition. Parallel edges between the same node pair exist only
/// with distinct action keys; the same key may still lead to different
/// destinations when logged transitions disagree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionEdge {
    pub from_node: NodeId,
    pub to_node: NodeId,
    pub action_key: String,
    pub occurrences: Vec<EdgeOccurrence>,
    /// Distinct trajectory labels observed on this edge.
    pub label_set: BTreeSet<bool>,
}

/// The merged multigraph of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGraph {
    pub task: TaskSpec,
    pub nodes: Vec<MergedNode>,
    pub edges: Vec<ActionEdge>,
    pub root_id: NodeId,
    pub goal_ids: Vec<NodeId>,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("task {task_id:?} has no trajectories")]
    EmptyTaskGroup { task_id: String },
    #[error("trajectory {trajectory_id:?} belongs to task {found:?}, not {expected:?}")]
    MixedTask {
        expected: String,
        found: String,
        trajectory_id: String,
    },
    #[error(
        "trajectory {trajectory_id:?} step {step_index}: format_valid unresolved; \
         annotate it or run a verifier before merging"
    )]
    UnresolvedAnnotations { trajectory_id: String, step_index: usize },
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
}

// Path-compressing union-find over occurrence indices.
struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(len: usize) -> Self {
        UnionFind { parent: (0..len).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Attach the larger index under the smaller one so class roots
            // are stable under input permutation of equal inputs.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Merge all trajectories of `task` into a [`TrajectoryGraph`].
///
/// All initial states are treated as the same semantic state: a task has one
/// start, and every trajectory is a walk from it. Requires `effective` and
/// `format_valid` resolved on every step.
pub fn build_graph(
    task: &TaskSpec,
    trajectories: &[Trajectory],
    cfg: &UrlNormConfig,
) -> Result<TrajectoryGraph, GraphError> {
    if trajectories.is_empty() {
        return Err(GraphError::EmptyTaskGroup { task_id: task.task_id.clone() });
    }
    for trajectory in trajectories {
        if trajectory.task_id != task.task_id {
            return Err(GraphError::MixedTask {
                expected: task.task_id.clone(),
                found: trajectory.task_id.clone(),
                trajectory_id: trajectory.trajectory_id.clone(),
            });
        }
        for step in &trajectory.steps {
            if step.format_valid.is_none() {
                return Err(GraphError::UnresolvedAnnotations {
                    trajectory_id: trajectory.trajectory_id.clone(),
                    step_index: step.index,
                });
            }
        }
    }

    let fingerprints: Vec<Vec<StateFingerprint>> = trajectories
        .iter()
        .map(|t| fingerprint_states(t, cfg))
        .collect::<Result<_, _>>()?;

    // Flat occurrence index: occurrence (k, t) -> offsets[k] + t.
    let mut offsets = Vec::with_capacity(trajectories.len());
    let mut total = 0usize;
    for fps in &fingerprints {
        offsets.push(total);
        total += fps.len();
    }
    let occ_id = |k: usize, t: usize| offsets[k] + t;
    let occ_fp = |id: usize| {
        let k = offsets.partition_point(|&o| o <= id) - 1;
        &fingerprints[k][id - offsets[k]]
    };

    let mut uf = UnionFind::new(total);
    for k in 1..trajectories.len() {
        uf.union(occ_id(0, 0), occ_id(k, 0));
    }
    let mut url_buckets: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (k, fps) in fingerprints.iter().enumerate() {
        for (t, fp) in fps.iter().enumerate() {
            url_buckets.entry(&fp.normalized_url).or_default().push(occ_id(k, t));
        }
    }
    for ids in url_buckets.values() {
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                if uf.find(a) != uf.find(b) && states_equivalent(occ_fp(a), occ_fp(b)) {
                    uf.union(a, b);
                }
            }
        }
    }

    // Canonical fingerprint per class: lexicographic minimum of its members.
    let mut class_fp: BTreeMap<usize, StateFingerprint> = BTreeMap::new();
    for id in 0..total {
        let class = uf.find(id);
        let fp = occ_fp(id);
        let entry = class_fp.entry(class).or_insert_with(|| fp.clone());
        if *fp < *entry {
            *entry = fp.clone();
        }
    }

    let root_class = uf.find(occ_id(0, 0));
    let mut goal_classes: BTreeSet<usize> = BTreeSet::new();
    for (k, trajectory) in trajectories.iter().enumerate() {
        if trajectory.label {
            goal_classes.insert(uf.find(occ_id(k, trajectory.steps.len())));
        }
    }

    // Successor sets for the breadth-first id assignment.
    let mut successors: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (k, trajectory) in trajectories.iter().enumerate() {
        for t in 0..trajectory.steps.len() {
            let from = uf.find(occ_id(k, t));
            let to = uf.find(occ_id(k, t + 1));
            successors.entry(from).or_default().insert(to);
        }
    }

    let mut node_id_of: BTreeMap<usize, NodeId> = BTreeMap::new();
    node_id_of.insert(root_class, 0);
    let mut frontier = vec![root_class];
    while !frontier.is_empty() {
        let mut next: Vec<usize> = Vec::new();
        for class in &frontier {
            if let Some(succ) = successors.get(class) {
                for &s in succ {
                    if !node_id_of.contains_key(&s) && !next.contains(&s) {
                        next.push(s);
                    }
                }
            }
        }
        next.sort_by(|a, b| class_fp[a].cmp(&class_fp[b]));
        for class in &next {
            let id = node_id_of.len();
            node_id_of.insert(*class, id);
        }
        frontier = next;
    }
    debug_assert_eq!(node_id_of.len(), class_fp.len(), "every class is root-reachable");

    let mut nodes: Vec<MergedNode> = class_fp
        .iter()
        .map(|(class, fp)| MergedNode {
            node_id: node_id_of[class],
            fingerprint: fp.clone(),
            is_root: *class == root_class,
            is_goal: goal_classes.contains(class),
            occurrences: Vec::new(),
        })
        .collect();
    nodes.sort_by_key(|n| n.node_id);

    for (k, trajectory) in trajectories.iter().enumerate() {
        for t in 0..fingerprints[k].len() {
            let node = node_id_of[&uf.find(occ_id(k, t))];
            nodes[node].occurrences.push(NodeOccurrence {
                trajectory_id: trajectory.trajectory_id.clone(),
                step_index: t,
                prefix_length: t,
            });
        }
    }
    for node in &mut nodes {
        node.occurrences.sort_by(|a, b| {
            (&a.trajectory_id, a.step_index).cmp(&(&b.trajectory_id, b.step_index))
        });
    }

    let mut edge_map: BTreeMap<(NodeId, NodeId, String), Vec<EdgeOccurrence>> = BTreeMap::new();
    for (k, trajectory) in trajectories.iter().enumerate() {
        for (t, step) in trajectory.steps.iter().enumerate() {
            let from = node_id_of[&uf.find(occ_id(k, t))];
            let to = node_id_of[&uf.find(occ_id(k, t + 1))];
            edge_map
                .entry((from, to, step.action.canonical_key()))
                .or_default()
                .push(EdgeOccurrence {
                    trajectory_id: trajectory.trajectory_id.clone(),
                    step_index: t,
                    label: trajectory.label,
                    effective: step.effective.expect("validated above"),
                    format_valid: step.format_valid.expect("validated above"),
                });
        }
    }
    let edges: Vec<ActionEdge> = edge_map
        .into_iter()
        .map(|((from_node, to_node, action_key), mut occurrences)| {
            occurrences.sort_by(|a, b| {
                (&a.trajectory_id, a.step_index).cmp(&(&b.trajectory_id, b.step_index))
            });
            let label_set = occurrences.iter().map(|o| o.label).collect();
            ActionEdge { from_node, to_node, action_key, occurrences, label_set }
        })
        .collect();

    let goal_ids: Vec<NodeId> = {
        let mut ids: Vec<NodeId> = goal_classes.iter().map(|c| node_id_of[c]).collect();
        ids.sort_unstable();
        ids
    };

    Ok(TrajectoryGraph { task: task.clone(), nodes, edges, root_id: 0, goal_ids })
}

impl TrajectoryGraph {
    /// Node sequence of each trajectory's replay through the graph, keyed by
    /// trajectory id. A walk always has one more entry than the trajectory
    /// has steps.
    pub fn walks(&self) -> BTreeMap<String, Vec<NodeId>> {
        let mut indexed: BTreeMap<String, Vec<(usize, NodeId)>> = BTreeMap::new();
        for node in &self.nodes {
            for occ in &node.occurrences {
                indexed
                    .entry(occ.trajectory_id.clone())
                    .or_default()
                    .push((occ.step_index, node.node_id));
            }
        }
        indexed
            .into_iter()
            .map(|(tid, mut steps)| {
                steps.sort_unstable();
                (tid, steps.into_iter().map(|(_, node)| node).collect())
            })
            .collect()
    }
}

/// Per-node hop counts from the root and to the nearest goal.
///
/// `None` is the unreachable sentinel; no finite stand-in is ever used.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceIndex {
    pub dist_from_root: Vec<Option<u32>>,
    pub dist_to_goal: Vec<Option<u32>>,
    /// Shortest root-to-goal distance; `None` when the task has no successful
    /// trajectory (reported downstream, not fatal).
    pub l_min: Option<u32>,
}

impl DistanceIndex {
    pub fn has_goal(&self) -> bool {
        self.l_min.is_some()
    }
}

/// Unweighted shortest-path distances over the merged graph.
pub fn shortest_distances(graph: &TrajectoryGraph) -> DistanceIndex {
    let n = graph.nodes.len();
    let mut forward = vec![BTreeSet::new(); n];
    let mut backward = vec![BTreeSet::new(); n];
    for edge in &graph.edges {
        forward[edge.from_node].insert(edge.to_node);
        backward[edge.to_node].insert(edge.from_node);
    }
    let dist_from_root = bfs(&forward, std::iter::once(graph.root_id));
    let dist_to_goal = bfs(&backward, graph.goal_ids.iter().copied());
    let l_min = dist_to_goal[graph.root_id];
    DistanceIndex { dist_from_root, dist_to_goal, l_min }
}

fn bfs(adjacency: &[BTreeSet<NodeId>], sources: impl Iterator<Item = NodeId>) -> Vec<Option<u32>> {
    let mut dist = vec![None; adjacency.len()];
    let mut queue = VecDeque::new();
    for s in sources {
        if dist[s].is_none() {
            dist[s] = Some(0);
            queue.push_back(s);
        }
    }
    while let Some(u) = queue.pop_front() {
        let next = dist[u].expect("queued nodes have distances") + 1;
        for &v in &adjacency[u] {
            if dist[v].is_none() {
                dist[v] = Some(next);
                queue.push_back(v);
            }
        }
    }
    dist
}

// --- canonical dump -------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct TaskWire {
    pub task_id: String,
    pub instruction: String,
    pub root_id: NodeId,
    pub goal_ids: Vec<NodeId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct NodeWire {
    pub task_id: String,
    pub node_id: NodeId,
    pub url: String,
    pub effective_prefix: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screenshot_hash: Option<String>,
    pub is_root: bool,
    pub is_goal: bool,
    pub occurrences: Vec<NodeOccurrence>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct EdgeOccWire {
    pub trajectory_id: String,
    pub step_index: usize,
    pub label: u8,
    pub effective: bool,
    pub format_valid: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct EdgeWire {
    pub task_id: String,
    pub from: NodeId,
    pub to: NodeId,
    pub action_key: String,
    pub label_set: Vec<u8>,
    pub occurrences: Vec<EdgeOccWire>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum GraphRecord {
    Task(TaskWire),
    Node(NodeWire),
    Edge(EdgeWire),
}

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("line {line}: malformed dump record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("i/o error reading dump")]
    Io(#[from] io::Error),
}

fn dump_malformed(line: usize, reason: impl Into<String>) -> DumpError {
    DumpError::Malformed { line, reason: reason.into() }
}

pub(crate) fn node_to_wire(task_id: &str, node: &MergedNode) -> NodeWire {
    NodeWire {
        task_id: task_id.to_owned(),
        node_id: node.node_id,
        url: node.fingerprint.normalized_url.clone(),
        effective_prefix: node.fingerprint.effective_prefix.clone(),
        screenshot_hash: node.fingerprint.screenshot_hash.clone(),
        is_root: node.is_root,
        is_goal: node.is_goal,
        occurrences: node.occurrences.clone(),
    }
}

pub(crate) fn node_from_wire(wire: NodeWire) -> MergedNode {
    MergedNode {
        node_id: wire.node_id,
        fingerprint: StateFingerprint {
            normalized_url: wire.url,
            effective_prefix: wire.effective_prefix,
            screenshot_hash: wire.screenshot_hash,
        },
        is_root: wire.is_root,
        is_goal: wire.is_goal,
        occurrences: wire.occurrences,
    }
}

pub(crate) fn edge_to_wire(task_id: &str, edge: &ActionEdge) -> EdgeWire {
    EdgeWire {
        task_id: task_id.to_owned(),
        from: edge.from_node,
        to: edge.to_node,
        action_key: edge.action_key.clone(),
        label_set: edge.label_set.iter().map(|&l| u8::from(l)).collect(),
        occurrences: edge
            .occurrences
            .iter()
            .map(|o| EdgeOccWire {
                trajectory_id: o.trajectory_id.clone(),
                step_index: o.step_index,
                label: u8::from(o.label),
                effective: o.effective,
                format_valid: o.format_valid,
            })
            .collect(),
    }
}

pub(crate) fn edge_from_wire(wire: EdgeWire, line: usize) -> Result<ActionEdge, DumpError> {
    let mut occurrences = Vec::with_capacity(wire.occurrences.len());
    for occ in wire.occurrences {
        if occ.label > 1 {
            return Err(dump_malformed(line, "occurrence label must be 0 or 1"));
        }
        occurrences.push(EdgeOccurrence {
            trajectory_id: occ.trajectory_id,
            step_index: occ.step_index,
            label: occ.label == 1,
            effective: occ.effective,
            format_valid: occ.format_valid,
        });
    }
    let label_set: BTreeSet<bool> = occurrences.iter().map(|o| o.label).collect();
    let declared: BTreeSet<bool> = wire.label_set.iter().map(|&l| l == 1).collect();
    if label_set != declared {
        return Err(dump_malformed(line, "label_set does not match edge occurrences"));
    }
    if occurrences.is_empty() {
        return Err(dump_malformed(line, "edge must have at least one occurrence"));
    }
    Ok(ActionEdge {
        from_node: wire.from,
        to_node: wire.to,
        action_key: wire.action_key,
        occurrences,
        label_set,
    })
}

impl TrajectoryGraph {
    /// Write the canonical dump: the task record, then nodes in id order, then
    /// edges ordered by `(from, to, action_key)`. Graph equality is byte
    /// equality of dumps.
    pub fn dump<W: Write>(&self, mut writer: W) -> io::Result<()> {
        let records = std::iter::once(GraphRecord::Task(TaskWire {
            task_id: self.task.task_id.clone(),
            instruction: self.task.instruction.clone(),
            root_id: self.root_id,
            goal_ids: self.goal_ids.clone(),
        }))
        .chain(self.nodes.iter().map(|n| GraphRecord::Node(node_to_wire(&self.task.task_id, n))))
        .chain(self.edges.iter().map(|e| GraphRecord::Edge(edge_to_wire(&self.task.task_id, e))));
        for record in records {
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

/// Dump several task graphs in canonical task order (sorted by task id).
pub fn dump_graphs<W: Write>(graphs: &[TrajectoryGraph], mut writer: W) -> io::Result<()> {
    let mut ordered: Vec<&TrajectoryGraph> = graphs.iter().collect();
    ordered.sort_by(|a, b| a.task.task_id.cmp(&b.task.task_id));
    for graph in ordered {
        graph.dump(&mut writer)?;
    }
    Ok(())
}

/// Parse a graph dump back into task graphs, in dump order.
pub fn parse_graph_dump<R: BufRead>(reader: R) -> Result<Vec<TrajectoryGraph>, DumpError> {
    let mut graphs: Vec<TrajectoryGraph> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record: GraphRecord = serde_json::from_str(trimmed)
            .map_err(|e| dump_malformed(line_no, e.to_string()))?;
        match record {
            GraphRecord::Task(task) => graphs.push(TrajectoryGraph {
                task: TaskSpec { task_id: task.task_id, instruction: task.instruction },
                nodes: Vec::new(),
                edges: Vec::new(),
                root_id: task.root_id,
                goal_ids: task.goal_ids,
            }),
            GraphRecord::Node(node) => {
                let graph = graphs
                    .last_mut()
                    .filter(|g| g.task.task_id == node.task_id)
                    .ok_or_else(|| dump_malformed(line_no, "node before its task record"))?;
                if node.node_id != graph.nodes.len() {
                    return Err(dump_malformed(line_no, "node ids must be dense and in order"));
                }
                graph.nodes.push(node_from_wire(node));
            }
            GraphRecord::Edge(edge) => {
                let graph = graphs
                    .last_mut()
                    .filter(|g| g.task.task_id == edge.task_id)
                    .ok_or_else(|| dump_malformed(line_no, "edge before its task record"))?;
                if edge.from >= graph.nodes.len() || edge.to >= graph.nodes.len() {
                    return Err(dump_malformed(line_no, "edge references unknown node"));
                }
                graph.edges.push(edge_from_wire(edge, line_no)?);
            }
        }
    }
    Ok(graphs)
}
