//! Tabular softmax policies over graph states.
//!
//! A policy maps `(task_id, node_id)` to a logit per known action;
//! probabilities are the per-state softmax. The reference policy is the same
//! table frozen behind a wrapper so nothing can update it during training.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{DumpError, NodeId};
use crate::preference::PreferencePair;
use crate::reward::ScoredGraph;

/// Identifies one state across tasks.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct StateKey {
    pub task_id: String,
    pub node_id: NodeId,
}

impl StateKey {
    pub fn new(task_id: impl Into<String>, node_id: NodeId) -> StateKey {
        StateKey { task_id: task_id.into(), node_id }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    /// Sorted, unique action keys; logits are parallel.
    actions: Vec<String>,
    logits: Vec<f64>,
}

impl Block {
    fn log_probs(&self) -> Vec<f64> {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + self
                .logits
                .iter()
                .map(|l| (l - max).exp())
                .sum::<f64>()
                .ln();
        self.logits.iter().map(|l| l - lse).collect()
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("unknown state or action: task {task_id:?} node {node_id} action {action:?}")]
    UnknownStateOrAction {
        task_id: String,
        node_id: NodeId,
        action: String,
    },
}

/// Trainable tabular softmax policy.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolicyTable {
    blocks: BTreeMap<StateKey, Block>,
}

impl PolicyTable {
    /// Uniform policy whose vocabulary is exactly the actions seen in pairs.
    pub fn uniform_from_pairs(pairs: &[PreferencePair]) -> PolicyTable {
        let mut vocab: BTreeMap<StateKey, Vec<String>> = BTreeMap::new();
        for pair in pairs {
            let entry = vocab
                .entry(StateKey::new(pair.task_id.clone(), pair.node_id))
                .or_default();
            entry.push(pair.chosen.action.clone());
            entry.push(pair.rejected.action.clone());
        }
        Self::from_vocab(vocab)
    }

    /// Uniform policy covering every outgoing action of every node in the
    /// scored graphs, including nodes that produced no pairs.
    pub fn uniform_from_scored(scored: &[ScoredGraph]) -> PolicyTable {
        let mut vocab: BTreeMap<StateKey, Vec<String>> = BTreeMap::new();
        for graph in scored {
            for edge in &graph.graph.edges {
                vocab
                    .entry(StateKey::new(graph.graph.task.task_id.clone(), edge.from_node))
                    .or_default()
                    .push(edge.action_key.clone());
            }
        }
        Self::from_vocab(vocab)
    }

    fn from_vocab(vocab: BTreeMap<StateKey, Vec<String>>) -> PolicyTable {
        let blocks = vocab
            .into_iter()
            .map(|(key, mut actions)| {
                actions.sort();
                actions.dedup();
                let logits = vec![0.0; actions.len()];
                (key, Block { actions, logits })
            })
            .collect();
        PolicyTable { blocks }
    }

    pub fn state_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks.values().map(|b| b.logits.len()).sum()
    }

    pub fn has_state(&self, key: &StateKey) -> bool {
        self.blocks.contains_key(key)
    }

    pub fn actions(&self, key: &StateKey) -> Option<&[String]> {
        self.blocks.get(key).map(|b| b.actions.as_slice())
    }

    fn action_index(&self, key: &StateKey, action: &str) -> Result<(usize, &Block), PolicyError> {
        let unknown = || PolicyError::UnknownStateOrAction {
            task_id: key.task_id.clone(),
            node_id: key.node_id,
            action: action.to_owned(),
        };
        let block = self.blocks.get(key).ok_or_else(unknown)?;
        let index = block.actions.binary_search_by(|a| a.as_str().cmp(action)).map_err(|_| unknown())?;
        Ok((index, block))
    }

    /// `log pi(action | state)` under the per-state softmax.
    pub fn log_prob(&self, key: &StateKey, action: &str) -> Result<f64, PolicyError> {
        let (index, block) = self.action_index(key, action)?;
        Ok(block.log_probs()[index])
    }

    /// Action probabilities for one state, parallel to `actions(key)`.
    pub fn probs(&self, key: &StateKey) -> Option<Vec<f64>> {
        self.blocks.get(key).map(|b| b.log_probs().iter().map(|lp| lp.exp()).collect())
    }

    /// Highest-probability action; logit ties resolve to the
    /// lexicographically smallest key because actions are sorted.
    pub fn best_action(&self, key: &StateKey) -> Option<&str> {
        let block = self.blocks.get(key)?;
        let mut best = 0;
        for (i, logit) in block.logits.iter().enumerate() {
            if *logit > block.logits[best] {
                best = i;
            }
        }
        block.actions.get(best).map(String::as_str)
    }

    pub fn logit(&self, key: &StateKey, action: &str) -> Result<f64, PolicyError> {
        let (index, block) = self.action_index(key, action)?;
        Ok(block.logits[index])
    }

    pub fn set_logit(&mut self, key: &StateKey, action: &str, value: f64) -> Result<(), PolicyError> {
        let (index, _) = self.action_index(key, action)?;
        self.blocks.get_mut(key).expect("checked above").logits[index] = value;
        Ok(())
    }

    /// Canonical iteration: states in key order, actions in sorted order.
    pub fn iter(&self) -> impl Iterator<Item = (&StateKey, &str, f64)> {
        self.blocks.iter().flat_map(|(key, block)| {
            block
                .actions
                .iter()
                .zip(&block.logits)
                .map(move |(action, logit)| (key, action.as_str(), *logit))
        })
    }

    pub(crate) fn apply_step(&mut self, gradient: &PolicyGradient, learning_rate: f64) {
        for (key, grad) in &gradient.blocks {
            if let Some(block) = self.blocks.get_mut(key) {
                for (logit, g) in block.logits.iter_mut().zip(grad) {
                    *logit -= learning_rate * g;
                }
            }
        }
    }

    pub(crate) fn block_log_probs(&self, key: &StateKey) -> Option<Vec<f64>> {
        self.blocks.get(key).map(Block::log_probs)
    }
}

/// Gradient with the same block structure as a [`PolicyTable`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyGradient {
    pub(crate) blocks: BTreeMap<StateKey, Vec<f64>>,
}

impl PolicyGradient {
    pub(crate) fn zeros_like(policy: &PolicyTable) -> PolicyGradient {
        PolicyGradient {
            blocks: policy
                .blocks
                .iter()
                .map(|(key, block)| (key.clone(), vec![0.0; block.logits.len()]))
                .collect(),
        }
    }

    pub(crate) fn accumulate(&mut self, key: &StateKey, index: usize, value: f64) {
        if let Some(block) = self.blocks.get_mut(key) {
            block[index] += value;
        }
    }

    pub(crate) fn scale(&mut self, factor: f64) {
        for block in self.blocks.values_mut() {
            for g in block {
                *g *= factor;
            }
        }
    }

    /// Euclidean norm over all components.
    pub fn norm(&self) -> f64 {
        self.blocks
            .values()
            .flat_map(|b| b.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Euclidean norm of one state's component block.
    pub fn block_norm(&self, key: &StateKey) -> f64 {
        self.blocks
            .get(key)
            .map(|b| b.iter().map(|g| g * g).sum::<f64>().sqrt())
            .unwrap_or(0.0)
    }

    pub fn component(&self, key: &StateKey, index: usize) -> Option<f64> {
        self.blocks.get(key).and_then(|b| b.get(index)).copied()
    }
}

/// Frozen anchor policy. Construction clones a table; nothing can mutate it
/// afterwards, and softmax keeps every known action's probability positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy {
    table: PolicyTable,
}

impl ReferencePolicy {
    /// Uniform reference over the same vocabulary as `policy`.
    pub fn uniform_like(policy: &PolicyTable) -> ReferencePolicy {
        let mut table = policy.clone();
        for block in table.blocks.values_mut() {
            block.logits.iter_mut().for_each(|l| *l = 0.0);
        }
        ReferencePolicy { table }
    }

    /// Freeze a copy of the given (typically initial) policy.
    pub fn copy_of(policy: &PolicyTable) -> ReferencePolicy {
        ReferencePolicy { table: policy.clone() }
    }

    pub fn log_prob(&self, key: &StateKey, action: &str) -> Result<f64, PolicyError> {
        self.table.log_prob(key, action)
    }

    pub fn table(&self) -> &PolicyTable {
        &self.table
    }
}

// --- policy dump ------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct PolicyRecord {
    task_id: String,
    node_id: NodeId,
    action: String,
    logit: f64,
}

/// Write `(state, action, logit)` lines in canonical order.
pub fn dump_policy<W: Write>(policy: &PolicyTable, mut writer: W) -> io::Result<()> {
    for (key, action, logit) in policy.iter() {
        let record = PolicyRecord {
            task_id: key.task_id.clone(),
            node_id: key.node_id,
            action: action.to_owned(),
            logit,
        };
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn dump_policy_string(policy: &PolicyTable) -> String {
    let mut buf = Vec::new();
    dump_policy(policy, &mut buf).expect("writing to Vec cannot fail");
    String::from_utf8(buf).expect("policy dump is UTF-8")
}

/// Parse a policy dump back into a table.
pub fn parse_policy_dump<R: BufRead>(reader: R) -> Result<PolicyTable, DumpError> {
    let mut vocab: BTreeMap<StateKey, Vec<(String, f64)>> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record: PolicyRecord = serde_json::from_str(trimmed)
            .map_err(|e| DumpError::Malformed { line: line_no, reason: e.to_string() })?;
        let entries = vocab
            .entry(StateKey::new(record.task_id, record.node_id))
            .or_default();
        if entries.iter().any(|(a, _)| *a == record.action) {
            return Err(DumpError::Malformed {
                line: line_no,
                reason: format!("duplicate action {:?} for one state", record.action),
            });
        }
        entries.push((record.action, record.logit));
    }
    let blocks = vocab
        .into_iter()
        .map(|(key, mut entries)| {
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            let (actions, logits) = entries.into_iter().unzip();
            (key, Block { actions, logits })
        })
        .collect();
    Ok(PolicyTable { blocks })
}
