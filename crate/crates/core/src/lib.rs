//! Offline preference-optimization pipeline for web-agent trajectories.
//!
//! Logged executions of a task are merged into a rooted state graph so that
//! semantically identical states from different attempts share a node. The
//! graph yields step-level process rewards (subgoal progress, redundancy,
//! accuracy, format), which in turn yield ranked preference pairs with
//! dynamic weights. A tabular softmax policy and the TGPO objective (with
//! its unit-weight DPO degenerate mode) close the loop, and a synthetic
//! web-world simulator provides corpora whose ground truth is known by
//! construction.

pub mod fingerprint;
pub mod graph;
pub mod objective;
pub mod policy;
pub mod preference;
pub mod reward;
pub mod trajectory;
pub mod urlnorm;

pub use fingerprint::{fingerprint_states, states_equivalent, StateFingerprint};
pub use graph::{
    build_graph, dump_graphs, parse_graph_dump, shortest_distances, ActionEdge, DistanceIndex,
    EdgeOccurrence, MergedNode, NodeId, NodeOccurrence, TrajectoryGraph,
};
pub use objective::{
    dump_trace, logit_margin, loss_gradient, parse_trace, tgpo_loss, train, TraceEntry,
    TrainConfig, TrainResult, Weighting,
};
pub use policy::{
    dump_policy, dump_policy_string, parse_policy_dump, PolicyGradient, PolicyTable,
    ReferencePolicy, StateKey,
};
pub use preference::{
    conflict_report, emit_pairs, emit_pairs_string, extract_pairs, graph_walks, label_conflicts,
    node_reward_stats, parse_pairs, population_std, redundancy_metrics, ActionRef, ConflictReport,
    ConflictStats, NodeRewardStats, PairingPolicy, PreferencePair, RedundancyMetrics,
    TaskConflicts, Walk,
};
pub use reward::{
    accuracy_and_format, dump_scored_graphs, parse_scored_dump, redundancy_reward,
    resolve_annotations, score_graph, subgoal_reward, Aggregation, EffectVerifier, RewardBreakdown,
    RewardConfig, RuleVerifier, ScoredGraph, Verdict, VerifierError,
};
pub use trajectory::{
    emit_corpus, emit_corpus_string, parse_corpus, Action, ActionKind, Corpus, ParseMode, Step,
    StateObservation, TaskGroup, TaskSpec, Trajectory,
};
pub use urlnorm::{normalize_url, UrlNormConfig};
