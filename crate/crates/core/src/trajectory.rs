//! Canonical trajectory data model and the line-delimited corpus format.
//!
//! A corpus is UTF-8 text with one trajectory record per line. Each record
//! carries its task (`task_id`, `instruction`), a binary outcome `label`,
//! the ordered `steps`, and the observation of the final state. Lines
//! starting with `#` are headers/comments and are skipped by the parser.
//!
//! Parsing rejects malformed records instead of repairing them; in lenient
//! mode unknown fields are reported as warnings instead of errors.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{self, BufRead, Write};

use serde_json::Value;
use thiserror::Error;

/// A task: an opaque id plus the natural-language instruction given to the agent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub task_id: String,
    pub instruction: String,
}

/// Interactive operation kinds recognized by the pipeline.
///
/// `Stop` is a first-class action so that terminal decisions can participate
/// in preference pairs like any other branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActionKind {
    Click,
    Type,
    Scroll,
    Navigate,
    Stop,
    Other,
}

impl ActionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ActionKind::Click => "click",
            ActionKind::Type => "type",
            ActionKind::Scroll => "scroll",
            ActionKind::Navigate => "navigate",
            ActionKind::Stop => "stop",
            ActionKind::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<ActionKind> {
        match s {
            "click" => Some(ActionKind::Click),
            "type" => Some(ActionKind::Type),
            "scroll" => Some(ActionKind::Scroll),
            "navigate" => Some(ActionKind::Navigate),
            "stop" => Some(ActionKind::Stop),
            "other" => Some(ActionKind::Other),
            _ => None,
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One agent action: structured fields plus the verbatim string the agent emitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Action {
    pub kind: ActionKind,
    /// Element/locator string; may be empty for scroll/stop.
    pub target: String,
    /// Optional text payload (the typed text, scroll direction, ...).
    pub value: Option<String>,
    /// Verbatim action string as emitted by the agent.
    pub raw: String,
}

impl Action {
    /// Deterministic identity key derived from `(kind, target, value)` only.
    ///
    /// The `raw` field never contributes, so whitespace or formatting noise in
    /// the logged string cannot split an action into multiple keys. Separator
    /// characters inside `target`/`value` are escaped, so the encoding is
    /// injective: distinct `(kind, target, value)` triples get distinct keys,
    /// including `value: None` vs `value: Some("")`.
    pub fn canonical_key(&self) -> String {
        let mut key = String::with_capacity(self.target.len() + 16);
        key.push_str(self.kind.as_str());
        key.push('(');
        escape_into(&self.target, &mut key);
        if let Some(v) = &self.value {
            key.push(',');
            escape_into(v, &mut key);
        }
        key.push(')');
        key
    }
}

fn escape_into(component: &str, out: &mut String) {
    for c in component.chars() {
        if matches!(c, '\\' | '(' | ')' | ',') {
            out.push('\\');
        }
        out.push(c);
    }
}

/// A web-interface observation: the raw URL plus optional logger-supplied digests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateObservation {
    pub url: String,
    /// Opaque fixed-length hex digest of the rendered page, when the logger provides one.
    pub screenshot_hash: Option<String>,
    /// Opaque hex digest of the DOM snapshot, when the logger provides one.
    pub dom_digest: Option<String>,
}

/// One step: the observation before the action (`s_t`) and the action taken (`a_t`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub index: usize,
    pub state: StateObservation,
    pub action: Action,
    /// Externally annotated action effectiveness; resolved by a verifier when absent.
    pub effective: Option<bool>,
    /// Externally annotated syntax validity; resolved by a verifier when absent.
    pub format_valid: Option<bool>,
}

/// One complete execution attempt with its trajectory-level outcome label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub trajectory_id: String,
    pub task_id: String,
    /// Binary outcome: `true` serializes as label 1 (success), `false` as 0.
    pub label: bool,
    pub steps: Vec<Step>,
    /// Observation of the final state `s_T`, stored explicitly so the state
    /// after the last action is never ambiguous.
    pub final_state: StateObservation,
}

impl Trajectory {
    /// States `s_0 ..= s_T` in order: each step's pre-action observation,
    /// then the final state. Always `steps.len() + 1` items.
    pub fn states(&self) -> impl Iterator<Item = &StateObservation> {
        self.steps
            .iter()
            .map(|s| &s.state)
            .chain(std::iter::once(&self.final_state))
    }

    pub fn label_as_u8(&self) -> u8 {
        u8::from(self.label)
    }
}

/// All trajectories of one task, in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGroup {
    pub task: TaskSpec,
    pub trajectories: Vec<Trajectory>,
}

/// A parsed corpus: tasks in first-appearance order, trajectories grouped per task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub groups: Vec<TaskGroup>,
}

impl Corpus {
    pub fn trajectory_count(&self) -> usize {
        self.groups.iter().map(|g| g.trajectories.len()).sum()
    }
}

/// Unknown-field handling: reject (`Strict`, the default) or warn (`Lenient`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

/// A non-fatal observation produced while parsing in lenient mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseWarning {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: duplicate trajectory id {trajectory_id:?}")]
    DuplicateTrajectoryId { trajectory_id: String, line: usize },
    #[error(
        "line {line}: unknown task reference: task {task_id:?} is already \
         registered with a different instruction"
    )]
    UnknownTask { task_id: String, line: usize },
    #[error("i/o error reading corpus")]
    Io(#[from] io::Error),
}

fn malformed(line: usize, reason: impl Into<String>) -> CorpusError {
    CorpusError::MalformedRecord {
        line,
        reason: reason.into(),
    }
}

/// Parse a line-delimited corpus, enforcing every record invariant.
///
/// Returns task groups in first-appearance order together with any lenient-mode
/// warnings. Rejects rather than repairs: the first invalid record aborts the parse.
pub fn parse_corpus<R: BufRead>(
    reader: R,
    mode: ParseMode,
) -> Result<(Corpus, Vec<ParseWarning>), CorpusError> {
    let mut corpus = Corpus::default();
    let mut warnings = Vec::new();
    let mut seen_trajectories: BTreeSet<String> = BTreeSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let value: Value = serde_json::from_str(trimmed)
            .map_err(|e| malformed(line_no, format!("invalid JSON: {e}")))?;
        let (task, trajectory) = record_from_value(&value, line_no, mode, &mut warnings)?;

        if !seen_trajectories.insert(trajectory.trajectory_id.clone()) {
            return Err(CorpusError::DuplicateTrajectoryId {
                trajectory_id: trajectory.trajectory_id,
                line: line_no,
            });
        }

        match corpus.groups.iter_mut().find(|g| g.task.task_id == task.task_id) {
            Some(group) => {
                if group.task.instruction != task.instruction {
                    return Err(CorpusError::UnknownTask {
                        task_id: task.task_id,
                        line: line_no,
                    });
                }
                group.trajectories.push(trajectory);
            }
            None => corpus.groups.push(TaskGroup {
                task,
                trajectories: vec![trajectory],
            }),
        }
    }

    Ok((corpus, warnings))
}

/// Serialize a corpus as one record per line. Deterministic: serializing the
/// same corpus twice yields byte-identical output, and `parse_corpus` of the
/// result reproduces the input structurally.
pub fn emit_corpus<W: Write>(corpus: &Corpus, mut writer: W) -> io::Result<()> {
    for group in &corpus.groups {
        for trajectory in &group.trajectories {
            let value = record_to_value(&group.task, trajectory);
            serde_json::to_writer(&mut writer, &value)?;
            writer.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn emit_corpus_string(corpus: &Corpus) -> String {
    let mut buf = Vec::new();
    emit_corpus(corpus, &mut buf).expect("writing to Vec cannot fail");
    String::from_utf8(buf).expect("emitted corpus is UTF-8")
}

// --- wire encoding -------------------------------------------------------

fn record_to_value(task: &TaskSpec, trajectory: &Trajectory) -> Value {
    let mut record = serde_json::Map::new();
    record.insert("task_id".into(), Value::String(task.task_id.clone()));
    record.insert("instruction".into(), Value::String(task.instruction.clone()));
    record.insert(
        "trajectory_id".into(),
        Value::String(trajectory.trajectory_id.clone()),
    );
    record.insert("label".into(), Value::from(trajectory.label_as_u8()));
    record.insert(
        "steps".into(),
        Value::Array(trajectory.steps.iter().map(step_to_value).collect()),
    );
    record.insert("final_state".into(), state_to_value(&trajectory.final_state));
    Value::Object(record)
}

fn step_to_value(step: &Step) -> Value {
    let mut obj = serde_json::Map::new();
    obj.insert("index".into(), Value::from(step.index as u64));
    obj.insert("url".into(), Value::String(step.state.url.clone()));
    if let Some(h) = &step.state.screenshot_hash {
        obj.insert("screenshot_hash".into(), Value::String(h.clone()));
    }
    if let Some(d) = &step.state.dom_digest {
        obj.insert("dom_digest".into(), Value::String(d.clone()));
    }
    let mut action = serde_json::Map::new();
    action.insert("kind".into(), Value::String(step.action.kind.as_str().into()));
    action.insert("target".into(), Value::String(step.action.target.clone()));
    if let Some(v) = &step.action.value {
        action.insert("value".into(), Value::String(v.clone()));
    }
    action.insert("raw".into(), Value::String(step.action.raw.clone()));
    obj.insert("action".into(), Value::Object(action));
    if let Some(e) = step.effective {
        obj.insert("effective".into(), Value::Bool(e));
    }
    if let Some(f) = step.format_valid {
        obj.insert("format_valid".into(), Value::Bool(f));
    }
    Value::Object(obj)
}

fn state_to_value(state: &StateObservation) -> Value {
    let mut obj = serde_json::Map::new();
    obj.insert("url".into(), Value::String(state.url.clone()));
    if let Some(h) = &state.screenshot_hash {
        obj.insert("screenshot_hash".into(), Value::String(h.clone()));
    }
    if let Some(d) = &state.dom_digest {
        obj.insert("dom_digest".into(), Value::String(d.clone()));
    }
    Value::Object(obj)
}

// --- wire decoding -------------------------------------------------------

struct Fields<'a> {
    map: &'a serde_json::Map<String, Value>,
    context: &'a str,
    line: usize,
}

impl<'a> Fields<'a> {
    fn new(
        value: &'a Value,
        context: &'a str,
        line: usize,
    ) -> Result<Fields<'a>, CorpusError> {
        let map = value
            .as_object()
            .ok_or_else(|| malformed(line, format!("{context} must be an object")))?;
        Ok(Fields { map, context, line })
    }

    fn check_unknown(
        &self,
        known: &[&str],
        mode: ParseMode,
        warnings: &mut Vec<ParseWarning>,
    ) -> Result<(), CorpusError> {
        for key in self.map.keys() {
            if !known.contains(&key.as_str()) {
                match mode {
                    ParseMode::Strict => {
                        return Err(malformed(
                            self.line,
                            format!("unknown field {key:?} in {}", self.context),
                        ));
                    }
                    ParseMode::Lenient => warnings.push(ParseWarning {
                        line: self.line,
                        message: format!("ignoring unknown field {key:?} in {}", self.context),
                    }),
                }
            }
        }
        Ok(())
    }

    fn required(&self, key: &str) -> Result<&'a Value, CorpusError> {
        self.map.get(key).ok_or_else(|| {
            malformed(self.line, format!("missing field {key:?} in {}", self.context))
        })
    }

    fn string(&self, key: &str) -> Result<String, CorpusError> {
        self.required(key)?
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| malformed(self.line, format!("{key} must be a string")))
    }

    fn opt_string(&self, key: &str) -> Result<Option<String>, CorpusError> {
        match self.map.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v.as_str().map(str::to_owned).map(Some).ok_or_else(|| {
                malformed(self.line, format!("{key} must be a string when present"))
            }),
        }
    }

    fn opt_bool(&self, key: &str) -> Result<Option<bool>, CorpusError> {
        match self.map.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::Bool(b)) => Ok(Some(*b)),
            Some(_) => Err(malformed(
                self.line,
                format!("{key} must be a boolean when present"),
            )),
        }
    }
}

fn record_from_value(
    value: &Value,
    line: usize,
    mode: ParseMode,
    warnings: &mut Vec<ParseWarning>,
) -> Result<(TaskSpec, Trajectory), CorpusError> {
    let fields = Fields::new(value, "record", line)?;
    fields.check_unknown(
        &["task_id", "instruction", "trajectory_id", "label", "steps", "final_state"],
        mode,
        warnings,
    )?;

    let task_id = fields.string("task_id")?;
    if task_id.is_empty() {
        return Err(malformed(line, "task_id must be non-empty"));
    }
    let instruction = fields.string("instruction")?;
    let trajectory_id = fields.string("trajectory_id")?;
    if trajectory_id.is_empty() {
        return Err(malformed(line, "trajectory_id must be non-empty"));
    }

    let label = match fields.required("label")? {
        Value::Number(n) if n.as_u64() == Some(0) => false,
        Value::Number(n) if n.as_u64() == Some(1) => true,
        other => {
            return Err(malformed(line, format!("label must be 0 or 1 (got {other})")));
        }
    };

    let steps_value = fields
        .required("steps")?
        .as_array()
        .ok_or_else(|| malformed(line, "steps must be an array"))?;
    if steps_value.is_empty() {
        return Err(malformed(line, "steps must be non-empty"));
    }
    let mut steps = Vec::with_capacity(steps_value.len());
    for (pos, step_value) in steps_value.iter().enumerate() {
        let step = step_from_value(step_value, line, mode, warnings)?;
        if step.index != pos {
            return Err(malformed(
                line,
                format!("step indices must be consecutive from 0 (expected {pos}, got {})", step.index),
            ));
        }
        steps.push(step);
    }

    let final_state = state_from_fields(
        &Fields::new(fields.required("final_state")?, "final_state", line)?,
        mode,
        warnings,
        true,
    )?;

    Ok((
        TaskSpec { task_id: task_id.clone(), instruction },
        Trajectory { trajectory_id, task_id, label, steps, final_state },
    ))
}

fn step_from_value(
    value: &Value,
    line: usize,
    mode: ParseMode,
    warnings: &mut Vec<ParseWarning>,
) -> Result<Step, CorpusError> {
    let fields = Fields::new(value, "step", line)?;
    fields.check_unknown(
        &[
            "index",
            "url",
            "screenshot_hash",
            "dom_digest",
            "action",
            "effective",
            "format_valid",
        ],
        mode,
        warnings,
    )?;

    let index = fields
        .required("index")?
        .as_u64()
        .ok_or_else(|| malformed(line, "step index must be a non-negative integer"))?
        as usize;
    let state = state_from_fields(&fields, mode, warnings, false)?;

    let action_fields = Fields::new(fields.required("action")?, "action", line)?;
    action_fields.check_unknown(&["kind", "target", "value", "raw"], mode, warnings)?;
    let kind_str = action_fields.string("kind")?;
    let kind = ActionKind::parse(&kind_str)
        .ok_or_else(|| malformed(line, format!("unknown action kind {kind_str:?}")))?;
    let action = Action {
        kind,
        target: action_fields.string("target")?,
        value: action_fields.opt_string("value")?,
        raw: action_fields.string("raw")?,
    };

    Ok(Step {
        index,
        state,
        action,
        effective: fields.opt_bool("effective")?,
        format_valid: fields.opt_bool("format_valid")?,
    })
}

fn state_from_fields(
    fields: &Fields<'_>,
    mode: ParseMode,
    warnings: &mut Vec<ParseWarning>,
    standalone: bool,
) -> Result<StateObservation, CorpusError> {
    if standalone {
        fields.check_unknown(&["url", "screenshot_hash", "dom_digest"], mode, warnings)?;
    }
    let url = fields.string("url")?;
    if url.is_empty() {
        return Err(malformed(fields.line, "url must be non-empty"));
    }
    let screenshot_hash = fields.opt_string("screenshot_hash")?;
    let dom_digest = fields.opt_string("dom_digest")?;
    for (name, digest) in [("screenshot_hash", &screenshot_hash), ("dom_digest", &dom_digest)] {
        if let Some(d) = digest {
            validate_hex_digest(name, d, fields.line)?;
        }
    }
    Ok(StateObservation { url, screenshot_hash, dom_digest })
}

fn validate_hex_digest(name: &str, digest: &str, line: usize) -> Result<(), CorpusError> {
    let whole_bytes = digest.len() % 2 == 0 && !digest.is_empty();
    if !whole_bytes || !digest.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()) {
        return Err(malformed(
            line,
            format!("{name} must be an even-length lowercase hex digest (got {digest:?})"),
        ));
    }
    Ok(())
}
