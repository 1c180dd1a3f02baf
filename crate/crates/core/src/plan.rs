//! Instruction profiles and the rule-based task planner.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::DefectCategory;

/// A task toggle a user can switch on in a profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toggle {
    Detect,
    Segment,
    Recompose,
    Curate,
    Evaluate,
}

impl FromStr for Toggle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "detect" => Toggle::Detect,
            "segment" => Toggle::Segment,
            "recompose" => Toggle::Recompose,
            "curate" => Toggle::Curate,
            "evaluate" => Toggle::Evaluate,
            other => return Err(Error::UnknownToggle(other.into())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionStrategy {
    Union,
    Intersection,
    #[default]
    Adjudicated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPolicy {
    Bbox,
    Points,
    Text,
    #[default]
    Adjudicated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionProfile {
    pub toggles: BTreeSet<Toggle>,
    pub categories: BTreeSet<DefectCategory>,
    pub detection_strategy: DetectionStrategy,
    pub segmentation_prompt_policy: PromptPolicy,
    pub seed: u64,
}

fn field<T: serde::de::DeserializeOwned>(doc: &serde_json::Map<String, Value>, key: &str) -> Result<Option<T>> {
    match doc.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|e| Error::Config(alloc::format!("{key}: {e}"))),
    }
}

/// Normalizes a raw profile document, filling defaults.
///
/// Keys other than the profile fields are ignored so callers can keep
/// run settings in the same document.
pub fn interpret_profile(raw: &Value) -> Result<InstructionProfile> {
    let doc = raw
        .as_object()
        .ok_or_else(|| Error::Config("profile must be an object".into()))?;
    let names: Vec<String> = field(doc, "toggles")?.unwrap_or_default();
    if names.is_empty() {
        return Err(Error::NoToggles);
    }
    let toggles = names.iter().map(|n| n.parse()).collect::<Result<BTreeSet<Toggle>>>()?;
    let categories = match field::<Vec<String>>(doc, "categories")? {
        None => DefectCategory::ALL.into_iter().collect(),
        Some(list) if list.is_empty() => return Err(Error::NoCategories),
        Some(list) => list.iter().map(|c| c.parse()).collect::<Result<BTreeSet<_>>>()?,
    };
    Ok(InstructionProfile {
        toggles,
        categories,
        detection_strategy: field(doc, "detection_strategy")?.unwrap_or_default(),
        segmentation_prompt_policy: field(doc, "segmentation_prompt_policy")?.unwrap_or_default(),
        seed: field(doc, "seed")?.unwrap_or(0),
    })
}

/// Executable pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Curate,
    Detect,
    Segment,
    Inpaint,
    Retrieve,
    Compose,
    Verify,
    Archive,
    Evaluate,
}

impl TaskKind {
    pub const ALL: [TaskKind; 9] = [
        TaskKind::Curate,
        TaskKind::Detect,
        TaskKind::Segment,
        TaskKind::Inpaint,
        TaskKind::Retrieve,
        TaskKind::Compose,
        TaskKind::Verify,
        TaskKind::Archive,
        TaskKind::Evaluate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Curate => "curate",
            TaskKind::Detect => "detect",
            TaskKind::Segment => "segment",
            TaskKind::Inpaint => "inpaint",
            TaskKind::Retrieve => "retrieve",
            TaskKind::Compose => "compose",
            TaskKind::Verify => "verify",
            TaskKind::Archive => "archive",
            TaskKind::Evaluate => "evaluate",
        }
    }

    /// Fixed prerequisites. `Evaluate` depends on whichever perception
    /// stages are present, so it is resolved in [`plan`].
    pub fn prerequisites(self) -> &'static [TaskKind] {
        match self {
            TaskKind::Curate | TaskKind::Detect | TaskKind::Evaluate => &[],
            TaskKind::Segment => &[TaskKind::Detect],
            TaskKind::Inpaint => &[TaskKind::Segment],
            TaskKind::Retrieve => &[TaskKind::Inpaint],
            TaskKind::Compose => &[TaskKind::Retrieve],
            TaskKind::Verify => &[TaskKind::Compose],
            TaskKind::Archive => &[TaskKind::Verify],
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub id: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub nodes: Vec<PlanNode>,
    /// `(from, to)`: `to` waits for `from`.
    pub edges: Vec<(String, String)>,
}

fn required_kinds(profile: &InstructionProfile) -> BTreeSet<TaskKind> {
    let mut kinds = BTreeSet::new();
    for t in &profile.toggles {
        match t {
            Toggle::Detect => {
                kinds.insert(TaskKind::Detect);
            }
            Toggle::Segment => {
                kinds.insert(TaskKind::Segment);
            }
            Toggle::Recompose => {
                kinds.insert(TaskKind::Archive);
            }
            Toggle::Curate => {
                kinds.insert(TaskKind::Curate);
            }
            Toggle::Evaluate => {
                kinds.insert(TaskKind::Evaluate);
            }
        }
    }
    let mut stack: Vec<TaskKind> = kinds.iter().copied().collect();
    while let Some(k) = stack.pop() {
        for &dep in k.prerequisites() {
            if kinds.insert(dep) {
                stack.push(dep);
            }
        }
    }
    if kinds.contains(&TaskKind::Evaluate) && !kinds.contains(&TaskKind::Detect) {
        kinds.insert(TaskKind::Detect);
    }
    kinds
}

/// Prerequisites of `kind` given the set of kinds present in a plan.
fn dependencies_in(kind: TaskKind, present: &BTreeSet<TaskKind>) -> Vec<TaskKind> {
    match kind {
        TaskKind::Evaluate => [TaskKind::Detect, TaskKind::Segment]
            .into_iter()
            .filter(|k| present.contains(k))
            .collect(),
        other => other.prerequisites().to_vec(),
    }
}

fn node_params(kind: TaskKind, profile: &InstructionProfile) -> Value {
    let categories: Vec<&str> = profile.categories.iter().map(|c| c.as_str()).collect();
    match kind {
        TaskKind::Detect => serde_json::json!({ "strategy": profile.detection_strategy, "categories": categories }),
        TaskKind::Segment => serde_json::json!({ "prompt_policy": profile.segmentation_prompt_policy }),
        TaskKind::Retrieve => serde_json::json!({ "categories": categories }),
        _ => Value::Object(Default::default()),
    }
}

/// Dependency-closed plan for `profile`, nodes in canonical stage order.
pub fn plan(profile: &InstructionProfile) -> TaskPlan {
    let kinds = required_kinds(profile);
    let nodes = kinds
        .iter()
        .map(|&k| PlanNode {
            id: k.as_str().into(),
            kind: k,
            params: node_params(k, profile),
        })
        .collect();
    let mut edges = Vec::new();
    for &k in &kinds {
        for dep in dependencies_in(k, &kinds) {
            edges.push((dep.as_str().to_string(), k.as_str().to_string()));
        }
    }
    TaskPlan { nodes, edges }
}

impl TaskPlan {
    pub fn node(&self, id: &str) -> Option<&PlanNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Direct dependencies of `id`.
    pub fn dependencies(&self, id: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|(_, to)| to == id)
            .map(|(from, _)| from.as_str())
            .collect()
    }

    /// Every node that transitively depends on `id`.
    pub fn dependents(&self, id: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack = alloc::vec![id.to_string()];
        while let Some(cur) = stack.pop() {
            for (from, to) in &self.edges {
                if *from == cur && out.insert(to.clone()) {
                    stack.push(to.clone());
                }
            }
        }
        out
    }

    /// Kahn order, ties broken by node position.
    pub fn topological_order(&self) -> Result<Vec<&str>> {
        let index: BTreeMap<&str, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
        let mut indegree = alloc::vec![0usize; self.nodes.len()];
        for (from, to) in &self.edges {
            let (Some(_), Some(&t)) = (index.get(from.as_str()), index.get(to.as_str())) else {
                return Err(Error::InvalidPlan(alloc::format!("edge {from} -> {to} references a missing node")));
            };
            indegree[t] += 1;
        }
        let mut ready: BTreeSet<usize> = (0..self.nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop_first() {
            let id = self.nodes[i].id.as_str();
            order.push(id);
            for (from, to) in &self.edges {
                if from == id {
                    let t = index[to.as_str()];
                    indegree[t] -= 1;
                    if indegree[t] == 0 {
                        ready.insert(t);
                    }
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(Error::InvalidPlan("dependency cycle".into()));
        }
        Ok(order)
    }

    /// Structural checks: unique ids, existing edge endpoints, acyclic, and
    /// every node's prerequisites present with an edge to it.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id.as_str()) {
                return Err(Error::InvalidPlan(alloc::format!("duplicate node {}", n.id)));
            }
        }
        self.topological_order()?;
        let present: BTreeSet<TaskKind> = self.nodes.iter().map(|n| n.kind).collect();
        for n in &self.nodes {
            let deps = self.dependencies(&n.id);
            for need in dependencies_in(n.kind, &present) {
                let satisfied = deps
                    .iter()
                    .any(|d| self.node(d).is_some_and(|dn| dn.kind == need));
                if !satisfied {
                    return Err(Error::InvalidPlan(alloc::format!("{} must run after {}", n.id, need)));
                }
            }
        }
        Ok(())
    }

    /// Validates a foreign plan against the rule-based plan for `profile`:
    /// same stages, dependency-closed, acyclic.
    pub fn validate_for(&self, profile: &InstructionProfile) -> Result<()> {
        self.validate()?;
        let expected = required_kinds(profile);
        let got: BTreeSet<TaskKind> = self.nodes.iter().map(|n| n.kind).collect();
        if got != expected || self.nodes.len() != expected.len() {
            return Err(Error::InvalidPlan("plan stages differ from the profile".into()));
        }
        Ok(())
    }
}
