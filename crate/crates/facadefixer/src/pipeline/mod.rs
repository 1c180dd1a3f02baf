//! Plan execution with checkpointing.
//!
//! A run directory holds `plan.json`, `state.json`, `report.json` and an
//! `artifacts/` tree. Every finished node writes its output to
//! `artifacts/<sha256>.json` before `state.json` marks it done, so an
//! interrupted run resumes from the last completed node.

mod nodes;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use facadefixer_core::curation::CurationConfig;
use facadefixer_core::fusion::FusionConfig;
use facadefixer_core::hash::sha256_hex;
use facadefixer_core::plan::{interpret_profile, plan, InstructionProfile, TaskKind, TaskPlan};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use nodes::{
    ArchiveOutput, BackgroundRecord, DetectImage, DetectOutput, InpaintOutput, RetrieveRecord, SampleRecord,
    SegInstance, SegmentImage, SegmentOutput, VerifyRecord,
};

use crate::bank_store::BankStore;
use crate::dataset::{self, DatasetItem};
use crate::error::{read, read_json, write_atomic, write_json, Error, Result};
use crate::gateway::{ExpertsConfig, Gateway, PlanSource};
use crate::recompose::RecomposeSettings;

pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerChoice {
    #[default]
    Rule,
    /// Ask the adjudicator endpoint for a plan, validated against the rule-based one.
    Endpoint,
}

/// Run settings carried next to the profile fields in the profile document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    /// Dataset directory, relative to the profile file.
    pub dataset: PathBuf,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub curation: CurationConfig,
    #[serde(default)]
    pub recompose: RecomposeSettings,
    #[serde(default)]
    pub planner: PlannerChoice,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: InstructionProfile,
    pub settings: RunSettings,
}

impl RunConfig {
    pub fn from_document(doc: &Value, base: &Path) -> Result<Self> {
        let profile = interpret_profile(doc)?;
        if doc.get("dataset").is_none() {
            return Err(Error::Config("profile names no dataset directory".into()));
        }
        let mut settings: RunSettings =
            serde_json::from_value(doc.clone()).map_err(|e| Error::Config(format!("profile: {e}")))?;
        settings.dataset = base.join(&settings.dataset);
        settings.fusion.validate()?;
        settings.curation.validate()?;
        Ok(Self { profile, settings })
    }

    /// Reads a JSON or TOML (by `.toml` extension) profile document.
    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8(read(path)?).map_err(|e| Error::format(path, e))?;
        let doc: Value = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::format(path, e))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::format(path, e))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_document(&doc, base).map_err(|e| Error::format(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Pending,
    Running,
    Done,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub status: NodeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_ms: Option<u64>,
}

impl NodeState {
    fn pending() -> Self {
        Self {
            status: NodeStatus::Pending,
            checkpoint: None,
            error: None,
            started_ms: None,
            finished_ms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub version: u32,
    pub config_digest: String,
    pub seed: u64,
    pub nodes: BTreeMap<String, NodeState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    node: String,
    kind: TaskKind,
    artifacts: Vec<String>,
    summary: Value,
    output: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub id: String,
    pub kind: TaskKind,
    pub status: NodeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default)]
    pub summary: Value,
    /// Milliseconds since the run started. Excluded from the comparable digest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub seed: u64,
    pub config_digest: String,
    pub planner: PlanSourceRecord,
    pub plan: TaskPlan,
    pub nodes: Vec<NodeReport>,
    /// Artifact ids per node.
    pub artifacts: BTreeMap<String, Vec<String>>,
    /// Digest of this report with timings removed.
    pub comparable_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSourceRecord {
    Rule,
    Endpoint,
    Fallback { reason: String },
}

impl From<PlanSource> for PlanSourceRecord {
    fn from(s: PlanSource) -> Self {
        match s {
            PlanSource::Endpoint => PlanSourceRecord::Endpoint,
            PlanSource::Fallback(reason) => PlanSourceRecord::Fallback { reason },
        }
    }
}

impl RunReport {
    pub fn node(&self, id: &str) -> Option<&NodeReport> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Digest over everything except wall-clock timings.
    pub fn compute_comparable_digest(&self) -> String {
        let mut clean = self.clone();
        clean.comparable_digest.clear();
        for n in &mut clean.nodes {
            n.started_ms = None;
            n.finished_ms = None;
        }
        sha256_hex(&serde_json::to_vec(&clean).expect("report serializes"))
    }

    pub fn failed(&self) -> bool {
        self.nodes.iter().any(|n| n.status == NodeStatus::Failed)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Overrides the profile's seed.
    pub seed: Option<u64>,
    /// Discard any previous state in the run directory.
    pub fresh: bool,
    /// Stop (as if killed) right after this node is checkpointed.
    pub halt_after: Option<String>,
}

pub(crate) struct RunContext<'a> {
    pub config: &'a RunConfig,
    pub gateway: &'a Gateway,
    pub bank: &'a BankStore,
    pub run_dir: &'a Path,
    pub dataset: &'a [DatasetItem],
    pub seed: u64,
}

fn dataset_digest(items: &[DatasetItem]) -> Result<String> {
    let mut parts = Vec::new();
    for it in items {
        parts.push(sha256_hex(&read(&it.sidecar_path)?));
        parts.push(sha256_hex(&read(&it.image_path)?));
    }
    Ok(sha256_hex(parts.join("\n").as_bytes()))
}

fn config_digest(config: &RunConfig, experts: &ExpertsConfig, dataset: &str, seed: u64) -> String {
    let mut settings = serde_json::to_value(&config.settings).expect("settings serialize");
    settings["dataset"] = json!(dataset);
    let doc = json!({
        "profile": config.profile,
        "settings": settings,
        "experts": experts,
        "seed": seed,
    });
    sha256_hex(doc.to_string().as_bytes())
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

fn load_checkpoint(run_dir: &Path, name: &str) -> Option<Checkpoint> {
    let path = run_dir.join("artifacts").join(name);
    let bytes = std::fs::read(&path).ok()?;
    // Content addressing doubles as an integrity check.
    if format!("{}.json", sha256_hex(&bytes)) != name {
        return None;
    }
    serde_json::from_slice(&bytes).ok()
}

/// Executes `plan` against the run directory `run_dir`, resuming from
/// `state.json` when it belongs to the same configuration.
pub fn execute(
    task_plan: &TaskPlan,
    planner: PlanSourceRecord,
    config: &RunConfig,
    gateway: &Gateway,
    bank: &BankStore,
    run_dir: &Path,
    opts: &RunOptions,
) -> Result<RunReport> {
    let order: Vec<String> = task_plan.topological_order()?.into_iter().map(String::from).collect();
    let dataset = dataset::list(&config.settings.dataset)?;
    let seed = opts.seed.unwrap_or(config.profile.seed);
    let digest = config_digest(config, gateway.config(), &dataset_digest(&dataset)?, seed);
    std::fs::create_dir_all(run_dir.join("artifacts")).map_err(Error::io(run_dir))?;
    write_json(&run_dir.join("plan.json"), task_plan)?;

    let state_path = run_dir.join("state.json");
    let mut state = PipelineState {
        version: STATE_VERSION,
        config_digest: digest.clone(),
        seed,
        nodes: order.iter().map(|id| (id.clone(), NodeState::pending())).collect(),
    };
    if !opts.fresh && state_path.exists() {
        let previous: PipelineState = read_json(&state_path)?;
        if previous.version != STATE_VERSION || previous.config_digest != digest {
            return Err(Error::Config(format!(
                "{} holds a run with a different configuration; pass --fresh to start over",
                run_dir.display()
            )));
        }
        for (id, prev) in previous.nodes {
            if prev.status == NodeStatus::Done && state.nodes.contains_key(&id) {
                state.nodes.insert(id, prev);
            }
        }
    }

    let kinds: BTreeMap<String, TaskKind> = task_plan.nodes.iter().map(|n| (n.id.clone(), n.kind)).collect();
    let mut outputs: BTreeMap<TaskKind, Value> = BTreeMap::new();
    let mut checkpoints: BTreeMap<String, Checkpoint> = BTreeMap::new();
    for (id, ns) in state.nodes.iter_mut() {
        if ns.status != NodeStatus::Done {
            continue;
        }
        match ns.checkpoint.as_deref().and_then(|c| load_checkpoint(run_dir, c)) {
            Some(cp) => {
                outputs.insert(kinds[id], cp.output.clone());
                checkpoints.insert(id.clone(), cp);
            }
            None => *ns = NodeState::pending(),
        }
    }

    let ctx = RunContext {
        config,
        gateway,
        bank,
        run_dir,
        dataset: &dataset,
        seed,
    };
    let start = Instant::now();
    loop {
        // Skips propagate transitively: order is topological.
        for id in &order {
            if state.nodes[id].status != NodeStatus::Pending {
                continue;
            }
            let blocked = task_plan
                .dependencies(id)
                .iter()
                .any(|d| matches!(state.nodes[*d].status, NodeStatus::Failed | NodeStatus::Skipped));
            if blocked {
                state.nodes.get_mut(id).expect("node in state").status = NodeStatus::Skipped;
            }
        }
        let ready: Vec<String> = order
            .iter()
            .filter(|id| {
                state.nodes[*id].status == NodeStatus::Pending
                    && task_plan
                        .dependencies(id)
                        .iter()
                        .all(|d| state.nodes[*d].status == NodeStatus::Done)
            })
            .cloned()
            .collect();
        if ready.is_empty() {
            break;
        }
        for id in &ready {
            let ns = state.nodes.get_mut(id).expect("node in state");
            ns.status = NodeStatus::Running;
            ns.started_ms = Some(elapsed_ms(start));
        }
        write_json(&state_path, &state)?;

        let results: Vec<Result<nodes::NodeOutcome>> = std::thread::scope(|s| {
            let handles: Vec<_> = ready
                .iter()
                .map(|id| {
                    let (kind, ctx, outputs) = (kinds[id], &ctx, &outputs);
                    s.spawn(move || nodes::run(kind, ctx, outputs))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Config("node panicked".into())))
                })
                .collect()
        });

        for (id, result) in ready.iter().zip(results) {
            let finished = elapsed_ms(start);
            let ns = state.nodes.get_mut(id).expect("node in state");
            ns.finished_ms = Some(finished);
            match result {
                Ok(out) => {
                    let cp = Checkpoint {
                        node: id.clone(),
                        kind: kinds[id],
                        artifacts: out.artifacts,
                        summary: out.summary,
                        output: out.output,
                    };
                    let bytes = serde_json::to_vec(&cp).expect("checkpoint serializes");
                    let name = format!("{}.json", sha256_hex(&bytes));
                    write_atomic(&run_dir.join("artifacts").join(&name), &bytes)?;
                    ns.status = NodeStatus::Done;
                    ns.checkpoint = Some(name);
                    outputs.insert(kinds[id], cp.output.clone());
                    checkpoints.insert(id.clone(), cp);
                }
                Err(e) => {
                    ns.status = NodeStatus::Failed;
                    ns.error = Some(e.to_string());
                }
            }
        }
        write_json(&state_path, &state)?;
        if let Some(halt) = &opts.halt_after {
            if ready.contains(halt) && state.nodes[halt].status == NodeStatus::Done {
                return Err(Error::Halted(halt.clone()));
            }
        }
    }

    let mut report = RunReport {
        version: STATE_VERSION,
        seed,
        config_digest: digest,
        planner,
        plan: task_plan.clone(),
        nodes: order
            .iter()
            .map(|id| {
                let ns = &state.nodes[id];
                let cp = checkpoints.get(id);
                NodeReport {
                    id: id.clone(),
                    kind: kinds[id],
                    status: ns.status,
                    error: ns.error.clone(),
                    checkpoint: ns.checkpoint.clone(),
                    summary: cp.map(|c| c.summary.clone()).unwrap_or(Value::Null),
                    started_ms: ns.started_ms,
                    finished_ms: ns.finished_ms,
                }
            })
            .collect(),
        artifacts: checkpoints
            .iter()
            .map(|(id, cp)| (id.clone(), cp.artifacts.clone()))
            .collect(),
        comparable_digest: String::new(),
    };
    report.comparable_digest = report.compute_comparable_digest();
    write_json(&run_dir.join("report.json"), &report)?;
    Ok(report)
}

/// Plans according to the run settings and executes.
pub fn run(config: &RunConfig, gateway: &Gateway, bank: &BankStore, run_dir: &Path, opts: &RunOptions) -> Result<RunReport> {
    let (task_plan, source) = match config.settings.planner {
        PlannerChoice::Rule => (plan(&config.profile), PlanSourceRecord::Rule),
        PlannerChoice::Endpoint => {
            let (p, s) = gateway.plan_via_endpoint(&config.profile);
            (p, s.into())
        }
    };
    execute(&task_plan, source, config, gateway, bank, run_dir, opts)
}

/// `facadefixer inspect`: loads the profile, roster and bank, then runs.
pub fn inspect(profile: &Path, experts: &Path, bank_dir: &Path, out: &Path, opts: &RunOptions) -> Result<RunReport> {
    let config = RunConfig::load(profile)?;
    let gateway = Gateway::with_http(ExpertsConfig::load(experts)?)?;
    let bank = BankStore::open_or_create(bank_dir, gateway.embedding_dim())?;
    if bank.read().dim() != gateway.embedding_dim() {
        return Err(Error::Config(format!(
            "bank dimension {} differs from the embedder dimension {}",
            bank.read().dim(),
            gateway.embedding_dim()
        )));
    }
    run(&config, &gateway, &bank, out, opts)
}
