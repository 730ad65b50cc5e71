//! High-level attack planning: goal → tactic → technique → procedure trees
//! and a prioritised task queue.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ChatMessage, CompletionRequest, LlmBackend, LlmError, ModelParams};

const PLAN_SYSTEM: &str = "You are assisting an authorized penetration test. Break the goal into a \
numbered outline: tactics as top-level items, techniques indented beneath their tactic, and \
concrete procedures indented beneath their technique. Output only the outline.";
const CREATE_SYSTEM: &str = "You are assisting an authorized penetration test. List follow-up \
subtasks for the task below as a bulleted list, one subtask per line. Output only the list.";
const PRIORITIZE_SYSTEM: &str = "You order penetration-test tasks. Reply with the task ids in \
priority order, highest first, separated by commas. Output only the ids.";

static OUTLINE_ITEM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^([ \t]*)(?:\d+(?:\.\d+)*[.)]?|[-*+•])\s+(.*\S)\s*$").unwrap());
static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").unwrap());

/// Technique names used to tag nodes with ATT&CK-style ids.
pub const SEED_CATALOG: &[(&str, &str)] = &[
    ("password spraying", "T1110.003"),
    ("brute force", "T1110"),
    ("credential stuffing", "T1110.004"),
    ("kerberoasting", "T1558.003"),
    ("as-rep roasting", "T1558.004"),
    ("golden ticket", "T1558.001"),
    ("silver ticket", "T1558.002"),
    ("pass the hash", "T1550.002"),
    ("pass-the-hash", "T1550.002"),
    ("pass the ticket", "T1550.003"),
    ("dcsync", "T1003.006"),
    ("lsass", "T1003.001"),
    ("ntds", "T1003.003"),
    ("phishing", "T1566"),
    ("network service discovery", "T1046"),
    ("port scan", "T1046"),
    ("account discovery", "T1087"),
    ("domain trust discovery", "T1482"),
    ("permission groups discovery", "T1069"),
    ("remote system discovery", "T1018"),
    ("valid accounts", "T1078"),
    ("sudo", "T1548.003"),
    ("setuid", "T1548.001"),
    ("suid", "T1548.001"),
    ("scheduled task", "T1053"),
    ("cron", "T1053.003"),
    ("exploitation for privilege escalation", "T1068"),
    ("remote services", "T1021"),
    ("llmnr", "T1557.001"),
    ("group policy", "T1484.001"),
];

pub fn attack_label(description: &str) -> Option<&'static str> {
    let lower = description.to_lowercase();
    SEED_CATALOG
        .iter()
        .find(|(name, _)| lower.contains(name))
        .map(|(_, id)| *id)
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("goal must not be empty")]
    EmptyGoal,
    #[error("answer contains no list items")]
    UnparseablePlan,
    #[error("unknown task {0}")]
    UnknownTask(u32),
    #[error("task {0} is neither done nor in progress")]
    TaskNotStarted(u32),
    #[error(transparent)]
    Backend(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Goal,
    Tactic,
    Technique,
    Procedure,
}

impl NodeKind {
    fn child(self) -> NodeKind {
        match self {
            NodeKind::Goal => NodeKind::Tactic,
            NodeKind::Tactic => NodeKind::Technique,
            NodeKind::Technique | NodeKind::Procedure => NodeKind::Procedure,
        }
    }

    fn at_depth(depth: usize) -> NodeKind {
        match depth {
            0 => NodeKind::Tactic,
            1 => NodeKind::Technique,
            _ => NodeKind::Procedure,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Open,
    InProgress,
    Done,
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskNode {
    pub id: u32,
    pub description: String,
    pub kind: NodeKind,
    pub parent: Option<u32>,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_id: Option<String>,
}

/// Nodes in creation order; node `n` lives at index `n - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanTree {
    pub nodes: Vec<TaskNode>,
}

impl PlanTree {
    pub fn new(goal: &str) -> Self {
        Self {
            nodes: vec![TaskNode {
                id: 1,
                description: goal.trim().to_string(),
                kind: NodeKind::Goal,
                parent: None,
                status: TaskStatus::Open,
                attack_id: None,
            }],
        }
    }

    pub fn root(&self) -> &TaskNode {
        &self.nodes[0]
    }

    pub fn get(&self, id: u32) -> Option<&TaskNode> {
        id.checked_sub(1).and_then(|i| self.nodes.get(i as usize))
    }

    pub fn get_mut(&mut self, id: u32) -> Option<&mut TaskNode> {
        id.checked_sub(1).and_then(|i| self.nodes.get_mut(i as usize))
    }

    pub fn add(&mut self, parent: u32, kind: NodeKind, description: &str) -> u32 {
        let id = self.nodes.len() as u32 + 1;
        self.nodes.push(TaskNode {
            id,
            description: description.to_string(),
            kind,
            parent: Some(parent),
            status: TaskStatus::Open,
            attack_id: attack_label(description).map(str::to_string),
        });
        id
    }

    pub fn children(&self, id: u32) -> impl Iterator<Item = &TaskNode> {
        self.nodes.iter().filter(move |n| n.parent == Some(id))
    }

    pub fn of_kind(&self, kind: NodeKind) -> impl Iterator<Item = &TaskNode> {
        self.nodes.iter().filter(move |n| n.kind == kind)
    }

    /// Single goal root and non-decreasing kinds along every path.
    pub fn validate(&self) -> Result<(), String> {
        let goals = self.of_kind(NodeKind::Goal).count();
        if goals != 1 || self.nodes.first().map(|n| n.kind) != Some(NodeKind::Goal) {
            return Err(format!("expected exactly one goal at the root, found {goals}"));
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.id as usize != idx + 1 {
                return Err(format!("node at index {idx} has id {}", node.id));
            }
            match (node.kind, node.parent) {
                (NodeKind::Goal, None) => {}
                (NodeKind::Goal, Some(_)) => return Err(format!("goal node {} has a parent", node.id)),
                (_, None) => return Err(format!("node {} has no parent", node.id)),
                (kind, Some(parent)) => {
                    let parent = self.get(parent).ok_or(format!("node {} has unknown parent", node.id))?;
                    if parent.id >= node.id {
                        return Err(format!("node {} precedes its parent", node.id));
                    }
                    let inverted = parent.kind > kind || (parent.kind == kind && kind != NodeKind::Procedure);
                    if inverted {
                        return Err(format!("node {} ({:?}) under {:?}", node.id, kind, parent.kind));
                    }
                }
            }
        }
        Ok(())
    }

    /// Indented plain-text outline.
    pub fn render_outline(&self) -> String {
        let mut out = String::new();
        self.render_node(self.root().id, 0, &mut out);
        out
    }

    fn render_node(&self, id: u32, depth: usize, out: &mut String) {
        let node = self.get(id).expect("rendered node exists");
        let status = match node.status {
            TaskStatus::Open => " ",
            TaskStatus::InProgress => ">",
            TaskStatus::Done => "x",
            TaskStatus::Discarded => "-",
        };
        let label = node.attack_id.as_deref().map(|a| format!(" ({a})")).unwrap_or_default();
        out.push_str(&format!(
            "{}[{status}] #{} {:?}: {}{label}\n",
            "  ".repeat(depth),
            node.id,
            node.kind,
            node.description
        ));
        let children: Vec<u32> = self.children(id).map(|c| c.id).collect();
        for child in children {
            self.render_node(child, depth + 1, out);
        }
    }
}

fn clean_item(text: &str) -> String {
    text.replace("**", "").trim().trim_end_matches(':').trim().to_string()
}

fn indent_width(ws: &str) -> usize {
    ws.chars().map(|c| if c == '\t' { 4 } else { 1 }).sum()
}

/// Parse an LLM outline into a tree under `goal`. Every list line becomes one node.
pub fn parse_outline(goal: &str, answer: &str) -> Result<PlanTree, PlanError> {
    if goal.trim().is_empty() {
        return Err(PlanError::EmptyGoal);
    }
    let mut tree = PlanTree::new(goal);
    let mut stack: Vec<(usize, u32)> = Vec::new();
    for line in answer.lines() {
        let Some(caps) = OUTLINE_ITEM.captures(line) else {
            continue;
        };
        let description = clean_item(&caps[2]);
        if description.is_empty() {
            continue;
        }
        let width = indent_width(&caps[1]);
        while stack.last().is_some_and(|(w, _)| *w >= width) {
            stack.pop();
        }
        let parent = stack.last().map_or(tree.root().id, |(_, id)| *id);
        let id = tree.add(parent, NodeKind::at_depth(stack.len()), &description);
        stack.push((width, id));
    }
    if tree.nodes.len() == 1 {
        return Err(PlanError::UnparseablePlan);
    }
    Ok(tree)
}

fn ask(backend: &dyn LlmBackend, params: &ModelParams, system: &str, user: String) -> Result<String, LlmError> {
    let request = CompletionRequest::new(vec![ChatMessage::system(system), ChatMessage::user(user)], params);
    Ok(backend.complete(&request)?.text)
}

/// Ask the backend to decompose `goal`.
pub fn plan(goal: &str, backend: &dyn LlmBackend, params: &ModelParams) -> Result<PlanTree, PlanError> {
    if goal.trim().is_empty() {
        return Err(PlanError::EmptyGoal);
    }
    let answer = ask(backend, params, PLAN_SYSTEM, format!("Goal: {}", goal.trim()))?;
    parse_outline(goal, &answer)
}

/// Work queue of task ids; earlier means higher priority.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskQueue {
    pub ids: Vec<u32>,
}

impl TaskQueue {
    /// All non-goal nodes in creation order.
    pub fn from_tree(tree: &PlanTree) -> Self {
        Self {
            ids: tree
                .nodes
                .iter()
                .filter(|n| n.kind != NodeKind::Goal && n.status == TaskStatus::Open)
                .map(|n| n.id)
                .collect(),
        }
    }

    pub fn push(&mut self, id: u32) {
        if !self.ids.contains(&id) {
            self.ids.push(id);
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Ask for follow-up subtasks of a started or finished node and queue them.
pub fn create_tasks(
    tree: &mut PlanTree,
    queue: &mut TaskQueue,
    node_id: u32,
    backend: &dyn LlmBackend,
    params: &ModelParams,
) -> Result<Vec<u32>, PlanError> {
    let node = tree.get(node_id).ok_or(PlanError::UnknownTask(node_id))?.clone();
    if !matches!(node.status, TaskStatus::Done | TaskStatus::InProgress) {
        return Err(PlanError::TaskNotStarted(node_id));
    }
    let answer = ask(backend, params, CREATE_SYSTEM, format!("Task: {}", node.description))?;
    let items: Vec<String> = answer
        .lines()
        .filter_map(|line| OUTLINE_ITEM.captures(line).map(|c| clean_item(&c[2])))
        .filter(|d| !d.is_empty())
        .collect();
    let kind = node.kind.child();
    let mut created = Vec::new();
    for description in items {
        let id = tree.add(node_id, kind, &description);
        queue.push(id);
        created.push(id);
    }
    Ok(created)
}

/// Reorder the queue by backend advice. Unknown and duplicate ids are dropped,
/// omitted ids keep their order at the tail. Without a backend, or on a
/// useless answer, the queue is returned unchanged.
pub fn prioritize(
    queue: &TaskQueue,
    tree: &PlanTree,
    backend: Option<&dyn LlmBackend>,
    params: &ModelParams,
) -> TaskQueue {
    let Some(backend) = backend else {
        return queue.clone();
    };
    if queue.ids.len() < 2 {
        return queue.clone();
    }
    let listing: String = queue
        .ids
        .iter()
        .filter_map(|id| tree.get(*id))
        .map(|n| format!("{}: {}\n", n.id, n.description))
        .collect();
    let answer = match ask(backend, params, PRIORITIZE_SYSTEM, listing) {
        Ok(answer) => answer,
        Err(err) => {
            tracing::warn!(%err, "prioritization failed, keeping order");
            return queue.clone();
        }
    };
    let known: BTreeSet<u32> = queue.ids.iter().copied().collect();
    let mut seen = BTreeSet::new();
    let mut ordered: Vec<u32> = Vec::new();
    for m in NUMBER.find_iter(&answer) {
        let Ok(id) = m.as_str().parse::<u32>() else {
            continue;
        };
        if known.contains(&id) && seen.insert(id) {
            ordered.push(id);
        }
    }
    if ordered.is_empty() {
        tracing::warn!(answer = %answer, "prioritization answer named no known ids, keeping order");
        return queue.clone();
    }
    ordered.extend(queue.ids.iter().copied().filter(|id| !seen.contains(id)));
    TaskQueue { ids: ordered }
}

/// Take the highest-ranked open task and mark it in progress.
pub fn pop_next(queue: &mut TaskQueue, tree: &mut PlanTree) -> Option<TaskNode> {
    let pos = queue
        .ids
        .iter()
        .position(|id| tree.get(*id).is_some_and(|n| n.status == TaskStatus::Open))?;
    let id = queue.ids.remove(pos);
    let node = tree.get_mut(id).expect("queued node exists");
    node.status = TaskStatus::InProgress;
    Some(node.clone())
}
