//! Generators and independent oracles shared by the property tests and the
//! acceptance suite.

#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};
use std::sync::Mutex;

use breachgraph_core::llm_gateway::{ChatBackend, ChatMessage, ChatParams, GatewayError};
use breachgraph_core::plan_sessions::serialize_plan;
use breachgraph_core::task_graph::{validate_graph, ActionKind, PenetrationTaskGraph, TaskDraft, TaskId, TaskNode};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const INSTRUCTION_POOL: &[&str] = &[
    "Scan the target for open ports",
    "Enumerate web directories",
    "Identify the SSH server version",
    "Run nikto against the web server",
    "Brute force the SSH login for student",
    "SSH into the target as student",
    "Search for writable directories",
    "Enumerate running processes",
    "List SUID binaries",
    "Read the crontab entries",
    "Check sudo permissions",
    "Dump the WordPress user table",
];

/// Random spelling of a pool entry that normalizes to the same key.
pub fn respell(rng: &mut ChaCha8Rng, text: &str) -> String {
    text.split(' ')
        .map(|w| match rng.random_range(0..3) {
            0 => w.to_uppercase(),
            1 => w.to_lowercase(),
            _ => w.to_string(),
        })
        .collect::<Vec<_>>()
        .join(if rng.random_bool(0.2) { "  " } else { " " })
}

/// A random valid plan of `1..=max_nodes` tasks with shuffled ids and, when
/// `from_pool`, instructions drawn without repetition from the pool.
pub fn random_dag(rng: &mut ChaCha8Rng, max_nodes: usize, edge_p: f64, from_pool: bool) -> Vec<TaskDraft> {
    let n = rng.random_range(1..=max_nodes);
    let mut ids: Vec<TaskId> = (1..=(n as TaskId * 2)).collect();
    ids.shuffle(rng);
    ids.truncate(n);
    let mut pool: Vec<&str> = INSTRUCTION_POOL.to_vec();
    pool.shuffle(rng);
    let mut drafts: Vec<TaskDraft> = (0..n)
        .map(|i| {
            // dependencies only on tasks earlier in this (topological) order
            let deps: Vec<TaskId> = (0..i).filter(|_| rng.random_bool(edge_p)).map(|j| ids[j]).collect();
            let instruction = if from_pool {
                respell(rng, pool[i % pool.len()])
            } else {
                format!("task number {}", ids[i])
            };
            let action = if rng.random_bool(0.2) { ActionKind::Manual } else { ActionKind::Shell };
            TaskDraft::new(ids[i], deps, instruction, action)
        })
        .collect();
    drafts.shuffle(rng);
    drafts
}

/// Every task appears exactly once and after all its dependencies.
pub fn is_topological(drafts: &[TaskDraft], order: &[TaskId]) -> bool {
    if order.len() != drafts.len() {
        return false;
    }
    let mut done: BTreeSet<TaskId> = BTreeSet::new();
    for id in order {
        let Some(task) = drafts.iter().find(|d| d.id == *id) else {
            return false;
        };
        if !task.dependencies.iter().all(|d| done.contains(d)) || !done.insert(*id) {
            return false;
        }
    }
    true
}

/// Brute-force cycle search: follow every dependency path from every task.
pub fn has_cycle(drafts: &[TaskDraft]) -> bool {
    fn visit(drafts: &[TaskDraft], id: TaskId, path: &mut Vec<TaskId>) -> bool {
        if path.contains(&id) {
            return true;
        }
        let Some(task) = drafts.iter().find(|d| d.id == id) else {
            return false;
        };
        path.push(id);
        let found = task.dependencies.iter().any(|&d| visit(drafts, d, path));
        path.pop();
        found
    }
    drafts.iter().any(|d| visit(drafts, d.id, &mut Vec::new()))
}

/// Random draft list over ids `1..=n` with arbitrary edges (cycles allowed).
pub fn random_drafts_any_edges(rng: &mut ChaCha8Rng, max_nodes: usize) -> Vec<TaskDraft> {
    let n = rng.random_range(1..=max_nodes) as TaskId;
    let p = rng.random_range(0.0..0.4);
    (1..=n)
        .map(|id| {
            let deps: Vec<TaskId> = (1..=n).filter(|&d| d != id && rng.random_bool(p)).collect();
            let self_loop = rng.random_bool(0.02);
            let mut deps = deps;
            if self_loop {
                deps.push(id);
            }
            TaskDraft::new(id, deps, format!("t{id}"), ActionKind::Shell)
        })
        .collect()
}

fn key(text: &str) -> String {
    let mut out = String::new();
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&word.to_lowercase());
    }
    out
}

enum Entry<'a> {
    Kept(&'a TaskNode),
    Reused(&'a TaskNode, &'a TaskDraft),
    Created(&'a TaskDraft),
}

/// The merge algorithm step by step, with the project's identity rule
/// (normalized instruction), output sequencing (position in the merged list)
/// and the rule that a completed task may only depend on completed tasks.
pub fn merge_oracle(new_tasks: &[TaskDraft], old_tasks: &[TaskNode]) -> Vec<TaskNode> {
    let completed: Vec<&TaskNode> = old_tasks.iter().filter(|t| t.finished && t.success).collect();
    let exists_in = |task: &TaskNode, list: &[TaskDraft]| list.iter().any(|n| key(&n.instruction) == key(&task.instruction));
    let get_task = |draft: &TaskDraft| completed.iter().copied().find(|t| key(&t.instruction) == key(&draft.instruction));

    let mut merged: Vec<Entry<'_>> = Vec::new();
    // Step 1: completed tasks the new list does not mention
    for task in &completed {
        if !exists_in(task, new_tasks) {
            merged.push(Entry::Kept(task));
        }
    }
    // Step 2: the new list, reusing completed tasks where they match
    for new_task in new_tasks {
        match get_task(new_task) {
            Some(task) => merged.push(Entry::Reused(task, new_task)),
            None => merged.push(Entry::Created(new_task)),
        }
    }

    let position_of_old = |old_id: TaskId| {
        merged.iter().position(|e| match e {
            Entry::Kept(t) | Entry::Reused(t, _) => t.id == old_id,
            Entry::Created(_) => false,
        })
    };
    let position_of_new = |new_id: TaskId| {
        merged
            .iter()
            .position(|e| match e {
                Entry::Reused(_, n) | Entry::Created(n) => n.id == new_id,
                Entry::Kept(_) => false,
            })
            .expect("new plan references its own tasks")
    };
    let is_completed_at = |pos: usize| !matches!(merged[pos], Entry::Created(_));

    merged
        .iter()
        .enumerate()
        .map(|(pos, entry)| {
            let id = pos as TaskId + 1;
            match entry {
                Entry::Kept(t) => TaskNode {
                    id,
                    dependencies: t
                        .dependencies
                        .iter()
                        .filter_map(|&d| position_of_old(d))
                        .map(|p| p as TaskId + 1)
                        .collect(),
                    ..(*t).clone()
                },
                Entry::Reused(t, n) => TaskNode {
                    id,
                    dependencies: n
                        .dependencies
                        .iter()
                        .map(|&d| position_of_new(d))
                        .filter(|&p| is_completed_at(p))
                        .map(|p| p as TaskId + 1)
                        .collect(),
                    ..(*t).clone()
                },
                Entry::Created(n) => TaskNode {
                    id,
                    instruction: n.instruction.clone(),
                    action: n.action,
                    dependencies: n.dependencies.iter().map(|&d| position_of_new(d) as TaskId + 1).collect(),
                    command: None,
                    result: None,
                    finished: false,
                    success: false,
                },
            }
        })
        .collect()
}

/// A plan from the pool that has been partly executed with random outcomes.
pub fn random_executed_tasks(rng: &mut ChaCha8Rng, max_nodes: usize) -> Vec<TaskNode> {
    let drafts = random_dag(rng, max_nodes, 0.3, true);
    let mut graph = breachgraph_core::task_graph::validate_graph(&drafts).expect("generated plan is valid");
    let rounds = rng.random_range(0..=drafts.len());
    for _ in 0..rounds {
        let ready: Vec<TaskId> = graph.ready_tasks().iter().map(|t| t.id).collect();
        let Some(&id) = ready.choose(rng) else { break };
        let success = rng.random_bool(0.7);
        let shell = graph.get(id).expect("ready task exists").action == ActionKind::Shell;
        let command = (shell && rng.random_bool(0.8)).then(|| format!("cmd {id}"));
        let result = format!("output of {id}: {}", rng.random_range(0..1_000_000));
        graph = graph.record_result(id, command, result, success).expect("ready task accepts a result");
    }
    graph.into_nodes()
}

/// One-shot HTTP server answering each request with the next scripted
/// `(status, body)` and recording what it received.
pub struct StubServer {
    pub url: String,
    pub requests: std::sync::Arc<std::sync::Mutex<Vec<StubRequest>>>,
}

#[derive(Debug, Clone)]
pub struct StubRequest {
    pub path: String,
    pub authorization: Option<String>,
    pub body: String,
}

impl StubServer {
    pub fn start(replies: Vec<(u16, String)>) -> Self {
        use std::io::{BufRead, BufReader, Read, Write};

        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
        let log = requests.clone();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream);
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let path = line.split_whitespace().nth(1).unwrap_or_default().to_string();
                let (mut length, mut authorization) = (0usize, None);
                loop {
                    let mut header = String::new();
                    reader.read_line(&mut header).unwrap();
                    let header = header.trim_end();
                    if header.is_empty() {
                        break;
                    }
                    let (name, value) = header.split_once(':').unwrap();
                    match name.to_ascii_lowercase().as_str() {
                        "content-length" => length = value.trim().parse().unwrap(),
                        "authorization" => authorization = Some(value.trim().to_string()),
                        _ => {}
                    }
                }
                let mut request_body = vec![0u8; length];
                reader.read_exact(&mut request_body).unwrap();
                log.lock().unwrap().push(StubRequest {
                    path,
                    authorization,
                    body: String::from_utf8_lossy(&request_body).into_owned(),
                });
                let mut stream = reader.into_inner();
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
            }
        });
        Self { url, requests }
    }

    pub fn hits(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

pub fn completion_body(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

/// Hands out queued completions in order and counts calls.
pub struct Queue {
    replies: Mutex<VecDeque<String>>,
    calls: Mutex<usize>,
}

impl Queue {
    pub fn new(replies: impl IntoIterator<Item = String>) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().collect()),
            calls: Mutex::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        *self.calls.lock().unwrap()
    }
}

impl ChatBackend for Queue {
    fn complete(&self, _: &[ChatMessage], _: &ChatParams) -> Result<String, GatewayError> {
        *self.calls.lock().unwrap() += 1;
        Ok(self.replies.lock().unwrap().pop_front().unwrap_or_default())
    }
}

pub fn wrap(r: &mut ChaCha8Rng, json: &str) -> String {
    match r.random_range(0..4) {
        0 => json.to_string(),
        1 => format!("```json\n{json}\n```"),
        2 => format!("Sure, here is the updated plan [draft]:\n\n{json}\n\nLet me know if you need more."),
        _ => format!("Thinking about the target...\n```\n{json}\n```\nNote: tasks [1] and [2] are independent."),
    }
}

/// A completion plus whether a correct planner must accept it.
pub fn adversarial_completion(r: &mut ChaCha8Rng) -> (String, Option<PenetrationTaskGraph>) {
    let mut drafts = random_dag(r, 6, 0.4, true);
    let kind = r.random_range(0..10);
    match kind {
        0 => {
            // back edge creates a cycle
            if let Some(pos) = drafts.iter().position(|d| !d.dependencies.is_empty()) {
                let dep = drafts[pos].dependencies[0];
                let id = drafts[pos].id;
                drafts.iter_mut().find(|d| d.id == dep).unwrap().dependencies.push(id);
            } else {
                let id = drafts[0].id;
                drafts[0].dependencies.push(id);
            }
            (wrap(r, &serialize_plan(&drafts)), None)
        }
        1 => {
            let dup = drafts[0].clone();
            drafts.push(TaskDraft { instruction: "Another task".into(), ..dup });
            (wrap(r, &serialize_plan(&drafts)), None)
        }
        2 => {
            drafts[0].dependencies.push(999);
            (wrap(r, &serialize_plan(&drafts)), None)
        }
        3 => ("I cannot produce a plan for this phase right now.".to_string(), None),
        4 => (wrap(r, "[]"), None),
        5 => {
            let text = serialize_plan(&drafts);
            (text[..text.len() / 2].to_string(), None)
        }
        6 => {
            // an unknown action on the first task is accepted as manual
            let text = serialize_plan(&drafts);
            let old = match drafts[0].action {
                ActionKind::Shell => "\"action\": \"shell\"",
                ActionKind::Manual => "\"action\": \"manual\"",
            };
            let text = text.replacen(old, "\"action\": \"browser\"", 1);
            drafts[0].action = ActionKind::Manual;
            (wrap(r, &text), Some(validate_graph(&drafts).unwrap()))
        }
        7 => {
            drafts[0].instruction = "   ".into();
            (wrap(r, &serialize_plan(&drafts)), None)
        }
        _ => {
            let graph = validate_graph(&drafts).unwrap();
            (wrap(r, &serialize_plan(&drafts)), Some(graph))
        }
    }
}
