use std::sync::Arc;
use std::time::Duration;

use futures_util::StreamExt;
use reqwest::StatusCode;
use serde_json::{json, Value};
use sparring::registry::BackendEntry;
use sparring::{AppState, Registry, RunManager};
use sparring_core::domain::{Credential, RunStatus, TargetSpec};
use sparring_core::fixtures::PLAN_GOAL;
use sparring_core::llm::{Transcript, TranscriptEntry};
use sparring_core::protocol::{parse, EventBody, ProtocolEvent};
use sparring_core::target::{HostKeyPolicy, TargetSource};

struct Server {
    base: String,
    client: reqwest::Client,
    _dir: tempfile::TempDir,
}

fn scripted(entries: &[(Option<&str>, &str)]) -> BackendEntry {
    BackendEntry::Scripted(Transcript::new(
        entries
            .iter()
            .map(|(m, a)| TranscriptEntry {
                r#match: m.map(str::to_string),
                answer: a.to_string(),
            })
            .collect(),
    ))
}

async fn start(secret: Option<&str>) -> Server {
    let mut registry = Registry::builtin();
    registry.add_backend(
        "deny-demo",
        scripted(&[(None, "rm -rf /"), (Some("operator denied: rm -rf /"), "id")]),
    );
    let closed = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = closed.local_addr().unwrap().port();
    drop(closed);
    registry.add_target(
        "offline-box",
        TargetSource::Ssh(
            TargetSpec {
                host: "127.0.0.1".into(),
                port,
                username: "bob".into(),
                credential: Credential::Password("x".into()),
                connect_timeout_ms: 1_000,
                command_timeout_ms: 1_000,
            },
            HostKeyPolicy::AcceptAny,
        ),
    );
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::new(
        RunManager::new(Arc::new(registry), dir.path().join("runs")),
        secret.map(str::to_string),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(sparring::serve(listener, state, std::future::pending()));
    let mut headers = reqwest::header::HeaderMap::new();
    if let Some(secret) = secret {
        headers.insert("x-sparring-secret", secret.parse().unwrap());
    }
    Server {
        base,
        client: reqwest::Client::builder().default_headers(headers).build().unwrap(),
        _dir: dir,
    }
}

impl Server {
    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let resp = self
            .client
            .post(format!("{}{path}", self.base))
            .json(&body)
            .send()
            .await
            .unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let resp = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    async fn start_run(&self, config: Value) -> String {
        let (status, body) = self.post("/api/runs", config).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        body["run_id"].as_str().unwrap().to_string()
    }

    async fn wait_status(&self, run_id: &str, wanted: &str) -> Value {
        for _ in 0..200 {
            let (_, snapshot) = self.get(&format!("/api/runs/{run_id}")).await;
            if snapshot["status"] == wanted {
                return snapshot;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("run {run_id} never reached {wanted}");
    }

    /// Read the SSE stream until it closes, or until `stop` says so.
    async fn stream(
        &self,
        run_id: &str,
        last_event_id: Option<u64>,
        mut stop: impl FnMut(&ProtocolEvent) -> bool,
    ) -> Vec<(u64, ProtocolEvent)> {
        let mut request = self.client.get(format!("{}/api/runs/{run_id}/events", self.base));
        if let Some(id) = last_event_id {
            request = request.header("Last-Event-ID", id.to_string());
        }
        let resp = request.send().await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        let mut body = resp.bytes_stream();
        let mut buffer = String::new();
        let mut out = Vec::new();
        loop {
            while let Some(end) = buffer.find("\n\n") {
                let frame: String = buffer.drain(..end + 2).collect();
                let mut id = None;
                let mut data = String::new();
                for line in frame.lines() {
                    if let Some(v) = line.strip_prefix("id:") {
                        id = Some(v.trim().parse::<u64>().unwrap());
                    } else if let Some(v) = line.strip_prefix("data:") {
                        data.push_str(v.strip_prefix(' ').unwrap_or(v));
                    }
                }
                if let Some(id) = id {
                    let event: ProtocolEvent = serde_json::from_str(&data).unwrap();
                    let done = stop(&event);
                    out.push((id, event));
                    if done {
                        return out;
                    }
                }
            }
            match tokio::time::timeout(Duration::from_secs(10), body.next()).await {
                Ok(Some(chunk)) => buffer.push_str(&String::from_utf8_lossy(&chunk.unwrap())),
                Ok(None) => return out,
                Err(_) => panic!("event stream stalled"),
            }
        }
    }
}

fn config(backend: &str, extra: Value) -> Value {
    let mut base = json!({ "llm_backend_ref": backend, "target_ref": "lin-security", "max_rounds": 5 });
    base.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
    base
}

fn assert_gap_free(events: &[(u64, ProtocolEvent)], first: u64) {
    for (i, (id, event)) in events.iter().enumerate() {
        assert_eq!(*id, first + i as u64);
        assert_eq!(event.seq, *id);
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn scripted_run_streams_to_completion() {
    let server = start(None).await;
    let run_id = server.start_run(config("t1", json!({}))).await;
    let events = server.stream(&run_id, None, |_| false).await;
    assert_gap_free(&events, 1);
    assert!(events.last().unwrap().1.is_terminal());

    let snapshot = server.wait_status(&run_id, "root_achieved").await;
    assert_eq!(snapshot["round"], 2);
    assert_eq!(snapshot["findings"], 2);
    assert!(snapshot["pending"].is_null());
    assert!(snapshot["last_command"]["cmd"]
        .as_str()
        .unwrap()
        .starts_with("sudo awk"));

    let resp = server
        .client
        .get(format!("{}/api/runs/{run_id}/protocol", server.base))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let recorded = parse(&resp.text().await.unwrap()).unwrap();
    let streamed: Vec<ProtocolEvent> = events.into_iter().map(|(_, e)| e).collect();
    assert_eq!(recorded, streamed);

    // Subscribing after the fact replays everything, and resume skips ahead.
    let again = server.stream(&run_id, None, |_| false).await;
    assert_eq!(again.len(), recorded.len());
    let resumed = server.stream(&run_id, Some(3), |_| false).await;
    assert_gap_free(&resumed, 4);
    assert_eq!(resumed.len(), recorded.len() - 3);

    let (status, list) = server.get("/api/runs").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(list.as_array().unwrap().len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_runs_are_independent() {
    let server = start(None).await;
    let (a, b) = tokio::join!(
        server.start_run(config("t1", json!({}))),
        server.start_run(config("t3", json!({ "max_rounds": 3, "analysis_enabled": false })))
    );
    assert_ne!(a, b);
    server.wait_status(&a, "root_achieved").await;
    server.wait_status(&b, "exhausted").await;
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_starts_are_rejected() {
    let server = start(None).await;
    for body in [
        config("t1", json!({ "target_ref": "nowhere" })),
        config("nope", json!({})),
        config("t1", json!({ "max_rounds": 0 })),
        config("t1", json!({ "goal_template_id": "missing-template" })),
        json!({ "max_rounds": "many" }),
    ] {
        let (status, err) = server.post("/api/runs", body.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(err["error"], "validation_failed");
    }
    let (status, err) = server
        .post("/api/runs", config("t1", json!({ "target_ref": "offline-box" })))
        .await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(err["error"], "target_unavailable");
    let (_, list) = server.get("/api/runs").await;
    assert!(list.as_array().unwrap().is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn interactive_edit_hint_and_approve() {
    let server = start(None).await;
    let run_id = server.start_run(config("t1", json!({ "interactive": true }))).await;
    let head = server
        .stream(
            &run_id,
            None,
            |e| matches!(&e.body, EventBody::StatusChange(s) if s.to == RunStatus::AwaitingApproval),
        )
        .await;
    let snapshot = server.wait_status(&run_id, "awaiting_approval").await;
    assert_eq!(snapshot["pending"]["proposed"], "sudo -l");

    let (status, _) = server
        .post(
            &format!("/api/runs/{run_id}/hints"),
            json!({ "text": "check /etc/passwd" }),
        )
        .await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let (status, err) = server
        .post(&format!("/api/runs/{run_id}/hints"), json!({ "text": "  " }))
        .await;
    assert_eq!(
        (status, err["error"].as_str()),
        (StatusCode::BAD_REQUEST, Some("validation_failed"))
    );

    let (status, err) = server
        .post(
            &format!("/api/runs/{run_id}/approval"),
            json!({ "decision": "edit", "command": "" }),
        )
        .await;
    assert_eq!(
        (status, err["error"].as_str()),
        (StatusCode::BAD_REQUEST, Some("validation_failed"))
    );
    let (status, err) = server
        .post(&format!("/api/runs/{run_id}/approval"), json!({ "decision": "maybe" }))
        .await;
    assert_eq!(
        (status, err["error"].as_str()),
        (StatusCode::BAD_REQUEST, Some("validation_failed"))
    );

    let (status, snapshot) = server
        .post(
            &format!("/api/runs/{run_id}/approval"),
            json!({ "decision": "edit", "command": "sudo -l -U bob" }),
        )
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(snapshot["status"], "awaiting_approval");
    assert_eq!(snapshot["pending"]["proposed"], "sudo -l -U bob");

    let (status, snapshot) = server
        .post(
            &format!("/api/runs/{run_id}/approval"),
            json!({ "decision": "approve" }),
        )
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(snapshot["status"], "running");
    assert!(snapshot["pending"].is_null());

    // Round two proposes the GTFOBin; approve it through to root.
    server.wait_status(&run_id, "awaiting_approval").await;
    let (status, _) = server
        .post(
            &format!("/api/runs/{run_id}/approval"),
            json!({ "decision": "approve" }),
        )
        .await;
    assert_eq!(status, StatusCode::OK);
    server.wait_status(&run_id, "root_achieved").await;

    let (status, err) = server
        .post(
            &format!("/api/runs/{run_id}/approval"),
            json!({ "decision": "approve" }),
        )
        .await;
    assert_eq!(
        (status, err["error"].as_str()),
        (StatusCode::CONFLICT, Some("conflicting_state"))
    );
    let (status, err) = server
        .post(&format!("/api/runs/{run_id}/hints"), json!({ "text": "too late" }))
        .await;
    assert_eq!(
        (status, err["error"].as_str()),
        (StatusCode::CONFLICT, Some("run_finished"))
    );

    // Resume where the first subscription stopped: no gaps, no duplicates.
    let last = head.last().unwrap().0;
    let tail = server.stream(&run_id, Some(last), |_| false).await;
    assert_gap_free(&tail, last + 1);
    let executed: Vec<String> = tail
        .iter()
        .filter_map(|(_, e)| match &e.body {
            EventBody::CommandExecuted(p) => Some(p.command.cmd.clone()),
            _ => None,
        })
        .collect();
    assert_eq!(executed[0], "sudo -l -U bob");
    let hinted_prompt = tail.iter().any(|(_, e)| {
        matches!(&e.body, EventBody::Prompt(p) if p.round == 2 && p.messages.iter().any(|m| m.content.contains("check /etc/passwd")))
    });
    assert!(hinted_prompt, "hint did not reach the round-two prompt");
}

#[tokio::test(flavor = "multi_thread")]
async fn deny_returns_to_running_and_abort_ends() {
    let server = start(None).await;
    let run_id = server
        .start_run(config(
            "deny-demo",
            json!({ "interactive": true, "analysis_enabled": false, "max_rounds": 3 }),
        ))
        .await;
    server.wait_status(&run_id, "awaiting_approval").await;
    let (status, snapshot) = server
        .post(&format!("/api/runs/{run_id}/approval"), json!({ "decision": "deny" }))
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(snapshot["status"], "running");
    assert_eq!(snapshot["round"], 0);
    assert!(snapshot["last_command"].is_null());

    let snapshot = server.wait_status(&run_id, "awaiting_approval").await;
    assert_eq!(snapshot["pending"]["proposed"], "id");
    let (status, snapshot) = server
        .post(&format!("/api/runs/{run_id}/approval"), json!({ "decision": "abort" }))
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(snapshot["status"], "aborted");
    let events = server.stream(&run_id, None, |_| false).await;
    assert_eq!(events.iter().filter(|(_, e)| e.is_terminal()).count(), 1);
    assert!(!events
        .iter()
        .any(|(_, e)| matches!(e.body, EventBody::CommandExecuted(_))));
}

#[tokio::test(flavor = "multi_thread")]
async fn duplicate_decisions_apply_once() {
    let server = start(None).await;
    let run_id = server
        .start_run(config(
            "t3",
            json!({ "interactive": true, "analysis_enabled": false, "max_rounds": 1 }),
        ))
        .await;
    server.wait_status(&run_id, "awaiting_approval").await;
    let path = format!("/api/runs/{run_id}/approval");
    let body = json!({ "decision": "approve" });
    let (first, second) = tokio::join!(server.post(&path, body.clone()), server.post(&path, body.clone()));
    let mut codes = [first.0, second.0];
    codes.sort();
    assert_eq!(codes, [StatusCode::OK, StatusCode::CONFLICT]);
    server.wait_status(&run_id, "exhausted").await;
    let events = server.stream(&run_id, None, |_| false).await;
    let decisions = events
        .iter()
        .filter(|(_, e)| matches!(e.body, EventBody::ApprovalDecision(_)))
        .count();
    assert_eq!(decisions, 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_ids_are_not_found() {
    let server = start(None).await;
    for path in [
        "/api/runs/nope",
        "/api/runs/nope/protocol",
        "/api/runs/nope/events",
        "/api/plans/nope",
    ] {
        let (status, _) = server.get(path).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{path}");
    }
    let (status, err) = server
        .post("/api/runs/nope/approval", json!({ "decision": "approve" }))
        .await;
    assert_eq!(
        (status, err["error"].as_str()),
        (StatusCode::NOT_FOUND, Some("unknown_run"))
    );
    let (status, _) = server.post("/api/runs/nope/hints", json!({ "text": "x" })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn plans_are_created_and_fetched() {
    let server = start(None).await;
    let (status, created) = server.post("/api/plans", json!({ "goal": PLAN_GOAL })).await;
    assert_eq!(status, StatusCode::CREATED);
    let techniques: Vec<&str> = created["tree"]["nodes"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|n| n["kind"] == "technique")
        .map(|n| n["description"].as_str().unwrap())
        .collect();
    assert!(techniques.iter().any(|t| t.contains("Kerberoasting")));
    assert!(created["outline"]
        .as_str()
        .unwrap()
        .contains("Tactic: Credential Access"));

    let id = created["plan_id"].as_str().unwrap();
    let (status, fetched) = server.get(&format!("/api/plans/{id}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(fetched, created);

    let (status, _) = server.post("/api/plans", json!({ "goal": " " })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = server
        .post("/api/plans", json!({ "goal": PLAN_GOAL, "backend": "nope" }))
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn shared_secret_is_enforced() {
    let server = start(Some("s3cret")).await;
    let (status, _) = server.get("/api/runs").await;
    assert_eq!(status, StatusCode::OK);
    let bare = reqwest::Client::new();
    let resp = bare.get(format!("{}/api/runs", server.base)).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::UNAUTHORIZED);
    let resp = bare
        .get(format!("{}/api/runs", server.base))
        .header("X-Sparring-Secret", "wrong")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::UNAUTHORIZED);
}
