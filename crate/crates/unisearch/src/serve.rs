//! Line-delimited JSON protocol exposing the engine to external agent
//! processes: retrieval requests, feedback submissions, and automatic
//! online updates.
//!
//! One session per connection; within a session requests are processed
//! strictly in arrival order, so parameter updates are synchronous with
//! serving. The corpus and index are shared immutable state. The same
//! protocol runs over a TCP stream or standard input/output; both paths go
//! through `handle_line`, which is what makes wire runs reproduce
//! in-process runs exactly.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::engine::SearchEngine;
use crate::reranker::{AgentIds, RerankerParams};
use crate::training::{AgentSession, OnlineConfig};

#[derive(Debug, Deserialize)]
struct Request {
    #[serde(default)]
    request_id: Option<Value>,
    #[serde(flatten)]
    op: Op,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Op {
    Hello {
        agent_id: String,
        tid: String,
        mid: String,
        k: usize,
    },
    Retrieve {
        query_id: String,
        input: String,
    },
    Feedback {
        query_id: String,
        labels: Vec<WireLabel>,
    },
    Stats,
    Shutdown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireLabel {
    pub passage_id: String,
    pub label: u8,
}

/// Immutable server configuration shared by every session.
pub struct ServerState {
    pub engine: Arc<SearchEngine>,
    pub checkpoint: RerankerParams,
    pub config: OnlineConfig,
}

fn error_response(request_id: Option<Value>, message: impl std::fmt::Display) -> Value {
    json!({
        "request_id": request_id.unwrap_or(Value::Null),
        "ok": false,
        "error": message.to_string(),
    })
}

/// Processes one request line and returns the response plus whether the
/// session should close. Malformed input yields an error response with a
/// null request_id; the session always survives.
pub fn handle_line(
    state: &ServerState,
    session: &mut Option<AgentSession>,
    line: &str,
) -> (Value, bool) {
    let request: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            // salvage the request_id if the line parses as JSON at all
            let rid = serde_json::from_str::<Value>(line)
                .ok()
                .and_then(|v| v.get("request_id").cloned());
            return (
                error_response(rid, format!("malformed request: {e}")),
                false,
            );
        }
    };
    let rid = request.request_id.unwrap_or(Value::Null);

    match request.op {
        Op::Hello {
            agent_id,
            tid,
            mid,
            k,
        } => {
            if session.is_some() {
                return (
                    error_response(Some(rid), "session already established"),
                    false,
                );
            }
            *session = Some(AgentSession::new(
                agent_id,
                AgentIds::new(tid, mid),
                k,
                state.checkpoint.clone(),
                state.config.clone(),
            ));
            (json!({"request_id": rid, "ok": true}), false)
        }
        Op::Retrieve { query_id, input } => {
            let Some(session) = session.as_mut() else {
                return (
                    error_response(Some(rid), "no session: send hello first"),
                    false,
                );
            };
            match session.serve(&state.engine, &query_id, &input) {
                Ok(docs) => {
                    let results: Vec<Value> = docs
                        .iter()
                        .map(|d| {
                            let p = state
                                .engine
                                .passage(&d.passage_id)
                                .expect("served passage exists");
                            json!({
                                "passage_id": d.passage_id,
                                "title": p.title,
                                "text": p.text,
                                "relevance_prob": d.relevance_prob,
                            })
                        })
                        .collect();
                    (
                        json!({
                            "request_id": rid,
                            "ok": true,
                            "results": results,
                            "update_counter": session.update_count(),
                        }),
                        false,
                    )
                }
                Err(e) => (error_response(Some(rid), e), false),
            }
        }
        Op::Feedback { query_id, labels } => {
            let Some(session) = session.as_mut() else {
                return (
                    error_response(Some(rid), "no session: send hello first"),
                    false,
                );
            };
            let labels: Vec<(String, u8)> = labels
                .into_iter()
                .map(|l| (l.passage_id, l.label))
                .collect();
            match session.submit_feedback(&query_id, &labels) {
                Ok(counter) => (
                    json!({"request_id": rid, "ok": true, "update_counter": counter}),
                    false,
                ),
                Err(e) => (error_response(Some(rid), e), false),
            }
        }
        Op::Stats => {
            let (served, updates, dataset) = session
                .as_ref()
                .map(|s| (s.served_count(), s.update_count(), s.dataset_len()))
                .unwrap_or((0, 0, 0));
            (
                json!({
                    "request_id": rid,
                    "ok": true,
                    "served": served,
                    "update_counter": updates,
                    "dataset_records": dataset,
                }),
                false,
            )
        }
        Op::Shutdown => (json!({"request_id": rid, "ok": true}), true),
    }
}

/// Runs one session over any line-based transport.
pub fn serve_stream(
    state: &ServerState,
    reader: impl BufRead,
    mut writer: impl Write,
) -> std::io::Result<()> {
    let mut session = None;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (response, close) = handle_line(state, &mut session, &line);
        writer.write_all(response.to_string().as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        if close {
            break;
        }
    }
    Ok(())
}

/// Serves one session per TCP connection until the process is terminated.
pub fn run_tcp(state: Arc<ServerState>, listener: TcpListener) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let state = Arc::clone(&state);
        std::thread::spawn(move || {
            let reader = BufReader::new(stream.try_clone().expect("clone tcp stream"));
            // a dropped connection just ends that session
            let _ = serve_stream(&state, reader, stream);
        });
    }
    Ok(())
}

/// Serves a single session over standard input/output.
pub fn run_stdio(state: &ServerState) -> std::io::Result<()> {
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    serve_stream(state, stdin.lock(), stdout.lock())
}
