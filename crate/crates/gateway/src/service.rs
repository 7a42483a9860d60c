//! HTTP service exposing the registry to external systems.
//!
//! Bodies are JSON except PGM uploads and binary sync frames; every error
//! maps to a structured `{"code", "message"}` JSON object. All mutations
//! funnel through the node's writer lock and persist before the response
//! goes out.
//!
//! Endpoints:
//!
//! ```text
//! GET  /health
//! POST /enroll?name=..&now=..[&address&phone&source&attr_<k>=<v>]   (PGM body)
//! POST /identify                                                    (PGM body)
//! GET  /identity/<code>
//! POST /message                                                     (JSON)
//! PUT  /preferences/<code>                                          (JSON)
//! POST /attendance/<station>?direction=in|out&now=..                (PGM body)
//! POST /authorize/<station>/<session>?now=..                        (PGM body)
//! POST /surveil/<station>?now=..                                    (PGM body)
//! GET  /sync                      -> every log entry as binary frames
//! POST /sync   (JSON vector)      -> frames the peer lacks
//! POST /sync   (binary frames)    -> applies them, returns a report
//! ```

use crate::GatewayError;
use facekey_core::codec::FaceOutputCode;
use facekey_core::federation::{decode_frames, encode_frames};
use facekey_core::node::Node;
use facekey_core::registry::PersonalData;
use facekey_core::time::Timestamp;
use facekey_core::workflows::{AlertPreference, Category, Direction};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::io::Read;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};
use std::time::Instant;
use tiny_http::{Header, Method, Request, Response, Server};

const MAX_BODY: usize = 16 << 20;
const WORKERS: usize = 4;

pub struct ServiceHandle {
    pub addr: SocketAddr,
    server: Arc<Server>,
    workers: Vec<std::thread::JoinHandle<()>>,
    node: Arc<RwLock<Node>>,
}

impl ServiceHandle {
    pub fn node(&self) -> Arc<RwLock<Node>> {
        self.node.clone()
    }

    /// Stops accepting new requests. Workers parked in `recv` wake as the
    /// listener unblocks; they are detached rather than joined because one
    /// unblock call is not guaranteed to wake every parked worker.
    pub fn shutdown(self) {
        self.server.unblock();
        drop(self.workers);
    }

    pub fn join(self) {
        for worker in self.workers {
            let _ = worker.join();
        }
    }
}

/// Starts the service on the node's configured listen address. Binding to
/// port 0 picks a free port; the handle reports the actual address.
pub fn serve(node: Node) -> Result<ServiceHandle, GatewayError> {
    let listen = node.config().listen_addr.clone();
    let server = Arc::new(
        Server::http(&listen)
            .map_err(|e| GatewayError::Config(format!("cannot listen on {listen}: {e}")))?,
    );
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| GatewayError::Config("no ip listen address".into()))?;
    let node = Arc::new(RwLock::new(node));
    let started = Instant::now();

    let workers = (0..WORKERS)
        .map(|_| {
            let server = server.clone();
            let node = node.clone();
            std::thread::spawn(move || {
                while let Ok(request) = server.recv() {
                    handle(&node, started, request);
                }
            })
        })
        .collect();

    Ok(ServiceHandle {
        addr,
        server,
        workers,
        node,
    })
}

fn handle(node: &Arc<RwLock<Node>>, started: Instant, mut request: Request) {
    let url = request.url().to_string();
    let (path, query) = match url.split_once('?') {
        Some((p, q)) => (p.to_string(), parse_query(q)),
        None => (url.clone(), BTreeMap::new()),
    };
    let segments: Vec<String> = path
        .split('/')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    let method = request.method().clone();

    let mut body = Vec::new();
    let declared = request.body_length().unwrap_or(0);
    if declared > MAX_BODY {
        respond_json(request, 413, r#"{"code":"PayloadTooLarge","message":"body exceeds 16 MiB"}"#);
        return;
    }
    if let Err(e) = request.as_reader().take(MAX_BODY as u64 + 1).read_to_end(&mut body) {
        respond_json(
            request,
            400,
            &GatewayError::BadRequest(format!("unreadable body: {e}")).to_json(),
        );
        return;
    }

    match route(node, started, &method, &segments, &query, &body) {
        Ok(Reply::Json(json)) => respond_json(request, 200, &json),
        Ok(Reply::Frames(bytes)) => {
            let header =
                Header::from_bytes("Content-Type", "application/octet-stream").unwrap();
            let _ = request.respond(Response::from_data(bytes).with_header(header));
        }
        Err(e) => respond_json(request, e.status(), &e.to_json()),
    }
}

fn respond_json(request: Request, status: u16, body: &str) {
    let header = Header::from_bytes("Content-Type", "application/json").unwrap();
    let _ = request.respond(
        Response::from_string(body)
            .with_header(header)
            .with_status_code(status),
    );
}

enum Reply {
    Json(String),
    Frames(Vec<u8>),
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct MessageRequest {
    target_code: FaceOutputCode,
    body: String,
    category: Category,
    valid_from: Timestamp,
    valid_until: Timestamp,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct PreferencesRequest {
    suppressed_categories: Vec<Category>,
}

fn route(
    node: &Arc<RwLock<Node>>,
    started: Instant,
    method: &Method,
    segments: &[String],
    query: &BTreeMap<String, String>,
    body: &[u8],
) -> Result<Reply, GatewayError> {
    let seg: Vec<&str> = segments.iter().map(String::as_str).collect();
    match (method, seg.as_slice()) {
        (Method::Get, ["health"]) => {
            let node = node.read().unwrap();
            Ok(Reply::Json(
                serde_json::json!({
                    "status": "ok",
                    "identities": node.identity_count(),
                    "uptimeMillis": started.elapsed().as_millis() as u64,
                })
                .to_string(),
            ))
        }

        (Method::Post, ["enroll"]) => {
            let now = required_now(query)?;
            let name = query
                .get("name")
                .cloned()
                .ok_or_else(|| GatewayError::BadRequest("missing name".into()))?;
            let mut personal = PersonalData::named(&name);
            personal.address = query.get("address").cloned().unwrap_or_default();
            personal.phone = query.get("phone").cloned().unwrap_or_default();
            for (key, value) in query {
                if let Some(attr) = key.strip_prefix("attr_") {
                    personal.attributes.insert(attr.to_string(), value.clone());
                }
            }
            let source = query.get("source").cloned().unwrap_or_else(|| "api".into());
            let mut node = node.write().unwrap();
            let raster = node.normalize_pgm(body)?;
            let code = node.enroll(&raster, personal, now, &source)?;
            node.save()?;
            Ok(Reply::Json(
                serde_json::json!({ "code": code.render() }).to_string(),
            ))
        }

        (Method::Post, ["identify"]) => {
            let node = node.read().unwrap();
            let raster = node.normalize_pgm(body)?;
            let result = node.identify(&raster)?;
            Ok(Reply::Json(serde_json::to_string(&result).unwrap()))
        }

        (Method::Get, ["identity", code]) => {
            let code = parse_code(code)?;
            let node = node.read().unwrap();
            let (record, images) = node.lookup(code)?;
            Ok(Reply::Json(
                serde_json::json!({
                    "identity": {
                        "code": record.code.render(),
                        "personal": record.personal,
                        "createdAt": record.created_at,
                        "updatedAt": record.updated_at,
                        "embeddingCount": record.enrolled_embeddings.len(),
                    },
                    "images": images.iter().map(|img| serde_json::json!({
                        "imageId": img.image_id,
                        "capturedAt": img.captured_at,
                        "source": img.source,
                    })).collect::<Vec<_>>(),
                })
                .to_string(),
            ))
        }

        (Method::Post, ["message"]) => {
            let req: MessageRequest = serde_json::from_slice(body)
                .map_err(|e| GatewayError::BadRequest(format!("bad message body: {e}")))?;
            let mut node = node.write().unwrap();
            let message_id = node.post_message(
                req.target_code,
                &req.body,
                req.category,
                req.valid_from,
                req.valid_until,
            )?;
            node.save()?;
            Ok(Reply::Json(
                serde_json::json!({ "messageId": message_id }).to_string(),
            ))
        }

        (Method::Put, ["preferences", code]) => {
            let code = parse_code(code)?;
            let req: PreferencesRequest = serde_json::from_slice(body)
                .map_err(|e| GatewayError::BadRequest(format!("bad preferences body: {e}")))?;
            let mut node = node.write().unwrap();
            node.set_preferences(AlertPreference {
                owner_code: code,
                suppressed: req.suppressed_categories.into_iter().collect(),
            })?;
            node.save()?;
            Ok(Reply::Json(r#"{"status":"ok"}"#.to_string()))
        }

        (Method::Post, ["attendance", station]) => {
            let now = required_now(query)?;
            let direction: Direction = query
                .get("direction")
                .ok_or_else(|| GatewayError::BadRequest("missing direction".into()))?
                .parse()
                .map_err(GatewayError::BadRequest)?;
            let mut node = node.write().unwrap();
            let raster = node.normalize_pgm(body)?;
            let event = node.record_attendance(station, &raster, direction, now)?;
            node.save()?;
            Ok(Reply::Json(serde_json::to_string(&event).unwrap()))
        }

        (Method::Post, ["authorize", station, session]) => {
            let now = required_now(query)?;
            let mut node = node.write().unwrap();
            let raster = node.normalize_pgm(body)?;
            let outcome = node.authorize(station, session, &raster, now)?;
            node.save()?;
            Ok(Reply::Json(serde_json::to_string(&outcome).unwrap()))
        }

        (Method::Post, ["surveil", station]) => {
            let now = required_now(query)?;
            let mut node = node.write().unwrap();
            let raster = node.normalize_pgm(body)?;
            let alert = node.surveil(station, &raster, now)?;
            node.save()?;
            Ok(Reply::Json(
                serde_json::json!({ "alert": alert }).to_string(),
            ))
        }

        (Method::Get, ["sync"]) => {
            let node = node.read().unwrap();
            Ok(Reply::Frames(encode_frames(&node.full_log())))
        }

        (Method::Post, ["sync"]) => {
            // JSON body: an applied vector, answered with missing frames.
            // Binary body: frames to apply.
            if body.first() == Some(&b'{') {
                let vector: BTreeMap<String, u64> = serde_json::from_slice(body)
                    .map_err(|e| GatewayError::BadRequest(format!("bad sync vector: {e}")))?;
                let node = node.read().unwrap();
                Ok(Reply::Frames(encode_frames(&node.pull_entries(&vector))))
            } else {
                let entries = decode_frames(body).map_err(facekey_core::node::NodeError::from)?;
                let mut node = node.write().unwrap();
                let report = node.apply_entries(entries);
                node.save()?;
                Ok(Reply::Json(serde_json::to_string(&report).unwrap()))
            }
        }

        _ => Err(GatewayError::BadRequest(format!(
            "no route for {method} /{}",
            seg.join("/")
        ))),
    }
}

fn parse_code(text: &str) -> Result<FaceOutputCode, GatewayError> {
    FaceOutputCode::parse(text)
        .map_err(|e| GatewayError::Node(facekey_core::node::NodeError::Codec(e)))
}

fn required_now(query: &BTreeMap<String, String>) -> Result<Timestamp, GatewayError> {
    match query.get("now") {
        Some(value) => value
            .parse::<i64>()
            .map(Timestamp)
            .map_err(|_| GatewayError::BadRequest(format!("bad now value {value:?}"))),
        None => Ok(Timestamp(
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap_or_default()
                .as_millis() as i64,
        )),
    }
}

/// Minimal percent-decoding query parser; `+` means space.
fn parse_query(query: &str) -> BTreeMap<String, String> {
    query
        .split('&')
        .filter(|pair| !pair.is_empty())
        .filter_map(|pair| {
            let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
            Some((percent_decode(k)?, percent_decode(v)?))
        })
        .collect()
}

fn percent_decode(text: &str) -> Option<String> {
    let bytes = text.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'+' => {
                out.push(b' ');
                i += 1;
            }
            b'%' => {
                let hex = bytes.get(i + 1..i + 3)?;
                let value = u8::from_str_radix(std::str::from_utf8(hex).ok()?, 16).ok()?;
                out.push(value);
                i += 3;
            }
            b => {
                out.push(b);
                i += 1;
            }
        }
    }
    String::from_utf8(out).ok()
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_parsing_decodes_percent_and_plus() {
        let q = parse_query("name=Alice+A&address=12%20Main&attr_salary=9%2C000&x=");
        assert_eq!(q["name"], "Alice A");
        assert_eq!(q["address"], "12 Main");
        assert_eq!(q["attr_salary"], "9,000");
        assert_eq!(q["x"], "");
        assert!(parse_query("bad=%zz").is_empty());
    }
}
