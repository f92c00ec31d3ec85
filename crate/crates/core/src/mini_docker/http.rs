//! HTTP/1.1 framing between docker-cli and the firmware engine.
//!
//! | command | request |
//! |---|---|
//! | pull | `POST /images/create?fromImage=<ref>` with the image archive as body |
//! | rmi | `DELETE /images/<ref>` |
//! | create | `POST /containers/create?image=<ref>` |
//! | run | `POST /containers/run?image=<ref>` |
//! | start, stop, restart, kill | `POST /containers/<id>/<verb>` |
//! | rm | `DELETE /containers/<id>` |
//! | logs | `GET /containers/<id>/logs` |
//! | ps | `GET /containers/json` |

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::DockerError;

const MAX_HEADERS: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpRequest {
    pub method: String,
    pub path: String,
    pub query: BTreeMap<String, String>,
    pub body: Vec<u8>,
}

impl HttpRequest {
    pub fn new(method: &str, path: &str) -> Self {
        Self {
            method: method.to_string(),
            path: path.to_string(),
            query: BTreeMap::new(),
            body: Vec::new(),
        }
    }

    pub fn query(mut self, key: &str, value: &str) -> Self {
        self.query.insert(key.to_string(), value.to_string());
        self
    }

    pub fn body(mut self, body: Vec<u8>) -> Self {
        self.body = body;
        self
    }

    fn target(&self) -> String {
        if self.query.is_empty() {
            return self.path.clone();
        }
        let q: Vec<String> = self.query.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("{}?{}", self.path, q.join("&"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "{} {} HTTP/1.1\r\nHost: dockerssd\r\nContent-Length: {}\r\n\r\n",
            self.method,
            self.target(),
            self.body.len()
        )
        .into_bytes();
        out.extend_from_slice(&self.body);
        out
    }

    /// Parses one request from the front of `buf`. `Ok(None)` means more
    /// bytes are needed.
    pub fn parse(buf: &[u8]) -> Result<Option<(Self, usize)>, DockerError> {
        let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
        let mut req = httparse::Request::new(&mut headers);
        let head = match req
            .parse(buf)
            .map_err(|e| DockerError::MalformedRequest(e.to_string()))?
        {
            httparse::Status::Partial => return Ok(None),
            httparse::Status::Complete(n) => n,
        };
        let len = content_length(req.headers)?;
        if buf.len() < head + len {
            return Ok(None);
        }
        let target = req.path.unwrap_or("/");
        let (path, qs) = target.split_once('?').unwrap_or((target, ""));
        let query = qs
            .split('&')
            .filter(|kv| !kv.is_empty())
            .map(|kv| {
                let (k, v) = kv.split_once('=').unwrap_or((kv, ""));
                (k.to_string(), v.to_string())
            })
            .collect();
        let r = Self {
            method: req.method.unwrap_or("").to_string(),
            path: path.to_string(),
            query,
            body: buf[head..head + len].to_vec(),
        };
        Ok(Some((r, head + len)))
    }

    /// Parses a request that must be complete.
    pub fn parse_complete(buf: &[u8]) -> Result<Self, DockerError> {
        match Self::parse(buf)? {
            Some((r, n)) if n == buf.len() => Ok(r),
            Some(_) => Err(DockerError::MalformedRequest(
                "trailing bytes after request".into(),
            )),
            None => Err(DockerError::MalformedRequest("truncated request".into())),
        }
    }
}

fn content_length(headers: &[httparse::Header]) -> Result<usize, DockerError> {
    match headers
        .iter()
        .find(|h| h.name.eq_ignore_ascii_case("content-length"))
    {
        None => Ok(0),
        Some(h) => std::str::from_utf8(h.value)
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| DockerError::MalformedRequest("bad Content-Length".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn new(status: u16, body: Vec<u8>) -> Self {
        Self { status, body }
    }

    pub fn json<T: Serialize>(status: u16, value: &T) -> Self {
        Self::new(
            status,
            serde_json::to_vec(value).expect("response serializes"),
        )
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    fn reason(&self) -> &'static str {
        match self.status {
            200 => "OK",
            201 => "Created",
            204 => "No Content",
            400 => "Bad Request",
            404 => "Not Found",
            409 => "Conflict",
            422 => "Unprocessable Entity",
            501 => "Not Implemented",
            507 => "Insufficient Storage",
            _ => "Internal Server Error",
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
            self.status,
            self.reason(),
            self.body.len()
        )
        .into_bytes();
        out.extend_from_slice(&self.body);
        out
    }

    pub fn parse(buf: &[u8]) -> Result<Option<(Self, usize)>, DockerError> {
        let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
        let mut resp = httparse::Response::new(&mut headers);
        let head = match resp
            .parse(buf)
            .map_err(|e| DockerError::MalformedRequest(e.to_string()))?
        {
            httparse::Status::Partial => return Ok(None),
            httparse::Status::Complete(n) => n,
        };
        let len = content_length(resp.headers)?;
        if buf.len() < head + len {
            return Ok(None);
        }
        Ok(Some((
            Self {
                status: resp.code.unwrap_or(0),
                body: buf[head..head + len].to_vec(),
            },
            head + len,
        )))
    }
}

/// The supported docker-cli commands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "command")]
pub enum Command {
    Pull { image: String, archive: Vec<u8> },
    Rmi { image: String },
    Create { image: String },
    Run { image: String },
    Start { id: String },
    Stop { id: String },
    Restart { id: String },
    Kill { id: String },
    Rm { id: String },
    Logs { id: String },
    Ps,
}

impl Command {
    pub const NAMES: [&'static str; 11] = [
        "pull", "rmi", "create", "run", "start", "stop", "restart", "kill", "rm", "logs", "ps",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Command::Pull { .. } => "pull",
            Command::Rmi { .. } => "rmi",
            Command::Create { .. } => "create",
            Command::Run { .. } => "run",
            Command::Start { .. } => "start",
            Command::Stop { .. } => "stop",
            Command::Restart { .. } => "restart",
            Command::Kill { .. } => "kill",
            Command::Rm { .. } => "rm",
            Command::Logs { .. } => "logs",
            Command::Ps => "ps",
        }
    }

    pub fn to_request(&self) -> HttpRequest {
        match self {
            Command::Pull { image, archive } => HttpRequest::new("POST", "/images/create")
                .query("fromImage", image)
                .body(archive.clone()),
            Command::Rmi { image } => HttpRequest::new("DELETE", &format!("/images/{image}")),
            Command::Create { image } => {
                HttpRequest::new("POST", "/containers/create").query("image", image)
            }
            Command::Run { image } => {
                HttpRequest::new("POST", "/containers/run").query("image", image)
            }
            Command::Start { id }
            | Command::Stop { id }
            | Command::Restart { id }
            | Command::Kill { id } => {
                HttpRequest::new("POST", &format!("/containers/{id}/{}", self.name()))
            }
            Command::Rm { id } => HttpRequest::new("DELETE", &format!("/containers/{id}")),
            Command::Logs { id } => HttpRequest::new("GET", &format!("/containers/{id}/logs")),
            Command::Ps => HttpRequest::new("GET", "/containers/json"),
        }
    }

    pub fn from_request(req: &HttpRequest) -> Result<Self, DockerError> {
        let segs: Vec<&str> = req.path.split('/').filter(|s| !s.is_empty()).collect();
        let unsupported =
            || DockerError::UnsupportedCommand(format!("{} {}", req.method, req.path));
        let param = |k: &str| {
            req.query
                .get(k)
                .filter(|v| !v.is_empty())
                .cloned()
                .ok_or_else(|| {
                    DockerError::MalformedRequest(format!("missing query parameter {k}"))
                })
        };
        Ok(match (req.method.as_str(), segs.as_slice()) {
            ("POST", ["images", "create"]) => Command::Pull {
                image: param("fromImage")?,
                archive: req.body.clone(),
            },
            ("DELETE", ["images", rest @ ..]) if !rest.is_empty() => Command::Rmi {
                image: rest.join("/"),
            },
            ("POST", ["containers", "create"]) => Command::Create {
                image: param("image")?,
            },
            ("POST", ["containers", "run"]) => Command::Run {
                image: param("image")?,
            },
            ("GET", ["containers", "json"]) => Command::Ps,
            ("POST", ["containers", id, "start"]) => Command::Start { id: id.to_string() },
            ("POST", ["containers", id, "stop"]) => Command::Stop { id: id.to_string() },
            ("POST", ["containers", id, "restart"]) => Command::Restart { id: id.to_string() },
            ("POST", ["containers", id, "kill"]) => Command::Kill { id: id.to_string() },
            ("DELETE", ["containers", id]) => Command::Rm { id: id.to_string() },
            ("GET", ["containers", id, "logs"]) => Command::Logs { id: id.to_string() },
            _ => return Err(unsupported()),
        })
    }
}

/// The request docker-cli would send for `docker <name> <target>`. Commands
/// outside the supported set map onto their nearest engine route, which
/// the firmware then rejects.
pub fn cli_request(name: &str, target: &str) -> HttpRequest {
    let cmd = match name {
        "pull" => Some(Command::Pull {
            image: target.into(),
            archive: Vec::new(),
        }),
        "rmi" => Some(Command::Rmi {
            image: target.into(),
        }),
        "create" => Some(Command::Create {
            image: target.into(),
        }),
        "run" => Some(Command::Run {
            image: target.into(),
        }),
        "start" => Some(Command::Start { id: target.into() }),
        "stop" => Some(Command::Stop { id: target.into() }),
        "restart" => Some(Command::Restart { id: target.into() }),
        "kill" => Some(Command::Kill { id: target.into() }),
        "rm" => Some(Command::Rm { id: target.into() }),
        "logs" => Some(Command::Logs { id: target.into() }),
        "ps" => Some(Command::Ps),
        _ => None,
    };
    match cmd {
        Some(c) => c.to_request(),
        None => match name {
            "images" => HttpRequest::new("GET", "/images/json"),
            "inspect" => HttpRequest::new("GET", &format!("/containers/{target}/json")),
            "exec" => HttpRequest::new("POST", &format!("/containers/{target}/exec")),
            "pause" | "unpause" | "wait" | "attach" | "rename" | "update" | "top" | "stats"
            | "export" | "port" | "diff" | "resize" => {
                HttpRequest::new("POST", &format!("/containers/{target}/{name}"))
            }
            "cp" => HttpRequest::new("PUT", &format!("/containers/{target}/archive")),
            "push" | "tag" | "history" | "save" => {
                HttpRequest::new("POST", &format!("/images/{target}/{name}"))
            }
            "commit" | "build" | "load" | "import" | "search" | "login" | "logout" | "info"
            | "version" | "events" => HttpRequest::new("POST", &format!("/{name}")),
            other => HttpRequest::new("POST", &format!("/{}/{}", other.replace(' ', "/"), target)),
        },
    }
}
