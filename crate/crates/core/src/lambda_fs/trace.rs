//! Line-oriented traces for exercising the lock protocol.
//!
//! ```text
//! # comment
//! bind container /data/t
//! open host /data/t/a grant
//! open container /data/t/a block
//! close host /data/t/a
//! crash
//! ```
//!
//! `close` releases the oldest live handle that side holds on the path; if
//! there is none it withdraws the oldest pending open instead. Opens may
//! carry an expected outcome, `grant` or `block`.

use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;

use super::{FsError, HandleId, LambdaFs, OpenOutcome, Side, WaitTicket};
use crate::nvme::PcieFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceOp {
    Open,
    Close,
    Bind,
    Crash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub line: usize,
    pub op: TraceOp,
    pub side: Option<Side>,
    pub path: Option<String>,
    pub expect: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceOutcome {
    Grant,
    Block,
    Closed,
    Cancelled,
    /// Close with nothing live or pending on that side and path.
    Stale,
    Bound,
    Crashed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceStep {
    pub event: TraceEvent,
    pub outcome: TraceOutcome,
    /// Blocked opens (by line number) admitted as a result of this step.
    pub woken: Vec<usize>,
}

fn side(word: &str, line: usize) -> Result<Side, FsError> {
    match word {
        "host" => Ok(Side::Host),
        "container" => Ok(Side::Container),
        other => Err(FsError::Trace {
            line,
            reason: format!("unknown side {other:?}"),
        }),
    }
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, FsError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let w: Vec<&str> = body.split_whitespace().collect();
        let bad = |reason: &str| FsError::Trace {
            line,
            reason: reason.to_string(),
        };
        let op = match w[0] {
            "open" => TraceOp::Open,
            "close" => TraceOp::Close,
            "bind" => TraceOp::Bind,
            "crash" => TraceOp::Crash,
            other => return Err(bad(&format!("unknown operation {other:?}"))),
        };
        let event = if op == TraceOp::Crash {
            if w.len() != 1 {
                return Err(bad("crash takes no arguments"));
            }
            TraceEvent {
                line,
                op,
                side: None,
                path: None,
                expect: None,
            }
        } else {
            if w.len() < 3 || w.len() > 4 {
                return Err(bad("expected <op> <side> <path> [grant|block]"));
            }
            let expect = match w.get(3) {
                None => None,
                Some(&"grant") if op == TraceOp::Open => Some(true),
                Some(&"block") if op == TraceOp::Open => Some(false),
                Some(other) => return Err(bad(&format!("unexpected outcome {other:?}"))),
            };
            if !w[2].starts_with('/') {
                return Err(bad("paths must be absolute"));
            }
            TraceEvent {
                line,
                op,
                side: Some(side(w[1], line)?),
                path: Some(w[2].to_string()),
                expect,
            }
        };
        out.push(event);
    }
    Ok(out)
}

#[derive(Default)]
struct Book {
    live: BTreeMap<(Side, String), VecDeque<HandleId>>,
    pending: BTreeMap<(Side, String), VecDeque<WaitTicket>>,
    ticket_origin: BTreeMap<WaitTicket, (Side, String, usize)>,
}

impl Book {
    fn absorb(&mut self, grants: Vec<super::Grant>) -> Vec<usize> {
        let mut woken = Vec::new();
        for g in grants {
            let Some(t) = g.ticket else { continue };
            if let Some((side, path, line)) = self.ticket_origin.remove(&t) {
                if let Some(q) = self.pending.get_mut(&(side, path.clone())) {
                    q.retain(|&x| x != t);
                }
                self.live
                    .entry((side, path))
                    .or_default()
                    .push_back(g.handle.id);
                woken.push(line);
            }
        }
        woken
    }
}

/// Runs a trace, creating any file it mentions first. Binds are
/// acknowledged immediately. Fails on the first expectation mismatch.
pub fn run_trace(fs: &mut LambdaFs, events: &[TraceEvent]) -> Result<Vec<TraceStep>, FsError> {
    for e in events {
        if let Some(p) = &e.path {
            if !fs.image.exists(p, PcieFunction::Firmware) {
                fs.image.create_all(p, PcieFunction::Host)?;
            }
        }
    }
    let mut book = Book::default();
    let mut steps = Vec::with_capacity(events.len());
    for e in events {
        let key = e.side.zip(e.path.clone());
        let (outcome, woken) = match e.op {
            TraceOp::Crash => {
                fs.crash_recover();
                book = Book::default();
                (TraceOutcome::Crashed, Vec::new())
            }
            TraceOp::Bind => {
                let path = e.path.as_deref().expect("parsed");
                fs.bind(path)?;
                let grants = fs.acknowledge_all();
                (TraceOutcome::Bound, book.absorb(grants))
            }
            TraceOp::Open => {
                let (side, path) = key.expect("parsed");
                match fs.open(side, &path)? {
                    OpenOutcome::Granted(h) => {
                        book.live.entry((side, path)).or_default().push_back(h.id);
                        (TraceOutcome::Grant, Vec::new())
                    }
                    OpenOutcome::Blocked(t) => {
                        book.ticket_origin.insert(t, (side, path.clone(), e.line));
                        book.pending.entry((side, path)).or_default().push_back(t);
                        (TraceOutcome::Block, Vec::new())
                    }
                }
            }
            TraceOp::Close => {
                let k = key.expect("parsed");
                if let Some(id) = book.live.get_mut(&k).and_then(|q| q.pop_front()) {
                    let grants = fs.close(id)?;
                    (TraceOutcome::Closed, book.absorb(grants))
                } else if let Some(t) = book.pending.get_mut(&k).and_then(|q| q.pop_front()) {
                    fs.cancel(t)?;
                    book.ticket_origin.remove(&t);
                    (TraceOutcome::Cancelled, Vec::new())
                } else {
                    (TraceOutcome::Stale, Vec::new())
                }
            }
        };
        if let Some(want) = e.expect {
            let got = outcome == TraceOutcome::Grant;
            if want != got {
                return Err(FsError::Trace {
                    line: e.line,
                    reason: format!(
                        "expected {}, got {:?}",
                        if want { "grant" } else { "block" },
                        outcome
                    ),
                });
            }
        }
        steps.push(TraceStep {
            event: e.clone(),
            outcome,
            woken,
        });
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nvme::{NamespaceKind, NamespaceSpec, NamespaceTable};

    fn fs() -> LambdaFs {
        let t = NamespaceTable::define(&[
            NamespaceSpec {
                kind: NamespaceKind::Private,
                blocks: 0..64,
            },
            NamespaceSpec {
                kind: NamespaceKind::Sharable,
                blocks: 64..256,
            },
        ])
        .unwrap();
        LambdaFs::mkfs(t.all()).unwrap()
    }

    #[test]
    fn scripted_trace() {
        let text = "\
# host holds, container waits, then gets the file
bind container /d/f
open host /d/f grant
open container /d/f block
close host /d/f
close container /d/f
open host /d/f grant
";
        let events = parse_trace(text).unwrap();
        let steps = run_trace(&mut fs(), &events).unwrap();
        assert_eq!(steps[3].woken, vec![4]);
        assert_eq!(steps[4].outcome, TraceOutcome::Closed);
    }

    #[test]
    fn expectation_mismatch_reports_line() {
        let events = parse_trace("open host /a grant\nopen container /a grant\n").unwrap();
        let err = run_trace(&mut fs(), &events).unwrap_err();
        assert!(matches!(err, FsError::Trace { line: 2, .. }));
    }

    #[test]
    fn crash_makes_old_handles_stale() {
        let events =
            parse_trace("open host /a\ncrash\nopen container /a grant\nclose host /a\n").unwrap();
        let steps = run_trace(&mut fs(), &events).unwrap();
        assert_eq!(steps[3].outcome, TraceOutcome::Stale);
    }

    #[test]
    fn parse_errors() {
        assert!(parse_trace("jump host /a").is_err());
        assert!(parse_trace("open alien /a").is_err());
        assert!(parse_trace("open host a").is_err());
        assert!(parse_trace("close host /a grant").is_err());
        assert!(parse_trace("crash now").is_err());
    }
}
