//! Exhaustive enumeration of open/close interleavings.
//!
//! Every sequence over the alphabet `{open, close} x {host, container} x
//! files` up to a given length is replayed depth-first. After each step the
//! lock state is compared with an independent count of live handles, and a
//! crash is simulated on a copy to confirm all counters drop to zero.

use std::collections::VecDeque;

use serde::Serialize;

use super::{FsError, HandleId, Ino, LambdaFs, OpenOutcome, Side, WaitTicket};
use crate::nvme::PcieFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Symbol {
    pub open: bool,
    pub side: Side,
    pub file: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CheckReport {
    pub files: usize,
    pub max_len: usize,
    pub traces: u64,
    pub steps: u64,
    pub grants: u64,
    pub blocks: u64,
    pub wakeups: u64,
    pub crash_checks: u64,
}

#[derive(Clone)]
struct Held {
    side: Side,
    file: usize,
    id: HandleId,
}

#[derive(Clone)]
struct State {
    fs: LambdaFs,
    live: Vec<Held>,
    pending: VecDeque<(WaitTicket, Side, usize)>,
}

struct Ctx<'a> {
    files: &'a [(Ino, Ino)],
    alphabet: Vec<Symbol>,
    max_len: usize,
    report: CheckReport,
    trail: Vec<Symbol>,
}

fn fail(trail: &[Symbol], why: String) -> FsError {
    let t: Vec<String> = trail
        .iter()
        .map(|s| {
            format!(
                "{}:{:?}:{}",
                if s.open { "open" } else { "close" },
                s.side,
                s.file
            )
        })
        .collect();
    FsError::Trace {
        line: trail.len(),
        reason: format!("{why} after [{}]", t.join(", ")),
    }
}

/// Counters implied by a set of live handles, independent of the lock
/// manager's own bookkeeping.
fn implied(files: &[(Ino, Ino)], live: &[Held], side: Side, ino: Ino) -> u32 {
    live.iter()
        .filter(|h| h.side == side)
        .map(|h| {
            let (f, p) = files[h.file];
            u32::from(f == ino) + u32::from(p == ino && p != f)
        })
        .sum()
}

fn footprint(files: &[(Ino, Ino)], file: usize) -> [Ino; 2] {
    let (f, p) = files[file];
    [f, p]
}

impl Ctx<'_> {
    fn step(&mut self, st: &mut State, sym: Symbol) -> Result<(), FsError> {
        let files = self.files;
        if sym.open {
            let [f, p] = footprint(files, sym.file);
            let opposing = implied(files, &st.live, sym.side.other(), f)
                + implied(files, &st.live, sym.side.other(), p);
            let path = st.fs.image.path_of(f)?;
            match st.fs.open(sym.side, &path)? {
                OpenOutcome::Granted(h) => {
                    if opposing != 0 {
                        return Err(fail(&self.trail, "granted despite opposing holders".into()));
                    }
                    self.report.grants += 1;
                    st.live.push(Held {
                        side: sym.side,
                        file: sym.file,
                        id: h.id,
                    });
                }
                OpenOutcome::Blocked(t) => {
                    if opposing == 0 {
                        return Err(fail(&self.trail, "blocked with no opposing holders".into()));
                    }
                    self.report.blocks += 1;
                    st.pending.push_back((t, sym.side, sym.file));
                }
            }
        } else if let Some(pos) = st
            .live
            .iter()
            .position(|h| h.side == sym.side && h.file == sym.file)
        {
            let h = st.live.remove(pos);
            for g in st.fs.close(h.id)? {
                let t = g.ticket.expect("closes only wake queued opens");
                let pos = st
                    .pending
                    .iter()
                    .position(|w| w.0 == t)
                    .expect("ticket was queued");
                let (_, side, file) = st.pending.remove(pos).unwrap();
                let [f, p] = footprint(files, file);
                let opposing = implied(files, &st.live, side.other(), f)
                    + implied(files, &st.live, side.other(), p);
                if opposing != 0 {
                    return Err(fail(
                        &self.trail,
                        "woke a waiter that still conflicts".into(),
                    ));
                }
                self.report.wakeups += 1;
                st.live.push(Held {
                    side,
                    file,
                    id: g.handle.id,
                });
            }
        } else if let Some(pos) = st
            .pending
            .iter()
            .position(|w| w.1 == sym.side && w.2 == sym.file)
        {
            let (t, _, _) = st.pending.remove(pos).unwrap();
            st.fs.cancel(t)?;
        }
        self.verify(st)
    }

    fn verify(&mut self, st: &State) -> Result<(), FsError> {
        for a in &st.live {
            for b in &st.live {
                if a.side != b.side {
                    let fa = footprint(self.files, a.file);
                    let fb = footprint(self.files, b.file);
                    if fa.iter().any(|x| fb.contains(x)) {
                        return Err(fail(&self.trail, "both sides hold a shared inode".into()));
                    }
                }
            }
        }
        for &(f, p) in self.files {
            for ino in [f, p] {
                for side in [Side::Host, Side::Container] {
                    if st.fs.locks.lock_state(ino).refcount(side)
                        != implied(self.files, &st.live, side, ino)
                    {
                        return Err(fail(
                            &self.trail,
                            format!("refcount of inode {ino} disagrees with live handles"),
                        ));
                    }
                }
            }
        }
        st.fs.locks.check().map_err(|e| fail(&self.trail, e))?;
        let mut crashed = st.fs.clone();
        crashed.crash_recover();
        self.report.crash_checks += 1;
        for &(f, p) in self.files {
            for ino in [f, p] {
                let l = crashed.locks.lock_state(ino);
                if l.refcount(Side::Host) + l.refcount(Side::Container) != 0 {
                    return Err(fail(&self.trail, "refcount survived a crash".into()));
                }
            }
        }
        if crashed.locks.live_handles().next().is_some() || crashed.locks.waiting() != 0 {
            return Err(fail(&self.trail, "handles survived a crash".into()));
        }
        Ok(())
    }

    fn dfs(&mut self, st: &State, depth: usize) -> Result<(), FsError> {
        if depth == self.max_len {
            self.report.traces += 1;
            return Ok(());
        }
        for i in 0..self.alphabet.len() {
            let sym = self.alphabet[i];
            let mut next = st.clone();
            self.trail.push(sym);
            self.report.steps += 1;
            self.step(&mut next, sym)?;
            self.dfs(&next, depth + 1)?;
            self.trail.pop();
        }
        Ok(())
    }
}

/// Checks every trace of exactly `max_len` symbols (and therefore every
/// shorter prefix) over the given sibling files.
pub fn enumerate(fs: &LambdaFs, paths: &[&str], max_len: usize) -> Result<CheckReport, FsError> {
    let mut fs = fs.clone();
    let mut files = Vec::new();
    for p in paths {
        let ino = fs.image.create_all(p, PcieFunction::Host)?;
        files.push((ino, fs.image.inode(ino)?.parent));
    }
    let alphabet = files
        .iter()
        .enumerate()
        .flat_map(|(file, _)| {
            [Side::Host, Side::Container]
                .into_iter()
                .flat_map(move |side| [true, false].map(|open| Symbol { open, side, file }))
        })
        .collect();
    let mut ctx = Ctx {
        files: &files,
        alphabet,
        max_len,
        report: CheckReport {
            files: paths.len(),
            max_len,
            ..Default::default()
        },
        trail: Vec::new(),
    };
    let root = State {
        fs,
        live: Vec::new(),
        pending: VecDeque::new(),
    };
    ctx.dfs(&root, 0)?;
    Ok(ctx.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nvme::{NamespaceKind, NamespaceSpec, NamespaceTable};

    #[test]
    fn short_exhaustive_run() {
        let t = NamespaceTable::define(&[
            NamespaceSpec {
                kind: NamespaceKind::Private,
                blocks: 0..8,
            },
            NamespaceSpec {
                kind: NamespaceKind::Sharable,
                blocks: 8..64,
            },
        ])
        .unwrap();
        let fs = LambdaFs::mkfs(t.all()).unwrap();
        let r = enumerate(&fs, &["/d/f"], 4).unwrap();
        assert_eq!(r.traces, 256);
        assert_eq!(r.steps, 4 + 16 + 64 + 256);
        assert!(r.blocks > 0 && r.wakeups > 0);
    }
}
