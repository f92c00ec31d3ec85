use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;

use crate::sim::Nanos;

pub type Tid = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase", tag = "state", content = "core")]
pub enum ThreadState {
    /// Ready and waiting for a core.
    Runnable,
    Running(usize),
    Blocked,
    Exited,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ThreadRecord {
    pub tid: Tid,
    pub owner: String,
    pub entry: String,
    pub state: ThreadState,
    pub parent: Option<Tid>,
    /// ISP-pool page holding the thread control block.
    pub tcb_addr: u64,
    pub cpu_ns: Nanos,
    pub brk: u64,
}

/// Round-robin scheduler over a fixed set of cores.
#[derive(Debug, Clone)]
pub struct Scheduler {
    cores: Vec<Option<Tid>>,
    ready: VecDeque<Tid>,
    threads: BTreeMap<Tid, ThreadRecord>,
    quantum_ns: Nanos,
    next_tid: Tid,
    now: Nanos,
    switches: u64,
}

impl Scheduler {
    pub fn new(cores: usize, quantum_ns: Nanos) -> Self {
        Self {
            cores: vec![None; cores],
            ready: VecDeque::new(),
            threads: BTreeMap::new(),
            quantum_ns,
            next_tid: 1,
            now: 0,
            switches: 0,
        }
    }

    pub fn cores(&self) -> usize {
        self.cores.len()
    }

    pub fn quantum_ns(&self) -> Nanos {
        self.quantum_ns
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn context_switches(&self) -> u64 {
        self.switches
    }

    /// Registers a new runnable thread and returns its record as created.
    pub fn spawn(
        &mut self,
        owner: &str,
        entry: &str,
        parent: Option<Tid>,
        tcb_addr: u64,
    ) -> ThreadRecord {
        let tid = self.next_tid;
        self.next_tid += 1;
        let rec = ThreadRecord {
            tid,
            owner: owner.to_string(),
            entry: entry.to_string(),
            state: ThreadState::Runnable,
            parent,
            tcb_addr,
            cpu_ns: 0,
            brk: 0,
        };
        self.threads.insert(tid, rec.clone());
        self.ready.push_back(tid);
        self.dispatch();
        rec
    }

    fn dispatch(&mut self) {
        for core in 0..self.cores.len() {
            if self.cores[core].is_none() {
                let Some(tid) = self.ready.pop_front() else {
                    break;
                };
                self.cores[core] = Some(tid);
                self.threads
                    .get_mut(&tid)
                    .expect("ready threads exist")
                    .state = ThreadState::Running(core);
                self.switches += 1;
            }
        }
    }

    /// Advances one quantum: running threads are charged and rotated to
    /// the back of the ready queue when others are waiting.
    pub fn tick(&mut self) {
        self.now += self.quantum_ns;
        let waiting = !self.ready.is_empty();
        for core in 0..self.cores.len() {
            let Some(tid) = self.cores[core] else {
                continue;
            };
            let t = self.threads.get_mut(&tid).expect("running threads exist");
            t.cpu_ns += self.quantum_ns;
            if waiting {
                t.state = ThreadState::Runnable;
                self.cores[core] = None;
                self.ready.push_back(tid);
            }
        }
        self.dispatch();
    }

    pub fn run_for(&mut self, ns: Nanos) {
        for _ in 0..ns.div_ceil(self.quantum_ns.max(1)) {
            self.tick();
        }
    }

    fn release_core(&mut self, tid: Tid) {
        for c in self.cores.iter_mut() {
            if *c == Some(tid) {
                *c = None;
            }
        }
        self.ready.retain(|t| *t != tid);
    }

    pub fn exit(&mut self, tid: Tid) -> bool {
        let Some(t) = self.threads.get_mut(&tid) else {
            return false;
        };
        if t.state == ThreadState::Exited {
            return false;
        }
        t.state = ThreadState::Exited;
        self.release_core(tid);
        self.dispatch();
        true
    }

    pub fn block(&mut self, tid: Tid) {
        if let Some(t) = self.threads.get_mut(&tid) {
            if t.state != ThreadState::Exited {
                t.state = ThreadState::Blocked;
                self.release_core(tid);
                self.dispatch();
            }
        }
    }

    pub fn wake(&mut self, tid: Tid) {
        if let Some(t) = self.threads.get_mut(&tid) {
            if t.state == ThreadState::Blocked {
                t.state = ThreadState::Runnable;
                self.ready.push_back(tid);
                self.dispatch();
            }
        }
    }

    pub fn thread(&self, tid: Tid) -> Option<&ThreadRecord> {
        self.threads.get(&tid)
    }

    pub fn thread_mut(&mut self, tid: Tid) -> Option<&mut ThreadRecord> {
        self.threads.get_mut(&tid)
    }

    pub fn threads(&self) -> impl Iterator<Item = &ThreadRecord> {
        self.threads.values()
    }

    pub fn running(&self) -> Vec<Tid> {
        self.cores.iter().flatten().copied().collect()
    }

    pub fn queued(&self) -> Vec<Tid> {
        self.ready.iter().copied().collect()
    }

    /// Exits every live thread owned by `owner`.
    pub fn exit_owner(&mut self, owner: &str) -> usize {
        let tids: Vec<Tid> = self
            .threads
            .values()
            .filter(|t| t.owner == owner && t.state != ThreadState::Exited)
            .map(|t| t.tid)
            .collect();
        tids.iter().filter(|t| self.exit(**t)).count()
    }
}
