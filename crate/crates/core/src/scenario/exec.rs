//! Scenario executor: binds names, dispatches commands to the world, audits
//! refcount accounting after every step, and collects the run report.

use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;
use thiserror::Error;

use crate::counted_heap::{Oid, ReprOrigin};
use crate::error::LockError;
use crate::lock_model::ActorId;
use crate::monitor::MemEvent;
use crate::traced_heap::{NodeRole, Tid, ValuePayload};
use crate::weakref_bridge::{DerefOutcome, HandleId};
use crate::world::{Ref, World};

use super::{Command, Op};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line_no}: {message}")]
pub struct ScenarioError {
    pub line_no: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binding {
    Counted { oid: Oid, handles: u32 },
    Traced { tid: Tid, rooted: bool },
    Weak(HandleId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PendingLockOp {
    Enter,
    EndAllow,
}

#[derive(Debug, Clone)]
pub struct ExecOptions {
    pub script_name: String,
    /// Enable the reference monitor (`--mem-debug`).
    pub mem_debug: bool,
    /// Audit refcount accounting after every command.
    pub audit: bool,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            script_name: "script".into(),
            mem_debug: true,
            audit: true,
        }
    }
}

/// Outcome of one executed command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CommandOutcome {
    pub line_no: usize,
    pub command: String,
    pub result: String,
}

/// Everything a run produced: per-command results, the textual output from
/// REPORT commands, assertion tallies and the monitor history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Default)]
pub struct RunReport {
    pub script: String,
    pub commands: Vec<CommandOutcome>,
    pub output: String,
    pub assertions_passed: usize,
    pub failure: Option<String>,
    pub events: Vec<MemEvent>,
    pub ok: bool,
}

pub struct Executor {
    world: World,
    options: ExecOptions,
    bindings: BTreeMap<String, Binding>,
    /// Root claims per traced node, so several bindings can pin one node.
    root_claims: BTreeMap<Tid, u32>,
    actors: BTreeMap<String, ActorId>,
    pending_locks: VecDeque<(String, PendingLockOp)>,
    output: String,
    outcomes: Vec<CommandOutcome>,
    assertions_passed: usize,
}

impl Executor {
    pub fn new(options: ExecOptions) -> Self {
        let mut world = World::new();
        world.monitor.set_enabled(options.mem_debug);
        Self {
            world,
            options,
            bindings: BTreeMap::new(),
            root_claims: BTreeMap::new(),
            actors: BTreeMap::new(),
            pending_locks: VecDeque::new(),
            output: String::new(),
            outcomes: Vec::new(),
            assertions_passed: 0,
        }
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn world_mut(&mut self) -> &mut World {
        &mut self.world
    }

    pub fn output(&self) -> &str {
        &self.output
    }

    pub fn counted_binding(&self, name: &str) -> Option<Oid> {
        match self.bindings.get(name) {
            Some(Binding::Counted { oid, .. }) => Some(*oid),
            _ => None,
        }
    }

    pub fn traced_binding(&self, name: &str) -> Option<Tid> {
        match self.bindings.get(name) {
            Some(Binding::Traced { tid, .. }) => Some(*tid),
            _ => None,
        }
    }

    pub fn weak_binding(&self, name: &str) -> Option<HandleId> {
        match self.bindings.get(name) {
            Some(Binding::Weak(h)) => Some(*h),
            _ => None,
        }
    }

    /// Run a whole command list, stopping at the first failure.
    pub fn execute(mut self, commands: &[Command]) -> RunReport {
        let mut failure = None;
        for cmd in commands {
            if let Err(e) = self.step(cmd) {
                failure = Some(e.to_string());
                break;
            }
        }
        self.into_report(failure)
    }

    pub fn into_report(self, failure: Option<String>) -> RunReport {
        RunReport {
            script: self.options.script_name,
            commands: self.outcomes,
            output: self.output,
            assertions_passed: self.assertions_passed,
            ok: failure.is_none(),
            failure,
            events: self.world.monitor.history().to_vec(),
        }
    }

    fn fail(&self, cmd: &Command, message: impl Into<String>) -> ScenarioError {
        ScenarioError {
            line_no: cmd.line_no,
            message: message.into(),
        }
    }

    fn lookup(&self, cmd: &Command, name: &str) -> Result<Binding, ScenarioError> {
        self.bindings
            .get(name)
            .copied()
            .ok_or_else(|| self.fail(cmd, format!("unbound name `{name}`")))
    }

    fn counted_of(&self, cmd: &Command, name: &str) -> Result<Oid, ScenarioError> {
        match self.lookup(cmd, name)? {
            Binding::Counted { oid, .. } => Ok(oid),
            _ => Err(self.fail(cmd, format!("`{name}` is not a counted object"))),
        }
    }

    fn traced_of(&self, cmd: &Command, name: &str) -> Result<Tid, ScenarioError> {
        match self.lookup(cmd, name)? {
            Binding::Traced { tid, .. } => Ok(tid),
            _ => Err(self.fail(cmd, format!("`{name}` is not a traced node"))),
        }
    }

    fn bind(&mut self, cmd: &Command, name: &str, binding: Binding) -> Result<(), ScenarioError> {
        if self.bindings.contains_key(name) {
            return Err(self.fail(cmd, format!("name `{name}` is already bound")));
        }
        self.bindings.insert(name.to_string(), binding);
        Ok(())
    }

    fn actor_id(&mut self, name: &str) -> ActorId {
        if let Some(id) = self.actors.get(name) {
            return *id;
        }
        let id = ActorId(self.actors.len() as u32);
        self.actors.insert(name.to_string(), id);
        id
    }

    /// Execute one command: set the source site, dispatch, audit, tick.
    pub fn step(&mut self, cmd: &Command) -> Result<(), ScenarioError> {
        self.world
            .set_site(format!("{}:{}", self.options.script_name, cmd.line_no));
        let result = self.dispatch(cmd)?;
        if self.options.audit {
            let violations = self.world.audit_refcounts();
            if let Some(v) = violations.first() {
                return Err(self.fail(
                    cmd,
                    format!(
                        "refcount audit failed for {}: refcount {} but explained {} ({})",
                        v.oid, v.refcount, v.explained, v.detail
                    ),
                ));
            }
            // The monitor ledger replays to exactly the heap's live set.
            if self.options.mem_debug {
                let ledger = self.world.monitor.current_leaks();
                let heap: Vec<Oid> = self.world.counted.live_oids().collect();
                if ledger != heap {
                    return Err(self.fail(
                        cmd,
                        format!("monitor ledger {ledger:?} disagrees with heap {heap:?}"),
                    ));
                }
            }
        }
        self.outcomes.push(CommandOutcome {
            line_no: cmd.line_no,
            command: cmd.to_string(),
            result,
        });
        self.world.tick();
        Ok(())
    }

    fn dispatch(&mut self, cmd: &Command) -> Result<String, ScenarioError> {
        match cmd.op.clone() {
            Op::New {
                name,
                managed,
                type_name,
                gc_tracked,
                repr,
            } => {
                if managed {
                    let tid = self.world.traced.create_node(
                        false,
                        NodeRole::Plain,
                        Some(ValuePayload {
                            type_name,
                            gc_tracked,
                            repr_text: repr,
                        }),
                    );
                    self.claim_root(tid).map_err(|e| self.fail(cmd, e))?;
                    self.bind(cmd, &name, Binding::Traced { tid, rooted: true })?;
                    Ok(format!("{tid}"))
                } else {
                    let oid = self.world.alloc_counted(
                        &type_name,
                        gc_tracked,
                        &repr,
                        ReprOrigin::Counted,
                    );
                    self.world
                        .adopt_handle(oid)
                        .map_err(|e| self.fail(cmd, e.to_string()))?;
                    self.bind(cmd, &name, Binding::Counted { oid, handles: 1 })?;
                    Ok(format!("{oid}"))
                }
            }
            Op::Link {
                parent,
                slot,
                child,
                silent,
            } => match slot {
                Some(slot) => {
                    let p = self.counted_of(cmd, &parent)?;
                    let c = self.counted_of(cmd, &child)?;
                    self.world
                        .set_edge(p, slot, Some(c), silent)
                        .map_err(|e| self.fail(cmd, e.to_string()))?;
                    Ok(format!(
                        "{p}[{slot}] = {c}{}",
                        if silent { " (silent)" } else { "" }
                    ))
                }
                None => {
                    let f = self.traced_of(cmd, &parent)?;
                    let t = self.traced_of(cmd, &child)?;
                    // Value structure obeys the same container rule on both
                    // sides: a non-gc value cannot reference other objects.
                    let node = self
                        .world
                        .traced
                        .get(f)
                        .map_err(|e| self.fail(cmd, e.to_string()))?;
                    if let Some(p) = &node.payload {
                        if !p.gc_tracked {
                            return Err(
                                self.fail(cmd, format!("`{parent}` is not a container value"))
                            );
                        }
                    }
                    self.world
                        .traced
                        .link(f, t)
                        .map_err(|e| self.fail(cmd, e.to_string()))?;
                    Ok(format!("{f} -> {t}"))
                }
            },
            Op::Unlink {
                parent,
                slot,
                child,
                silent,
            } => match (slot, child) {
                (Some(slot), _) => {
                    let p = self.counted_of(cmd, &parent)?;
                    self.world
                        .set_edge(p, slot, None, silent)
                        .map_err(|e| self.fail(cmd, e.to_string()))?;
                    Ok(format!("{p}[{slot}] cleared"))
                }
                (None, Some(child)) => {
                    let f = self.traced_of(cmd, &parent)?;
                    let t = self.traced_of(cmd, &child)?;
                    self.world
                        .traced
                        .unlink(f, t)
                        .map_err(|e| self.fail(cmd, e.to_string()))?;
                    Ok(format!("{f} -/-> {t}"))
                }
                (None, None) => Err(self.fail(cmd, "UNLINK needs a slot or a target")),
            },
            Op::Handle { name } => match self.lookup(cmd, &name)? {
                Binding::Counted { oid, handles } => {
                    self.world
                        .add_handle(oid)
                        .map_err(|e| self.fail(cmd, e.to_string()))?;
                    self.bindings.insert(
                        name,
                        Binding::Counted {
                            oid,
                            handles: handles + 1,
                        },
                    );
                    Ok(format!("handle on {oid}"))
                }
                Binding::Traced { tid, rooted } => {
                    if !rooted {
                        self.claim_root(tid).map_err(|e| self.fail(cmd, e))?;
                        self.bindings
                            .insert(name, Binding::Traced { tid, rooted: true });
                    }
                    Ok(format!("root on {tid}"))
                }
                Binding::Weak(_) => Err(self.fail(cmd, "cannot HANDLE a weak reference")),
            },
            Op::Drop { name } => {
                let binding = self.lookup(cmd, &name)?;
                match binding {
                    Binding::Counted { oid, handles } => {
                        for _ in 0..handles {
                            self.world
                                .drop_handle(oid)
                                .map_err(|e| self.fail(cmd, e.to_string()))?;
                        }
                    }
                    Binding::Traced { tid, rooted } => {
                        if rooted {
                            self.release_root(tid).map_err(|e| self.fail(cmd, e))?;
                        }
                    }
                    Binding::Weak(h) => {
                        self.world
                            .drop_weak_handle(h)
                            .map_err(|e| self.fail(cmd, e.to_string()))?;
                    }
                }
                self.bindings.remove(&name);
                Ok(format!("dropped `{name}`"))
            }
            Op::PassN { name, source } => {
                let tid = self.traced_of(cmd, &source)?;
                let oid = self
                    .world
                    .pass_to_native(tid)
                    .map_err(|e| self.fail(cmd, e.to_string()))?;
                self.bind(cmd, &name, Binding::Counted { oid, handles: 0 })?;
                Ok(format!("{tid} -> {oid}"))
            }
            Op::PassM { name, source } => {
                let oid = self.counted_of(cmd, &source)?;
                let tid = self
                    .world
                    .pass_to_managed(oid)
                    .map_err(|e| self.fail(cmd, e.to_string()))?;
                self.bind(cmd, &name, Binding::Traced { tid, rooted: false })?;
                Ok(format!("{oid} -> {tid}"))
            }
            Op::Mirror { name } => {
                let oid = self.counted_of(cmd, &name)?;
                let heads = self
                    .world
                    .mirror_subgraph(oid)
                    .map_err(|e| self.fail(cmd, e.to_string()))?;
                Ok(format!("mirrored {} objects", heads.len()))
            }
            Op::Notify { name } => {
                let oid = self.counted_of(cmd, &name)?;
                self.world
                    .notify_change(oid)
                    .map_err(|e| self.fail(cmd, e.to_string()))?;
                Ok(format!("notified {oid}"))
            }
            Op::Gc => {
                let (collected, processed) =
                    self.world.gc().map_err(|e| self.fail(cmd, e.to_string()))?;
                Ok(format!(
                    "swept={} finalized={} released={} reexplored={} resurrected={}",
                    collected.swept.len(),
                    collected.finalized.len(),
                    processed.released.len(),
                    processed.reexplored.len(),
                    processed.resurrected_backends.len()
                ))
            }
            Op::Process => {
                let processed = self
                    .world
                    .process_cleared_heads()
                    .map_err(|e| self.fail(cmd, e.to_string()))?;
                Ok(format!(
                    "released={} reexplored={} resurrected={}",
                    processed.released.len(),
                    processed.reexplored.len(),
                    processed.resurrected_backends.len()
                ))
            }
            Op::Weak {
                name,
                referent,
                kind,
                callback,
            } => {
                let r = match self.lookup(cmd, &referent)? {
                    Binding::Counted { oid, .. } => Ref::Counted(oid),
                    Binding::Traced { tid, .. } => Ref::Traced(tid),
                    Binding::Weak(_) => {
                        return Err(self.fail(cmd, "weak referent cannot be a weak reference"))
                    }
                };
                let handle = self
                    .world
                    .new_weakref(r, kind, callback)
                    .map_err(|e| self.fail(cmd, e.to_string()))?;
                self.bind(cmd, &name, Binding::Weak(handle))?;
                let kind_tag = match kind {
                    crate::weakref_bridge::WeakKind::Plain => "",
                    crate::weakref_bridge::WeakKind::Proxy => " (proxy)",
                    crate::weakref_bridge::WeakKind::CallableProxy => " (callable proxy)",
                };
                Ok(format!("{handle}{kind_tag}"))
            }
            Op::Deref { name, weak } => {
                let handle = match self.lookup(cmd, &weak)? {
                    Binding::Weak(h) => h,
                    _ => return Err(self.fail(cmd, format!("`{weak}` is not a weak reference"))),
                };
                match self
                    .world
                    .deref_weak(handle)
                    .map_err(|e| self.fail(cmd, e.to_string()))?
                {
                    DerefOutcome::Cleared => Ok("cleared".into()),
                    DerefOutcome::Counted(oid) => {
                        self.bind(cmd, &name, Binding::Counted { oid, handles: 0 })?;
                        Ok(format!("{oid}"))
                    }
                    DerefOutcome::Traced(tid) => {
                        self.bind(cmd, &name, Binding::Traced { tid, rooted: false })?;
                        Ok(format!("{tid}"))
                    }
                }
            }
            Op::Enter { actor } => {
                let id = self.actor_id(&actor);
                match self.world.locks.enter_native(id) {
                    Ok(()) => Ok(format!("{actor} entered native")),
                    Err(LockError::WouldBlock) => {
                        self.pending_locks
                            .push_back((actor.clone(), PendingLockOp::Enter));
                        Ok(format!("{actor} blocked on enter"))
                    }
                    Err(e) => Err(self.fail(cmd, e.to_string())),
                }
            }
            Op::Exit { actor } => {
                let id = self.actor_id(&actor);
                self.world
                    .locks
                    .exit_native(id)
                    .map_err(|e| self.fail(cmd, e.to_string()))?;
                let retried = self.retry_pending_locks();
                Ok(format!("{actor} exited native{retried}"))
            }
            Op::Allow { actor } => {
                let id = self.actor_id(&actor);
                self.world
                    .locks
                    .begin_allow(id)
                    .map_err(|e| self.fail(cmd, e.to_string()))?;
                let retried = self.retry_pending_locks();
                Ok(format!("{actor} opened allow window{retried}"))
            }
            Op::EndAllow { actor } => {
                let id = self.actor_id(&actor);
                match self.world.locks.end_allow(id) {
                    Ok(()) => Ok(format!("{actor} closed allow window")),
                    Err(LockError::WouldBlock) => {
                        self.pending_locks
                            .push_back((actor.clone(), PendingLockOp::EndAllow));
                        Ok(format!("{actor} blocked on end-allow"))
                    }
                    Err(e) => Err(self.fail(cmd, e.to_string())),
                }
            }
            Op::Report { label } => {
                if let Some(l) = &label {
                    self.output.push_str(l);
                    self.output.push('\n');
                }
                let leaks = self
                    .world
                    .monitor
                    .list_leaks(|oid| self.world.counted.refcount(oid).unwrap_or(0));
                self.output.push_str(&leaks);
                Ok("report appended".into())
            }
            Op::AssertLeaks { expected } => {
                let found = self.world.monitor.current_leaks().len();
                if found == expected {
                    self.assertions_passed += 1;
                    Ok(format!("leaks == {expected}"))
                } else {
                    Err(self.fail(
                        cmd,
                        format!("assertion failed: expected {expected} leaks, found {found}"),
                    ))
                }
            }
            Op::ClearHistory => {
                self.world.monitor.clear_history();
                Ok("history cleared".into())
            }
        }
    }

    fn claim_root(&mut self, tid: Tid) -> Result<(), String> {
        let claims = self.root_claims.entry(tid).or_default();
        *claims += 1;
        if *claims == 1 {
            self.world
                .traced
                .set_root(tid, true)
                .map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    fn release_root(&mut self, tid: Tid) -> Result<(), String> {
        let claims = self.root_claims.entry(tid).or_default();
        *claims = claims.saturating_sub(1);
        if *claims == 0 {
            self.root_claims.remove(&tid);
            if self.world.traced.contains(tid) {
                self.world
                    .traced
                    .set_root(tid, false)
                    .map_err(|e| e.to_string())?;
            }
        }
        Ok(())
    }

    /// Round-robin retry of lock operations that blocked earlier; runs after
    /// every lock release. Stops at the first operation that still blocks.
    fn retry_pending_locks(&mut self) -> String {
        let mut log = String::new();
        while let Some((actor, op)) = self.pending_locks.front().cloned() {
            let id = self.actor_id(&actor);
            let result = match op {
                PendingLockOp::Enter => self.world.locks.enter_native(id),
                PendingLockOp::EndAllow => self.world.locks.end_allow(id),
            };
            match result {
                Ok(()) => {
                    self.pending_locks.pop_front();
                    let what = match op {
                        PendingLockOp::Enter => "entered native",
                        PendingLockOp::EndAllow => "closed allow window",
                    };
                    log.push_str(&format!("; {actor} {what} (retried)"));
                }
                Err(_) => break,
            }
        }
        log
    }
}

/// Parse and run a script in one call.
pub fn run_script(text: &str, options: ExecOptions) -> Result<RunReport, super::parse::ParseError> {
    let commands = super::parse(text)?;
    Ok(Executor::new(options).execute(&commands))
}
