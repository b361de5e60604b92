//! Native-side lock discipline as an explicit state machine.
//!
//! Actors live on the managed side until they enter native code, which
//! requires the single native lock. Allow-threads windows release the lock
//! without leaving the native side and may nest; the lock is re-acquired
//! only when the outermost window closes. Blocking is modeled as a
//! [`LockError::WouldBlock`] result so schedulers stay deterministic.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::error::LockError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ActorId(pub u32);

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Location {
    Managed,
    Native,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ActorState {
    pub actor_id: ActorId,
    pub location: Location,
    pub holds_lock: bool,
    pub allow_depth: u32,
}

impl ActorState {
    fn new(actor_id: ActorId) -> Self {
        Self {
            actor_id,
            location: Location::Managed,
            holds_lock: false,
            allow_depth: 0,
        }
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct LockModel {
    actors: BTreeMap<ActorId, ActorState>,
    holder: Option<ActorId>,
}

impl LockModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn actor(&self, id: ActorId) -> ActorState {
        self.actors
            .get(&id)
            .copied()
            .unwrap_or_else(|| ActorState::new(id))
    }

    pub fn holder(&self) -> Option<ActorId> {
        self.holder
    }

    fn actor_mut(&mut self, id: ActorId) -> &mut ActorState {
        self.actors.entry(id).or_insert_with(|| ActorState::new(id))
    }

    /// Move an actor from managed to native code, acquiring the lock.
    pub fn enter_native(&mut self, id: ActorId) -> Result<(), LockError> {
        let state = self.actor(id);
        if state.location == Location::Native {
            return Err(LockError::DoubleEnter);
        }
        if self.holder.is_some() {
            return Err(LockError::WouldBlock);
        }
        let state = self.actor_mut(id);
        state.location = Location::Native;
        state.holds_lock = true;
        self.holder = Some(id);
        Ok(())
    }

    /// Return to managed code, releasing the lock. Rejected inside an open
    /// allow-threads window.
    pub fn exit_native(&mut self, id: ActorId) -> Result<(), LockError> {
        let state = self.actor(id);
        if state.allow_depth > 0 {
            return Err(LockError::ExitInsideAllowWindow);
        }
        if !state.holds_lock {
            return Err(LockError::NotHolding);
        }
        let state = self.actor_mut(id);
        state.location = Location::Managed;
        state.holds_lock = false;
        self.holder = None;
        Ok(())
    }

    /// Open an allow-threads window. The outermost `begin` releases the lock;
    /// nested windows only bump the depth counter.
    pub fn begin_allow(&mut self, id: ActorId) -> Result<(), LockError> {
        let state = self.actor(id);
        if !state.holds_lock && state.allow_depth == 0 {
            return Err(LockError::NotHolding);
        }
        let state = self.actor_mut(id);
        state.allow_depth += 1;
        if state.allow_depth == 1 {
            state.holds_lock = false;
            self.holder = None;
        }
        Ok(())
    }

    /// Close an allow-threads window; the outermost `end` re-acquires the
    /// lock (WouldBlock leaves the window open for a retry).
    pub fn end_allow(&mut self, id: ActorId) -> Result<(), LockError> {
        let state = self.actor(id);
        if state.allow_depth == 0 {
            return Err(LockError::Underflow);
        }
        if state.allow_depth == 1 {
            if self.holder.is_some() {
                return Err(LockError::WouldBlock);
            }
            let state = self.actor_mut(id);
            state.allow_depth = 0;
            state.holds_lock = true;
            self.holder = Some(id);
        } else {
            self.actor_mut(id).allow_depth -= 1;
        }
        Ok(())
    }

    /// True when no actor holds the lock, sits on the native side or has an
    /// open allow window — the state every balanced sequence returns to.
    pub fn is_quiescent(&self) -> bool {
        self.holder.is_none()
            && self
                .actors
                .values()
                .all(|a| a.location == Location::Managed && !a.holds_lock && a.allow_depth == 0)
    }

    /// Model invariant: at most one holder, and a holder is always on the
    /// native side with no open allow window.
    pub fn check_invariants(&self) -> bool {
        let holders: Vec<_> = self.actors.values().filter(|a| a.holds_lock).collect();
        if holders.len() > 1 {
            return false;
        }
        if let Some(h) = holders.first() {
            if self.holder != Some(h.actor_id) {
                return false;
            }
            if h.location != Location::Native || h.allow_depth > 0 {
                return false;
            }
        } else if self.holder.is_some() {
            return false;
        }
        true
    }
}

/// One lock operation, for scripted and exhaustive exploration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockOp {
    Enter,
    Exit,
    BeginAllow,
    EndAllow,
}

impl LockModel {
    pub fn apply(&mut self, actor: ActorId, op: LockOp) -> Result<(), LockError> {
        match op {
            LockOp::Enter => self.enter_native(actor),
            LockOp::Exit => self.exit_native(actor),
            LockOp::BeginAllow => self.begin_allow(actor),
            LockOp::EndAllow => self.end_allow(actor),
        }
    }
}

/// Exhaustively explore every interleaving of `actors` actors over `steps`
/// operations, checking the single-holder invariant in every reached state.
/// Failed operations leave the state unchanged and exploration continues.
/// Returns the number of states visited.
pub fn explore_interleavings(actors: u32, steps: u32) -> Result<u64, String> {
    let ops = [
        LockOp::Enter,
        LockOp::Exit,
        LockOp::BeginAllow,
        LockOp::EndAllow,
    ];
    let mut visited = 0u64;
    let mut stack: Vec<(LockModel, u32)> = vec![(LockModel::new(), 0)];
    while let Some((model, depth)) = stack.pop() {
        visited += 1;
        if !model.check_invariants() {
            return Err(format!("invariant violated in state {model:?}"));
        }
        if depth == steps {
            continue;
        }
        for a in 0..actors {
            for op in ops {
                let mut next = model.clone();
                let _ = next.apply(ActorId(a), op);
                stack.push((next, depth + 1));
            }
        }
    }
    Ok(visited)
}
