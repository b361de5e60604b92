//! Error types shared by the heap, bridge and weak-reference modules.

use thiserror::Error;

use crate::counted_heap::Oid;
use crate::traced_heap::{QueueId, Tid};

/// Errors raised by heap and bridge operations.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HeapError {
    #[error("unknown counted object {0}")]
    UnknownObject(Oid),
    #[error("refcount underflow on {0} (double free in caller)")]
    NegativeRefcount(Oid),
    #[error("{0} is not a container (not gc-tracked)")]
    NotContainer(Oid),
    #[error("unknown traced node {0}")]
    UnknownNode(Tid),
    #[error("collect() called from within a finalizer")]
    ReentrantCollection,
    #[error("unknown reference queue {0}")]
    UnknownQueue(QueueId),
    #[error("{0} cannot cross the bridge (not a value-bearing node)")]
    InvalidRole(Tid),
    #[error("backend of {0} is still alive")]
    BackendAlive(Oid),
    #[error("{0} has no swept backend to restore")]
    NoSweptBackend(Oid),
    #[error("unknown weak referent")]
    UnknownReferent,
    #[error("unknown weak handle")]
    UnknownHandle,
}

/// Errors raised by the lock-discipline state machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum LockError {
    #[error("lock is held by another actor")]
    WouldBlock,
    #[error("actor is already on the native side")]
    DoubleEnter,
    #[error("actor does not hold the lock")]
    NotHolding,
    #[error("cannot exit native side inside an allow-threads window")]
    ExitInsideAllowWindow,
    #[error("allow-threads depth underflow")]
    Underflow,
}
