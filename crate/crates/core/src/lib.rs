//! Deterministic simulator for bridging two garbage collectors: a
//! reference-counting heap (the "counted" side, modeling a native extension
//! runtime) and a tracing mark/sweep heap (the "traced" side, modeling a
//! managed runtime).
//!
//! The bridge mirrors the counted reference graph onto the traced heap using
//! minimal head objects, so that the tracing collector can see native cycles.
//! When the tracing collector sweeps a head, the bridge checks the
//! corresponding counted subgraph for inner consistency before releasing it:
//! consistent subgraphs are freed, inconsistent ones (a sign of unreported
//! graph mutation) are re-explored and, where needed, their managed backends
//! are resurrected. Weak references are kept coherent across both heaps
//! through per-referent hubs with a "traced referent dies first" policy.
//!
//! Everything is driven explicitly: collection, queue processing and lock
//! transitions only happen when requested, so a scenario script (or the
//! fuzzer) fully determines the interleaving and every run is reproducible.
//!
//! The crate is organized around [`World`], which owns all subsystems:
//!
//! - [`counted_heap`] — refcounted objects with a traversal protocol
//! - [`traced_heap`] — mark/sweep nodes, weak cells, reference queues,
//!   one-shot finalizers with resurrection support
//! - [`bridge`] — head mirroring, consistency checking, backend resurrection
//! - [`weakref_bridge`] — cross-runtime weak reference hubs
//! - [`monitor`] — allocation/free/finalization event ledger and leak reports
//! - [`lock_model`] — native-side lock discipline with allow-threads windows
//! - [`scenario`] — script parser/executor, fuzzer and reachability oracle

pub mod bridge;
pub mod counted_heap;
pub mod error;
pub mod lock_model;
pub mod monitor;
pub mod scenario;
pub mod traced_heap;
pub mod weakref_bridge;
pub mod world;

pub use bridge::{Bridge, BridgeReport, Consistency, ModeTable};
pub use counted_heap::{BridgeMode, CountedHeap, CountedObject, DecrefOutcome, Oid, ReprOrigin};
pub use error::{HeapError, LockError};
pub use lock_model::{ActorId, ActorState, Location, LockModel};
pub use monitor::{MemAction, MemEvent, Monitor};
pub use traced_heap::{
    CollectionReport, NodeRole, QueueId, Tid, TracedHeap, TracedNode, ValuePayload, Wid,
};
pub use weakref_bridge::{DerefOutcome, HandleId, HubId, WeakKind, WeakRegistry};
pub use world::{AuditViolation, Ref, World};
