//! The simulation world: owns both heaps, the bridge, the weak-reference
//! registry, the monitor, the lock model and the external handle ledger, and
//! wires their hooks together. All cross-module operations live here or in
//! `impl World` blocks next to the subsystem they belong to.

use std::collections::{BTreeMap, BTreeSet};

use crate::bridge::Bridge;
use crate::counted_heap::{CountedHeap, FreedRecord, Oid, ReprOrigin};
use crate::error::HeapError;
use crate::lock_model::LockModel;
use crate::monitor::{MemAction, MemEvent, Monitor};
use crate::traced_heap::{CollectionReport, NodeRole, QueueId, TracedHeap};
use crate::weakref_bridge::{FiredCallback, WeakRegistry};

/// A reference to either side of the bridge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ref {
    Counted(Oid),
    Traced(crate::traced_heap::Tid),
}

/// One refcount accounting mismatch found by [`World::audit_refcounts`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditViolation {
    pub oid: Oid,
    pub refcount: u32,
    pub explained: u32,
    pub detail: String,
}

pub struct World {
    pub counted: CountedHeap,
    pub traced: TracedHeap,
    pub bridge: Bridge,
    pub weak: WeakRegistry,
    pub monitor: Monitor,
    pub locks: LockModel,
    /// External handles held by the embedding runtime, per object. Each
    /// handle owns one reference increment and pins the object's mirror head
    /// as a traced root while it exists.
    handles: BTreeMap<Oid, u32>,
    /// Transient references held while a traversal is being converted across
    /// the bridge; always empty between operations.
    conversion_pins: BTreeMap<Oid, u32>,
    clock: u64,
    site: String,
    freed_log: Vec<Oid>,
    fired_log: Vec<FiredCallback>,
}

impl Default for World {
    fn default() -> Self {
        Self::new()
    }
}

impl World {
    pub fn new() -> Self {
        let mut traced = TracedHeap::new();
        let bridge_queue = traced.create_queue();
        let weak_queue = traced.create_queue();
        Self {
            counted: CountedHeap::new(),
            traced,
            bridge: Bridge::new(bridge_queue),
            weak: WeakRegistry::new(weak_queue),
            monitor: Monitor::new(),
            locks: LockModel::new(),
            handles: BTreeMap::new(),
            conversion_pins: BTreeMap::new(),
            clock: 0,
            site: String::from("lib:0"),
            freed_log: Vec::new(),
            fired_log: Vec::new(),
        }
    }

    // ── logical clock and source positions ─────────────────────────────

    /// Advance the logical clock by one tick (one scenario command).
    pub fn tick(&mut self) {
        self.clock += 1;
    }

    pub fn now(&self) -> u64 {
        self.clock
    }

    /// Set the source position attributed to subsequent memory operations.
    pub fn set_site(&mut self, site: impl Into<String>) {
        self.site = site.into();
    }

    pub fn site(&self) -> &str {
        &self.site
    }

    // ── counted-heap operations with hooks ─────────────────────────────

    /// Allocate a counted object and report it to the monitor. The returned
    /// reference is owned by the caller (adopt it as a handle or pin it).
    pub fn alloc_counted(
        &mut self,
        type_name: &str,
        gc_tracked: bool,
        repr_text: &str,
        repr_origin: ReprOrigin,
    ) -> Oid {
        let oid = self
            .counted
            .alloc(type_name, gc_tracked, repr_text, repr_origin, &self.site);
        let event = self.event_for(oid, MemAction::Alloc, 1);
        self.monitor.record(event);
        oid
    }

    /// Register an external handle that adopts an already-owned reference
    /// (the +1 from `alloc_counted`). Pins the mirror head, if any.
    pub fn adopt_handle(&mut self, oid: Oid) -> Result<(), HeapError> {
        if !self.counted.contains(oid) {
            return Err(HeapError::UnknownObject(oid));
        }
        *self.handles.entry(oid).or_default() += 1;
        self.pin_head(oid, true)?;
        Ok(())
    }

    /// Take an additional external handle (increfs the object).
    pub fn add_handle(&mut self, oid: Oid) -> Result<(), HeapError> {
        self.counted.incref(oid)?;
        *self.handles.entry(oid).or_default() += 1;
        self.pin_head(oid, true)?;
        Ok(())
    }

    /// Release one external handle; dropping the last one unpins the head.
    pub fn drop_handle(&mut self, oid: Oid) -> Result<(), HeapError> {
        let count = self
            .handles
            .get_mut(&oid)
            .ok_or(HeapError::UnknownObject(oid))?;
        *count -= 1;
        if *count == 0 {
            self.handles.remove(&oid);
            self.pin_head(oid, false)?;
        }
        self.decref(oid)?;
        Ok(())
    }

    pub fn handle_count(&self, oid: Oid) -> u32 {
        self.handles.get(&oid).copied().unwrap_or(0)
    }

    pub fn handled_oids(&self) -> impl Iterator<Item = Oid> + '_ {
        self.handles.keys().copied()
    }

    /// Root or unroot the mirror head of `oid` to match its handle state.
    fn pin_head(&mut self, oid: Oid, pinned: bool) -> Result<(), HeapError> {
        if let Some(head) = self.bridge.head_of(oid) {
            if self.traced.contains(head) {
                self.traced.set_root(head, pinned)?;
            }
        }
        Ok(())
    }

    pub(crate) fn pin_for_conversion(&mut self, oid: Oid) {
        *self.conversion_pins.entry(oid).or_default() += 1;
    }

    pub(crate) fn release_conversion_pins(&mut self) -> Result<(), HeapError> {
        let pins: Vec<(Oid, u32)> = self.conversion_pins.iter().map(|(o, n)| (*o, *n)).collect();
        self.conversion_pins.clear();
        for (oid, n) in pins {
            for _ in 0..n {
                self.decref(oid)?;
            }
        }
        Ok(())
    }

    /// Drop one reference, cascading frees through the monitor and
    /// weak-reference hooks.
    pub fn decref(&mut self, oid: Oid) -> Result<(), HeapError> {
        let mut freed = Vec::new();
        self.counted.decref(oid, &mut freed)?;
        self.process_freed(freed);
        Ok(())
    }

    /// Store `child` in `slot` of `oid`. Unless `silent`, the bridge is
    /// notified so the mirror follows the mutation; a silent call models an
    /// unreported native graph change.
    pub fn set_edge(
        &mut self,
        oid: Oid,
        slot: usize,
        child: Option<Oid>,
        silent: bool,
    ) -> Result<(), HeapError> {
        let mut freed = Vec::new();
        self.counted.set_edge(oid, slot, child, &mut freed)?;
        self.process_freed(freed);
        if !silent {
            self.notify_change(oid)?;
        }
        Ok(())
    }

    pub fn traverse(&self, oid: Oid) -> Result<Vec<Oid>, HeapError> {
        self.counted.traverse(oid)
    }

    /// Monitor/weak/bridge bookkeeping for a batch of freed objects.
    pub(crate) fn process_freed(&mut self, freed: Vec<FreedRecord>) {
        for rec in freed {
            debug_assert_eq!(self.handle_count(rec.oid), 0, "freed a handled object");
            let event = MemEvent {
                seq: 0,
                action: MemAction::Free,
                oid: rec.oid,
                type_name: rec.type_name.clone(),
                gc_tracked: rec.gc_tracked,
                repr_text: rec.repr_text.clone(),
                repr_origin: rec.repr_origin,
                refcount_at_event: 0,
                site: self.site.clone(),
                ts: self.clock,
            };
            self.monitor.record(event);
            let fired = self.weak.on_counted_referent_death(rec.oid);
            self.fired_log.extend(fired);
            self.bridge.forget_oid(rec.oid, &self.traced);
            self.freed_log.push(rec.oid);
        }
    }

    pub(crate) fn event_for(&self, oid: Oid, action: MemAction, rc: u32) -> MemEvent {
        let obj = self.counted.get(oid).expect("event target is live");
        MemEvent {
            seq: 0,
            action,
            oid,
            type_name: obj.type_name.clone(),
            gc_tracked: obj.gc_tracked,
            repr_text: obj.repr_text.clone(),
            repr_origin: obj.repr_origin,
            refcount_at_event: rc,
            site: self.site.clone(),
            ts: self.clock,
        }
    }

    /// Oids freed since the last drain, in death order.
    pub fn drain_freed(&mut self) -> Vec<Oid> {
        std::mem::take(&mut self.freed_log)
    }

    /// Weak callbacks fired since the last drain, in firing order.
    pub fn drain_fired_callbacks(&mut self) -> Vec<FiredCallback> {
        std::mem::take(&mut self.fired_log)
    }

    pub(crate) fn fired_push(&mut self, fired: Vec<FiredCallback>) {
        self.fired_log.extend(fired);
    }

    // ── traced-heap operations with hooks ───────────────────────────────

    /// Run one traced collection. Finalized bridge nodes (heads and
    /// backends) are reported to the monitor as finalize events for their
    /// counted targets.
    pub fn collect(&mut self) -> Result<CollectionReport, HeapError> {
        // Roles must be captured up front: finalized nodes are usually swept
        // by the time collect returns.
        let roles: BTreeMap<crate::traced_heap::Tid, NodeRole> = self
            .traced
            .live_tids()
            .filter_map(|t| {
                let n = self.traced.get(t).ok()?;
                (n.finalizable && !n.finalizer_ran).then_some((t, n.role))
            })
            .collect();
        let report = self.traced.collect()?;
        for tid in &report.finalized {
            if let Some(NodeRole::Backend(oid) | NodeRole::GcHead(oid)) = roles.get(tid) {
                if self.counted.contains(*oid) {
                    let rc = self.counted.refcount(*oid).expect("live oid");
                    let event = self.event_for(*oid, MemAction::Finalize, rc);
                    self.monitor.record(event);
                }
            }
        }
        Ok(report)
    }

    /// Traced collection followed by bridge queue processing — one full
    /// "GC cycle" as scenarios see it.
    pub fn gc(&mut self) -> Result<(CollectionReport, crate::bridge::BridgeReport), HeapError> {
        let collected = self.collect()?;
        let processed = self.process_cleared_heads()?;
        Ok((collected, processed))
    }

    pub fn weak_queue(&self) -> QueueId {
        self.weak.queue()
    }

    // ── audit ───────────────────────────────────────────────────────────

    /// Check the refcount accounting identity for every live counted object:
    /// refcount = in-heap edges + head increment + anchored-hub increment +
    /// external handles (+ transient conversion pins). Also verifies that
    /// every edge slot still points at a live object.
    pub fn audit_refcounts(&self) -> Vec<AuditViolation> {
        let in_edges = self.counted.in_edge_counts();
        let mut violations = Vec::new();
        for oid in self.counted.live_oids() {
            let obj = self.counted.get(oid).expect("live oid");
            for child in obj.edges.iter().flatten() {
                if !self.counted.contains(*child) {
                    violations.push(AuditViolation {
                        oid,
                        refcount: obj.refcount,
                        explained: 0,
                        detail: format!("edge slot references dead object {child}"),
                    });
                }
            }
            let rc = self.counted.refcount(oid).expect("live oid");
            let edges = in_edges.get(&oid).copied().unwrap_or(0);
            let head = u32::from(self.bridge.has_head(oid));
            let anchors = self.weak.anchored_increments(oid);
            let handles = self.handle_count(oid);
            let pins = self.conversion_pins.get(&oid).copied().unwrap_or(0);
            let explained = edges + head + anchors + handles + pins;
            if rc != explained {
                violations.push(AuditViolation {
                    oid,
                    refcount: rc,
                    explained,
                    detail: format!(
                        "edges={edges} head={head} anchors={anchors} handles={handles} pins={pins}"
                    ),
                });
            }
        }
        violations
    }

    /// True when the mirror of `oid` matches its counted edges exactly
    /// (restricted to mirrored objects, plus the backend link).
    pub fn mirror_is_fresh(&self, oid: Oid) -> bool {
        let Some(head) = self.bridge.head_of(oid) else {
            return false;
        };
        let Ok(node) = self.traced.get(head) else {
            return false;
        };
        let mut expected: BTreeSet<crate::traced_heap::Tid> = BTreeSet::new();
        if let Ok(children) = self.counted.traverse(oid) {
            for c in children {
                match self.bridge.head_of(c) {
                    Some(h) => {
                        expected.insert(h);
                    }
                    None => return false,
                }
            }
        }
        if let Some(backend) = self.bridge.backend_of(oid) {
            if self.traced.contains(backend) {
                expected.insert(backend);
            }
        }
        node.strong_edges == expected
    }

    /// Counted objects whose traced node plays the given bridge role.
    pub fn role_target(&self, tid: crate::traced_heap::Tid) -> Option<Oid> {
        match self.traced.get(tid).ok()?.role {
            NodeRole::Backend(oid) | NodeRole::GcHead(oid) => Some(oid),
            NodeRole::Plain => None,
        }
    }
}
