//! Cross-runtime weak-reference coherence.
//!
//! All weak references to one logical referent share a single hub, found
//! through the bridge mapping when the referent exists on both sides. While
//! both sides are alive, the hub holds one reference increment on the
//! counted side (the "anchor"), so the counted referent outlives its traced
//! pendant: the traced referent dies first, silently — the hub releases the
//! anchor but does not clear or fire callbacks, and a later deref recreates
//! the traced referent from counted state. Only the death of the counted
//! referent (or of a traced-only referent) clears the hub and fires every
//! member callback exactly once.
//!
//! Anchor increments are tracked in their own ledger, separate from mirror
//! edges, so the consistency check can explain them without mistaking them
//! for cycle structure.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::counted_heap::Oid;
use crate::error::HeapError;
use crate::traced_heap::{NodeRole, QueueId, Tid, Wid};
use crate::world::{Ref, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct HubId(pub u64);

impl fmt::Display for HubId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "hub{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct HandleId(pub u64);

impl fmt::Display for HandleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "wr{}", self.0)
    }
}

/// Which built-in weak reference flavor a handle models. Affects only how
/// reports render the handle, never deref or clearing behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum WeakKind {
    Plain,
    Proxy,
    CallableProxy,
}

/// Which side created a handle. Counted-origin handles live in the
/// per-referent native list and fire first on death.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HandleOrigin {
    Counted,
    Traced,
}

#[derive(Debug, Clone)]
pub struct WeakRefHandle {
    pub handle_id: HandleId,
    pub hub: HubId,
    pub kind: WeakKind,
    pub callback: Option<String>,
    pub origin: HandleOrigin,
    pub fired: bool,
}

#[derive(Debug, Clone)]
pub struct WeakHub {
    pub hub_id: HubId,
    pub traced_referent: Option<Tid>,
    pub counted_referent: Option<Oid>,
    pub holds_counted_increment: bool,
    /// Member handles in registration order.
    pub members: Vec<HandleId>,
    pub cleared: bool,
    /// Weak cell watching the traced referent, when one exists.
    referent_cell: Option<Wid>,
}

/// A callback that fired, with the handle it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FiredCallback {
    pub handle: HandleId,
    pub callback: String,
}

/// Outcome of dereferencing a weak handle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerefOutcome {
    Counted(Oid),
    Traced(Tid),
    Cleared,
}

#[derive(Debug, Default)]
pub struct WeakRegistry {
    hubs: BTreeMap<HubId, WeakHub>,
    handles: BTreeMap<HandleId, WeakRefHandle>,
    by_oid: BTreeMap<Oid, HubId>,
    by_tid: BTreeMap<Tid, HubId>,
    cell_to_hub: BTreeMap<Wid, HubId>,
    /// Counted-origin handles per referent, in insertion order.
    native_lists: BTreeMap<Oid, Vec<HandleId>>,
    queue: QueueId,
    next_hub: u64,
    next_handle: u64,
}

impl WeakRegistry {
    pub fn new(queue: QueueId) -> Self {
        Self {
            queue,
            ..Default::default()
        }
    }

    pub fn queue(&self) -> QueueId {
        self.queue
    }

    pub fn hub(&self, id: HubId) -> Option<&WeakHub> {
        self.hubs.get(&id)
    }

    pub fn handle(&self, id: HandleId) -> Option<&WeakRefHandle> {
        self.handles.get(&id)
    }

    pub fn hub_of_oid(&self, oid: Oid) -> Option<HubId> {
        self.by_oid.get(&oid).copied()
    }

    pub fn hub_of_tid(&self, tid: Tid) -> Option<HubId> {
        self.by_tid.get(&tid).copied()
    }

    pub fn live_hub_count(&self) -> usize {
        self.hubs.len()
    }

    /// True when the handle observes a cleared hub (or was dropped).
    pub fn is_cleared(&self, id: HandleId) -> bool {
        match self.handles.get(&id) {
            Some(h) => self.hubs.get(&h.hub).map(|hub| hub.cleared).unwrap_or(true),
            None => true,
        }
    }

    /// Anchored-hub increments currently held on `oid` (the separate ledger
    /// the consistency check consults).
    pub fn anchored_increments(&self, oid: Oid) -> u32 {
        match self.by_oid.get(&oid).and_then(|h| self.hubs.get(h)) {
            Some(hub) => u32::from(hub.holds_counted_increment),
            None => 0,
        }
    }

    /// Drop the anchor flag for `oid`'s hub, reporting whether one was held.
    /// The caller owns the matching decref.
    pub(crate) fn take_anchor(&mut self, oid: Oid) -> bool {
        if let Some(hub) = self.by_oid.get(&oid).and_then(|h| self.hubs.get_mut(h)) {
            if hub.holds_counted_increment {
                hub.holds_counted_increment = false;
                return true;
            }
        }
        false
    }

    pub(crate) fn hub_for_cell(&self, wid: Wid) -> Option<HubId> {
        let hub_id = self.cell_to_hub.get(&wid).copied()?;
        // Stale cells of replaced referents are ignored.
        let hub = self.hubs.get(&hub_id)?;
        (hub.referent_cell == Some(wid)).then_some(hub_id)
    }

    /// The counted referent died: clear the hub and fire every member
    /// callback exactly once — counted-origin handles first, in native-list
    /// order, then traced-origin members in registration order.
    pub(crate) fn on_counted_referent_death(&mut self, oid: Oid) -> Vec<FiredCallback> {
        let Some(hub_id) = self.by_oid.remove(&oid) else {
            return Vec::new();
        };
        let mut fired = Vec::new();
        let (members, native_first) = {
            let hub = self.hubs.get_mut(&hub_id).expect("indexed hub exists");
            hub.cleared = true;
            hub.holds_counted_increment = false;
            if let Some(tid) = hub.traced_referent.take() {
                self.by_tid.remove(&tid);
            }
            if let Some(w) = hub.referent_cell.take() {
                self.cell_to_hub.remove(&w);
            }
            hub.counted_referent = None;
            let native_first = self.native_lists.remove(&oid).unwrap_or_default();
            (hub.members.clone(), native_first)
        };
        let mut order = native_first;
        for m in &members {
            if !order.contains(m) {
                order.push(*m);
            }
        }
        for id in order {
            let handle = self.handles.get_mut(&id).expect("member handle exists");
            if !handle.fired {
                handle.fired = true;
                if let Some(cb) = &handle.callback {
                    fired.push(FiredCallback {
                        handle: id,
                        callback: cb.clone(),
                    });
                }
            }
        }
        self.unregister_if_done(hub_id);
        fired
    }

    /// A traced-only referent died: same clearing semantics, keyed by tid.
    fn on_traced_only_death(&mut self, hub_id: HubId) -> Vec<FiredCallback> {
        let mut fired = Vec::new();
        let members = {
            let Some(hub) = self.hubs.get_mut(&hub_id) else {
                return fired;
            };
            debug_assert!(hub.counted_referent.is_none());
            hub.cleared = true;
            if let Some(tid) = hub.traced_referent.take() {
                self.by_tid.remove(&tid);
            }
            hub.members.clone()
        };
        for id in members {
            let handle = self.handles.get_mut(&id).expect("member handle exists");
            if !handle.fired {
                handle.fired = true;
                if let Some(cb) = &handle.callback {
                    fired.push(FiredCallback {
                        handle: id,
                        callback: cb.clone(),
                    });
                }
            }
        }
        self.unregister_if_done(hub_id);
        fired
    }

    /// Unregister a hub once it is cleared and the last handle is gone.
    fn unregister_if_done(&mut self, hub_id: HubId) {
        let Some(hub) = self.hubs.get(&hub_id) else {
            return;
        };
        let no_members = hub.members.iter().all(|m| !self.handles.contains_key(m));
        if hub.cleared && no_members {
            let hub = self.hubs.remove(&hub_id).expect("checked above");
            if let Some(w) = hub.referent_cell {
                self.cell_to_hub.remove(&w);
            }
        }
    }
}

impl World {
    /// Create a weak reference to a live referent on either side. All weak
    /// references to one logical referent share a hub; when the referent is
    /// bridged, the hub spans both sides and holds the counted anchor.
    pub fn new_weakref(
        &mut self,
        referent: Ref,
        kind: WeakKind,
        callback: Option<String>,
    ) -> Result<HandleId, HeapError> {
        let (oid, tid, origin) = match referent {
            Ref::Counted(oid) => {
                if !self.counted.contains(oid) {
                    return Err(HeapError::UnknownReferent);
                }
                let tid = self
                    .bridge
                    .backend_of(oid)
                    .filter(|t| self.traced.contains(*t));
                (Some(oid), tid, HandleOrigin::Counted)
            }
            Ref::Traced(tid) => {
                if !self.traced.contains(tid) {
                    return Err(HeapError::UnknownReferent);
                }
                match self.traced.get(tid)?.role {
                    NodeRole::Backend(oid) => (Some(oid), Some(tid), HandleOrigin::Traced),
                    NodeRole::Plain => (None, Some(tid), HandleOrigin::Traced),
                    NodeRole::GcHead(_) => return Err(HeapError::UnknownReferent),
                }
            }
        };

        let hub_id = match (
            oid.and_then(|o| self.weak.by_oid.get(&o).copied()),
            tid.and_then(|t| self.weak.by_tid.get(&t).copied()),
        ) {
            (Some(h), _) | (None, Some(h)) => h,
            (None, None) => {
                self.weak.next_hub += 1;
                let hub_id = HubId(self.weak.next_hub);
                self.weak.hubs.insert(
                    hub_id,
                    WeakHub {
                        hub_id,
                        traced_referent: None,
                        counted_referent: None,
                        holds_counted_increment: false,
                        members: Vec::new(),
                        cleared: false,
                        referent_cell: None,
                    },
                );
                hub_id
            }
        };
        if let Some(o) = oid {
            self.attach_hub_counted(hub_id, o)?;
        }
        if let Some(t) = tid {
            self.attach_hub_traced(hub_id, t)?;
        }
        self.acquire_anchor(hub_id)?;

        self.weak.next_handle += 1;
        let handle_id = HandleId(self.weak.next_handle);
        self.weak.handles.insert(
            handle_id,
            WeakRefHandle {
                handle_id,
                hub: hub_id,
                kind,
                callback,
                origin,
                fired: false,
            },
        );
        self.weak
            .hubs
            .get_mut(&hub_id)
            .expect("hub just ensured")
            .members
            .push(handle_id);
        if origin == HandleOrigin::Counted {
            self.weak
                .native_lists
                .entry(oid.expect("counted-origin handle has a counted referent"))
                .or_default()
                .push(handle_id);
        }
        Ok(handle_id)
    }

    /// Follow a weak handle. Cleared hubs yield [`DerefOutcome::Cleared`];
    /// otherwise the handle's own side is returned, recreating a dead traced
    /// referent from the live counted one when needed.
    pub fn deref_weak(&mut self, id: HandleId) -> Result<DerefOutcome, HeapError> {
        let handle = self.weak.handles.get(&id).ok_or(HeapError::UnknownHandle)?;
        let hub_id = handle.hub;
        let origin = handle.origin;
        let hub = self.weak.hubs.get(&hub_id).expect("handle hub exists");
        if hub.cleared {
            return Ok(DerefOutcome::Cleared);
        }
        match origin {
            HandleOrigin::Counted => {
                let oid = hub
                    .counted_referent
                    .expect("uncleared counted-origin hub has a counted referent");
                Ok(DerefOutcome::Counted(oid))
            }
            HandleOrigin::Traced => {
                if let Some(tid) = hub.traced_referent {
                    if self.traced.contains(tid) {
                        return Ok(DerefOutcome::Traced(tid));
                    }
                }
                let Some(oid) = hub.counted_referent else {
                    // Traced-only referent that is gone but not yet processed.
                    return Ok(DerefOutcome::Cleared);
                };
                // Recreate the traced referent from counted state; the hub is
                // rebound (and re-anchored) by the backend installation.
                let tid = self.create_backend_from(oid)?;
                Ok(DerefOutcome::Traced(tid))
            }
        }
    }

    /// Drop a weak handle. The hub survives while other handles or a live
    /// referent still need it.
    pub fn drop_weak_handle(&mut self, id: HandleId) -> Result<(), HeapError> {
        let handle = self
            .weak
            .handles
            .remove(&id)
            .ok_or(HeapError::UnknownHandle)?;
        let hub_id = handle.hub;
        if let Some(hub) = self.weak.hubs.get_mut(&hub_id) {
            hub.members.retain(|m| *m != id);
        }
        for list in self.weak.native_lists.values_mut() {
            list.retain(|m| *m != id);
        }
        // A hub with no members and no live referent is unregistered. A live
        // referent keeps its hub for reuse; an anchored hub always has a live
        // counted referent, so no anchor can be leaked here.
        let remove = match self.weak.hubs.get(&hub_id) {
            Some(hub) if hub.members.is_empty() => {
                let counted_live = hub
                    .counted_referent
                    .map(|o| self.counted.contains(o))
                    .unwrap_or(false);
                let traced_live = hub
                    .traced_referent
                    .map(|t| self.traced.contains(t))
                    .unwrap_or(false);
                !counted_live && !traced_live
            }
            _ => false,
        };
        if remove {
            let hub = self.weak.hubs.remove(&hub_id).expect("checked above");
            debug_assert!(!hub.holds_counted_increment);
            if let Some(o) = hub.counted_referent {
                self.weak.by_oid.remove(&o);
            }
            if let Some(t) = hub.traced_referent {
                self.weak.by_tid.remove(&t);
            }
            if let Some(w) = hub.referent_cell {
                self.weak.cell_to_hub.remove(&w);
            }
        }
        Ok(())
    }

    /// The hub's traced referent was swept: release the counted anchor and
    /// forget the traced side, but do not clear — the counted referent lives
    /// on and callbacks wait for its death. Idempotent, and a no-op while
    /// the traced referent is in fact still alive.
    pub fn on_traced_referent_collected(&mut self, hub_id: HubId) -> Result<(), HeapError> {
        let traced_alive = self
            .weak
            .hubs
            .get(&hub_id)
            .and_then(|h| h.traced_referent)
            .map(|t| self.traced.contains(t))
            .unwrap_or(false);
        if traced_alive {
            return Ok(());
        }
        let Some(hub) = self.weak.hubs.get_mut(&hub_id) else {
            return Ok(());
        };
        if hub.cleared {
            return Ok(());
        }
        if let Some(tid) = hub.traced_referent.take() {
            self.weak.by_tid.remove(&tid);
        }
        if let Some(w) = hub.referent_cell.take() {
            self.weak.cell_to_hub.remove(&w);
        }
        let release = hub.holds_counted_increment;
        hub.holds_counted_increment = false;
        if release {
            let oid = hub
                .counted_referent
                .expect("anchored hub has a counted referent");
            self.decref(oid)?;
        }
        Ok(())
    }

    /// Drain the hub reference queue: traced-only referents clear their hub
    /// and fire callbacks; bridged referents only release the anchor.
    pub(crate) fn process_hub_queue(&mut self) -> Result<(), HeapError> {
        let queue = self.weak.queue();
        while let Some(wid) = self.traced.poll_queue(queue)? {
            let Some(hub_id) = self.weak.hub_for_cell(wid) else {
                continue;
            };
            let hub = self.weak.hubs.get(&hub_id).expect("indexed hub exists");
            if hub.counted_referent.is_some() {
                self.on_traced_referent_collected(hub_id)?;
            } else {
                let fired = self.weak.on_traced_only_death(hub_id);
                self.fired_push(fired);
            }
        }
        Ok(())
    }

    /// A counted/traced pair was (re)bound by the bridge: extend any hub on
    /// either side to span both, and take the anchor while both live.
    pub(crate) fn weak_bind_pair(&mut self, oid: Oid, tid: Tid) -> Result<(), HeapError> {
        let hub_id = match (
            self.weak.by_oid.get(&oid).copied(),
            self.weak.by_tid.get(&tid).copied(),
        ) {
            (Some(h), _) | (None, Some(h)) => h,
            (None, None) => return Ok(()),
        };
        if self.weak.hubs.get(&hub_id).map(|h| h.cleared) != Some(false) {
            return Ok(());
        }
        self.attach_hub_counted(hub_id, oid)?;
        self.attach_hub_traced(hub_id, tid)?;
        self.acquire_anchor(hub_id)?;
        Ok(())
    }

    fn attach_hub_counted(&mut self, hub_id: HubId, oid: Oid) -> Result<(), HeapError> {
        let hub = self.weak.hubs.get_mut(&hub_id).expect("hub exists");
        if hub.counted_referent != Some(oid) {
            debug_assert!(hub.counted_referent.is_none(), "one hub per referent");
            hub.counted_referent = Some(oid);
        }
        self.weak.by_oid.insert(oid, hub_id);
        Ok(())
    }

    fn attach_hub_traced(&mut self, hub_id: HubId, tid: Tid) -> Result<(), HeapError> {
        let need_cell = {
            let hub = self.weak.hubs.get_mut(&hub_id).expect("hub exists");
            if hub.traced_referent == Some(tid) && hub.referent_cell.is_some() {
                false
            } else {
                if let Some(old) = hub.traced_referent {
                    self.weak.by_tid.remove(&old);
                }
                if let Some(w) = hub.referent_cell.take() {
                    self.weak.cell_to_hub.remove(&w);
                }
                hub.traced_referent = Some(tid);
                true
            }
        };
        self.weak.by_tid.insert(tid, hub_id);
        if need_cell {
            let wid = self.traced.register_weak(tid, Some(self.weak.queue()))?;
            self.weak
                .hubs
                .get_mut(&hub_id)
                .expect("hub exists")
                .referent_cell = Some(wid);
            self.weak.cell_to_hub.insert(wid, hub_id);
        }
        Ok(())
    }

    /// Take the counted anchor when both referents are alive and it is not
    /// already held.
    fn acquire_anchor(&mut self, hub_id: HubId) -> Result<(), HeapError> {
        let (oid, take) = {
            let hub = self.weak.hubs.get(&hub_id).expect("hub exists");
            let both_live = match (hub.counted_referent, hub.traced_referent) {
                (Some(o), Some(t)) => self.counted.contains(o) && self.traced.contains(t),
                _ => false,
            };
            (
                hub.counted_referent,
                both_live && !hub.holds_counted_increment && !hub.cleared,
            )
        };
        if take {
            let oid = oid.expect("both_live implies counted referent");
            self.counted.incref(oid)?;
            self.weak
                .hubs
                .get_mut(&hub_id)
                .expect("hub exists")
                .holds_counted_increment = true;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counted_heap::ReprOrigin;
    use crate::traced_heap::ValuePayload;
    use crate::world::World;

    fn world() -> World {
        let mut w = World::new();
        w.monitor.set_enabled(true);
        w
    }

    fn counted(w: &mut World, ty: &str, gc: bool) -> Oid {
        let oid = w.alloc_counted(ty, gc, ty, ReprOrigin::Counted);
        w.adopt_handle(oid).unwrap();
        oid
    }

    fn plain_value(w: &mut World, ty: &str) -> Tid {
        let tid = w.traced.create_node(
            false,
            NodeRole::Plain,
            Some(ValuePayload {
                type_name: ty.into(),
                gc_tracked: false,
                repr_text: ty.into(),
            }),
        );
        w.traced.set_root(tid, true).unwrap();
        tid
    }

    #[test]
    fn same_referent_shares_one_hub() {
        let mut w = world();
        let t = plain_value(&mut w, "str");
        let h1 = w
            .new_weakref(Ref::Traced(t), WeakKind::Plain, None)
            .unwrap();
        let h2 = w
            .new_weakref(Ref::Traced(t), WeakKind::Proxy, None)
            .unwrap();
        assert_ne!(h1, h2);
        assert_eq!(
            w.weak.handle(h1).unwrap().hub,
            w.weak.handle(h2).unwrap().hub
        );
        assert_eq!(w.weak.live_hub_count(), 1);
    }

    #[test]
    fn weakref_on_dead_referent_is_rejected() {
        let mut w = world();
        let s = counted(&mut w, "str", false);
        w.drop_handle(s).unwrap();
        assert_eq!(
            w.new_weakref(Ref::Counted(s), WeakKind::Plain, None),
            Err(HeapError::UnknownReferent)
        );
    }

    #[test]
    fn bridged_referent_derefs_to_counterparts_on_both_sides() {
        let mut w = world();
        let s = counted(&mut w, "str", false);
        let native_side = w
            .new_weakref(Ref::Counted(s), WeakKind::Plain, None)
            .unwrap();
        let backend = w.pass_to_managed(s).unwrap();
        let managed_side = w
            .new_weakref(Ref::Traced(backend), WeakKind::Plain, None)
            .unwrap();
        // One logical referent, one hub, two handles — each side sees its own
        // representation of the same referent.
        assert_eq!(
            w.weak.handle(native_side).unwrap().hub,
            w.weak.handle(managed_side).unwrap().hub
        );
        assert_eq!(w.deref_weak(native_side).unwrap(), DerefOutcome::Counted(s));
        assert_eq!(
            w.deref_weak(managed_side).unwrap(),
            DerefOutcome::Traced(backend)
        );
        assert!(w.audit_refcounts().is_empty());
    }

    #[test]
    fn anchored_hub_releases_increment_on_traced_collection() {
        let mut w = world();
        let s = counted(&mut w, "str", false);
        let backend = w.pass_to_managed(s).unwrap();
        let handle = w
            .new_weakref(Ref::Traced(backend), WeakKind::Plain, None)
            .unwrap();
        // handle + mirror head + anchor
        assert_eq!(w.counted.refcount(s).unwrap(), 3);
        assert_eq!(w.weak.anchored_increments(s), 1);

        w.drop_handle(s).unwrap();
        // Backend and head are now unreachable and die together.
        let report = w.collect().unwrap();
        assert!(report.swept.contains(&backend));
        let hub = w.weak.hub_of_oid(s).unwrap();
        w.on_traced_referent_collected(hub).unwrap();
        assert_eq!(w.counted.refcount(s).unwrap(), 1);
        assert_eq!(w.weak.anchored_increments(s), 0);
        assert!(w.audit_refcounts().is_empty());
        // Idempotent on double invocation.
        w.on_traced_referent_collected(hub).unwrap();
        assert_eq!(w.counted.refcount(s).unwrap(), 1);
        // The handle is not cleared and deref recreates the referent.
        assert!(!w.weak.is_cleared(handle));
        match w.deref_weak(handle).unwrap() {
            DerefOutcome::Traced(t) => {
                assert_ne!(t, backend);
                let node = w.traced.get(t).unwrap();
                assert_eq!(node.role, NodeRole::Backend(s));
                assert_eq!(node.payload.as_ref().unwrap().type_name, "str");
            }
            other => panic!("expected recreated traced referent, got {other:?}"),
        }
        // Both sides alive again: the anchor is restored.
        assert_eq!(w.weak.anchored_increments(s), 1);
        assert!(w.audit_refcounts().is_empty());
    }

    #[test]
    fn deref_is_deterministic_without_mutation() {
        let mut w = world();
        let s = counted(&mut w, "str", false);
        let backend = w.pass_to_managed(s).unwrap();
        let handle = w
            .new_weakref(Ref::Traced(backend), WeakKind::Plain, None)
            .unwrap();
        w.drop_handle(s).unwrap();
        w.collect().unwrap();
        let first = w.deref_weak(handle).unwrap();
        let second = w.deref_weak(handle).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn counted_death_fires_callbacks_native_list_first() {
        let mut w = world();
        let s = counted(&mut w, "str", false);
        let backend = w.pass_to_managed(s).unwrap();
        let c1 = w
            .new_weakref(Ref::Counted(s), WeakKind::Plain, Some("c1".into()))
            .unwrap();
        let t1 = w
            .new_weakref(Ref::Traced(backend), WeakKind::Plain, Some("t1".into()))
            .unwrap();
        let c2 = w
            .new_weakref(Ref::Counted(s), WeakKind::Plain, Some("c2".into()))
            .unwrap();
        w.drop_handle(s).unwrap();
        w.gc().unwrap();
        assert!(!w.counted.contains(s));
        let fired = w.drain_fired_callbacks();
        let order: Vec<(HandleId, &str)> = fired
            .iter()
            .map(|f| (f.handle, f.callback.as_str()))
            .collect();
        // Counted-origin handles fire first in insertion order, then the
        // traced-origin member.
        assert_eq!(order, vec![(c1, "c1"), (c2, "c2"), (t1, "t1")]);
        for h in [c1, c2, t1] {
            assert!(w.weak.is_cleared(h));
            assert_eq!(w.deref_weak(h).unwrap(), DerefOutcome::Cleared);
        }
    }

    #[test]
    fn death_without_weakrefs_is_harmless() {
        let mut w = world();
        let s = counted(&mut w, "str", false);
        w.drop_handle(s).unwrap();
        assert!(w.drain_fired_callbacks().is_empty());
    }

    #[test]
    fn dies_first_policy_end_to_end() {
        // The traced referent dies at one cycle with no callbacks; the
        // counted pendant dies later and only then do callbacks fire.
        let mut w = world();
        let s = counted(&mut w, "str", false);
        let backend = w.pass_to_managed(s).unwrap();
        let handle = w
            .new_weakref(Ref::Traced(backend), WeakKind::Plain, Some("cb".into()))
            .unwrap();
        // An unmirrored container keeps s natively alive after its own
        // handle is gone.
        let holder = counted(&mut w, "custom_holder", true);
        w.set_edge(holder, 0, Some(s), false).unwrap();
        w.drop_handle(s).unwrap();

        w.gc().unwrap();
        // Traced side is gone, counted side lives, nothing fired.
        assert!(!w.traced.contains(backend));
        assert!(w.counted.contains(s));
        assert!(w.drain_fired_callbacks().is_empty());
        assert!(!w.weak.is_cleared(handle));

        // Now let the counted side die too.
        w.set_edge(holder, 0, None, false).unwrap();
        w.gc().unwrap();
        assert!(!w.counted.contains(s));
        let fired = w.drain_fired_callbacks();
        assert_eq!(fired.len(), 1);
        assert_eq!(fired[0].callback, "cb");
        assert!(w.weak.is_cleared(handle));
    }

    #[test]
    fn traced_only_hub_clears_on_sweep() {
        let mut w = world();
        let t = plain_value(&mut w, "str");
        let handle = w
            .new_weakref(Ref::Traced(t), WeakKind::Plain, Some("cb".into()))
            .unwrap();
        w.traced.set_root(t, false).unwrap();
        w.gc().unwrap();
        assert!(w.weak.is_cleared(handle));
        let fired = w.drain_fired_callbacks();
        assert_eq!(fired.len(), 1);
        assert_eq!(w.deref_weak(handle).unwrap(), DerefOutcome::Cleared);
    }

    #[test]
    fn hub_unregisters_when_last_handle_drops_on_dead_referent() {
        let mut w = world();
        let t = plain_value(&mut w, "str");
        let handle = w
            .new_weakref(Ref::Traced(t), WeakKind::Plain, None)
            .unwrap();
        assert_eq!(w.weak.live_hub_count(), 1);
        w.traced.set_root(t, false).unwrap();
        w.gc().unwrap();
        // Cleared but still registered: the handle can observe the clear.
        assert_eq!(w.weak.live_hub_count(), 1);
        w.drop_weak_handle(handle).unwrap();
        assert_eq!(w.weak.live_hub_count(), 0);
        assert_eq!(w.deref_weak(handle), Err(HeapError::UnknownHandle));
    }

    #[test]
    fn hub_survives_drop_while_referent_lives() {
        let mut w = world();
        let s = counted(&mut w, "str", false);
        let h1 = w
            .new_weakref(Ref::Counted(s), WeakKind::Plain, None)
            .unwrap();
        let hub = w.weak.handle(h1).unwrap().hub;
        w.drop_weak_handle(h1).unwrap();
        // Referent alive: the hub is kept and reused.
        assert_eq!(w.weak.live_hub_count(), 1);
        let h2 = w
            .new_weakref(Ref::Counted(s), WeakKind::Plain, None)
            .unwrap();
        assert_eq!(w.weak.handle(h2).unwrap().hub, hub);
    }
}
