//! The bridge between the counted and traced heaps.
//!
//! Every counted object that crosses the bridge gets a minimal mirror head
//! on the traced side. The head holds exactly one reference increment on its
//! target and its strong edges mirror the target's counted edges, so the
//! tracing collector can see native structure — including cycles — and
//! decide reachability for it.
//!
//! Heads are tracked by weak cells on a dedicated reference queue. When the
//! collector sweeps a head, the queue processing groups the affected objects
//! into strongly-connected components of the counted graph and checks every
//! component for inner consistency: each member's refcount must be fully
//! explained by component-internal edges, its own head increment and any
//! anchored weak-hub increment, with no external handle on it. Consistent
//! components are provably dead and are released; inconsistent ones are a
//! sign of an unreported graph mutation, so their mirrors are rebuilt and
//! swept backends of delegating objects are resurrected instead. Objects can
//! therefore outlive their death by a cycle or two, but are never freed
//! while still in use.

use std::collections::{BTreeMap, BTreeSet};

use crate::counted_heap::{BridgeMode, Oid};
use crate::error::HeapError;
use crate::traced_heap::{NodeRole, QueueId, Tid, ValuePayload, Wid};
use crate::world::World;

/// Maps type names to how their instances are linked across the bridge.
/// Immutable leaf and container types are mirrored (macro-style access makes
/// one-time synchronization sufficient); mutable containers delegate to a
/// traced backend.
#[derive(Debug, Clone)]
pub struct ModeTable {
    overrides: BTreeMap<String, BridgeMode>,
    default: BridgeMode,
}

impl Default for ModeTable {
    fn default() -> Self {
        let mut overrides = BTreeMap::new();
        for t in ["str", "int", "tuple"] {
            overrides.insert(t.to_string(), BridgeMode::Mirrored);
        }
        for t in ["list", "dict"] {
            overrides.insert(t.to_string(), BridgeMode::WrapsTraced);
        }
        Self {
            overrides,
            default: BridgeMode::WrapsTraced,
        }
    }
}

impl ModeTable {
    pub fn mode_for(&self, type_name: &str) -> BridgeMode {
        self.overrides
            .get(type_name)
            .copied()
            .unwrap_or(self.default)
    }

    pub fn set(&mut self, type_name: &str, mode: BridgeMode) {
        self.overrides.insert(type_name.to_string(), mode);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadEntry {
    pub tid: Tid,
    pub cell: Wid,
}

#[derive(Debug, Clone, Copy)]
pub struct BackendEntry {
    pub tid: Tid,
    /// Weak cell tracking the backend so its sweep releases the mapping.
    pub anchor_cell: Wid,
}

/// Verdict of a subgraph consistency check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Consistency {
    Consistent,
    Inconsistent { witness: Oid },
}

/// What one queue-processing pass did.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BridgeReport {
    pub released: BTreeSet<Oid>,
    pub reexplored: BTreeSet<Oid>,
    pub resurrected_backends: BTreeSet<Oid>,
}

#[derive(Debug)]
pub struct Bridge {
    pub mode_table: ModeTable,
    queue: QueueId,
    heads: BTreeMap<Oid, HeadEntry>,
    head_cells: BTreeMap<Wid, Oid>,
    backends: BTreeMap<Oid, BackendEntry>,
    backend_tids: BTreeMap<Tid, Oid>,
    anchor_cells: BTreeMap<Wid, Oid>,
    /// Objects whose backend was swept and not yet restored.
    swept_backends: BTreeSet<Oid>,
}

impl Bridge {
    pub fn new(queue: QueueId) -> Self {
        Self {
            mode_table: ModeTable::default(),
            queue,
            heads: BTreeMap::new(),
            head_cells: BTreeMap::new(),
            backends: BTreeMap::new(),
            backend_tids: BTreeMap::new(),
            anchor_cells: BTreeMap::new(),
            swept_backends: BTreeSet::new(),
        }
    }

    pub fn queue(&self) -> QueueId {
        self.queue
    }

    pub fn has_head(&self, oid: Oid) -> bool {
        self.heads.contains_key(&oid)
    }

    pub fn head_of(&self, oid: Oid) -> Option<Tid> {
        self.heads.get(&oid).map(|e| e.tid)
    }

    /// The backend tid mapped to `oid`, whether or not it is still live.
    pub fn backend_of(&self, oid: Oid) -> Option<Tid> {
        self.backends.get(&oid).map(|e| e.tid)
    }

    pub fn oid_of_backend(&self, tid: Tid) -> Option<Oid> {
        self.backend_tids.get(&tid).copied()
    }

    pub fn mirrored_oids(&self) -> impl Iterator<Item = Oid> + '_ {
        self.heads.keys().copied()
    }

    pub fn backend_was_swept(&self, oid: Oid) -> bool {
        self.swept_backends.contains(&oid)
    }

    /// Drop all bookkeeping for a freed counted object.
    pub(crate) fn forget_oid(&mut self, oid: Oid, traced: &crate::traced_heap::TracedHeap) {
        if let Some(entry) = self.heads.remove(&oid) {
            // A freed object cannot hold a head increment; the entry may only
            // linger if its head node is already dead.
            debug_assert!(!traced.contains(entry.tid));
            self.head_cells.remove(&entry.cell);
        }
        if let Some(entry) = self.backends.remove(&oid) {
            // The backend node may still be live here (a deref recreated it
            // right before its object died); it is unreachable garbage and
            // the next collection sweeps it.
            self.backend_tids.remove(&entry.tid);
            self.anchor_cells.remove(&entry.anchor_cell);
        }
        self.swept_backends.remove(&oid);
    }
}

impl World {
    /// Pass a traced node to the native side, returning its counted
    /// counterpart. Plain value nodes (and everything strongly reachable
    /// from them) are converted into counted objects with the linkage mode
    /// given by the type table, then mirrored; existing mappings are reused.
    pub fn pass_to_native(&mut self, tid: Tid) -> Result<Oid, HeapError> {
        let node = self.traced.get(tid)?;
        match node.role {
            NodeRole::Backend(oid) => return Ok(oid),
            NodeRole::GcHead(_) => return Err(HeapError::InvalidRole(tid)),
            NodeRole::Plain => {
                if node.payload.is_none() {
                    return Err(HeapError::InvalidRole(tid));
                }
            }
        }

        // Discover the traced value graph in preorder, children in ascending
        // tid order. Existing backends terminate the walk.
        let mut order: Vec<Tid> = Vec::new();
        let mut seen: BTreeSet<Tid> = BTreeSet::new();
        let mut stack = vec![tid];
        while let Some(t) = stack.pop() {
            if !seen.insert(t) {
                continue;
            }
            let node = self.traced.get(t)?;
            match node.role {
                NodeRole::Backend(_) => continue,
                NodeRole::GcHead(_) => return Err(HeapError::InvalidRole(t)),
                NodeRole::Plain => {
                    if node.payload.is_none() {
                        return Err(HeapError::InvalidRole(t));
                    }
                }
            }
            order.push(t);
            // Reverse so the smallest tid is converted first.
            for child in node.strong_edges.iter().rev() {
                stack.push(*child);
            }
        }

        // Allocate counterparts; each fresh object is pinned until the
        // mirror holds it.
        let mut mapping: BTreeMap<Tid, Oid> = BTreeMap::new();
        for t in &order {
            let payload = self
                .traced
                .get(*t)?
                .payload
                .clone()
                .expect("checked during discovery");
            let oid = self.alloc_counted(
                &payload.type_name,
                payload.gc_tracked,
                &payload.repr_text,
                crate::counted_heap::ReprOrigin::Traced,
            );
            let mode = self.bridge.mode_table.mode_for(&payload.type_name);
            self.counted.set_bridge_mode(oid, mode)?;
            self.pin_for_conversion(oid);
            mapping.insert(*t, oid);
        }

        // Wire counted edges to match the traced structure, then promote
        // each converted node to the backend of its counterpart.
        for t in &order {
            let children: Vec<Tid> = self.traced.get(*t)?.strong_edges.iter().copied().collect();
            let oid = mapping[t];
            for (slot, child) in children.iter().enumerate() {
                let child_oid = mapping
                    .get(child)
                    .copied()
                    .or_else(|| self.bridge.oid_of_backend(*child))
                    .expect("children are converted or already mapped");
                let mut freed = Vec::new();
                self.counted
                    .set_edge(oid, slot, Some(child_oid), &mut freed)?;
                debug_assert!(freed.is_empty());
            }
        }
        for (t, oid) in &mapping {
            self.traced.set_role(*t, NodeRole::Backend(*oid))?;
            self.install_backend(*oid, *t)?;
        }

        let root = mapping[&tid];
        self.mirror_subgraph(root)?;
        // The mirror links head -> backend; add the reverse edge so a live
        // backend keeps its head (and through it the native object) alive.
        for (t, oid) in &mapping {
            let head = self.bridge.head_of(*oid).expect("just mirrored");
            self.traced.link(*t, head)?;
        }
        self.release_conversion_pins()?;
        Ok(root)
    }

    /// Pass a counted object to the managed side, returning its traced
    /// backend. Creates (or recreates) the backend and the mirror if needed;
    /// idempotent while the backend is alive.
    pub fn pass_to_managed(&mut self, oid: Oid) -> Result<Tid, HeapError> {
        if !self.counted.contains(oid) {
            return Err(HeapError::UnknownObject(oid));
        }
        if let Some(tid) = self.bridge.backend_of(oid) {
            if self.traced.contains(tid) {
                return Ok(tid);
            }
        }
        // A rooted backend must keep its object alive; that protection runs
        // backend -> head -> increment, so the mirror comes first.
        self.mirror_subgraph(oid)?;
        if self.counted.get(oid)?.bridge_mode == BridgeMode::None {
            self.counted
                .set_bridge_mode(oid, BridgeMode::WrappedByTraced)?;
        }
        self.create_backend_from(oid)
    }

    /// Explore the counted graph from `oid` and mirror it: every reachable
    /// object gets a head holding one increment, and each explored head's
    /// edges are rebuilt to match the object's current counted edges (plus
    /// the backend link), so the mirror of the explored set is exact.
    pub fn mirror_subgraph(&mut self, oid: Oid) -> Result<BTreeSet<Tid>, HeapError> {
        if !self.counted.contains(oid) {
            return Err(HeapError::UnknownObject(oid));
        }
        let mut members: BTreeSet<Oid> = BTreeSet::new();
        let mut stack = vec![oid];
        while let Some(o) = stack.pop() {
            if !members.insert(o) {
                continue;
            }
            self.ensure_head(o)?;
            stack.extend(self.counted.traverse(o)?);
        }
        let mut heads = BTreeSet::new();
        for o in &members {
            heads.insert(self.rebuild_head_edges(*o)?);
        }
        Ok(heads)
    }

    /// Rebuild the mirror edges of `oid` from its current counted edges.
    /// Newly reachable counted objects are mirrored on the way. No-op if the
    /// object was never mirrored.
    pub fn notify_change(&mut self, oid: Oid) -> Result<(), HeapError> {
        if !self.counted.contains(oid) {
            return Err(HeapError::UnknownObject(oid));
        }
        if !self.bridge.has_head(oid) {
            return Ok(());
        }
        if self.live_head_of(oid).is_none() {
            // The head was swept but not yet processed; re-mirroring
            // replaces it and rebuilds the subtree.
            self.mirror_subgraph(oid)?;
        }
        let head = self.live_head_of(oid).expect("ensured above");
        let mut edges: BTreeSet<Tid> = BTreeSet::new();
        for child in self.counted.traverse(oid)? {
            if self.live_head_of(child).is_none() {
                self.mirror_subgraph(child)?;
            }
            edges.insert(self.live_head_of(child).expect("mirrored above"));
        }
        if let Some(backend) = self.bridge.backend_of(oid) {
            if self.traced.contains(backend) {
                edges.insert(backend);
            }
        }
        self.traced.set_edges(head, edges)?;
        Ok(())
    }

    /// Drain the bridge reference queue and process what the last collection
    /// swept: release the mappings of swept backends (notifying any weak
    /// hub), then group cleared heads' targets into strongly-connected
    /// components of the counted graph and handle each in topological order —
    /// consistent components are freed, inconsistent ones are re-explored
    /// and their delegating backends resurrected.
    pub fn process_cleared_heads(&mut self) -> Result<BridgeReport, HeapError> {
        let mut report = BridgeReport::default();

        let mut cleared_heads: BTreeSet<Oid> = BTreeSet::new();
        let mut swept_backends: Vec<(Oid, BackendEntry)> = Vec::new();
        while let Some(wid) = self.traced.poll_queue(self.bridge.queue())? {
            if let Some(oid) = self.bridge.head_cells.get(&wid).copied() {
                // Ignore stale entries left over from an earlier head
                // incarnation.
                if self.bridge.heads.get(&oid).map(|e| e.cell) == Some(wid) {
                    cleared_heads.insert(oid);
                }
            } else if let Some(oid) = self.bridge.anchor_cells.get(&wid).copied() {
                if let Some(entry) = self.bridge.backends.get(&oid).copied() {
                    if entry.anchor_cell == wid {
                        swept_backends.push((oid, entry));
                    }
                }
            }
        }

        // Backend mappings first: the owning objects stay alive (their head
        // increments are still held) but the managed side is gone.
        for (oid, entry) in swept_backends {
            self.bridge.backends.remove(&oid);
            self.bridge.backend_tids.remove(&entry.tid);
            self.bridge.anchor_cells.remove(&entry.anchor_cell);
            if self.counted.contains(oid) {
                self.bridge.swept_backends.insert(oid);
            }
        }

        // Weak hubs learn about their swept traced referents; anchored hubs
        // release their counted increment here ("traced referent dies
        // first"), which may cascade frees of its own.
        self.process_hub_queue()?;

        // Candidate subgraphs: strongly-connected components, sources first,
        // re-reading refcounts as earlier components are freed.
        cleared_heads.retain(|o| self.counted.contains(*o));
        let components = strongly_connected(&self.counted, &cleared_heads);
        for component in components {
            match self.consistency_check(&component)? {
                Consistency::Consistent => {
                    self.free_subgraph(&component)?;
                    report.released.extend(component.iter().copied());
                }
                Consistency::Inconsistent { .. } => {
                    // Re-mirroring replaces the swept heads (keeping their
                    // increments) and rebuilds the mirrored edges from the
                    // current counted graph.
                    for &m in &component {
                        self.mirror_subgraph(m)?;
                    }
                    for &m in &component {
                        // Only delegating objects need their backend back
                        // eagerly; mirrored ones are recreated on deref.
                        if self.counted.get(m)?.bridge_mode == BridgeMode::WrapsTraced
                            && self.bridge.backend_was_swept(m)
                        {
                            self.create_backend_from(m)?;
                            report.resurrected_backends.insert(m);
                        }
                    }
                    report.reexplored.extend(component.iter().copied());
                }
            }
        }
        Ok(report)
    }

    /// Check a candidate subgraph for inner consistency: every member's
    /// refcount must equal its in-edges from inside the subgraph plus its
    /// head increment plus any anchored-hub increment, and no member may be
    /// held by an external handle. The witness is the first member (in
    /// ascending oid order) whose count cannot be explained.
    pub fn consistency_check(&self, subgraph: &BTreeSet<Oid>) -> Result<Consistency, HeapError> {
        for &m in subgraph {
            let rc = self.counted.refcount(m)?;
            let explained = self.counted.in_edges_from(m, subgraph)
                + u32::from(self.bridge.has_head(m))
                + self.weak.anchored_increments(m);
            if self.handle_count(m) > 0 || rc != explained {
                return Ok(Consistency::Inconsistent { witness: m });
            }
        }
        Ok(Consistency::Consistent)
    }

    /// Recreate the traced backend of an object whose previous backend was
    /// swept. The mapping, anchor tracking, mirror links and any weak hub
    /// are re-established.
    pub fn resurrect_backend(&mut self, oid: Oid) -> Result<Tid, HeapError> {
        if !self.counted.contains(oid) {
            return Err(HeapError::UnknownObject(oid));
        }
        if let Some(tid) = self.bridge.backend_of(oid) {
            if self.traced.contains(tid) {
                return Err(HeapError::BackendAlive(oid));
            }
        } else if !self.bridge.backend_was_swept(oid) {
            return Err(HeapError::NoSweptBackend(oid));
        }
        self.create_backend_from(oid)
    }

    /// Build a traced backend node from an object's counted state and wire
    /// it up: mapping, anchor cell, head links and weak-hub rebinding.
    pub(crate) fn create_backend_from(&mut self, oid: Oid) -> Result<Tid, HeapError> {
        let obj = self.counted.get(oid)?;
        let payload = ValuePayload {
            type_name: obj.type_name.clone(),
            gc_tracked: obj.gc_tracked,
            repr_text: obj.repr_text.clone(),
        };
        let tid = self
            .traced
            .create_node(true, NodeRole::Backend(oid), Some(payload));
        self.install_backend(oid, tid)?;
        if let Some(head) = self.bridge.head_of(oid) {
            if self.traced.contains(head) {
                self.traced.link(head, tid)?;
                self.traced.link(tid, head)?;
            }
        }
        Ok(tid)
    }

    /// Register `tid` as the backend of `oid` (mapping, anchor cell, hub).
    fn install_backend(&mut self, oid: Oid, tid: Tid) -> Result<(), HeapError> {
        let anchor_cell = self.traced.register_weak(tid, Some(self.bridge.queue()))?;
        if let Some(old) = self
            .bridge
            .backends
            .insert(oid, BackendEntry { tid, anchor_cell })
        {
            debug_assert!(!self.traced.contains(old.tid));
            self.bridge.backend_tids.remove(&old.tid);
            self.bridge.anchor_cells.remove(&old.anchor_cell);
        }
        self.bridge.backend_tids.insert(tid, oid);
        self.bridge.anchor_cells.insert(anchor_cell, oid);
        self.bridge.swept_backends.remove(&oid);
        self.weak_bind_pair(oid, tid)?;
        Ok(())
    }

    /// The head tid of `oid` if its node is still alive.
    fn live_head_of(&self, oid: Oid) -> Option<Tid> {
        self.bridge
            .head_of(oid)
            .filter(|t| self.traced.contains(*t))
    }

    /// Return a live mirror head for `oid`. Creates one (taking a reference
    /// increment) if none exists; replaces a swept-but-unprocessed head with
    /// a fresh node, carrying the increment over — the stale queue entry is
    /// dropped later by the cell comparison during draining. New heads are
    /// pinned as roots while the object has external handles.
    fn ensure_head(&mut self, oid: Oid) -> Result<Tid, HeapError> {
        let finalizable = self.counted.get(oid)?.gc_tracked;
        if let Some(entry) = self.bridge.heads.get(&oid).copied() {
            if self.traced.contains(entry.tid) {
                return Ok(entry.tid);
            }
            self.bridge.heads.remove(&oid);
            self.bridge.head_cells.remove(&entry.cell);
            return self.new_head_node(oid, finalizable);
        }
        let tid = self.new_head_node(oid, finalizable)?;
        self.counted.incref(oid)?;
        Ok(tid)
    }

    fn new_head_node(&mut self, oid: Oid, finalizable: bool) -> Result<Tid, HeapError> {
        let tid = self
            .traced
            .create_node(finalizable, NodeRole::GcHead(oid), None);
        let cell = self.traced.register_weak(tid, Some(self.bridge.queue()))?;
        self.bridge.heads.insert(oid, HeadEntry { tid, cell });
        self.bridge.head_cells.insert(cell, oid);
        if self.handle_count(oid) > 0 {
            self.traced.set_root(tid, true)?;
        }
        Ok(tid)
    }

    /// Add all mirror edges of `oid` that are missing: one per counted child
    /// plus the backend link. Existing edges are untouched.
    fn add_missing_head_edges(&mut self, oid: Oid) -> Result<Tid, HeapError> {
        let head = self.bridge.head_of(oid).expect("head ensured by caller");
        for child in self.counted.traverse(oid)? {
            let child_head = self.bridge.head_of(child).expect("subgraph fully mirrored");
            self.traced.link(head, child_head)?;
        }
        if let Some(backend) = self.bridge.backend_of(oid) {
            if self.traced.contains(backend) {
                self.traced.link(head, backend)?;
            }
        }
        Ok(head)
    }

    /// Free a consistency-checked component: release any anchored-hub
    /// increments (the members are dying, so the hubs let go now), clear
    /// every member's edges (releasing children, which may cascade outside
    /// the component), then release each head increment, which drops every
    /// member to zero.
    fn free_subgraph(&mut self, members: &BTreeSet<Oid>) -> Result<(), HeapError> {
        for &m in members {
            if self.weak.take_anchor(m) {
                self.decref(m)?;
            }
        }
        for &m in members {
            let slots = self.counted.get(m)?.edges.len();
            for slot in 0..slots {
                if self.counted.get(m)?.edges[slot].is_some() {
                    let mut freed = Vec::new();
                    self.counted.set_edge(m, slot, None, &mut freed)?;
                    self.process_freed(freed);
                }
            }
        }
        for &m in members {
            let entry = self.bridge.heads.remove(&m).expect("candidates have heads");
            debug_assert!(
                !self.traced.contains(entry.tid),
                "a consistent member's head must have been swept"
            );
            self.bridge.head_cells.remove(&entry.cell);
            let mut freed = Vec::new();
            self.counted.decref(m, &mut freed)?;
            self.process_freed(freed);
            debug_assert!(
                !self.counted.contains(m),
                "consistent member must die when its head increment is released"
            );
        }
        Ok(())
    }
}

/// Strongly-connected components of the counted graph restricted to
/// `candidates`, in topological order (sources first). Tarjan's algorithm
/// emits components in reverse topological order; we reverse its output.
fn strongly_connected(
    counted: &crate::counted_heap::CountedHeap,
    candidates: &BTreeSet<Oid>,
) -> Vec<BTreeSet<Oid>> {
    struct State<'a> {
        counted: &'a crate::counted_heap::CountedHeap,
        candidates: &'a BTreeSet<Oid>,
        index: BTreeMap<Oid, u32>,
        lowlink: BTreeMap<Oid, u32>,
        on_stack: BTreeSet<Oid>,
        stack: Vec<Oid>,
        next_index: u32,
        components: Vec<BTreeSet<Oid>>,
    }

    fn visit(state: &mut State<'_>, v: Oid) {
        state.index.insert(v, state.next_index);
        state.lowlink.insert(v, state.next_index);
        state.next_index += 1;
        state.stack.push(v);
        state.on_stack.insert(v);

        let children: Vec<Oid> = state
            .counted
            .traverse(v)
            .unwrap_or_default()
            .into_iter()
            .filter(|c| state.candidates.contains(c))
            .collect();
        for w in children {
            if !state.index.contains_key(&w) {
                visit(state, w);
                let low = state.lowlink[&v].min(state.lowlink[&w]);
                state.lowlink.insert(v, low);
            } else if state.on_stack.contains(&w) {
                let low = state.lowlink[&v].min(state.index[&w]);
                state.lowlink.insert(v, low);
            }
        }

        if state.lowlink[&v] == state.index[&v] {
            let mut component = BTreeSet::new();
            while let Some(w) = state.stack.pop() {
                state.on_stack.remove(&w);
                component.insert(w);
                if w == v {
                    break;
                }
            }
            state.components.push(component);
        }
    }

    let mut state = State {
        counted,
        candidates,
        index: BTreeMap::new(),
        lowlink: BTreeMap::new(),
        on_stack: BTreeSet::new(),
        stack: Vec::new(),
        next_index: 0,
        components: Vec::new(),
    };
    for &v in candidates {
        if !state.index.contains_key(&v) {
            visit(&mut state, v);
        }
    }
    state.components.reverse();
    state.components
}
