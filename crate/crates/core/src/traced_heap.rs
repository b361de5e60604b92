//! The tracing mark/sweep heap.
//!
//! Nodes are reachable through strong edges from root-flagged nodes. A
//! collection runs in two mark phases: unreachable finalizable nodes get
//! their finalizer run exactly once (the callback may re-root them —
//! resurrection), then the heap is re-marked and whatever is still
//! unreachable is swept. Sweeping clears the weak cells registered on a node
//! and appends queued cells to their reference queue.
//!
//! Collection never runs implicitly and iteration order is ascending node id
//! throughout, so results are fully deterministic.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::Serialize;

use crate::counted_heap::Oid;
use crate::error::HeapError;

/// Unique id of a traced node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Tid(pub u64);

impl fmt::Display for Tid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

/// Unique id of a weak cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Wid(pub u64);

impl fmt::Display for Wid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}", self.0)
    }
}

/// Unique id of a reference queue.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct QueueId(pub u32);

impl fmt::Display for QueueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{}", self.0)
    }
}

/// What a traced node stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    /// An ordinary managed object.
    Plain,
    /// The managed counterpart backing a counted object.
    Backend(Oid),
    /// A mirror head holding one reference increment on its target.
    GcHead(Oid),
}

/// Value data carried by nodes that can cross the bridge: enough to allocate
/// (or recreate) a counted counterpart.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValuePayload {
    pub type_name: String,
    pub gc_tracked: bool,
    pub repr_text: String,
}

/// Finalizer callback. May mutate the heap (add roots or edges) but may not
/// trigger a nested collection.
pub type Finalizer = Box<dyn FnMut(&mut TracedHeap, Tid)>;

pub struct TracedNode {
    pub tid: Tid,
    pub strong_edges: BTreeSet<Tid>,
    pub is_root: bool,
    pub finalizable: bool,
    pub finalizer_ran: bool,
    pub role: NodeRole,
    pub payload: Option<ValuePayload>,
    finalizer: Option<Finalizer>,
}

impl fmt::Debug for TracedNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TracedNode")
            .field("tid", &self.tid)
            .field("strong_edges", &self.strong_edges)
            .field("is_root", &self.is_root)
            .field("finalizable", &self.finalizable)
            .field("finalizer_ran", &self.finalizer_ran)
            .field("role", &self.role)
            .field("payload", &self.payload)
            .finish()
    }
}

/// A weak reference cell. Once cleared it stays cleared; a cleared cell with
/// a queue shows up in that queue exactly once.
#[derive(Debug, Clone)]
pub struct WeakCell {
    pub wid: Wid,
    pub target: Tid,
    pub cleared: bool,
    pub queue: Option<QueueId>,
}

/// What one collection did.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CollectionReport {
    pub swept: BTreeSet<Tid>,
    pub finalized: BTreeSet<Tid>,
    pub resurrected: BTreeSet<Tid>,
    pub weak_cleared: BTreeSet<Wid>,
    pub cycle_index: u64,
}

#[derive(Default)]
pub struct TracedHeap {
    nodes: BTreeMap<Tid, TracedNode>,
    cells: BTreeMap<Wid, WeakCell>,
    /// Weak cells registered per target node.
    cells_by_target: BTreeMap<Tid, Vec<Wid>>,
    queues: BTreeMap<QueueId, VecDeque<Wid>>,
    next_tid: u64,
    next_wid: u64,
    next_queue: u32,
    cycles: u64,
    collecting: bool,
}

impl TracedHeap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_node(
        &mut self,
        finalizable: bool,
        role: NodeRole,
        payload: Option<ValuePayload>,
    ) -> Tid {
        self.next_tid += 1;
        let tid = Tid(self.next_tid);
        self.nodes.insert(
            tid,
            TracedNode {
                tid,
                strong_edges: BTreeSet::new(),
                is_root: false,
                finalizable,
                finalizer_ran: false,
                role,
                payload,
                finalizer: None,
            },
        );
        tid
    }

    pub fn contains(&self, tid: Tid) -> bool {
        self.nodes.contains_key(&tid)
    }

    pub fn get(&self, tid: Tid) -> Result<&TracedNode, HeapError> {
        self.nodes.get(&tid).ok_or(HeapError::UnknownNode(tid))
    }

    fn get_mut(&mut self, tid: Tid) -> Result<&mut TracedNode, HeapError> {
        self.nodes.get_mut(&tid).ok_or(HeapError::UnknownNode(tid))
    }

    pub fn live_tids(&self) -> impl Iterator<Item = Tid> + '_ {
        self.nodes.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn set_root(&mut self, tid: Tid, flag: bool) -> Result<(), HeapError> {
        self.get_mut(tid)?.is_root = flag;
        Ok(())
    }

    /// Promote a node to a different bridge role (a value node becomes the
    /// backend of its counted counterpart when passed across).
    pub(crate) fn set_role(&mut self, tid: Tid, role: NodeRole) -> Result<(), HeapError> {
        self.get_mut(tid)?.role = role;
        Ok(())
    }

    /// Install the finalizer callback run if this node is ever finalized.
    /// Also marks the node finalizable.
    pub fn set_finalizer(&mut self, tid: Tid, f: Finalizer) -> Result<(), HeapError> {
        let node = self.get_mut(tid)?;
        node.finalizable = true;
        node.finalizer = Some(f);
        Ok(())
    }

    pub fn link(&mut self, from: Tid, to: Tid) -> Result<(), HeapError> {
        if !self.contains(to) {
            return Err(HeapError::UnknownNode(to));
        }
        self.get_mut(from)?.strong_edges.insert(to);
        Ok(())
    }

    /// Removing an absent edge is a no-op.
    pub fn unlink(&mut self, from: Tid, to: Tid) -> Result<(), HeapError> {
        self.get_mut(from)?.strong_edges.remove(&to);
        Ok(())
    }

    /// Replace a node's outgoing edge set wholesale (bridge mirror rebuilds).
    pub fn set_edges(&mut self, from: Tid, edges: BTreeSet<Tid>) -> Result<(), HeapError> {
        for to in &edges {
            if !self.contains(*to) {
                return Err(HeapError::UnknownNode(*to));
            }
        }
        self.get_mut(from)?.strong_edges = edges;
        Ok(())
    }

    pub fn create_queue(&mut self) -> QueueId {
        self.next_queue += 1;
        let qid = QueueId(self.next_queue);
        self.queues.insert(qid, VecDeque::new());
        qid
    }

    pub fn register_weak(&mut self, target: Tid, queue: Option<QueueId>) -> Result<Wid, HeapError> {
        if !self.contains(target) {
            return Err(HeapError::UnknownNode(target));
        }
        if let Some(q) = queue {
            if !self.queues.contains_key(&q) {
                return Err(HeapError::UnknownQueue(q));
            }
        }
        self.next_wid += 1;
        let wid = Wid(self.next_wid);
        self.cells.insert(
            wid,
            WeakCell {
                wid,
                target,
                cleared: false,
                queue,
            },
        );
        self.cells_by_target.entry(target).or_default().push(wid);
        Ok(wid)
    }

    pub fn cell(&self, wid: Wid) -> Option<&WeakCell> {
        self.cells.get(&wid)
    }

    /// Dereference a weak cell: the target while it is live, nothing after
    /// the cell was cleared.
    pub fn weak_target(&self, wid: Wid) -> Option<Tid> {
        self.cells
            .get(&wid)
            .filter(|c| !c.cleared)
            .map(|c| c.target)
    }

    /// FIFO removal from a reference queue.
    pub fn poll_queue(&mut self, queue: QueueId) -> Result<Option<Wid>, HeapError> {
        self.queues
            .get_mut(&queue)
            .ok_or(HeapError::UnknownQueue(queue))
            .map(|q| q.pop_front())
    }

    fn mark(&self) -> BTreeSet<Tid> {
        let mut marked = BTreeSet::new();
        let mut stack: Vec<Tid> = self
            .nodes
            .values()
            .filter(|n| n.is_root)
            .map(|n| n.tid)
            .collect();
        while let Some(tid) = stack.pop() {
            if !marked.insert(tid) {
                continue;
            }
            stack.extend(self.nodes[&tid].strong_edges.iter().copied());
        }
        marked
    }

    /// Run one collection: mark, finalize, re-mark, sweep.
    ///
    /// Finalizers of unreachable finalizable nodes run exactly once each (in
    /// ascending tid order) and may resurrect their node by restoring
    /// reachability. Nodes still unreachable after re-marking are swept and
    /// their weak cells cleared; resurrected nodes keep their cells intact.
    pub fn collect(&mut self) -> Result<CollectionReport, HeapError> {
        if self.collecting {
            return Err(HeapError::ReentrantCollection);
        }
        self.collecting = true;
        self.cycles += 1;

        let marked = self.mark();
        let mut finalized = BTreeSet::new();
        let to_finalize: Vec<Tid> = self
            .nodes
            .values()
            .filter(|n| !marked.contains(&n.tid) && n.finalizable && !n.finalizer_ran)
            .map(|n| n.tid)
            .collect();
        for tid in to_finalize {
            let callback = {
                let node = self.nodes.get_mut(&tid).expect("finalize target is live");
                node.finalizer_ran = true;
                node.finalizer.take()
            };
            finalized.insert(tid);
            if let Some(mut f) = callback {
                f(self, tid);
            }
        }

        let remarked = self.mark();
        let resurrected: BTreeSet<Tid> = finalized
            .iter()
            .copied()
            .filter(|t| remarked.contains(t))
            .collect();

        let mut report = CollectionReport {
            finalized,
            resurrected,
            cycle_index: self.cycles,
            ..Default::default()
        };
        let doomed: Vec<Tid> = self
            .nodes
            .keys()
            .copied()
            .filter(|t| !remarked.contains(t))
            .collect();
        for tid in doomed {
            if let Some(wids) = self.cells_by_target.remove(&tid) {
                for wid in wids {
                    let cell = self.cells.get_mut(&wid).expect("cell index is consistent");
                    cell.cleared = true;
                    report.weak_cleared.insert(wid);
                    if let Some(q) = cell.queue {
                        self.queues
                            .get_mut(&q)
                            .expect("queues are never dropped")
                            .push_back(wid);
                    }
                }
            }
            self.nodes.remove(&tid);
            report.swept.insert(tid);
        }

        self.collecting = false;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(h: &mut TracedHeap) -> Tid {
        h.create_node(false, NodeRole::Plain, None)
    }

    /// Oracle: reachability from roots by exhaustive walk.
    fn oracle_reachable(h: &TracedHeap) -> BTreeSet<Tid> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<Tid> = h
            .live_tids()
            .filter(|t| h.get(*t).unwrap().is_root)
            .collect();
        while let Some(t) = stack.pop() {
            if !seen.insert(t) {
                continue;
            }
            stack.extend(h.get(t).unwrap().strong_edges.iter().copied());
        }
        seen
    }

    #[test]
    fn unrooted_node_is_swept() {
        let mut h = TracedHeap::new();
        let t = plain(&mut h);
        let report = h.collect().unwrap();
        assert!(report.swept.contains(&t));
        assert!(!h.contains(t));
    }

    #[test]
    fn creates_are_distinct() {
        let mut h = TracedHeap::new();
        assert_ne!(plain(&mut h), plain(&mut h));
    }

    #[test]
    fn rooted_node_survives() {
        let mut h = TracedHeap::new();
        let t = plain(&mut h);
        h.set_root(t, true).unwrap();
        let report = h.collect().unwrap();
        assert!(report.swept.is_empty());
        assert!(h.contains(t));
    }

    #[test]
    fn unroot_then_collect_sweeps() {
        let mut h = TracedHeap::new();
        let t = plain(&mut h);
        h.set_root(t, true).unwrap();
        h.collect().unwrap();
        h.set_root(t, false).unwrap();
        let report = h.collect().unwrap();
        assert!(report.swept.contains(&t));
    }

    #[test]
    fn marking_is_transitive() {
        let mut h = TracedHeap::new();
        let a = plain(&mut h);
        let b = plain(&mut h);
        h.link(a, b).unwrap();
        h.set_root(a, true).unwrap();
        h.collect().unwrap();
        assert!(h.contains(a) && h.contains(b));
    }

    #[test]
    fn unlink_strands_target() {
        let mut h = TracedHeap::new();
        let a = plain(&mut h);
        let b = plain(&mut h);
        h.link(a, b).unwrap();
        h.set_root(a, true).unwrap();
        h.unlink(a, b).unwrap();
        h.unlink(a, b).unwrap(); // absent edge: no-op
        let report = h.collect().unwrap();
        assert_eq!(report.swept, [b].into_iter().collect());
    }

    #[test]
    fn cycles_are_collected_in_one_pass() {
        // Oracle: nothing reachable from roots, so both die in one collect.
        let mut h = TracedHeap::new();
        let a = plain(&mut h);
        let b = plain(&mut h);
        h.link(a, b).unwrap();
        h.link(b, a).unwrap();
        assert!(oracle_reachable(&h).is_empty());
        let report = h.collect().unwrap();
        assert_eq!(report.swept, [a, b].into_iter().collect());
    }

    #[test]
    fn weak_on_live_target_is_not_cleared() {
        let mut h = TracedHeap::new();
        let t = plain(&mut h);
        h.set_root(t, true).unwrap();
        let w = h.register_weak(t, None).unwrap();
        h.collect().unwrap();
        assert_eq!(h.weak_target(w), Some(t));
    }

    #[test]
    fn weak_on_dead_target_is_cleared_and_enqueued() {
        let mut h = TracedHeap::new();
        let q = h.create_queue();
        let t = plain(&mut h);
        let w = h.register_weak(t, Some(q)).unwrap();
        let report = h.collect().unwrap();
        assert!(report.weak_cleared.contains(&w));
        assert_eq!(h.weak_target(w), None);
        assert_eq!(h.poll_queue(q).unwrap(), Some(w));
        assert_eq!(h.poll_queue(q).unwrap(), None);
    }

    #[test]
    fn queue_order_is_ascending_target_tid() {
        let mut h = TracedHeap::new();
        let q = h.create_queue();
        let a = plain(&mut h);
        let b = plain(&mut h);
        // Register in reverse order; clearing follows sweep order (ascending
        // tid), not registration order.
        let wb = h.register_weak(b, Some(q)).unwrap();
        let wa = h.register_weak(a, Some(q)).unwrap();
        h.collect().unwrap();
        assert_eq!(h.poll_queue(q).unwrap(), Some(wa));
        assert_eq!(h.poll_queue(q).unwrap(), Some(wb));
    }

    #[test]
    fn poll_unknown_queue_errors() {
        let mut h = TracedHeap::new();
        assert_eq!(
            h.poll_queue(QueueId(99)),
            Err(HeapError::UnknownQueue(QueueId(99)))
        );
    }

    #[test]
    fn empty_heap_collect_is_empty_report() {
        let mut h = TracedHeap::new();
        let report = h.collect().unwrap();
        assert!(report.swept.is_empty());
        assert!(report.finalized.is_empty());
        assert!(report.resurrected.is_empty());
        assert!(report.weak_cleared.is_empty());
    }

    #[test]
    fn finalizer_resurrection_is_one_shot() {
        let mut h = TracedHeap::new();
        let t = plain(&mut h);
        h.set_finalizer(
            t,
            Box::new(|heap, tid| {
                heap.set_root(tid, true).unwrap();
            }),
        )
        .unwrap();
        let w = h.register_weak(t, None).unwrap();

        let first = h.collect().unwrap();
        assert!(first.resurrected.contains(&t));
        assert!(!first.swept.contains(&t));
        assert!(h.contains(t));
        // Weak cells of resurrected nodes stay intact.
        assert_eq!(h.weak_target(w), Some(t));

        // Unroot again: the finalizer does not run a second time.
        h.set_root(t, false).unwrap();
        let second = h.collect().unwrap();
        assert!(second.swept.contains(&t));
        assert!(second.finalized.is_empty());
        assert_eq!(h.weak_target(w), None);
    }

    #[test]
    fn finalizable_without_callback_is_reported_and_swept() {
        let mut h = TracedHeap::new();
        let t = h.create_node(true, NodeRole::Plain, None);
        let report = h.collect().unwrap();
        assert!(report.finalized.contains(&t));
        assert!(report.swept.contains(&t));
    }

    #[test]
    fn reentrant_collect_is_rejected() {
        let mut h = TracedHeap::new();
        let t = plain(&mut h);
        h.set_finalizer(
            t,
            Box::new(|heap, _| {
                assert_eq!(heap.collect(), Err(HeapError::ReentrantCollection));
            }),
        )
        .unwrap();
        h.collect().unwrap();
    }

    #[test]
    fn live_set_matches_oracle_after_collect() {
        let mut h = TracedHeap::new();
        let nodes: Vec<Tid> = (0..10).map(|_| plain(&mut h)).collect();
        h.set_root(nodes[0], true).unwrap();
        h.link(nodes[0], nodes[1]).unwrap();
        h.link(nodes[1], nodes[2]).unwrap();
        h.link(nodes[3], nodes[4]).unwrap();
        h.link(nodes[4], nodes[3]).unwrap();
        let expected = oracle_reachable(&h);
        h.collect().unwrap();
        let live: BTreeSet<Tid> = h.live_tids().collect();
        assert_eq!(live, expected);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Collection reclaims exactly the complement of root
            /// reachability, regardless of graph shape (cycles included).
            #[test]
            fn collect_keeps_exactly_the_reachable(
                nodes in 1..16usize,
                edges in proptest::collection::vec((any::<u8>(), any::<u8>()), 0..48),
                roots in proptest::collection::vec(any::<u8>(), 0..6),
            ) {
                let mut h = TracedHeap::new();
                let tids: Vec<Tid> = (0..nodes).map(|_| plain(&mut h)).collect();
                for (a, b) in edges {
                    let from = tids[(a as usize) % nodes];
                    let to = tids[(b as usize) % nodes];
                    h.link(from, to).unwrap();
                }
                for r in roots {
                    h.set_root(tids[(r as usize) % nodes], true).unwrap();
                }
                let expected = oracle_reachable(&h);
                let report = h.collect().unwrap();
                let live: BTreeSet<Tid> = h.live_tids().collect();
                prop_assert_eq!(&live, &expected);
                for t in &tids {
                    prop_assert_eq!(report.swept.contains(t), !expected.contains(t));
                }
            }
        }
    }
}
