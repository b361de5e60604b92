//! The reference-counting heap with a traversal protocol.
//!
//! Objects hold ordered edge slots; a gc-tracked object may reference other
//! objects, a plain object may not. Dropping a refcount to zero frees the
//! object immediately and cascades depth-first through its edges. Cycles keep
//! each other at refcount >= 1 and are never freed here — only the bridge's
//! consistency-checked release path can break them.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::error::HeapError;

/// Unique id of a counted object. Monotonically increasing per heap; rendered
/// in reports as a fake memory address so runs are byte-reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Oid(pub u64);

impl fmt::Display for Oid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "o{}", self.0)
    }
}

/// Which runtime produced an object's string representation. Traced-origin
/// reprs are rendered with a `_j` suffix in leak reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ReprOrigin {
    Counted,
    Traced,
}

/// How a counted object is linked to the traced heap, if at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BridgeMode {
    /// Purely native; no traced counterpart was ever involved.
    None,
    /// State is mirrored; the traced counterpart may die and be recreated.
    Mirrored,
    /// The counted object delegates to a traced backend and needs it alive.
    WrapsTraced,
    /// A traced wrapper was created around a natively-born object.
    WrappedByTraced,
}

/// A node in the counted heap.
#[derive(Debug, Clone)]
pub struct CountedObject {
    pub oid: Oid,
    pub type_name: String,
    pub refcount: u32,
    pub gc_tracked: bool,
    /// Ordered slots; `None` marks an empty slot.
    pub edges: Vec<Option<Oid>>,
    pub repr_text: String,
    pub repr_origin: ReprOrigin,
    pub bridge_mode: BridgeMode,
    pub alloc_site: String,
}

/// Result of a decref: either the object survives with the new count, or it
/// was freed (possibly cascading into its children).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecrefOutcome {
    Alive(u32),
    Freed,
}

/// Snapshot of an object taken at the moment it was freed, for monitor and
/// weak-reference hooks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreedRecord {
    pub oid: Oid,
    pub type_name: String,
    pub gc_tracked: bool,
    pub repr_text: String,
    pub repr_origin: ReprOrigin,
}

#[derive(Debug, Default)]
pub struct CountedHeap {
    objects: BTreeMap<Oid, CountedObject>,
    next_oid: u64,
}

impl CountedHeap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocate a fresh object with refcount 1 and no edges. The caller owns
    /// the initial reference.
    pub fn alloc(
        &mut self,
        type_name: &str,
        gc_tracked: bool,
        repr_text: &str,
        repr_origin: ReprOrigin,
        site: &str,
    ) -> Oid {
        self.next_oid += 1;
        let oid = Oid(self.next_oid);
        self.objects.insert(
            oid,
            CountedObject {
                oid,
                type_name: type_name.to_string(),
                refcount: 1,
                gc_tracked,
                edges: Vec::new(),
                repr_text: repr_text.to_string(),
                repr_origin,
                bridge_mode: BridgeMode::None,
                alloc_site: site.to_string(),
            },
        );
        oid
    }

    pub fn contains(&self, oid: Oid) -> bool {
        self.objects.contains_key(&oid)
    }

    pub fn get(&self, oid: Oid) -> Result<&CountedObject, HeapError> {
        self.objects.get(&oid).ok_or(HeapError::UnknownObject(oid))
    }

    pub fn get_mut(&mut self, oid: Oid) -> Result<&mut CountedObject, HeapError> {
        self.objects
            .get_mut(&oid)
            .ok_or(HeapError::UnknownObject(oid))
    }

    pub fn refcount(&self, oid: Oid) -> Result<u32, HeapError> {
        Ok(self.get(oid)?.refcount)
    }

    pub fn set_bridge_mode(&mut self, oid: Oid, mode: BridgeMode) -> Result<(), HeapError> {
        self.get_mut(oid)?.bridge_mode = mode;
        Ok(())
    }

    /// Live objects in ascending oid order.
    pub fn live_oids(&self) -> impl Iterator<Item = Oid> + '_ {
        self.objects.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn incref(&mut self, oid: Oid) -> Result<u32, HeapError> {
        let obj = self.get_mut(oid)?;
        obj.refcount += 1;
        Ok(obj.refcount)
    }

    /// Drop one reference. Reaching zero removes the object and cascades
    /// depth-first, in ascending slot order, through its edges. Iterative so
    /// deep chains cannot overflow the stack. Freed objects are appended to
    /// `freed` in the order they died.
    pub fn decref(
        &mut self,
        oid: Oid,
        freed: &mut Vec<FreedRecord>,
    ) -> Result<DecrefOutcome, HeapError> {
        let obj = self.get_mut(oid)?;
        if obj.refcount == 0 {
            // Live objects always hold at least one reference; seeing zero
            // here means the caller double-freed.
            return Err(HeapError::NegativeRefcount(oid));
        }
        obj.refcount -= 1;
        if obj.refcount > 0 {
            return Ok(DecrefOutcome::Alive(obj.refcount));
        }

        let mut stack = vec![oid];
        while let Some(cur) = stack.pop() {
            let obj = self
                .objects
                .remove(&cur)
                .expect("cascade target must be live");
            debug_assert_eq!(obj.refcount, 0);
            freed.push(FreedRecord {
                oid: obj.oid,
                type_name: obj.type_name,
                gc_tracked: obj.gc_tracked,
                repr_text: obj.repr_text,
                repr_origin: obj.repr_origin,
            });
            // Children are decref'd in ascending slot order; those that hit
            // zero join the stack so their own subtrees follow.
            let mut dying = Vec::new();
            for child in obj.edges.into_iter().flatten() {
                let c = self
                    .objects
                    .get_mut(&child)
                    .expect("edge slots only reference live objects");
                debug_assert!(c.refcount >= 1);
                c.refcount -= 1;
                if c.refcount == 0 {
                    dying.push(child);
                }
            }
            // Reverse so the first slot's subtree is processed first.
            for child in dying.into_iter().rev() {
                stack.push(child);
            }
        }
        Ok(DecrefOutcome::Freed)
    }

    /// Store `child` in `slot` of `oid`, growing the slot vector on demand.
    /// The previous occupant (if any) is decref'd, the new child incref'd.
    /// Bridge notification is the caller's concern; the heap itself only does
    /// the counting.
    pub fn set_edge(
        &mut self,
        oid: Oid,
        slot: usize,
        child: Option<Oid>,
        freed: &mut Vec<FreedRecord>,
    ) -> Result<(), HeapError> {
        let obj = self.get(oid)?;
        if !obj.gc_tracked {
            return Err(HeapError::NotContainer(oid));
        }
        if let Some(c) = child {
            if !self.contains(c) {
                return Err(HeapError::UnknownObject(c));
            }
            // Incref before the old occupant's decref so a self-replacing
            // edge cannot transiently free the child.
            self.incref(c)?;
        }
        let obj = self.get_mut(oid)?;
        if obj.edges.len() <= slot {
            obj.edges.resize(slot + 1, None);
        }
        let old = std::mem::replace(&mut obj.edges[slot], child);
        if let Some(old) = old {
            self.decref(old, freed)?;
        }
        Ok(())
    }

    /// The traversal protocol: non-empty edge slots in slot order. Pure.
    pub fn traverse(&self, oid: Oid) -> Result<Vec<Oid>, HeapError> {
        Ok(self.get(oid)?.edges.iter().copied().flatten().collect())
    }

    /// Number of in-heap edge slots pointing at each live object. Used by the
    /// refcount accounting audit.
    pub fn in_edge_counts(&self) -> BTreeMap<Oid, u32> {
        let mut counts: BTreeMap<Oid, u32> = BTreeMap::new();
        for obj in self.objects.values() {
            for child in obj.edges.iter().flatten() {
                *counts.entry(*child).or_default() += 1;
            }
        }
        counts
    }

    /// Edges into `target` from within `members` (slot multiplicity counts).
    pub fn in_edges_from(&self, target: Oid, members: &std::collections::BTreeSet<Oid>) -> u32 {
        let mut n = 0;
        for m in members {
            if let Some(obj) = self.objects.get(m) {
                n += obj.edges.iter().flatten().filter(|c| **c == target).count() as u32;
            }
        }
        n
    }
}
