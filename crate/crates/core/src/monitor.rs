//! Allocation/finalization/deallocation ledger with leak listing.
//!
//! Every mutation of the counted heap is reported here as a [`MemEvent`]. The
//! live set (allocated but not yet freed objects) can be listed at any time;
//! the history is kept until explicitly cleared. Object addresses in reports
//! are derived from oids and the timestamp is a logical clock, so identical
//! runs produce byte-identical reports.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::counted_heap::{Oid, ReprOrigin};

/// Fake address base: oids render as `100000000000000 + oid * 8`.
const ADDR_BASE: u64 = 100_000_000_000_000;

pub fn fake_address(oid: Oid) -> u64 {
    ADDR_BASE + oid.0 * 8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MemAction {
    Alloc,
    Realloc,
    Free,
    Finalize,
}

/// One monitor record. `ts` is logical milliseconds since monitor init; `seq`
/// is a strictly increasing sequence number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemEvent {
    pub seq: u64,
    pub action: MemAction,
    pub oid: Oid,
    pub type_name: String,
    pub gc_tracked: bool,
    pub repr_text: String,
    pub repr_origin: ReprOrigin,
    pub refcount_at_event: u32,
    pub site: String,
    pub ts: u64,
}

#[derive(Debug, Clone)]
struct LiveEntry {
    type_name: String,
    gc_tracked: bool,
    repr_text: String,
    repr_origin: ReprOrigin,
    alloc_ts: u64,
}

#[derive(Debug, Default)]
pub struct Monitor {
    enabled: bool,
    events: Vec<MemEvent>,
    live: BTreeMap<Oid, LiveEntry>,
    next_seq: u64,
}

impl Monitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_enabled(&mut self, on: bool) {
        self.enabled = on;
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    /// Append an event and update the live set. A disabled monitor drops the
    /// event silently.
    pub fn record(&mut self, mut event: MemEvent) {
        if !self.enabled {
            return;
        }
        self.next_seq += 1;
        event.seq = self.next_seq;
        match event.action {
            MemAction::Alloc => {
                self.live.insert(
                    event.oid,
                    LiveEntry {
                        type_name: event.type_name.clone(),
                        gc_tracked: event.gc_tracked,
                        repr_text: event.repr_text.clone(),
                        repr_origin: event.repr_origin,
                        alloc_ts: event.ts,
                    },
                );
            }
            MemAction::Free => {
                self.live.remove(&event.oid);
            }
            // Finalization and reallocation do not change liveness.
            MemAction::Finalize | MemAction::Realloc => {}
        }
        self.events.push(event);
    }

    /// Live objects in ascending oid order. Suited for unit-test assertions.
    pub fn current_leaks(&self) -> Vec<Oid> {
        self.live.keys().copied().collect()
    }

    /// Render the live set, one line per object:
    /// `<addr>[_GC] (<type>) #<rc>: "<repr>"[_j] *<ts>`
    /// preceded by a header; an empty live set prints `no leaks recorded`.
    /// Current refcounts are looked up through `rc_of`.
    pub fn list_leaks(&self, rc_of: impl Fn(Oid) -> u32) -> String {
        if self.live.is_empty() {
            return "no leaks recorded\n".to_string();
        }
        let mut out = String::from("Current native leaks:\n");
        for (oid, entry) in &self.live {
            let gc = if entry.gc_tracked { "_GC" } else { "" };
            let origin = match entry.repr_origin {
                ReprOrigin::Traced => "_j",
                ReprOrigin::Counted => "",
            };
            out.push_str(&format!(
                "{}{} ({}) #{}: \"{}\"{} *{}\n",
                fake_address(*oid),
                gc,
                entry.type_name,
                rc_of(*oid),
                entry.repr_text,
                origin,
                entry.alloc_ts,
            ));
        }
        out
    }

    pub fn history(&self) -> &[MemEvent] {
        &self.events
    }

    /// Drop the history; the live set is preserved.
    pub fn clear_history(&mut self) {
        self.events.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(action: MemAction, oid: u64, rc: u32, ts: u64) -> MemEvent {
        MemEvent {
            seq: 0,
            action,
            oid: Oid(oid),
            type_name: "list".into(),
            gc_tracked: true,
            repr_text: "[]".into(),
            repr_origin: ReprOrigin::Traced,
            refcount_at_event: rc,
            site: "test:1".into(),
            ts,
        }
    }

    #[test]
    fn alloc_then_free_empties_live_set() {
        let mut m = Monitor::new();
        m.set_enabled(true);
        m.record(ev(MemAction::Alloc, 1, 1, 0));
        assert_eq!(m.current_leaks(), vec![Oid(1)]);
        m.record(ev(MemAction::Free, 1, 0, 1));
        assert!(m.current_leaks().is_empty());
    }

    #[test]
    fn finalize_does_not_change_live_set() {
        let mut m = Monitor::new();
        m.set_enabled(true);
        m.record(ev(MemAction::Alloc, 1, 1, 0));
        m.record(ev(MemAction::Finalize, 1, 1, 2));
        assert_eq!(m.current_leaks(), vec![Oid(1)]);
    }

    #[test]
    fn disabled_monitor_drops_events() {
        let mut m = Monitor::new();
        m.record(ev(MemAction::Alloc, 1, 1, 0));
        assert!(m.current_leaks().is_empty());
        assert!(m.history().is_empty());
    }

    #[test]
    fn events_carry_monotone_sequence() {
        let mut m = Monitor::new();
        m.set_enabled(true);
        m.record(ev(MemAction::Alloc, 1, 1, 0));
        m.record(ev(MemAction::Alloc, 2, 1, 0));
        m.record(ev(MemAction::Free, 1, 0, 3));
        let seqs: Vec<u64> = m.history().iter().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![1, 2, 3]);
    }

    #[test]
    fn leak_line_format_is_exact() {
        let mut m = Monitor::new();
        m.set_enabled(true);
        m.record(MemEvent {
            seq: 0,
            action: MemAction::Alloc,
            oid: Oid(3),
            type_name: "list".into(),
            gc_tracked: true,
            repr_text: "[([...],), 'test']".into(),
            repr_origin: ReprOrigin::Traced,
            refcount_at_event: 1,
            site: "demo:10".into(),
            ts: 8,
        });
        let text = m.list_leaks(|_| 2);
        assert_eq!(
            text,
            "Current native leaks:\n100000000000024_GC (list) #2: \"[([...],), 'test']\"_j *8\n"
        );
    }

    #[test]
    fn non_gc_counted_origin_has_no_suffixes() {
        let mut m = Monitor::new();
        m.set_enabled(true);
        m.record(MemEvent {
            seq: 0,
            action: MemAction::Alloc,
            oid: Oid(1),
            type_name: "str".into(),
            gc_tracked: false,
            repr_text: "test".into(),
            repr_origin: ReprOrigin::Counted,
            refcount_at_event: 1,
            site: "t:1".into(),
            ts: 0,
        });
        let text = m.list_leaks(|_| 2);
        assert_eq!(
            text,
            "Current native leaks:\n100000000000008 (str) #2: \"test\" *0\n"
        );
    }

    #[test]
    fn empty_live_set_prints_no_leaks() {
        let m = Monitor::new();
        assert_eq!(m.list_leaks(|_| 0), "no leaks recorded\n");
    }

    #[test]
    fn clear_history_preserves_live_set() {
        let mut m = Monitor::new();
        m.set_enabled(true);
        m.record(ev(MemAction::Alloc, 1, 1, 0));
        m.clear_history();
        assert!(m.history().is_empty());
        assert_eq!(m.current_leaks(), vec![Oid(1)]);
        // New events accumulate again after a clear.
        m.record(ev(MemAction::Alloc, 2, 1, 1));
        assert_eq!(m.history().len(), 1);
    }
}
