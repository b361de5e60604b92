//! Brute-force reachability oracle, independent of the bridge machinery.
//!
//! The oracle walks the union graph — external handles and traced roots,
//! through traced strong edges, backend/head-to-object mappings and counted
//! edges — and returns every counted object that must survive. Anything the
//! simulator frees while in this set is a safety violation; anything outside
//! it is garbage the bridge must reclaim within its float bound.

use std::collections::BTreeSet;

use crate::counted_heap::Oid;
use crate::traced_heap::{NodeRole, Tid};
use crate::world::World;

/// Counted objects that must survive, by exhaustive walk. Pure.
pub fn must_survive(world: &World) -> BTreeSet<Oid> {
    let mut counted_seen: BTreeSet<Oid> = BTreeSet::new();
    let mut traced_seen: BTreeSet<Tid> = BTreeSet::new();
    let mut counted_stack: Vec<Oid> = world.handled_oids().collect();
    let mut traced_stack: Vec<Tid> = world
        .traced
        .live_tids()
        .filter(|t| world.traced.get(*t).map(|n| n.is_root).unwrap_or(false))
        .collect();

    loop {
        if let Some(oid) = counted_stack.pop() {
            if !world.counted.contains(oid) || !counted_seen.insert(oid) {
                continue;
            }
            counted_stack.extend(world.counted.traverse(oid).expect("live oid"));
        } else if let Some(tid) = traced_stack.pop() {
            if !world.traced.contains(tid) || !traced_seen.insert(tid) {
                continue;
            }
            let node = world.traced.get(tid).expect("live tid");
            traced_stack.extend(node.strong_edges.iter().copied());
            match node.role {
                NodeRole::Backend(oid) | NodeRole::GcHead(oid) => counted_stack.push(oid),
                NodeRole::Plain => {}
            }
        } else {
            break;
        }
    }
    counted_seen
}

/// Weakly-connected components of the counted graph induced on the
/// oracle-dead live objects, each in ascending oid order.
pub fn dead_components(world: &World, must_survive: &BTreeSet<Oid>) -> Vec<BTreeSet<Oid>> {
    let dead: BTreeSet<Oid> = world
        .counted
        .live_oids()
        .filter(|o| !must_survive.contains(o))
        .collect();
    let mut components = Vec::new();
    let mut assigned: BTreeSet<Oid> = BTreeSet::new();
    for &start in &dead {
        if assigned.contains(&start) {
            continue;
        }
        // Undirected closure over counted edges restricted to dead objects.
        let mut component = BTreeSet::new();
        let mut stack = vec![start];
        while let Some(o) = stack.pop() {
            if !component.insert(o) {
                continue;
            }
            for c in world.counted.traverse(o).expect("live oid") {
                if dead.contains(&c) && !component.contains(&c) {
                    stack.push(c);
                }
            }
            for &d in &dead {
                if !component.contains(&d)
                    && world.counted.traverse(d).expect("live oid").contains(&o)
                {
                    stack.push(d);
                }
            }
        }
        assigned.extend(component.iter().copied());
        components.push(component);
    }
    components
}

/// Whether a dead component is "fully reported": every gc-tracked member is
/// mirrored and no live mirrored object outside still shows a stale mirror
/// edge into the component. Only such components are subject to the bounded
/// float guarantee — an unreported mutation legitimately pauses the clock.
pub fn component_fully_reported(world: &World, component: &BTreeSet<Oid>) -> bool {
    for &m in component {
        let obj = world.counted.get(m).expect("live member");
        if obj.gc_tracked && !world.bridge.has_head(m) {
            return false;
        }
    }
    // Stale inbound mirror edges keep member heads reachable even though the
    // counted edge is gone.
    let member_heads: BTreeSet<Tid> = component
        .iter()
        .filter_map(|m| world.bridge.head_of(*m))
        .filter(|t| world.traced.contains(*t))
        .collect();
    if member_heads.is_empty() {
        return true;
    }
    for y in world.bridge.mirrored_oids().collect::<Vec<_>>() {
        if component.contains(&y) {
            continue;
        }
        let Some(head_y) = world.bridge.head_of(y) else {
            continue;
        };
        let Ok(node) = world.traced.get(head_y) else {
            continue;
        };
        let children: BTreeSet<Oid> = world
            .counted
            .traverse(y)
            .map(|v| v.into_iter().collect())
            .unwrap_or_default();
        for &m in component {
            let Some(head_m) = world.bridge.head_of(m) else {
                continue;
            };
            if node.strong_edges.contains(&head_m) && !children.contains(&m) {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counted_heap::ReprOrigin;

    #[test]
    fn empty_world_has_empty_oracle() {
        let world = World::new();
        assert!(must_survive(&world).is_empty());
    }

    #[test]
    fn rooted_backend_protects_counted_cycle() {
        let mut w = World::new();
        let a = w.alloc_counted("list", true, "[]", ReprOrigin::Counted);
        w.adopt_handle(a).unwrap();
        let b = w.alloc_counted("list", true, "[]", ReprOrigin::Counted);
        w.adopt_handle(b).unwrap();
        w.set_edge(a, 0, Some(b), false).unwrap();
        w.set_edge(b, 0, Some(a), false).unwrap();
        let backend = w.pass_to_managed(a).unwrap();
        w.traced.set_root(backend, true).unwrap();
        w.drop_handle(a).unwrap();
        w.drop_handle(b).unwrap();
        let must = must_survive(&w);
        assert!(must.contains(&a) && must.contains(&b));
    }

    #[test]
    fn dropped_cycle_is_oracle_dead() {
        let mut w = World::new();
        let a = w.alloc_counted("list", true, "[]", ReprOrigin::Counted);
        w.adopt_handle(a).unwrap();
        let b = w.alloc_counted("list", true, "[]", ReprOrigin::Counted);
        w.adopt_handle(b).unwrap();
        w.set_edge(a, 0, Some(b), false).unwrap();
        w.set_edge(b, 0, Some(a), false).unwrap();
        w.mirror_subgraph(a).unwrap();
        w.drop_handle(a).unwrap();
        w.drop_handle(b).unwrap();
        let must = must_survive(&w);
        assert!(must.is_empty());
        let components = dead_components(&w, &must);
        assert_eq!(components.len(), 1);
        assert_eq!(components[0], [a, b].into_iter().collect());
        assert!(component_fully_reported(&w, &components[0]));
    }

    #[test]
    fn handles_seed_the_walk() {
        let mut w = World::new();
        let a = w.alloc_counted("list", true, "[]", ReprOrigin::Counted);
        w.adopt_handle(a).unwrap();
        let s = w.alloc_counted("str", false, "s", ReprOrigin::Counted);
        w.set_edge(a, 0, Some(s), false).unwrap();
        w.decref(s).unwrap(); // held by `a` only
        let must = must_survive(&w);
        assert_eq!(must, [a, s].into_iter().collect());
    }

    #[test]
    fn unmirrored_gc_member_is_not_reported() {
        let mut w = World::new();
        let a = w.alloc_counted("list", true, "[]", ReprOrigin::Counted);
        w.adopt_handle(a).unwrap();
        w.set_edge(a, 0, Some(a), false).unwrap();
        w.drop_handle(a).unwrap();
        // The self-cycle is dead but was never mirrored; the bridge cannot
        // see it, so the float bound does not apply.
        assert!(w.counted.contains(a));
        let must = must_survive(&w);
        let components = dead_components(&w, &must);
        assert_eq!(components.len(), 1);
        assert!(!component_fully_reported(&w, &components[0]));
    }
}
