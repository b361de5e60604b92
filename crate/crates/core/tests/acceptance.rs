//! Acceptance suite: one test per criterion, each printing a pass line.
//!
//! 1. Demo golden report (exact bytes, exact refcounts).
//! 2. Safety under fuzzing: nothing oracle-protected is ever freed.
//! 3. Bounded float: fully-reported dead subgraphs are freed within two GC
//!    cycles (one without silent mutations).
//! 4. Hard case: silent edge, inconsistency witness, head recreation,
//!    backend resurrection, then timely release after notification.
//! 5. Weak-reference coherence across both heaps.
//! 6. Refcount accounting audit after every command of every golden run.
//! 7. Lock model: exhaustive interleavings, single holder, balanced allow
//!    windows restore state.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use gcbridge::lock_model::{explore_interleavings, ActorId, LockModel};
use gcbridge::scenario::{
    self, fuzz, ExecOptions, Executor, FuzzConfig, FuzzReport, ViolationKind,
};
use gcbridge::weakref_bridge::WeakKind;
use gcbridge::world::{Ref, World};
use gcbridge::{Consistency, DerefOutcome, ReprOrigin};

const CAMPAIGN_SEEDS: std::ops::RangeInclusive<u64> = 1..=10;
const CAMPAIGN_STEPS: u64 = 10_000;

fn campaigns(silent: bool) -> &'static (Vec<FuzzReport>, Duration) {
    static SILENT_ON: OnceLock<(Vec<FuzzReport>, Duration)> = OnceLock::new();
    static SILENT_OFF: OnceLock<(Vec<FuzzReport>, Duration)> = OnceLock::new();
    let cell = if silent { &SILENT_ON } else { &SILENT_OFF };
    cell.get_or_init(|| {
        let start = Instant::now();
        let reports = CAMPAIGN_SEEDS
            .map(|seed| {
                let mut cfg = FuzzConfig::new(seed, CAMPAIGN_STEPS);
                cfg.silent_enabled = silent;
                fuzz(&cfg)
            })
            .collect();
        (reports, start.elapsed())
    })
}

fn demo_options() -> ExecOptions {
    ExecOptions {
        script_name: "demo".into(),
        mem_debug: true,
        audit: true,
    }
}

#[test]
fn criterion_1_demo_golden_report() {
    let start = Instant::now();
    let report = scenario::run_script(scenario::DEMO_SCRIPT, demo_options()).expect("demo parses");
    assert!(report.ok, "demo failed: {:?}", report.failure);

    let expected = "Leaks before GC:\n\
        Current native leaks:\n\
        100000000000008_GC (tuple) #1: \"(([([...],), 'test'],),)\"_j *8\n\
        100000000000016_GC (tuple) #3: \"([([...],), 'test'],)\"_j *8\n\
        100000000000024_GC (list) #2: \"[([...],), 'test']\"_j *8\n\
        100000000000032 (str) #2: \"test\"_j *8\n\
        Leaks after GC:\n\
        no leaks recorded\n";
    assert_eq!(report.output, expected, "report must be byte-exact");

    // The four entries carry exactly the expected type, refcount, gc flag
    // and managed-origin suffix.
    let entries: Vec<&str> = report
        .output
        .lines()
        .filter(|l| l.starts_with('1'))
        .collect();
    assert_eq!(entries.len(), 4);
    let has = |ty: &str, rc: u32, gc: bool| {
        entries.iter().any(|l| {
            l.contains(&format!("({ty}) #{rc}:"))
                && l.contains("\"_j")
                && (l.contains("_GC ") == gc)
        })
    };
    assert!(has("list", 2, true), "list #2 _GC");
    assert!(has("tuple", 1, true), "argument tuple #1 _GC");
    assert!(has("str", 2, false), "str #2 without _GC");
    assert!(has("tuple", 3, true), "inner tuple #3 _GC");

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(1), "demo took {elapsed:?}");
    println!("criterion 1 (demo golden report): PASS");
}

#[test]
fn criterion_2_fuzz_safety() {
    let (reports, elapsed) = campaigns(true);
    for r in reports {
        assert!(
            !matches!(&r.violation, Some(v) if v.kind == ViolationKind::Safety),
            "seed {}: safety violation: {:?}",
            r.seed,
            r.violation
        );
        assert!(r.violation.is_none(), "seed {}: {:?}", r.seed, r.violation);
        assert!(
            r.collector_frees > 0,
            "seed {}: the collector path freed nothing; the check is vacuous",
            r.seed
        );
    }
    assert!(
        *elapsed < Duration::from_secs(60),
        "campaigns took {elapsed:?}"
    );
    println!("criterion 2 (fuzz safety, 10 x {CAMPAIGN_STEPS} steps in {elapsed:?}): PASS");
}

#[test]
fn criterion_3_bounded_float() {
    // Without silent mutations every fully-reported dead subgraph must go
    // within one cycle; with them, within two. (The silent-off set runs
    // first so both campaign sets can fill in parallel test threads.)
    let (no_silent, _) = campaigns(false);
    for r in no_silent {
        assert!(r.violation.is_none(), "seed {}: {:?}", r.seed, r.violation);
        assert!(!r.commands_text.contains("SILENT"));
    }
    let (with_silent, _) = campaigns(true);
    for r in with_silent {
        assert!(
            !matches!(&r.violation, Some(v) if v.kind == ViolationKind::BoundedFloat),
            "seed {}: float bound violated: {:?}",
            r.seed,
            r.violation
        );
    }
    println!("criterion 3 (bounded float, bound 2 silent / 1 reported): PASS");
}

const HARD_CASE_SCRIPT: &str = r#"NEW ja J list GC "[cycle-a]"
NEW jc J list GC "[cycle-c]"
NEW jd J list GC "[holder]"
LINK ja jc
LINK jc ja
PASSN a ja
PASSN c jc
PASSN d jd
WEAK wba ja
HANDLE d
DROP ja
DROP jc
DROP jd
LINK d 0 c SILENT
GC
DEREF r wba
NOTIFY d
GC
UNLINK d 0
GC
ASSERT_LEAKS 1
"#;

#[test]
fn criterion_4_hard_case() {
    let commands = scenario::parse(HARD_CASE_SCRIPT).expect("script parses");
    let mut exec = Executor::new(ExecOptions {
        script_name: "hard_case".into(),
        mem_debug: true,
        audit: true,
    });

    let mut outcomes = Vec::new();
    let mut oid_a = None;
    let mut oid_c = None;
    let mut oid_d = None;
    let mut head_a_before = None;
    let mut head_c_before = None;
    for cmd in &commands {
        // Before the first GC: the silent edge must make the candidate pair
        // inconsistent, with the pointed-at member as witness.
        if matches!(cmd.op, scenario::Op::Gc) && oid_a.is_none() {
            let a = exec.counted_binding("a").expect("a bound");
            let c = exec.counted_binding("c").expect("c bound");
            let d = exec.counted_binding("d").expect("d bound");
            oid_a = Some(a);
            oid_c = Some(c);
            oid_d = Some(d);
            head_a_before = exec.world().bridge.head_of(a);
            head_c_before = exec.world().bridge.head_of(c);
            let members = [a, c].into_iter().collect();
            assert_eq!(
                exec.world().consistency_check(&members).unwrap(),
                Consistency::Inconsistent { witness: c },
                "unreported external edge must be detected with the right witness"
            );
        }
        exec.step(cmd).expect("hard case runs clean");
        outcomes.push((cmd.to_string(), exec.world().monitor.current_leaks().len()));

        if matches!(cmd.op, scenario::Op::Gc)
            && outcomes.iter().filter(|(c, _)| c.as_str() == "GC").count() == 1
        {
            // First GC: zero frees, heads recreated, backends resurrected.
            let (a, c) = (oid_a.unwrap(), oid_c.unwrap());
            assert_eq!(
                exec.world().monitor.current_leaks().len(),
                3,
                "no object may be freed in the inconsistent cycle"
            );
            let head_a_after = exec.world().bridge.head_of(a).expect("head recreated");
            let head_c_after = exec.world().bridge.head_of(c).expect("head recreated");
            assert_ne!(Some(head_a_after), head_a_before, "fresh head for a");
            assert_ne!(Some(head_c_after), head_c_before, "fresh head for c");
            assert!(exec.world().traced.contains(head_a_after));
            assert!(exec.world().traced.contains(head_c_after));
            let backend_a = exec.world().bridge.backend_of(a).expect("backend restored");
            let backend_c = exec.world().bridge.backend_of(c).expect("backend restored");
            assert!(exec.world().traced.contains(backend_a), "resurrected");
            assert!(exec.world().traced.contains(backend_c), "resurrected");
        }
        if let scenario::Op::Deref { .. } = cmd.op {
            // The resurrected backend is reachable through the weak handle.
            let a = oid_a.unwrap();
            let tid = exec.traced_binding("r").expect("deref bound the result");
            assert!(exec.world().traced.contains(tid));
            assert_eq!(
                exec.world().role_target(tid),
                Some(a),
                "deref yields the (resurrected) backend of a"
            );
        }
    }

    // After notification and the unlink, the subgraph was freed within two
    // cycles; only the holder object remains.
    let d = oid_d.unwrap();
    assert!(exec.world().counted.contains(d));
    assert!(!exec.world().counted.contains(oid_a.unwrap()));
    assert!(!exec.world().counted.contains(oid_c.unwrap()));
    println!("criterion 4 (hard case: witness, recreation, resurrection, timely release): PASS");
}

#[test]
fn criterion_5_weakref_coherence() {
    // (a) + (b): handles on both sides agree on cleared status through the
    // whole lifecycle; traced collection fires nothing, counted death fires
    // each callback exactly once.
    let mut w = World::new();
    w.monitor.set_enabled(true);
    let s = w.alloc_counted("str", false, "s", ReprOrigin::Counted);
    w.adopt_handle(s).unwrap();
    let backend = w.pass_to_managed(s).unwrap();
    let hc = w
        .new_weakref(Ref::Counted(s), WeakKind::Plain, Some("native-cb".into()))
        .unwrap();
    let ht = w
        .new_weakref(
            Ref::Traced(backend),
            WeakKind::Plain,
            Some("managed-cb".into()),
        )
        .unwrap();
    assert_eq!(w.weak.is_cleared(hc), w.weak.is_cleared(ht));
    assert!(!w.weak.is_cleared(hc));

    w.drop_handle(s).unwrap();
    w.collect().unwrap();
    // Traced referent swept; nothing cleared, nothing fired.
    assert!(!w.traced.contains(backend));
    assert_eq!(w.weak.is_cleared(hc), w.weak.is_cleared(ht));
    assert!(!w.weak.is_cleared(hc));
    assert!(w.drain_fired_callbacks().is_empty());

    // Queue processing releases the anchor and frees the referent: both
    // sides observe the clear together and each callback fires once.
    w.process_cleared_heads().unwrap();
    assert!(!w.counted.contains(s));
    assert_eq!(w.weak.is_cleared(hc), w.weak.is_cleared(ht));
    assert!(w.weak.is_cleared(hc));
    let fired = w.drain_fired_callbacks();
    assert_eq!(fired.len(), 2, "each callback exactly once");
    assert_eq!(fired[0].callback, "native-cb", "counted-origin fires first");
    assert_eq!(fired[1].callback, "managed-cb");
    w.gc().unwrap();
    assert!(w.drain_fired_callbacks().is_empty(), "never fired again");

    // (c) deref after traced-referent collection recreates an equivalent
    // referent while the counted side stays alive through a native holder.
    let mut w = World::new();
    w.monitor.set_enabled(true);
    let x = w.alloc_counted("str", false, "payload", ReprOrigin::Counted);
    w.adopt_handle(x).unwrap();
    let holder = w.alloc_counted("holder", true, "holder", ReprOrigin::Counted);
    w.adopt_handle(holder).unwrap();
    w.set_edge(holder, 0, Some(x), false).unwrap();
    let bx = w.pass_to_managed(x).unwrap();
    let hx = w
        .new_weakref(Ref::Traced(bx), WeakKind::Plain, None)
        .unwrap();
    w.drop_handle(x).unwrap();
    w.gc().unwrap();
    assert!(!w.traced.contains(bx), "traced referent collected");
    assert!(w.counted.contains(x), "counted referent lives via holder");
    assert!(!w.weak.is_cleared(hx));
    match w.deref_weak(hx).unwrap() {
        DerefOutcome::Traced(t) => {
            let node = w.traced.get(t).unwrap();
            let payload = node.payload.as_ref().expect("recreated from counted state");
            assert_eq!(payload.type_name, "str");
            assert_eq!(payload.repr_text, "payload");
            assert_eq!(w.role_target(t), Some(x));
        }
        other => panic!("expected recreated referent, got {other:?}"),
    }
    assert!(w.audit_refcounts().is_empty());

    // (d) anchored-hub increments never block freeing an otherwise-dead
    // cycle.
    let mut w = World::new();
    w.monitor.set_enabled(true);
    let a = w.alloc_counted("list", true, "[a]", ReprOrigin::Counted);
    w.adopt_handle(a).unwrap();
    let c = w.alloc_counted("list", true, "[c]", ReprOrigin::Counted);
    w.adopt_handle(c).unwrap();
    w.set_edge(a, 0, Some(c), false).unwrap();
    w.set_edge(c, 0, Some(a), false).unwrap();
    w.mirror_subgraph(a).unwrap();
    let bc = w.pass_to_managed(c).unwrap();
    let hd = w
        .new_weakref(Ref::Traced(bc), WeakKind::Plain, Some("cycle-cb".into()))
        .unwrap();
    assert_eq!(w.weak.anchored_increments(c), 1);
    w.drop_handle(a).unwrap();
    w.drop_handle(c).unwrap();
    let (_, bridge_report) = w.gc().unwrap();
    assert!(bridge_report.released.contains(&a));
    assert!(bridge_report.released.contains(&c));
    assert!(!w.counted.contains(a) && !w.counted.contains(c));
    assert!(w.weak.is_cleared(hd));
    let fired = w.drain_fired_callbacks();
    assert_eq!(fired.len(), 1);
    assert_eq!(fired[0].callback, "cycle-cb");

    println!("criterion 5 (weakref coherence a-d): PASS");
}

const WEAKREF_SCRIPT: &str = r#"NEW s str "payload"
NEW holder list GC "[s]"
LINK holder 0 s
PASSM bs s
WEAK ws bs CB on_clear
DROP s
GC
DEREF again ws
GC
UNLINK holder 0
GC
REPORT
ASSERT_LEAKS 1
"#;

const LOCK_SCRIPT: &str = r#"NEW x list GC "[]"
ENTER worker
MIRROR x
ALLOW worker
ENTER helper
EXIT helper
ENDALLOW worker
GC
EXIT worker
DROP x
GC
ASSERT_LEAKS 0
"#;

#[test]
fn criterion_6_accounting_audit_in_golden_scenarios() {
    // Every executor run audits the accounting identity after every single
    // command and aborts on the first mismatch; a clean run is the proof.
    for (name, script) in [
        ("demo", scenario::DEMO_SCRIPT),
        ("hard_case", HARD_CASE_SCRIPT),
        ("weakref", WEAKREF_SCRIPT),
        ("locks", LOCK_SCRIPT),
    ] {
        let report = scenario::run_script(
            script,
            ExecOptions {
                script_name: name.into(),
                mem_debug: true,
                audit: true,
            },
        )
        .expect("golden script parses");
        assert!(report.ok, "{name}: {:?}", report.failure);
        assert!(report.assertions_passed > 0, "{name} asserts its outcome");
    }
    println!("criterion 6 (refcount accounting audited after every command): PASS");
}

#[test]
fn criterion_7_lock_model_exhaustive() {
    let start = Instant::now();
    let visited = explore_interleavings(3, 6).expect("single-holder invariant");
    assert!(visited > 1_000_000, "exploration covered {visited} states");

    // Balanced allow windows restore the exact pre-window state, including
    // under contention from a second actor.
    for depth in 1..=3u32 {
        for contended in [false, true] {
            let mut m = LockModel::new();
            let a = ActorId(0);
            let b = ActorId(1);
            m.enter_native(a).unwrap();
            let before = m.actor(a);
            for _ in 0..depth {
                m.begin_allow(a).unwrap();
            }
            // Unwind nested windows; only the outermost end re-acquires and
            // can block.
            for _ in 1..depth {
                m.end_allow(a).unwrap();
            }
            if contended {
                m.enter_native(b).unwrap();
                assert_eq!(
                    m.end_allow(a),
                    Err(gcbridge::LockError::WouldBlock),
                    "outermost end blocks while contended"
                );
                m.exit_native(b).unwrap();
            }
            m.end_allow(a).unwrap();
            assert_eq!(m.actor(a), before);
            assert_eq!(m.holder(), Some(a));
            m.exit_native(a).unwrap();
            assert!(m.is_quiescent());
        }
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    println!("criterion 7 (lock model: {visited} states, balanced windows restore state): PASS");
}
