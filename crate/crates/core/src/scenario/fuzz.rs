//! Seeded fuzzer: drives the world with a pseudo-random command stream over a
//! bounded object population, checking after every command that nothing the
//! reachability oracle protects was freed and that refcount accounting still
//! balances, and after every GC that fully-reported dead subgraphs are freed
//! within the float bound. The first violation is minimized by delta
//! debugging into a reproduction script.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::counted_heap::Oid;
use crate::weakref_bridge::WeakKind;

use super::exec::{ExecOptions, Executor};
use super::oracle;
use super::{render_script, Command, Op};

#[derive(Debug, Clone)]
pub struct FuzzConfig {
    pub seed: u64,
    pub steps: u64,
    /// Allow unreported (silent) graph mutations.
    pub silent_enabled: bool,
    /// Upper bound on the live counted population.
    pub population_cap: usize,
    /// Delta-debug the first violation into a minimal reproduction.
    pub minimize: bool,
}

impl FuzzConfig {
    pub fn new(seed: u64, steps: u64) -> Self {
        Self {
            seed,
            steps,
            silent_enabled: true,
            population_cap: 64,
            minimize: true,
        }
    }

    /// GC cycles a fully-reported dead subgraph may float: two with silent
    /// mutations in play, one without.
    pub fn float_bound(&self) -> u64 {
        if self.silent_enabled {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    /// An object the oracle requires alive was freed.
    Safety,
    /// A fully-reported dead subgraph outlived the float bound.
    BoundedFloat,
    /// The refcount accounting identity broke.
    Audit,
    /// A generated command failed unexpectedly.
    UnexpectedError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub step: usize,
    pub detail: String,
    /// Minimized reproduction script.
    pub script: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FuzzReport {
    pub seed: u64,
    pub steps: u64,
    pub commands_run: usize,
    pub gc_cycles: u64,
    pub objects_freed: usize,
    /// Frees performed by the collector paths (GC/PROCESS commands) — the
    /// ones the safety oracle guards.
    pub collector_frees: usize,
    pub final_leaks: usize,
    pub violation: Option<Violation>,
    /// Full generated command stream (identical for identical seeds).
    pub commands_text: String,
}

/// Tracks how long oracle-dead, fully-reported objects have floated.
#[derive(Default)]
struct FloatTracker {
    dead_since: BTreeMap<Oid, u64>,
}

impl FloatTracker {
    /// Update after a completed GC cycle; returns the first object over the
    /// bound, if any.
    fn after_gc(
        &mut self,
        world: &crate::world::World,
        cycle: u64,
        bound: u64,
    ) -> Option<(Oid, u64)> {
        let must = oracle::must_survive(world);
        let mut reported_dead: BTreeSet<Oid> = BTreeSet::new();
        for component in oracle::dead_components(world, &must) {
            if oracle::component_fully_reported(world, &component) {
                reported_dead.extend(component);
            }
        }
        // Freed, revived or no-longer-reported objects leave the clock.
        self.dead_since.retain(|oid, _| reported_dead.contains(oid));
        for oid in reported_dead {
            self.dead_since.entry(oid).or_insert(cycle);
        }
        self.dead_since
            .iter()
            .find(|(_, since)| cycle.saturating_sub(**since) >= bound)
            .map(|(oid, since)| (*oid, *since))
    }
}

struct RunStats {
    commands_run: usize,
    gc_cycles: u64,
    objects_freed: usize,
}

/// Execute a command list with all checks. `lenient` skips commands that
/// fail from dangling bindings (used when replaying minimized subsets).
fn check_run(
    commands: &[Command],
    cfg: &FuzzConfig,
    lenient: bool,
) -> (Option<(ViolationKind, usize, String)>, RunStats, Executor) {
    let mut exec = Executor::new(ExecOptions {
        script_name: "fuzz".into(),
        mem_debug: true,
        audit: true,
    });
    let mut tracker = FloatTracker::default();
    let mut stats = RunStats {
        commands_run: 0,
        gc_cycles: 0,
        objects_freed: 0,
    };
    for (step, cmd) in commands.iter().enumerate() {
        // The oracle guards the collector's own freeing paths; mutation
        // commands release references explicitly and are covered by the
        // refcount audit instead.
        let collector_op = matches!(cmd.op, Op::Gc | Op::Process);
        let must = if collector_op {
            oracle::must_survive(exec.world())
        } else {
            Default::default()
        };
        match exec.step(cmd) {
            Ok(()) => {}
            Err(e) => {
                let kind = if e.message.contains("refcount audit failed") {
                    ViolationKind::Audit
                } else if lenient {
                    continue;
                } else {
                    ViolationKind::UnexpectedError
                };
                return (Some((kind, step, e.to_string())), stats, exec);
            }
        }
        stats.commands_run += 1;
        let freed = exec.world_mut().drain_freed();
        stats.objects_freed += freed.len();
        if collector_op {
            if let Some(bad) = freed.iter().find(|o| must.contains(o)) {
                let detail = format!("freed {bad} at step {step} while the oracle protects it");
                return (Some((ViolationKind::Safety, step, detail)), stats, exec);
            }
        }
        if matches!(cmd.op, Op::Gc) {
            stats.gc_cycles += 1;
            if let Some((oid, since)) =
                tracker.after_gc(exec.world(), stats.gc_cycles, cfg.float_bound())
            {
                let detail = format!(
                    "{oid} dead and fully reported since cycle {since}, still live at cycle {} (bound {})",
                    stats.gc_cycles,
                    cfg.float_bound()
                );
                return (
                    Some((ViolationKind::BoundedFloat, step, detail)),
                    stats,
                    exec,
                );
            }
        }
    }
    (None, stats, exec)
}

/// Greedy ddmin over the command list: repeatedly drop chunks whose removal
/// keeps the violation reproducible. Replays are capped so minimization of a
/// stubborn long reproduction stays affordable; the result is best-effort
/// minimal.
fn minimize(commands: &[Command], cfg: &FuzzConfig, kind: ViolationKind) -> Vec<Command> {
    const REPLAY_BUDGET: usize = 400;
    let replays = std::cell::Cell::new(0usize);
    let reproduces = |cmds: &[Command]| -> bool {
        replays.set(replays.get() + 1);
        matches!(check_run(cmds, cfg, true).0, Some((k, _, _)) if k == kind)
    };
    let mut current: Vec<Command> = commands.to_vec();
    let mut n = 2usize;
    while current.len() >= 2 && replays.get() < REPLAY_BUDGET {
        let chunk = current.len().div_ceil(n);
        let mut reduced = false;
        let mut start = 0;
        while start < current.len() && replays.get() < REPLAY_BUDGET {
            let end = (start + chunk).min(current.len());
            let mut candidate = current.clone();
            candidate.drain(start..end);
            if !candidate.is_empty() && reproduces(&candidate) {
                current = candidate;
                n = n.saturating_sub(1).max(2);
                reduced = true;
                start = 0;
                continue;
            }
            start = end;
        }
        if !reduced {
            if n >= current.len() {
                break;
            }
            n = (n * 2).min(current.len());
        }
    }
    current
}

struct Gen {
    rng: ChaCha8Rng,
    counter: u64,
    /// Bound names with their resolved ids, so per-step liveness filtering
    /// avoids string-keyed lookups.
    counted: Vec<(String, Oid)>,
    traced: Vec<(String, crate::traced_heap::Tid)>,
    weaks: Vec<String>,
}

impl Gen {
    fn fresh(&mut self, prefix: &str) -> String {
        self.counter += 1;
        format!("{prefix}{}", self.counter)
    }

    fn pick<'a, T>(&mut self, pool: &'a [T]) -> Option<&'a T> {
        if pool.is_empty() {
            None
        } else {
            Some(&pool[self.rng.gen_range(0..pool.len())])
        }
    }

    /// Resolve a freshly created binding into the pools.
    fn absorb(&mut self, exec: &Executor, name: &str) {
        if let Some(oid) = exec.counted_binding(name) {
            self.counted.push((name.to_string(), oid));
        } else if let Some(tid) = exec.traced_binding(name) {
            self.traced.push((name.to_string(), tid));
        } else if exec.weak_binding(name).is_some() {
            self.weaks.push(name.to_string());
        }
    }

    fn forget(&mut self, name: &str) {
        self.counted.retain(|(n, _)| n != name);
        self.traced.retain(|(n, _)| n != name);
        self.weaks.retain(|n| n != name);
    }
}

const TYPES: &[(&str, bool)] = &[
    ("list", true),
    ("tuple", true),
    ("dict", true),
    ("str", false),
    ("int", false),
];

/// Generate the next command from the current world state, or None when the
/// chosen op has no valid operands this step.
fn generate(gen: &mut Gen, exec: &Executor, cfg: &FuzzConfig) -> Option<Command> {
    let world = exec.world();
    let live_counted: Vec<(String, Oid)> = gen
        .counted
        .iter()
        .filter(|(_, o)| world.counted.contains(*o))
        .cloned()
        .collect();
    let gc_counted: Vec<(String, Oid)> = live_counted
        .iter()
        .filter(|(_, o)| world.counted.get(*o).map(|obj| obj.gc_tracked) == Ok(true))
        .cloned()
        .collect();
    let live_traced: Vec<(String, crate::traced_heap::Tid)> = gen
        .traced
        .iter()
        .filter(|(_, t)| world.traced.contains(*t))
        .cloned()
        .collect();
    let gc_traced: Vec<(String, crate::traced_heap::Tid)> = live_traced
        .iter()
        .filter(|(_, t)| {
            world
                .traced
                .get(*t)
                .ok()
                .and_then(|node| node.payload.as_ref())
                .map(|p| p.gc_tracked)
                .unwrap_or(false)
        })
        .cloned()
        .collect();
    let population = world.counted.len();

    let roll = gen.rng.gen_range(0..100u32);
    let op = match roll {
        0..=11 => {
            if population + 1 >= cfg.population_cap {
                return None;
            }
            let (type_name, gc) = TYPES[gen.rng.gen_range(0..TYPES.len())];
            let name = gen.fresh("c");
            Op::New {
                name,
                managed: false,
                type_name: type_name.into(),
                gc_tracked: gc,
                repr: format!("v{}", gen.counter),
            }
        }
        12..=18 => {
            // The managed side is bounded like the counted one.
            if live_traced.len() >= cfg.population_cap {
                return None;
            }
            let (type_name, gc) = TYPES[gen.rng.gen_range(0..TYPES.len())];
            let name = gen.fresh("m");
            Op::New {
                name,
                managed: true,
                type_name: type_name.into(),
                gc_tracked: gc,
                repr: format!("v{}", gen.counter),
            }
        }
        19..=30 => {
            let parent = gen.pick(&gc_counted)?.0.clone();
            let child = gen.pick(&live_counted)?.0.clone();
            let slot = gen.rng.gen_range(0..4);
            let silent = cfg.silent_enabled && gen.rng.gen_bool(0.4);
            Op::Link {
                parent,
                slot: Some(slot),
                child,
                silent,
            }
        }
        31..=41 => {
            // Unlink an occupied slot of some container.
            let candidates: Vec<(&String, usize)> = gc_counted
                .iter()
                .filter_map(|(n, oid)| {
                    let obj = world.counted.get(*oid).ok()?;
                    let occupied: Vec<usize> = obj
                        .edges
                        .iter()
                        .enumerate()
                        .filter_map(|(i, e)| e.map(|_| i))
                        .collect();
                    if occupied.is_empty() {
                        None
                    } else {
                        Some((n, occupied))
                    }
                })
                .flat_map(|(n, occupied)| occupied.into_iter().map(move |s| (n, s)))
                .collect();
            if candidates.is_empty() {
                return None;
            }
            let (parent, slot) = candidates[gen.rng.gen_range(0..candidates.len())];
            let parent = parent.clone();
            let silent = cfg.silent_enabled && gen.rng.gen_bool(0.4);
            Op::Unlink {
                parent,
                slot: Some(slot),
                child: None,
                silent,
            }
        }
        42..=45 => {
            let from = gen.pick(&gc_traced)?.0.clone();
            let to = gen.pick(&live_traced)?.0.clone();
            Op::Link {
                parent: from,
                slot: None,
                child: to,
                silent: false,
            }
        }
        46..=48 => {
            let idx = gen.rng.gen_range(
                0..live_counted
                    .len()
                    .checked_add(live_traced.len())
                    .filter(|n| *n > 0)?,
            );
            let name = if idx < live_counted.len() {
                live_counted[idx].0.clone()
            } else {
                live_traced[idx - live_counted.len()].0.clone()
            };
            Op::Handle { name }
        }
        49..=60 => {
            let total = gen.counted.len() + gen.traced.len() + gen.weaks.len();
            if total == 0 {
                return None;
            }
            let idx = gen.rng.gen_range(0..total);
            let name = if idx < gen.counted.len() {
                gen.counted[idx].0.clone()
            } else if idx < gen.counted.len() + gen.traced.len() {
                gen.traced[idx - gen.counted.len()].0.clone()
            } else {
                gen.weaks[idx - gen.counted.len() - gen.traced.len()].clone()
            };
            gen.forget(&name);
            Op::Drop { name }
        }
        61..=65 => {
            if population + 8 >= cfg.population_cap {
                return None;
            }
            let source = gen.pick(&live_traced)?.0.clone();
            let name = gen.fresh("c");
            Op::PassN { name, source }
        }
        66..=69 => {
            let source = gen.pick(&live_counted)?.0.clone();
            let name = gen.fresh("m");
            Op::PassM { name, source }
        }
        70..=74 => {
            let name = gen.pick(&live_counted)?.0.clone();
            Op::Mirror { name }
        }
        75..=78 => {
            let name = gen.pick(&live_counted)?.0.clone();
            Op::Notify { name }
        }
        79..=83 => {
            let idx = gen.rng.gen_range(
                0..live_counted
                    .len()
                    .checked_add(live_traced.len())
                    .filter(|n| *n > 0)?,
            );
            let referent = if idx < live_counted.len() {
                live_counted[idx].0.clone()
            } else {
                live_traced[idx - live_counted.len()].0.clone()
            };
            let name = gen.fresh("w");
            let callback = gen.rng.gen_bool(0.5).then(|| format!("cb{}", gen.counter));
            Op::Weak {
                name,
                referent,
                kind: WeakKind::Plain,
                callback,
            }
        }
        84..=86 => {
            let weak = gen.pick(&gen.weaks.clone())?.clone();
            let name = gen.fresh("d");
            Op::Deref { name, weak }
        }
        87..=95 => Op::Gc,
        _ => Op::Process,
    };
    Some(Command {
        line_no: gen.counter as usize,
        op,
    })
}

/// Run one fuzz campaign. Identical configurations produce identical
/// reports.
pub fn fuzz(cfg: &FuzzConfig) -> FuzzReport {
    let mut gen = Gen {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        counter: 0,
        counted: Vec::new(),
        traced: Vec::new(),
        weaks: Vec::new(),
    };
    let mut commands: Vec<Command> = Vec::new();
    let mut exec = Executor::new(ExecOptions {
        script_name: "fuzz".into(),
        mem_debug: true,
        audit: true,
    });
    let mut tracker = FloatTracker::default();
    let mut gc_cycles = 0u64;
    let mut objects_freed = 0usize;
    let mut collector_frees = 0usize;
    let mut violation: Option<(ViolationKind, usize, String)> = None;

    let mut step = 0usize;
    let mut generated = 0u64;
    while generated < cfg.steps {
        let Some(cmd) = generate(&mut gen, &exec, cfg) else {
            generated += 1;
            continue;
        };
        generated += 1;
        let mut cmd = cmd;
        cmd.line_no = step + 1;
        commands.push(cmd.clone());

        let collector_op = matches!(cmd.op, Op::Gc | Op::Process);
        let must = if collector_op {
            oracle::must_survive(exec.world())
        } else {
            Default::default()
        };
        match exec.step(&cmd) {
            Ok(()) => {}
            Err(e) => {
                let kind = if e.message.contains("refcount audit failed") {
                    ViolationKind::Audit
                } else {
                    ViolationKind::UnexpectedError
                };
                violation = Some((kind, step, e.to_string()));
                break;
            }
        }
        // Freshly bound names join the pools with their resolved ids (a
        // deref of a cleared reference binds nothing and is skipped).
        match &cmd.op {
            Op::New { name, .. }
            | Op::PassN { name, .. }
            | Op::PassM { name, .. }
            | Op::Weak { name, .. }
            | Op::Deref { name, .. } => gen.absorb(&exec, name),
            _ => {}
        }
        let freed = exec.world_mut().drain_freed();
        objects_freed += freed.len();
        if collector_op {
            collector_frees += freed.len();
            if let Some(bad) = freed.iter().find(|o| must.contains(o)) {
                violation = Some((
                    ViolationKind::Safety,
                    step,
                    format!("freed {bad} at step {step} while the oracle protects it"),
                ));
                break;
            }
        }
        if matches!(cmd.op, Op::Gc) {
            gc_cycles += 1;
            if let Some((oid, since)) = tracker.after_gc(exec.world(), gc_cycles, cfg.float_bound())
            {
                violation = Some((
                    ViolationKind::BoundedFloat,
                    step,
                    format!(
                        "{oid} dead and fully reported since cycle {since}, still live at cycle {gc_cycles} (bound {})",
                        cfg.float_bound()
                    ),
                ));
                break;
            }
        }
        step += 1;
    }

    let final_leaks = exec.world().monitor.current_leaks().len();
    let violation = violation.map(|(kind, step, detail)| {
        let minimized = if cfg.minimize {
            minimize(&commands, cfg, kind)
        } else {
            commands.clone()
        };
        Violation {
            kind,
            step,
            detail,
            script: render_script(&minimized),
        }
    });
    FuzzReport {
        seed: cfg.seed,
        steps: cfg.steps,
        commands_run: commands.len(),
        gc_cycles,
        objects_freed,
        collector_frees,
        final_leaks,
        violation,
        commands_text: render_script(&commands),
    }
}
