//! Scenario scripts: a line-oriented command language driving the world, an
//! executor with refcount auditing, a reachability oracle, and a fuzzer with
//! delta-debugging minimization.
//!
//! The grammar is documented in the repository README. Symbolic names bind
//! to counted objects, traced nodes or weak handles as commands produce
//! them; every later reference must use a bound name.

mod exec;
mod fuzz;
pub mod oracle;
mod parse;

pub use exec::{run_script, CommandOutcome, ExecOptions, Executor, RunReport, ScenarioError};
pub use fuzz::{fuzz, FuzzConfig, FuzzReport, Violation, ViolationKind};
pub use parse::{parse, ParseError};

use std::fmt;

use serde::Serialize;

use crate::weakref_bridge::WeakKind;

/// One parsed scenario command with the line it came from (which becomes the
/// allocation site of objects it creates).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Command {
    pub line_no: usize,
    pub op: Op,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Op {
    /// `NEW <name> [J] <type> [GC] ["<repr>"]` — allocate a counted object
    /// (default) or a managed value node (`J`), holding a handle/root on it.
    New {
        name: String,
        managed: bool,
        type_name: String,
        gc_tracked: bool,
        repr: String,
    },
    /// `LINK <parent> <slot> <child> [SILENT]` (counted) or
    /// `LINK <from> <to>` (traced).
    Link {
        parent: String,
        slot: Option<usize>,
        child: String,
        silent: bool,
    },
    /// `UNLINK <parent> <slot> [SILENT]` (counted) or
    /// `UNLINK <from> <to>` (traced).
    Unlink {
        parent: String,
        slot: Option<usize>,
        child: Option<String>,
        silent: bool,
    },
    /// `HANDLE <name>` — take one more external handle (counted) or root the
    /// node (traced).
    Handle {
        name: String,
    },
    /// `DROP <name>` — release this binding's handles/root and unbind it.
    Drop {
        name: String,
    },
    /// `PASSN <new> <traced>` — pass a managed value to the native side.
    PassN {
        name: String,
        source: String,
    },
    /// `PASSM <new> <counted>` — pass a native object to the managed side.
    PassM {
        name: String,
        source: String,
    },
    /// `MIRROR <counted>` — explore and mirror the reachable subgraph.
    Mirror {
        name: String,
    },
    /// `NOTIFY <counted>` — report a graph change to the bridge.
    Notify {
        name: String,
    },
    /// `GC` — traced collection followed by bridge queue processing.
    Gc,
    /// `PROCESS` — bridge queue processing only.
    Process,
    /// `WEAK <new> <referent> [PROXY|CALLPROXY] [CB <id>]`.
    Weak {
        name: String,
        referent: String,
        kind: WeakKind,
        callback: Option<String>,
    },
    /// `DEREF <new> <weak>` — dereference; binds the result if not cleared.
    Deref {
        name: String,
        weak: String,
    },
    /// `ENTER|EXIT|ALLOW|ENDALLOW <actor>` — lock discipline transitions.
    Enter {
        actor: String,
    },
    Exit {
        actor: String,
    },
    Allow {
        actor: String,
    },
    EndAllow {
        actor: String,
    },
    /// `REPORT [label...]` — append the current leak listing to the output.
    Report {
        label: Option<String>,
    },
    /// `ASSERT_LEAKS <n>` — fail the run unless exactly n objects are live.
    AssertLeaks {
        expected: usize,
    },
    /// `CLEAR_HISTORY` — drop monitor history, keeping the live set.
    ClearHistory,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.op {
            Op::New {
                name,
                managed,
                type_name,
                gc_tracked,
                repr,
            } => {
                write!(f, "NEW {name}")?;
                if *managed {
                    write!(f, " J")?;
                }
                write!(f, " {type_name}")?;
                if *gc_tracked {
                    write!(f, " GC")?;
                }
                write!(f, " \"{repr}\"")
            }
            Op::Link {
                parent,
                slot,
                child,
                silent,
            } => {
                match slot {
                    Some(s) => write!(f, "LINK {parent} {s} {child}")?,
                    None => write!(f, "LINK {parent} {child}")?,
                }
                if *silent {
                    write!(f, " SILENT")?;
                }
                Ok(())
            }
            Op::Unlink {
                parent,
                slot,
                child,
                silent,
            } => {
                match (slot, child) {
                    (Some(s), _) => write!(f, "UNLINK {parent} {s}")?,
                    (None, Some(c)) => write!(f, "UNLINK {parent} {c}")?,
                    (None, None) => write!(f, "UNLINK {parent}")?,
                }
                if *silent {
                    write!(f, " SILENT")?;
                }
                Ok(())
            }
            Op::Handle { name } => write!(f, "HANDLE {name}"),
            Op::Drop { name } => write!(f, "DROP {name}"),
            Op::PassN { name, source } => write!(f, "PASSN {name} {source}"),
            Op::PassM { name, source } => write!(f, "PASSM {name} {source}"),
            Op::Mirror { name } => write!(f, "MIRROR {name}"),
            Op::Notify { name } => write!(f, "NOTIFY {name}"),
            Op::Gc => write!(f, "GC"),
            Op::Process => write!(f, "PROCESS"),
            Op::Weak {
                name,
                referent,
                kind,
                callback,
            } => {
                write!(f, "WEAK {name} {referent}")?;
                match kind {
                    WeakKind::Plain => {}
                    WeakKind::Proxy => write!(f, " PROXY")?,
                    WeakKind::CallableProxy => write!(f, " CALLPROXY")?,
                }
                if let Some(cb) = callback {
                    write!(f, " CB {cb}")?;
                }
                Ok(())
            }
            Op::Deref { name, weak } => write!(f, "DEREF {name} {weak}"),
            Op::Enter { actor } => write!(f, "ENTER {actor}"),
            Op::Exit { actor } => write!(f, "EXIT {actor}"),
            Op::Allow { actor } => write!(f, "ALLOW {actor}"),
            Op::EndAllow { actor } => write!(f, "ENDALLOW {actor}"),
            Op::Report { label } => match label {
                Some(l) => write!(f, "REPORT {l}"),
                None => write!(f, "REPORT"),
            },
            Op::AssertLeaks { expected } => write!(f, "ASSERT_LEAKS {expected}"),
            Op::ClearHistory => write!(f, "CLEAR_HISTORY"),
        }
    }
}

/// Render a command list back into script text (used for fuzzer
/// reproductions; the result re-parses to the same commands).
pub fn render_script(commands: &[Command]) -> String {
    let mut out = String::new();
    for c in commands {
        out.push_str(&c.to_string());
        out.push('\n');
    }
    out
}

/// The built-in demonstration script: build a tuple/list reference cycle on
/// the managed side, pass it to native code, drop all managed references,
/// and show the leak listing before and after a collection.
pub const DEMO_SCRIPT: &str = r#"# Reference-cycle demo: a tuple/list cycle is handed to native code,
# the managed references are dropped, and one GC cycle cleans everything up.
NEW lst J tuple GC "([([...],), 'test'],)"
NEW inner J list GC "[([...],), 'test']"
NEW s J str "test"
NEW arg J tuple GC "(([([...],), 'test'],),)"
LINK lst inner
LINK inner lst
LINK inner s
LINK arg lst
PASSN native arg
DROP lst
DROP inner
DROP s
DROP arg
REPORT Leaks before GC:
GC
REPORT Leaks after GC:
ASSERT_LEAKS 0
"#;
