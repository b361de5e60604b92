//! Line-oriented scenario parser. `#` starts a comment; tokens are
//! whitespace-separated except for double-quoted repr strings.

use thiserror::Error;

use crate::weakref_bridge::WeakKind;

use super::{Command, Op};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line_no}: {message}")]
pub struct ParseError {
    pub line_no: usize,
    pub message: String,
}

fn err<T>(line_no: usize, message: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError {
        line_no,
        message: message.into(),
    })
}

/// Split a line into tokens, honoring one level of double quotes.
fn tokenize(line: &str, line_no: usize) -> Result<Vec<String>, ParseError> {
    let mut tokens = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '#' {
            break;
        } else if c == '"' {
            chars.next();
            let mut s = String::new();
            loop {
                match chars.next() {
                    Some('"') => break,
                    Some(ch) => s.push(ch),
                    None => return err(line_no, "unterminated string"),
                }
            }
            tokens.push(format!("\"{s}"));
        } else {
            let mut s = String::new();
            while let Some(&ch) = chars.peek() {
                if ch.is_whitespace() || ch == '"' || ch == '#' {
                    break;
                }
                s.push(ch);
                chars.next();
            }
            tokens.push(s);
        }
    }
    Ok(tokens)
}

fn is_name(tok: &str) -> bool {
    let mut chars = tok.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn unquote(tok: &str) -> Option<&str> {
    tok.strip_prefix('"')
}

/// Parse a scenario script into commands. Comments and blank lines are
/// skipped; every command records its 1-based source line.
pub fn parse(text: &str) -> Result<Vec<Command>, ParseError> {
    let mut commands = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let tokens = tokenize(raw, line_no)?;
        if tokens.is_empty() {
            continue;
        }
        let verb = tokens[0].to_ascii_uppercase();
        let args = &tokens[1..];
        let op = match verb.as_str() {
            "NEW" => parse_new(args, line_no)?,
            "LINK" => parse_link(args, line_no)?,
            "UNLINK" => parse_unlink(args, line_no)?,
            "HANDLE" => Op::Handle {
                name: one_name(args, line_no, "HANDLE")?,
            },
            "DROP" => Op::Drop {
                name: one_name(args, line_no, "DROP")?,
            },
            "PASSN" => {
                let (name, source) = two_names(args, line_no, "PASSN")?;
                Op::PassN { name, source }
            }
            "PASSM" => {
                let (name, source) = two_names(args, line_no, "PASSM")?;
                Op::PassM { name, source }
            }
            "MIRROR" => Op::Mirror {
                name: one_name(args, line_no, "MIRROR")?,
            },
            "NOTIFY" => Op::Notify {
                name: one_name(args, line_no, "NOTIFY")?,
            },
            "GC" => no_args(args, line_no, "GC", Op::Gc)?,
            "PROCESS" => no_args(args, line_no, "PROCESS", Op::Process)?,
            "WEAK" => parse_weak(args, line_no)?,
            "DEREF" => {
                let (name, weak) = two_names(args, line_no, "DEREF")?;
                Op::Deref { name, weak }
            }
            "ENTER" => Op::Enter {
                actor: one_name(args, line_no, "ENTER")?,
            },
            "EXIT" => Op::Exit {
                actor: one_name(args, line_no, "EXIT")?,
            },
            "ALLOW" => Op::Allow {
                actor: one_name(args, line_no, "ALLOW")?,
            },
            "ENDALLOW" => Op::EndAllow {
                actor: one_name(args, line_no, "ENDALLOW")?,
            },
            "REPORT" => Op::Report {
                label: if args.is_empty() {
                    None
                } else {
                    Some(args.join(" "))
                },
            },
            "ASSERT_LEAKS" => {
                if args.len() != 1 {
                    return err(line_no, "ASSERT_LEAKS takes one count");
                }
                match args[0].parse() {
                    Ok(expected) => Op::AssertLeaks { expected },
                    Err(_) => return err(line_no, "ASSERT_LEAKS count must be an integer"),
                }
            }
            "CLEAR_HISTORY" => no_args(args, line_no, "CLEAR_HISTORY", Op::ClearHistory)?,
            other => return err(line_no, format!("unknown verb `{other}`")),
        };
        commands.push(Command { line_no, op });
    }
    Ok(commands)
}

fn no_args(args: &[String], line_no: usize, verb: &str, op: Op) -> Result<Op, ParseError> {
    if args.is_empty() {
        Ok(op)
    } else {
        err(line_no, format!("{verb} takes no arguments"))
    }
}

fn one_name(args: &[String], line_no: usize, verb: &str) -> Result<String, ParseError> {
    match args {
        [name] if is_name(name) => Ok(name.clone()),
        _ => err(line_no, format!("{verb} takes one name")),
    }
}

fn two_names(args: &[String], line_no: usize, verb: &str) -> Result<(String, String), ParseError> {
    match args {
        [a, b] if is_name(a) && is_name(b) => Ok((a.clone(), b.clone())),
        _ => err(line_no, format!("{verb} takes two names")),
    }
}

fn parse_new(args: &[String], line_no: usize) -> Result<Op, ParseError> {
    if args.is_empty() || !is_name(&args[0]) {
        return err(line_no, "NEW needs a fresh name");
    }
    let name = args[0].clone();
    let mut rest = &args[1..];
    let managed = matches!(rest.first().map(String::as_str), Some("J"));
    if managed {
        rest = &rest[1..];
    }
    let Some(type_name) = rest.first() else {
        return err(line_no, "NEW needs a type name");
    };
    if !is_name(type_name) {
        return err(line_no, "NEW type must be an identifier");
    }
    let type_name = type_name.clone();
    rest = &rest[1..];
    let gc_tracked = matches!(rest.first().map(String::as_str), Some("GC"));
    if gc_tracked {
        rest = &rest[1..];
    }
    let repr = match rest {
        [] => type_name.clone(),
        [r] => match unquote(r) {
            Some(s) => s.to_string(),
            None => return err(line_no, "NEW repr must be quoted"),
        },
        _ => return err(line_no, "NEW has trailing tokens"),
    };
    Ok(Op::New {
        name,
        managed,
        type_name,
        gc_tracked,
        repr,
    })
}

fn parse_link(args: &[String], line_no: usize) -> Result<Op, ParseError> {
    match args {
        // LINK parent slot child [SILENT]
        [parent, slot, child, rest @ ..] if slot.parse::<usize>().is_ok() => {
            let silent = match rest {
                [] => false,
                [s] if s == "SILENT" => true,
                _ => return err(line_no, "LINK has trailing tokens"),
            };
            Ok(Op::Link {
                parent: parent.clone(),
                slot: Some(slot.parse().expect("checked by guard")),
                child: child.clone(),
                silent,
            })
        }
        // LINK from to
        [from, to] if is_name(from) && is_name(to) => Ok(Op::Link {
            parent: from.clone(),
            slot: None,
            child: to.clone(),
            silent: false,
        }),
        _ => err(
            line_no,
            "LINK takes `parent slot child [SILENT]` or `from to`",
        ),
    }
}

fn parse_unlink(args: &[String], line_no: usize) -> Result<Op, ParseError> {
    match args {
        // UNLINK parent slot [SILENT]
        [parent, slot, rest @ ..] if slot.parse::<usize>().is_ok() => {
            let silent = match rest {
                [] => false,
                [s] if s == "SILENT" => true,
                _ => return err(line_no, "UNLINK has trailing tokens"),
            };
            Ok(Op::Unlink {
                parent: parent.clone(),
                slot: Some(slot.parse().expect("checked by guard")),
                child: None,
                silent,
            })
        }
        // UNLINK from to
        [from, to] if is_name(from) && is_name(to) => Ok(Op::Unlink {
            parent: from.clone(),
            slot: None,
            child: Some(to.clone()),
            silent: false,
        }),
        _ => err(line_no, "UNLINK takes `parent slot [SILENT]` or `from to`"),
    }
}

fn parse_weak(args: &[String], line_no: usize) -> Result<Op, ParseError> {
    if args.len() < 2 || !is_name(&args[0]) || !is_name(&args[1]) {
        return err(
            line_no,
            "WEAK takes `new referent [PROXY|CALLPROXY] [CB id]`",
        );
    }
    let name = args[0].clone();
    let referent = args[1].clone();
    let mut kind = WeakKind::Plain;
    let mut callback = None;
    let mut rest = &args[2..];
    if let Some(tok) = rest.first() {
        match tok.as_str() {
            "PROXY" => {
                kind = WeakKind::Proxy;
                rest = &rest[1..];
            }
            "CALLPROXY" => {
                kind = WeakKind::CallableProxy;
                rest = &rest[1..];
            }
            _ => {}
        }
    }
    match rest {
        [] => {}
        [cb, id] if cb == "CB" => callback = Some(id.clone()),
        _ => return err(line_no, "WEAK has trailing tokens"),
    }
    Ok(Op::Weak {
        name,
        referent,
        kind,
        callback,
    })
}
