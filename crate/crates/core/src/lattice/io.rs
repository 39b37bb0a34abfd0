//! Text lattice format.
//!
//! One arc per line, whitespace separated:
//!
//! ```text
//! numframes <N>
//! <src> <dst> <label> <frame> <graph_weight> <acoustic_weight>
//! ...
//! final <state>
//! ```
//!
//! Weights are printed with 17 significant digits so the round trip is
//! bit-exact; `-inf` is legal. The start state is not written: it is the
//! unique state with no incoming arcs (or the final state if there are no
//! arcs at all).

use std::io::{BufRead, Write};

use super::{Lattice, LatticeArc, LatticeError, LogWeight};

fn fmt_weight(w: LogWeight) -> String {
    let v = w.value();
    if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v:.16e}")
    }
}

fn parse_weight(s: &str, line: usize) -> Result<LogWeight, LatticeError> {
    if s == "-inf" {
        return Ok(LogWeight::ZERO);
    }
    s.parse::<f64>()
        .map(LogWeight::new)
        .map_err(|e| LatticeError::Parse {
            line,
            msg: format!("bad weight {s:?}: {e}"),
        })
}

pub fn write_lattice(mut w: impl Write, lat: &Lattice) -> Result<(), LatticeError> {
    writeln!(w, "numframes {}", lat.num_frames())?;
    for a in lat.arcs() {
        writeln!(
            w,
            "{} {} {} {} {} {}",
            a.src,
            a.dst,
            a.label,
            a.frame,
            fmt_weight(a.graph_weight),
            fmt_weight(a.acoustic_weight)
        )?;
    }
    writeln!(w, "final {}", lat.final_state())?;
    Ok(())
}

pub fn read_lattice(r: impl BufRead) -> Result<Lattice, LatticeError> {
    let mut num_frames: Option<usize> = None;
    let mut final_state: Option<usize> = None;
    let mut arcs: Vec<LatticeArc> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse_usize = |s: &str| -> Result<usize, LatticeError> {
            s.parse().map_err(|e| LatticeError::Parse {
                line: lineno,
                msg: format!("bad integer {s:?}: {e}"),
            })
        };
        match fields[0] {
            "numframes" if fields.len() == 2 => num_frames = Some(parse_usize(fields[1])?),
            "final" if fields.len() == 2 => final_state = Some(parse_usize(fields[1])?),
            _ if fields.len() == 6 => {
                arcs.push(LatticeArc {
                    src: parse_usize(fields[0])?,
                    dst: parse_usize(fields[1])?,
                    label: fields[2].parse().map_err(|e| LatticeError::Parse {
                        line: lineno,
                        msg: format!("bad label {:?}: {e}", fields[2]),
                    })?,
                    frame: parse_usize(fields[3])?,
                    graph_weight: parse_weight(fields[4], lineno)?,
                    acoustic_weight: parse_weight(fields[5], lineno)?,
                });
            }
            _ => {
                return Err(LatticeError::Parse {
                    line: lineno,
                    msg: format!("unrecognized line {line:?}"),
                })
            }
        }
    }
    let num_frames = num_frames.ok_or(LatticeError::Parse {
        line: 0,
        msg: "missing numframes header".into(),
    })?;
    let final_state = final_state.ok_or(LatticeError::Parse {
        line: 0,
        msg: "missing final line".into(),
    })?;
    let num_states = arcs
        .iter()
        .flat_map(|a| [a.src, a.dst])
        .chain([final_state])
        .max()
        .unwrap_or(final_state)
        + 1;
    // The start state is the unique state with no incoming arcs.
    let mut has_in = vec![false; num_states];
    for a in &arcs {
        has_in[a.dst] = true;
    }
    let start = if arcs.is_empty() {
        final_state
    } else {
        let mut candidates = (0..num_states).filter(|&s| !has_in[s]);
        let start = candidates.next().ok_or(LatticeError::Parse {
            line: 0,
            msg: "no start state (every state has incoming arcs)".into(),
        })?;
        if let Some(other) = candidates.next() {
            return Err(LatticeError::Parse {
                line: 0,
                msg: format!("ambiguous start state: {start} and {other} have no incoming arcs"),
            });
        }
        start
    };
    Lattice::new(num_states, start, final_state, arcs, num_frames)
}
