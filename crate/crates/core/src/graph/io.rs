//! Text serialization for search graphs and frame masks.
//!
//! Graphs use the lattice arc conventions (whitespace fields, 17
//! significant digit weights) without the time/acoustic columns, which do
//! not apply to cyclic graphs:
//!
//! ```text
//! kind Denominator
//! start 0
//! <src> <dst> <label> <weight>
//! ...
//! final <state> <weight>
//! ```
//!
//! Masks are one line per frame: `<frame>: id,id,...`.

use std::io::{BufRead, Write};

use crate::lattice::LogWeight;

use super::{FrameMask, GraphArc, GraphError, GraphKind, SearchGraph};

fn fmt_weight(w: LogWeight) -> String {
    let v = w.value();
    if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v:.16e}")
    }
}

pub fn write_graph(mut w: impl Write, g: &SearchGraph) -> Result<(), GraphError> {
    writeln!(w, "kind {}", g.kind())?;
    writeln!(w, "start {}", g.start())?;
    for a in g.arcs() {
        writeln!(
            w,
            "{} {} {} {}",
            a.src,
            a.dst,
            a.label,
            fmt_weight(a.weight)
        )?;
    }
    for s in 0..g.num_states() {
        let fw = g.final_weight(s);
        if !fw.is_zero() {
            writeln!(w, "final {} {}", s, fmt_weight(fw))?;
        }
    }
    Ok(())
}

pub fn read_graph(r: impl BufRead) -> Result<SearchGraph, GraphError> {
    let mut kind: Option<GraphKind> = None;
    let mut start: Option<usize> = None;
    let mut arcs: Vec<GraphArc> = Vec::new();
    let mut finals: Vec<(usize, LogWeight)> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let perr = |msg: String| GraphError::Parse { line: lineno, msg };
        let parse_usize = |s: &str| -> Result<usize, GraphError> {
            s.parse()
                .map_err(|e| perr(format!("bad integer {s:?}: {e}")))
        };
        let parse_weight = |s: &str| -> Result<LogWeight, GraphError> {
            if s == "-inf" {
                return Ok(LogWeight::ZERO);
            }
            s.parse::<f64>()
                .map(LogWeight::new)
                .map_err(|e| perr(format!("bad weight {s:?}: {e}")))
        };
        match fields[0] {
            "kind" if fields.len() == 2 => {
                kind = Some(match fields[1] {
                    "Denominator" => GraphKind::Denominator,
                    "Numerator" => GraphKind::Numerator,
                    "Decode" => GraphKind::Decode,
                    other => return Err(perr(format!("unknown graph kind {other:?}"))),
                });
            }
            "start" if fields.len() == 2 => start = Some(parse_usize(fields[1])?),
            "final" if fields.len() == 3 => {
                finals.push((parse_usize(fields[1])?, parse_weight(fields[2])?))
            }
            _ if fields.len() == 4 => arcs.push(GraphArc {
                src: parse_usize(fields[0])?,
                dst: parse_usize(fields[1])?,
                label: fields[2]
                    .parse()
                    .map_err(|e| perr(format!("bad label {:?}: {e}", fields[2])))?,
                weight: parse_weight(fields[3])?,
            }),
            _ => return Err(perr(format!("unrecognized line {line:?}"))),
        }
    }
    let kind = kind.ok_or(GraphError::Parse {
        line: 0,
        msg: "missing kind header".into(),
    })?;
    let start = start.ok_or(GraphError::Parse {
        line: 0,
        msg: "missing start line".into(),
    })?;
    let num_states = arcs
        .iter()
        .flat_map(|a| [a.src, a.dst])
        .chain(finals.iter().map(|&(s, _)| s))
        .chain([start])
        .max()
        .unwrap_or(start)
        + 1;
    let mut final_weights = vec![LogWeight::ZERO; num_states];
    for (s, w) in finals {
        final_weights[s] = w;
    }
    Ok(SearchGraph::new(kind, num_states, start, arcs, final_weights))
}

pub fn write_mask(mut w: impl Write, mask: &FrameMask) -> Result<(), GraphError> {
    writeln!(w, "numunits {}", mask.num_units())?;
    for f in 0..mask.num_frames() {
        let ids: Vec<String> = mask
            .allowed_at(f)
            .iter()
            .map(|u| u.to_string())
            .collect();
        writeln!(w, "{f}: {}", ids.join(","))?;
    }
    Ok(())
}

pub fn read_mask(r: impl BufRead) -> Result<FrameMask, GraphError> {
    let mut num_units: Option<u32> = None;
    let mut frames: Vec<(usize, Vec<u32>)> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let perr = |msg: String| GraphError::Parse { line: lineno, msg };
        if let Some(rest) = line.strip_prefix("numunits ") {
            num_units = Some(
                rest.trim()
                    .parse()
                    .map_err(|e| perr(format!("bad numunits: {e}")))?,
            );
            continue;
        }
        let (frame, ids) = line
            .split_once(':')
            .ok_or_else(|| perr(format!("expected `frame: ids`, got {line:?}")))?;
        let frame: usize = frame
            .trim()
            .parse()
            .map_err(|e| perr(format!("bad frame index: {e}")))?;
        let ids: Vec<u32> = ids
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| perr(format!("bad unit id {s:?}: {e}")))
            })
            .collect::<Result<_, _>>()?;
        frames.push((frame, ids));
    }
    let num_units = num_units.ok_or(GraphError::Parse {
        line: 0,
        msg: "missing numunits header".into(),
    })?;
    let num_frames = frames.iter().map(|&(f, _)| f + 1).max().unwrap_or(0);
    let mut mask = FrameMask::new(num_frames, num_units);
    for (f, ids) in frames {
        for u in ids {
            mask.allow(f, u);
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{compile_denominator, estimate_phone_lm, PhoneSet};

    #[test]
    fn graph_round_trip() {
        let lm = estimate_phone_lm(&[vec![1, 2, 1]], 2, 2).unwrap();
        let ps = PhoneSet::new(2, 1).unwrap();
        let g = compile_denominator(&lm, &ps);
        let mut buf = Vec::new();
        write_graph(&mut buf, &g).unwrap();
        let back = read_graph(buf.as_slice()).unwrap();
        assert_eq!(back.kind(), g.kind());
        assert_eq!(back.num_states(), g.num_states());
        assert_eq!(back.start(), g.start());
        assert_eq!(back.arcs(), g.arcs());
        for s in 0..g.num_states() {
            assert_eq!(
                back.final_weight(s).value().to_bits(),
                g.final_weight(s).value().to_bits()
            );
        }
        let mut buf2 = Vec::new();
        write_graph(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn mask_round_trip() {
        let mut mask = FrameMask::new(3, 6);
        mask.allow(0, 1);
        mask.allow(0, 4);
        mask.allow(1, 6);
        mask.allow(2, 2);
        let mut buf = Vec::new();
        write_mask(&mut buf, &mask).unwrap();
        let back = read_mask(buf.as_slice()).unwrap();
        assert_eq!(back, mask);
    }
}
