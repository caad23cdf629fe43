//! Line-delimited dataset files.
//!
//! ```text
//! pessim-share-dataset v=1 kind=task task=0 flavor=random seed=7 episodes=2 count=12
//! 0,4,1,0.0000000000000000e0,5,0,-
//! ...
//! ```
//!
//! Records are `t,s,a,r,s_next,source_task,relabeled_for` with `-` for an
//! absent relabel target. Extra `key=value` header fields are preserved on
//! read and otherwise ignored.

use std::collections::BTreeMap;

use super::{Flavor, Part, RelabeledDataset, SharedDataset, TaskDataset, Transition};
use crate::error::{Error, Result};
use crate::fmt::{exact, header_field, parse, parse_header};

const MAGIC: &str = "pessim-share-dataset";
const VERSION: &str = "1";
const CORE_KEYS: &[&str] = &[
    "v", "kind", "task", "source", "target", "flavor", "seed", "episodes", "count", "parts",
];

/// Any dataset that can be written to or read from a file.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetFile {
    Task(TaskDataset),
    Relabeled(RelabeledDataset),
    Shared(SharedDataset),
}

impl DatasetFile {
    pub fn transitions(&self) -> &[Transition] {
        match self {
            DatasetFile::Task(d) => &d.transitions,
            DatasetFile::Relabeled(d) => &d.transitions,
            DatasetFile::Shared(d) => &d.transitions,
        }
    }

    /// Serializes with optional extra header fields (keys and values must not
    /// contain whitespace or `=`).
    pub fn to_record(&self, extra: &BTreeMap<String, String>) -> Result<String> {
        let mut header = format!("{MAGIC} v={VERSION}");
        match self {
            DatasetFile::Task(d) => header.push_str(&format!(
                " kind=task task={} flavor={} seed={} episodes={}",
                d.task, d.flavor, d.seed, d.episodes
            )),
            DatasetFile::Relabeled(d) => header.push_str(&format!(
                " kind=relabeled source={} target={} flavor={} seed={} episodes={}",
                d.source_task, d.target_task, d.flavor, d.seed, d.episodes
            )),
            DatasetFile::Shared(d) => {
                let parts = if d.parts.is_empty() {
                    "-".to_string()
                } else {
                    d.parts
                        .iter()
                        .map(|p| format!("{}:{}:{}:{}", p.source_task, p.flavor, p.seed, p.len))
                        .collect::<Vec<_>>()
                        .join(",")
                };
                header.push_str(&format!(" kind=shared task={} parts={parts}", d.main_task));
            }
        }
        header.push_str(&format!(" count={}", self.transitions().len()));
        for (k, v) in extra {
            let bad = |x: &str| x.is_empty() || x.contains(|c: char| c.is_whitespace() || c == '=');
            if bad(k) || bad(v) || CORE_KEYS.contains(&k.as_str()) {
                return Err(Error::invalid(format!("invalid header field {k}={v}")));
            }
            header.push_str(&format!(" {k}={v}"));
        }
        let mut out = header;
        out.push('\n');
        for tr in self.transitions() {
            let relabeled = tr.relabeled_for.map_or("-".to_string(), |x| x.to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                tr.t,
                tr.s,
                tr.a,
                exact(tr.r),
                tr.s_next,
                tr.source_task,
                relabeled
            ));
        }
        Ok(out)
    }
}

/// Parses a dataset file, returning it with any extra header fields.
pub fn read_dataset(text: &str) -> Result<(DatasetFile, BTreeMap<String, String>)> {
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::format(1, "empty dataset stream"))?;
    let header = parse_header(header_line, MAGIC, VERSION)?;
    let count: usize = header_field(&header, "count")?;

    let mut transitions = Vec::with_capacity(count);
    let mut last_line = 1;
    for (idx, raw) in lines.enumerate() {
        let line = idx + 2;
        last_line = line;
        if raw.trim().is_empty() {
            continue;
        }
        transitions.push(parse_transition(raw, line)?);
    }
    if transitions.len() != count {
        return Err(Error::format(
            last_line + 1,
            format!(
                "truncated stream: header declares {count} records, found {}",
                transitions.len()
            ),
        ));
    }

    let kind = header
        .get("kind")
        .ok_or_else(|| Error::format(1, "missing header field `kind`"))?
        .as_str();
    let file = match kind {
        "task" => {
            let task: usize = header_field(&header, "task")?;
            check_records(&transitions, |tr| tr.source_task == task && tr.relabeled_for.is_none())?;
            DatasetFile::Task(TaskDataset {
                task,
                flavor: flavor_field(&header)?,
                seed: header_field(&header, "seed")?,
                episodes: header_field(&header, "episodes")?,
                transitions,
            })
        }
        "relabeled" => {
            let source_task: usize = header_field(&header, "source")?;
            let target_task: usize = header_field(&header, "target")?;
            check_records(&transitions, |tr| {
                tr.source_task == source_task && tr.relabeled_for == Some(target_task)
            })?;
            DatasetFile::Relabeled(RelabeledDataset {
                source_task,
                target_task,
                flavor: flavor_field(&header)?,
                seed: header_field(&header, "seed")?,
                episodes: header_field(&header, "episodes")?,
                transitions,
            })
        }
        "shared" => {
            let main_task: usize = header_field(&header, "task")?;
            let parts = parse_parts(
                header
                    .get("parts")
                    .ok_or_else(|| Error::format(1, "missing header field `parts`"))?,
            )?;
            let total: usize = parts.iter().map(|p| p.len).sum();
            if total != transitions.len() {
                return Err(Error::format(1, "part lengths do not sum to count"));
            }
            check_records(&transitions, |tr| tr.reward_task() == main_task)?;
            DatasetFile::Shared(SharedDataset {
                main_task,
                parts,
                transitions,
            })
        }
        other => return Err(Error::format(1, format!("unknown dataset kind {other:?}"))),
    };
    let extra = header
        .into_iter()
        .filter(|(k, _)| !CORE_KEYS.contains(&k.as_str()))
        .collect();
    Ok((file, extra))
}

fn flavor_field(header: &BTreeMap<String, String>) -> Result<Flavor> {
    let raw = header
        .get("flavor")
        .ok_or_else(|| Error::format(1, "missing header field `flavor`"))?;
    raw.parse().map_err(|_| Error::format(1, format!("unknown flavor {raw:?}")))
}

fn parse_parts(raw: &str) -> Result<Vec<Part>> {
    if raw == "-" {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|p| {
            let f: Vec<&str> = p.split(':').collect();
            if f.len() != 4 {
                return Err(Error::format(1, format!("malformed part {p:?}")));
            }
            Ok(Part {
                source_task: parse(f[0], 1, "part task")?,
                flavor: f[1]
                    .parse()
                    .map_err(|_| Error::format(1, format!("unknown flavor {:?}", f[1])))?,
                seed: parse(f[2], 1, "part seed")?,
                len: parse(f[3], 1, "part length")?,
            })
        })
        .collect()
}

fn parse_transition(raw: &str, line: usize) -> Result<Transition> {
    let f: Vec<&str> = raw.split(',').collect();
    if f.len() != 7 {
        return Err(Error::format(
            line,
            format!("expected 7 fields, found {}", f.len()),
        ));
    }
    let r: f64 = parse(f[3], line, "reward")?;
    if !r.is_finite() {
        return Err(Error::format(line, "non-finite reward"));
    }
    Ok(Transition {
        t: parse(f[0], line, "timestep")?,
        s: parse(f[1], line, "state")?,
        a: parse(f[2], line, "action")?,
        r,
        s_next: parse(f[4], line, "next state")?,
        source_task: parse(f[5], line, "source task")?,
        relabeled_for: match f[6].trim() {
            "-" => None,
            x => Some(parse(x, line, "relabel target")?),
        },
    })
}

fn check_records(transitions: &[Transition], ok: impl Fn(&Transition) -> bool) -> Result<()> {
    match transitions.iter().position(|tr| !ok(tr)) {
        Some(i) => Err(Error::format(i + 2, "record provenance does not match header")),
        None => Ok(()),
    }
}
