//! Execution trace events and their line format.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::policy::{PartitionLabel, ProtectionKey, RightsVector, StatementId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceEvent {
    Switch {
        role: String,
        stmt: StatementId,
        from: PartitionLabel,
        to: PartitionLabel,
        before: RightsVector,
        after: RightsVector,
    },
    Call {
        function: String,
        partition: PartitionLabel,
        indirect: bool,
        stmt: StatementId,
    },
    Return {
        function: String,
        partition: PartitionLabel,
    },
    Load {
        addr: u64,
        size: u64,
        key: ProtectionKey,
        stmt: StatementId,
    },
    Store {
        addr: u64,
        size: u64,
        key: ProtectionKey,
        stmt: StatementId,
    },
    Alloc {
        addr: u64,
        size: u64,
        key: ProtectionKey,
        stmt: StatementId,
    },
    Free {
        addr: u64,
        size: u64,
        key: ProtectionKey,
        stmt: StatementId,
    },
    Register {
        function: String,
        vector: RightsVector,
    },
    Fault {
        kind: String,
        addr: u64,
        stmt: StatementId,
    },
}

impl TraceEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            TraceEvent::Switch { .. } => "switch",
            TraceEvent::Call { .. } => "call",
            TraceEvent::Return { .. } => "return",
            TraceEvent::Load { .. } => "load",
            TraceEvent::Store { .. } => "store",
            TraceEvent::Alloc { .. } => "alloc",
            TraceEvent::Free { .. } => "free",
            TraceEvent::Register { .. } => "register",
            TraceEvent::Fault { .. } => "fault",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub event: TraceEvent,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.seq, self.event.kind())?;
        match &self.event {
            TraceEvent::Switch { role, stmt, from, to, before, after } => {
                write!(f, " role={role} stmt={stmt} from={from} to={to} before={before} after={after}")
            }
            TraceEvent::Call { function, partition, indirect, stmt } => {
                write!(f, " fn={function} partition={partition} indirect={indirect} stmt={stmt}")
            }
            TraceEvent::Return { function, partition } => write!(f, " fn={function} partition={partition}"),
            TraceEvent::Load { addr, size, key, stmt }
            | TraceEvent::Store { addr, size, key, stmt }
            | TraceEvent::Alloc { addr, size, key, stmt }
            | TraceEvent::Free { addr, size, key, stmt } => {
                write!(f, " addr={addr:#x} size={size} key={key} stmt={stmt}")
            }
            TraceEvent::Register { function, vector } => write!(f, " fn={function} vector={vector}"),
            TraceEvent::Fault { kind, addr, stmt } => write!(f, " fault={kind} addr={addr:#x} stmt={stmt}"),
        }
    }
}

pub fn format_trace(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("trace line {line}: {message}")]
pub struct TraceParseError {
    pub line: usize,
    pub message: String,
}

struct Fields<'a> {
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn get(&self, name: &str) -> Result<&'a str, String> {
        self.pairs.iter().find(|(k, _)| *k == name).map(|(_, v)| *v).ok_or_else(|| format!("missing field `{name}`"))
    }

    fn parse<T: FromStr>(&self, name: &str) -> Result<T, String> {
        let raw = self.get(name)?;
        raw.parse().map_err(|_| format!("bad value `{raw}` for `{name}`"))
    }

    fn hex(&self, name: &str) -> Result<u64, String> {
        let raw = self.get(name)?;
        raw.strip_prefix("0x")
            .and_then(|h| u64::from_str_radix(h, 16).ok())
            .ok_or_else(|| format!("bad address `{raw}`"))
    }

    fn label(&self, name: &str) -> Result<PartitionLabel, String> {
        self.parse::<u32>(name).map(PartitionLabel)
    }

    fn stmt(&self) -> Result<StatementId, String> {
        self.parse::<u32>("stmt").map(StatementId)
    }

    fn key(&self) -> Result<ProtectionKey, String> {
        self.parse::<u8>("key").map(ProtectionKey)
    }
}

fn parse_line(line: &str) -> Result<TraceRecord, String> {
    let mut parts = line.split_whitespace();
    let seq: u64 = parts.next().ok_or("empty line")?.parse().map_err(|_| "bad sequence number")?;
    let kind = parts.next().ok_or("missing event kind")?;
    let mut pairs = Vec::new();
    for p in parts {
        pairs.push(p.split_once('=').ok_or_else(|| format!("field `{p}` has no value"))?);
    }
    let f = Fields { pairs };
    let event = match kind {
        "switch" => TraceEvent::Switch {
            role: f.get("role")?.to_string(),
            stmt: f.stmt()?,
            from: f.label("from")?,
            to: f.label("to")?,
            before: f.get("before")?.parse()?,
            after: f.get("after")?.parse()?,
        },
        "call" => TraceEvent::Call {
            function: f.get("fn")?.to_string(),
            partition: f.label("partition")?,
            indirect: f.parse("indirect")?,
            stmt: f.stmt()?,
        },
        "return" => TraceEvent::Return { function: f.get("fn")?.to_string(), partition: f.label("partition")? },
        "load" | "store" | "alloc" | "free" => {
            let (addr, size, key, stmt) = (f.hex("addr")?, f.parse("size")?, f.key()?, f.stmt()?);
            match kind {
                "load" => TraceEvent::Load { addr, size, key, stmt },
                "store" => TraceEvent::Store { addr, size, key, stmt },
                "alloc" => TraceEvent::Alloc { addr, size, key, stmt },
                _ => TraceEvent::Free { addr, size, key, stmt },
            }
        }
        "register" => TraceEvent::Register { function: f.get("fn")?.to_string(), vector: f.get("vector")?.parse()? },
        "fault" => TraceEvent::Fault { kind: f.get("fault")?.to_string(), addr: f.hex("addr")?, stmt: f.stmt()? },
        other => return Err(format!("unknown event kind `{other}`")),
    };
    Ok(TraceRecord { seq, event })
}

/// Parse a trace file. Sequence numbers must strictly increase.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, TraceParseError> {
    let mut out: Vec<TraceRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_line(line).map_err(|message| TraceParseError { line: i + 1, message })?;
        if out.last().is_some_and(|prev| prev.seq >= record.seq) {
            return Err(TraceParseError { line: i + 1, message: "sequence numbers must increase".into() });
        }
        out.push(record);
    }
    Ok(out)
}
