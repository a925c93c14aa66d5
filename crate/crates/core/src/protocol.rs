//! JSON-lines message protocol shared by the federated onset and malicious
//! node servers. One object per line, discriminated by `type`.
//!
//! Broadcasts carry `cid` 0 (the server id).

use std::collections::{BTreeSet, VecDeque};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::fed_mnd::ListMode;
use crate::gbdt::LocalEnsemble;
use crate::head::HeadWeights;
use crate::mnd::SuspicionReport;
use crate::{ClientId, Error, Result, VehicleId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    TreesUpload {
        cid: ClientId,
        round: u32,
        model_version: u64,
        ensemble: LocalEnsemble,
    },
    GlobalEnsemble {
        cid: ClientId,
        round: u32,
        model_version: u64,
        ensembles: Vec<LocalEnsemble>,
    },
    WeightsBroadcast {
        cid: ClientId,
        round: u32,
        model_version: u64,
        weights: HeadWeights,
    },
    WeightsUpdate {
        cid: ClientId,
        round: u32,
        model_version: u64,
        weights: HeadWeights,
        sample_count: u64,
    },
    OnsetReport {
        cid: ClientId,
        round: u32,
        model_version: u64,
        time_s: f64,
    },
    OnsetConfirmed {
        cid: ClientId,
        round: u32,
        model_version: u64,
        time_s: f64,
        reporters: BTreeSet<ClientId>,
    },
    SuspicionReport {
        cid: ClientId,
        round: u32,
        model_version: u64,
        report: SuspicionReport,
    },
    MaliciousList {
        version: u64,
        ids: BTreeSet<VehicleId>,
        mode: ListMode,
        issued_at_s: f64,
    },
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::TreesUpload { .. } => "TREES_UPLOAD",
            Message::GlobalEnsemble { .. } => "GLOBAL_ENSEMBLE",
            Message::WeightsBroadcast { .. } => "WEIGHTS_BROADCAST",
            Message::WeightsUpdate { .. } => "WEIGHTS_UPDATE",
            Message::OnsetReport { .. } => "ONSET_REPORT",
            Message::OnsetConfirmed { .. } => "ONSET_CONFIRMED",
            Message::SuspicionReport { .. } => "SUSPICION_REPORT",
            Message::MaliciousList { .. } => "MALICIOUS_LIST",
        }
    }

    /// Encode as a single line (no trailing newline).
    pub fn to_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_line(line: &str) -> Result<Message> {
        Ok(serde_json::from_str(line)?)
    }
}

pub fn write_jsonl<W: Write>(mut out: W, messages: &[Message]) -> Result<()> {
    for m in messages {
        serde_json::to_writer(&mut out, m)?;
        out.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

/// Read messages, skipping blank lines. Errors carry the 1-based line number.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Message>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let msg = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: "<jsonl>".into(),
            line: i as u64 + 1,
            message: e.to_string(),
        })?;
        out.push(msg);
    }
    Ok(out)
}

/// In-process transport. Messages travel as encoded lines so the simulator
/// exercises the same byte format as files and HTTP bodies.
#[derive(Debug, Default)]
pub struct LineQueue {
    lines: VecDeque<String>,
    bytes: u64,
}

impl LineQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&mut self, message: &Message) -> Result<()> {
        let line = message.to_line()?;
        self.bytes += line.len() as u64 + 1;
        self.lines.push_back(line);
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Option<Message>> {
        self.lines.pop_front().map(|l| Message::from_line(&l)).transpose()
    }

    pub fn drain(&mut self) -> Result<Vec<Message>> {
        let mut out = Vec::with_capacity(self.lines.len());
        while let Some(m) = self.recv()? {
            out.push(m);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Total bytes ever sent through the queue.
    pub fn bytes_sent(&self) -> u64 {
        self.bytes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::HeadWeights;

    #[test]
    fn type_tags_on_the_wire() {
        let msg = Message::OnsetReport {
            cid: VehicleId(3),
            round: 9,
            model_version: 2,
            time_s: 600.0,
        };
        let line = msg.to_line().unwrap();
        assert!(line.starts_with("{\"type\":\"ONSET_REPORT\""), "{line}");
        assert_eq!(Message::from_line(&line).unwrap(), msg);

        let list = Message::MaliciousList {
            version: 4,
            ids: BTreeSet::from([VehicleId(7), VehicleId(2)]),
            mode: ListMode::Stateful,
            issued_at_s: 610.0,
        };
        let v: serde_json::Value = serde_json::from_str(&list.to_line().unwrap()).unwrap();
        assert_eq!(v["type"], "MALICIOUS_LIST");
        assert_eq!(v["ids"], serde_json::json!([2, 7]));
        assert_eq!(v["mode"], "stateful");
    }

    #[test]
    fn queue_and_file_share_bytes() {
        let msgs = vec![
            Message::WeightsBroadcast {
                cid: VehicleId::SERVER,
                round: 1,
                model_version: 1,
                weights: HeadWeights::zeros(2, 2, 1),
            },
            Message::OnsetReport {
                cid: VehicleId(1),
                round: 1,
                model_version: 1,
                time_s: 0.1 + 0.2,
            },
        ];
        let mut q = LineQueue::new();
        for m in &msgs {
            q.send(m).unwrap();
        }
        assert_eq!(q.drain().unwrap(), msgs);

        let mut buf = Vec::new();
        write_jsonl(&mut buf, &msgs).unwrap();
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), msgs);
        assert!(matches!(read_jsonl(&b"{}\n"[..]), Err(Error::Parse { line: 1, .. })));
    }
}
