//! JSON-lines serialization of communication traces.
//!
//! One object per message:
//! `{"step":0,"src":0,"dst":1,"tag":"KV_FWD","layer":0,"head":0,"elements":64,"bytes":512}`

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use lasp_core::comm::{CommRecord, MessageTag};
use serde::{Deserialize, Serialize};

use crate::SimError;

#[derive(Serialize, Deserialize)]
struct TraceLine {
    step: usize,
    src: usize,
    dst: usize,
    tag: String,
    layer: usize,
    head: usize,
    elements: usize,
    bytes: usize,
}

pub fn write_trace(path: &Path, records: &[CommRecord]) -> Result<(), SimError> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        let line = TraceLine {
            step: r.step,
            src: r.src,
            dst: r.dst,
            tag: r.tag.as_str().to_string(),
            layer: r.layer,
            head: r.head,
            elements: r.elements,
            bytes: r.bytes(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<CommRecord>, SimError> {
    let input = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(&line).map_err(|e| SimError::Format {
            detail: format!("trace line {}: {e}", idx + 1),
        })?;
        let tag = MessageTag::parse(&parsed.tag).map_err(|_| SimError::Format {
            detail: format!("trace line {}: unknown tag {:?}", idx + 1, parsed.tag),
        })?;
        if parsed.bytes != parsed.elements * 8 {
            return Err(SimError::Format {
                detail: format!(
                    "trace line {}: bytes {} != 8 * elements {}",
                    idx + 1,
                    parsed.bytes,
                    parsed.elements
                ),
            });
        }
        records.push(CommRecord {
            step: parsed.step,
            src: parsed.src,
            dst: parsed.dst,
            tag,
            layer: parsed.layer,
            head: parsed.head,
            elements: parsed.elements,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<CommRecord> {
        vec![
            CommRecord {
                step: 0,
                src: 0,
                dst: 1,
                tag: MessageTag::KvFwd,
                layer: 0,
                head: 1,
                elements: 64,
            },
            CommRecord {
                step: 1,
                src: 1,
                dst: 0,
                tag: MessageTag::DkvBwd,
                layer: 0,
                head: 1,
                elements: 64,
            },
        ]
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        write_trace(&path, &sample()).unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(back, sample());
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"KV_FWD\""));
        assert!(text.lines().next().unwrap().contains("\"bytes\":512"));
    }

    #[test]
    fn rejects_inconsistent_byte_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        std::fs::write(
            &path,
            "{\"step\":0,\"src\":0,\"dst\":1,\"tag\":\"KV_FWD\",\"layer\":0,\"head\":0,\"elements\":4,\"bytes\":33}\n",
        )
        .unwrap();
        assert!(matches!(read_trace(&path), Err(SimError::Format { .. })));
    }
}
