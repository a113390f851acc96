//! JSON-lines token files and vocabulary lists.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a token-sequence file: `{"ids": [...]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdsLine {
    pub ids: Vec<u32>,
}

/// One line of a prompt-pair file: `{"pos": [...], "neg": [...]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairLine {
    pub pos: Vec<u32>,
    pub neg: Vec<u32>,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

pub fn read_sequences(path: &Path) -> Result<Vec<Vec<u32>>> {
    Ok(read_jsonl::<IdsLine>(path)?.into_iter().map(|l| l.ids).collect())
}

pub fn write_sequences(path: &Path, seqs: &[Vec<u32>]) -> Result<()> {
    let lines: Vec<IdsLine> = seqs.iter().map(|s| IdsLine { ids: s.clone() }).collect();
    write_jsonl(path, &lines)
}

/// Vocabulary file: a JSON array of token strings, index = token id.
pub fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        write_sequences(&p, &[vec![1, 2], vec![3]]).unwrap();
        assert_eq!(read_sequences(&p).unwrap(), vec![vec![1, 2], vec![3]]);
        fs::write(&p, "{\"ids\": [1]}\n\n{\"ids\": \"x\"}\n").unwrap();
        match read_sequences(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
