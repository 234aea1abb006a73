// SPDX-License-Identifier: MIT OR Apache-2.0

//! One example per line.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use mechprobe_core::taskgen::{Dataset, Example, Label, ReasoningTree, TaskKind};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeRecord {
    nodes: Vec<u32>,
    heights: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: u64,
    task: TaskKind,
    tokens: Vec<u32>,
    statement_spans: Vec<[u32; 2]>,
    question_span: Option<[u32; 2]>,
    answer: u32,
    label: Option<Label>,
    k: Option<u32>,
    tree: TreeRecord,
}

impl From<&Example> for Record {
    fn from(ex: &Example) -> Self {
        Record {
            id: ex.id,
            task: ex.task,
            tokens: ex.tokens.clone(),
            statement_spans: ex.statement_spans.iter().map(|&(a, b)| [a, b]).collect(),
            question_span: ex.question_span.map(|(a, b)| [a, b]),
            answer: ex.answer,
            label: ex.label,
            k: ex.k,
            tree: TreeRecord {
                nodes: ex.tree.node_indices.clone(),
                heights: ex.tree.heights.clone(),
            },
        }
    }
}

impl Record {
    fn into_example(self) -> mechprobe_core::Result<Example> {
        let n_tokens = self.tokens.len() as u32;
        let spans: Vec<(u32, u32)> = self.statement_spans.iter().map(|s| (s[0], s[1])).collect();
        let question = self.question_span.map(|s| (s[0], s[1]));
        for &(a, b) in spans.iter().chain(&question) {
            if a >= b || b > n_tokens {
                return Err(mechprobe_core::Error::Data(format!(
                    "span [{a}, {b}) outside {n_tokens} tokens"
                )));
            }
        }
        if let Some(&n) = self.tree.nodes.iter().find(|&&n| n as usize >= spans.len()) {
            return Err(mechprobe_core::Error::Data(format!(
                "tree node {n} but only {} statements",
                spans.len()
            )));
        }
        Ok(Example {
            id: self.id,
            task: self.task,
            tokens: self.tokens,
            statement_spans: spans,
            question_span: question,
            answer: self.answer,
            tree: ReasoningTree::new(self.tree.nodes, self.tree.heights)?,
            k: self.k,
            label: self.label,
        })
    }
}

pub fn write_dataset_to<W: Write>(ds: &Dataset, mut w: W) -> std::io::Result<()> {
    for ex in ds.iter() {
        serde_json::to_writer(&mut w, &Record::from(ex))?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Parse a dataset; `path` only labels error messages.
pub fn read_dataset_from<R: Read>(r: R, path: &Path) -> Result<Dataset> {
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let at = |message: String| Error::Line {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        examples.push(rec.into_example().map_err(|e| at(e.to_string()))?);
    }
    Ok(Dataset::new(examples))
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset_to(ds, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset_from(f, path)
}
