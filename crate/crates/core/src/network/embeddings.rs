//! Embedding CSV: `id,label,e0,...,e{D-1}`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: Label,
    pub values: Vec<f32>,
}

pub fn format_embeddings(records: &[EmbeddingRecord]) -> Result<String> {
    let dim = records.first().map_or(0, |r| r.values.len());
    let mut out = String::from("id,label");
    for i in 0..dim {
        write!(out, ",e{i}").expect("string write");
    }
    out.push('\n');
    for r in records {
        if r.values.len() != dim {
            return Err(Error::dim(format!(
                "record `{}` has {} values, expected {dim}",
                r.id,
                r.values.len()
            )));
        }
        if r.id.contains([',', '\n', '\r']) {
            return Err(Error::Parameter(format!(
                "id `{}` contains a separator",
                r.id
            )));
        }
        out.push_str(&r.id);
        out.push(',');
        out.push_str(r.label.as_str());
        for v in &r.values {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(records: &[EmbeddingRecord], path: &Path) -> Result<()> {
    let text = format_embeddings(records)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_embeddings(text: &str) -> Result<Vec<EmbeddingRecord>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 || cols[0] != "id" || cols[1] != "label" {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with `id,label`".into(),
        });
    }
    for (i, c) in cols[2..].iter().enumerate() {
        if *c != format!("e{i}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("column {} should be `e{i}`, found `{c}`", i + 2),
            });
        }
    }
    let dim = cols.len() - 2;
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 2 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} fields, found {}", dim + 2, fields.len()),
            });
        }
        let id = fields[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate id `{id}`"),
            });
        }
        let label = Label::parse(fields[1]).ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("unknown label `{}`", fields[1]),
        })?;
        let values = fields[2..]
            .iter()
            .enumerate()
            .map(|(i, f)| match f.parse::<f32>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse {
                    line: line_no,
                    message: format!("field e{i} `{f}` is not a finite number"),
                }),
            })
            .collect::<Result<Vec<f32>>>()?;
        records.push(EmbeddingRecord { id, label, values });
    }
    Ok(records)
}

pub fn import_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text)
}
