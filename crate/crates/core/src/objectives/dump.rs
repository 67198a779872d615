//! Optional per-document dump of plans and label matrices, line-delimited
//! JSON under a `bivl-labels-v1` header, for offline inspection.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BtiaPlan, MvlmPlan, PretrainPlan, RwtpLabels, TipaPlan};
use crate::error::CorpusIoError;

pub const LABELS_HEADER: &str = "bivl-labels-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub doc_id: String,
    pub mvlm: MvlmPlan,
    pub tipa: TipaPlan,
    pub rwtp: RwtpLabels,
    pub btia: BtiaPlan,
}

impl LabelRecord {
    pub fn from_plan(doc_id: &str, plan: &PretrainPlan) -> Self {
        LabelRecord {
            doc_id: doc_id.to_string(),
            mvlm: plan.mvlm.clone(),
            tipa: plan.tipa.clone(),
            rwtp: plan.rwtp.clone(),
            btia: plan.btia.clone(),
        }
    }
}

pub fn save_labels(path: &Path, records: &[LabelRecord]) -> Result<(), CorpusIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{LABELS_HEADER}")?;
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| CorpusIoError::Parse { line: 0, detail: e.to_string() })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<Vec<LabelRecord>, CorpusIoError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| CorpusIoError::BadHeader { expected: LABELS_HEADER.into(), found: "<empty file>".into() })?;
    if header != LABELS_HEADER {
        return Err(CorpusIoError::BadHeader { expected: LABELS_HEADER.into(), found: header });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CorpusIoError::Parse { line: i + 2, detail: e.to_string() })?,
        );
    }
    Ok(out)
}
