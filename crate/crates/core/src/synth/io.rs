//! Corpus serialization: UTF-8, line-delimited, one JSON document per line
//! under a `bivl-corpus-v1` header. Image data is base64 of little-endian
//! 32-bit floats. `save -> load -> save` is byte-identical.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{validate_document, Image, SyntheticDocument, TextBlock};
use crate::error::CorpusIoError;

pub const CORPUS_HEADER: &str = "bivl-corpus-v1";

#[derive(Serialize, Deserialize)]
struct DocRecord {
    doc_id: String,
    doc_class: u32,
    blocks: Vec<TextBlock>,
    image: ImageRecord,
}

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    height: usize,
    width: usize,
    data: String,
}

fn encode_image(image: &Image) -> ImageRecord {
    let mut bytes = Vec::with_capacity(image.data.len() * 4);
    for &v in &image.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    ImageRecord { height: image.height, width: image.width, data: B64.encode(bytes) }
}

fn decode_image(rec: &ImageRecord, line: usize) -> Result<Image, CorpusIoError> {
    let bytes = B64.decode(&rec.data).map_err(|e| CorpusIoError::Parse {
        line,
        detail: format!("bad base64 image data: {e}"),
    })?;
    if bytes.len() != rec.height * rec.width * 4 {
        return Err(CorpusIoError::Validation {
            line,
            detail: format!(
                "image byte length {} does not match {}x{} f32 grid",
                bytes.len(),
                rec.height,
                rec.width
            ),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Image { height: rec.height, width: rec.width, data })
}

pub fn save_corpus(path: &Path, corpus: &[SyntheticDocument]) -> Result<(), CorpusIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{CORPUS_HEADER}")?;
    for doc in corpus {
        let rec = DocRecord {
            doc_id: doc.doc_id.clone(),
            doc_class: doc.doc_class,
            blocks: doc.blocks.clone(),
            image: encode_image(&doc.image),
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| CorpusIoError::Parse { line: 0, detail: e.to_string() })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<SyntheticDocument>, CorpusIoError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| CorpusIoError::BadHeader { expected: CORPUS_HEADER.into(), found: "<empty file>".into() })?;
    if header != CORPUS_HEADER {
        return Err(CorpusIoError::BadHeader { expected: CORPUS_HEADER.into(), found: header });
    }
    let mut corpus = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2; // 1-based, after the header
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocRecord = serde_json::from_str(&line)
            .map_err(|e| CorpusIoError::Parse { line: line_no, detail: e.to_string() })?;
        let doc = SyntheticDocument {
            doc_id: rec.doc_id,
            doc_class: rec.doc_class,
            blocks: rec.blocks,
            image: decode_image(&rec.image, line_no)?,
        };
        validate_document(&doc).map_err(|e| CorpusIoError::Validation { line: line_no, detail: e.to_string() })?;
        corpus.push(doc);
    }
    Ok(corpus)
}
