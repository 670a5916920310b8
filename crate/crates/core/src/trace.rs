//! Routing traces and their text file format.
//!
//! ```text
//! #trace	n_layers=2	num_experts=8	top_k=2
//! #doc	0	wiki
//! 0	0	0	1	5	0.6224593312018546
//! 0	0	0	2	1	0.3775406687981454
//! ...
//! ```
//!
//! The first line is the header. Each document starts with a `#doc` line
//! carrying its id and an optional domain label; the records that follow are
//! tab-separated `doc_id token_index layer rank expert_id weight`, ordered by
//! token, then layer, then rank. Weights use Rust's shortest round-trip float
//! formatting, so parse followed by write reproduces the input byte for byte.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::moe::{ExpertChoice, GateDecision};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceHeader {
    pub n_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
}

/// Routing decisions for one document, indexed `[layer][token]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceDocument {
    pub doc_id: u64,
    pub label: Option<String>,
    pub layers: Vec<Vec<GateDecision>>,
}

impl TraceDocument {
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub header: TraceHeader,
    pub documents: Vec<TraceDocument>,
}

impl RoutingTrace {
    pub fn new(header: TraceHeader) -> Self {
        Self {
            header,
            documents: Vec::new(),
        }
    }

    pub fn push(&mut self, doc: TraceDocument) -> Result<()> {
        self.check_document(&doc)?;
        self.documents.push(doc);
        Ok(())
    }

    fn check_document(&self, doc: &TraceDocument) -> Result<()> {
        let h = self.header;
        if doc.layers.len() != h.n_layers {
            return Err(Error::Input(format!(
                "document {} has {} layers, header says {}",
                doc.doc_id,
                doc.layers.len(),
                h.n_layers
            )));
        }
        let tokens = doc.len();
        for (l, layer) in doc.layers.iter().enumerate() {
            if layer.len() != tokens {
                return Err(Error::Input(format!(
                    "document {} layer {l} has {} tokens, expected {tokens}",
                    doc.doc_id,
                    layer.len()
                )));
            }
            for (t, d) in layer.iter().enumerate() {
                if d.k() != h.top_k {
                    return Err(Error::Input(format!(
                        "document {} token {t} layer {l}: {} choices, expected {}",
                        doc.doc_id,
                        d.k(),
                        h.top_k
                    )));
                }
                for (i, c) in d.choices.iter().enumerate() {
                    if c.expert >= h.num_experts {
                        return Err(Error::Input(format!(
                            "expert id {} out of range for {} experts",
                            c.expert, h.num_experts
                        )));
                    }
                    if d.choices[..i].iter().any(|p| p.expert == c.expert) {
                        return Err(Error::Input(format!(
                            "document {} token {t} layer {l}: expert {} chosen twice",
                            doc.doc_id, c.expert
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> usize {
        self.documents.iter().map(TraceDocument::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_tokens() == 0
    }

    /// Decisions of one layer across all documents, in token order.
    pub fn layer_stream(&self, layer: usize) -> impl Iterator<Item = &GateDecision> + '_ {
        self.documents.iter().flat_map(move |d| d.layers[layer].iter())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let h = self.header;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "#trace\tn_layers={}\tnum_experts={}\ttop_k={}",
            h.n_layers, h.num_experts, h.top_k
        );
        for doc in &self.documents {
            match &doc.label {
                Some(label) => {
                    let _ = writeln!(s, "#doc\t{}\t{label}", doc.doc_id);
                }
                None => {
                    let _ = writeln!(s, "#doc\t{}", doc.doc_id);
                }
            }
            for t in 0..doc.len() {
                for (l, layer) in doc.layers.iter().enumerate() {
                    for (r, c) in layer[t].choices.iter().enumerate() {
                        let _ = writeln!(
                            s,
                            "{}\t{t}\t{l}\t{}\t{}\t{:?}",
                            doc.doc_id,
                            r + 1,
                            c.expert,
                            c.weight
                        );
                    }
                }
            }
        }
        s
    }

    /// Parses the text format. A file with no content at all is reported as [`Error::NoData`].
    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate().filter_map(|(i, l)| match l {
            Ok(l) if l.trim().is_empty() => None,
            other => Some((i + 1, other)),
        });
        let (lineno, first) = match lines.next() {
            None => return Err(Error::NoData("trace file is empty".into())),
            Some((n, l)) => (n, l?),
        };
        let header = parse_header(&first).map_err(|e| at(lineno, e))?;
        let mut trace = RoutingTrace::new(header);
        let mut current: Option<TraceDocument> = None;
        for (lineno, line) in lines {
            let line = line?;
            if let Some(rest) = line.strip_prefix("#doc\t") {
                if let Some(doc) = current.take() {
                    trace.push(doc).map_err(|e| at(lineno, e.to_string()))?;
                }
                let mut parts = rest.splitn(2, '\t');
                let doc_id = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| at(lineno, "bad document id".into()))?;
                let label = parts.next().map(str::to_string);
                current = Some(TraceDocument {
                    doc_id,
                    label,
                    layers: vec![Vec::new(); header.n_layers],
                });
                continue;
            }
            let doc = current
                .as_mut()
                .ok_or_else(|| at(lineno, "record before any #doc line".into()))?;
            let rec = parse_record(&line).map_err(|e| at(lineno, e))?;
            if rec.doc_id != doc.doc_id {
                return Err(at(lineno, format!("record for document {} inside document {}", rec.doc_id, doc.doc_id)));
            }
            if rec.layer >= header.n_layers {
                return Err(at(lineno, format!("layer {} out of range", rec.layer)));
            }
            let layer = &mut doc.layers[rec.layer];
            if rec.rank == 1 {
                if rec.token != layer.len() {
                    return Err(at(lineno, format!("token index {} is not contiguous", rec.token)));
                }
                layer.push(GateDecision::default());
            } else if rec.token + 1 != layer.len() || layer[rec.token].k() + 1 != rec.rank {
                return Err(at(lineno, format!("rank {} out of order", rec.rank)));
            }
            layer[rec.token].choices.push(ExpertChoice {
                expert: rec.expert,
                weight: rec.weight,
            });
        }
        if let Some(doc) = current.take() {
            trace.push(doc)?;
        }
        Ok(trace)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

struct Record {
    doc_id: u64,
    token: usize,
    layer: usize,
    rank: usize,
    expert: usize,
    weight: f64,
}

fn at(lineno: usize, msg: String) -> Error {
    Error::Format(format!("trace line {lineno}: {msg}"))
}

fn parse_header(line: &str) -> std::result::Result<TraceHeader, String> {
    let mut fields = line.split('\t');
    if fields.next() != Some("#trace") {
        return Err("missing #trace header".into());
    }
    let mut get = |name: &str| -> std::result::Result<usize, String> {
        let f = fields.next().ok_or_else(|| format!("header lacks {name}"))?;
        f.strip_prefix(name)
            .and_then(|v| v.strip_prefix('='))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("bad header field {f:?}"))
    };
    let header = TraceHeader {
        n_layers: get("n_layers")?,
        num_experts: get("num_experts")?,
        top_k: get("top_k")?,
    };
    if header.n_layers == 0 || header.top_k == 0 || header.top_k > header.num_experts {
        return Err("inconsistent header".into());
    }
    Ok(header)
}

fn parse_record(line: &str) -> std::result::Result<Record, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 6 {
        return Err(format!("expected 6 fields, found {}", f.len()));
    }
    let num = |i: usize| f[i].parse::<usize>().map_err(|_| format!("bad integer {:?}", f[i]));
    let weight: f64 = f[5].parse().map_err(|_| format!("bad weight {:?}", f[5]))?;
    if !(weight.is_finite() && weight >= 0.0 && weight <= 1.0) {
        return Err(format!("weight {weight} outside [0, 1]"));
    }
    Ok(Record {
        doc_id: f[0].parse().map_err(|_| format!("bad document id {:?}", f[0]))?,
        token: num(1)?,
        layer: num(2)?,
        rank: num(3)?,
        expert: num(4)?,
        weight,
    })
}
