//! On-disk span files and the dataset manifest.
//!
//! A span file is plain text:
//!
//! ```text
//! #tds-span v1
//! #schema <16 hex digits>
//! #span <index>
//! #records <count>
//! #columns user item label.0 stat.<name> ... seq.<name>.len seq.<name>.0 ... cate.<name> ...
//! <one fixed-width, space-delimited row per record>
//! ```
//!
//! Integers are right-aligned in 10 characters, floats in 25 characters using
//! Rust's shortest round-trip representation, so reading back is bit-exact.
//! The manifest is a `key=value` text file binding span files into a sequence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use super::schema::{parse, FeatureSchema};
use super::{Record, SpanDataset};
use crate::error::{Error, Result};

const SPAN_MAGIC: &str = "#tds-span v1";
const INT_WIDTH: usize = 10;
const FLOAT_WIDTH: usize = 25;

pub fn span_columns(schema: &FeatureSchema) -> Vec<String> {
    let mut cols = vec!["user".to_owned(), "item".to_owned()];
    cols.extend((0..schema.n_tasks).map(|t| format!("label.{t}")));
    cols.extend(schema.stat.iter().map(|f| format!("stat.{}", f.name)));
    for f in &schema.seq {
        cols.push(format!("seq.{}.len", f.name));
        cols.extend((0..f.max_len).map(|k| format!("seq.{}.{k}", f.name)));
    }
    cols.extend(schema.cate.iter().map(|f| format!("cate.{}", f.name)));
    cols
}

/// Checks a record against the schema bounds.
pub fn validate_record(schema: &FeatureSchema, r: &Record) -> Result<()> {
    let bad = |msg: String| Err(Error::Format(msg));
    if r.labels.len() != schema.n_tasks || r.labels.iter().any(|&l| l > 1) {
        return bad(format!("labels {:?} do not fit {} tasks", r.labels, schema.n_tasks));
    }
    if r.stat.len() != schema.stat.len()
        || r.seq.len() != schema.seq.len()
        || r.cate.len() != schema.cate.len()
    {
        return bad("feature count does not match schema".into());
    }
    for (ids, f) in r.seq.iter().zip(&schema.seq) {
        if ids.len() > f.max_len || ids.iter().any(|&i| i == 0 || i >= f.vocab_size) {
            return bad(format!("sequence {} out of bounds", f.name));
        }
    }
    for (&id, f) in r.cate.iter().zip(&schema.cate) {
        if id >= f.vocab_size {
            return bad(format!("category {id} out of range for {}", f.name));
        }
    }
    Ok(())
}

pub fn write_span<W: Write>(schema: &FeatureSchema, span: &SpanDataset, w: W) -> Result<()> {
    let mut w = std::io::BufWriter::new(w);
    let io = |e| Error::io(format!("writing span {}", span.span), e);
    writeln!(w, "{SPAN_MAGIC}").map_err(io)?;
    writeln!(w, "#schema {:016x}", schema.hash()).map_err(io)?;
    writeln!(w, "#span {}", span.span).map_err(io)?;
    writeln!(w, "#records {}", span.records.len()).map_err(io)?;
    writeln!(w, "#columns {}", span_columns(schema).join(" ")).map_err(io)?;
    let mut line = String::new();
    for r in &span.records {
        validate_record(schema, r)?;
        line.clear();
        push_int(&mut line, r.user);
        push_int(&mut line, r.item);
        for &l in &r.labels {
            push_int(&mut line, u32::from(l));
        }
        for &x in &r.stat {
            if !line.is_empty() {
                line.push(' ');
            }
            let _ = write!(line, "{:>FLOAT_WIDTH$}", format!("{x:e}"));
        }
        for (ids, f) in r.seq.iter().zip(&schema.seq) {
            push_int(&mut line, ids.len() as u32);
            for k in 0..f.max_len {
                push_int(&mut line, ids.get(k).copied().unwrap_or(0));
            }
        }
        for &c in &r.cate {
            push_int(&mut line, c);
        }
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn push_int(line: &mut String, v: u32) {
    if !line.is_empty() {
        line.push(' ');
    }
    let _ = write!(line, "{v:>INT_WIDTH$}");
}

fn header_value<'a>(line: Option<&'a str>, key: &str) -> Result<&'a str> {
    line.and_then(|l| l.strip_prefix(key))
        .and_then(|l| l.strip_prefix(' '))
        .ok_or_else(|| Error::Format(format!("span header: expected {key}")))
}

pub fn read_span<R: Read>(schema: &FeatureSchema, r: R) -> Result<SpanDataset> {
    let mut lines = BufReader::new(r).lines();
    let mut next_line = |what: &str| -> Result<Option<String>> {
        lines
            .next()
            .transpose()
            .map_err(|e| Error::io(format!("reading span {what}"), e))
    };
    let mut header = Vec::with_capacity(5);
    for i in 0..5 {
        header.push(next_line(&format!("header line {i}"))?);
    }
    if header[0].as_deref() != Some(SPAN_MAGIC) {
        return Err(Error::Format("span header: bad magic line".into()));
    }
    let hash = header_value(header[1].as_deref(), "#schema")?;
    let expected = format!("{:016x}", schema.hash());
    if hash != expected {
        return Err(Error::Format(format!(
            "span schema hash {hash} does not match manifest schema {expected}"
        )));
    }
    let span: u32 = parse(header_value(header[2].as_deref(), "#span")?, "#span")?;
    let count: usize = parse(header_value(header[3].as_deref(), "#records")?, "#records")?;
    let cols = header_value(header[4].as_deref(), "#columns")?;
    if cols != span_columns(schema).join(" ") {
        return Err(Error::Format("span header: column list does not match schema".into()));
    }

    let n_fields = span_columns(schema).len();
    let mut records = Vec::with_capacity(count);
    for index in 0..count {
        let Some(line) = next_line(&format!("record {index}"))? else {
            return Err(truncated(span, index));
        };
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if fields.len() != n_fields {
            return Err(Error::Format(format!(
                "span {span} record {index}: {} fields, expected {n_fields}",
                fields.len()
            )));
        }
        let record = parse_record(schema, &fields)
            .map_err(|e| Error::Format(format!("span {span} record {index}: {e}")))?;
        records.push(record);
    }
    if let Some(extra) = next_line("trailer")? {
        if !extra.trim().is_empty() {
            return Err(Error::Format(format!(
                "span {span}: more rows than the {count} declared"
            )));
        }
    }
    Ok(SpanDataset { span, records })
}

fn truncated(span: u32, index: usize) -> Error {
    Error::io(
        format!("span {span} truncated at record {index}"),
        std::io::Error::from(std::io::ErrorKind::UnexpectedEof),
    )
}

fn parse_record(schema: &FeatureSchema, fields: &[&str]) -> Result<Record> {
    let mut it = fields.iter();
    let mut next = |what: &str| -> Result<&str> {
        it.next()
            .copied()
            .ok_or_else(|| Error::Format(format!("missing {what}")))
    };
    let user: u32 = parse(next("user")?, "user")?;
    let item: u32 = parse(next("item")?, "item")?;
    let labels = (0..schema.n_tasks)
        .map(|_| parse::<u8>(next("label")?, "label"))
        .collect::<Result<Vec<_>>>()?;
    let stat = schema
        .stat
        .iter()
        .map(|f| parse::<f64>(next(&f.name)?, &f.name))
        .collect::<Result<Vec<_>>>()?;
    let mut seq = Vec::with_capacity(schema.seq.len());
    for f in &schema.seq {
        let len: usize = parse(next(&f.name)?, &f.name)?;
        let mut ids = Vec::with_capacity(f.max_len);
        for _ in 0..f.max_len {
            ids.push(parse::<u32>(next(&f.name)?, &f.name)?);
        }
        if len > f.max_len || ids[len..].iter().any(|&i| i != 0) {
            return Err(Error::Format(format!("{}: bad padding", f.name)));
        }
        ids.truncate(len);
        seq.push(ids);
    }
    let cate = schema
        .cate
        .iter()
        .map(|f| parse::<u32>(next(&f.name)?, &f.name))
        .collect::<Result<Vec<_>>>()?;
    let r = Record {
        user,
        item,
        labels,
        stat,
        seq,
        cate,
    };
    validate_record(schema, &r)?;
    Ok(r)
}

pub const MANIFEST_FORMAT: &str = "tds-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Binds span files into a chronological sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub schema: FeatureSchema,
    pub seed: u64,
    pub span_files: Vec<String>,
    /// Echo of the generating configuration, `config.` prefix stripped.
    pub config: BTreeMap<String, String>,
    /// Directory the manifest was loaded from; span paths resolve against it.
    pub root: PathBuf,
}

impl Manifest {
    pub fn n_spans(&self) -> usize {
        self.span_files.len()
    }

    pub fn span_file_name(span: usize) -> String {
        format!("span_{span:03}.tsv")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "format={MANIFEST_FORMAT}");
        let _ = writeln!(out, "tool_version={}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(out, "schema_hash={:016x}", self.schema.hash());
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "n_spans={}", self.span_files.len());
        for (i, f) in self.span_files.iter().enumerate() {
            let _ = writeln!(out, "span.{i}={f}");
        }
        for l in self.schema.to_lines() {
            let _ = writeln!(out, "{l}");
        }
        for (k, v) in &self.config {
            let _ = writeln!(out, "config.{k}={v}");
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_text())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut entries: Vec<(&str, &str)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line {}: no '='", n + 1)))?;
            entries.push((k, v));
        }
        let get = |key: &str| {
            entries
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Format(format!("manifest missing {key}")))
        };
        if get("format")? != MANIFEST_FORMAT {
            return Err(Error::Format("unsupported manifest format".into()));
        }
        let schema = FeatureSchema::from_entries(entries.iter().copied())?;
        let declared = get("schema_hash")?;
        if declared != format!("{:016x}", schema.hash()) {
            return Err(Error::Format(
                "manifest schema hash does not match its schema entries".into(),
            ));
        }
        let seed = parse(get("seed")?, "seed")?;
        let n_spans: usize = parse(get("n_spans")?, "n_spans")?;
        let span_files = (0..n_spans)
            .map(|i| get(&format!("span.{i}")).map(str::to_owned))
            .collect::<Result<Vec<_>>>()?;
        let config = entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_owned(), (*v).to_owned())))
            .collect();
        Ok(Self {
            schema,
            seed,
            span_files,
            config,
            root,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn span_path(&self, span: usize) -> Result<PathBuf> {
        self.span_files
            .get(span)
            .map(|f| self.root.join(f))
            .ok_or_else(|| Error::Input(format!("manifest has no span {span}")))
    }

    pub fn load_span(&self, span: usize) -> Result<SpanDataset> {
        let path = self.span_path(span)?;
        let f = std::fs::File::open(&path).map_err(|e| {
            Error::io(
                format!("opening span {span} ({}) listed in manifest", path.display()),
                e,
            )
        })?;
        let ds = read_span(&self.schema, f)?;
        if ds.span as usize != span {
            return Err(Error::Format(format!(
                "{} holds span {}, manifest lists it as span {span}",
                path.display(),
                ds.span
            )));
        }
        Ok(ds)
    }

    pub fn write_span(&self, span: &SpanDataset) -> Result<()> {
        let path = self.span_path(span.span as usize)?;
        let f = std::fs::File::create(&path)
            .map_err(|e| Error::io(format!("creating span {} file", span.span), e))?;
        write_span(&self.schema, span, f)
    }
}
