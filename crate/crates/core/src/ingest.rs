//! Submission result files: line grammars, archive validation and the
//! canonical text form of detections.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Cursor, Read};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datastore::xml::format_coord;
use crate::geometry::Quad;

/// Placeholder for the image id inside an archive rule.
pub const ID_PLACEHOLDER: &str = "<image-id>";
/// Largest decompressed result file accepted from an archive.
pub const MAX_ENTRY_BYTES: u64 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LineGrammar {
    #[serde(rename = "quad")]
    Quad,
    #[serde(rename = "quad+confidence")]
    QuadConfidence,
    #[serde(rename = "quad+transcription")]
    QuadTranscription,
    #[serde(rename = "quad+confidence+transcription")]
    QuadConfidenceTranscription,
    #[serde(rename = "transcription-only")]
    TranscriptionOnly,
}

impl LineGrammar {
    pub const ALL: [LineGrammar; 5] = [
        LineGrammar::Quad,
        LineGrammar::QuadConfidence,
        LineGrammar::QuadTranscription,
        LineGrammar::QuadConfidenceTranscription,
        LineGrammar::TranscriptionOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LineGrammar::Quad => "quad",
            LineGrammar::QuadConfidence => "quad+confidence",
            LineGrammar::QuadTranscription => "quad+transcription",
            LineGrammar::QuadConfidenceTranscription => "quad+confidence+transcription",
            LineGrammar::TranscriptionOnly => "transcription-only",
        }
    }

    pub fn has_confidence(self) -> bool {
        matches!(self, LineGrammar::QuadConfidence | LineGrammar::QuadConfidenceTranscription)
    }

    pub fn has_transcription(self) -> bool {
        matches!(
            self,
            LineGrammar::QuadTranscription
                | LineGrammar::QuadConfidenceTranscription
                | LineGrammar::TranscriptionOnly
        )
    }

    /// Minimum comma-separated field count; exact for grammars without a
    /// trailing transcription.
    fn fields(self) -> usize {
        8 + self.has_confidence() as usize + (self.has_transcription() as usize)
    }
}

impl fmt::Display for LineGrammar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LineGrammar {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LineGrammar::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown line grammar {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatSpec {
    pub id: String,
    /// Entry name pattern containing `<image-id>`, e.g. `res_<image-id>.txt`.
    pub archive_rule: String,
    pub line_grammar: LineGrammar,
}

impl FormatSpec {
    pub fn standard(grammar: LineGrammar) -> FormatSpec {
        FormatSpec {
            id: grammar.as_str().replace('+', "-"),
            archive_rule: format!("res_{ID_PLACEHOLDER}.txt"),
            line_grammar: grammar,
        }
    }

    fn split_rule(&self) -> Option<(&str, &str)> {
        self.archive_rule.split_once(ID_PLACEHOLDER)
    }

    pub fn check(&self) -> Result<(), String> {
        match self.split_rule() {
            Some((_, rest)) if !rest.contains(ID_PLACEHOLDER) => Ok(()),
            _ => Err(format!("archive rule must contain {ID_PLACEHOLDER} exactly once")),
        }
    }

    pub fn entry_name(&self, image: &str) -> String {
        self.archive_rule.replacen(ID_PLACEHOLDER, image, 1)
    }

    /// Image id encoded in an archive entry name.
    pub fn image_id<'a>(&self, entry: &'a str) -> Option<&'a str> {
        let (prefix, suffix) = self.split_rule()?;
        let id = entry.strip_prefix(prefix)?.strip_suffix(suffix)?;
        (!id.is_empty()).then_some(id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub quad: Quad,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transcription: Option<String>,
}

/// Parsed content of one result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultFile {
    Detections(Vec<Detection>),
    Transcriptions(Vec<String>),
}

impl ResultFile {
    pub fn empty(grammar: LineGrammar) -> ResultFile {
        if grammar == LineGrammar::TranscriptionOnly {
            ResultFile::Transcriptions(Vec::new())
        } else {
            ResultFile::Detections(Vec::new())
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ResultFile::Detections(d) => d.len(),
            ResultFile::Transcriptions(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub code: String,
    pub message: String,
}

impl LineError {
    fn new(line: usize, code: &str, message: impl Into<String>) -> Self {
        LineError {
            line,
            code: code.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub file: String,
    /// 1-based line; 0 for issues about the file as a whole.
    pub line: usize,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub errors: Vec<ValidationIssue>,
    pub warnings: Vec<ValidationIssue>,
    pub per_sample_counts: BTreeMap<String, usize>,
}

fn parse_coordinate(field: &str) -> Option<f64> {
    f64::from_str(field.trim()).ok().filter(|v| v.is_finite())
}

fn parse_line(line_no: usize, text: &str, grammar: LineGrammar) -> Result<Detection, LineError> {
    let fields: Vec<&str> = text.split(',').collect();
    let want = grammar.fields();
    let count_ok = if grammar.has_transcription() {
        fields.len() >= want
    } else {
        fields.len() == want
    };
    if !count_ok {
        return Err(LineError::new(
            line_no,
            "WrongFieldCount",
            format!("got {} fields, want {}{}", fields.len(), want, if grammar.has_transcription() { " or more" } else { "" }),
        ));
    }
    let mut coords = [0.0; 8];
    for (i, f) in fields[..8].iter().enumerate() {
        coords[i] = parse_coordinate(f).ok_or_else(|| {
            LineError::new(
                line_no,
                "NonNumericCoordinate",
                format!("field {} ({f:?}) is not a finite number", i + 1),
            )
        })?;
    }
    let quad = Quad::from_coords(&coords)
        .map_err(|e| LineError::new(line_no, "InvalidQuad", format!("{}: {e}", e.code())))?;
    let mut next = 8;
    let confidence = if grammar.has_confidence() {
        let raw = fields[8];
        let c = parse_coordinate(raw).ok_or_else(|| {
            LineError::new(line_no, "NonNumericConfidence", format!("confidence {raw:?} is not a number"))
        })?;
        if !(0.0..=1.0).contains(&c) {
            return Err(LineError::new(
                line_no,
                "ConfidenceOutOfRange",
                format!("confidence {c} is outside [0, 1]"),
            ));
        }
        next = 9;
        Some(c)
    } else {
        None
    };
    let transcription = grammar.has_transcription().then(|| fields[next..].join(","));
    Ok(Detection {
        quad,
        confidence,
        transcription,
    })
}

/// Splits raw bytes into physical lines: LF separated, trailing CR and a
/// leading BOM removed. A final empty line after the last LF is dropped.
fn split_lines(bytes: &[u8]) -> Vec<(usize, Result<&str, LineError>)> {
    let bytes = bytes.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(bytes);
    let mut parts: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    if parts.last().is_some_and(|l| l.is_empty()) {
        parts.pop();
    }
    parts
        .into_iter()
        .enumerate()
        .map(|(i, raw)| {
            let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
            let text = std::str::from_utf8(raw)
                .map_err(|e| LineError::new(i + 1, "InvalidEncoding", format!("not UTF-8: {e}")));
            (i + 1, text)
        })
        .collect()
}

/// Parses one result file, collecting every line error.
///
/// Under `transcription-only` each physical line is one prediction, empty
/// lines included, so predictions stay aligned with line positions.
pub fn parse_result_file(bytes: &[u8], grammar: LineGrammar) -> Result<ResultFile, Vec<LineError>> {
    let mut errors = Vec::new();
    let mut dets = Vec::new();
    let mut texts = Vec::new();
    for (line_no, text) in split_lines(bytes) {
        let text = match text {
            Ok(t) => t,
            Err(e) => {
                errors.push(e);
                continue;
            }
        };
        if grammar == LineGrammar::TranscriptionOnly {
            texts.push(text.to_string());
            continue;
        }
        if text.trim().is_empty() {
            continue;
        }
        match parse_line(line_no, text, grammar) {
            Ok(d) => dets.push(d),
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    Ok(if grammar == LineGrammar::TranscriptionOnly {
        ResultFile::Transcriptions(texts)
    } else {
        ResultFile::Detections(dets)
    })
}

/// Canonical line for a detection under `grammar`: corners in canonical
/// order, coordinates with at most two decimals.
pub fn serialize_detection(d: &Detection, grammar: LineGrammar) -> String {
    let mut out: Vec<String> = d.quad.to_coords().iter().map(|&v| format_coord(v)).collect();
    if grammar.has_confidence() {
        out.push(format!("{}", d.confidence.unwrap_or(1.0)));
    }
    if grammar.has_transcription() {
        out.push(d.transcription.clone().unwrap_or_default());
    }
    out.join(",")
}

pub fn serialize_result_file(f: &ResultFile, grammar: LineGrammar) -> String {
    let mut s = String::new();
    match f {
        ResultFile::Detections(ds) => {
            for d in ds {
                s.push_str(&serialize_detection(d, grammar));
                s.push('\n');
            }
        }
        ResultFile::Transcriptions(ts) => {
            for t in ts {
                s.push_str(t);
                s.push('\n');
            }
        }
    }
    s
}

/// A validated archive: the report plus parsed files keyed by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedArchive {
    pub report: ValidationReport,
    pub samples: BTreeMap<String, ResultFile>,
}

fn issue(file: &str, line: usize, code: &str, message: impl Into<String>) -> ValidationIssue {
    ValidationIssue {
        file: file.to_string(),
        line,
        code: code.to_string(),
        message: message.into(),
    }
}

/// Validates a submission archive against `spec`; `known` lists the image
/// ids the task evaluates. Missing samples are filled in as empty results.
pub fn parse_archive(bytes: &[u8], spec: &FormatSpec, known: &[String]) -> ParsedArchive {
    let mut report = ValidationReport::default();
    let mut samples = BTreeMap::new();
    let known_set: BTreeSet<&str> = known.iter().map(String::as_str).collect();

    let mut zip = match zip::ZipArchive::new(Cursor::new(bytes)) {
        Ok(z) => z,
        Err(e) => {
            report.errors.push(issue("", 0, "CorruptArchive", format!("cannot read archive: {e}")));
            return ParsedArchive { report, samples };
        }
    };
    let mut entries = Vec::new();
    for i in 0..zip.len() {
        let mut f = match zip.by_index(i) {
            Ok(f) => f,
            Err(e) => {
                report.errors = vec![issue("", 0, "CorruptArchive", format!("entry {i}: {e}"))];
                return ParsedArchive {
                    report,
                    samples: BTreeMap::new(),
                };
            }
        };
        if f.is_dir() {
            continue;
        }
        let name = f.name().to_string();
        let mut buf = Vec::new();
        let read = (&mut f).take(MAX_ENTRY_BYTES + 1).read_to_end(&mut buf);
        if let Err(e) = read {
            report.errors = vec![issue(&name, 0, "CorruptArchive", format!("cannot decompress: {e}"))];
            return ParsedArchive {
                report,
                samples: BTreeMap::new(),
            };
        }
        entries.push((name, buf));
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));

    for (name, buf) in entries {
        let Some(id) = spec.image_id(&name) else {
            report.errors.push(issue(
                &name,
                0,
                "UnexpectedEntry",
                format!("entry name does not follow {}", spec.archive_rule),
            ));
            continue;
        };
        if !known_set.contains(id) {
            report
                .errors
                .push(issue(&name, 0, "UnknownSample", format!("no image with id {id:?} in this task")));
            continue;
        }
        if buf.len() as u64 > MAX_ENTRY_BYTES {
            report
                .errors
                .push(issue(&name, 0, "EntryTooLarge", format!("exceeds {MAX_ENTRY_BYTES} bytes")));
            continue;
        }
        match parse_result_file(&buf, spec.line_grammar) {
            Ok(parsed) => {
                report.per_sample_counts.insert(id.to_string(), parsed.len());
                samples.insert(id.to_string(), parsed);
            }
            Err(errs) => report
                .errors
                .extend(errs.into_iter().map(|e| issue(&name, e.line, &e.code, e.message))),
        }
    }

    for id in known {
        if !samples.contains_key(id) && !report.errors.iter().any(|e| spec.image_id(&e.file) == Some(id)) {
            report.warnings.push(issue(
                &spec.entry_name(id),
                0,
                "MissingSample",
                "no result file; scored as zero detections",
            ));
            report.per_sample_counts.insert(id.clone(), 0);
            samples.insert(id.clone(), ResultFile::empty(spec.line_grammar));
        }
    }
    report.ok = report.errors.is_empty();
    if !report.ok {
        samples.clear();
    }
    ParsedArchive { report, samples }
}

pub fn validate_archive(bytes: &[u8], spec: &FormatSpec, known: &[String]) -> ValidationReport {
    parse_archive(bytes, spec, known).report
}

/// Builds a result archive; used by tools and tests.
pub fn write_archive(files: &[(String, Vec<u8>)]) -> std::io::Result<Vec<u8>> {
    let mut w = zip::ZipWriter::new(Cursor::new(Vec::new()));
    let opts = zip::write::SimpleFileOptions::default().compression_method(zip::CompressionMethod::Deflated);
    for (name, bytes) in files {
        w.start_file(name.as_str(), opts).map_err(std::io::Error::other)?;
        std::io::Write::write_all(&mut w, bytes)?;
    }
    Ok(w.finish().map_err(std::io::Error::other)?.into_inner())
}
