//! Canonical XML form of an annotation revision.
//!
//! Layout rules: UTF-8, two-space indent, node attributes in the order
//! `id, care`, then the remaining ones alphabetically, coordinates with at
//! most two fraction digits. Writing a parsed canonical file reproduces it
//! byte for byte.

use chrono::{DateTime, SecondsFormat, Utc};
use indexmap::IndexMap;
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use thiserror::Error;

use super::tree::{AnnotationNode, Granularity, Region};
use super::AnnotationVersion;
use crate::geometry::Quad;

#[derive(Debug, Error)]
#[error("malformed annotation xml: {0}")]
pub struct XmlError(pub String);

fn err(msg: impl Into<String>) -> XmlError {
    XmlError(msg.into())
}

fn escape(s: &str, attr: bool) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' if attr => out.push_str("&quot;"),
            '\n' if attr => out.push_str("&#10;"),
            '\t' if attr => out.push_str("&#9;"),
            '\r' => out.push_str("&#13;"),
            c => out.push(c),
        }
    }
    out
}

/// Decimal with at most two fraction digits and no trailing zeros.
pub fn format_coord(v: f64) -> String {
    let s = format!("{:.2}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

pub fn format_points(q: &Quad) -> String {
    q.corners()
        .iter()
        .map(|p| format!("{},{}", format_coord(p.x), format_coord(p.y)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_points(s: &str) -> Result<Quad, XmlError> {
    let mut raw = Vec::with_capacity(8);
    for pair in s.split(' ') {
        let (x, y) = pair
            .split_once(',')
            .ok_or_else(|| err(format!("bad point {pair:?}")))?;
        for v in [x, y] {
            raw.push(
                v.parse::<f64>()
                    .map_err(|_| err(format!("bad coordinate {v:?}")))?,
            );
        }
    }
    Quad::from_coords(&raw).map_err(|e| err(format!("points {s:?}: {e}")))
}

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn write_node(out: &mut String, n: &AnnotationNode, depth: usize) {
    let pad = "  ".repeat(depth);
    out.push_str(&pad);
    out.push('<');
    out.push_str(n.granularity.as_str());
    out.push_str(&format!(" id=\"{}\" care=\"{}\"", escape(&n.id, true), n.care));
    match &n.region {
        Region::Mask(file) => out.push_str(&format!(" mask=\"{}\"", escape(file, true))),
        other => {
            if let Some(q) = other.quad() {
                out.push_str(&format!(" points=\"{}\"", format_points(&q)));
            }
        }
    }
    if !n.transcription.is_empty() {
        out.push_str(&format!(
            " transcription=\"{}\"",
            escape(&n.transcription, true)
        ));
    }
    if n.children.is_empty() && n.metadata.is_empty() {
        out.push_str("/>\n");
        return;
    }
    out.push_str(">\n");
    for (k, v) in &n.metadata {
        out.push_str(&format!(
            "{pad}  <meta key=\"{}\" value=\"{}\"/>\n",
            escape(k, true),
            escape(v, true)
        ));
    }
    for c in &n.children {
        write_node(out, c, depth + 1);
    }
    out.push_str(&format!("{pad}</{}>\n", n.granularity.as_str()));
}

pub fn to_xml(v: &AnnotationVersion) -> String {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out.push_str(&format!(
        "<annotation image=\"{}\" revision=\"{}\" author=\"{}\" timestamp=\"{}\">\n",
        escape(&v.image, true),
        v.revision,
        escape(&v.author, true),
        format_timestamp(&v.timestamp)
    ));
    out.push_str(&format!("  <note>{}</note>\n", escape(&v.change_note, false)));
    for n in &v.tree {
        write_node(&mut out, n, 1);
    }
    out.push_str("</annotation>\n");
    out
}

fn attrs(e: &BytesStart<'_>) -> Result<IndexMap<String, String>, XmlError> {
    let mut map = IndexMap::new();
    for a in e.attributes() {
        let a = a.map_err(|e| err(e.to_string()))?;
        let key = String::from_utf8(a.key.as_ref().to_vec()).map_err(|e| err(e.to_string()))?;
        let val = a.unescape_value().map_err(|e| err(e.to_string()))?.into_owned();
        map.insert(key, val);
    }
    Ok(map)
}

fn node_from(e: &BytesStart<'_>) -> Result<AnnotationNode, XmlError> {
    let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
    let granularity: Granularity = name.parse().map_err(err)?;
    let mut a = attrs(e)?;
    let id = a.shift_remove("id").ok_or_else(|| err("node without id"))?;
    let care = match a.shift_remove("care").as_deref() {
        Some("true") => true,
        Some("false") => false,
        other => return Err(err(format!("node {id}: bad care flag {other:?}"))),
    };
    let region = match (a.shift_remove("points"), a.shift_remove("mask")) {
        (Some(p), None) => Region::Quad(parse_points(&p)?),
        (None, Some(m)) => Region::Mask(m),
        _ => return Err(err(format!("node {id}: needs exactly one of points/mask"))),
    };
    let transcription = a.shift_remove("transcription").unwrap_or_default();
    if let Some((k, _)) = a.first() {
        return Err(err(format!("node {id}: unknown attribute {k}")));
    }
    let mut node = AnnotationNode::new(id, granularity, region).with_care(care);
    node.transcription = transcription;
    Ok(node)
}

pub fn from_xml(text: &str) -> Result<AnnotationVersion, XmlError> {
    let mut reader = Reader::from_str(text);
    let mut stack: Vec<AnnotationNode> = Vec::new();
    let mut roots: Vec<AnnotationNode> = Vec::new();
    let mut header: Option<(String, u32, String, DateTime<Utc>)> = None;
    let mut note: Option<String> = None;
    let mut in_note = false;
    let mut closed = false;

    let attach = |node: AnnotationNode,
                  stack: &mut Vec<AnnotationNode>,
                  roots: &mut Vec<AnnotationNode>| {
        match stack.last_mut() {
            Some(parent) => parent.children.push(node),
            None => roots.push(node),
        }
    };

    loop {
        let ev = reader.read_event().map_err(|e| err(e.to_string()))?;
        match ev {
            Event::Decl(_) => {}
            Event::Start(e) if header.is_none() => {
                if e.name().as_ref() != b"annotation" {
                    return Err(err("root element must be <annotation>"));
                }
                let mut a = attrs(&e)?;
                let image = a.shift_remove("image").ok_or_else(|| err("missing image"))?;
                let revision = a
                    .shift_remove("revision")
                    .and_then(|r| r.parse().ok())
                    .ok_or_else(|| err("missing or bad revision"))?;
                let author = a.shift_remove("author").ok_or_else(|| err("missing author"))?;
                let ts = a
                    .shift_remove("timestamp")
                    .and_then(|t| DateTime::parse_from_rfc3339(&t).ok())
                    .ok_or_else(|| err("missing or bad timestamp"))?
                    .with_timezone(&Utc);
                header = Some((image, revision, author, ts));
            }
            Event::Start(e) if e.name().as_ref() == b"note" => {
                if note.is_some() || !stack.is_empty() {
                    return Err(err("unexpected <note>"));
                }
                in_note = true;
                note = Some(String::new());
            }
            Event::Text(t) if in_note => {
                let s = t.unescape().map_err(|e| err(e.to_string()))?;
                if let Some(n) = note.as_mut() {
                    n.push_str(&s);
                }
            }
            Event::End(e) if e.name().as_ref() == b"note" => in_note = false,
            Event::Start(e) => stack.push(node_from(&e)?),
            Event::Empty(e) if e.name().as_ref() == b"meta" => {
                let mut a = attrs(&e)?;
                let (k, v) = (a.shift_remove("key"), a.shift_remove("value"));
                match (stack.last_mut(), k, v) {
                    (Some(parent), Some(k), Some(v)) if a.is_empty() => {
                        parent.metadata.insert(k, v);
                    }
                    _ => return Err(err("bad <meta> element")),
                }
            }
            Event::Empty(e) => {
                let node = node_from(&e)?;
                attach(node, &mut stack, &mut roots);
            }
            Event::End(e) if e.name().as_ref() == b"annotation" => {
                if !stack.is_empty() {
                    return Err(err("unclosed node"));
                }
                closed = true;
            }
            Event::End(_) => {
                let node = stack.pop().ok_or_else(|| err("unbalanced end tag"))?;
                attach(node, &mut stack, &mut roots);
            }
            Event::Text(t) => {
                if !t.iter().all(|b| b.is_ascii_whitespace()) {
                    return Err(err("unexpected text content"));
                }
            }
            Event::Eof => break,
            other => return Err(err(format!("unexpected xml event {other:?}"))),
        }
    }
    let (image, revision, author, timestamp) = header.ok_or_else(|| err("empty document"))?;
    if !closed {
        return Err(err("missing </annotation>"));
    }
    Ok(AnnotationVersion {
        image,
        revision,
        author,
        timestamp,
        change_note: note.unwrap_or_default(),
        tree: roots,
    })
}
