use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::geometry::{GeometryError, Quad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Block,
    Line,
    Word,
    Char,
    Atom,
}

impl Granularity {
    pub const ALL: [Granularity; 5] = [
        Granularity::Block,
        Granularity::Line,
        Granularity::Word,
        Granularity::Char,
        Granularity::Atom,
    ];

    /// Higher is coarser.
    pub fn rank(self) -> u8 {
        match self {
            Granularity::Block => 4,
            Granularity::Line => 3,
            Granularity::Word => 2,
            Granularity::Char => 1,
            Granularity::Atom => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Block => "block",
            Granularity::Line => "line",
            Granularity::Word => "word",
            Granularity::Char => "char",
            Granularity::Atom => "atom",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Granularity::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown granularity {s:?}"))
    }
}

/// Spatial support of an annotation node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Quad(Quad),
    /// Axis-aligned `[x0, y0, x1, y1]`; turned into a quad when saved.
    Rect([f64; 4]),
    /// Pixel mask stored as `masks/<image>/<file>`.
    Mask(String),
}

impl Region {
    pub fn quad(&self) -> Option<Quad> {
        match self {
            Region::Quad(q) => Some(*q),
            Region::Rect(r) => Quad::axis_rect(r[0], r[1], r[2], r[3]).ok(),
            Region::Mask(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationNode {
    pub id: String,
    pub granularity: Granularity,
    pub region: Region,
    #[serde(default)]
    pub transcription: String,
    #[serde(default = "default_care")]
    pub care: bool,
    #[serde(default)]
    pub metadata: IndexMap<String, String>,
    #[serde(default)]
    pub children: Vec<AnnotationNode>,
}

fn default_care() -> bool {
    true
}

impl AnnotationNode {
    pub fn new(id: impl Into<String>, granularity: Granularity, region: Region) -> Self {
        AnnotationNode {
            id: id.into(),
            granularity,
            region,
            transcription: String::new(),
            care: true,
            metadata: IndexMap::new(),
            children: Vec::new(),
        }
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.transcription = text.into();
        self
    }

    pub fn with_care(mut self, care: bool) -> Self {
        self.care = care;
        self
    }

    pub fn with_children(mut self, children: Vec<AnnotationNode>) -> Self {
        self.children = children;
        self
    }
}

/// Root list of an image's annotation hierarchy.
pub type AnnotationTree = Vec<AnnotationNode>;

#[derive(Debug, Clone, PartialEq)]
pub struct TreeViolation {
    /// Slash-separated ids from the root to the offending node.
    pub path: String,
    pub reason: String,
}

fn valid_node_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

/// Characters that XML 1.0 cannot carry even as references.
pub(crate) fn xml_safe(s: &str) -> bool {
    s.chars()
        .all(|c| !(c < '\u{20}' && c != '\t' && c != '\n' && c != '\r') && c != '\u{FFFE}' && c != '\u{FFFF}')
}

/// Rounds to the two fraction digits kept by the canonical XML form.
pub(crate) fn round2(v: f64) -> f64 {
    let r = (v * 100.0).round() / 100.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Rewrites rect sugar as quads and snaps coordinates to the stored
/// precision. Fails on the first region that stops being a valid quad.
pub fn normalize_tree(tree: &mut AnnotationTree) -> Result<(), TreeViolation> {
    fn walk(nodes: &mut [AnnotationNode], prefix: &str) -> Result<(), TreeViolation> {
        for n in nodes {
            let path = join(prefix, &n.id);
            let raw = match &n.region {
                Region::Quad(q) => Some(q.to_coords()),
                Region::Rect(r) => {
                    let q = Quad::axis_rect(r[0], r[1], r[2], r[3])
                        .map_err(|e| geometry_violation(&path, e))?;
                    Some(q.to_coords())
                }
                Region::Mask(_) => None,
            };
            if let Some(raw) = raw {
                let q = Quad::from_coords(&raw.map(round2))
                    .map_err(|e| geometry_violation(&path, e))?;
                n.region = Region::Quad(q);
            }
            walk(&mut n.children, &path)?;
        }
        Ok(())
    }
    walk(tree, "")
}

fn geometry_violation(path: &str, e: GeometryError) -> TreeViolation {
    TreeViolation {
        path: path.to_string(),
        reason: format!("invalid region: {e}"),
    }
}

fn join(prefix: &str, id: &str) -> String {
    if prefix.is_empty() {
        id.to_string()
    } else {
        format!("{prefix}/{id}")
    }
}

/// Checks the structural invariants of a tree, reporting the first violation
/// in document order.
pub fn validate_tree(tree: &[AnnotationNode]) -> Result<(), TreeViolation> {
    let mut seen = HashSet::new();
    fn walk<'a>(
        nodes: &'a [AnnotationNode],
        parent: Option<&AnnotationNode>,
        prefix: &str,
        seen: &mut HashSet<&'a str>,
    ) -> Result<(), TreeViolation> {
        for n in nodes {
            let path = join(prefix, &n.id);
            let fail = |reason: String| TreeViolation {
                path: path.clone(),
                reason,
            };
            if !valid_node_id(&n.id) {
                return Err(fail("node id must match [A-Za-z0-9_-]{1,128}".into()));
            }
            if !seen.insert(n.id.as_str()) {
                return Err(fail(format!("duplicate node id {}", n.id)));
            }
            if let Some(p) = parent {
                if n.granularity.rank() >= p.granularity.rank() {
                    return Err(fail(format!(
                        "{} node cannot be a child of a {} node",
                        n.granularity, p.granularity
                    )));
                }
                if !n.id.starts_with(&format!("{}_", p.id)) {
                    return Err(fail(format!("id must be prefixed by parent id {}_", p.id)));
                }
            }
            if n.care && n.granularity == Granularity::Word && n.transcription.is_empty() {
                return Err(fail("care word needs a transcription".into()));
            }
            if !xml_safe(&n.transcription) {
                return Err(fail("transcription contains control characters".into()));
            }
            for (k, v) in &n.metadata {
                if k.is_empty() || !xml_safe(k) || !xml_safe(v) {
                    return Err(fail(format!("bad metadata entry {k:?}")));
                }
            }
            if let Region::Mask(file) = &n.region {
                if *file != format!("{}.png", n.id) {
                    return Err(fail(format!("mask file must be {}.png", n.id)));
                }
            }
            walk(&n.children, Some(n), &path, seen)?;
        }
        Ok(())
    }
    walk(tree, None, "", &mut seen)
}

/// Depth-first iterator over all nodes with their slash paths.
pub fn walk_nodes(tree: &[AnnotationNode]) -> Vec<&AnnotationNode> {
    fn go<'a>(nodes: &'a [AnnotationNode], out: &mut Vec<&'a AnnotationNode>) {
        for n in nodes {
            out.push(n);
            go(&n.children, out);
        }
    }
    let mut out = Vec::new();
    go(tree, &mut out);
    out
}

pub fn find_node_mut<'a>(tree: &'a mut [AnnotationNode], id: &str) -> Option<&'a mut AnnotationNode> {
    for n in tree.iter_mut() {
        if n.id == id {
            return Some(n);
        }
        if let Some(found) = find_node_mut(&mut n.children, id) {
            return Some(found);
        }
    }
    None
}
