//! Research tasks: the binding of a ground-truth subset to a submission
//! format and one or more evaluation protocols, frozen GT snapshots, and
//! standalone offline bundles.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datastore::xml::{from_xml, to_xml};
use crate::datastore::{
    is_slug, read_json, to_json_bytes, AnnotationTree, AnnotationVersion, Datastore, DatastoreError, Subset,
};
use crate::evalcore::{self, EvalError, EvalReport, EvaluationProtocol, ProtocolKind};
use crate::fsutil;
use crate::ingest::{self, FormatSpec, LineGrammar, ValidationReport};

pub const BUNDLE_INDEX_HTML: &str = include_str!("../assets/bundle_index.html");

const SERVE_SCRIPT: &str = "#!/bin/sh\n\
# Serves this bundle on http://127.0.0.1:8080 (override with --addr).\n\
cd \"$(dirname \"$0\")\" && exec ./bin/rrc bundle serve --dir . \"$@\"\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtSource {
    Internal { collection: String, subset: Subset },
    /// Path to a snapshot archive provided from outside the datastore.
    External {
        path: PathBuf,
        #[serde(default)]
        public: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResearchTask {
    pub challenge_id: String,
    pub task_id: String,
    pub title: String,
    pub gt_source: GtSource,
    pub input_format: FormatSpec,
    pub evaluations: Vec<EvaluationProtocol>,
    #[serde(default)]
    pub default_evaluation: usize,
    /// Hash of the frozen GT snapshot evaluations run against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<String>,
}

impl ResearchTask {
    /// Whether GT of this task may leave the server.
    pub fn is_public(&self) -> bool {
        match &self.gt_source {
            GtSource::Internal { subset, .. } => subset.is_public(),
            GtSource::External { public, .. } => *public,
        }
    }

    pub fn evaluation(&self, id: &str) -> Option<&EvaluationProtocol> {
        self.evaluations.iter().find(|e| e.id == id)
    }
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("bad parameter {key:?} for {protocol:?}: {reason}")]
    BadParams {
        protocol: String,
        key: String,
        reason: String,
    },
    #[error("ground truth cannot be resolved: {0}")]
    UnresolvableGT(String),
    #[error("invalid task id {0:?}")]
    InvalidId(String),
    #[error("task {0} already exists")]
    DuplicateTask(String),
    #[error("no such task {0}")]
    NoSuchTask(String),
    #[error("task has no frozen ground truth")]
    NotFrozen,
    #[error("no evaluation {0:?} in this task")]
    NoSuchEvaluation(String),
    #[error("bundles can only be built from public subsets")]
    SequesteredLeak,
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error(transparent)]
    Datastore(#[from] DatastoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<EvalError> for TaskError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::BadParams { protocol, key, reason } => TaskError::BadParams { protocol, key, reason },
            other => TaskError::BadParams {
                protocol: String::new(),
                key: String::new(),
                reason: other.to_string(),
            },
        }
    }
}

pub type Result<T, E = TaskError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub images: Vec<ManifestImage>,
}

/// Decoded GT snapshot: manifest plus one annotation per image.
#[derive(Debug, Clone, PartialEq)]
pub struct GtSnapshot {
    pub manifest: SnapshotManifest,
    pub annotations: BTreeMap<String, AnnotationVersion>,
}

impl GtSnapshot {
    pub fn image_ids(&self) -> Vec<String> {
        self.manifest.images.iter().map(|m| m.id.clone()).collect()
    }

    pub fn trees(&self) -> BTreeMap<String, AnnotationTree> {
        self.annotations.iter().map(|(k, v)| (k.clone(), v.tree.clone())).collect()
    }
}

fn stored_options(mode: u32) -> zip::write::SimpleFileOptions {
    zip::write::SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Stored)
        .last_modified_time(zip::DateTime::default())
        .unix_permissions(mode)
}

/// Archive with sorted entries, fixed timestamps and no compression, so
/// identical content always produces identical bytes.
pub fn canonical_zip(entries: &BTreeMap<String, (Vec<u8>, u32)>) -> std::io::Result<Vec<u8>> {
    let mut w = zip::ZipWriter::new(Cursor::new(Vec::new()));
    for (name, (bytes, mode)) in entries {
        w.start_file(name.as_str(), stored_options(*mode)).map_err(std::io::Error::other)?;
        w.write_all(bytes)?;
    }
    Ok(w.finish().map_err(std::io::Error::other)?.into_inner())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Builds snapshot bytes from annotations and image dimensions.
pub fn write_snapshot(images: &[ManifestImage], annotations: &[AnnotationVersion]) -> std::io::Result<Vec<u8>> {
    let mut images = images.to_vec();
    images.sort_by(|a, b| a.id.cmp(&b.id));
    let manifest = SnapshotManifest { images };
    let mut entries = BTreeMap::new();
    entries.insert("manifest.json".to_string(), (to_json_bytes(&manifest), 0o644));
    for v in annotations {
        entries.insert(format!("gt/{}.xml", v.image), (to_xml(v).into_bytes(), 0o644));
    }
    canonical_zip(&entries)
}

fn read_entries(bytes: &[u8]) -> Result<BTreeMap<String, Vec<u8>>> {
    let corrupt = |e: &dyn std::fmt::Display| TaskError::CorruptSnapshot(e.to_string());
    let mut zip = zip::ZipArchive::new(Cursor::new(bytes)).map_err(|e| corrupt(&e))?;
    let mut out = BTreeMap::new();
    for i in 0..zip.len() {
        let mut f = zip.by_index(i).map_err(|e| corrupt(&e))?;
        if f.is_dir() {
            continue;
        }
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| corrupt(&e))?;
        out.insert(f.name().to_string(), buf);
    }
    Ok(out)
}

pub fn read_snapshot(bytes: &[u8]) -> Result<GtSnapshot> {
    let mut entries = read_entries(bytes)?;
    let manifest: SnapshotManifest = entries
        .remove("manifest.json")
        .ok_or_else(|| TaskError::CorruptSnapshot("missing manifest.json".into()))
        .and_then(|b| serde_json::from_slice(&b).map_err(|e| TaskError::CorruptSnapshot(e.to_string())))?;
    let mut annotations = BTreeMap::new();
    for m in &manifest.images {
        let name = format!("gt/{}.xml", m.id);
        let xml = entries
            .get(&name)
            .ok_or_else(|| TaskError::CorruptSnapshot(format!("missing {name}")))?;
        let text = std::str::from_utf8(xml).map_err(|e| TaskError::CorruptSnapshot(format!("{name}: {e}")))?;
        let v = from_xml(text).map_err(|e| TaskError::CorruptSnapshot(format!("{name}: {e}")))?;
        annotations.insert(m.id.clone(), v);
    }
    Ok(GtSnapshot { manifest, annotations })
}

/// Default submission format for a protocol kind.
pub fn default_format(kind: ProtocolKind) -> FormatSpec {
    FormatSpec::standard(match kind {
        ProtocolKind::LocalizationIou | ProtocolKind::LocalizationDeteval => LineGrammar::Quad,
        ProtocolKind::EndToEnd => LineGrammar::QuadTranscription,
        ProtocolKind::Recognition => LineGrammar::TranscriptionOnly,
    })
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("submission failed validation")]
    Invalid(ValidationReport),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Validation followed by scoring; the single evaluation path shared by the
/// command line, the workers and the standalone bundle.
pub fn evaluate_submission(
    snapshot: &GtSnapshot,
    format: &FormatSpec,
    protocol: &EvaluationProtocol,
    archive: &[u8],
) -> Result<(ValidationReport, EvalReport), PipelineError> {
    let parsed = ingest::parse_archive(archive, format, &snapshot.image_ids());
    if !parsed.report.ok {
        return Err(PipelineError::Invalid(parsed.report));
    }
    let report = evalcore::evaluate(protocol, &snapshot.trees(), &parsed.samples)?;
    Ok((parsed.report, report))
}

/// Persistent task registry under `<store>/tasks`.
#[derive(Debug, Clone)]
pub struct TaskStore {
    root: PathBuf,
    ds: Datastore,
}

impl TaskStore {
    pub fn new(ds: Datastore) -> Self {
        TaskStore {
            root: ds.root().join("tasks"),
            ds,
        }
    }

    pub fn datastore(&self) -> &Datastore {
        &self.ds
    }

    fn task_dir(&self, tid: &str) -> PathBuf {
        self.root.join(tid)
    }

    pub fn snapshot_path(&self, tid: &str, hash: &str) -> PathBuf {
        self.task_dir(tid).join("snapshots").join(format!("{hash}.zip"))
    }

    fn check(&self, t: &ResearchTask) -> Result<()> {
        if !is_slug(&t.task_id) {
            return Err(TaskError::InvalidId(t.task_id.clone()));
        }
        if !is_slug(&t.challenge_id) {
            return Err(TaskError::InvalidId(t.challenge_id.clone()));
        }
        let bad = |protocol: &str, key: &str, reason: &str| TaskError::BadParams {
            protocol: protocol.to_string(),
            key: key.to_string(),
            reason: reason.to_string(),
        };
        if t.evaluations.is_empty() {
            return Err(bad("", "evaluations", "at least one evaluation is required"));
        }
        if t.default_evaluation >= t.evaluations.len() {
            return Err(bad("", "default_evaluation", "index out of range"));
        }
        t.input_format
            .check()
            .map_err(|e| bad("", "input_format", &e))?;
        let mut seen = std::collections::BTreeSet::new();
        for e in &t.evaluations {
            if !is_slug(&e.id) || !seen.insert(e.id.as_str()) {
                return Err(bad(&e.id, "id", "evaluation ids must be unique slugs"));
            }
            e.resolve()?;
            let g = t.input_format.line_grammar;
            let fits = match e.kind {
                ProtocolKind::LocalizationIou | ProtocolKind::LocalizationDeteval => g != LineGrammar::TranscriptionOnly,
                ProtocolKind::EndToEnd => g.has_transcription() && g != LineGrammar::TranscriptionOnly,
                ProtocolKind::Recognition => g.has_transcription(),
            };
            if !fits {
                return Err(bad(&e.id, "kind", &format!("incompatible with grammar {g}")));
            }
        }
        match &t.gt_source {
            GtSource::Internal { collection, .. } => {
                self.ds
                    .collection(collection)
                    .map_err(|_| TaskError::UnresolvableGT(format!("no collection {collection}")))?;
            }
            GtSource::External { path, .. } => {
                let bytes = std::fs::read(path)
                    .map_err(|e| TaskError::UnresolvableGT(format!("{}: {e}", path.display())))?;
                read_snapshot(&bytes).map_err(|e| TaskError::UnresolvableGT(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn define_task(&self, mut t: ResearchTask) -> Result<ResearchTask> {
        self.check(&t)?;
        t.snapshot = None;
        let path = self.task_dir(&t.task_id).join("task.json");
        if !fsutil::create_exclusive(&path, &to_json_bytes(&t))? {
            return Err(TaskError::DuplicateTask(t.task_id));
        }
        Ok(t)
    }

    pub fn task(&self, tid: &str) -> Result<ResearchTask> {
        if !is_slug(tid) {
            return Err(TaskError::NoSuchTask(tid.to_string()));
        }
        read_json(&self.task_dir(tid).join("task.json"))?.ok_or_else(|| TaskError::NoSuchTask(tid.to_string()))
    }

    pub fn list_tasks(&self) -> Result<Vec<ResearchTask>> {
        let mut out = Vec::new();
        for name in fsutil::list_names(&self.root)? {
            if let Ok(t) = self.task(&name) {
                out.push(t);
            }
        }
        Ok(out)
    }

    /// Current GT of the task's source as canonical snapshot bytes.
    pub fn build_snapshot(&self, t: &ResearchTask) -> Result<Vec<u8>> {
        match &t.gt_source {
            GtSource::External { path, .. } => {
                let bytes = std::fs::read(path).map_err(|e| TaskError::UnresolvableGT(e.to_string()))?;
                let snap = read_snapshot(&bytes)?;
                let versions: Vec<AnnotationVersion> = snap.annotations.into_values().collect();
                Ok(write_snapshot(&snap.manifest.images, &versions)?)
            }
            GtSource::Internal { collection, subset } => {
                let mut images = Vec::new();
                let mut versions = Vec::new();
                for rec in self.ds.images(collection)? {
                    if rec.subset != *subset || self.ds.head(collection, &rec.id)? == 0 {
                        continue;
                    }
                    versions.push(self.ds.load_annotation(collection, &rec.id, None)?);
                    images.push(ManifestImage {
                        id: rec.id,
                        width: rec.width,
                        height: rec.height,
                    });
                }
                Ok(write_snapshot(&images, &versions)?)
            }
        }
    }

    /// Freezes the current GT into a content-addressed snapshot and points
    /// the task at it. Returns the snapshot hash.
    pub fn freeze_gt(&self, tid: &str) -> Result<String> {
        let t = self.task(tid)?;
        let bytes = self.build_snapshot(&t)?;
        let hash = sha256_hex(&bytes);
        fsutil::create_exclusive(&self.snapshot_path(tid, &hash), &bytes)?;
        let _guard = fsutil::FileLock::acquire(&self.task_dir(tid).join("task.lock"))?;
        let mut t = self.task(tid)?;
        t.snapshot = Some(hash.clone());
        fsutil::write_atomic(&self.task_dir(tid).join("task.json"), &to_json_bytes(&t))?;
        Ok(hash)
    }

    pub fn snapshot_bytes(&self, t: &ResearchTask) -> Result<Vec<u8>> {
        let hash = t.snapshot.as_ref().ok_or(TaskError::NotFrozen)?;
        Ok(std::fs::read(self.snapshot_path(&t.task_id, hash))?)
    }

    pub fn snapshot(&self, t: &ResearchTask) -> Result<GtSnapshot> {
        read_snapshot(&self.snapshot_bytes(t)?)
    }

    /// Self-contained archive that evaluates and visualizes one evaluation
    /// of the task offline. `exe` is the `rrc` binary to embed.
    pub fn export_standalone_bundle(&self, tid: &str, evaluation: Option<&str>, exe: Option<&Path>) -> Result<Vec<u8>> {
        let t = self.task(tid)?;
        if !t.is_public() {
            return Err(TaskError::SequesteredLeak);
        }
        let snapshot = self.snapshot_bytes(&t)?;
        let eval = match evaluation {
            Some(id) => t.evaluation(id).ok_or_else(|| TaskError::NoSuchEvaluation(id.to_string()))?,
            None => &t.evaluations[t.default_evaluation],
        }
        .clone();
        let descriptor = ResearchTask {
            evaluations: vec![eval],
            default_evaluation: 0,
            ..t
        };
        let mut entries = BTreeMap::new();
        entries.insert("task.json".to_string(), (to_json_bytes(&descriptor), 0o644));
        entries.insert("gt/snapshot.zip".to_string(), (snapshot, 0o644));
        entries.insert("serve".to_string(), (SERVE_SCRIPT.as_bytes().to_vec(), 0o755));
        entries.insert("ui/index.html".to_string(), (BUNDLE_INDEX_HTML.as_bytes().to_vec(), 0o644));
        if let Some(exe) = exe {
            entries.insert("bin/rrc".to_string(), (std::fs::read(exe)?, 0o755));
        }
        Ok(canonical_zip(&entries)?)
    }
}

/// Unpacks a bundle archive into `dir`, restoring executable bits.
pub fn unpack_bundle(bytes: &[u8], dir: &Path) -> Result<()> {
    let mut zip = zip::ZipArchive::new(Cursor::new(bytes)).map_err(|e| TaskError::CorruptSnapshot(e.to_string()))?;
    zip.extract(dir).map_err(|e| TaskError::CorruptSnapshot(e.to_string()))?;
    Ok(())
}
