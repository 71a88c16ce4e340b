//! File-backed store for collections, images, versioned annotation trees,
//! masks, subset assignment and the audit trail.
//!
//! Layout under the store root:
//!
//! ```text
//! collections/<cid>/collection.json
//! collections/<cid>/images/<iid>.<ext>      raw upload
//! collections/<cid>/images/<iid>.json       ImageRecord
//! collections/<cid>/gt/<iid>/v00001.xml     one file per revision
//! collections/<cid>/gt/<iid>/head           latest revision (hint)
//! collections/<cid>/masks/<iid>/<node>.png
//! collections/<cid>/audit.log               JSON lines
//! ```
//!
//! Revision files are created with link-if-absent, which is the
//! compare-and-set point for concurrent saves. The `head` file is only a
//! hint; readers probe forward from it so a crash between the two writes
//! never exposes a torn head.

pub mod tree;
pub mod xml;

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, DurationRound, TimeDelta, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fsutil::{self, FileLock};
pub use tree::{AnnotationNode, AnnotationTree, Granularity, Region};

#[derive(Debug, Error)]
pub enum DatastoreError {
    #[error("id {0:?} already exists")]
    DuplicateId(String),
    #[error("{0:?} is not a valid slug ([a-z0-9-]{{1,64}})")]
    InvalidSlug(String),
    #[error("no such collection {0:?}")]
    NoSuchCollection(String),
    #[error("unknown image {0:?}")]
    UnknownImage(String),
    #[error("image could not be decoded: {0}")]
    UndecodableImage(String),
    #[error("head moved: expected {expected}, found {actual}")]
    StaleHead { expected: u32, actual: u32 },
    #[error("invalid tree at {path}: {reason}")]
    InvalidTree { path: String, reason: String },
    #[error("no revision {requested} (head is {head})")]
    NoSuchRevision { requested: u32, head: u32 },
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("unknown subset {0:?}")]
    UnknownSubset(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("collection must keep at least one admin")]
    LastAdmin,
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("injected fault after {0:?}")]
    Injected(WriteStep),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = DatastoreError> = std::result::Result<T, E>;

pub fn is_slug(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 64
        && s.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Contributor,
    Owner,
    Admin,
}

impl Role {
    pub fn can_manage(self) -> bool {
        matches!(self, Role::Owner | Role::Admin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub user: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Collection {
    pub id: String,
    pub title: String,
    pub created_at: DateTime<Utc>,
    pub members: Vec<Member>,
}

impl Collection {
    pub fn role_of(&self, user: &str) -> Option<Role> {
        self.members.iter().find(|m| m.user == user).map(|m| m.role)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subset {
    Unassigned,
    Training,
    Validation,
    PublicTest,
    SequesteredTest,
}

impl Subset {
    pub const ALL: [Subset; 5] = [
        Subset::Unassigned,
        Subset::Training,
        Subset::Validation,
        Subset::PublicTest,
        Subset::SequesteredTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Unassigned => "unassigned",
            Subset::Training => "training",
            Subset::Validation => "validation",
            Subset::PublicTest => "public-test",
            Subset::SequesteredTest => "sequestered-test",
        }
    }

    /// Subsets whose ground truth may leave the server.
    pub fn is_public(self) -> bool {
        matches!(self, Subset::Training | Subset::Validation | Subset::PublicTest)
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subset {
    type Err = DatastoreError;

    fn from_str(s: &str) -> Result<Self> {
        Subset::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| DatastoreError::UnknownSubset(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comment {
    pub author: String,
    pub timestamp: DateTime<Utc>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub filename: String,
    pub format: String,
    pub sha256: String,
    pub width: u32,
    pub height: u32,
    pub subset: Subset,
    pub quality_rating: Option<u8>,
    #[serde(default)]
    pub comments: Vec<Comment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Imported {
    pub record: ImageRecord,
    /// Set when identical bytes were already present; `record` is then the
    /// existing one.
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationVersion {
    pub image: String,
    pub revision: u32,
    pub author: String,
    pub timestamp: DateTime<Utc>,
    pub change_note: String,
    pub tree: AnnotationTree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub ts: DateTime<Utc>,
    pub actor: String,
    pub action: String,
    pub target: String,
    pub detail: serde_json::Value,
}

/// Points in the revision write path where a fault can be injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteStep {
    RevisionTempWritten,
    RevisionLinked,
    RevisionTempRemoved,
    HeadTempWritten,
    HeadRenamed,
}

pub type FaultHook = Arc<dyn Fn(WriteStep) -> bool + Send + Sync>;

/// Source of images for bulk import (e.g. a crawler).
pub trait ImageSource {
    /// Next `(filename, bytes)` pair, or `None` when exhausted.
    fn next_image(&mut self) -> Option<io::Result<(String, Vec<u8>)>>;
}

#[derive(Clone)]
pub struct Datastore {
    root: PathBuf,
    fault: Option<FaultHook>,
}

impl fmt::Debug for Datastore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Datastore").field("root", &self.root).finish()
    }
}

fn corrupt(path: &Path, e: impl fmt::Display) -> DatastoreError {
    DatastoreError::Corrupt {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    match fsutil::read_opt(path)? {
        None => Ok(None),
        Some(b) => serde_json::from_slice(&b).map(Some).map_err(|e| corrupt(path, e)),
    }
}

pub(crate) fn to_json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializable");
    b.push(b'\n');
    b
}

/// Timestamps are kept at millisecond precision so they survive the XML form.
pub fn now_millis() -> DateTime<Utc> {
    let now = Utc::now();
    now.duration_trunc(TimeDelta::milliseconds(1)).unwrap_or(now)
}

impl Datastore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Datastore> {
        let root = root.into();
        fs::create_dir_all(root.join("collections"))?;
        Ok(Datastore { root, fault: None })
    }

    /// Installs a hook called after each revision write step; returning
    /// `true` aborts the save at that point, leaving files as they are.
    pub fn with_fault_hook(mut self, hook: FaultHook) -> Datastore {
        self.fault = Some(hook);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn collection_dir(&self, cid: &str) -> PathBuf {
        self.root.join("collections").join(cid)
    }

    fn gt_dir(&self, cid: &str, iid: &str) -> PathBuf {
        self.collection_dir(cid).join("gt").join(iid)
    }

    pub fn mask_path(&self, cid: &str, iid: &str, node: &str) -> PathBuf {
        self.collection_dir(cid)
            .join("masks")
            .join(iid)
            .join(format!("{node}.png"))
    }

    pub(crate) fn lock(&self, cid: &str, name: &str) -> Result<FileLock> {
        Ok(FileLock::acquire(
            &self.collection_dir(cid).join("locks").join(format!("{name}.lock")),
        )?)
    }

    fn inject(&self, step: WriteStep) -> Result<()> {
        match &self.fault {
            Some(hook) if hook(step) => Err(DatastoreError::Injected(step)),
            _ => Ok(()),
        }
    }

    pub fn audit(
        &self,
        cid: &str,
        actor: &str,
        action: &str,
        target: &str,
        detail: serde_json::Value,
    ) -> Result<()> {
        let entry = AuditEntry {
            ts: now_millis(),
            actor: actor.into(),
            action: action.into(),
            target: target.into(),
            detail,
        };
        let line = serde_json::to_string(&entry).expect("serializable");
        fsutil::append_line(&self.collection_dir(cid).join("audit.log"), &line)?;
        Ok(())
    }

    pub fn read_audit(&self, cid: &str) -> Result<Vec<AuditEntry>> {
        let path = self.collection_dir(cid).join("audit.log");
        let Some(bytes) = fsutil::read_opt(&path)? else {
            return Ok(Vec::new());
        };
        String::from_utf8_lossy(&bytes)
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| corrupt(&path, e)))
            .collect()
    }

    pub fn create_collection(&self, id: &str, title: &str, creator: &str) -> Result<Collection> {
        if !is_slug(id) {
            return Err(DatastoreError::InvalidSlug(id.to_string()));
        }
        let dir = self.collection_dir(id);
        match fs::create_dir(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                return Err(DatastoreError::DuplicateId(id.to_string()))
            }
            Err(e) => return Err(e.into()),
        }
        for sub in ["images", "gt", "masks", "workflow", "verification", "locks"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        let c = Collection {
            id: id.to_string(),
            title: title.to_string(),
            created_at: now_millis(),
            members: vec![Member {
                user: creator.to_string(),
                role: Role::Admin,
            }],
        };
        fsutil::write_atomic(&dir.join("collection.json"), &to_json_bytes(&c))?;
        self.audit(id, creator, "create_collection", id, serde_json::json!({ "title": title }))?;
        Ok(c)
    }

    pub fn collection(&self, cid: &str) -> Result<Collection> {
        if !is_slug(cid) {
            return Err(DatastoreError::NoSuchCollection(cid.to_string()));
        }
        read_json(&self.collection_dir(cid).join("collection.json"))?
            .ok_or_else(|| DatastoreError::NoSuchCollection(cid.to_string()))
    }

    pub fn list_collections(&self) -> Result<Vec<Collection>> {
        let mut out = Vec::new();
        for name in fsutil::list_names(&self.root.join("collections"))? {
            if let Ok(c) = self.collection(&name) {
                out.push(c);
            }
        }
        Ok(out)
    }

    /// Adds or changes a member. Only collection admins may do this.
    pub fn set_member(&self, cid: &str, actor: &str, user: &str, role: Option<Role>) -> Result<Collection> {
        let _guard = self.lock(cid, "collection")?;
        let mut c = self.collection(cid)?;
        if c.role_of(actor) != Some(Role::Admin) {
            return Err(DatastoreError::Forbidden(format!("{actor} is not an admin of {cid}")));
        }
        c.members.retain(|m| m.user != user);
        if let Some(role) = role {
            c.members.push(Member {
                user: user.to_string(),
                role,
            });
        }
        if !c.members.iter().any(|m| m.role == Role::Admin) {
            return Err(DatastoreError::LastAdmin);
        }
        fsutil::write_atomic(&self.collection_dir(cid).join("collection.json"), &to_json_bytes(&c))?;
        self.audit(cid, actor, "set_member", user, serde_json::json!({ "role": role }))?;
        Ok(c)
    }

    pub fn import_image(&self, cid: &str, bytes: &[u8], filename: &str, actor: &str) -> Result<Imported> {
        self.collection(cid)?;
        let format = image::guess_format(bytes)
            .map_err(|e| DatastoreError::UndecodableImage(e.to_string()))?;
        let ext = match format {
            image::ImageFormat::Png => "png",
            image::ImageFormat::Jpeg => "jpg",
            other => {
                return Err(DatastoreError::UndecodableImage(format!(
                    "unsupported format {other:?}"
                )))
            }
        };
        let decoded = image::load_from_memory_with_format(bytes, format)
            .map_err(|e| DatastoreError::UndecodableImage(e.to_string()))?;
        let sha = hex::encode(Sha256::digest(bytes));
        let id = format!("i{}", &sha[..12]);
        let images = self.collection_dir(cid).join("images");
        let record_path = images.join(format!("{id}.json"));
        if let Some(existing) = read_json::<ImageRecord>(&record_path)? {
            return Ok(Imported {
                record: existing,
                duplicate: true,
            });
        }
        fsutil::write_atomic(&images.join(format!("{id}.{ext}")), bytes)?;
        let record = ImageRecord {
            id: id.clone(),
            filename: filename.to_string(),
            format: ext.to_string(),
            sha256: sha,
            width: decoded.width(),
            height: decoded.height(),
            subset: Subset::Unassigned,
            quality_rating: None,
            comments: Vec::new(),
        };
        if !fsutil::create_exclusive(&record_path, &to_json_bytes(&record))? {
            let existing = read_json::<ImageRecord>(&record_path)?
                .ok_or_else(|| DatastoreError::UnknownImage(id.clone()))?;
            return Ok(Imported {
                record: existing,
                duplicate: true,
            });
        }
        self.audit(cid, actor, "import_image", &id, serde_json::json!({ "filename": filename }))?;
        Ok(Imported {
            record,
            duplicate: false,
        })
    }

    pub fn import_from(
        &self,
        cid: &str,
        source: &mut dyn ImageSource,
        actor: &str,
    ) -> Vec<Result<Imported>> {
        let mut out = Vec::new();
        while let Some(item) = source.next_image() {
            out.push(
                item.map_err(DatastoreError::from)
                    .and_then(|(name, bytes)| self.import_image(cid, &bytes, &name, actor)),
            );
        }
        out
    }

    pub fn image(&self, cid: &str, iid: &str) -> Result<ImageRecord> {
        if !is_slug(iid) {
            return Err(DatastoreError::UnknownImage(iid.to_string()));
        }
        read_json(&self.collection_dir(cid).join("images").join(format!("{iid}.json")))?
            .ok_or_else(|| DatastoreError::UnknownImage(iid.to_string()))
    }

    pub fn images(&self, cid: &str) -> Result<Vec<ImageRecord>> {
        self.collection(cid)?;
        let mut out = Vec::new();
        for name in fsutil::list_names(&self.collection_dir(cid).join("images"))? {
            if let Some(iid) = name.strip_suffix(".json") {
                out.push(self.image(cid, iid)?);
            }
        }
        Ok(out)
    }

    pub fn image_bytes(&self, cid: &str, iid: &str) -> Result<Vec<u8>> {
        let rec = self.image(cid, iid)?;
        Ok(fs::read(
            self.collection_dir(cid)
                .join("images")
                .join(format!("{}.{}", rec.id, rec.format)),
        )?)
    }

    /// Read-modify-write of an image record under the per-image lock.
    pub fn update_image<F>(&self, cid: &str, iid: &str, f: F) -> Result<ImageRecord>
    where
        F: FnOnce(&mut ImageRecord) -> Result<()>,
    {
        let _guard = self.lock(cid, &format!("image-{iid}"))?;
        let mut rec = self.image(cid, iid)?;
        f(&mut rec)?;
        fsutil::write_atomic(
            &self.collection_dir(cid).join("images").join(format!("{iid}.json")),
            &to_json_bytes(&rec),
        )?;
        Ok(rec)
    }

    pub fn store_mask(&self, cid: &str, iid: &str, node: &str, png: &[u8]) -> Result<PathBuf> {
        let rec = self.image(cid, iid)?;
        let img = image::load_from_memory_with_format(png, image::ImageFormat::Png)
            .map_err(|e| DatastoreError::InvalidMask(e.to_string()))?;
        if (img.width(), img.height()) != (rec.width, rec.height) {
            return Err(DatastoreError::InvalidMask(format!(
                "mask is {}x{}, image is {}x{}",
                img.width(),
                img.height(),
                rec.width,
                rec.height
            )));
        }
        let path = self.mask_path(cid, iid, node);
        fsutil::write_atomic(&path, png)?;
        Ok(path)
    }

    fn revision_path(&self, cid: &str, iid: &str, rev: u32) -> PathBuf {
        self.gt_dir(cid, iid).join(format!("v{rev:05}.xml"))
    }

    /// Current head revision; 0 when the image has never been annotated.
    pub fn head(&self, cid: &str, iid: &str) -> Result<u32> {
        self.image(cid, iid)?;
        let hint = match fsutil::read_opt(&self.gt_dir(cid, iid).join("head"))? {
            Some(b) => String::from_utf8_lossy(&b).trim().parse().unwrap_or(0),
            None => 0,
        };
        let mut head = hint;
        while self.revision_path(cid, iid, head + 1).exists() {
            head += 1;
        }
        Ok(head)
    }

    pub fn save_annotation(
        &self,
        cid: &str,
        iid: &str,
        mut tree: AnnotationTree,
        author: &str,
        expected_head: u32,
        note: &str,
    ) -> Result<AnnotationVersion> {
        let invalid = |v: tree::TreeViolation| DatastoreError::InvalidTree {
            path: v.path,
            reason: v.reason,
        };
        tree::normalize_tree(&mut tree).map_err(invalid)?;
        tree::validate_tree(&tree).map_err(invalid)?;
        if !tree::xml_safe(note) || !tree::xml_safe(author) {
            return Err(DatastoreError::InvalidTree {
                path: String::new(),
                reason: "note or author contains control characters".into(),
            });
        }
        for n in tree::walk_nodes(&tree) {
            if let Region::Mask(_) = n.region {
                if !self.mask_path(cid, iid, &n.id).exists() {
                    return Err(DatastoreError::InvalidTree {
                        path: n.id.clone(),
                        reason: "referenced mask file does not exist".into(),
                    });
                }
            }
        }

        let head = self.head(cid, iid)?;
        if head != expected_head {
            return Err(DatastoreError::StaleHead {
                expected: expected_head,
                actual: head,
            });
        }
        let version = AnnotationVersion {
            image: iid.to_string(),
            revision: head + 1,
            author: author.to_string(),
            timestamp: now_millis(),
            change_note: note.to_string(),
            tree,
        };
        let bytes = xml::to_xml(&version);
        let dir = self.gt_dir(cid, iid);
        fs::create_dir_all(&dir)?;
        let target = self.revision_path(cid, iid, version.revision);

        let tmp = dir.join(format!("{}{}", fsutil::TMP_PREFIX, fsutil::nonce()));
        fs::write(&tmp, bytes.as_bytes())?;
        fs::File::open(&tmp)?.sync_all()?;
        self.inject(WriteStep::RevisionTempWritten)?;
        let linked = fs::hard_link(&tmp, &target);
        match linked {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                let _ = fs::remove_file(&tmp);
                return Err(DatastoreError::StaleHead {
                    expected: expected_head,
                    actual: self.head(cid, iid)?,
                });
            }
            Err(e) => {
                let _ = fs::remove_file(&tmp);
                return Err(e.into());
            }
        }
        self.inject(WriteStep::RevisionLinked)?;
        fs::remove_file(&tmp)?;
        self.inject(WriteStep::RevisionTempRemoved)?;

        let head_tmp = dir.join(format!("{}head-{}", fsutil::TMP_PREFIX, fsutil::nonce()));
        fs::write(&head_tmp, format!("{}\n", version.revision))?;
        self.inject(WriteStep::HeadTempWritten)?;
        fs::rename(&head_tmp, dir.join("head"))?;
        self.inject(WriteStep::HeadRenamed)?;

        self.audit(
            cid,
            author,
            "save_annotation",
            iid,
            serde_json::json!({ "revision": version.revision }),
        )?;
        Ok(version)
    }

    /// Raw canonical XML of a revision (head when `revision` is `None`).
    pub fn annotation_xml(&self, cid: &str, iid: &str, revision: Option<u32>) -> Result<(u32, String)> {
        let head = self.head(cid, iid)?;
        let rev = revision.unwrap_or(head);
        if rev == 0 || rev > head {
            return Err(DatastoreError::NoSuchRevision { requested: rev, head });
        }
        let path = self.revision_path(cid, iid, rev);
        let text = fs::read_to_string(&path)?;
        Ok((rev, text))
    }

    pub fn load_annotation(&self, cid: &str, iid: &str, revision: Option<u32>) -> Result<AnnotationVersion> {
        let (rev, text) = self.annotation_xml(cid, iid, revision)?;
        let v = xml::from_xml(&text).map_err(|e| corrupt(&self.revision_path(cid, iid, rev), e))?;
        if v.revision != rev || v.image != iid {
            return Err(corrupt(&self.revision_path(cid, iid, rev), "header mismatch"));
        }
        Ok(v)
    }

    pub fn assign_subset(&self, cid: &str, ids: &[String], subset: Subset, actor: &str) -> Result<usize> {
        let c = self.collection(cid)?;
        if !c.role_of(actor).is_some_and(Role::can_manage) {
            return Err(DatastoreError::Forbidden(format!("{actor} cannot assign subsets in {cid}")));
        }
        for id in ids {
            self.image(cid, id)?;
        }
        let mut updated = 0;
        for id in ids {
            let mut from = subset;
            self.update_image(cid, id, |r| {
                from = r.subset;
                r.subset = subset;
                Ok(())
            })?;
            self.audit(
                cid,
                actor,
                "assign_subset",
                id,
                serde_json::json!({ "from": from.as_str(), "to": subset.as_str() }),
            )?;
            updated += 1;
        }
        Ok(updated)
    }
}
