//! Annotation lifecycle: reservations, review, quality ratings and the two
//! verification passes over don't-care words.
//!
//! State per image lives in `collections/<cid>/workflow/<iid>.json` and is
//! only mutated under an exclusive per-image file lock. Verdicts are kept as
//! append-only histories in `verification/<stage>/<iid>/<node>.json`.

use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, TimeDelta, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, SystemClock};
use crate::datastore::tree::{find_node_mut, walk_nodes};
use crate::datastore::{
    read_json, to_json_bytes, AnnotationTree, AnnotationVersion, Comment, Datastore, DatastoreError,
    Granularity, Role,
};
use crate::fsutil;
use crate::geometry::{rectification_homography, GeometryError, Homography, Quad};

pub const DEFAULT_RESERVATION: TimeDelta = TimeDelta::hours(24);
pub const MAX_RESERVATION: TimeDelta = TimeDelta::days(7);
/// Height of rectified word crops on verification boards.
pub const CROP_HEIGHT: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkState {
    Unannotated,
    Reserved,
    Submitted,
    RevisionRequested,
    Approved,
}

impl WorkState {
    pub fn as_str(self) -> &'static str {
        match self {
            WorkState::Unannotated => "unannotated",
            WorkState::Reserved => "reserved",
            WorkState::Submitted => "submitted",
            WorkState::RevisionRequested => "revision_requested",
            WorkState::Approved => "approved",
        }
    }

    /// Whether `self -> to` is an edge of the lifecycle graph.
    pub fn can_move_to(self, to: WorkState) -> bool {
        use WorkState::*;
        matches!(
            (self, to),
            (Unannotated, Reserved)
                | (Reserved, Submitted)
                | (Submitted, Approved)
                | (Submitted, RevisionRequested)
                | (RevisionRequested, Reserved)
                | (Reserved, Unannotated)
                | (Reserved, RevisionRequested)
        )
    }
}

impl fmt::Display for WorkState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkItem {
    pub image: String,
    pub state: WorkState,
    pub assignee: Option<String>,
    pub reservation_expiry: Option<DateTime<Utc>>,
    pub rating: Option<u8>,
    /// State the item returns to when the reservation is released.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume_state: Option<WorkState>,
    #[serde(default)]
    pub in_context_done: bool,
}

impl WorkItem {
    fn new(image: &str) -> Self {
        WorkItem {
            image: image.to_string(),
            state: WorkState::Unannotated,
            assignee: None,
            reservation_expiry: None,
            rating: None,
            resume_state: None,
            in_context_done: false,
        }
    }

    /// Structural invariants that must hold after every operation.
    pub fn check(&self) -> Result<(), String> {
        let reserved = self.state == WorkState::Reserved;
        if reserved != (self.assignee.is_some() && self.reservation_expiry.is_some()) {
            return Err(format!("{}: reservation fields inconsistent with {}", self.image, self.state));
        }
        if reserved
            && !matches!(
                self.resume_state,
                Some(WorkState::Unannotated) | Some(WorkState::RevisionRequested)
            )
        {
            return Err(format!("{}: reserved without a resume state", self.image));
        }
        if self.rating.is_some_and(|r| !(1..=5).contains(&r)) {
            return Err(format!("{}: rating out of range", self.image));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewAction {
    Approve,
    RequestRevision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    InContext,
    OutOfContext,
}

impl Stage {
    fn dir(self) -> &'static str {
        match self {
            Stage::InContext => "in_context",
            Stage::OutOfContext => "out_of_context",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Care,
    DontCare,
}

impl Verdict {
    pub fn care(self) -> bool {
        self == Verdict::Care
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationVerdict {
    pub image: String,
    pub node: String,
    pub stage: Stage,
    pub verdict: Verdict,
    pub verifier: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("already reserved by {holder} until {expiry}")]
    AlreadyReservedByOther { holder: String, expiry: DateTime<Utc> },
    #[error("image is {0}, cannot be reserved")]
    NotEligible(WorkState),
    #[error("image is not reserved by you")]
    NotReservedByYou,
    #[error("reservation lapsed; reserve the image again before saving")]
    StaleReservation,
    #[error("no annotation has been saved")]
    NoAnnotationSaved,
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("a comment is required when requesting a revision")]
    CommentRequired,
    #[error("operation not allowed while image is {0}")]
    WrongState(WorkState),
    #[error("reservation duration must be positive and at most 7 days")]
    InvalidDuration,
    #[error("rating must be between 1 and 5")]
    InvalidRating,
    #[error("image has no word annotations")]
    NoWords,
    #[error("no image has completed the in-context pass")]
    NothingEligible,
    #[error("out-of-context verdicts require a completed in-context pass")]
    StageOrderViolation,
    #[error("unknown word node {0:?}")]
    UnknownNode(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Datastore(#[from] DatastoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = WorkflowError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordCrop {
    pub node: String,
    pub transcription: String,
    pub care: bool,
    pub quad: Quad,
    pub crop_width: u32,
    pub crop_height: u32,
    pub homography: Homography,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Board {
    pub image: String,
    pub revision: u32,
    pub care: Vec<WordCrop>,
    pub dont_care: Vec<WordCrop>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordRef {
    pub image: String,
    pub node: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictOutcome {
    pub care: bool,
    /// New revision created by the verdict, if the flag changed.
    pub revision: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DashboardRow {
    pub image: String,
    pub filename: String,
    pub state: WorkState,
    pub assignee: Option<String>,
    pub revisions: u32,
    pub rating: Option<u8>,
    pub comments: usize,
    pub subset: crate::datastore::Subset,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct DashboardFilter {
    pub state: Option<WorkState>,
    pub assignee: Option<String>,
    pub rating: Option<u8>,
}

/// Rectified crop geometry for one word: height fixed, width by aspect.
pub fn crop_for(quad: &Quad) -> Result<(u32, u32, Homography), GeometryError> {
    let (w, h) = quad.mean_extent();
    let width = ((CROP_HEIGHT as f64) * w / h).round().max(1.0) as u32;
    let hm = rectification_homography(quad, width as f64, CROP_HEIGHT as f64)?;
    Ok((width, CROP_HEIGHT, hm))
}

#[derive(Clone)]
pub struct Workflow {
    ds: Datastore,
    clock: Arc<dyn Clock>,
}

impl Workflow {
    pub fn new(ds: Datastore) -> Self {
        Workflow {
            ds,
            clock: Arc::new(SystemClock),
        }
    }

    pub fn with_clock(ds: Datastore, clock: Arc<dyn Clock>) -> Self {
        Workflow { ds, clock }
    }

    pub fn datastore(&self) -> &Datastore {
        &self.ds
    }

    fn item_path(&self, cid: &str, iid: &str) -> std::path::PathBuf {
        self.ds.collection_dir(cid).join("workflow").join(format!("{iid}.json"))
    }

    pub fn item(&self, cid: &str, iid: &str) -> Result<WorkItem> {
        self.ds.image(cid, iid)?;
        Ok(read_json(&self.item_path(cid, iid))?.unwrap_or_else(|| WorkItem::new(iid)))
    }

    fn member_role(&self, cid: &str, user: &str) -> Result<Role> {
        self.ds
            .collection(cid)?
            .role_of(user)
            .ok_or_else(|| WorkflowError::Forbidden(format!("{user} is not a member of {cid}")))
    }

    /// Runs `f` on the item under the per-image lock and persists the result.
    fn mutate<T>(
        &self,
        cid: &str,
        iid: &str,
        actor: &str,
        action: &str,
        f: impl FnOnce(&mut WorkItem, DateTime<Utc>) -> Result<T>,
    ) -> Result<(WorkItem, T)> {
        let _guard = self.ds.lock(cid, &format!("work-{iid}"))?;
        let mut item = self.item(cid, iid)?;
        let now = self.clock.now();
        lapse_if_expired(&mut item, now);
        let before = item.clone();
        let out = f(&mut item, now)?;
        if item != before {
            fsutil::write_atomic(&self.item_path(cid, iid), &to_json_bytes(&item))?;
            let from = before.state;
            self.ds.audit(
                cid,
                actor,
                action,
                iid,
                serde_json::json!({
                    "from": from.as_str(),
                    "to": item.state.as_str(),
                    "assignee": item.assignee,
                    "expiry": item.reservation_expiry,
                }),
            )?;
        }
        Ok((item, out))
    }

    pub fn reserve(&self, cid: &str, iid: &str, annotator: &str, duration: Option<TimeDelta>) -> Result<WorkItem> {
        self.member_role(cid, annotator)?;
        let duration = duration.unwrap_or(DEFAULT_RESERVATION);
        if duration <= TimeDelta::zero() || duration > MAX_RESERVATION {
            return Err(WorkflowError::InvalidDuration);
        }
        let (item, ()) = self.mutate(cid, iid, annotator, "reserve", |item, now| {
            match item.state {
                WorkState::Reserved if item.assignee.as_deref() == Some(annotator) => {}
                WorkState::Reserved => {
                    return Err(WorkflowError::AlreadyReservedByOther {
                        holder: item.assignee.clone().unwrap_or_default(),
                        expiry: item.reservation_expiry.unwrap_or(now),
                    })
                }
                WorkState::Unannotated | WorkState::RevisionRequested => {
                    item.resume_state = Some(item.state);
                    item.state = WorkState::Reserved;
                    item.assignee = Some(annotator.to_string());
                }
                other => return Err(WorkflowError::NotEligible(other)),
            }
            item.reservation_expiry = Some(now + duration);
            Ok(())
        })?;
        Ok(item)
    }

    pub fn release(&self, cid: &str, iid: &str, annotator: &str) -> Result<WorkItem> {
        let (item, ()) = self.mutate(cid, iid, annotator, "release", |item, _| {
            if item.state != WorkState::Reserved || item.assignee.as_deref() != Some(annotator) {
                return Err(WorkflowError::NotReservedByYou);
            }
            end_reservation(item);
            Ok(())
        })?;
        Ok(item)
    }

    /// Saves a revision on behalf of the reservation holder.
    pub fn save_annotation(
        &self,
        cid: &str,
        iid: &str,
        annotator: &str,
        tree: AnnotationTree,
        expected_head: u32,
        note: &str,
    ) -> Result<AnnotationVersion> {
        let _guard = self.ds.lock(cid, &format!("work-{iid}"))?;
        let item = self.item(cid, iid)?;
        let now = self.clock.now();
        let held = item.state == WorkState::Reserved
            && item.assignee.as_deref() == Some(annotator)
            && item.reservation_expiry.is_some_and(|e| e >= now);
        if !held {
            return Err(if item.assignee.as_deref() == Some(annotator) {
                WorkflowError::StaleReservation
            } else {
                WorkflowError::NotReservedByYou
            });
        }
        Ok(self
            .ds
            .save_annotation(cid, iid, tree, annotator, expected_head, note)?)
    }

    pub fn submit_for_review(&self, cid: &str, iid: &str, annotator: &str) -> Result<WorkItem> {
        let head = self.ds.head(cid, iid)?;
        let (item, ()) = self.mutate(cid, iid, annotator, "submit", |item, _| {
            if item.state != WorkState::Reserved || item.assignee.as_deref() != Some(annotator) {
                return Err(WorkflowError::NotReservedByYou);
            }
            if head == 0 {
                return Err(WorkflowError::NoAnnotationSaved);
            }
            item.state = WorkState::Submitted;
            item.assignee = None;
            item.reservation_expiry = None;
            item.resume_state = None;
            Ok(())
        })?;
        Ok(item)
    }

    pub fn review(
        &self,
        cid: &str,
        iid: &str,
        reviewer: &str,
        action: ReviewAction,
        rating: Option<u8>,
        comment: Option<&str>,
    ) -> Result<WorkItem> {
        if !self.member_role(cid, reviewer)?.can_manage() {
            return Err(WorkflowError::Forbidden(format!("{reviewer} cannot review in {cid}")));
        }
        if rating.is_some_and(|r| !(1..=5).contains(&r)) {
            return Err(WorkflowError::InvalidRating);
        }
        let comment = comment.map(str::trim).filter(|c| !c.is_empty());
        let (item, ()) = self.mutate(cid, iid, reviewer, "review", |item, _| {
            if item.state != WorkState::Submitted {
                return Err(WorkflowError::WrongState(item.state));
            }
            match action {
                ReviewAction::Approve => item.state = WorkState::Approved,
                ReviewAction::RequestRevision => {
                    if comment.is_none() {
                        return Err(WorkflowError::CommentRequired);
                    }
                    item.state = WorkState::RevisionRequested;
                }
            }
            if rating.is_some() {
                item.rating = rating;
            }
            Ok(())
        })?;
        if rating.is_some() || comment.is_some() {
            let now = self.clock.now();
            self.ds.update_image(cid, iid, |rec| {
                if rating.is_some() {
                    rec.quality_rating = rating;
                }
                if let Some(text) = comment {
                    rec.comments.push(Comment {
                        author: reviewer.to_string(),
                        timestamp: now,
                        text: text.to_string(),
                    });
                }
                Ok(())
            })?;
        }
        Ok(item)
    }

    /// Returns lapsed reservations to their pre-reservation state.
    pub fn expire_reservations(&self, cid: &str, now: DateTime<Utc>) -> Result<usize> {
        let mut released = 0;
        for name in fsutil::list_names(&self.ds.collection_dir(cid).join("workflow"))? {
            let Some(iid) = name.strip_suffix(".json") else {
                continue;
            };
            let _guard = self.ds.lock(cid, &format!("work-{iid}"))?;
            let mut item = self.item(cid, iid)?;
            let from = item.state;
            if lapse_if_expired(&mut item, now) {
                fsutil::write_atomic(&self.item_path(cid, iid), &to_json_bytes(&item))?;
                self.ds.audit(
                    cid,
                    "system",
                    "expire",
                    iid,
                    serde_json::json!({ "from": from.as_str(), "to": item.state.as_str() }),
                )?;
                released += 1;
            }
        }
        Ok(released)
    }

    pub fn dashboard(&self, cid: &str, filter: &DashboardFilter) -> Result<Vec<DashboardRow>> {
        let mut rows = Vec::new();
        let now = self.clock.now();
        for rec in self.ds.images(cid)? {
            let mut item = self.item(cid, &rec.id)?;
            lapse_if_expired(&mut item, now);
            let row = DashboardRow {
                revisions: self.ds.head(cid, &rec.id)?,
                image: rec.id,
                filename: rec.filename,
                state: item.state,
                assignee: item.assignee,
                rating: item.rating,
                comments: rec.comments.len(),
                subset: rec.subset,
            };
            let keep = filter.state.is_none_or(|s| s == row.state)
                && filter
                    .assignee
                    .as_ref()
                    .is_none_or(|a| row.assignee.as_ref() == Some(a))
                && filter.rating.is_none_or(|r| row.rating == Some(r));
            if keep {
                rows.push(row);
            }
        }
        Ok(rows)
    }

    pub fn in_context_board(&self, cid: &str, iid: &str) -> Result<Board> {
        let item = self.item(cid, iid)?;
        if !matches!(item.state, WorkState::Approved | WorkState::Submitted) {
            return Err(WorkflowError::WrongState(item.state));
        }
        if self.ds.head(cid, iid)? == 0 {
            return Err(WorkflowError::NoWords);
        }
        let v = self.ds.load_annotation(cid, iid, None)?;
        let mut board = Board {
            image: iid.to_string(),
            revision: v.revision,
            care: Vec::new(),
            dont_care: Vec::new(),
        };
        for n in walk_nodes(&v.tree) {
            if n.granularity != Granularity::Word {
                continue;
            }
            let Some(quad) = n.region.quad() else {
                continue;
            };
            let (crop_width, crop_height, homography) = crop_for(&quad)?;
            let crop = WordCrop {
                node: n.id.clone(),
                transcription: n.transcription.clone(),
                care: n.care,
                quad,
                crop_width,
                crop_height,
                homography,
            };
            if n.care {
                board.care.push(crop);
            } else {
                board.dont_care.push(crop);
            }
        }
        if board.care.is_empty() && board.dont_care.is_empty() {
            return Err(WorkflowError::NoWords);
        }
        Ok(board)
    }

    fn verdict_path(&self, cid: &str, stage: Stage, iid: &str, node: &str) -> std::path::PathBuf {
        self.ds
            .collection_dir(cid)
            .join("verification")
            .join(stage.dir())
            .join(iid)
            .join(format!("{node}.json"))
    }

    fn verdicts(&self, cid: &str, stage: Stage, iid: &str, node: &str) -> Result<Vec<VerificationVerdict>> {
        Ok(read_json(&self.verdict_path(cid, stage, iid, node))?.unwrap_or_default())
    }

    /// Verdict that currently decides the node's care flag: the latest one of
    /// the highest stage.
    pub fn effective_verdict(&self, cid: &str, iid: &str, node: &str) -> Result<Option<VerificationVerdict>> {
        for stage in [Stage::OutOfContext, Stage::InContext] {
            let mut hist = self.verdicts(cid, stage, iid, node)?;
            // Stable sort keeps recording order among equal timestamps.
            hist.sort_by_key(|v| v.timestamp);
            if let Some(last) = hist.pop() {
                return Ok(Some(last));
            }
        }
        Ok(None)
    }

    /// Re-derives care flags of `nodes` from their verdicts and saves one
    /// revision if anything changed. Caller holds the image lock.
    fn apply_verdicts(&self, cid: &str, iid: &str, actor: &str, nodes: &[String], note: &str) -> Result<Option<u32>> {
        for _ in 0..3 {
            let v = self.ds.load_annotation(cid, iid, None)?;
            let mut tree = v.tree.clone();
            let mut changed = false;
            for node in nodes {
                let Some(eff) = self.effective_verdict(cid, iid, node)? else {
                    continue;
                };
                let n = find_node_mut(&mut tree, node)
                    .ok_or_else(|| WorkflowError::UnknownNode(node.clone()))?;
                if n.care != eff.verdict.care() {
                    n.care = eff.verdict.care();
                    changed = true;
                }
            }
            if !changed {
                return Ok(None);
            }
            match self.ds.save_annotation(cid, iid, tree, actor, v.revision, note) {
                Ok(saved) => return Ok(Some(saved.revision)),
                Err(DatastoreError::StaleHead { .. }) => continue,
                Err(e) => return Err(e.into()),
            }
        }
        Err(WorkflowError::Datastore(DatastoreError::StaleHead {
            expected: 0,
            actual: self.ds.head(cid, iid)?,
        }))
    }

    fn word_node_exists(&self, cid: &str, iid: &str, node: &str) -> Result<bool> {
        if self.ds.head(cid, iid)? == 0 {
            return Ok(false);
        }
        let v = self.ds.load_annotation(cid, iid, None)?;
        Ok(walk_nodes(&v.tree)
            .iter()
            .any(|n| n.id == node && n.granularity == Granularity::Word))
    }

    fn push_verdict(&self, cid: &str, v: &VerificationVerdict) -> Result<()> {
        let mut hist = self.verdicts(cid, v.stage, &v.image, &v.node)?;
        hist.push(v.clone());
        fsutil::write_atomic(&self.verdict_path(cid, v.stage, &v.image, &v.node), &to_json_bytes(&hist))?;
        self.ds.audit(
            cid,
            &v.verifier,
            "verdict",
            &format!("{}/{}", v.image, v.node),
            serde_json::to_value(v).unwrap_or_default(),
        )?;
        Ok(())
    }

    /// Applies a batch of in-context moves (node, care) and completes the
    /// in-context pass for the image.
    pub fn apply_board(&self, cid: &str, iid: &str, actor: &str, moves: &[(String, bool)]) -> Result<VerdictOutcomeBatch> {
        self.member_role(cid, actor)?;
        let _guard = self.ds.lock(cid, &format!("work-{iid}"))?;
        let item = self.item(cid, iid)?;
        if !matches!(item.state, WorkState::Approved | WorkState::Submitted) {
            return Err(WorkflowError::WrongState(item.state));
        }
        for (node, _) in moves {
            if !self.word_node_exists(cid, iid, node)? {
                return Err(WorkflowError::UnknownNode(node.clone()));
            }
        }
        let now = self.clock.now();
        for (node, care) in moves {
            self.push_verdict(
                cid,
                &VerificationVerdict {
                    image: iid.to_string(),
                    node: node.clone(),
                    stage: Stage::InContext,
                    verdict: if *care { Verdict::Care } else { Verdict::DontCare },
                    verifier: actor.to_string(),
                    timestamp: now,
                },
            )?;
        }
        let nodes: Vec<String> = moves.iter().map(|(n, _)| n.clone()).collect();
        let revision = self.apply_verdicts(cid, iid, actor, &nodes, "in-context verification")?;
        if !item.in_context_done {
            let mut done = item.clone();
            done.in_context_done = true;
            fsutil::write_atomic(&self.item_path(cid, iid), &to_json_bytes(&done))?;
            self.ds.audit(cid, actor, "in_context_done", iid, serde_json::json!({}))?;
        }
        Ok(VerdictOutcomeBatch {
            revision,
            moves: moves.len(),
        })
    }

    /// Seeded permutation of every word from images whose in-context pass is
    /// complete, with same-image neighbours separated where possible.
    pub fn out_of_context_queue(&self, cid: &str, seed: u64) -> Result<Vec<WordRef>> {
        let mut words = Vec::new();
        for rec in self.ds.images(cid)? {
            let item = self.item(cid, &rec.id)?;
            if !item.in_context_done {
                continue;
            }
            let v = self.ds.load_annotation(cid, &rec.id, None)?;
            for n in walk_nodes(&v.tree) {
                if n.granularity == Granularity::Word && n.region.quad().is_some() {
                    words.push(WordRef {
                        image: rec.id.clone(),
                        node: n.id.clone(),
                    });
                }
            }
        }
        if words.is_empty() {
            return Err(WorkflowError::NothingEligible);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        words.shuffle(&mut rng);
        separate_neighbours(&mut words);
        let record = serde_json::json!({ "seed": seed, "queue": words });
        fsutil::write_atomic(
            &self
                .ds
                .collection_dir(cid)
                .join("verification")
                .join("out_of_context")
                .join(format!("queue-{seed}.json")),
            &to_json_bytes(&record),
        )?;
        Ok(words)
    }

    pub fn record_verdict(&self, cid: &str, v: &VerificationVerdict) -> Result<VerdictOutcome> {
        self.member_role(cid, &v.verifier)?;
        let _guard = self.ds.lock(cid, &format!("work-{}", v.image))?;
        let item = self.item(cid, &v.image)?;
        match v.stage {
            Stage::InContext if !matches!(item.state, WorkState::Approved | WorkState::Submitted) => {
                return Err(WorkflowError::WrongState(item.state))
            }
            Stage::OutOfContext if !item.in_context_done => {
                return Err(WorkflowError::StageOrderViolation)
            }
            _ => {}
        }
        if !self.word_node_exists(cid, &v.image, &v.node)? {
            return Err(WorkflowError::UnknownNode(v.node.clone()));
        }
        self.push_verdict(cid, v)?;
        let revision = self.apply_verdicts(
            cid,
            &v.image,
            &v.verifier,
            std::slice::from_ref(&v.node),
            "verification verdict",
        )?;
        let current = self.ds.load_annotation(cid, &v.image, None)?;
        let care = walk_nodes(&current.tree)
            .into_iter()
            .find(|n| n.id == v.node)
            .map(|n| n.care)
            .unwrap_or(v.verdict.care());
        Ok(VerdictOutcome { care, revision })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictOutcomeBatch {
    pub revision: Option<u32>,
    pub moves: usize,
}

fn end_reservation(item: &mut WorkItem) {
    item.state = item.resume_state.take().unwrap_or(WorkState::Unannotated);
    item.assignee = None;
    item.reservation_expiry = None;
}

fn lapse_if_expired(item: &mut WorkItem, now: DateTime<Utc>) -> bool {
    if item.state == WorkState::Reserved && item.reservation_expiry.is_some_and(|e| e < now) {
        end_reservation(item);
        true
    } else {
        false
    }
}

/// One greedy pass: whenever two neighbours share an image, swap in the
/// next entry from a different image.
pub fn separate_neighbours(words: &mut [WordRef]) {
    for i in 1..words.len() {
        if words[i].image != words[i - 1].image {
            continue;
        }
        if let Some(j) = (i + 1..words.len()).find(|&j| words[j].image != words[i - 1].image) {
            words.swap(i, j);
        }
    }
}
