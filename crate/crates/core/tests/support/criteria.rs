//! Suites shared by the per-crate integration tests and the acceptance
//! target. Each returns a one-line summary on success.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use chrono::{TimeDelta, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrc_core::clock::{Clock, ManualClock};
use rrc_core::datastore::xml::{from_xml, to_xml};
use rrc_core::datastore::{AnnotationVersion, Datastore, Role, Subset, WriteStep};
use rrc_core::evalcore::{
    aggregate, evaluate_sample, report_json, text, GtRegion, ProtocolKind, ProtocolParams, SampleEval,
};
use rrc_core::evalcore::matching::{match_deteval, match_iou, DetEvalParams};
use rrc_core::geometry::{iou, rectification_homography, warp_sample, Quad};
use rrc_core::ingest::{Detection, ResultFile};
use rrc_core::synth;
use rrc_core::workflow::{ReviewAction, WorkState, Workflow, WorkflowError};

use super::oracles;
use super::scenes::{random_scene, shrunk};

pub type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn geometry(n: usize) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e0);
    let mut worst_iou: f64 = 0.0;
    let mut worst_corner: f64 = 0.0;
    for _ in 0..n {
        let ra = rng.random_range(15.0..40.0);
        let a = oracles::random_quad(&mut rng, 50.0, 50.0, ra);
        let (dx, dy, rb) = (
            rng.random_range(-25.0..25.0),
            rng.random_range(-25.0..25.0),
            rng.random_range(15.0..40.0),
        );
        let b = oracles::random_quad(&mut rng, 50.0 + dx, 50.0 + dy, rb);
        worst_iou = worst_iou.max((iou(&a, &b) - oracles::raster_iou(&a, &b, 0.05)).abs());

        let (w, h) = (rng.random_range(8.0..400.0), 64.0);
        let hm = rectification_homography(&a, w, h).map_err(|e| e.to_string())?;
        let inv = hm.inverse().map_err(|e| e.to_string())?;
        let targets = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
        for (c, t) in a.corners().iter().zip(targets) {
            let p = warp_sample(&hm, *c).map_err(|e| e.to_string())?;
            worst_corner = worst_corner.max((p.x - t.0).hypot(p.y - t.1));
            let back = warp_sample(&inv, rrc_core::geometry::Point::new(t.0, t.1)).map_err(|e| e.to_string())?;
            worst_corner = worst_corner.max((back.x - c.x).hypot(back.y - c.y));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let summary = format!("{n} pairs, max |dIoU| {worst_iou:.2e}, max corner error {worst_corner:.2e} px, {secs:.1}s");
    ensure(worst_iou < 1e-3 && worst_corner < 1e-6 && secs < 60.0, || summary.clone())?;
    Ok(summary)
}

fn quads(gt: &[GtRegion]) -> Vec<Quad> {
    gt.iter().map(|g| g.quad).collect()
}

/// Greedy IoU cardinality against exhaustive maximum matching, DetEval
/// credit values, and the hand-derived scene.
pub fn metric_oracle(scenes: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7);
    let mut matched_total = 0;
    for k in 0..scenes {
        let s = random_scene(&mut rng, 6, 6, false);
        let (g, d) = (quads(&s.gt), s.dets.iter().map(|d| d.quad).collect::<Vec<_>>());
        let greedy = match_iou(&g, &d, 0.5).len();
        let adj: Vec<Vec<bool>> = g.iter().map(|a| d.iter().map(|b| iou(a, b) >= 0.5).collect()).collect();
        let best = oracles::max_matching(&adj);
        ensure(greedy == best, || format!("scene {k}: greedy {greedy} vs maximum {best}"))?;
        matched_total += greedy;

        let o = match_deteval(&g, &d, &DetEvalParams::default());
        for c in o.gt_credit.iter().chain(&o.det_credit) {
            ensure([0.0, 0.8, 1.0].contains(c), || format!("scene {k}: DetEval credit {c}"))?;
        }
    }

    let r = |x0, y0, x1, y1| Quad::axis_rect(x0, y0, x1, y1).expect("box");
    let gt = [gt_region("A", r(0.0, 0.0, 100.0, 10.0)), gt_region("B", r(200.0, 0.0, 300.0, 10.0))];
    let dets = [r(0.0, 0.0, 60.0, 10.0), r(0.0, 0.0, 55.0, 10.0), r(200.0, 0.0, 220.0, 10.0)];
    let s = run(ProtocolKind::LocalizationIou, &gt, &dets.map(det));
    ensure(s.precision == 1.0 / 3.0 && s.recall == 0.5 && s.hmean == 0.4, || {
        format!("hand scene P={} R={} H={}", s.precision, s.recall, s.hmean)
    })?;
    Ok(format!("{scenes} scenes, {matched_total} greedy matches equal maximum; hand scene P=1/3 R=1/2 H=0.4"))
}

fn gt_region(id: &str, quad: Quad) -> GtRegion {
    GtRegion {
        id: id.into(),
        quad,
        care: true,
        transcription: id.into(),
    }
}

fn det(quad: Quad) -> Detection {
    Detection {
        quad,
        confidence: None,
        transcription: None,
    }
}

fn run(kind: ProtocolKind, gt: &[GtRegion], dets: &[Detection]) -> SampleEval {
    evaluate_sample(kind, &ProtocolParams::default(), "img", gt, &ResultFile::Detections(dets.to_vec()))
        .expect("evaluates")
}

/// Detections injected strictly inside don't-care regions leave every
/// score unchanged.
pub fn dontcare_metamorphic(scenes: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xdc);
    let kinds = [ProtocolKind::LocalizationIou, ProtocolKind::LocalizationDeteval, ProtocolKind::EndToEnd];
    let mut injected = 0;
    let mut done = 0;
    while done < scenes {
        let s = random_scene(&mut rng, 6, 6, true);
        let dc: Vec<&GtRegion> = s.gt.iter().filter(|g| !g.care).collect();
        if dc.is_empty() {
            continue;
        }
        done += 1;
        let mut more = s.dets.clone();
        for _ in 0..rng.random_range(1..=3) {
            let g = dc[rng.random_range(0..dc.len())];
            more.push(Detection {
                quad: shrunk(&g.quad, rng.random_range(0.2..0.95)),
                confidence: None,
                transcription: Some("###".into()),
            });
            injected += 1;
        }
        for kind in kinds {
            let before = run(kind, &s.gt, &s.dets);
            let mut after = run(kind, &s.gt, &more);
            let a = report_json(&aggregate("p", kind, std::slice::from_ref(&before)));
            let b = report_json(&aggregate("p", kind, std::slice::from_ref(&after)));
            ensure(a == b, || format!("{}: overall changed on scene {done}", kind.as_str()))?;
            ensure(after.ignored_det.len() >= more.len() - s.dets.len(), || {
                format!("{}: injected detection not ignored", kind.as_str())
            })?;
            after.ignored_det = before.ignored_det.clone();
            ensure(report_json(&before) == report_json(&after), || {
                format!("{}: per-sample result changed on scene {done}", kind.as_str())
            })?;
        }
    }
    Ok(format!("{scenes} scenes, {injected} injected detections, 3 protocols byte-identical"))
}

pub fn recognition(samples: usize) -> Outcome {
    let v = text::nes("HELLO", "HELO");
    ensure((v - 0.8).abs() <= 1e-12, || format!("NES(HELLO, HELO) = {v}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e5);
    let alphabet: Vec<char> = "abcAB ΣσςéÉ,".chars().collect();
    let word = |rng: &mut ChaCha8Rng| -> String {
        (0..rng.random_range(0..9)).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
    };
    for _ in 0..samples {
        let (a, b) = (word(&mut rng), word(&mut rng));
        let n = text::nes(&a, &b);
        ensure((0.0..=1.0).contains(&n), || format!("NES({a:?}, {b:?}) = {n}"))?;
        ensure(n.to_bits() == text::nes(&b, &a).to_bits(), || format!("NES asymmetric on {a:?}, {b:?}"))?;
        let d = oracles::edit_distance(&a, &b);
        ensure(text::levenshtein(&a, &b) == d, || format!("distance mismatch on {a:?}, {b:?}"))?;
        let len = a.chars().count().max(b.chars().count());
        let expect = if len == 0 { 1.0 } else { 1.0 - d as f64 / len as f64 };
        ensure((n - expect).abs() < 1e-12, || format!("NES({a:?}, {b:?}) = {n}, oracle {expect}"))?;
    }
    Ok(format!("NES(HELLO,HELO)={v}; {samples} random pairs in [0,1], symmetric, oracle-equal"))
}

/// Reference model of one work item.
#[derive(Debug, Clone, PartialEq)]
struct Model {
    state: WorkState,
    holder: Option<String>,
    expiry: Option<chrono::DateTime<Utc>>,
    resume: Option<WorkState>,
    head: u32,
}

const USERS: [&str; 3] = ["ann", "bob", "rev"];

/// Random operation sequences checked step by step against a model, then
/// the audit trail against the lifecycle graph.
pub fn workflow_sequences(root: &std::path::Path, ops: usize, seed: u64) -> Outcome {
    let ds = Datastore::open(root).map_err(|e| e.to_string())?;
    ds.create_collection("wf", "wf", "rev").map_err(|e| e.to_string())?;
    for u in ["ann", "bob"] {
        ds.set_member("wf", "rev", u, Some(Role::Contributor)).map_err(|e| e.to_string())?;
    }
    let mut ids = Vec::new();
    for i in 0..3 {
        let rec = ds.import_image("wf", &synth::png(8, 8, i), &format!("{i}.png"), "rev").map_err(|e| e.to_string())?;
        ids.push(rec.record.id);
    }
    let t0 = Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).single().ok_or("time")?;
    let clock = Arc::new(ManualClock::new(t0));
    let wf = Workflow::with_clock(ds.clone(), clock.clone());
    let mut model: HashMap<String, Model> = ids
        .iter()
        .map(|i| {
            (i.clone(), Model { state: WorkState::Unannotated, holder: None, expiry: None, resume: None, head: 0 })
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tree = synth::random_tree(&mut synth::rng(seed), 64, 200);
    let mut counts = BTreeMap::<&str, usize>::new();

    for step in 0..ops {
        let slot = rng.random_range(0..ids.len());
        if model[&ids[slot]].state == WorkState::Approved {
            // Approved is terminal; replace it with a fresh image.
            let n = model.len() as u64;
            let rec = ds.import_image("wf", &synth::png(8, 8, 100 + n), &format!("{n}.png"), "rev").map_err(|e| e.to_string())?;
            ids[slot] = rec.record.id.clone();
            model.insert(
                rec.record.id,
                Model { state: WorkState::Unannotated, holder: None, expiry: None, resume: None, head: 0 },
            );
        }
        let iid = ids[slot].clone();
        let now = clock.now();
        let m = model.get_mut(&iid).expect("modelled");
        let op = rng.random_range(0..9);
        // Bias towards actors that can make progress so the lifecycle is
        // exercised beyond its rejection paths.
        let user = match (&m.holder, op) {
            (Some(h), 1..=3) if rng.random_bool(0.8) => USERS.iter().copied().find(|u| u == h).unwrap_or("ann"),
            (_, 4 | 5) if rng.random_bool(0.8) => "rev",
            _ => USERS[rng.random_range(0..USERS.len())],
        };
        if m.state == WorkState::Reserved && m.expiry.is_some_and(|e| e < now) {
            m.state = m.resume.take().unwrap_or(WorkState::Unannotated);
            m.holder = None;
            m.expiry = None;
        }
        let holds = m.state == WorkState::Reserved && m.holder.as_deref() == Some(user);
        let name = ["reserve", "release", "save", "submit", "approve", "revise", "tick", "expire", "bad-duration"][op];
        *counts.entry(name).or_default() += 1;
        let res: Result<(), WorkflowError> = match op {
            0 => {
                let dur = TimeDelta::minutes(rng.random_range(1..600));
                let expect_ok = match m.state {
                    WorkState::Reserved => holds,
                    WorkState::Unannotated | WorkState::RevisionRequested => true,
                    _ => false,
                };
                let r = wf.reserve("wf", &iid, user, Some(dur)).map(|_| ());
                if expect_ok {
                    if m.state != WorkState::Reserved {
                        m.resume = Some(m.state);
                        m.state = WorkState::Reserved;
                        m.holder = Some(user.into());
                    }
                    m.expiry = Some(now + dur);
                }
                check_outcome(step, name, &r, expect_ok)?;
                r
            }
            1 => {
                let r = wf.release("wf", &iid, user).map(|_| ());
                if holds {
                    m.state = m.resume.take().unwrap_or(WorkState::Unannotated);
                    m.holder = None;
                    m.expiry = None;
                }
                check_outcome(step, name, &r, holds)?;
                r
            }
            2 => {
                let stale = rng.random_bool(0.1);
                let expected = if stale { m.head + 1 } else { m.head };
                let r = wf.save_annotation("wf", &iid, user, tree.clone(), expected, "edit").map(|_| ());
                let ok = holds && !stale;
                if ok {
                    m.head += 1;
                }
                check_outcome(step, name, &r, ok)?;
                r
            }
            3 => {
                let r = wf.submit_for_review("wf", &iid, user).map(|_| ());
                let ok = holds && m.head > 0;
                if ok {
                    m.state = WorkState::Submitted;
                    m.holder = None;
                    m.expiry = None;
                    m.resume = None;
                }
                check_outcome(step, name, &r, ok)?;
                r
            }
            4 | 5 => {
                let action = if op == 4 { ReviewAction::Approve } else { ReviewAction::RequestRevision };
                let comment = rng.random_bool(0.8).then_some("please fix");
                let r = wf.review("wf", &iid, user, action, Some(rng.random_range(1..=5)), comment).map(|_| ());
                let ok = user == "rev"
                    && m.state == WorkState::Submitted
                    && (op == 4 || comment.is_some());
                if ok {
                    m.state = if op == 4 { WorkState::Approved } else { WorkState::RevisionRequested };
                }
                check_outcome(step, name, &r, ok)?;
                r
            }
            6 => {
                clock.advance(TimeDelta::minutes(rng.random_range(1..240)));
                Ok(())
            }
            7 => wf.expire_reservations("wf", now).map(|_| ()),
            _ => {
                let r = wf.reserve("wf", &iid, user, Some(TimeDelta::days(8))).map(|_| ());
                check_outcome(step, name, &r, false)?;
                r
            }
        };
        let _ = res;
        let item = wf.item("wf", &iid).map_err(|e| e.to_string())?;
        item.check().map_err(|e| format!("step {step}: {e}"))?;
        let m = &model[&iid];
        // The stored item may still show a lapsed reservation that the
        // model has already ended; both describe the same logical state.
        let mut stored = item.clone();
        if stored.state == WorkState::Reserved && stored.reservation_expiry.is_some_and(|e| e < clock.now()) {
            stored.state = stored.resume_state.unwrap_or(WorkState::Unannotated);
            stored.assignee = None;
        }
        let mut expect = m.clone();
        if expect.state == WorkState::Reserved && expect.expiry.is_some_and(|e| e < clock.now()) {
            expect.state = expect.resume.unwrap_or(WorkState::Unannotated);
            expect.holder = None;
        }
        ensure(stored.state == expect.state && stored.assignee == expect.holder, || {
            format!("step {step} ({name}): stored {:?} vs model {:?}", item, m)
        })?;
        if stored.state == WorkState::Reserved {
            ensure(item.reservation_expiry == m.expiry, || format!("step {step}: expiry diverged"))?;
        }
    }

    let audit = ds.read_audit("wf").map_err(|e| e.to_string())?;
    let mut edges = 0;
    for e in &audit {
        let (Some(from), Some(to)) = (e.detail.get("from"), e.detail.get("to")) else {
            continue;
        };
        if e.action == "assign_subset" {
            continue;
        }
        let parse = |v: &serde_json::Value| -> Result<WorkState, String> {
            serde_json::from_value(v.clone()).map_err(|err| format!("audit state {v}: {err}"))
        };
        let (from, to) = (parse(from)?, parse(to)?);
        ensure(from == to || from.can_move_to(to), || format!("illegal audited transition {from} -> {to}"))?;
        edges += 1;
    }
    Ok(format!("{ops} ops ({} kinds) matched the model; {edges} audited transitions legal", counts.len()))
}

fn check_outcome(step: usize, name: &str, r: &Result<(), WorkflowError>, expect_ok: bool) -> Result<(), String> {
    match (r, expect_ok) {
        (Ok(()), true) | (Err(_), false) => Ok(()),
        (Ok(()), false) => Err(format!("step {step}: {name} succeeded but the model forbids it")),
        (Err(e), true) => Err(format!("step {step}: {name} failed unexpectedly: {e}")),
    }
}

/// `threads` concurrent reservations of one image from distinct users.
pub fn reserve_storm(root: &std::path::Path, threads: usize) -> Outcome {
    let ds = Datastore::open(root).map_err(|e| e.to_string())?;
    ds.create_collection("storm", "storm", "admin").map_err(|e| e.to_string())?;
    let iid = ds.import_image("storm", &synth::png(8, 8, 1), "a.png", "admin").map_err(|e| e.to_string())?.record.id;
    for t in 0..threads {
        ds.set_member("storm", "admin", &format!("u{t}"), Some(Role::Contributor)).map_err(|e| e.to_string())?;
    }
    let wins = Arc::new(AtomicUsize::new(0));
    let barrier = Arc::new(std::sync::Barrier::new(threads));
    let handles: Vec<_> = (0..threads)
        .map(|t| {
            let (wf, iid, wins, barrier) = (Workflow::new(ds.clone()), iid.clone(), wins.clone(), barrier.clone());
            std::thread::spawn(move || {
                barrier.wait();
                match wf.reserve("storm", &iid, &format!("u{t}"), None) {
                    Ok(_) => {
                        wins.fetch_add(1, Ordering::SeqCst);
                    }
                    Err(WorkflowError::AlreadyReservedByOther { .. }) => {}
                    Err(e) => panic!("unexpected error {e}"),
                }
            })
        })
        .collect();
    for h in handles {
        h.join().map_err(|_| "storm thread panicked".to_string())?;
    }
    let winners = wins.load(Ordering::SeqCst);
    let item = Workflow::new(ds).item("storm", &iid).map_err(|e| e.to_string())?;
    ensure(winners == 1 && item.assignee.is_some(), || format!("{winners} holders"))?;
    Ok(format!("{threads} concurrent reservers, exactly one holder"))
}

const STEPS: [WriteStep; 5] = [
    WriteStep::RevisionTempWritten,
    WriteStep::RevisionLinked,
    WriteStep::RevisionTempRemoved,
    WriteStep::HeadTempWritten,
    WriteStep::HeadRenamed,
];

/// Aborts a save at every write step, reopens the store and checks the
/// head is either the old or the new revision and every revision parses.
pub fn datastore_crash(root: &std::path::Path) -> Outcome {
    let base = Datastore::open(root).map_err(|e| e.to_string())?;
    let ids = synth::populate_collection(&base, "crash", "admin", 3, 5, Subset::Training).map_err(|e| e.to_string())?;
    let mut rng = synth::rng(77);
    let mut trials = 0;
    for round in 0..4 {
        for step in STEPS {
            for iid in &ids {
                let before = Datastore::open(root).map_err(|e| e.to_string())?.head("crash", iid).map_err(|e| e.to_string())?;
                let ds = base.clone().with_fault_hook(Arc::new(move |s| s == step));
                let tree = synth::random_tree(&mut rng, synth::IMAGE_WIDTH, synth::IMAGE_HEIGHT);
                let r = ds.save_annotation("crash", iid, tree.clone(), "admin", before, &format!("round {round}"));
                ensure(r.is_err(), || format!("fault at {step:?} did not abort"))?;

                let fresh = Datastore::open(root).map_err(|e| e.to_string())?;
                let after = fresh.head("crash", iid).map_err(|e| e.to_string())?;
                ensure(after == before || after == before + 1, || {
                    format!("{step:?}: head went {before} -> {after}")
                })?;
                for rev in 1..=after {
                    let v = fresh.load_annotation("crash", iid, Some(rev)).map_err(|e| format!("{step:?} rev {rev}: {e}"))?;
                    if rev == before + 1 {
                        ensure(v.tree == normalized(tree.clone()), || format!("{step:?}: new revision torn"))?;
                    }
                }
                // The store must keep accepting writes after the fault.
                fresh
                    .save_annotation("crash", iid, tree, "admin", after, "recovery")
                    .map_err(|e| format!("{step:?}: save after recovery failed: {e}"))?;
                trials += 1;
            }
        }
    }
    Ok(format!("{trials} injected faults across {} write steps, no torn revision", STEPS.len()))
}

fn normalized(mut t: rrc_core::datastore::AnnotationTree) -> rrc_core::datastore::AnnotationTree {
    rrc_core::datastore::tree::normalize_tree(&mut t).expect("synthetic trees are valid");
    t
}

/// Serialize, parse and serialize again on a synthetic corpus; both the
/// bytes and the parsed value must survive unchanged.
pub fn xml_round_trip(docs: usize) -> Outcome {
    let mut rng = synth::rng(0x3a1);
    let t0 = Utc.with_ymd_and_hms(2026, 3, 4, 5, 6, 7).single().ok_or("time")?;
    let mut bytes = 0;
    for i in 0..docs {
        let v = AnnotationVersion {
            image: format!("i{i:04}"),
            revision: rng.random_range(1..50),
            author: ["ann", "Zoë", "a&b <c>"][i % 3].to_string(),
            timestamp: t0 + TimeDelta::milliseconds(rng.random_range(0..10_000_000_000)),
            change_note: ["", "fix \"quotes\"", "multi\nline\tnote", "ΟΔΟΣ"][i % 4].to_string(),
            tree: normalized(synth::random_tree(&mut rng, synth::IMAGE_WIDTH, synth::IMAGE_HEIGHT)),
        };
        let x = to_xml(&v);
        let back = from_xml(&x).map_err(|e| format!("doc {i}: {e}"))?;
        ensure(back == v, || format!("doc {i}: parsed value differs"))?;
        ensure(to_xml(&back) == x, || format!("doc {i}: bytes differ after round trip"))?;
        bytes += x.len();
    }
    Ok(format!("{docs} documents ({bytes} bytes) bit-exact"))
}
