//! Scoring protocols for localization, recognition and end-to-end tasks.
//!
//! Reports serialize with a fixed key order and six-decimal reals so that
//! every entry point (CLI, worker, standalone bundle) writes identical bytes
//! for identical inputs.

pub mod matching;
pub mod text;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{AnnotationNode, Granularity};
use crate::datastore::tree::walk_nodes;
use crate::fsutil;
use crate::geometry::Quad;
use crate::ingest::{Detection, ResultFile};

use matching::{filter_dontcare, match_deteval, match_iou, DetEvalParams, GroupKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    LocalizationIou,
    LocalizationDeteval,
    Recognition,
    EndToEnd,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 4] = [
        ProtocolKind::LocalizationIou,
        ProtocolKind::LocalizationDeteval,
        ProtocolKind::Recognition,
        ProtocolKind::EndToEnd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolKind::LocalizationIou => "localization_iou",
            ProtocolKind::LocalizationDeteval => "localization_deteval",
            ProtocolKind::Recognition => "recognition",
            ProtocolKind::EndToEnd => "end_to_end",
        }
    }

    /// Short name used on the command line.
    pub fn short_name(self) -> &'static str {
        match self {
            ProtocolKind::LocalizationIou => "iou",
            ProtocolKind::LocalizationDeteval => "deteval",
            ProtocolKind::Recognition => "recognition",
            ProtocolKind::EndToEnd => "e2e",
        }
    }

    fn allowed_params(self) -> &'static [&'static str] {
        match self {
            ProtocolKind::LocalizationIou => &["granularity", "dontcare_overlap", "iou_threshold"],
            ProtocolKind::LocalizationDeteval => &[
                "granularity",
                "dontcare_overlap",
                "area_recall",
                "area_precision",
                "scatter_penalty",
            ],
            ProtocolKind::Recognition => &["granularity", "case_sensitive"],
            ProtocolKind::EndToEnd => &["granularity", "dontcare_overlap", "iou_threshold", "case_sensitive"],
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProtocolKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s || k.short_name() == s)
            .ok_or_else(|| format!("unknown protocol {s:?}"))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("bad parameter {key:?} for {protocol}: {reason}")]
    BadParams {
        protocol: String,
        key: String,
        reason: String,
    },
    #[error("sample {0}: this protocol needs transcriptions")]
    MissingTranscriptions(String),
    #[error("sample {0}: this protocol needs quadrilaterals")]
    MissingQuads(String),
}

/// Resolved numeric parameters of a protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolParams {
    pub granularity: Granularity,
    pub iou_threshold: f64,
    pub dontcare_overlap: f64,
    pub deteval: DetEvalParams,
    pub case_sensitive: bool,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            granularity: Granularity::Word,
            iou_threshold: 0.5,
            dontcare_overlap: 0.5,
            deteval: DetEvalParams::default(),
            case_sensitive: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationProtocol {
    pub id: String,
    pub kind: ProtocolKind,
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
    #[serde(default = "yes")]
    pub per_sample: bool,
}

fn yes() -> bool {
    true
}

impl EvaluationProtocol {
    pub fn new(id: impl Into<String>, kind: ProtocolKind) -> Self {
        EvaluationProtocol {
            id: id.into(),
            kind,
            params: BTreeMap::new(),
            per_sample: true,
        }
    }

    /// Default protocol for a kind, identified by its short name.
    pub fn standard(kind: ProtocolKind) -> Self {
        Self::new(kind.short_name(), kind)
    }

    pub fn with_param(mut self, key: &str, value: serde_json::Value) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn resolve(&self) -> Result<ProtocolParams, EvalError> {
        let mut p = ProtocolParams::default();
        for (key, value) in &self.params {
            let bad = |reason: &str| EvalError::BadParams {
                protocol: self.id.clone(),
                key: key.clone(),
                reason: reason.to_string(),
            };
            if !self.kind.allowed_params().contains(&key.as_str()) {
                return Err(bad("not a parameter of this protocol"));
            }
            let number = || -> Option<f64> {
                match value {
                    serde_json::Value::Number(n) => n.as_f64(),
                    serde_json::Value::String(s) => s.trim().parse().ok(),
                    _ => None,
                }
                .filter(|v: &f64| v.is_finite())
            };
            let unit = |lo_open: bool, hi_open: bool| -> Result<f64, EvalError> {
                let v = number().ok_or_else(|| bad("expected a number"))?;
                let lo_ok = if lo_open { v > 0.0 } else { v >= 0.0 };
                let hi_ok = if hi_open { v < 1.0 } else { v <= 1.0 };
                if lo_ok && hi_ok {
                    Ok(v)
                } else {
                    Err(bad("out of range"))
                }
            };
            match key.as_str() {
                "granularity" => {
                    let s = value.as_str().ok_or_else(|| bad("expected a granularity name"))?;
                    p.granularity = s.parse().map_err(|e: String| bad(&e))?;
                }
                "iou_threshold" => p.iou_threshold = unit(true, false)?,
                "dontcare_overlap" => p.dontcare_overlap = unit(false, true)?,
                "area_recall" => p.deteval.area_recall = unit(true, false)?,
                "area_precision" => p.deteval.area_precision = unit(true, false)?,
                "scatter_penalty" => p.deteval.scatter_penalty = unit(false, false)?,
                "case_sensitive" => {
                    p.case_sensitive = match value {
                        serde_json::Value::Bool(b) => *b,
                        serde_json::Value::String(s) if s == "true" => true,
                        serde_json::Value::String(s) if s == "false" => false,
                        _ => return Err(bad("expected true or false")),
                    }
                }
                _ => unreachable!("checked against allowed_params"),
            }
        }
        Ok(p)
    }
}

/// One ground-truth region at the evaluated granularity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRegion {
    pub id: String,
    pub quad: Quad,
    pub care: bool,
    pub transcription: String,
}

/// Regions of `tree` at `granularity` in document order; mask-only regions
/// have no quad and are skipped.
pub fn gt_regions(tree: &[AnnotationNode], granularity: Granularity) -> Vec<GtRegion> {
    walk_nodes(tree)
        .into_iter()
        .filter(|n| n.granularity == granularity)
        .filter_map(|n| {
            Some(GtRegion {
                id: n.id.clone(),
                quad: n.region.quad()?,
                care: n.care,
                transcription: n.transcription.clone(),
            })
        })
        .collect()
}

mod fixed6 {
    use serde::Serializer;
    use serde_json::value::RawValue;

    pub fn format(v: f64) -> String {
        let s = format!("{v:.6}");
        if s.starts_with('-') && s[1..].bytes().all(|b| b == b'0' || b == b'.') {
            s[1..].to_string()
        } else {
            s
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        let raw = RawValue::from_string(format(*v)).map_err(serde::ser::Error::custom)?;
        serde::Serialize::serialize(&raw, s)
    }

    pub mod opt {
        use serde::Serializer;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => super::serialize(v, s),
                None => s.serialize_none(),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    OneToOne,
    OneToMany,
    ManyToOne,
    /// Recognition: prediction aligned to a word by position.
    Aligned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub kind: MatchKind,
    pub gt: Vec<String>,
    pub det: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "fixed6::opt::serialize")]
    pub iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "fixed6::opt::serialize")]
    pub area_recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "fixed6::opt::serialize")]
    pub area_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub det_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "fixed6::opt::serialize")]
    pub nes: Option<f64>,
}

impl MatchRecord {
    fn new(kind: MatchKind, gt: Vec<String>, det: Vec<usize>) -> Self {
        MatchRecord {
            kind,
            gt,
            det,
            iou: None,
            area_recall: None,
            area_precision: None,
            gt_text: None,
            det_text: None,
            correct: None,
            nes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub image: String,
    pub num_gt_care: usize,
    pub num_det_considered: usize,
    #[serde(serialize_with = "fixed6::serialize")]
    pub gt_credit: f64,
    #[serde(serialize_with = "fixed6::serialize")]
    pub det_credit: f64,
    #[serde(serialize_with = "fixed6::serialize")]
    pub precision: f64,
    #[serde(serialize_with = "fixed6::serialize")]
    pub recall: f64,
    #[serde(serialize_with = "fixed6::serialize")]
    pub hmean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "fixed6::opt::serialize")]
    pub word_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "fixed6::opt::serialize")]
    pub mean_nes: Option<f64>,
    pub matches: Vec<MatchRecord>,
    pub unmatched_gt: Vec<String>,
    pub unmatched_det: Vec<usize>,
    pub ignored_det: Vec<usize>,
    /// End-to-end: pairs that overlap enough but disagree on text.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub text_mismatches: Vec<MatchRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallEval {
    pub protocol: String,
    pub kind: ProtocolKind,
    pub num_samples: usize,
    pub num_gt_care: usize,
    pub num_det_considered: usize,
    #[serde(serialize_with = "fixed6::serialize")]
    pub gt_credit: f64,
    #[serde(serialize_with = "fixed6::serialize")]
    pub det_credit: f64,
    #[serde(serialize_with = "fixed6::serialize")]
    pub precision: f64,
    #[serde(serialize_with = "fixed6::serialize")]
    pub recall: f64,
    #[serde(serialize_with = "fixed6::serialize")]
    pub hmean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "fixed6::opt::serialize")]
    pub word_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "fixed6::opt::serialize")]
    pub mean_nes: Option<f64>,
    /// Set when the dataset has no care regions; all scores are then 0.
    pub empty_dataset: bool,
}

pub fn hmean(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn finish(mut s: SampleEval) -> SampleEval {
    s.recall = if s.num_gt_care == 0 { 1.0 } else { s.gt_credit / s.num_gt_care as f64 };
    s.precision = if s.num_det_considered == 0 {
        1.0
    } else {
        s.det_credit / s.num_det_considered as f64
    };
    s.hmean = hmean(s.precision, s.recall);
    s
}

fn empty_sample(image: &str) -> SampleEval {
    SampleEval {
        image: image.to_string(),
        num_gt_care: 0,
        num_det_considered: 0,
        gt_credit: 0.0,
        det_credit: 0.0,
        precision: 0.0,
        recall: 0.0,
        hmean: 0.0,
        word_accuracy: None,
        mean_nes: None,
        matches: Vec::new(),
        unmatched_gt: Vec::new(),
        unmatched_det: Vec::new(),
        ignored_det: Vec::new(),
        text_mismatches: Vec::new(),
    }
}

fn detections<'a>(image: &str, result: &'a ResultFile) -> Result<&'a [Detection], EvalError> {
    match result {
        ResultFile::Detections(d) => Ok(d),
        ResultFile::Transcriptions(_) => Err(EvalError::MissingQuads(image.to_string())),
    }
}

/// Care regions and considered detections after don't-care suppression.
struct Split {
    care: Vec<usize>,
    considered: Vec<usize>,
    ignored: Vec<usize>,
}

fn split(gt: &[GtRegion], dets: &[Detection], threshold: f64) -> Split {
    let dont_care: Vec<Quad> = gt.iter().filter(|g| !g.care).map(|g| g.quad).collect();
    let quads: Vec<Quad> = dets.iter().map(|d| d.quad).collect();
    let (considered, ignored) = filter_dontcare(&quads, &dont_care, threshold);
    Split {
        care: (0..gt.len()).filter(|&i| gt[i].care).collect(),
        considered,
        ignored,
    }
}

pub fn evaluate_sample(
    kind: ProtocolKind,
    params: &ProtocolParams,
    image: &str,
    gt: &[GtRegion],
    result: &ResultFile,
) -> Result<SampleEval, EvalError> {
    let s = match kind {
        ProtocolKind::LocalizationIou => eval_iou(params, image, gt, detections(image, result)?, false),
        ProtocolKind::EndToEnd => {
            let dets = detections(image, result)?;
            if dets.iter().any(|d| d.transcription.is_none()) {
                return Err(EvalError::MissingTranscriptions(image.to_string()));
            }
            eval_iou(params, image, gt, dets, true)
        }
        ProtocolKind::LocalizationDeteval => eval_deteval(params, image, gt, detections(image, result)?),
        ProtocolKind::Recognition => {
            let preds: Vec<&str> = match result {
                ResultFile::Transcriptions(t) => t.iter().map(String::as_str).collect(),
                ResultFile::Detections(d) => d
                    .iter()
                    .map(|d| d.transcription.as_deref())
                    .collect::<Option<_>>()
                    .ok_or_else(|| EvalError::MissingTranscriptions(image.to_string()))?,
            };
            eval_recognition(params, image, gt, &preds)
        }
    };
    Ok(finish(s))
}

fn eval_iou(p: &ProtocolParams, image: &str, gt: &[GtRegion], dets: &[Detection], check_text: bool) -> SampleEval {
    let sp = split(gt, dets, p.dontcare_overlap);
    let gq: Vec<Quad> = sp.care.iter().map(|&i| gt[i].quad).collect();
    let dq: Vec<Quad> = sp.considered.iter().map(|&j| dets[j].quad).collect();
    let pairs = match_iou(&gq, &dq, p.iou_threshold);
    let mut s = empty_sample(image);
    s.num_gt_care = gq.len();
    s.num_det_considered = dq.len();
    s.ignored_det = sp.ignored;
    let mut gt_hit = vec![false; gq.len()];
    let mut det_hit = vec![false; dq.len()];
    for pair in pairs {
        let g = &gt[sp.care[pair.gt]];
        let det_index = sp.considered[pair.det];
        let mut rec = MatchRecord::new(MatchKind::OneToOne, vec![g.id.clone()], vec![det_index]);
        rec.iou = Some(pair.iou);
        if check_text {
            let predicted = dets[det_index].transcription.clone().unwrap_or_default();
            let ok = text::texts_equal(&g.transcription, &predicted, p.case_sensitive);
            rec.gt_text = Some(g.transcription.clone());
            rec.det_text = Some(predicted);
            rec.correct = Some(ok);
            if !ok {
                s.text_mismatches.push(rec);
                continue;
            }
        }
        gt_hit[pair.gt] = true;
        det_hit[pair.det] = true;
        s.matches.push(rec);
    }
    s.gt_credit = s.matches.len() as f64;
    s.det_credit = s.matches.len() as f64;
    s.unmatched_gt = (0..gq.len()).filter(|&i| !gt_hit[i]).map(|i| gt[sp.care[i]].id.clone()).collect();
    s.unmatched_det = (0..dq.len()).filter(|&j| !det_hit[j]).map(|j| sp.considered[j]).collect();
    s
}

fn eval_deteval(p: &ProtocolParams, image: &str, gt: &[GtRegion], dets: &[Detection]) -> SampleEval {
    let sp = split(gt, dets, p.dontcare_overlap);
    let gq: Vec<Quad> = sp.care.iter().map(|&i| gt[i].quad).collect();
    let dq: Vec<Quad> = sp.considered.iter().map(|&j| dets[j].quad).collect();
    let out = match_deteval(&gq, &dq, &p.deteval);
    let mut s = empty_sample(image);
    s.num_gt_care = gq.len();
    s.num_det_considered = dq.len();
    s.ignored_det = sp.ignored;
    for g in &out.groups {
        let kind = match g.kind {
            GroupKind::OneToOne => MatchKind::OneToOne,
            GroupKind::OneToMany => MatchKind::OneToMany,
            GroupKind::ManyToOne => MatchKind::ManyToOne,
        };
        let mut rec = MatchRecord::new(
            kind,
            g.gt.iter().map(|&i| gt[sp.care[i]].id.clone()).collect(),
            g.det.iter().map(|&j| sp.considered[j]).collect(),
        );
        rec.area_recall = Some(g.area_recall);
        rec.area_precision = Some(g.area_precision);
        s.matches.push(rec);
    }
    s.gt_credit = out.gt_credit.iter().sum();
    s.det_credit = out.det_credit.iter().sum();
    s.unmatched_gt = (0..gq.len())
        .filter(|&i| out.gt_credit[i] == 0.0)
        .map(|i| gt[sp.care[i]].id.clone())
        .collect();
    s.unmatched_det = (0..dq.len())
        .filter(|&j| out.det_credit[j] == 0.0)
        .map(|j| sp.considered[j])
        .collect();
    s
}

/// Line `k` of the prediction file is aligned to the `k`-th region of the
/// image in document order; predictions for don't-care regions are ignored
/// and missing lines count as empty predictions.
fn eval_recognition(p: &ProtocolParams, image: &str, gt: &[GtRegion], preds: &[&str]) -> SampleEval {
    let mut s = empty_sample(image);
    let mut nes_sum = 0.0;
    let mut correct = 0usize;
    for (k, g) in gt.iter().enumerate() {
        if !g.care {
            if k < preds.len() {
                s.ignored_det.push(k);
            }
            continue;
        }
        let pred = preds.get(k).copied().unwrap_or("");
        let (a, b) = if p.case_sensitive {
            (g.transcription.clone(), pred.to_string())
        } else {
            (text::fold_case(&g.transcription), text::fold_case(pred))
        };
        let ok = a == b;
        let score = text::nes(&a, &b);
        nes_sum += score;
        correct += usize::from(ok);
        let mut rec = MatchRecord::new(
            MatchKind::Aligned,
            vec![g.id.clone()],
            if k < preds.len() { vec![k] } else { Vec::new() },
        );
        rec.gt_text = Some(g.transcription.clone());
        rec.det_text = Some(pred.to_string());
        rec.correct = Some(ok);
        rec.nes = Some(score);
        s.matches.push(rec);
        s.num_gt_care += 1;
    }
    s.unmatched_det = (gt.len()..preds.len()).collect();
    s.num_det_considered = s.num_gt_care;
    s.gt_credit = correct as f64;
    s.det_credit = correct as f64;
    let n = s.num_gt_care;
    s.word_accuracy = Some(if n == 0 { 1.0 } else { correct as f64 / n as f64 });
    s.mean_nes = Some(if n == 0 { 1.0 } else { nes_sum / n as f64 });
    s
}

/// Micro-averaged totals over samples of one protocol.
pub fn aggregate(protocol: &str, kind: ProtocolKind, samples: &[SampleEval]) -> OverallEval {
    let num_gt_care: usize = samples.iter().map(|s| s.num_gt_care).sum();
    let num_det: usize = samples.iter().map(|s| s.num_det_considered).sum();
    let gt_credit: f64 = samples.iter().map(|s| s.gt_credit).sum();
    let det_credit: f64 = samples.iter().map(|s| s.det_credit).sum();
    let empty = num_gt_care == 0;
    let (precision, recall) = if empty {
        (0.0, 0.0)
    } else {
        let p = if num_det == 0 { 1.0 } else { det_credit / num_det as f64 };
        (p, gt_credit / num_gt_care as f64)
    };
    let (word_accuracy, mean_nes) = if kind == ProtocolKind::Recognition {
        if empty {
            (Some(0.0), Some(0.0))
        } else {
            let nes_sum: f64 = samples
                .iter()
                .flat_map(|s| &s.matches)
                .filter_map(|m| m.nes)
                .sum();
            (Some(recall), Some(nes_sum / num_gt_care as f64))
        }
    } else {
        (None, None)
    };
    OverallEval {
        protocol: protocol.to_string(),
        kind,
        num_samples: samples.len(),
        num_gt_care,
        num_det_considered: num_det,
        gt_credit,
        det_credit,
        precision,
        recall,
        hmean: if empty { 0.0 } else { hmean(precision, recall) },
        word_accuracy,
        mean_nes,
        empty_dataset: empty,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall: OverallEval,
    pub samples: Vec<SampleEval>,
}

/// Evaluates every GT sample (sorted by image id); samples without a result
/// file are scored as empty.
pub fn evaluate(
    protocol: &EvaluationProtocol,
    gt: &BTreeMap<String, Vec<AnnotationNode>>,
    results: &BTreeMap<String, ResultFile>,
) -> Result<EvalReport, EvalError> {
    let params = protocol.resolve()?;
    let mut samples = Vec::with_capacity(gt.len());
    let empty_dets = ResultFile::Detections(Vec::new());
    let empty_texts = ResultFile::Transcriptions(Vec::new());
    for (image, tree) in gt {
        let regions = gt_regions(tree, params.granularity);
        let result = results.get(image).unwrap_or(if protocol.kind == ProtocolKind::Recognition {
            &empty_texts
        } else {
            &empty_dets
        });
        samples.push(evaluate_sample(protocol.kind, &params, image, &regions, result)?);
    }
    Ok(EvalReport {
        overall: aggregate(&protocol.id, protocol.kind, &samples),
        samples,
    })
}

/// Canonical bytes of a report document.
pub fn report_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("report serializes");
    b.push(b'\n');
    b
}

/// Writes `overall.json` and, when requested, `per_sample/<image>.json`
/// under `dir`.
pub fn write_report(dir: &Path, report: &EvalReport, per_sample: bool) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    fsutil::write_atomic(&dir.join("overall.json"), &report_json(&report.overall))?;
    if per_sample {
        let ps = dir.join("per_sample");
        std::fs::create_dir_all(&ps)?;
        for s in &report.samples {
            fsutil::write_atomic(&ps.join(format!("{}.json", s.image)), &report_json(s))?;
        }
    }
    Ok(())
}
