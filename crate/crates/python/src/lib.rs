//! Python bindings: quad geometry, crop homographies, text metrics,
//! result-archive validation, offline evaluation and read access to a
//! datastore. The plain Rust functions below back the Python wrappers and
//! are usable (and tested) without an interpreter.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use rrc_core::datastore;
use rrc_core::evalcore::{report_json, text, EvaluationProtocol, ProtocolKind};
use rrc_core::geometry::{self, GeometryError};
use rrc_core::ingest::{validate_archive, FormatSpec, LineGrammar, ValidationIssue};
use rrc_core::taskdef::{default_format, evaluate_submission, read_snapshot, PipelineError, ResearchTask, TaskStore};
use rrc_core::workflow::crop_for;

create_exception!(rrc, InvalidSubmission, PyValueError);

#[derive(Debug)]
pub enum Failure {
    /// The archive failed validation; nothing was scored.
    Invalid(Vec<ValidationIssue>),
    Other(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Invalid(errors) => {
                let lines: Vec<String> = errors.iter().map(issue_line).collect();
                write!(f, "{}", lines.join("\n"))
            }
            Failure::Other(e) => f.write_str(e),
        }
    }
}

fn issue_line(e: &ValidationIssue) -> String {
    format!("{}:{}: {} {}", e.file, e.line, e.code, e.message)
}

fn other(e: impl std::fmt::Display) -> Failure {
    Failure::Other(e.to_string())
}

/// Scoring output as the exact bytes the command line writes.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub overall: String,
    /// Image id to per-sample JSON.
    pub samples: BTreeMap<String, String>,
}

fn format_for(kind: ProtocolKind, grammar: Option<&str>) -> Result<FormatSpec, Failure> {
    Ok(match grammar {
        Some(g) => FormatSpec::standard(g.parse::<LineGrammar>().map_err(other)?),
        None => default_format(kind),
    })
}

/// Evaluates a result archive against a ground-truth snapshot zip.
pub fn evaluate_bytes(
    snapshot: &[u8],
    archive: &[u8],
    protocol: &str,
    grammar: Option<&str>,
) -> Result<Evaluation, Failure> {
    let kind: ProtocolKind = protocol.parse().map_err(other)?;
    let snapshot = read_snapshot(snapshot).map_err(other)?;
    let format = format_for(kind, grammar)?;
    match evaluate_submission(&snapshot, &format, &EvaluationProtocol::standard(kind), archive) {
        Ok((_, report)) => {
            let utf8 = |b: Vec<u8>| String::from_utf8(b).expect("reports are UTF-8");
            Ok(Evaluation {
                overall: utf8(report_json(&report.overall)),
                samples: report
                    .samples
                    .iter()
                    .map(|s| (s.image.clone(), utf8(report_json(s))))
                    .collect(),
            })
        }
        Err(PipelineError::Invalid(r)) => Err(Failure::Invalid(r.errors)),
        Err(PipelineError::Eval(e)) => Err(other(e)),
    }
}

/// Validation errors for an archive; empty when it would be accepted.
pub fn validate_bytes(snapshot: &[u8], archive: &[u8], grammar: &str) -> Result<Vec<ValidationIssue>, Failure> {
    let snapshot = read_snapshot(snapshot).map_err(other)?;
    let format = FormatSpec::standard(grammar.parse::<LineGrammar>().map_err(other)?);
    Ok(validate_archive(archive, &format, &snapshot.image_ids()).errors)
}

fn py_failure(f: Failure) -> PyErr {
    match f {
        Failure::Invalid(_) => InvalidSubmission::new_err(f.to_string()),
        Failure::Other(e) => PyValueError::new_err(e),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn geometry_err(e: GeometryError) -> PyErr {
    PyValueError::new_err(format!("{}: {e}", e.code()))
}

/// Convex quadrilateral, canonically ordered (top-left first, clockwise).
#[pyclass(frozen, skip_from_py_object, module = "rrc")]
#[derive(Clone, Copy)]
pub struct Quad(geometry::Quad);

#[pymethods]
impl Quad {
    #[new]
    fn new(coords: Vec<f64>) -> PyResult<Self> {
        geometry::Quad::from_coords(&coords).map(Quad).map_err(geometry_err)
    }

    /// The eight coordinates `x1, y1, ..., x4, y4`.
    fn coords(&self) -> Vec<f64> {
        self.0.to_coords().to_vec()
    }

    fn area(&self) -> f64 {
        self.0.area()
    }

    fn iou(&self, other: &Quad) -> f64 {
        geometry::iou(&self.0, &other.0)
    }

    /// Mean lengths of the horizontal and vertical edge pairs.
    fn mean_extent(&self) -> (f64, f64) {
        self.0.mean_extent()
    }

    fn __repr__(&self) -> String {
        format!("Quad({:?})", self.0.to_coords())
    }
}

#[pyfunction]
fn iou(a: &Quad, b: &Quad) -> f64 {
    geometry::iou(&a.0, &b.0)
}

/// Homography taking the quad's corners to `(0,0), (w,0), (w,h), (0,h)`.
#[pyfunction]
fn rectification_homography(quad: &Quad, width: f64, height: f64) -> PyResult<[[f64; 3]; 3]> {
    geometry::rectification_homography(&quad.0, width, height)
        .map(|h| h.m)
        .map_err(geometry_err)
}

/// Size of the rectified word crop and the homography producing it.
#[pyfunction]
fn crop_geometry(quad: &Quad) -> PyResult<(u32, u32, [[f64; 3]; 3])> {
    let (w, h, hm) = crop_for(&quad.0).map_err(geometry_err)?;
    Ok((w, h, hm.m))
}

/// Normalized edit similarity in `[0, 1]`.
#[pyfunction]
fn nes(a: &str, b: &str) -> f64 {
    text::nes(a, b)
}

#[pyfunction]
fn levenshtein(a: &str, b: &str) -> usize {
    text::levenshtein(a, b)
}

/// `(file, line, code, message)` for every validation error.
#[pyfunction]
fn validate(snapshot: &[u8], archive: &[u8], format: &str) -> PyResult<Vec<(String, usize, String, String)>> {
    let errors = validate_bytes(snapshot, archive, format).map_err(py_failure)?;
    Ok(errors.into_iter().map(|e| (e.file, e.line, e.code, e.message)).collect())
}

/// Scores an archive. Returns the overall JSON and a dict of per-sample
/// JSON, byte for byte what `rrc eval` writes (minus trailing newlines).
#[pyfunction]
#[pyo3(signature = (snapshot, archive, protocol, format=None))]
fn evaluate(
    py: Python<'_>,
    snapshot: &[u8],
    archive: &[u8],
    protocol: &str,
    format: Option<&str>,
) -> PyResult<(String, BTreeMap<String, String>)> {
    let (snapshot, archive) = (snapshot.to_vec(), archive.to_vec());
    let format = format.map(str::to_string);
    let protocol = protocol.to_string();
    let ev = py
        .detach(move || evaluate_bytes(&snapshot, &archive, &protocol, format.as_deref()))
        .map_err(py_failure)?;
    Ok((ev.overall, ev.samples))
}

/// Read access to a datastore directory, plus collection setup.
#[pyclass(frozen, module = "rrc")]
pub struct Datastore(datastore::Datastore);

fn store_err(e: datastore::DatastoreError) -> PyErr {
    match e {
        datastore::DatastoreError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pymethods]
impl Datastore {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        datastore::Datastore::open(&path).map(Datastore).map_err(store_err)
    }

    fn create_collection(&self, id: &str, title: &str, creator: &str) -> PyResult<()> {
        self.0.create_collection(id, title, creator).map(|_| ()).map_err(store_err)
    }

    /// Imports image bytes; returns the image id (existing id for duplicates).
    fn import_image(&self, collection: &str, data: &[u8], filename: &str, actor: &str) -> PyResult<String> {
        self.0
            .import_image(collection, data, filename, actor)
            .map(|i| i.record.id)
            .map_err(store_err)
    }

    fn images(&self, collection: &str) -> PyResult<Vec<String>> {
        Ok(self.0.images(collection).map_err(store_err)?.into_iter().map(|r| r.id).collect())
    }

    fn head(&self, collection: &str, image: &str) -> PyResult<u32> {
        self.0.head(collection, image).map_err(store_err)
    }

    /// `(revision, xml)` of the requested (default: latest) revision.
    #[pyo3(signature = (collection, image, revision=None))]
    fn annotation_xml(&self, collection: &str, image: &str, revision: Option<u32>) -> PyResult<(u32, String)> {
        self.0.annotation_xml(collection, image, revision).map_err(store_err)
    }

    /// Saves a tree given as JSON; returns the new revision.
    #[pyo3(signature = (collection, image, tree_json, author, expected_head, note=""))]
    fn save_annotation(
        &self,
        collection: &str,
        image: &str,
        tree_json: &str,
        author: &str,
        expected_head: u32,
        note: &str,
    ) -> PyResult<u32> {
        let tree: datastore::AnnotationTree = serde_json::from_str(tree_json).map_err(value_err)?;
        self.0
            .save_annotation(collection, image, tree, author, expected_head, note)
            .map(|v| v.revision)
            .map_err(store_err)
    }

    /// `subset` is one of training, validation, public-test,
    /// sequestered-test or unassigned.
    fn assign_subset(&self, collection: &str, images: Vec<String>, subset: &str, actor: &str) -> PyResult<usize> {
        let subset: datastore::Subset =
            serde_json::from_value(serde_json::Value::String(subset.into())).map_err(value_err)?;
        self.0.assign_subset(collection, &images, subset, actor).map_err(store_err)
    }

    /// Registers a task descriptor given as JSON; returns its id.
    fn define_task(&self, task_json: &str) -> PyResult<String> {
        let t: ResearchTask = serde_json::from_str(task_json).map_err(value_err)?;
        TaskStore::new(self.0.clone()).define_task(t).map(|t| t.task_id).map_err(value_err)
    }

    /// Freezes the task's ground truth; returns the snapshot hash.
    fn freeze_task(&self, task: &str) -> PyResult<String> {
        TaskStore::new(self.0.clone()).freeze_gt(task).map_err(value_err)
    }

    /// The frozen ground-truth snapshot zip, as accepted by `evaluate`.
    fn snapshot<'py>(&self, py: Python<'py>, task: &str) -> PyResult<Bound<'py, PyBytes>> {
        let ts = TaskStore::new(self.0.clone());
        let t = ts.task(task).map_err(value_err)?;
        Ok(PyBytes::new(py, &ts.snapshot_bytes(&t).map_err(value_err)?))
    }

    /// Latest annotation tree as JSON.
    fn annotation_json(&self, collection: &str, image: &str) -> PyResult<String> {
        let v = self.0.load_annotation(collection, image, None).map_err(store_err)?;
        serde_json::to_string(&v.tree).map_err(value_err)
    }
}

#[pymodule]
fn rrc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("InvalidSubmission", m.py().get_type::<InvalidSubmission>())?;
    m.add_class::<Quad>()?;
    m.add_class::<Datastore>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(rectification_homography, m)?)?;
    m.add_function(wrap_pyfunction!(crop_geometry, m)?)?;
    m.add_function(wrap_pyfunction!(nes, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
