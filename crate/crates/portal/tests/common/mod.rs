#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;

use rrc_core::datastore::{Datastore, Role, Subset};
use rrc_core::evalcore::{EvaluationProtocol, ProtocolKind};
use rrc_core::evalservice::{work_once, Queue, StoreEvaluator, SubmissionStore, WorkerConfig, WorkerStats};
use rrc_core::ingest::{write_archive, LineGrammar};
use rrc_core::synth;
use rrc_core::taskdef::{default_format, GtSource, ResearchTask, TaskStore};
use rrc_portal::api::{router, AppState, PortalConfig};
use rrc_portal::auth::{AccountRole, UserStore};

pub const PASSWORD: &str = "correct horse battery";
pub const BIN: &str = env!("CARGO_BIN_EXE_rrc");

pub struct Account {
    pub id: String,
    pub token: String,
}

pub fn account(store: &Path, email: &str, role: AccountRole) -> Account {
    let users = UserStore::new(store);
    let id = users.register(email, email.split('@').next().unwrap(), PASSWORD, role).unwrap().id;
    let (token, _, _) = users.login(email, PASSWORD).unwrap();
    Account { id, token }
}

/// Runs the portal in-process on an ephemeral port; returns the base URL.
pub fn serve_in_process(store: &Path, config: PortalConfig) -> String {
    let state = Arc::new(AppState::open(store, config).unwrap());
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let l = tokio::net::TcpListener::from_std(listener).unwrap();
            axum::serve(l, router(state)).await.unwrap();
        });
    });
    format!("http://{addr}")
}

/// A spawned `rrc` server process, killed on drop.
pub struct ServerProcess {
    pub base: String,
    child: Child,
}

impl ServerProcess {
    pub fn spawn(args: &[&str]) -> ServerProcess {
        let mut child = Command::new(BIN)
            .args(args)
            .arg("--addr")
            .arg("127.0.0.1:0")
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected server banner {line:?}"))
            .to_string();
        ServerProcess { base, child }
    }
}

impl Drop for ServerProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn task(id: &str, collection: &str, subset: Subset, grammar: LineGrammar, kinds: &[ProtocolKind]) -> ResearchTask {
    ResearchTask {
        challenge_id: "demo".into(),
        task_id: id.into(),
        title: format!("Task {id}"),
        gt_source: GtSource::Internal {
            collection: collection.into(),
            subset,
        },
        input_format: rrc_core::ingest::FormatSpec::standard(grammar),
        evaluations: kinds.iter().map(|k| EvaluationProtocol::standard(*k)).collect(),
        default_evaluation: 0,
        snapshot: None,
    }
}

/// Result archive for every image of a frozen task.
pub fn archive_for(ts: &TaskStore, tid: &str, seed: u64) -> Vec<u8> {
    let t = ts.task(tid).unwrap();
    let snap = ts.snapshot(&t).unwrap();
    let mut r = synth::rng(seed);
    let files: Vec<(String, Vec<u8>)> = snap
        .annotations
        .iter()
        .map(|(id, v)| {
            let text = synth::result_file(&mut r, &v.tree, t.input_format.line_grammar);
            (t.input_format.entry_name(id), text.into_bytes())
        })
        .collect();
    write_archive(&files).unwrap()
}

/// Archive with one malformed line in the first file.
pub fn broken_archive(ts: &TaskStore, tid: &str) -> Vec<u8> {
    let t = ts.task(tid).unwrap();
    let snap = ts.snapshot(&t).unwrap();
    let first = snap.image_ids()[0].clone();
    let name = t.input_format.entry_name(&first);
    let mut line = "10,10,50,10,50,30,10,30".to_string();
    if t.input_format.line_grammar.has_transcription() {
        line.push_str(",EXIT");
    }
    write_archive(&[(name, format!("{line}\n1,2,3,oops\n").into_bytes())]).unwrap()
}

/// A store with accounts, a collection of synthetic annotated images split
/// into public and sequestered subsets, and frozen tasks over both.
pub struct World {
    pub dir: tempfile::TempDir,
    pub store: PathBuf,
    pub ds: Datastore,
    pub tasks: TaskStore,
    pub organizer: Account,
    pub alice: Account,
    pub bob: Account,
    pub public_images: Vec<String>,
    pub hidden_images: Vec<String>,
}

pub const COLLECTION: &str = "scenes";
pub const PUBLIC_TASK: &str = "loc";
pub const HIDDEN_TASK: &str = "hidden";

impl World {
    pub fn new(seed: u64) -> World {
        let dir = tempfile::tempdir().unwrap();
        let store = dir.path().join("store");
        let ds = Datastore::open(&store).unwrap();
        let organizer = account(&store, "org@example.org", AccountRole::Organizer);
        let alice = account(&store, "alice@example.org", AccountRole::User);
        let bob = account(&store, "bob@example.org", AccountRole::User);
        let public_images = synth::populate_collection(&ds, COLLECTION, &organizer.id, 4, seed, Subset::PublicTest).unwrap();
        let hidden_images =
            synth::populate_collection(&ds, COLLECTION, &organizer.id, 3, seed + 1000, Subset::SequesteredTest).unwrap();
        ds.set_member(COLLECTION, &organizer.id, &bob.id, Some(Role::Contributor)).unwrap();
        let tasks = TaskStore::new(ds.clone());
        let kinds = [ProtocolKind::LocalizationIou, ProtocolKind::EndToEnd];
        for (tid, subset) in [(PUBLIC_TASK, Subset::PublicTest), (HIDDEN_TASK, Subset::SequesteredTest)] {
            tasks
                .define_task(task(tid, COLLECTION, subset, LineGrammar::QuadTranscription, &kinds))
                .unwrap();
            tasks.freeze_gt(tid).unwrap();
        }
        World {
            dir,
            store,
            ds,
            tasks,
            organizer,
            alice,
            bob,
            public_images,
            hidden_images,
        }
    }

    pub fn serve(&self) -> String {
        serve_in_process(&self.store, PortalConfig::default())
    }

    /// Drains the queue in-process.
    pub fn run_jobs(&self) -> WorkerStats {
        let queue = Queue::new(&self.store);
        let subs = SubmissionStore::new(&self.store);
        let ev = StoreEvaluator::new(self.ds.clone());
        let cfg = WorkerConfig::new("test-worker");
        let mut stats = WorkerStats::default();
        while work_once(&queue, &subs, &ev, &cfg, &mut stats).unwrap() {}
        stats
    }
}

pub fn default_task(id: &str, collection: &str, kind: ProtocolKind) -> ResearchTask {
    task(id, collection, Subset::PublicTest, default_format(kind).line_grammar, &[kind])
}

pub struct Api {
    pub base: String,
    pub http: reqwest::blocking::Client,
}

impl Api {
    pub fn new(base: &str) -> Api {
        Api {
            base: base.to_string(),
            http: reqwest::blocking::Client::builder()
                .timeout(std::time::Duration::from_secs(60))
                .build()
                .unwrap(),
        }
    }

    pub fn req(&self, method: reqwest::Method, path: &str, token: Option<&str>) -> reqwest::blocking::RequestBuilder {
        let mut r = self.http.request(method, format!("{}/api{path}", self.base));
        if let Some(t) = token {
            r = r.bearer_auth(t);
        }
        r
    }

    pub fn upload(&self, tid: &str, token: Option<&str>, archive: Vec<u8>, method: &str) -> reqwest::blocking::Response {
        let (ct, body) = multipart(&[("method", method)], ("archive", "results.zip", &archive));
        self.req(reqwest::Method::POST, &format!("/tasks/{tid}/submissions"), token)
            .header(reqwest::header::CONTENT_TYPE, ct)
            .body(body)
            .send()
            .unwrap()
    }
}

/// A buffered multipart body. Streamed forms race with servers that reject
/// the request before reading it.
pub fn multipart(texts: &[(&str, &str)], file: (&str, &str, &[u8])) -> (String, Vec<u8>) {
    let boundary = "rrc-test-boundary-7f3a";
    let mut body = Vec::new();
    for (k, v) in texts {
        body.extend_from_slice(format!("--{boundary}\r\nContent-Disposition: form-data; name=\"{k}\"\r\n\r\n{v}\r\n").as_bytes());
    }
    let (field, name, bytes) = file;
    body.extend_from_slice(
        format!(
            "--{boundary}\r\nContent-Disposition: form-data; name=\"{field}\"; filename=\"{name}\"\r\nContent-Type: application/octet-stream\r\n\r\n"
        )
        .as_bytes(),
    );
    body.extend_from_slice(bytes);
    body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={boundary}"), body)
}
