use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use chrono::TimeDelta;
use clap::{Args, Parser, Subcommand};
use rrc_core::datastore::Datastore;
use rrc_core::evalcore::{write_report, EvaluationProtocol, ProtocolKind};
use rrc_core::evalservice::{run_worker, Evaluator, Job, Queue, StoreEvaluator, SubmissionStore, WorkerConfig};
use rrc_core::ingest::{FormatSpec, LineGrammar};
use rrc_core::taskdef::{default_format, evaluate_submission, read_snapshot, PipelineError, ResearchTask, TaskStore};
use rrc_core::workflow::{Workflow, WorkflowError};
use rrc_portal::api::{AppState, PortalConfig};
use rrc_portal::auth::{AccountRole, UserStore};
use rrc_portal::bundle::{Bundle, BundleOutcome};
use rrc_portal::preview::{homography_vectors, vectors_json};

/// Exit code of `workflow reserve` when someone else holds the image.
const EXIT_HELD: u8 = 3;
/// Exit code of `eval` and `bundle eval` for a rejected submission.
const EXIT_INVALID: u8 = 2;

#[derive(Parser)]
#[command(name = "rrc", version, about = "Robust reading competition tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Score a result archive against a ground-truth snapshot.
    Eval(EvalArgs),
    /// Run the HTTP portal.
    Serve(ServeArgs),
    /// Evaluation workers.
    #[command(subcommand)]
    Worker(WorkerCmd),
    /// Build a standalone bundle for a task.
    Pack(PackArgs),
    /// Serve or use an unpacked standalone bundle.
    #[command(subcommand)]
    Bundle(BundleCmd),
    /// Export test vectors shared with other implementations.
    #[command(subcommand)]
    Vectors(VectorsCmd),
    #[command(subcommand)]
    User(UserCmd),
    #[command(subcommand)]
    Task(TaskCmd),
    #[command(subcommand)]
    Workflow(WorkflowCmd),
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    subm: PathBuf,
    /// iou, deteval, e2e or recognition
    #[arg(long)]
    protocol: ProtocolKind,
    /// Line grammar of the result files; defaults by protocol.
    #[arg(long)]
    format: Option<LineGrammar>,
    #[arg(long)]
    per_sample: bool,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    #[arg(long, default_value_t = 256)]
    max_upload_mb: usize,
}

#[derive(Subcommand)]
enum WorkerCmd {
    Run(WorkerArgs),
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long)]
    store: PathBuf,
    /// Only take jobs of this protocol id.
    #[arg(long)]
    protocol: Option<String>,
    /// Lease in seconds.
    #[arg(long, default_value_t = 600.0)]
    lease: f64,
    /// Poll interval in seconds.
    #[arg(long, default_value_t = 2.0)]
    poll: f64,
    #[arg(long)]
    id: Option<String>,
    /// Exit after this many consecutive idle polls.
    #[arg(long)]
    exit_when_idle: Option<u32>,
    /// Extra delay per job, for exercising crash recovery.
    #[arg(long, hide = true, default_value_t = 0)]
    delay_ms: u64,
}

#[derive(Args)]
struct PackArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long)]
    evaluation: Option<String>,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum BundleCmd {
    Serve {
        #[arg(long, default_value = ".")]
        dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    Eval {
        #[arg(long, default_value = ".")]
        dir: PathBuf,
        #[arg(long)]
        subm: PathBuf,
        #[arg(short = 'o', long = "out")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum VectorsCmd {
    Homography {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(short = 'o', long = "out")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum UserCmd {
    Create {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        email: String,
        #[arg(long)]
        password: String,
        #[arg(long)]
        name: String,
        #[arg(long, default_value = "user")]
        role: AccountRole,
    },
}

#[derive(Subcommand)]
enum TaskCmd {
    Define {
        #[arg(long)]
        store: PathBuf,
        /// Task descriptor JSON.
        #[arg(long)]
        file: PathBuf,
    },
    Freeze {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        task: String,
    },
}

#[derive(Subcommand)]
enum WorkflowCmd {
    Reserve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        collection: String,
        #[arg(long)]
        image: String,
        #[arg(long)]
        user: String,
        #[arg(long)]
        duration_secs: Option<i64>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Eval(a) => eval(a),
        Cmd::Serve(a) => serve(a),
        Cmd::Worker(WorkerCmd::Run(a)) => worker(a),
        Cmd::Pack(a) => {
            let ts = TaskStore::new(Datastore::open(&a.store)?);
            let exe = std::env::current_exe()?;
            let bytes = ts.export_standalone_bundle(&a.task, a.evaluation.as_deref(), Some(&exe))?;
            std::fs::write(&a.out, bytes)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Bundle(BundleCmd::Serve { dir, addr }) => {
            let b = Arc::new(Bundle::open(&dir)?);
            let app = rrc_portal::bundle::router(b, 256 << 20);
            listen(&addr, app)
        }
        Cmd::Bundle(BundleCmd::Eval { dir, subm, out }) => {
            let b = Bundle::open(&dir)?;
            match b.evaluate(&std::fs::read(&subm)?)? {
                BundleOutcome::Invalid(r) => invalid(&r),
                BundleOutcome::Evaluated { id, .. } => {
                    copy_dir(&dir.join("results").join(&id), &out)?;
                    std::fs::remove_file(out.join("archive.zip"))?;
                    println!("{id}");
                    Ok(ExitCode::SUCCESS)
                }
            }
        }
        Cmd::Vectors(VectorsCmd::Homography { count, seed, out }) => {
            std::fs::write(out, vectors_json(&homography_vectors(count, seed)))?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::User(UserCmd::Create {
            store,
            email,
            password,
            name,
            role,
        }) => {
            let u = UserStore::new(&store).register(&email, &name, &password, role)?;
            println!("{}", u.id);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Task(TaskCmd::Define { store, file }) => {
            let t: ResearchTask = serde_json::from_slice(&std::fs::read(&file)?).context("task descriptor")?;
            let t = TaskStore::new(Datastore::open(&store)?).define_task(t)?;
            println!("{}", t.task_id);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Task(TaskCmd::Freeze { store, task }) => {
            println!("{}", TaskStore::new(Datastore::open(&store)?).freeze_gt(&task)?);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Workflow(WorkflowCmd::Reserve {
            store,
            collection,
            image,
            user,
            duration_secs,
        }) => {
            let wf = Workflow::new(Datastore::open(&store)?);
            match wf.reserve(&collection, &image, &user, duration_secs.map(TimeDelta::seconds)) {
                Ok(item) => {
                    println!("reserved {}", item.reservation_expiry.map(|e| e.to_rfc3339()).unwrap_or_default());
                    Ok(ExitCode::SUCCESS)
                }
                Err(WorkflowError::AlreadyReservedByOther { holder, .. }) => {
                    println!("held {holder}");
                    Ok(ExitCode::from(EXIT_HELD))
                }
                Err(e) => Err(e.into()),
            }
        }
    }
}

fn invalid(r: &rrc_core::ingest::ValidationReport) -> Result<ExitCode> {
    for e in &r.errors {
        eprintln!("{}:{}: {} {}", e.file, e.line, e.code, e.message);
    }
    Ok(ExitCode::from(EXIT_INVALID))
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let snapshot = read_snapshot(&std::fs::read(&a.gt).with_context(|| a.gt.display().to_string())?)?;
    let archive = std::fs::read(&a.subm).with_context(|| a.subm.display().to_string())?;
    let format = a.format.map(FormatSpec::standard).unwrap_or_else(|| default_format(a.protocol));
    let protocol = EvaluationProtocol::standard(a.protocol);
    match evaluate_submission(&snapshot, &format, &protocol, &archive) {
        Ok((_, report)) => {
            write_report(&a.out, &report, a.per_sample)?;
            let o = &report.overall;
            println!("precision {:.6} recall {:.6} hmean {:.6}", o.precision, o.recall, o.hmean);
            Ok(ExitCode::SUCCESS)
        }
        Err(PipelineError::Invalid(r)) => invalid(&r),
        Err(PipelineError::Eval(e)) => Err(e.into()),
    }
}

fn listen(addr: &str, app: axum::Router) -> Result<ExitCode> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("bind {addr}"))?;
        // The first stdout line carries the bound address (useful with port 0).
        println!("listening on http://{}", listener.local_addr()?);
        std::io::stdout().flush()?;
        rrc_portal::serve(listener, app).await?;
        Ok(ExitCode::SUCCESS)
    })
}

fn serve(a: ServeArgs) -> Result<ExitCode> {
    let config = PortalConfig {
        max_upload: a.max_upload_mb << 20,
        bundle_exe: std::env::current_exe().ok(),
    };
    let state = Arc::new(AppState::open(&a.store, config)?);
    listen(&a.addr, rrc_portal::api::router(state))
}

/// Evaluator wrapper that stalls before returning.
struct Delayed<E>(E, Duration);

impl<E: Evaluator> Evaluator for Delayed<E> {
    fn evaluate(&self, job: &Job) -> std::result::Result<Vec<(String, Vec<u8>)>, String> {
        let out = self.0.evaluate(job);
        std::thread::sleep(self.1);
        out
    }
}

fn secs(v: f64, what: &str) -> Result<Duration> {
    if !(v.is_finite() && v > 0.0) {
        bail!("{what} must be a positive number of seconds");
    }
    Ok(Duration::from_secs_f64(v))
}

fn worker(a: WorkerArgs) -> Result<ExitCode> {
    let ds = Datastore::open(&a.store)?;
    let queue = Queue::new(&a.store);
    let subs = SubmissionStore::new(&a.store);
    let lease = TimeDelta::from_std(secs(a.lease, "lease")?)?;
    let cfg = WorkerConfig {
        worker_id: a.id.unwrap_or_else(|| format!("w{}", std::process::id())),
        protocol: a.protocol,
        lease,
        poll: secs(a.poll, "poll")?,
        exit_when_idle: a.exit_when_idle,
    };
    let evaluator = Delayed(StoreEvaluator::new(ds), Duration::from_millis(a.delay_ms));
    let stop = AtomicBool::new(false);
    let stats = run_worker(&queue, &subs, &evaluator, &cfg, &stop)?;
    tracing::info!(
        completed = stats.completed,
        failed = stats.failed,
        lost = stats.lost_leases,
        "worker exiting"
    );
    Ok(ExitCode::SUCCESS)
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    std::fs::create_dir_all(to)?;
    for e in std::fs::read_dir(from)? {
        let e = e?;
        let target = to.join(e.file_name());
        if e.file_type()?.is_dir() {
            copy_dir(&e.path(), &target)?;
        } else {
            std::fs::copy(e.path(), target)?;
        }
    }
    Ok(())
}
