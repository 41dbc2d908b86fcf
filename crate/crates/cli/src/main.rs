//! `cracsim`: run workloads on the simulated runtime, checkpoint them,
//! restart them from images and inspect image files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use cracsim_core::engine::{CheckpointInfo, EngineError, Trigger, Watcher};
use cracsim_core::harness::{self, BenchReport, HarnessError, Mode, Program, WorkloadKind, WorkloadSpec};
use cracsim_core::image::{self, ImageError};
use cracsim_core::shim::CallLog;
use cracsim_core::{KernelLibrary, Session};

#[derive(Parser)]
#[command(
    name = "cracsim",
    version,
    about = "Checkpoint-restart for a simulated accelerator runtime"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a workload, optionally checkpointing it to an image.
    Run {
        #[command(flatten)]
        workload: WorkloadArgs,
        /// native, direct or proxy.
        #[arg(long, default_value = "direct")]
        mode: Mode,
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
    /// Restart from an image and run the saved workload to completion.
    Restart {
        /// Image to restart from.
        #[arg(long)]
        image: PathBuf,
        /// direct or proxy.
        #[arg(long, default_value = "direct")]
        mode: Mode,
        /// Print the replayed call log.
        #[arg(long)]
        dump_log: bool,
    },
    /// Time a workload natively and under interposition; prints JSON.
    Bench {
        #[command(flatten)]
        workload: WorkloadArgs,
        /// direct or proxy.
        #[arg(long, default_value = "direct")]
        mode: Mode,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
    },
    /// Print the layout and summary of an image file.
    Inspect {
        #[arg(long)]
        image: PathBuf,
        /// Also print every log entry.
        #[arg(long)]
        dump_log: bool,
    },
}

#[derive(Args)]
struct WorkloadArgs {
    #[arg(long)]
    workload: WorkloadKind,
    #[arg(long)]
    streams: Option<u32>,
    #[arg(long)]
    iters: Option<u64>,
    /// Problem size in MiB.
    #[arg(long, conflicts_with = "data_bytes")]
    data_mb: Option<u64>,
    #[arg(long)]
    data_bytes: Option<u64>,
    #[arg(long)]
    threads: Option<u32>,
    #[arg(long, env = "CRACSIM_SEED")]
    seed: Option<u64>,
}

impl WorkloadArgs {
    fn spec(&self) -> WorkloadSpec {
        let mut spec = WorkloadSpec::new(self.workload);
        if let Some(v) = self.streams {
            spec.streams = v;
        }
        if let Some(v) = self.iters {
            spec.iterations = v;
        }
        if let Some(v) = self.data_mb {
            spec.data_bytes = v << 20;
        }
        if let Some(v) = self.data_bytes {
            spec.data_bytes = v;
        }
        if let Some(v) = self.threads {
            spec.threads = v;
        }
        if let Some(v) = self.seed {
            spec.seed = v;
        }
        spec
    }
}

#[derive(Args)]
struct CheckpointArgs {
    /// Where to write the checkpoint image.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Checkpoint after this many seconds; 0 checkpoints before the first step.
    #[arg(long, requires = "image", conflicts_with = "ckpt_on_file")]
    ckpt_after: Option<f64>,
    /// Checkpoint when this file appears.
    #[arg(long, requires = "image")]
    ckpt_on_file: Option<PathBuf>,
    /// gzip the image.
    #[arg(long)]
    compress: bool,
}

impl CheckpointArgs {
    fn trigger(&self) -> Option<Trigger> {
        match (&self.ckpt_after, &self.ckpt_on_file) {
            (Some(s), _) => Some(Trigger::After(Duration::from_secs_f64(*s))),
            (None, Some(p)) => Some(Trigger::OnFile(p.clone())),
            (None, None) => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        let engine = match self {
            CliError::Usage(_) => return 2,
            CliError::Image(ImageError::Corrupt(_)) => return 3,
            CliError::Image(_) => return 1,
            CliError::Harness(HarnessError::Engine(e)) | CliError::Engine(e) => e,
            CliError::Harness(_) => return 1,
        };
        match engine {
            EngineError::ImageCorrupt(_) => 3,
            EngineError::ReplayDivergence { .. } => 4,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { workload, mode, ckpt } => run(workload.spec(), mode, &ckpt),
        Command::Restart { image, mode, dump_log } => restart(&image, mode, dump_log),
        Command::Bench {
            workload,
            mode,
            repeats,
        } => bench(workload.spec(), mode, repeats),
        Command::Inspect { image, dump_log } => inspect(&image, dump_log),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cracsim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(mode: Mode, what: &str) -> Result<cracsim_core::DispatchMode> {
    mode.dispatch()
        .ok_or_else(|| CliError::Usage(format!("{what} needs --mode direct or proxy")))
}

fn run(spec: WorkloadSpec, mode: Mode, ckpt: &CheckpointArgs) -> Result<()> {
    spec.validate()?;
    if ckpt.trigger().is_none() && ckpt.image.is_some() {
        return Err(CliError::Usage("--image needs --ckpt-after or --ckpt-on-file".into()));
    }
    if ckpt.trigger().is_none() {
        let out = harness::run_workload(&spec, mode)?;
        print_outcome(out.digest, out.elapsed);
        return Ok(());
    }
    let dispatch = dispatch(mode, "checkpointing")?;
    let session = Arc::new(harness::new_session(&spec, dispatch)?);
    execute(session, Arc::from(harness::program(spec)?), ckpt)
}

fn restart(from: &Path, mode: Mode, dump_log: bool) -> Result<()> {
    let dispatch = dispatch(mode, "restart")?;
    let session = Session::restart_from_file(from, dispatch, Arc::new(KernelLibrary::builtin()))?;
    eprintln!("restarted: {} log entries replayed", session.shim().log_len());
    if dump_log {
        eprint!("{}", session.shim().log().dump());
    }
    let program = harness::resume(&session.app_state())?;
    let out = harness::run_on_session(&*program, &session)?;
    print_outcome(out.digest, out.elapsed);
    Ok(())
}

/// Runs `program` to completion on `session`, checkpointing when the
/// trigger (if any) fires.
fn execute(session: Arc<Session>, program: Arc<dyn Program>, ckpt: &CheckpointArgs) -> Result<()> {
    let mut watcher = None;
    if let (Some(trigger), Some(path)) = (ckpt.trigger(), &ckpt.image) {
        if trigger == Trigger::After(Duration::ZERO) {
            let info = session.checkpoint_to(path, ckpt.compress, || Some(program.save()))?;
            report_checkpoint(path, &info);
        } else {
            let saver = Arc::clone(&program);
            watcher = Some(Watcher::spawn(
                Arc::clone(&session),
                trigger,
                path.clone(),
                ckpt.compress,
                move || Some(saver.save()),
            ));
        }
    }
    let out = harness::run_on_session(&*program, &session);
    if let (Some(w), Some(path)) = (watcher, &ckpt.image) {
        match w.finish() {
            Some(info) => report_checkpoint(path, &info?),
            None => eprintln!("checkpoint: trigger did not fire before the run finished"),
        }
    }
    let out = out?;
    print_outcome(out.digest, out.elapsed);
    Ok(())
}

fn report_checkpoint(path: &Path, info: &CheckpointInfo) {
    eprintln!(
        "checkpoint: {} ({} bytes, {} payload bytes, {} log entries)",
        path.display(),
        info.image_bytes,
        info.payload_bytes,
        info.log_len
    );
}

fn print_outcome(digest: u64, elapsed: Duration) {
    println!("digest: {digest:#018x}");
    eprintln!("elapsed: {:.3}s", elapsed.as_secs_f64());
}

fn bench(spec: WorkloadSpec, mode: Mode, repeats: usize) -> Result<()> {
    if !spec.kind.is_timing() {
        return Err(CliError::Usage(format!("{} is not a timing workload", spec.kind)));
    }
    let mode = match mode {
        Mode::Native => {
            return Err(CliError::Usage(
                "bench compares against native; use --mode direct or proxy".into(),
            ))
        }
        m => m,
    };
    spec.validate()?;
    let timing = harness::measure(&spec, repeats)?;
    let report = BenchReport::new(&spec, mode, &timing).map_err(HarnessError::from)?;
    println!("{}", report.to_json());
    Ok(())
}

fn inspect(path: &Path, dump_log: bool) -> Result<()> {
    let raw = image::read_file(path)?;
    let bytes = image::unwrap_compressed(&raw)?;
    let layout = image::layout(&bytes)?;
    let snap = image::decode(&bytes)?;
    let log = CallLog::from_parts(snap.log.clone(), snap.binaries.clone());
    println!("image: {}", path.display());
    println!(
        "format: version {}, {} bytes{}",
        layout.version,
        layout.total_len,
        if raw.len() != bytes.len() {
            format!(" (gzip, {} on disk)", raw.len())
        } else {
            String::new()
        }
    );
    println!(
        "seed: {}  arena: {} bytes  engine: {}",
        snap.meta.seed, snap.meta.arena_bytes, snap.meta.engine_version
    );
    for s in &layout.sections {
        println!(
            "  {:<16} offset {:>10}  length {:>12}  crc32 {:08x}",
            s.tag.name(),
            s.offset,
            s.length,
            s.crc
        );
    }
    println!("log entries: {}", log.len());
    println!("active allocations: {}", log.active_set().len());
    println!("payload bytes: {}", snap.payload_bytes() + snap.managed_bytes());
    println!("streams: {}", snap.streams.len());
    println!("app state: {} bytes", snap.app_state.len());
    if dump_log {
        print!("{}", log.dump());
    }
    Ok(())
}
