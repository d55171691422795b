mod args;
mod commands;
mod manifest;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use pod_core::{ErrorKind, PodError, Result};

use args::{Cli, Command};
use manifest::{to_json, write, Job, RunManifest, MANIFEST_FILE};

fn exit_code(err: &PodError) -> u8 {
    match err.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(PodError::Config("--threads: must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| PodError::Config(format!("--threads: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.threads)?;
    let started = Instant::now();
    let mut notes = Vec::new();
    let (job, out, inputs) = match &cli.command {
        Command::Determine(a) => {
            let job = commands::resolve_determine(a, &mut notes)?;
            let inputs = commands::job_inputs(&job, None)?;
            (job, a.out.clone(), inputs)
        }
        Command::Test(a) => {
            let job = commands::resolve_test(a, &mut notes)?;
            let inputs = commands::job_inputs(&job, None)?;
            (job, a.pod.out.clone(), inputs)
        }
        Command::Simulate(a) => {
            let job = commands::resolve_simulate(a, &mut notes)?;
            let inputs = commands::job_inputs(&job, Some(&a.config))?;
            (job, a.out.clone(), inputs)
        }
        Command::Baseline(a) => {
            let job = commands::resolve_baseline(a, &mut notes)?;
            let inputs = commands::job_inputs(&job, None)?;
            (job, a.out.clone(), inputs)
        }
        Command::Replay(a) => {
            let manifest = RunManifest::load(&a.manifest)?;
            manifest.check_inputs()?;
            (manifest.job, a.out.clone(), manifest.inputs)
        }
    };
    let outcome = commands::execute(&job, &mut notes)?;
    for note in &notes {
        eprintln!("{note}");
    }
    write_outputs(&out, job, inputs, &outcome.artifacts)?;
    print!("{}", outcome.summary);
    println!("outputs written to {} ({:.2?})", out.display(), started.elapsed());
    Ok(())
}

fn write_outputs(
    out: &Path,
    job: Job,
    inputs: Vec<manifest::InputDigest>,
    artifacts: &[(String, Vec<u8>)],
) -> Result<()> {
    fs::create_dir_all(out).map_err(|source| PodError::Io {
        path: out.display().to_string(),
        source,
    })?;
    for (name, bytes) in artifacts {
        write(&out.join(name), bytes)?;
    }
    let manifest = RunManifest {
        tool: format!("pod {}", env!("CARGO_PKG_VERSION")),
        seed: job.seed(),
        job,
        inputs,
        artifacts: artifacts.iter().map(|(name, _)| name.clone()).collect(),
    };
    write(&out.join(MANIFEST_FILE), &to_json(&manifest)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
