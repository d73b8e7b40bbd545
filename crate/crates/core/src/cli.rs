// Copyright 2026 The imgforge Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Command-line front end.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Parser;

use crate::executor::{
    execute, render_log_lines, DryRunExecutor, Event, ExecuteOptions, Executor, SystemExecutor,
};
use crate::parser::parse_pifile;
use crate::plan::{build_plan, validate_plan, PlanDefaults};
use crate::source::{
    default_cache_dir, resolve_source, Cache, HostProbe, NetFetcher, ResolveOptions, SourceError,
};

/// Mount point recorded in dry-run logs when `--mount-root` is not given.
pub const DRY_RUN_MOUNT_ROOT: &str = "/mnt/imgforge";

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(i32)]
pub enum Exit {
    Success = 0,
    /// Pifile, plan or usage errors.
    Static = 1,
    /// A build step failed.
    Execution = 2,
    /// Missing privileges or host tools.
    Environment = 3,
}

impl Exit {
    pub fn code(self) -> i32 {
        self as i32
    }
}

/// Build single-board-computer OS images from a Pifile.
#[derive(Debug, Clone, Parser)]
#[command(name = "imgforge", version, about)]
pub struct CliConfig {
    /// The Pifile to build.
    pub pifile: PathBuf,
    /// Record the actions to FILE instead of performing them.
    #[arg(long, value_name = "FILE")]
    pub dry_run: Option<PathBuf>,
    /// Download cache directory (default: $PIMOD_CACHE or .pimod-cache next to the Pifile).
    #[arg(long = "cache", value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Set a variable for Pifile expansion; repeatable.
    #[arg(long = "env", value_name = "K=V", value_parser = parse_env_pair)]
    pub env_overrides: Vec<(String, String)>,
    /// Download URL sources again even when cached.
    #[arg(long)]
    pub refresh: bool,
    /// Only use cached downloads.
    #[arg(long, conflicts_with = "refresh")]
    pub offline: bool,
    /// More log output; repeatable.
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Less log output; repeatable.
    #[arg(short, long, action = clap::ArgAction::Count, conflicts_with = "verbose")]
    pub quiet: u8,
    /// Allow writing to a block device.
    #[arg(long)]
    pub inplace_device: bool,
    /// Static emulator to copy into the guest; repeatable (default: qemu-*-static on PATH).
    #[arg(long, value_name = "PATH")]
    pub emulator: Vec<PathBuf>,
    /// Guest fstab to assume during a dry run.
    #[arg(long, value_name = "FILE")]
    pub guest_fstab: Option<PathBuf>,
    /// Where the guest root is mounted.
    #[arg(long, value_name = "DIR")]
    pub mount_root: Option<PathBuf>,
}

fn parse_env_pair(text: &str) -> Result<(String, String), String> {
    match text.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected K=V, got `{text}`")),
    }
}

impl CliConfig {
    /// -1 quiet, 0 normal, 1+ verbose.
    pub fn verbosity(&self) -> i8 {
        self.verbose as i8 - self.quiet as i8
    }
}

/// One line of the human-readable build log.
pub fn render_log(event: &Event) -> String {
    match event {
        Event::StageBegin(stage) => format!("[{stage}] begin"),
        Event::StageEnd { stage, elapsed } => {
            format!("[{stage}] done in {:.2}s", elapsed.as_secs_f64())
        }
        Event::Command {
            stage,
            origin,
            text,
        } => format!("[{stage}] {} {text}", origin.short()),
        Event::Output { line, .. } => format!("    {line}"),
        Event::Warning { stage, message } => format!("[{stage}] warning: {message}"),
        Event::Failure {
            stage,
            origin,
            message,
        } => match origin {
            Some(o) => format!("[{stage}] {} failed: {message}", o.short()),
            None => format!("[{stage}] failed: {message}"),
        },
        Event::Teardown { stage } => format!("[{stage}] teardown"),
    }
}

/// Static emulators (`qemu-*-static`) found on `path`, first occurrence wins.
pub fn discover_emulators(path: &str) -> Vec<PathBuf> {
    let mut names: Vec<String> = Vec::new();
    let mut found = Vec::new();
    for dir in path.split(':').filter(|d| !d.is_empty()) {
        let Ok(entries) = fs::read_dir(dir) else {
            continue;
        };
        let mut here: Vec<_> = entries
            .filter_map(Result::ok)
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with("qemu-") && n.ends_with("-static"))
            .collect();
        here.sort();
        for name in here {
            if !names.contains(&name) {
                found.push(Path::new(dir).join(&name));
                names.push(name);
            }
        }
    }
    found
}

/// Parses `argv` (including the program name) and runs the build.
pub fn run<I, T>(argv: I, env: HashMap<String, String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match CliConfig::try_parse_from(argv) {
        Ok(config) => run_with(
            &config,
            env,
            None,
            &mut std::io::stdout(),
            &mut std::io::stderr(),
        ),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                Exit::Static.code()
            } else {
                Exit::Success.code()
            }
        }
    }
}

/// Runs a build. `backend` replaces the executor that would otherwise be
/// chosen from the configuration.
pub fn run_with(
    config: &CliConfig,
    env: HashMap<String, String>,
    backend: Option<Box<dyn Executor>>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let mut env = env;
    env.extend(config.env_overrides.iter().cloned());
    let quiet = config.verbosity() < 0;

    let pifile = match parse_pifile(&config.pifile, &env, 0) {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return Exit::Static.code();
        }
    };
    for w in &pifile.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    let probe = HostProbe;
    let plan = match build_plan(&pifile, &PlanDefaults::new(&probe)) {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return Exit::Static.code();
        }
    };
    for w in validate_plan(&plan, &probe) {
        let _ = writeln!(err, "warning: {w}");
    }
    if plan.destination.is_device && config.dry_run.is_none() && !config.inplace_device {
        let _ = writeln!(
            err,
            "error: {} is a block device; pass --inplace-device to write to it",
            plan.destination.path.display()
        );
        return Exit::Static.code();
    }

    let cache_dir = config
        .cache_dir
        .clone()
        .unwrap_or_else(|| default_cache_dir(&config.pifile, &env));
    let fetcher = NetFetcher;
    let resolve = ResolveOptions {
        cache: Cache::new(cache_dir),
        fetcher: &fetcher,
        refresh: config.refresh,
        offline: config.offline,
    };
    let source = match resolve_source(&plan.source, &resolve) {
        Ok(s) => s,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return match e {
                SourceError::CacheUnwritable { .. } => Exit::Environment.code(),
                _ => Exit::Execution.code(),
            };
        }
    };

    let mut backend: Box<dyn Executor> = match backend {
        Some(b) => b,
        None if config.dry_run.is_some() => {
            let mut dry = DryRunExecutor::new();
            if let Some(path) = &config.guest_fstab {
                match fs::read_to_string(path) {
                    Ok(text) => dry = dry.with_guest_file("/etc/fstab", &text),
                    Err(e) => {
                        let _ = writeln!(err, "error: cannot read {}: {e}", path.display());
                        return Exit::Static.code();
                    }
                }
            }
            Box::new(dry)
        }
        None => Box::new(SystemExecutor::new()),
    };

    let host_path = env.get("PATH").cloned().unwrap_or_default();
    let mut temp_root = None;
    let mount_root = match (&config.mount_root, &config.dry_run) {
        (Some(r), _) => r.clone(),
        (None, Some(_)) => PathBuf::from(DRY_RUN_MOUNT_ROOT),
        (None, None) => {
            let dir = std::env::temp_dir().join(format!("imgforge-{}", std::process::id()));
            if let Err(e) = fs::create_dir_all(&dir) {
                let _ = writeln!(err, "error: cannot create {}: {e}", dir.display());
                return Exit::Environment.code();
            }
            temp_root = Some(dir.clone());
            dir
        }
    };
    let mut opts = ExecuteOptions::new(mount_root);
    if !host_path.is_empty() {
        opts.host_path = host_path.clone();
    }
    opts.mounts.emulators = if config.emulator.is_empty() {
        discover_emulators(&host_path)
    } else {
        config.emulator.clone()
    };

    let result = execute(&plan, &source, backend.as_mut(), &opts, &mut |event| {
        let line = render_log(&event);
        match event {
            Event::Warning { .. } | Event::Failure { .. } => {
                let _ = writeln!(err, "{line}");
            }
            _ if quiet => {}
            _ => {
                let _ = writeln!(out, "{line}");
            }
        }
    });

    if let Some(dir) = temp_root {
        let _ = fs::remove_dir(dir);
    }
    if let Some(log_path) = &config.dry_run {
        if let Err(e) = fs::write(log_path, render_log_lines(backend.actions())) {
            let _ = writeln!(err, "error: cannot write {}: {e}", log_path.display());
            return Exit::Environment.code();
        }
    }
    match result {
        Ok(report) => {
            if !quiet {
                if let Some(digest) = &report.digest {
                    let _ = writeln!(out, "{}  sha256:{digest}", report.destination.display());
                }
            }
            Exit::Success.code()
        }
        Err(failure) => {
            let _ = writeln!(err, "error: {failure}");
            for e in &failure.teardown_errors {
                let _ = writeln!(err, "error: teardown: {e}");
            }
            if failure.error.is_environment() {
                Exit::Environment.code()
            } else {
                Exit::Execution.code()
            }
        }
    }
}
