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

//! Runs a plan stage by stage against an executor.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use super::{install_file, run_guest, run_host, ActionKind, ExecError, Executor, GuestEnv};
use crate::image::{pump, PartitionTable};
use crate::mounts::{build_mount_plan, MountAction, MountOptions};
use crate::parser::{CommandKind, SourceLine};
use crate::plan::{install_args, ExecutionPlan, Stage};
use crate::source::{materialize_destination, ResolvedSource};

#[derive(Debug, Clone)]
pub struct ExecuteOptions {
    pub mounts: MountOptions,
    /// Host `PATH`, appended after the Pifile's `PATH` entries in the guest.
    pub host_path: String,
    /// Extra variables for guest commands.
    pub extra_env: BTreeMap<String, String>,
}

impl ExecuteOptions {
    pub fn new(mount_root: impl Into<PathBuf>) -> Self {
        ExecuteOptions {
            mounts: MountOptions::new(mount_root),
            host_path: "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin".into(),
            extra_env: BTreeMap::from([("HOME".to_string(), "/root".to_string())]),
        }
    }
}

/// Progress notifications for the human-readable log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    StageBegin(Stage),
    StageEnd {
        stage: Stage,
        elapsed: Duration,
    },
    Command {
        stage: Stage,
        origin: SourceLine,
        text: String,
    },
    Output {
        stage: Stage,
        line: String,
    },
    Warning {
        stage: Stage,
        message: String,
    },
    Failure {
        stage: Stage,
        origin: Option<SourceLine>,
        message: String,
    },
    Teardown {
        stage: Stage,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub destination: PathBuf,
    pub stage_durations: BTreeMap<Stage, Duration>,
    /// Number of actions per kind name.
    pub action_counts: BTreeMap<String, usize>,
    /// SHA-256 of the finished image, if the backend could compute it.
    pub digest: Option<String>,
}

impl BuildReport {
    pub fn count(&self, kind: &str) -> usize {
        self.action_counts.get(kind).copied().unwrap_or(0)
    }
}

#[derive(Debug)]
pub struct PipelineFailure {
    pub stage: Stage,
    pub origin: Option<SourceLine>,
    pub error: ExecError,
    pub teardown_errors: Vec<ExecError>,
    pub report: BuildReport,
}

impl std::fmt::Display for PipelineFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.origin {
            Some(o) => write!(f, "{o}: {}", self.error),
            None => write!(f, "{} stage: {}", self.stage, self.error),
        }
    }
}

struct Failure {
    stage: Stage,
    origin: Option<SourceLine>,
    error: ExecError,
}

struct Runner<'a> {
    plan: &'a ExecutionPlan,
    source: &'a ResolvedSource,
    backend: &'a mut dyn Executor,
    opts: &'a ExecuteOptions,
    events: &'a mut dyn FnMut(Event),
    applied: Vec<MountAction>,
    durations: BTreeMap<Stage, Duration>,
}

impl Runner<'_> {
    fn announce(&mut self, stage: Stage, kinds: &[CommandKind]) {
        for cmd in self.plan.commands(stage) {
            if kinds.contains(&cmd.kind) {
                (self.events)(Event::Command {
                    stage,
                    origin: cmd.origin.clone(),
                    text: format!("{} {}", cmd.kind.keyword(), cmd.display_args()),
                });
            }
        }
    }

    fn first_origin(&self, stage: Stage, kinds: &[CommandKind]) -> Option<SourceLine> {
        self.plan
            .commands(stage)
            .iter()
            .find(|c| kinds.contains(&c.kind))
            .map(|c| c.origin.clone())
    }

    fn timed(
        &mut self,
        stage: Stage,
        f: impl FnOnce(&mut Self) -> Result<(), Box<Failure>>,
    ) -> Result<(), Box<Failure>> {
        (self.events)(Event::StageBegin(stage));
        let start = Instant::now();
        let r = f(self);
        let elapsed = start.elapsed();
        self.durations.insert(stage, elapsed);
        if r.is_ok() {
            (self.events)(Event::StageEnd { stage, elapsed });
        }
        r
    }

    fn setup(&mut self) -> Result<(), Box<Failure>> {
        let kinds = [CommandKind::From, CommandKind::Inplace, CommandKind::To];
        self.announce(Stage::Setup, &kinds);
        let origin = self.first_origin(Stage::Setup, &[CommandKind::From, CommandKind::Inplace]);
        let fail = |error| {
            Box::new(Failure {
                stage: Stage::Setup,
                origin: origin.clone(),
                error,
            })
        };
        if let Some((url, entry)) = &self.source.fetched {
            self.backend
                .perform(&ActionKind::Fetch {
                    url: url.clone(),
                    cached: entry.stored_path.clone(),
                })
                .map_err(fail)?;
        }
        materialize_destination(self.plan, &self.source.path, self.backend).map_err(fail)?;
        Ok(())
    }

    fn prepare(&mut self) -> Result<(), Box<Failure>> {
        self.announce(Stage::Prepare, &[CommandKind::Pump]);
        let origin = self.first_origin(Stage::Prepare, &[CommandKind::Pump]);
        pump(self.plan, self.backend).map_err(|error| {
            Box::new(Failure {
                stage: Stage::Prepare,
                origin,
                error,
            })
        })?;
        Ok(())
    }

    fn apply(&mut self, action: &MountAction) -> Result<(), ExecError> {
        self.backend.perform(&ActionKind::Mount(action.clone()))?;
        self.applied.push(action.clone());
        Ok(())
    }

    fn mount(&mut self) -> Result<(), ExecError> {
        let image = self.plan.destination.path.clone();
        let view = self.backend.image_view(&image)?;
        let table = PartitionTable::decode(&view.sector0)?;
        let base = build_mount_plan(self.plan, &table, None, &self.opts.mounts)?;
        for action in &base.setup[..2] {
            self.apply(action)?;
        }
        let fstab = self
            .backend
            .read_guest_file(&self.opts.mounts.root, "/etc/fstab")?;
        let full = build_mount_plan(self.plan, &table, fstab.as_deref(), &self.opts.mounts)?;
        for w in &full.warnings {
            (self.events)(Event::Warning {
                stage: Stage::Chroot,
                message: w.to_string(),
            });
        }
        for action in &full.setup[2..] {
            self.apply(action)?;
        }
        Ok(())
    }

    fn chroot(&mut self) -> Result<(), Box<Failure>> {
        let commands = self.plan.commands(Stage::Chroot);
        if commands.is_empty() {
            return Ok(());
        }
        self.mount().map_err(|error| {
            Box::new(Failure {
                stage: Stage::Chroot,
                origin: None,
                error,
            })
        })?;
        let root: &Path = &self.opts.mounts.root;
        let mut env = GuestEnv::new(root, &self.opts.host_path);
        env.extra_env = self.opts.extra_env.clone();
        let work_dir = self.plan.work_dir();
        for cmd in commands {
            (self.events)(Event::Command {
                stage: Stage::Chroot,
                origin: cmd.origin.clone(),
                text: format!("{} {}", cmd.kind.keyword(), cmd.display_args()),
            });
            let events = &mut *self.events;
            let mut output = |line: &str| {
                events(Event::Output {
                    stage: Stage::Chroot,
                    line: line.to_string(),
                })
            };
            let result = match cmd.kind {
                CommandKind::Path => {
                    env.extend_path(&cmd.args[0]);
                    Ok(())
                }
                CommandKind::Run => run_guest(
                    &cmd.args[0],
                    cmd.heredoc.as_deref(),
                    &env,
                    self.backend,
                    &mut output,
                )
                .map(drop),
                CommandKind::Host => run_host(
                    &cmd.args[0],
                    cmd.heredoc.as_deref(),
                    &work_dir,
                    self.backend,
                    &mut output,
                )
                .map(drop),
                CommandKind::Install => {
                    let (mode, src, dst) = install_args(cmd);
                    install_file(&self.plan.host_path(src), dst, mode, root, self.backend)
                }
                other => unreachable!("{other:?} is not a chroot command"),
            };
            result.map_err(|error| {
                Box::new(Failure {
                    stage: Stage::Chroot,
                    origin: Some(cmd.origin.clone()),
                    error,
                })
            })?;
        }
        Ok(())
    }

    fn teardown(&mut self, stage: Stage) -> Vec<ExecError> {
        let mut errors = Vec::new();
        if self.applied.is_empty() {
            return errors;
        }
        (self.events)(Event::Teardown { stage });
        let applied = std::mem::take(&mut self.applied);
        for (i, action) in applied.iter().rev().enumerate() {
            let undo = crate::mounts::teardown_of(action, i);
            if let Err(e) = self.backend.perform(&ActionKind::Mount(undo)) {
                (self.events)(Event::Warning {
                    stage,
                    message: format!("teardown: {e}"),
                });
                errors.push(e);
            }
        }
        errors
    }
}

/// Runs the setup, prepare and chroot stages in order. Anything mounted is
/// unmounted again, whether or not the stages succeed.
pub fn execute(
    plan: &ExecutionPlan,
    source: &ResolvedSource,
    backend: &mut dyn Executor,
    opts: &ExecuteOptions,
    events: &mut dyn FnMut(Event),
) -> Result<BuildReport, Box<PipelineFailure>> {
    let first_action = backend.actions().len();
    let mut runner = Runner {
        plan,
        source,
        backend,
        opts,
        events,
        applied: Vec::new(),
        durations: BTreeMap::new(),
    };
    let result = runner
        .timed(Stage::Setup, Runner::setup)
        .and_then(|()| runner.timed(Stage::Prepare, Runner::prepare))
        .and_then(|()| runner.timed(Stage::Chroot, Runner::chroot));

    let failure = result.err();
    if let Some(f) = &failure {
        (runner.events)(Event::Failure {
            stage: f.stage,
            origin: f.origin.clone(),
            message: f.error.to_string(),
        });
        // the marker is informational; a backend refusing it changes nothing
        let _ = runner.backend.perform(&ActionKind::Failed {
            stage: f.stage,
            origin: f.origin.as_ref().map(SourceLine::short),
            status: f.error.status(),
            message: f.error.to_string(),
        });
    }
    let stage = failure.as_ref().map_or(Stage::Chroot, |f| f.stage);
    let teardown_errors = runner.teardown(stage);

    let mut report = BuildReport {
        destination: plan.destination.path.clone(),
        stage_durations: std::mem::take(&mut runner.durations),
        ..Default::default()
    };
    for a in &runner.backend.actions()[first_action..] {
        *report
            .action_counts
            .entry(a.kind.name().to_string())
            .or_default() += 1;
    }
    match failure {
        Some(f) => Err(Box::new(PipelineFailure {
            stage: f.stage,
            origin: f.origin,
            error: f.error,
            teardown_errors,
            report,
        })),
        None => {
            if let Some(error) = teardown_errors.into_iter().next() {
                return Err(Box::new(PipelineFailure {
                    stage: Stage::Chroot,
                    origin: None,
                    error,
                    teardown_errors: Vec::new(),
                    report,
                }));
            }
            report.digest = runner
                .backend
                .image_digest(&plan.destination.path)
                .ok()
                .flatten();
            Ok(report)
        }
    }
}
