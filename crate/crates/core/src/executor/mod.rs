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

//! Every externally observable effect goes through an [`Executor`].
//!
//! Effects are described as [`ActionKind`] values. Backends number them in
//! emission order and keep the resulting [`Action`] log, which serializes as
//! one line per action:
//!
//! ```text
//! ORDINAL<TAB>KIND<TAB>key=value key=value ...
//! ```
//!
//! Values containing whitespace, quotes or backslashes (or empty values) are
//! written in double quotes with `\\`, `\"`, `\n`, `\t` and `\r` escapes.
//! Keys never contain `=`.

mod dry_run;
mod pipeline;
mod system;

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::image::{ImageError, PartitionEntry, PartitionTable};
use crate::mounts::{MountAction, MountError, MountKind};
use crate::plan::Stage;
use crate::source::SourceError;

pub use dry_run::DryRunExecutor;
pub use pipeline::{execute, BuildReport, Event, ExecuteOptions, PipelineFailure};
pub use system::SystemExecutor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionKind {
    /// The source was taken from the download cache.
    Fetch {
        url: String,
        cached: PathBuf,
    },
    CopyImage {
        src: PathBuf,
        dst: PathBuf,
    },
    DeviceWrite {
        src: PathBuf,
        device: PathBuf,
    },
    GrowFile {
        image: PathBuf,
        bytes: u64,
    },
    WriteTable {
        image: PathBuf,
        table: PartitionTable,
    },
    FsResize {
        image: PathBuf,
        partition: u8,
    },
    Mount(MountAction),
    HostExec {
        cwd: PathBuf,
        cmd: String,
        stdin: Option<String>,
    },
    GuestExec {
        root: PathBuf,
        path: Vec<String>,
        env: Vec<(String, String)>,
        cmd: String,
        stdin: Option<String>,
    },
    CopyIn {
        root: PathBuf,
        src: PathBuf,
        dst: String,
        mode: Option<u32>,
    },
    /// Marks the point where the pipeline aborted; teardown follows.
    Failed {
        stage: Stage,
        origin: Option<String>,
        status: Option<i32>,
        message: String,
    },
}

impl ActionKind {
    /// Every kind name a log line may carry.
    pub const NAMES: [&'static str; 17] = [
        "FETCH",
        "COPY_IMAGE",
        "DEVICE_WRITE",
        "GROW_FILE",
        "WRITE_TABLE",
        "FS_RESIZE",
        "LOOP_ATTACH",
        "MOUNT",
        "BIND",
        "COPY_EMULATOR",
        "REMOVE_EMULATOR",
        "UNMOUNT",
        "LOOP_DETACH",
        "HOST_EXEC",
        "GUEST_EXEC",
        "COPY_IN",
        "FAILED",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ActionKind::Fetch { .. } => "FETCH",
            ActionKind::CopyImage { .. } => "COPY_IMAGE",
            ActionKind::DeviceWrite { .. } => "DEVICE_WRITE",
            ActionKind::GrowFile { .. } => "GROW_FILE",
            ActionKind::WriteTable { .. } => "WRITE_TABLE",
            ActionKind::FsResize { .. } => "FS_RESIZE",
            ActionKind::Mount(m) => match m.kind {
                MountKind::LoopAttach => "LOOP_ATTACH",
                MountKind::MountPartition => "MOUNT",
                MountKind::BindMount => "BIND",
                MountKind::CopyEmulator => "COPY_EMULATOR",
                MountKind::RemoveEmulator => "REMOVE_EMULATOR",
                MountKind::Unmount => "UNMOUNT",
                MountKind::LoopDetach => "LOOP_DETACH",
            },
            ActionKind::HostExec { .. } => "HOST_EXEC",
            ActionKind::GuestExec { .. } => "GUEST_EXEC",
            ActionKind::CopyIn { .. } => "COPY_IN",
            ActionKind::Failed { .. } => "FAILED",
        }
    }

    pub fn is_exec(&self) -> bool {
        matches!(
            self,
            ActionKind::HostExec { .. } | ActionKind::GuestExec { .. }
        )
    }

    fn payload(&self) -> Vec<(String, String)> {
        fn p(k: &str, v: impl fmt::Display) -> (String, String) {
            (k.to_string(), v.to_string())
        }
        fn path(k: &str, v: &Path) -> (String, String) {
            (k.to_string(), v.to_string_lossy().into_owned())
        }
        let mut out = Vec::new();
        match self {
            ActionKind::Fetch { url, cached } => {
                out.push(p("url", url));
                out.push(path("cached", cached));
            }
            ActionKind::CopyImage { src, dst } => {
                out.push(path("src", src));
                out.push(path("dst", dst));
            }
            ActionKind::DeviceWrite { src, device } => {
                out.push(path("src", src));
                out.push(path("device", device));
            }
            ActionKind::GrowFile { image, bytes } => {
                out.push(path("image", image));
                out.push(p("bytes", bytes));
            }
            ActionKind::WriteTable { image, table } => {
                out.push(path("image", image));
                out.extend(table.summary());
            }
            ActionKind::FsResize { image, partition } => {
                out.push(path("image", image));
                out.push(p("partition", partition));
            }
            ActionKind::Mount(m) => {
                if !m.source.is_empty() {
                    out.push(p("src", &m.source));
                }
                if !m.target.is_empty() {
                    out.push(p("dst", &m.target));
                }
                if m.create {
                    out.push(p("mkdir", 1));
                }
            }
            ActionKind::HostExec { cwd, cmd, stdin } => {
                out.push(path("cwd", cwd));
                out.push(p("cmd", cmd));
                if let Some(s) = stdin {
                    out.push(p("stdin", s));
                }
            }
            ActionKind::GuestExec {
                root,
                path: dirs,
                env,
                cmd,
                stdin,
            } => {
                out.push(path("root", root));
                out.push(p("path", dirs.join(":")));
                for (k, v) in env {
                    out.push((format!("env.{k}"), v.clone()));
                }
                out.push(p("cmd", cmd));
                if let Some(s) = stdin {
                    out.push(p("stdin", s));
                }
            }
            ActionKind::CopyIn {
                root,
                src,
                dst,
                mode,
            } => {
                out.push(path("root", root));
                out.push(path("src", src));
                out.push(p("dst", dst));
                if let Some(m) = mode {
                    out.push(p("mode", format!("{m:o}")));
                }
            }
            ActionKind::Failed {
                stage,
                origin,
                status,
                message,
            } => {
                out.push(p("stage", stage));
                if let Some(o) = origin {
                    out.push(p("origin", o));
                }
                if let Some(s) = status {
                    out.push(p("status", s));
                }
                out.push(p("message", message));
            }
        }
        out
    }

    fn from_payload(name: &str, pairs: Vec<(String, String)>) -> Result<Self, LogParseError> {
        let mut fields: BTreeMap<String, String> = BTreeMap::new();
        let mut env = Vec::new();
        for (k, v) in pairs {
            if let Some(var) = k.strip_prefix("env.") {
                env.push((var.to_string(), v));
            } else {
                fields.insert(k, v);
            }
        }
        let mut f = Fields { name, map: fields };
        let mount = |kind, f: &mut Fields| {
            ActionKind::Mount(MountAction {
                kind,
                source: f.opt("src").unwrap_or_default(),
                target: f.opt("dst").unwrap_or_default(),
                ordinal: 0,
                create: f.opt("mkdir").is_some_and(|v| v == "1"),
            })
        };
        let kind = match name {
            "FETCH" => ActionKind::Fetch {
                url: f.take("url")?,
                cached: f.take("cached")?.into(),
            },
            "COPY_IMAGE" => ActionKind::CopyImage {
                src: f.take("src")?.into(),
                dst: f.take("dst")?.into(),
            },
            "DEVICE_WRITE" => ActionKind::DeviceWrite {
                src: f.take("src")?.into(),
                device: f.take("device")?.into(),
            },
            "GROW_FILE" => ActionKind::GrowFile {
                image: f.take("image")?.into(),
                bytes: f.take("bytes")?.parse().map_err(|_| f.bad("bad `bytes`"))?,
            },
            "WRITE_TABLE" => {
                let image = f.take("image")?.into();
                let disk_id = u32::from_str_radix(&f.take("disk_id")?, 16)
                    .map_err(|_| f.bad("bad `disk_id`"))?;
                let mut entries = [PartitionEntry::empty(1); 4];
                for (i, e) in entries.iter_mut().enumerate() {
                    let index = i as u8 + 1;
                    *e = PartitionEntry::parse_display(index, &f.take(&format!("p{index}"))?)
                        .ok_or_else(|| f.bad("bad partition entry"))?;
                }
                ActionKind::WriteTable {
                    image,
                    table: PartitionTable { disk_id, entries },
                }
            }
            "FS_RESIZE" => ActionKind::FsResize {
                image: f.take("image")?.into(),
                partition: f
                    .take("partition")?
                    .parse()
                    .map_err(|_| f.bad("bad `partition`"))?,
            },
            "LOOP_ATTACH" => mount(MountKind::LoopAttach, &mut f),
            "MOUNT" => mount(MountKind::MountPartition, &mut f),
            "BIND" => mount(MountKind::BindMount, &mut f),
            "COPY_EMULATOR" => mount(MountKind::CopyEmulator, &mut f),
            "REMOVE_EMULATOR" => mount(MountKind::RemoveEmulator, &mut f),
            "UNMOUNT" => mount(MountKind::Unmount, &mut f),
            "LOOP_DETACH" => mount(MountKind::LoopDetach, &mut f),
            "HOST_EXEC" => ActionKind::HostExec {
                cwd: f.take("cwd")?.into(),
                cmd: f.take("cmd")?,
                stdin: f.opt("stdin"),
            },
            "GUEST_EXEC" => {
                let path = f.take("path")?;
                ActionKind::GuestExec {
                    root: f.take("root")?.into(),
                    path: if path.is_empty() {
                        Vec::new()
                    } else {
                        path.split(':').map(str::to_string).collect()
                    },
                    env,
                    cmd: f.take("cmd")?,
                    stdin: f.opt("stdin"),
                }
            }
            "COPY_IN" => ActionKind::CopyIn {
                root: f.take("root")?.into(),
                src: f.take("src")?.into(),
                dst: f.take("dst")?,
                mode: match f.opt("mode") {
                    Some(m) => Some(u32::from_str_radix(&m, 8).map_err(|_| f.bad("bad `mode`"))?),
                    None => None,
                },
            },
            "FAILED" => {
                let stage = match f.take("stage")?.as_str() {
                    "setup" => Stage::Setup,
                    "prepare" => Stage::Prepare,
                    "chroot" => Stage::Chroot,
                    _ => return Err(f.bad("bad `stage`")),
                };
                ActionKind::Failed {
                    stage,
                    origin: f.opt("origin"),
                    status: match f.opt("status") {
                        Some(s) => Some(s.parse().map_err(|_| f.bad("bad `status`"))?),
                        None => None,
                    },
                    message: f.take("message")?,
                }
            }
            other => return Err(LogParseError(format!("unknown action kind `{other}`"))),
        };
        Ok(kind)
    }
}

struct Fields<'a> {
    name: &'a str,
    map: BTreeMap<String, String>,
}

impl Fields<'_> {
    fn bad(&self, what: &str) -> LogParseError {
        LogParseError(format!("{}: {what}", self.name))
    }

    fn take(&mut self, key: &str) -> Result<String, LogParseError> {
        self.map
            .remove(key)
            .ok_or_else(|| self.bad(&format!("missing `{key}`")))
    }

    fn opt(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }
}

/// A numbered action as recorded by a backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Action {
    pub ordinal: u64,
    pub kind: ActionKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed action log line: {0}")]
pub struct LogParseError(pub String);

impl Action {
    pub fn to_line(&self) -> String {
        let payload = self
            .kind
            .payload()
            .into_iter()
            .map(|(k, v)| format!("{k}={}", encode_value(&v)))
            .collect::<Vec<_>>()
            .join(" ");
        format!("{}\t{}\t{}", self.ordinal, self.kind.name(), payload)
    }

    pub fn parse_line(line: &str) -> Result<Action, LogParseError> {
        let mut parts = line.splitn(3, '\t');
        let (Some(ord), Some(name), Some(payload)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(LogParseError(line.to_string()));
        };
        let ordinal = ord
            .parse()
            .map_err(|_| LogParseError(format!("bad ordinal `{ord}`")))?;
        Ok(Action {
            ordinal,
            kind: ActionKind::from_payload(name, decode_payload(payload)?)?,
        })
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}

/// Renders a whole log, one line per action, newline terminated.
pub fn render_log_lines(actions: &[Action]) -> String {
    let mut out = String::new();
    for a in actions {
        out.push_str(&a.to_line());
        out.push('\n');
    }
    out
}

pub fn parse_log(text: &str) -> Result<Vec<Action>, LogParseError> {
    text.lines().map(Action::parse_line).collect()
}

fn encode_value(v: &str) -> String {
    let plain = !v.is_empty()
        && !v
            .chars()
            .any(|c| c.is_whitespace() || c == '"' || c == '\\' || c.is_control());
    if plain {
        return v.to_string();
    }
    let mut out = String::with_capacity(v.len() + 2);
    out.push('"');
    for c in v.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c if c.is_control() => out.push_str(&format!("\\u{{{:x}}}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn decode_payload(text: &str) -> Result<Vec<(String, String)>, LogParseError> {
    let err = |m: &str| LogParseError(format!("{m} in `{text}`"));
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    while chars.peek().is_some() {
        let mut key = String::new();
        for c in chars.by_ref() {
            if c == '=' {
                break;
            }
            key.push(c);
        }
        if key.is_empty() {
            return Err(err("empty key"));
        }
        let mut value = String::new();
        if chars.peek() == Some(&'"') {
            chars.next();
            loop {
                match chars.next() {
                    None => return Err(err("unterminated quote")),
                    Some('"') => break,
                    Some('\\') => match chars.next() {
                        Some('\\') => value.push('\\'),
                        Some('"') => value.push('"'),
                        Some('n') => value.push('\n'),
                        Some('t') => value.push('\t'),
                        Some('r') => value.push('\r'),
                        Some('u') => {
                            if chars.next() != Some('{') {
                                return Err(err("bad escape"));
                            }
                            let hex: String = chars.by_ref().take_while(|&c| c != '}').collect();
                            let c = u32::from_str_radix(&hex, 16)
                                .ok()
                                .and_then(char::from_u32)
                                .ok_or_else(|| err("bad escape"))?;
                            value.push(c);
                        }
                        _ => return Err(err("bad escape")),
                    },
                    Some(c) => value.push(c),
                }
            }
            match chars.next() {
                None | Some(' ') => {}
                Some(_) => return Err(err("junk after quoted value")),
            }
        } else {
            for c in chars.by_ref() {
                if c == ' ' {
                    break;
                }
                value.push(c);
            }
        }
        out.push((key, value));
    }
    Ok(out)
}

/// Numbers actions as they are emitted.
#[derive(Debug, Default, Clone)]
pub struct ActionLog {
    actions: Vec<Action>,
}

impl ActionLog {
    pub fn record(&mut self, kind: ActionKind) -> &Action {
        let ordinal = self.actions.len() as u64 + 1;
        self.actions.push(Action { ordinal, kind });
        self.actions.last().unwrap()
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("command exited with status {status}")]
    CommandFailed { status: i32 },
    #[error("no usable shell: {0}")]
    ShellUnavailable(String),
    #[error("{0}")]
    ChrootUnavailable(String),
    #[error("{0}")]
    Environment(String),
    #[error("INSTALL source {} does not exist", .0.display())]
    SourceMissing(PathBuf),
    #[error("invalid mode `{0}` (expected octal 0..7777)")]
    InvalidMode(String),
    #[error("`{program}` failed with {status}: {stderr}")]
    Tool {
        program: String,
        status: String,
        stderr: String,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Mount(#[from] MountError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl ExecError {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        ExecError::Io {
            context: context.into(),
            source,
        }
    }

    /// Problems with the host (privileges, missing tools) rather than the build.
    pub fn is_environment(&self) -> bool {
        matches!(
            self,
            ExecError::ShellUnavailable(_)
                | ExecError::ChrootUnavailable(_)
                | ExecError::Environment(_)
                | ExecError::Source(SourceError::CacheUnwritable { .. })
        )
    }

    pub fn status(&self) -> Option<i32> {
        match self {
            ExecError::CommandFailed { status } => Some(*status),
            _ => None,
        }
    }
}

/// Sector 0 and total length of an image as a backend sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageView {
    pub sector0: Vec<u8>,
    pub len: u64,
}

pub trait Executor {
    /// Performs `action`, streaming any command output line by line.
    /// Returns the exit status for exec actions and 0 otherwise.
    fn run(&mut self, action: &ActionKind, output: &mut dyn FnMut(&str)) -> Result<i32, ExecError>;

    fn perform(&mut self, action: &ActionKind) -> Result<i32, ExecError> {
        self.run(action, &mut |line| log::info!("    {line}"))
    }

    fn image_view(&mut self, image: &Path) -> Result<ImageView, ExecError>;

    /// Contents of a file inside the mounted guest, if it exists.
    fn read_guest_file(
        &mut self,
        root: &Path,
        guest_path: &str,
    ) -> Result<Option<String>, ExecError>;

    /// SHA-256 of the image, when the backend can compute one.
    fn image_digest(&mut self, image: &Path) -> Result<Option<String>, ExecError>;

    fn actions(&self) -> &[Action];
}

/// Environment for commands run inside the guest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuestEnv {
    pub root: PathBuf,
    /// `PATH` entries added by the Pifile, in order.
    pub extensions: Vec<String>,
    pub host_path: Vec<String>,
    pub extra_env: BTreeMap<String, String>,
}

impl GuestEnv {
    pub fn new(root: impl Into<PathBuf>, host_path: &str) -> Self {
        GuestEnv {
            root: root.into(),
            extensions: Vec::new(),
            host_path: split_path(host_path),
            extra_env: BTreeMap::new(),
        }
    }

    pub fn extend_path(&mut self, dir: &str) {
        self.extensions.push(dir.to_string());
    }

    /// Pifile extensions followed by the host `PATH`, first occurrence wins.
    pub fn path_var(&self) -> Vec<String> {
        compose_path(&self.extensions, &self.host_path)
    }
}

fn split_path(path: &str) -> Vec<String> {
    path.split(':')
        .filter(|p| !p.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn compose_path(extensions: &[String], host: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for dir in extensions.iter().chain(host) {
        if !dir.is_empty() && !out.contains(dir) {
            out.push(dir.clone());
        }
    }
    out
}

/// Runs `cmd` under the host shell in `cwd`. A nonzero exit is an error.
pub fn run_host(
    cmd: &str,
    stdin: Option<&str>,
    cwd: &Path,
    exec: &mut dyn Executor,
    output: &mut dyn FnMut(&str),
) -> Result<i32, ExecError> {
    let status = exec.run(
        &ActionKind::HostExec {
            cwd: cwd.to_path_buf(),
            cmd: cmd.to_string(),
            stdin: stdin.map(str::to_string),
        },
        output,
    )?;
    match status {
        0 => Ok(0),
        status => Err(ExecError::CommandFailed { status }),
    }
}

/// Runs `cmd` under the guest shell, chrooted into `env.root`.
pub fn run_guest(
    cmd: &str,
    stdin: Option<&str>,
    env: &GuestEnv,
    exec: &mut dyn Executor,
    output: &mut dyn FnMut(&str),
) -> Result<i32, ExecError> {
    let status = exec.run(
        &ActionKind::GuestExec {
            root: env.root.clone(),
            path: env.path_var(),
            env: env
                .extra_env
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            cmd: cmd.to_string(),
            stdin: stdin.map(str::to_string),
        },
        output,
    )?;
    match status {
        0 => Ok(0),
        status => Err(ExecError::CommandFailed { status }),
    }
}

/// Octal permission bits, at most `7777`.
pub fn parse_mode(text: &str) -> Result<u32, ExecError> {
    let bad = || ExecError::InvalidMode(text.to_string());
    if text.is_empty() || !text.bytes().all(|b| (b'0'..=b'7').contains(&b)) {
        return Err(bad());
    }
    match u32::from_str_radix(text, 8) {
        Ok(m) if m <= 0o7777 => Ok(m),
        _ => Err(bad()),
    }
}

/// Copies a host file or directory to `dst` inside the guest root.
pub fn install_file(
    src: &Path,
    dst: &str,
    mode: Option<&str>,
    root: &Path,
    exec: &mut dyn Executor,
) -> Result<(), ExecError> {
    let mode = mode.map(parse_mode).transpose()?;
    let dst = if dst.starts_with('/') {
        dst.to_string()
    } else {
        format!("/{dst}")
    };
    exec.perform(&ActionKind::CopyIn {
        root: root.to_path_buf(),
        src: src.to_path_buf(),
        dst,
        mode,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_kinds() -> Vec<ActionKind> {
        let m = |kind, s: &str, t: &str, create| {
            ActionKind::Mount(MountAction {
                kind,
                source: s.into(),
                target: t.into(),
                ordinal: 0,
                create,
            })
        };
        vec![
            ActionKind::Fetch {
                url: "https://h/x.img.xz".into(),
                cached: "/c/k/image".into(),
            },
            ActionKind::CopyImage {
                src: "/w/a b.img".into(),
                dst: "/w/out.img".into(),
            },
            ActionKind::DeviceWrite {
                src: "/w/a.img".into(),
                device: "/dev/sdc".into(),
            },
            ActionKind::GrowFile {
                image: "/w/out.img".into(),
                bytes: 16 << 20,
            },
            ActionKind::WriteTable {
                image: "/w/out.img".into(),
                table: PartitionTable {
                    disk_id: 0xdeadbeef,
                    entries: [
                        PartitionEntry {
                            index: 1,
                            bootable: true,
                            type_code: 0x0c,
                            lba_start: 2048,
                            lba_size: 16384,
                        },
                        PartitionEntry::empty(2),
                        PartitionEntry::empty(3),
                        PartitionEntry::empty(4),
                    ],
                },
            },
            ActionKind::FsResize {
                image: "/w/out.img".into(),
                partition: 2,
            },
            m(MountKind::LoopAttach, "/w/out.img", "", false),
            m(MountKind::MountPartition, "p1", "/r/boot", true),
            m(MountKind::BindMount, "/dev", "/r/dev", false),
            m(
                MountKind::CopyEmulator,
                "/usr/bin/qemu-arm-static",
                "/r/usr/bin/qemu-arm-static",
                false,
            ),
            m(
                MountKind::RemoveEmulator,
                "/usr/bin/qemu-arm-static",
                "/r/usr/bin/qemu-arm-static",
                false,
            ),
            m(MountKind::Unmount, "/dev", "/r/dev", false),
            m(MountKind::LoopDetach, "/w/out.img", "", false),
            ActionKind::HostExec {
                cwd: "/w".into(),
                cmd: "make -C build".into(),
                stdin: None,
            },
            ActionKind::GuestExec {
                root: "/r".into(),
                path: vec!["/opt/bin".into(), "/usr/bin".into()],
                env: vec![("HOME".into(), "/root".into())],
                cmd: "tee /etc/x".into(),
                stdin: Some("a=\"1\"\n\tb\\c\n".into()),
            },
            ActionKind::CopyIn {
                root: "/r".into(),
                src: "/w/id.pub".into(),
                dst: "/root/.ssh/authorized_keys".into(),
                mode: Some(0o600),
            },
            ActionKind::Failed {
                stage: Stage::Chroot,
                origin: Some("example.Pifile:9".into()),
                status: Some(1),
                message: "command exited with status 1".into(),
            },
        ]
    }

    #[test]
    fn every_kind_name_covered_and_parsed() {
        let kinds = sample_kinds();
        let names: Vec<_> = kinds.iter().map(|k| k.name()).collect();
        assert_eq!(names, ActionKind::NAMES);
        for (i, kind) in kinds.into_iter().enumerate() {
            let action = Action {
                ordinal: i as u64 + 1,
                kind,
            };
            let line = action.to_line();
            assert!(!line.contains('\n'));
            assert_eq!(Action::parse_line(&line).unwrap(), action, "{line}");
        }
    }

    #[test]
    fn line_shape() {
        let a = Action {
            ordinal: 7,
            kind: ActionKind::GuestExec {
                root: "/r".into(),
                path: vec!["/opt/bin".into(), "/bin".into()],
                env: vec![],
                cmd: "raspi-config nonint do_serial 0".into(),
                stdin: None,
            },
        };
        assert_eq!(
            a.to_line(),
            "7\tGUEST_EXEC\troot=/r path=/opt/bin:/bin cmd=\"raspi-config nonint do_serial 0\""
        );
    }

    #[test]
    fn guest_path_composition() {
        let mut env = GuestEnv::new("/r", "/usr/bin:/bin::/opt/bin");
        assert_eq!(env.path_var(), ["/usr/bin", "/bin", "/opt/bin"]);
        env.extend_path("/opt/bin");
        env.extend_path("/sbin");
        assert_eq!(env.path_var(), ["/opt/bin", "/sbin", "/usr/bin", "/bin"]);
    }

    #[test]
    fn modes() {
        assert_eq!(parse_mode("700").unwrap(), 0o700);
        assert_eq!(parse_mode("0755").unwrap(), 0o755);
        assert_eq!(parse_mode("7777").unwrap(), 0o7777);
        for bad in ["999", "", "10000", "rwx", "-1", "0o7"] {
            assert!(
                matches!(parse_mode(bad), Err(ExecError::InvalidMode(_))),
                "{bad}"
            );
        }
    }

    proptest! {
        #[test]
        fn values_round_trip(v in any::<String>(), k in "[a-z][a-z._]{0,8}") {
            let line = format!("1\tHOST_EXEC\tcwd=/ {k}={} cmd=x", encode_value(&v));
            let pairs = decode_payload(line.splitn(3, '\t').nth(2).unwrap()).unwrap();
            prop_assert_eq!(&pairs[1], &(k, v));
            prop_assert!(!line.contains('\n'));
        }

        #[test]
        fn path_compose_is_dedup_concat(
            ext in proptest::collection::vec("/[a-c]{1,2}", 0..5),
            host in proptest::collection::vec("/[a-c]{1,2}", 0..5),
        ) {
            let got = compose_path(&ext, &host);
            // oracle: concatenate, keep first occurrences
            let mut want: Vec<String> = Vec::new();
            for d in ext.iter().chain(host.iter()) {
                if !want.iter().any(|w| w == d) { want.push(d.clone()); }
            }
            prop_assert_eq!(got, want);
        }
    }
}
