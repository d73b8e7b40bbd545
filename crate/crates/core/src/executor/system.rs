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

//! Backend that performs actions on the host with the usual Linux tools
//! (`losetup`, `mount`, `umount`, `chroot`, `dd`, `e2fsck`, `resize2fs`).

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::os::unix::fs::{symlink, PermissionsExt};
use std::os::unix::process::ExitStatusExt;
use std::path::{Path, PathBuf};
use std::process::{Command as Process, ExitStatus, Stdio};
use std::sync::mpsc;
use std::thread;

use sha2::{Digest, Sha256};

use super::dry_run::read_view;
use super::{Action, ActionKind, ActionLog, ExecError, Executor, ImageView};
use crate::image::{grow_image_file, write_partition_table, ByteSize};
use crate::mounts::{MountAction, MountKind};

const BINFMT_DIR: &str = "/proc/sys/fs/binfmt_misc";

#[derive(Debug, Default)]
pub struct SystemExecutor {
    log: ActionLog,
    /// image path -> loop device
    loops: HashMap<String, String>,
    current_loop: Option<String>,
    copied_emulators: HashSet<String>,
    /// bind targets that were symlinks and were left alone
    skipped_binds: HashSet<String>,
    binfmt_checked: bool,
}

impl SystemExecutor {
    pub fn new() -> Self {
        Self::default()
    }

    fn require_root(&self, what: &str) -> Result<(), ExecError> {
        // SAFETY: geteuid has no preconditions.
        if unsafe { libc::geteuid() } != 0 {
            return Err(ExecError::ChrootUnavailable(format!(
                "{what} requires root privileges; run imgforge as root"
            )));
        }
        Ok(())
    }

    fn check_binfmt(&mut self, emulator: &str) -> Result<(), ExecError> {
        if self.binfmt_checked {
            return Ok(());
        }
        let dir = Path::new(BINFMT_DIR);
        let registered = fs::read_dir(dir)
            .map(|entries| {
                entries
                    .filter_map(Result::ok)
                    .any(|e| e.file_name().to_string_lossy().starts_with("qemu-"))
            })
            .unwrap_or(false);
        if !registered {
            return Err(ExecError::ChrootUnavailable(format!(
                "no qemu handler is registered in {BINFMT_DIR}; \
                 {emulator} cannot run foreign binaries (install qemu-user-static/binfmt-support)"
            )));
        }
        self.binfmt_checked = true;
        Ok(())
    }

    fn mount_action(&mut self, m: &MountAction) -> Result<(), ExecError> {
        match m.kind {
            MountKind::LoopAttach => {
                self.require_root("attaching a loop device")?;
                let dev = tool("losetup", &["-f", "-P", "--show", &m.source])?;
                let dev = dev.trim().to_string();
                self.loops.insert(m.source.clone(), dev.clone());
                self.current_loop = Some(dev);
            }
            MountKind::LoopDetach => {
                let dev = self
                    .loops
                    .remove(&m.source)
                    .or_else(|| self.current_loop.clone());
                if let Some(dev) = dev {
                    tool("losetup", &["-d", &dev])?;
                }
                self.current_loop = None;
            }
            MountKind::MountPartition => {
                let dev = self
                    .current_loop
                    .clone()
                    .ok_or_else(|| ExecError::Environment("no loop device attached".to_string()))?;
                let part = m.source.trim_start_matches('p');
                if m.create {
                    fs::create_dir_all(&m.target)
                        .map_err(|e| ExecError::io(format!("creating {}", m.target), e))?;
                }
                tool("mount", &[&format!("{dev}p{part}"), &m.target])?;
            }
            MountKind::BindMount => {
                let target = Path::new(&m.target);
                if target.is_symlink() {
                    log::warn!("{} is a symlink, not binding {}", m.target, m.source);
                    self.skipped_binds.insert(m.target.clone());
                    return Ok(());
                }
                if Path::new(&m.source).is_dir() {
                    fs::create_dir_all(target)
                        .map_err(|e| ExecError::io(format!("creating {}", m.target), e))?;
                } else if !target.exists() {
                    if let Some(parent) = target.parent() {
                        fs::create_dir_all(parent).map_err(|e| {
                            ExecError::io(format!("creating {}", parent.display()), e)
                        })?;
                    }
                    File::create(target)
                        .map_err(|e| ExecError::io(format!("creating {}", m.target), e))?;
                }
                tool("mount", &["--bind", &m.source, &m.target])?;
            }
            MountKind::CopyEmulator => {
                let target = Path::new(&m.target);
                if target.exists() {
                    return Ok(());
                }
                self.check_binfmt(&m.source)?;
                if let Some(parent) = target.parent() {
                    fs::create_dir_all(parent)
                        .map_err(|e| ExecError::io(format!("creating {}", parent.display()), e))?;
                }
                fs::copy(&m.source, target)
                    .map_err(|e| ExecError::io(format!("copying {}", m.source), e))?;
                fs::set_permissions(target, fs::Permissions::from_mode(0o755))
                    .map_err(|e| ExecError::io(format!("chmod {}", m.target), e))?;
                self.copied_emulators.insert(m.target.clone());
            }
            MountKind::RemoveEmulator => {
                if self.copied_emulators.remove(&m.target) {
                    fs::remove_file(&m.target)
                        .map_err(|e| ExecError::io(format!("removing {}", m.target), e))?;
                }
            }
            MountKind::Unmount => {
                if self.skipped_binds.remove(&m.target) {
                    return Ok(());
                }
                if tool("umount", &[&m.target]).is_err() {
                    tool("umount", &["-l", &m.target])?;
                }
            }
        }
        Ok(())
    }

    fn fs_resize(&self, image: &Path, partition: u8) -> Result<(), ExecError> {
        self.require_root("resizing a filesystem")?;
        let image = image.to_string_lossy();
        let dev = tool("losetup", &["-f", "-P", "--show", &image])?;
        let dev = dev.trim().to_string();
        let part = format!("{dev}p{partition}");
        let result = (|| {
            // e2fsck exits 1 when it corrected something
            let status = Process::new("e2fsck")
                .args(["-p", "-f", &part])
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .status()
                .map_err(|e| spawn_error("e2fsck", e))?;
            if !matches!(status.code(), Some(0 | 1)) {
                return Err(ExecError::Tool {
                    program: "e2fsck".into(),
                    status: status.to_string(),
                    stderr: format!("checking {part}"),
                });
            }
            tool("resize2fs", &[&part]).map(drop)
        })();
        let detach = tool("losetup", &["-d", &dev]);
        result.and(detach.map(drop))
    }
}

fn spawn_error(program: &str, e: io::Error) -> ExecError {
    if e.kind() == io::ErrorKind::NotFound {
        ExecError::Environment(format!("required tool `{program}` is not installed"))
    } else {
        ExecError::io(format!("running {program}"), e)
    }
}

/// Runs a helper tool, returning its stdout.
fn tool(program: &str, args: &[&str]) -> Result<String, ExecError> {
    log::debug!("{program} {}", args.join(" "));
    let out = Process::new(program)
        .args(args)
        .stdin(Stdio::null())
        .output()
        .map_err(|e| spawn_error(program, e))?;
    if !out.status.success() {
        return Err(ExecError::Tool {
            program: format!("{program} {}", args.join(" ")),
            status: out.status.to_string(),
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        });
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn exit_code(status: ExitStatus) -> i32 {
    status
        .code()
        .or_else(|| status.signal().map(|s| 128 + s))
        .unwrap_or(-1)
}

/// Spawns `cmd`, feeds `stdin`, and hands stdout and stderr lines to `output`.
fn stream(mut cmd: Process, stdin: Option<&str>, output: &mut dyn FnMut(&str)) -> io::Result<i32> {
    cmd.stdin(if stdin.is_some() {
        Stdio::piped()
    } else {
        Stdio::null()
    })
    .stdout(Stdio::piped())
    .stderr(Stdio::piped());
    let mut child = cmd.spawn()?;
    let (tx, rx) = mpsc::channel::<String>();
    let mut readers: Vec<Box<dyn Read + Send>> = Vec::new();
    if let Some(out) = child.stdout.take() {
        readers.push(Box::new(out));
    }
    if let Some(err) = child.stderr.take() {
        readers.push(Box::new(err));
    }
    let mut handles = Vec::new();
    for reader in readers {
        let tx = tx.clone();
        handles.push(thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            let mut buf = Vec::new();
            while matches!(reader.read_until(b'\n', &mut buf), Ok(n) if n > 0) {
                let line = String::from_utf8_lossy(&buf);
                let _ = tx.send(line.trim_end_matches(['\n', '\r']).to_string());
                buf.clear();
            }
        }));
    }
    drop(tx);
    if let (Some(body), Some(mut pipe)) = (stdin, child.stdin.take()) {
        let body = body.to_string();
        handles.push(thread::spawn(move || {
            let _ = pipe.write_all(body.as_bytes());
        }));
    }
    for line in rx {
        output(&line);
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(exit_code(child.wait()?))
}

fn guest_shell(root: &Path) -> Result<&'static str, ExecError> {
    for shell in ["/bin/sh", "/bin/bash"] {
        let p = root.join(shell.trim_start_matches('/'));
        // dangling symlinks (absolute links into the guest) still count
        if p.exists() || p.is_symlink() {
            return Ok(shell);
        }
    }
    Err(ExecError::ShellUnavailable(format!(
        "neither /bin/sh nor /bin/bash exists under {}",
        root.display()
    )))
}

fn copy_tree(src: &Path, dst: &Path, mode: Option<u32>) -> Result<(), ExecError> {
    let meta = fs::symlink_metadata(src)
        .map_err(|e| ExecError::io(format!("reading {}", src.display()), e))?;
    let ctx = |p: &Path| format!("writing {}", p.display());
    if meta.file_type().is_symlink() {
        let link = fs::read_link(src)
            .map_err(|e| ExecError::io(format!("reading {}", src.display()), e))?;
        let _ = fs::remove_file(dst);
        symlink(link, dst).map_err(|e| ExecError::io(ctx(dst), e))?;
        return Ok(());
    }
    if meta.is_dir() {
        fs::create_dir_all(dst).map_err(|e| ExecError::io(ctx(dst), e))?;
        let entries = fs::read_dir(src)
            .map_err(|e| ExecError::io(format!("reading {}", src.display()), e))?;
        for entry in entries {
            let entry =
                entry.map_err(|e| ExecError::io(format!("reading {}", src.display()), e))?;
            copy_tree(&entry.path(), &dst.join(entry.file_name()), mode)?;
        }
    } else {
        fs::copy(src, dst).map_err(|e| ExecError::io(ctx(dst), e))?;
    }
    let perms = fs::Permissions::from_mode(mode.unwrap_or(meta.permissions().mode() & 0o7777));
    fs::set_permissions(dst, perms).map_err(|e| ExecError::io(ctx(dst), e))?;
    Ok(())
}

pub(crate) fn copy_in(
    root: &Path,
    src: &Path,
    dst: &str,
    mode: Option<u32>,
) -> Result<(), ExecError> {
    if !src.exists() {
        return Err(ExecError::SourceMissing(src.to_path_buf()));
    }
    let mut target = root.join(dst.trim_start_matches('/'));
    if target.is_dir() && !src.is_dir() {
        if let Some(name) = src.file_name() {
            target = target.join(name);
        }
    }
    if let Some(parent) = target.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| ExecError::io(format!("creating {}", parent.display()), e))?;
    }
    copy_tree(src, &target, mode)
}

fn sha256_file(path: &Path) -> io::Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    io::copy(&mut file, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

impl Executor for SystemExecutor {
    fn run(&mut self, action: &ActionKind, output: &mut dyn FnMut(&str)) -> Result<i32, ExecError> {
        self.log.record(action.clone());
        match action {
            ActionKind::Fetch { cached, .. } => {
                if !cached.is_file() {
                    return Err(ExecError::io(
                        format!("cached image {}", cached.display()),
                        io::Error::from(io::ErrorKind::NotFound),
                    ));
                }
            }
            ActionKind::CopyImage { src, dst } => {
                fs::copy(src, dst).map_err(|e| {
                    ExecError::io(format!("copying {} to {}", src.display(), dst.display()), e)
                })?;
            }
            ActionKind::DeviceWrite { src, device } => {
                self.require_root("writing a block device")?;
                tool(
                    "dd",
                    &[
                        &format!("if={}", src.display()),
                        &format!("of={}", device.display()),
                        "bs=4M",
                        "conv=fsync",
                        "status=none",
                    ],
                )?;
            }
            ActionKind::GrowFile { image, bytes } => {
                grow_image_file(image, ByteSize(*bytes))?;
            }
            ActionKind::WriteTable { image, table } => {
                let mut file = OpenOptions::new()
                    .read(true)
                    .write(true)
                    .open(image)
                    .map_err(|e| ExecError::io(format!("opening {}", image.display()), e))?;
                write_partition_table(&mut file, table)?;
                file.sync_all()
                    .map_err(|e| ExecError::io(format!("syncing {}", image.display()), e))?;
            }
            ActionKind::FsResize { image, partition } => self.fs_resize(image, *partition)?,
            ActionKind::Mount(m) => self.mount_action(m)?,
            ActionKind::HostExec { cwd, cmd, stdin } => {
                let mut p = Process::new("/bin/sh");
                p.arg("-c").arg(cmd).current_dir(cwd);
                return stream(p, stdin.as_deref(), output).map_err(|e| {
                    if e.kind() == io::ErrorKind::NotFound {
                        ExecError::ShellUnavailable("/bin/sh is missing on the host".into())
                    } else {
                        ExecError::io(format!("running `{cmd}`"), e)
                    }
                });
            }
            ActionKind::GuestExec {
                root,
                path,
                env,
                cmd,
                stdin,
            } => {
                self.require_root("chroot")?;
                let shell = guest_shell(root)?;
                let mut p = Process::new("chroot");
                p.arg(root)
                    .arg(shell)
                    .arg("-c")
                    .arg(cmd)
                    .env_clear()
                    .env("PATH", path.join(":"))
                    .envs(env.iter().map(|(k, v)| (k, v)));
                return stream(p, stdin.as_deref(), output).map_err(|e| spawn_error("chroot", e));
            }
            ActionKind::CopyIn {
                root,
                src,
                dst,
                mode,
            } => copy_in(root, src, dst, *mode)?,
            ActionKind::Failed { message, .. } => log::debug!("build failed: {message}"),
        }
        Ok(0)
    }

    fn image_view(&mut self, image: &Path) -> Result<ImageView, ExecError> {
        read_view(image)
    }

    fn read_guest_file(
        &mut self,
        root: &Path,
        guest_path: &str,
    ) -> Result<Option<String>, ExecError> {
        let p: PathBuf = root.join(guest_path.trim_start_matches('/'));
        match fs::read(&p) {
            Ok(bytes) => Ok(Some(String::from_utf8_lossy(&bytes).into_owned())),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ExecError::io(format!("reading {}", p.display()), e)),
        }
    }

    fn image_digest(&mut self, image: &Path) -> Result<Option<String>, ExecError> {
        if !image.is_file() {
            return Ok(None);
        }
        sha256_file(image)
            .map(Some)
            .map_err(|e| ExecError::io(format!("hashing {}", image.display()), e))
    }

    fn actions(&self) -> &[Action] {
        self.log.actions()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn host_exec_streams_and_reports_status() {
        let dir = tempfile::tempdir().unwrap();
        let mut exec = SystemExecutor::new();
        let mut lines = Vec::new();
        let status = exec
            .run(
                &ActionKind::HostExec {
                    cwd: dir.path().into(),
                    cmd: "cat; echo err >&2; pwd; exit 3".into(),
                    stdin: Some("hello\n".into()),
                },
                &mut |l| lines.push(l.to_string()),
            )
            .unwrap();
        assert_eq!(status, 3);
        lines.sort();
        let cwd = fs::canonicalize(dir.path()).unwrap();
        let mut want = vec!["hello".to_string(), "err".into(), cwd.display().to_string()];
        want.sort();
        assert_eq!(lines, want);
        assert_eq!(exec.actions().len(), 1);
    }

    #[test]
    fn copy_in_files_and_dirs() {
        let host = tempfile::tempdir().unwrap();
        let root = tempfile::tempdir().unwrap();
        fs::write(host.path().join("key.pub"), "ssh-ed25519 AAAA").unwrap();
        fs::create_dir_all(host.path().join("tree/sub")).unwrap();
        fs::write(host.path().join("tree/sub/f"), "x").unwrap();

        copy_in(
            root.path(),
            &host.path().join("key.pub"),
            "/root/.ssh/authorized_keys",
            Some(0o600),
        )
        .unwrap();
        let dst = root.path().join("root/.ssh/authorized_keys");
        assert_eq!(fs::read_to_string(&dst).unwrap(), "ssh-ed25519 AAAA");
        assert_eq!(
            fs::metadata(&dst).unwrap().permissions().mode() & 0o7777,
            0o600
        );

        copy_in(root.path(), &host.path().join("tree"), "/opt/tree", None).unwrap();
        assert_eq!(
            fs::read_to_string(root.path().join("opt/tree/sub/f")).unwrap(),
            "x"
        );

        // into an existing directory keeps the file name
        copy_in(root.path(), &host.path().join("key.pub"), "/opt", None).unwrap();
        assert!(root.path().join("opt/key.pub").is_file());

        let err = copy_in(root.path(), &host.path().join("nope"), "/x", None).unwrap_err();
        assert!(matches!(err, ExecError::SourceMissing(_)));
    }

    #[test]
    fn digest_matches_independent_sha256() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img");
        fs::write(&p, b"abc").unwrap();
        let got = SystemExecutor::new().image_digest(&p).unwrap().unwrap();
        // FIPS 180-2 test vector for "abc"
        assert_eq!(
            got,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn missing_guest_shell() {
        let root = tempfile::tempdir().unwrap();
        assert!(matches!(
            guest_shell(root.path()),
            Err(ExecError::ShellUnavailable(_))
        ));
        fs::create_dir_all(root.path().join("bin")).unwrap();
        fs::write(root.path().join("bin/bash"), "").unwrap();
        assert_eq!(guest_shell(root.path()).unwrap(), "/bin/bash");
    }
}
