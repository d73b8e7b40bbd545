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

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::os::unix::fs::FileTypeExt;
use std::path::Path;
use std::process::{Command, Output};

use common::*;
use imgforge::cli::render_log;
use imgforge::executor::Event;
use imgforge::parser::SourceLine;
use imgforge::plan::Stage;

fn imgforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imgforge"))
        .current_dir(dir)
        .args(args)
        .env_remove("PIMOD_CACHE")
        .output()
        .unwrap()
}

fn listing(dir: &Path) -> BTreeSet<String> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect()
}

#[test]
fn missing_pifile_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = imgforge(dir.path(), &["missing.Pifile"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.Pifile"));
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(imgforge(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(
        imgforge(dir.path(), &["--env", "novalue", "x"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(imgforge(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn parse_error_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.Pifile"), "FROM base.img\n\nCOPY a b\n").unwrap();
    let out = imgforge(dir.path(), &["bad.Pifile"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.Pifile:3"));
}

#[test]
fn dry_run_writes_only_the_log() {
    let dir = tempfile::tempdir().unwrap();
    write_image(
        &dir.path().join("base.img"),
        &two_partition_sector(),
        FIXTURE_LEN,
    );
    fs::write(
        dir.path().join("example.Pifile"),
        "FROM base.img\nTO out.img\nPUMP 16M\nRUN echo hi\nHOST touch side-effect\n",
    )
    .unwrap();
    let before = listing(dir.path());
    let out = imgforge(
        dir.path(),
        &[
            "--dry-run",
            "plan.log",
            "--emulator",
            "/usr/bin/qemu-arm-static",
            "example.Pifile",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut expected = before.clone();
    expected.insert("plan.log".into());
    assert_eq!(listing(dir.path()), expected);
    let log = fs::read_to_string(dir.path().join("plan.log")).unwrap();
    assert!(log.starts_with("1\tCOPY_IMAGE\t"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("[prepare] begin"), "{stdout}");
    assert!(
        stdout.contains("[chroot] example.Pifile:4 RUN echo hi"),
        "{stdout}"
    );
}

#[test]
fn copy_only_build_produces_image() {
    let dir = tempfile::tempdir().unwrap();
    write_image(
        &dir.path().join("base.img"),
        &two_partition_sector(),
        2 * MIB,
    );
    fs::write(
        dir.path().join("example.Pifile"),
        "FROM base.img\nTO out.img\n",
    )
    .unwrap();
    let out = imgforge(dir.path(), &["example.Pifile"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let copied = fs::read(dir.path().join("out.img")).unwrap();
    assert_eq!(copied, fs::read(dir.path().join("base.img")).unwrap());
    // digest line uses an independent hash of the output
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains(&sha256_hex(&copied)), "{stdout}");
}

#[test]
fn missing_host_tools_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    write_image(
        &dir.path().join("base.img"),
        &two_partition_sector(),
        FIXTURE_LEN,
    );
    fs::write(
        dir.path().join("example.Pifile"),
        "FROM base.img\nTO out.img\nRUN true\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_imgforge"))
        .current_dir(dir.path())
        .arg("example.Pifile")
        .env("PATH", dir.path().join("no-such-bin"))
        .output()
        .unwrap();
    // loop setup cannot find losetup on this PATH (or root is missing)
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn block_device_needs_confirmation() {
    let Some(dev) = ["/dev/loop0", "/dev/ram0", "/dev/sda"]
        .into_iter()
        .find(|d| {
            fs::metadata(d)
                .map(|m| m.file_type().is_block_device())
                .unwrap_or(false)
        })
    else {
        eprintln!("no block device node available, skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    write_image(
        &dir.path().join("base.img"),
        &two_partition_sector(),
        2 * MIB,
    );
    fs::write(
        dir.path().join("d.Pifile"),
        format!("FROM base.img\nTO {dev}\n"),
    )
    .unwrap();
    let out = imgforge(dir.path(), &["d.Pifile"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--inplace-device"));
}

#[test]
fn log_line_templates() {
    let origin = SourceLine {
        file: "/w/example.Pifile".into(),
        line_no: 8,
        text: "RUN raspi-config nonint do_serial 0".into(),
    };
    let cmd = Event::Command {
        stage: Stage::Chroot,
        origin: origin.clone(),
        text: "RUN raspi-config nonint do_serial 0".into(),
    };
    assert_eq!(
        render_log(&cmd),
        "[chroot] example.Pifile:8 RUN raspi-config nonint do_serial 0"
    );
    assert_eq!(
        render_log(&Event::StageBegin(Stage::Prepare)),
        "[prepare] begin"
    );
    let out = Event::Output {
        stage: Stage::Chroot,
        line: "Reading package lists...".into(),
    };
    assert_eq!(render_log(&out), "    Reading package lists...");
    let fail = render_log(&Event::Failure {
        stage: Stage::Chroot,
        origin: Some(origin),
        message: "command exited with status 100".into(),
    });
    assert_eq!(
        fail,
        "[chroot] example.Pifile:8 failed: command exited with status 100"
    );
}
