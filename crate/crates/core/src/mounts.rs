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

//! Mount planning for the chroot stage.
//!
//! Setup order: attach the image to a loop device, mount the root partition,
//! bind `/dev`, `/sys`, `/proc`, `/dev/pts` and the host `resolv.conf`, copy
//! the static emulators into the guest, then mount the extra partitions the
//! guest's own `/etc/fstab` lists. Teardown is the exact reverse.

use std::fmt;
use std::path::{Component, Path, PathBuf};

use thiserror::Error;

use crate::image::PartitionTable;
use crate::plan::ExecutionPlan;

const PSEUDO_FILESYSTEMS: [&str; 9] = [
    "proc",
    "sysfs",
    "tmpfs",
    "devpts",
    "swap",
    "devtmpfs",
    "none",
    "cgroup",
    "securityfs",
];

/// Host directories bound into the guest, in order.
pub const BIND_DIRS: [&str; 4] = ["/dev", "/sys", "/proc", "/dev/pts"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MountKind {
    LoopAttach,
    MountPartition,
    BindMount,
    CopyEmulator,
    RemoveEmulator,
    Unmount,
    LoopDetach,
}

impl MountKind {
    pub fn is_setup(self) -> bool {
        matches!(
            self,
            MountKind::LoopAttach
                | MountKind::MountPartition
                | MountKind::BindMount
                | MountKind::CopyEmulator
        )
    }

    /// The kind that undoes this one.
    pub fn undo(self) -> MountKind {
        match self {
            MountKind::LoopAttach => MountKind::LoopDetach,
            MountKind::MountPartition | MountKind::BindMount => MountKind::Unmount,
            MountKind::CopyEmulator => MountKind::RemoveEmulator,
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MountAction {
    pub kind: MountKind,
    /// Image path for loop actions, `pN` for partitions, host path otherwise.
    pub source: String,
    /// Path on the host; empty for loop actions.
    pub target: String,
    pub ordinal: usize,
    /// Create the target directory first (`mkdir -p`).
    pub create: bool,
}

/// The action undoing `action`, with the same source and target.
pub fn teardown_of(action: &MountAction, ordinal: usize) -> MountAction {
    MountAction {
        kind: action.kind.undo(),
        source: action.source.clone(),
        target: action.target.clone(),
        ordinal,
        create: false,
    }
}

/// Reverse order, kinds swapped.
pub fn teardown(setup: &[MountAction]) -> Vec<MountAction> {
    setup
        .iter()
        .rev()
        .enumerate()
        .map(|(i, a)| teardown_of(a, i))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FstabEntry {
    pub device_spec: String,
    pub mount_point: String,
    pub fs_type: String,
    pub options: String,
    pub dump: u32,
    pub pass: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MountWarning {
    MalformedFstabLine {
        line_no: usize,
        text: String,
    },
    FstabRootMismatch {
        fstab_partition: u8,
        root_partition: u32,
    },
    Unmappable {
        device_spec: String,
        mount_point: String,
    },
    UnsafeMountPoint {
        mount_point: String,
    },
    AlreadyMounted {
        mount_point: String,
    },
}

impl fmt::Display for MountWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MountWarning::MalformedFstabLine { line_no, text } => {
                write!(f, "fstab line {line_no} skipped, expected 6 fields: {text}")
            }
            MountWarning::FstabRootMismatch {
                fstab_partition,
                root_partition,
            } => write!(
                f,
                "guest fstab mounts partition {fstab_partition} as /, but partition {root_partition} is used as root"
            ),
            MountWarning::Unmappable {
                device_spec,
                mount_point,
            } => write!(
                f,
                "cannot map fstab device {device_spec} for {mount_point} to a partition, skipped"
            ),
            MountWarning::UnsafeMountPoint { mount_point } => {
                write!(f, "fstab mount point {mount_point} leaves the guest root, skipped")
            }
            MountWarning::AlreadyMounted { mount_point } => {
                write!(f, "fstab entry for {mount_point} is already mounted, skipped")
            }
        }
    }
}

/// Parses fstab text. Never fails: bad lines become warnings.
pub fn parse_fstab(text: &str) -> (Vec<FstabEntry>, Vec<MountWarning>) {
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let parsed = match fields.as_slice() {
            [dev, mp, ty, opts, dump, pass] => {
                dump.parse()
                    .ok()
                    .zip(pass.parse().ok())
                    .map(|(dump, pass)| FstabEntry {
                        device_spec: dev.to_string(),
                        mount_point: mp.to_string(),
                        fs_type: ty.to_string(),
                        options: opts.to_string(),
                        dump,
                        pass,
                    })
            }
            _ => None,
        };
        match parsed {
            Some(e) => entries.push(e),
            None => warnings.push(MountWarning::MalformedFstabLine {
                line_no: i + 1,
                text: line.to_string(),
            }),
        }
    }
    (entries, warnings)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeviceMapping {
    Partition(u8),
    Pseudo,
    Unmappable,
}

/// Maps an fstab device field onto a partition slot of `table`.
pub fn classify_fstab_device(spec: &str, table: &PartitionTable) -> DeviceMapping {
    if PSEUDO_FILESYSTEMS.contains(&spec) {
        return DeviceMapping::Pseudo;
    }
    let slot = if let Some(partuuid) = spec.strip_prefix("PARTUUID=") {
        partuuid.split_once('-').and_then(|(id, nn)| {
            (id.to_ascii_lowercase() == table.disk_id_hex() && nn.len() == 2)
                .then(|| nn.parse::<u8>().ok())
                .flatten()
        })
    } else if let Some(rest) = spec.strip_prefix("/dev/mmcblk") {
        rest.split_once('p')
            .filter(|(disk, _)| !disk.is_empty() && disk.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|(_, n)| n.parse::<u8>().ok())
    } else if let Some(rest) = spec.strip_prefix("/dev/sd") {
        let mut chars = rest.chars();
        match chars.next() {
            Some(c) if c.is_ascii_lowercase() => chars.as_str().parse::<u8>().ok(),
            _ => None,
        }
    } else {
        None
    };
    match slot {
        Some(n) if table.entry(n).is_some_and(|e| !e.is_empty()) => DeviceMapping::Partition(n),
        _ => DeviceMapping::Unmappable,
    }
}

pub fn map_fstab_device(spec: &str, table: &PartitionTable) -> Option<u8> {
    match classify_fstab_device(spec, table) {
        DeviceMapping::Partition(n) => Some(n),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MountOptions {
    /// Host directory the guest root is mounted on.
    pub root: PathBuf,
    /// Static emulator binaries copied to `<root>/usr/bin/`.
    pub emulators: Vec<PathBuf>,
    pub resolv_conf: PathBuf,
}

impl MountOptions {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        MountOptions {
            root: root.into(),
            emulators: Vec::new(),
            resolv_conf: PathBuf::from("/etc/resolv.conf"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MountPlan {
    pub setup: Vec<MountAction>,
    pub warnings: Vec<MountWarning>,
}

impl MountPlan {
    pub fn teardown(&self) -> Vec<MountAction> {
        teardown(&self.setup)
    }
}

#[derive(Debug, Error)]
pub enum MountError {
    #[error("root partition {index} cannot be mounted: {reason}")]
    RootPartitionUnmountable { index: u32, reason: String },
}

pub fn build_mount_plan(
    plan: &ExecutionPlan,
    table: &PartitionTable,
    guest_fstab: Option<&str>,
    opts: &MountOptions,
) -> Result<MountPlan, MountError> {
    let root_index = plan.partition_index;
    let unmountable = |reason: &str| MountError::RootPartitionUnmountable {
        index: root_index,
        reason: reason.to_string(),
    };
    let slot = u8::try_from(root_index)
        .ok()
        .and_then(|i| table.entry(i))
        .ok_or_else(|| unmountable("no such partition slot"))?;
    if slot.is_empty() {
        return Err(unmountable("the partition slot is empty"));
    }

    let root = opts.root.as_path();
    let mut setup = Vec::new();
    let mut push = |kind, source: String, target: String, create| {
        let ordinal = setup.len();
        setup.push(MountAction {
            kind,
            source,
            target,
            ordinal,
            create,
        });
    };
    let image = plan.destination.path.to_string_lossy().into_owned();
    push(MountKind::LoopAttach, image, String::new(), false);
    push(
        MountKind::MountPartition,
        format!("p{root_index}"),
        path_string(root),
        false,
    );
    for dir in BIND_DIRS {
        push(
            MountKind::BindMount,
            dir.to_string(),
            guest_path(root, dir),
            false,
        );
    }
    push(
        MountKind::BindMount,
        path_string(&opts.resolv_conf),
        guest_path(root, "/etc/resolv.conf"),
        false,
    );
    for emulator in &opts.emulators {
        let name = emulator
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        push(
            MountKind::CopyEmulator,
            path_string(emulator),
            guest_path(root, &format!("/usr/bin/{name}")),
            false,
        );
    }

    let mut warnings = Vec::new();
    let mut extra = Vec::new();
    if let Some(text) = guest_fstab {
        let (entries, w) = parse_fstab(text);
        warnings.extend(w);
        let mut mounted_points: Vec<String> = BIND_DIRS.iter().map(|d| d.to_string()).collect();
        let mut mounted_parts = vec![root_index];
        for entry in entries {
            if PSEUDO_FILESYSTEMS.contains(&entry.fs_type.as_str())
                || PSEUDO_FILESYSTEMS.contains(&entry.mount_point.as_str())
            {
                continue;
            }
            let part = match classify_fstab_device(&entry.device_spec, table) {
                DeviceMapping::Pseudo => continue,
                DeviceMapping::Unmappable => {
                    warnings.push(MountWarning::Unmappable {
                        device_spec: entry.device_spec.clone(),
                        mount_point: entry.mount_point.clone(),
                    });
                    continue;
                }
                DeviceMapping::Partition(n) => n,
            };
            let Some(mount_point) = normalize_mount_point(&entry.mount_point) else {
                warnings.push(MountWarning::UnsafeMountPoint {
                    mount_point: entry.mount_point.clone(),
                });
                continue;
            };
            if mount_point == "/" {
                if u32::from(part) != root_index {
                    warnings.push(MountWarning::FstabRootMismatch {
                        fstab_partition: part,
                        root_partition: root_index,
                    });
                }
                continue;
            }
            if mounted_points.contains(&mount_point) || mounted_parts.contains(&u32::from(part)) {
                warnings.push(MountWarning::AlreadyMounted {
                    mount_point: entry.mount_point.clone(),
                });
                continue;
            }
            mounted_points.push(mount_point.clone());
            mounted_parts.push(u32::from(part));
            extra.push((part, mount_point));
        }
    }
    // parents before children; stable, so equal depths keep fstab order
    extra.sort_by_key(|(_, mp)| Path::new(mp).components().count());
    for (part, mount_point) in extra {
        push(
            MountKind::MountPartition,
            format!("p{part}"),
            guest_path(root, &mount_point),
            true,
        );
    }
    Ok(MountPlan { setup, warnings })
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// `<root>` joined with an absolute guest path.
pub fn guest_path(root: &Path, guest: &str) -> String {
    path_string(&root.join(guest.trim_start_matches('/')))
}

/// Absolute, `..`-free form of a mount point, or `None` if it would escape.
fn normalize_mount_point(mp: &str) -> Option<String> {
    if !mp.starts_with('/') {
        return None;
    }
    let mut parts = Vec::new();
    for c in Path::new(mp).components() {
        match c {
            Component::RootDir | Component::CurDir => {}
            Component::Normal(p) => parts.push(p.to_string_lossy().into_owned()),
            Component::ParentDir | Component::Prefix(_) => return None,
        }
    }
    Some(format!("/{}", parts.join("/")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_str;
    use crate::plan::{build_plan, PlanDefaults};
    use crate::source::{MapProbe, PathKind};
    use std::collections::HashMap;

    fn table() -> PartitionTable {
        let mut s = vec![0u8; 512];
        s[440..444].copy_from_slice(&0xdeadbeefu32.to_le_bytes());
        for (slot, ty, start, size) in [
            (1usize, 0x0cu8, 8192u32, 16384u32),
            (2, 0x83, 24576, 106496),
        ] {
            let off = 446 + (slot - 1) * 16;
            s[off + 4] = ty;
            s[off + 8..off + 12].copy_from_slice(&start.to_le_bytes());
            s[off + 12..off + 16].copy_from_slice(&size.to_le_bytes());
        }
        s[510] = 0x55;
        s[511] = 0xaa;
        PartitionTable::decode(&s).unwrap()
    }

    fn plan(text: &str) -> ExecutionPlan {
        let probe = MapProbe::new().with("/work/base.img", PathKind::File);
        let p = parse_str(text, Path::new("/work/example.Pifile"), &HashMap::new()).unwrap();
        build_plan(&p, &PlanDefaults::new(&probe)).unwrap()
    }

    #[test]
    fn fstab_fields() {
        let (e, w) = parse_fstab("proc /proc proc defaults 0 0\n");
        assert!(w.is_empty());
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].fs_type, "proc");

        assert_eq!(parse_fstab("# comment\n\n   \n").0.len(), 0);

        let line = "PARTUUID=deadbeef-02 / ext4 defaults 0 1";
        let (e, _) = parse_fstab(line);
        // oracle: whitespace split per the 6-field format
        let f: Vec<&str> = line.split(' ').collect();
        assert_eq!(e[0].device_spec, f[0]);
        assert_eq!(e[0].mount_point, f[1]);
        assert_eq!(e[0].pass.to_string(), f[5]);
        assert_eq!(e[0].pass, 1);
    }

    #[test]
    fn malformed_fstab_lines_warn() {
        let (e, w) = parse_fstab(
            "a b c\n/dev/sda1 /x ext4 defaults zero 0\n/dev/sda2\t/y\text4\tdefaults\t0\t2\n",
        );
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].mount_point, "/y");
        assert_eq!(w.len(), 2);
        assert!(matches!(
            w[1],
            MountWarning::MalformedFstabLine { line_no: 2, .. }
        ));
    }

    #[test]
    fn device_mapping() {
        let t = table();
        // oracle: the disk id at byte 440 as lowercase hex
        assert_eq!(
            format!("{:08x}", u32::from_le_bytes([0xef, 0xbe, 0xad, 0xde])),
            "deadbeef"
        );
        assert_eq!(map_fstab_device("PARTUUID=deadbeef-01", &t), Some(1));
        assert_eq!(map_fstab_device("PARTUUID=DEADBEEF-02", &t), Some(2));
        assert_eq!(map_fstab_device("PARTUUID=cafebabe-01", &t), None);
        assert_eq!(map_fstab_device("PARTUUID=deadbeef-03", &t), None);
        assert_eq!(map_fstab_device("proc", &t), None);
        assert_eq!(classify_fstab_device("proc", &t), DeviceMapping::Pseudo);
        assert_eq!(map_fstab_device("/dev/mmcblk0p1", &t), Some(1));
        assert_eq!(map_fstab_device("/dev/sda2", &t), Some(2));
        assert_eq!(map_fstab_device("/dev/sda", &t), None);
        assert_eq!(
            classify_fstab_device("UUID=1234-abcd", &t),
            DeviceMapping::Unmappable
        );
        assert_eq!(
            classify_fstab_device("LABEL=boot", &t),
            DeviceMapping::Unmappable
        );
    }

    #[test]
    fn plan_without_fstab() {
        let p = plan("FROM base.img\nRUN x\n");
        let mut opts = MountOptions::new("/mnt/root");
        opts.emulators.push("/usr/bin/qemu-arm-static".into());
        let mp = build_mount_plan(&p, &table(), None, &opts).unwrap();
        let kinds: Vec<_> = mp.setup.iter().map(|a| a.kind).collect();
        use MountKind::*;
        assert_eq!(
            kinds,
            [
                LoopAttach,
                MountPartition,
                BindMount,
                BindMount,
                BindMount,
                BindMount,
                BindMount,
                CopyEmulator
            ]
        );
        assert_eq!(mp.setup[1].source, "p2");
        assert_eq!(mp.setup[5].target, "/mnt/root/dev/pts");
        assert_eq!(mp.setup[6].source, "/etc/resolv.conf");
        assert_eq!(mp.setup[6].target, "/mnt/root/etc/resolv.conf");
        assert_eq!(mp.setup[7].target, "/mnt/root/usr/bin/qemu-arm-static");
    }

    #[test]
    fn boot_mounted_after_emulators() {
        let p = plan("FROM base.img\nRUN x\n");
        let mut opts = MountOptions::new("/mnt/root");
        opts.emulators.push("/usr/bin/qemu-arm-static".into());
        let fstab = "proc /proc proc defaults 0 0\nPARTUUID=deadbeef-01 /boot vfat defaults 0 2\nPARTUUID=deadbeef-02 / ext4 defaults,noatime 0 1\n";
        let mp = build_mount_plan(&p, &table(), Some(fstab), &opts).unwrap();
        let last = mp.setup.last().unwrap();
        assert_eq!(last.kind, MountKind::MountPartition);
        assert_eq!(last.source, "p1");
        assert_eq!(last.target, "/mnt/root/boot");
        assert!(last.create);
        assert_eq!(mp.setup[mp.setup.len() - 2].kind, MountKind::CopyEmulator);
        assert!(mp.warnings.is_empty(), "{:?}", mp.warnings);
    }

    #[test]
    fn root_mismatch_is_a_warning() {
        let p = plan("FROM base.img 1\nRUN x\n");
        let fstab = "/dev/mmcblk0p2 / ext4 defaults 0 1\n";
        let mp = build_mount_plan(&p, &table(), Some(fstab), &MountOptions::new("/r")).unwrap();
        assert_eq!(
            mp.warnings,
            [MountWarning::FstabRootMismatch {
                fstab_partition: 2,
                root_partition: 1
            }]
        );
    }

    #[test]
    fn nested_mounts_parent_first() {
        let mut s = vec![0u8; 512];
        for (slot, start) in [(1usize, 100u32), (2, 200), (3, 300), (4, 400)] {
            let off = 446 + (slot - 1) * 16;
            s[off + 4] = 0x83;
            s[off + 8..off + 12].copy_from_slice(&start.to_le_bytes());
            s[off + 12..off + 16].copy_from_slice(&50u32.to_le_bytes());
        }
        s[510] = 0x55;
        s[511] = 0xaa;
        let t = PartitionTable::decode(&s).unwrap();
        let p = plan("FROM base.img 1\nRUN x\n");
        let fstab = "/dev/sda4 /srv/data/deep ext4 defaults 0 2\n/dev/sda3 /srv ext4 defaults 0 2\n/dev/sda2 /srv/./data/ ext4 defaults 0 2\n/dev/sda2 /../etc ext4 defaults 0 0\n";
        let mp = build_mount_plan(&p, &t, Some(fstab), &MountOptions::new("/r")).unwrap();
        let targets: Vec<_> = mp.setup[7..].iter().map(|a| a.target.as_str()).collect();
        assert_eq!(targets, ["/r/srv", "/r/srv/data", "/r/srv/data/deep"]);
        assert!(matches!(
            mp.warnings[0],
            MountWarning::UnsafeMountPoint { .. }
        ));
    }

    #[test]
    fn empty_root_slot() {
        let p = plan("FROM base.img 3\nRUN x\n");
        assert!(matches!(
            build_mount_plan(&p, &table(), None, &MountOptions::new("/r")),
            Err(MountError::RootPartitionUnmountable { index: 3, .. })
        ));
        let p = plan("FROM base.img 9\nRUN x\n");
        assert!(build_mount_plan(&p, &table(), None, &MountOptions::new("/r")).is_err());
    }

    #[test]
    fn teardown_reverses() {
        let p = plan("FROM base.img\nRUN x\n");
        let mut opts = MountOptions::new("/r");
        opts.emulators.push("/usr/bin/qemu-aarch64-static".into());
        let mp = build_mount_plan(
            &p,
            &table(),
            Some("/dev/sda1 /boot vfat defaults 0 2\n"),
            &opts,
        )
        .unwrap();
        let down = mp.teardown();
        assert_eq!(down.len(), mp.setup.len());
        assert_eq!(down[0].kind, MountKind::Unmount);
        assert_eq!(down[0].target, "/r/boot");
        assert_eq!(down[1].kind, MountKind::RemoveEmulator);
        assert_eq!(down.last().unwrap().kind, MountKind::LoopDetach);
    }
}
