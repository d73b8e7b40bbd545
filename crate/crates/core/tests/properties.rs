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

use proptest::prelude::*;

use imgforge::executor::{parse_log, render_log_lines, Action, ActionKind};
use imgforge::image::{PartitionEntry, PartitionTable};
use imgforge::mounts::{teardown, MountAction, MountKind};
use imgforge::plan::Stage;

fn text() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-zA-Z0-9/._-]{0,16}",
        any::<String>(),
        "[ \"\\\\\t\n\r=a-z]{0,12}",
    ]
}

fn setup_kind() -> impl Strategy<Value = MountKind> {
    prop::sample::select(vec![
        MountKind::LoopAttach,
        MountKind::MountPartition,
        MountKind::BindMount,
        MountKind::CopyEmulator,
    ])
}

fn mount_action() -> impl Strategy<Value = MountAction> {
    (
        setup_kind(),
        "[a-z0-9/]{1,10}",
        "[a-z0-9/]{1,10}",
        any::<bool>(),
    )
        .prop_map(|(kind, source, target, create)| MountAction {
            kind,
            source,
            target,
            ordinal: 0,
            create,
        })
}

fn entry(index: u8) -> impl Strategy<Value = PartitionEntry> {
    (any::<bool>(), 1u8..=255, 1u32..u32::MAX, 1u32..u32::MAX).prop_map(
        move |(bootable, type_code, lba_start, lba_size)| PartitionEntry {
            index,
            bootable,
            type_code,
            lba_start,
            lba_size,
        },
    )
}

fn action_kind() -> impl Strategy<Value = ActionKind> {
    let kinds = prop::sample::select(vec![
        MountKind::LoopAttach,
        MountKind::MountPartition,
        MountKind::BindMount,
        MountKind::CopyEmulator,
        MountKind::RemoveEmulator,
        MountKind::Unmount,
        MountKind::LoopDetach,
    ]);
    prop_oneof![
        (text(), text()).prop_map(|(url, c)| ActionKind::Fetch {
            url,
            cached: c.into()
        }),
        (text(), text()).prop_map(|(s, d)| ActionKind::CopyImage {
            src: s.into(),
            dst: d.into()
        }),
        (text(), text()).prop_map(|(s, d)| ActionKind::DeviceWrite {
            src: s.into(),
            device: d.into()
        }),
        (text(), any::<u64>()).prop_map(|(i, bytes)| ActionKind::GrowFile {
            image: i.into(),
            bytes
        }),
        (text(), any::<u32>(), entry(1), entry(2)).prop_map(|(i, disk_id, a, b)| {
            ActionKind::WriteTable {
                image: i.into(),
                table: PartitionTable {
                    disk_id,
                    entries: [a, b, PartitionEntry::empty(3), PartitionEntry::empty(4)],
                },
            }
        }),
        (text(), 1u8..=4).prop_map(|(i, partition)| ActionKind::FsResize {
            image: i.into(),
            partition
        }),
        (kinds, "[a-z0-9/]{0,10}", "[a-z0-9/ ]{0,10}", any::<bool>()).prop_map(
            |(kind, source, target, create)| ActionKind::Mount(MountAction {
                kind,
                source,
                target,
                ordinal: 0,
                create,
            })
        ),
        (text(), text(), proptest::option::of(text())).prop_map(|(c, cmd, stdin)| {
            ActionKind::HostExec {
                cwd: c.into(),
                cmd,
                stdin,
            }
        }),
        (
            text(),
            proptest::collection::vec("/[a-z]{1,6}", 0..4),
            proptest::collection::vec(("[A-Z_]{1,6}", text()), 0..3),
            text(),
            proptest::option::of(text()),
        )
            .prop_map(|(r, path, env, cmd, stdin)| ActionKind::GuestExec {
                root: r.into(),
                path,
                env,
                cmd,
                stdin,
            }),
        (text(), text(), text(), proptest::option::of(0u32..=0o7777)).prop_map(
            |(r, s, dst, mode)| ActionKind::CopyIn {
                root: r.into(),
                src: s.into(),
                dst,
                mode
            }
        ),
        (
            prop::sample::select(Stage::ALL.to_vec()),
            proptest::option::of(text()),
            proptest::option::of(any::<i32>()),
            text(),
        )
            .prop_map(|(stage, origin, status, message)| ActionKind::Failed {
                stage,
                origin,
                status,
                message,
            }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    /// Rendering a parsed line gives the line back, and the log stays one
    /// line per action.
    #[test]
    fn action_lines_round_trip(kinds in proptest::collection::vec(action_kind(), 1..8)) {
        let actions: Vec<Action> = kinds
            .into_iter()
            .enumerate()
            .map(|(i, kind)| Action { ordinal: i as u64 + 1, kind })
            .collect();
        let log = render_log_lines(&actions);
        prop_assert_eq!(log.lines().count(), actions.len());
        let parsed = parse_log(&log).unwrap();
        prop_assert_eq!(render_log_lines(&parsed), log);
        for (a, b) in actions.iter().zip(&parsed) {
            prop_assert_eq!(a.ordinal, b.ordinal);
            prop_assert_eq!(a.kind.name(), b.kind.name());
        }
    }

    #[test]
    fn teardown_is_exact_reverse(setup in proptest::collection::vec(mount_action(), 0..12)) {
        let down = teardown(&setup);
        prop_assert_eq!(down.len(), setup.len());
        for (d, s) in down.iter().zip(setup.iter().rev()) {
            prop_assert!(!d.kind.is_setup());
            prop_assert_eq!(d.kind, s.kind.undo());
            prop_assert_eq!(&d.source, &s.source);
            prop_assert_eq!(&d.target, &s.target);
        }
        let ordinals: Vec<_> = down.iter().map(|d| d.ordinal).collect();
        prop_assert_eq!(ordinals, (0..setup.len()).collect::<Vec<_>>());
    }
}
