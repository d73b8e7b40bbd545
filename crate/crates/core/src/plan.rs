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

//! Stage assignment and cross-command validation.
//!
//! A Pifile is executed once per stage, each pass looking only at the
//! commands assigned to it: setup (`FROM`, `TO`, `INPLACE`), prepare
//! (`PUMP`), then chroot (`RUN`, `HOST`, `INSTALL`, `PATH`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::executor::parse_mode;
use crate::image::{parse_size, ImageError};
use crate::parser::{Command, CommandKind, Pifile, SourceLine};
use crate::source::{classify_source, FsProbe, PathKind, SourceError, SourceKind, SourceSpec};

pub const DEFAULT_PARTITION: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Setup,
    Prepare,
    Chroot,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Setup, Stage::Prepare, Stage::Chroot];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Setup => "setup",
            Stage::Prepare => "prepare",
            Stage::Chroot => "chroot",
        }
    }

    pub fn of(kind: CommandKind) -> Option<Stage> {
        match kind {
            CommandKind::From | CommandKind::To | CommandKind::Inplace => Some(Stage::Setup),
            CommandKind::Pump => Some(Stage::Prepare),
            CommandKind::Run | CommandKind::Host | CommandKind::Install | CommandKind::Path => {
                Some(Stage::Chroot)
            }
            CommandKind::Include => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub type StagedCommands = BTreeMap<Stage, Vec<Command>>;

/// Splits commands by stage, keeping textual order inside each stage.
/// Every stage key is present, possibly with an empty list.
pub fn assign_stages(pifile: &Pifile) -> StagedCommands {
    let mut staged: StagedCommands = Stage::ALL.iter().map(|s| (*s, Vec::new())).collect();
    for cmd in &pifile.commands {
        // includes are flattened by the parser
        if let Some(stage) = Stage::of(cmd.kind) {
            staged.get_mut(&stage).unwrap().push(cmd.clone());
        }
    }
    staged
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSpec {
    pub path: PathBuf,
    /// Writing goes straight to a block device.
    pub is_device: bool,
}

pub struct PlanDefaults<'a> {
    pub probe: &'a dyn FsProbe,
    pub partition_index: u32,
}

impl<'a> PlanDefaults<'a> {
    pub fn new(probe: &'a dyn FsProbe) -> Self {
        PlanDefaults {
            probe,
            partition_index: DEFAULT_PARTITION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionPlan {
    pub pifile: PathBuf,
    pub source: SourceSpec,
    pub destination: TargetSpec,
    pub inplace: bool,
    pub pump_bytes: u64,
    /// 1-based partition that is grown and mounted as the guest root.
    pub partition_index: u32,
    pub path_extensions: Vec<String>,
    pub staged: StagedCommands,
}

impl ExecutionPlan {
    /// Directory holding the Pifile; relative host paths resolve against it.
    pub fn work_dir(&self) -> PathBuf {
        resolve_dir(&self.pifile)
    }

    pub fn commands(&self, stage: Stage) -> &[Command] {
        self.staged.get(&stage).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn host_path(&self, written: &str) -> PathBuf {
        self.work_dir().join(written)
    }
}

fn resolve_dir(pifile: &Path) -> PathBuf {
    match pifile.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("no FROM or INPLACE command, nothing to build from")]
    MissingSource,
    #[error("{origin}: {reason}")]
    ConflictingSource { origin: SourceLine, reason: String },
    #[error("{origin}: invalid partition index `{value}` (must be 1 or greater)")]
    InvalidPartitionIndex { origin: SourceLine, value: String },
    #[error("{origin}: {source}")]
    MalformedSize {
        origin: SourceLine,
        #[source]
        source: ImageError,
    },
    #[error("{origin}: total PUMP size overflows")]
    PumpOverflow { origin: SourceLine },
    #[error("{origin}: invalid mode `{mode}` (expected octal 0..7777)")]
    InvalidMode { origin: SourceLine, mode: String },
    #[error("{origin}: {source}")]
    Source {
        origin: SourceLine,
        #[source]
        source: SourceError,
    },
}

pub fn build_plan(
    pifile: &Pifile,
    defaults: &PlanDefaults<'_>,
) -> Result<ExecutionPlan, PlanError> {
    let staged = assign_stages(pifile);
    let work_dir = resolve_dir(&pifile.source_path);
    let setup = &staged[&Stage::Setup];
    let of_kind = |k| setup.iter().filter(move |c: &&Command| c.kind == k);

    let froms: Vec<_> = of_kind(CommandKind::From).collect();
    let inplaces: Vec<_> = of_kind(CommandKind::Inplace).collect();
    let tos: Vec<_> = of_kind(CommandKind::To).collect();

    let root = match (froms.as_slice(), inplaces.as_slice()) {
        ([], []) => return Err(PlanError::MissingSource),
        ([from], []) => *from,
        ([], [inplace]) => *inplace,
        ([_, second, ..], _) => {
            return Err(PlanError::ConflictingSource {
                origin: second.origin.clone(),
                reason: "more than one FROM".into(),
            })
        }
        (_, [_, second, ..]) => {
            return Err(PlanError::ConflictingSource {
                origin: second.origin.clone(),
                reason: "more than one INPLACE".into(),
            })
        }
        ([_], [inplace]) => {
            return Err(PlanError::ConflictingSource {
                origin: inplace.origin.clone(),
                reason: "FROM and INPLACE are mutually exclusive".into(),
            })
        }
    };
    let inplace = root.kind == CommandKind::Inplace;
    if inplace {
        if let Some(to) = tos.first() {
            return Err(PlanError::ConflictingSource {
                origin: to.origin.clone(),
                reason: "TO cannot be combined with INPLACE".into(),
            });
        }
    }

    let partition_index = match root.args.get(1) {
        None => defaults.partition_index,
        Some(text) => match text.parse::<u32>() {
            Ok(n) if n >= 1 => n,
            _ => {
                return Err(PlanError::InvalidPartitionIndex {
                    origin: root.origin.clone(),
                    value: text.clone(),
                })
            }
        },
    };

    let locator = resolve_locator(&work_dir, &root.args[0]);
    let kind = classify_source(&locator, defaults.probe).map_err(|source| PlanError::Source {
        origin: root.origin.clone(),
        source,
    })?;
    if inplace && kind == SourceKind::Url {
        return Err(PlanError::ConflictingSource {
            origin: root.origin.clone(),
            reason: "INPLACE needs a local image or block device, not a URL".into(),
        });
    }
    let source = SourceSpec {
        kind,
        locator,
        partition_index,
    };

    let destination = if inplace {
        TargetSpec {
            path: PathBuf::from(&source.locator),
            is_device: kind == SourceKind::BlockDevice,
        }
    } else if let Some(to) = tos.last() {
        let path = work_dir.join(&to.args[0]);
        TargetSpec {
            is_device: defaults.probe.kind(&path) == PathKind::BlockDevice,
            path,
        }
    } else {
        let stem = pifile
            .source_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        TargetSpec {
            path: work_dir.join(format!("{stem}.img")),
            is_device: false,
        }
    };

    let mut pump_bytes: u64 = 0;
    for cmd in &staged[&Stage::Prepare] {
        let size = parse_size(&cmd.args[0]).map_err(|source| PlanError::MalformedSize {
            origin: cmd.origin.clone(),
            source,
        })?;
        pump_bytes =
            pump_bytes
                .checked_add(size.bytes())
                .ok_or_else(|| PlanError::PumpOverflow {
                    origin: cmd.origin.clone(),
                })?;
    }

    let chroot = &staged[&Stage::Chroot];
    for cmd in chroot.iter().filter(|c| c.kind == CommandKind::Install) {
        if cmd.args.len() == 3 && parse_mode(&cmd.args[0]).is_err() {
            return Err(PlanError::InvalidMode {
                origin: cmd.origin.clone(),
                mode: cmd.args[0].clone(),
            });
        }
    }
    let path_extensions = chroot
        .iter()
        .filter(|c| c.kind == CommandKind::Path)
        .map(|c| c.args[0].clone())
        .collect();

    Ok(ExecutionPlan {
        pifile: pifile.source_path.clone(),
        source,
        destination,
        inplace,
        pump_bytes,
        partition_index,
        path_extensions,
        staged,
    })
}

fn resolve_locator(work_dir: &Path, written: &str) -> String {
    if crate::source::url_scheme(written).is_some() {
        written.to_string()
    } else {
        work_dir.join(written).to_string_lossy().into_owned()
    }
}

/// Split an `INSTALL` argument list into (mode, source, destination).
pub fn install_args(cmd: &Command) -> (Option<&str>, &str, &str) {
    match cmd.args.as_slice() {
        [mode, src, dst] => (Some(mode.as_str()), src.as_str(), dst.as_str()),
        [src, dst] => (None, src.as_str(), dst.as_str()),
        _ => unreachable!("INSTALL arity is checked by the parser"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanWarning {
    NoGuestModifications,
    MultipleTo {
        count: usize,
        used: SourceLine,
    },
    PumpOnDevice,
    /// The source does not exist yet but an earlier `HOST` step mentions it.
    DeferredInstallSource {
        origin: SourceLine,
        path: PathBuf,
    },
    /// The source does not exist and nothing before it looks like it creates it.
    MissingInstallSource {
        origin: SourceLine,
        path: PathBuf,
    },
}

impl fmt::Display for PlanWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanWarning::NoGuestModifications => f.write_str("no guest modifications"),
            PlanWarning::MultipleTo { count, used } => {
                write!(f, "{count} TO commands, using {}", used.short())
            }
            PlanWarning::PumpOnDevice => {
                f.write_str("PUMP on a block device destination will fail, devices cannot grow")
            }
            PlanWarning::DeferredInstallSource { origin, path } => write!(
                f,
                "{}: deferred existence: {} does not exist yet, expecting an earlier HOST step to create it",
                origin.short(),
                path.display()
            ),
            PlanWarning::MissingInstallSource { origin, path } => write!(
                f,
                "{}: INSTALL source {} does not exist",
                origin.short(),
                path.display()
            ),
        }
    }
}

/// Non-fatal findings about a built plan.
pub fn validate_plan(plan: &ExecutionPlan, probe: &dyn FsProbe) -> Vec<PlanWarning> {
    let mut warnings = Vec::new();
    let chroot = plan.commands(Stage::Chroot);
    if !chroot.iter().any(|c| {
        matches!(
            c.kind,
            CommandKind::Run | CommandKind::Host | CommandKind::Install
        )
    }) {
        warnings.push(PlanWarning::NoGuestModifications);
    }
    let tos: Vec<_> = plan
        .commands(Stage::Setup)
        .iter()
        .filter(|c| c.kind == CommandKind::To)
        .collect();
    if tos.len() > 1 {
        warnings.push(PlanWarning::MultipleTo {
            count: tos.len(),
            used: tos.last().unwrap().origin.clone(),
        });
    }
    if plan.pump_bytes > 0 && plan.destination.is_device {
        warnings.push(PlanWarning::PumpOnDevice);
    }

    for (pos, cmd) in chroot.iter().enumerate() {
        if cmd.kind != CommandKind::Install {
            continue;
        }
        let (_, src, _) = install_args(cmd);
        let path = plan.host_path(src);
        if probe.kind(&path) != PathKind::Missing {
            continue;
        }
        let written = Path::new(src);
        let mut needles: Vec<String> = vec![src.to_string()];
        if let Some(name) = written.file_name() {
            needles.push(name.to_string_lossy().into_owned());
        }
        if let Some(dir) = written.parent().filter(|d| !d.as_os_str().is_empty()) {
            needles.push(dir.to_string_lossy().into_owned());
        }
        let produced = chroot[..pos].iter().any(|prior| {
            prior.kind == CommandKind::Host
                && needles.iter().any(|n| prior.args[0].contains(n.as_str()))
        });
        let origin = cmd.origin.clone();
        warnings.push(if produced {
            PlanWarning::DeferredInstallSource { origin, path }
        } else {
            PlanWarning::MissingInstallSource { origin, path }
        });
    }
    warnings
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_str;
    use crate::source::MapProbe;
    use std::collections::HashMap;

    fn pifile(text: &str) -> Pifile {
        parse_str(text, Path::new("/work/example.Pifile"), &HashMap::new()).unwrap()
    }

    fn probe() -> MapProbe {
        MapProbe::new()
            .with("/work/a.img", PathKind::File)
            .with("/work/x.img", PathKind::File)
            .with("/dev/sdc", PathKind::BlockDevice)
    }

    fn kinds(cmds: &[Command]) -> Vec<CommandKind> {
        cmds.iter().map(|c| c.kind).collect()
    }

    #[test]
    fn stages_listing_one_shape() {
        let p = pifile("FROM a.img 2\nTO b.img\nPUMP 100M\nRUN a\nRUN b\nINSTALL k /k\n");
        let s = assign_stages(&p);
        use CommandKind::*;
        assert_eq!(kinds(&s[&Stage::Setup]), [From, To]);
        assert_eq!(kinds(&s[&Stage::Prepare]), [Pump]);
        assert_eq!(kinds(&s[&Stage::Chroot]), [Run, Run, Install]);
    }

    #[test]
    fn stages_empty_and_reordered() {
        let s = assign_stages(&pifile(""));
        assert_eq!(s.len(), 3);
        assert!(s.values().all(Vec::is_empty));

        let p = pifile("RUN x\nFROM a.img\n");
        let s = assign_stages(&p);
        // oracle: filter by kind over the list
        let want_setup: Vec<_> = p
            .commands
            .iter()
            .filter(|c| c.kind == CommandKind::From)
            .cloned()
            .collect();
        let want_chroot: Vec<_> = p
            .commands
            .iter()
            .filter(|c| c.kind == CommandKind::Run)
            .cloned()
            .collect();
        assert_eq!(s[&Stage::Setup], want_setup);
        assert_eq!(s[&Stage::Chroot], want_chroot);
        assert!(s[&Stage::Prepare].is_empty());
    }

    #[test]
    fn default_destination_next_to_pifile() {
        let plan = build_plan(&pifile("FROM a.img\n"), &PlanDefaults::new(&probe())).unwrap();
        assert_eq!(plan.destination.path, PathBuf::from("/work/example.img"));
        assert_eq!(plan.partition_index, 2);
        assert!(!plan.inplace);
        assert_eq!(plan.source.kind, SourceKind::LocalFile);
    }

    #[test]
    fn inplace_targets_source() {
        let plan = build_plan(&pifile("INPLACE x.img\n"), &PlanDefaults::new(&probe())).unwrap();
        assert!(plan.inplace);
        assert_eq!(plan.source.locator, "/work/x.img");
        assert_eq!(plan.destination.path, PathBuf::from("/work/x.img"));
    }

    #[test]
    fn explicit_partition_and_to() {
        let plan = build_plan(
            &pifile("FROM a.img 1\nTO b.img\n"),
            &PlanDefaults::new(&probe()),
        )
        .unwrap();
        assert_eq!(plan.partition_index, 1);
        assert_eq!(plan.destination.path, PathBuf::from("/work/b.img"));
        let dev = build_plan(
            &pifile("FROM a.img\nTO /dev/sdc\n"),
            &PlanDefaults::new(&probe()),
        )
        .unwrap();
        assert!(dev.destination.is_device);
    }

    #[test]
    fn pumps_sum_and_paths_collect() {
        let plan = build_plan(
            &pifile("FROM a.img\nPUMP 1M\nPATH /opt/bin\nPUMP 512\nPATH /x\n"),
            &PlanDefaults::new(&probe()),
        )
        .unwrap();
        assert_eq!(plan.pump_bytes, 1_048_576 + 512);
        assert_eq!(plan.path_extensions, ["/opt/bin", "/x"]);
    }

    #[test]
    fn plan_errors() {
        let d = probe();
        let d = PlanDefaults::new(&d);
        assert!(matches!(
            build_plan(&pifile("RUN x\n"), &d),
            Err(PlanError::MissingSource)
        ));
        assert!(matches!(
            build_plan(&pifile("FROM a.img\nFROM x.img\n"), &d),
            Err(PlanError::ConflictingSource { .. })
        ));
        assert!(matches!(
            build_plan(&pifile("FROM a.img\nINPLACE x.img\n"), &d),
            Err(PlanError::ConflictingSource { .. })
        ));
        assert!(matches!(
            build_plan(&pifile("INPLACE x.img\nTO y.img\n"), &d),
            Err(PlanError::ConflictingSource { .. })
        ));
        for bad in ["0", "-1", "two"] {
            assert!(matches!(
                build_plan(&pifile(&format!("FROM a.img {bad}\n")), &d),
                Err(PlanError::InvalidPartitionIndex { .. })
            ));
        }
        assert!(matches!(
            build_plan(&pifile("FROM a.img\nPUMP 1.5G\n"), &d),
            Err(PlanError::MalformedSize { .. })
        ));
        assert!(matches!(
            build_plan(&pifile("FROM a.img\nINSTALL 999 x y\n"), &d),
            Err(PlanError::InvalidMode { .. })
        ));
        assert!(matches!(
            build_plan(&pifile("FROM missing.img\n"), &d),
            Err(PlanError::Source { .. })
        ));
        assert!(matches!(
            build_plan(&pifile("INPLACE https://h/x.img\n"), &d),
            Err(PlanError::ConflictingSource { .. })
        ));
    }

    #[test]
    fn multiple_to_last_wins() {
        let pr = probe();
        let plan = build_plan(
            &pifile("FROM a.img\nTO b.img\nTO c.img\nRUN x\n"),
            &PlanDefaults::new(&pr),
        )
        .unwrap();
        assert_eq!(plan.destination.path, PathBuf::from("/work/c.img"));
        let w = validate_plan(&plan, &pr);
        assert!(matches!(
            w.as_slice(),
            [PlanWarning::MultipleTo { count: 2, .. }]
        ));
    }

    #[test]
    fn warnings() {
        let pr = probe();
        let d = PlanDefaults::new(&pr);
        let plan = build_plan(&pifile("FROM a.img\nPATH /x\n"), &d).unwrap();
        assert_eq!(
            validate_plan(&plan, &pr),
            [PlanWarning::NoGuestModifications]
        );

        let plan = build_plan(
            &pifile("FROM a.img\nTO b.img\nPUMP 100M\nRUN a\nINSTALL 700 a.img /root/a\n"),
            &d,
        )
        .unwrap();
        assert!(validate_plan(&plan, &pr).is_empty());

        let plan = build_plan(&pifile("FROM a.img\nTO /dev/sdc\nPUMP 1M\nRUN x\n"), &d).unwrap();
        assert_eq!(validate_plan(&plan, &pr), [PlanWarning::PumpOnDevice]);
    }

    #[test]
    fn deferred_install_depends_on_order() {
        let pr = probe();
        let d = PlanDefaults::new(&pr);
        let host_first = "FROM a.img\nHOST make -C build\nINSTALL 755 build/dtn7 /usr/bin/dtn7\n";
        let install_first =
            "FROM a.img\nINSTALL 755 build/dtn7 /usr/bin/dtn7\nHOST make -C build\n";
        for (text, want_deferred) in [(host_first, true), (install_first, false)] {
            let plan = build_plan(&pifile(text), &d).unwrap();
            let w = validate_plan(&plan, &pr);
            // oracle: linear scan for a HOST before the INSTALL naming its directory
            let cmds = &plan.staged[&Stage::Chroot];
            let install_at = cmds
                .iter()
                .position(|c| c.kind == CommandKind::Install)
                .unwrap();
            let oracle = cmds[..install_at]
                .iter()
                .any(|c| c.kind == CommandKind::Host && c.args[0].contains("build"));
            assert_eq!(oracle, want_deferred);
            assert_eq!(w.len(), 1);
            assert_eq!(
                matches!(w[0], PlanWarning::DeferredInstallSource { .. }),
                want_deferred,
                "{w:?}"
            );
        }
    }
}
