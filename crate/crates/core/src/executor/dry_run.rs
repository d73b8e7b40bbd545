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

//! Backend that records actions without touching the host.
//!
//! Images written by earlier actions are tracked in memory, so that a pump
//! after a copy sees the copied table, and a second pump sees the first.

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use super::{Action, ActionKind, ActionLog, ExecError, Executor, ImageView};
use crate::image::SECTOR_SIZE;

type Responder = Box<dyn FnMut(&ActionKind) -> Option<i32>>;

#[derive(Default)]
pub struct DryRunExecutor {
    log: ActionLog,
    images: HashMap<PathBuf, ImageView>,
    guest_files: HashMap<String, String>,
    responder: Option<Responder>,
}

impl DryRunExecutor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Serves `bytes` as the image at `path` instead of reading the host.
    /// Only the first sector is kept.
    pub fn with_image(mut self, path: impl Into<PathBuf>, bytes: &[u8]) -> Self {
        self.images.insert(
            path.into(),
            ImageView {
                sector0: bytes[..bytes.len().min(SECTOR_SIZE as usize)].to_vec(),
                len: bytes.len() as u64,
            },
        );
        self
    }

    /// Like [`with_image`](Self::with_image) but with an explicit length.
    pub fn with_image_view(mut self, path: impl Into<PathBuf>, view: ImageView) -> Self {
        self.images.insert(path.into(), view);
        self
    }

    /// Makes `read_guest_file` return `contents` for `guest_path`.
    pub fn with_guest_file(mut self, guest_path: &str, contents: &str) -> Self {
        self.guest_files
            .insert(guest_path.to_string(), contents.to_string());
        self
    }

    /// Chooses the exit status of exec actions; `None` means 0.
    pub fn with_responder(
        mut self,
        responder: impl FnMut(&ActionKind) -> Option<i32> + 'static,
    ) -> Self {
        self.responder = Some(Box::new(responder));
        self
    }

    pub fn into_actions(self) -> Vec<Action> {
        self.log.actions().to_vec()
    }

    fn view(&mut self, image: &Path) -> Result<ImageView, ExecError> {
        if let Some(v) = self.images.get(image) {
            return Ok(v.clone());
        }
        read_view(image)
    }
}

pub(crate) fn read_view(image: &Path) -> Result<ImageView, ExecError> {
    let ctx = || format!("reading {}", image.display());
    let mut file = File::open(image).map_err(|e| ExecError::io(ctx(), e))?;
    let len = file.metadata().map_err(|e| ExecError::io(ctx(), e))?.len();
    let mut sector0 = Vec::with_capacity(SECTOR_SIZE as usize);
    file.by_ref()
        .take(SECTOR_SIZE)
        .read_to_end(&mut sector0)
        .map_err(|e| ExecError::io(ctx(), e))?;
    // block devices report zero length through metadata
    let len = if len == 0 {
        device_len(&mut file).unwrap_or(0)
    } else {
        len
    };
    Ok(ImageView { sector0, len })
}

fn device_len(file: &mut File) -> std::io::Result<u64> {
    use std::io::{Seek, SeekFrom};
    file.seek(SeekFrom::End(0))
}

impl Executor for DryRunExecutor {
    fn run(
        &mut self,
        action: &ActionKind,
        _output: &mut dyn FnMut(&str),
    ) -> Result<i32, ExecError> {
        let status = if action.is_exec() {
            self.responder.as_mut().and_then(|r| r(action)).unwrap_or(0)
        } else {
            0
        };
        match action {
            ActionKind::CopyImage { src, dst } => {
                if let Ok(v) = self.view(src) {
                    self.images.insert(dst.clone(), v);
                }
            }
            ActionKind::DeviceWrite { src, device } => {
                if let Ok(v) = self.view(src) {
                    self.images.insert(device.clone(), v);
                }
            }
            ActionKind::GrowFile { image, bytes } => {
                let mut v = self.view(image)?;
                v.len += bytes;
                self.images.insert(image.clone(), v);
            }
            ActionKind::WriteTable { image, table } => {
                let mut v = self.view(image)?;
                table.validate()?;
                if v.sector0.len() < SECTOR_SIZE as usize {
                    v.sector0.resize(SECTOR_SIZE as usize, 0);
                }
                table.encode_into(&mut v.sector0);
                self.images.insert(image.clone(), v);
            }
            _ => {}
        }
        self.log.record(action.clone());
        Ok(status)
    }

    fn image_view(&mut self, image: &Path) -> Result<ImageView, ExecError> {
        self.view(image)
    }

    fn read_guest_file(
        &mut self,
        _root: &Path,
        guest_path: &str,
    ) -> Result<Option<String>, ExecError> {
        Ok(self.guest_files.get(guest_path).cloned())
    }

    fn image_digest(&mut self, _image: &Path) -> Result<Option<String>, ExecError> {
        Ok(None)
    }

    fn actions(&self) -> &[Action] {
        self.log.actions()
    }
}
