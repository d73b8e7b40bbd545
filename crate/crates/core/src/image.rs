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

//! Raw disk image handling: byte sizes, the MBR partition table in sector 0,
//! and the arithmetic behind growing an image and its last partition.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileTypeExt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::executor::{ActionKind, ExecError, Executor};
use crate::plan::ExecutionPlan;

pub const SECTOR_SIZE: u64 = 512;

const DISK_ID_OFFSET: usize = 440;
const TABLE_OFFSET: usize = 446;
const ENTRY_LEN: usize = 16;
const SIGNATURE_OFFSET: usize = 510;
const BOOT_SIGNATURE: [u8; 2] = [0x55, 0xAA];
const CHS_SATURATED: [u8; 3] = [0xFE, 0xFF, 0xFF];

const TYPE_GPT_PROTECTIVE: u8 = 0xEE;
const EXTENDED_TYPES: [u8; 3] = [0x05, 0x0F, 0x85];

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed size `{0}` (expected digits with an optional k, M, G or T suffix)")]
    MalformedSize(String),
    #[error("image is only {0} bytes, too short for a partition table")]
    ShortImage(u64),
    #[error("sector 0 lacks the 0x55AA boot signature")]
    MissingBootSignature,
    #[error("image uses a GPT partition table, only MBR is supported")]
    GptNotSupported,
    #[error("invalid partition table: {0}")]
    InvalidTable(String),
    #[error("partition {index} is not the last partition (partition {successor} follows it)")]
    PartitionNotLast { index: u8, successor: u8 },
    #[error("partition slot {0} is empty")]
    EmptyPartitionSlot(u8),
    #[error("partition {0} is an extended partition and cannot be grown")]
    ExtendedPartition(u8),
    #[error("partition index {0} is outside 1..=4")]
    InvalidPartitionIndex(u32),
    #[error("{} is a block device and cannot grow", .0.display())]
    IsBlockDevice(PathBuf),
    #[error("partition {index} ends at byte {end} beyond the image size {len}")]
    PartitionExceedsImage { index: u8, end: u64, len: u64 },
    #[error("growing partition {0} would overflow the 32-bit sector count")]
    TooLarge(u8),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A byte count written as `<digits>[k|M|G|T]` with binary multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ByteSize(pub u64);

const SIZE_SUFFIXES: [(&str, u32); 4] = [("T", 4), ("G", 3), ("M", 2), ("k", 1)];

impl ByteSize {
    pub fn bytes(self) -> u64 {
        self.0
    }

    /// Rounded up to a whole number of sectors.
    pub fn sectors_ceil(self) -> u64 {
        self.0.div_ceil(SECTOR_SIZE)
    }
}

/// Parses `100M`, `2G`, `512`, ... Suffixes are case sensitive and binary.
pub fn parse_size(text: &str) -> Result<ByteSize, ImageError> {
    let bad = || ImageError::MalformedSize(text.to_string());
    let (digits, power) = SIZE_SUFFIXES
        .iter()
        .find_map(|(s, p)| text.strip_suffix(s).map(|d| (d, *p)))
        .unwrap_or((text, 0));
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let n: u64 = digits.parse().map_err(|_| bad())?;
    n.checked_mul(1024u64.pow(power))
        .map(ByteSize)
        .ok_or_else(bad)
}

/// Inverse of [`parse_size`], using the largest suffix that divides evenly.
pub fn render_size(size: ByteSize) -> String {
    if size.0 != 0 {
        for (suffix, power) in SIZE_SUFFIXES {
            let unit = 1024u64.pow(power);
            if size.0.is_multiple_of(unit) {
                return format!("{}{}", size.0 / unit, suffix);
            }
        }
    }
    size.0.to_string()
}

impl FromStr for ByteSize {
    type Err = ImageError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_size(s)
    }
}

impl fmt::Display for ByteSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_size(*self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PartitionEntry {
    /// Slot number, 1..=4.
    pub index: u8,
    pub bootable: bool,
    pub type_code: u8,
    pub lba_start: u32,
    pub lba_size: u32,
}

impl PartitionEntry {
    pub fn empty(index: u8) -> Self {
        PartitionEntry {
            index,
            bootable: false,
            type_code: 0,
            lba_start: 0,
            lba_size: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lba_size == 0
    }

    /// One past the last sector.
    pub fn lba_end(&self) -> u64 {
        u64::from(self.lba_start) + u64::from(self.lba_size)
    }

    fn decode(index: u8, raw: &[u8]) -> Self {
        PartitionEntry {
            index,
            bootable: raw[0] == 0x80,
            type_code: raw[4],
            lba_start: u32::from_le_bytes(raw[8..12].try_into().unwrap()),
            lba_size: u32::from_le_bytes(raw[12..16].try_into().unwrap()),
        }
    }

    fn encode(&self) -> [u8; ENTRY_LEN] {
        let mut raw = [0u8; ENTRY_LEN];
        if self.is_empty() && self.type_code == 0 && !self.bootable {
            return raw;
        }
        raw[0] = if self.bootable { 0x80 } else { 0x00 };
        raw[1..4].copy_from_slice(&CHS_SATURATED);
        raw[4] = self.type_code;
        raw[5..8].copy_from_slice(&CHS_SATURATED);
        raw[8..12].copy_from_slice(&self.lba_start.to_le_bytes());
        raw[12..16].copy_from_slice(&self.lba_size.to_le_bytes());
        raw
    }
}

/// `[*]TT:START+SIZE`, `*` marking the bootable flag; `-` for an empty slot.
impl fmt::Display for PartitionEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == PartitionEntry::empty(self.index) {
            return f.write_str("-");
        }
        if self.bootable {
            f.write_str("*")?;
        }
        write!(
            f,
            "{:02x}:{}+{}",
            self.type_code, self.lba_start, self.lba_size
        )
    }
}

impl PartitionEntry {
    /// Parses the [`Display`](fmt::Display) form back.
    pub fn parse_display(index: u8, text: &str) -> Option<Self> {
        if text == "-" {
            return Some(PartitionEntry::empty(index));
        }
        let (bootable, rest) = match text.strip_prefix('*') {
            Some(r) => (true, r),
            None => (false, text),
        };
        let (ty, range) = rest.split_once(':')?;
        let (start, size) = range.split_once('+')?;
        if ty.len() != 2 {
            return None;
        }
        Some(PartitionEntry {
            index,
            bootable,
            type_code: u8::from_str_radix(ty, 16).ok()?,
            lba_start: start.parse().ok()?,
            lba_size: size.parse().ok()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PartitionTable {
    pub disk_id: u32,
    pub entries: [PartitionEntry; 4],
}

impl PartitionTable {
    /// The sector size; fixed.
    pub const SECTOR_SIZE: u64 = SECTOR_SIZE;

    /// Decodes sector 0. Checks only the boot signature and rejects
    /// GPT protective MBRs; use [`validate`](Self::validate) for geometry.
    pub fn decode(sector0: &[u8]) -> Result<Self, ImageError> {
        if (sector0.len() as u64) < SECTOR_SIZE {
            return Err(ImageError::ShortImage(sector0.len() as u64));
        }
        if sector0[SIGNATURE_OFFSET..SIGNATURE_OFFSET + 2] != BOOT_SIGNATURE {
            return Err(ImageError::MissingBootSignature);
        }
        let disk_id = u32::from_le_bytes(
            sector0[DISK_ID_OFFSET..DISK_ID_OFFSET + 4]
                .try_into()
                .unwrap(),
        );
        let entries = std::array::from_fn(|i| {
            let off = TABLE_OFFSET + i * ENTRY_LEN;
            PartitionEntry::decode(i as u8 + 1, &sector0[off..off + ENTRY_LEN])
        });
        let table = PartitionTable { disk_id, entries };
        if table.occupied().any(|e| e.type_code == TYPE_GPT_PROTECTIVE) {
            return Err(ImageError::GptNotSupported);
        }
        Ok(table)
    }

    /// Writes this table into a copy of `sector0`. Entries that differ from
    /// what `sector0` currently holds get saturated CHS fields; unchanged
    /// entries keep their bytes.
    pub fn encode_into(&self, sector0: &mut [u8]) {
        sector0[DISK_ID_OFFSET..DISK_ID_OFFSET + 4].copy_from_slice(&self.disk_id.to_le_bytes());
        for (i, entry) in self.entries.iter().enumerate() {
            let off = TABLE_OFFSET + i * ENTRY_LEN;
            let current = PartitionEntry::decode(entry.index, &sector0[off..off + ENTRY_LEN]);
            if current != *entry {
                sector0[off..off + ENTRY_LEN].copy_from_slice(&entry.encode());
            }
        }
    }

    pub fn entry(&self, index: u8) -> Option<&PartitionEntry> {
        self.entries.get(usize::from(index).checked_sub(1)?)
    }

    pub fn occupied(&self) -> impl Iterator<Item = &PartitionEntry> {
        self.entries.iter().filter(|e| !e.is_empty())
    }

    /// Lowercase hex disk id as used in `PARTUUID=xxxxxxxx-NN`.
    pub fn disk_id_hex(&self) -> String {
        format!("{:08x}", self.disk_id)
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        for (i, e) in self.entries.iter().enumerate() {
            if usize::from(e.index) != i + 1 {
                return Err(ImageError::InvalidTable(format!(
                    "slot {} carries index {}",
                    i + 1,
                    e.index
                )));
            }
            if e.is_empty() != (e.type_code == 0) {
                return Err(ImageError::InvalidTable(format!(
                    "partition {} has type {:#04x} but {} sectors",
                    e.index, e.type_code, e.lba_size
                )));
            }
            if !e.is_empty() && e.lba_start == 0 {
                return Err(ImageError::InvalidTable(format!(
                    "partition {} overlaps the partition table sector",
                    e.index
                )));
            }
        }
        let used: Vec<_> = self.occupied().collect();
        for (i, a) in used.iter().enumerate() {
            for b in &used[i + 1..] {
                if u64::from(a.lba_start) < b.lba_end() && u64::from(b.lba_start) < a.lba_end() {
                    return Err(ImageError::InvalidTable(format!(
                        "partitions {} and {} overlap",
                        a.index, b.index
                    )));
                }
            }
        }
        Ok(())
    }

    /// Compact single-line form used in action logs:
    /// `disk_id=deadbeef p1=0c:8192+16384 p2=83:...`.
    pub fn summary(&self) -> Vec<(String, String)> {
        let mut out = vec![("disk_id".to_string(), self.disk_id_hex())];
        for e in &self.entries {
            out.push((format!("p{}", e.index), e.to_string()));
        }
        out
    }
}

fn read_sector0<R: Read + Seek>(image: &mut R) -> Result<[u8; 512], ImageError> {
    let len = image.seek(SeekFrom::End(0))?;
    if len < SECTOR_SIZE {
        return Err(ImageError::ShortImage(len));
    }
    image.seek(SeekFrom::Start(0))?;
    let mut sector = [0u8; 512];
    image.read_exact(&mut sector)?;
    Ok(sector)
}

pub fn read_partition_table<R: Read + Seek>(image: &mut R) -> Result<PartitionTable, ImageError> {
    PartitionTable::decode(&read_sector0(image)?)
}

/// Rewrites the disk id and the 64-byte entry area of sector 0. Nothing
/// else on the image is touched.
pub fn write_partition_table<F: Read + Write + Seek>(
    image: &mut F,
    table: &PartitionTable,
) -> Result<(), ImageError> {
    table.validate()?;
    let mut sector = read_sector0(image)?;
    table.encode_into(&mut sector);
    image.seek(SeekFrom::Start(DISK_ID_OFFSET as u64))?;
    image.write_all(&sector[DISK_ID_OFFSET..DISK_ID_OFFSET + 4])?;
    image.seek(SeekFrom::Start(TABLE_OFFSET as u64))?;
    image.write_all(&sector[TABLE_OFFSET..SIGNATURE_OFFSET])?;
    image.flush()?;
    Ok(())
}

/// Appends `extra` zero bytes to a regular file and returns the new length.
pub fn grow_image_file(path: &Path, extra: ByteSize) -> Result<u64, ImageError> {
    let meta = fs::metadata(path)?;
    if meta.file_type().is_block_device() {
        return Err(ImageError::IsBlockDevice(path.to_path_buf()));
    }
    if !meta.is_file() {
        return Err(ImageError::Io(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("{} is not a regular file", path.display()),
        )));
    }
    if extra.0 == 0 {
        return Ok(meta.len());
    }
    let new_len = meta
        .len()
        .checked_add(extra.0)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "image size overflow"))?;
    let file = OpenOptions::new().write(true).open(path)?;
    file.set_len(new_len)?;
    file.sync_all()?;
    Ok(new_len)
}

/// Everything needed to grow one partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PumpPlan {
    pub grow_bytes: u64,
    pub new_len: u64,
    pub table: PartitionTable,
    pub partition_index: u8,
}

/// Computes the growth of `partition_index` by `extra` (rounded up to whole
/// sectors). Only the last partition on disk may grow.
pub fn plan_pump(
    table: &PartitionTable,
    image_len: u64,
    partition_index: u32,
    extra: ByteSize,
) -> Result<PumpPlan, ImageError> {
    let index = u8::try_from(partition_index)
        .ok()
        .filter(|i| (1..=4).contains(i))
        .ok_or(ImageError::InvalidPartitionIndex(partition_index))?;
    table.validate()?;
    let target = *table.entry(index).expect("index checked");
    if target.is_empty() {
        return Err(ImageError::EmptyPartitionSlot(index));
    }
    if EXTENDED_TYPES.contains(&target.type_code) {
        return Err(ImageError::ExtendedPartition(index));
    }
    if let Some(next) = table
        .occupied()
        .filter(|e| e.lba_start > target.lba_start)
        .min_by_key(|e| e.lba_start)
    {
        return Err(ImageError::PartitionNotLast {
            index,
            successor: next.index,
        });
    }
    let end = target.lba_end() * SECTOR_SIZE;
    if end > image_len {
        return Err(ImageError::PartitionExceedsImage {
            index,
            end,
            len: image_len,
        });
    }

    let sectors = extra.sectors_ceil();
    let new_size = u64::from(target.lba_size) + sectors;
    let new_size = u32::try_from(new_size).map_err(|_| ImageError::TooLarge(index))?;
    let mut grown = *table;
    grown.entries[usize::from(index) - 1].lba_size = new_size;
    Ok(PumpPlan {
        grow_bytes: sectors * SECTOR_SIZE,
        new_len: image_len + sectors * SECTOR_SIZE,
        table: grown,
        partition_index: index,
    })
}

/// The prepare stage: grow the destination image, its partition entry, and
/// ask the executor to resize the filesystem. Nothing is emitted when the
/// plan has no `PUMP`, and nothing is emitted if validation fails.
pub fn pump(
    plan: &ExecutionPlan,
    executor: &mut dyn Executor,
) -> Result<Option<PumpPlan>, ExecError> {
    if plan.pump_bytes == 0 {
        return Ok(None);
    }
    let image = plan.destination.path.clone();
    let view = executor.image_view(&image)?;
    let table = PartitionTable::decode(&view.sector0)?;
    let pump = plan_pump(
        &table,
        view.len,
        plan.partition_index,
        ByteSize(plan.pump_bytes),
    )?;
    executor.perform(&ActionKind::GrowFile {
        image: image.clone(),
        bytes: pump.grow_bytes,
    })?;
    executor.perform(&ActionKind::WriteTable {
        image: image.clone(),
        table: pump.table,
    })?;
    executor.perform(&ActionKind::FsResize {
        image,
        partition: pump.partition_index,
    })?;
    Ok(Some(pump))
}
