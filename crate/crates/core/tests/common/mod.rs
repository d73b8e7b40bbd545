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

//! Test-side fixture builders and a minimal MBR reader, written against the
//! on-disk format directly rather than the library.

#![allow(dead_code)]

use std::fs::File;
use std::io::{Seek, SeekFrom, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

pub const MIB: u64 = 1 << 20;
pub const FIXTURE_LEN: u64 = 64 * MIB;
pub const DISK_ID: u32 = 0x6c58_6e13;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub bootable: bool,
    pub type_code: u8,
    pub start: u32,
    pub size: u32,
}

pub fn slot(type_code: u8, start: u32, size: u32) -> Slot {
    Slot {
        bootable: false,
        type_code,
        start,
        size,
    }
}

/// Sector 0 with the given slots in order (None = empty).
pub fn mbr_sector(disk_id: u32, slots: &[Option<Slot>]) -> Vec<u8> {
    let mut s = vec![0u8; 512];
    s[440..444].copy_from_slice(&disk_id.to_le_bytes());
    for (i, slot) in slots.iter().enumerate() {
        let Some(p) = slot else { continue };
        let off = 446 + 16 * i;
        s[off] = if p.bootable { 0x80 } else { 0 };
        s[off + 1..off + 4].copy_from_slice(&[0xfe, 0xff, 0xff]);
        s[off + 4] = p.type_code;
        s[off + 5..off + 8].copy_from_slice(&[0xfe, 0xff, 0xff]);
        s[off + 8..off + 12].copy_from_slice(&p.start.to_le_bytes());
        s[off + 12..off + 16].copy_from_slice(&p.size.to_le_bytes());
    }
    s[510] = 0x55;
    s[511] = 0xaa;
    s
}

/// 64 MiB layout: an 8 MiB FAT boot partition at 4 MiB and a Linux root
/// partition filling the rest.
pub fn two_partition_sector() -> Vec<u8> {
    let boot_start = (4 * MIB / 512) as u32;
    let boot_size = (8 * MIB / 512) as u32;
    let root_start = boot_start + boot_size;
    let root_size = (FIXTURE_LEN / 512) as u32 - root_start;
    let mut boot = slot(0x0c, boot_start, boot_size);
    boot.bootable = true;
    mbr_sector(
        DISK_ID,
        &[Some(boot), Some(slot(0x83, root_start, root_size))],
    )
}

/// Writes `sector0` followed by a deterministic pseudo-random body up to `len`.
pub fn write_image(path: &Path, sector0: &[u8], len: u64) {
    let mut f = File::create(path).unwrap();
    f.write_all(sector0).unwrap();
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    let mut buf = vec![0u8; MIB as usize];
    let mut written = sector0.len() as u64;
    while written < len {
        for chunk in buf.chunks_exact_mut(8) {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let n = (len - written).min(buf.len() as u64) as usize;
        f.write_all(&buf[..n]).unwrap();
        written += n as u64;
    }
    f.seek(SeekFrom::Start(0)).unwrap();
    f.sync_all().unwrap();
}

/// Minimal reader: (bootable, type, start, size) per slot.
pub fn read_slots(bytes: &[u8]) -> [Slot; 4] {
    assert_eq!(&bytes[510..512], &[0x55, 0xaa], "boot signature");
    let mut out = [slot(0, 0, 0); 4];
    for (i, s) in out.iter_mut().enumerate() {
        let e = &bytes[446 + 16 * i..462 + 16 * i];
        let le = |o: usize| u32::from_le_bytes([e[o], e[o + 1], e[o + 2], e[o + 3]]);
        *s = Slot {
            bootable: e[0] == 0x80,
            type_code: e[4],
            start: le(8),
            size: le(12),
        };
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}
