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

//! Base image resolution: local files, block devices and downloads.
//!
//! Downloads land in a content-addressed cache keyed by the SHA-256 of the
//! URL string. Each entry is a directory holding the payload as `image` and a
//! line-oriented `meta` file:
//!
//! ```text
//! <cache>/<key>/image
//! <cache>/<key>/meta      url=..., fetched_at=<unix seconds>, size=<bytes>
//! <cache>/<key>.lock      exclusive advisory lock while fetching
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::os::unix::fs::FileTypeExt;
use std::path::{Path, PathBuf};
use std::process::{Command as Process, Stdio};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::executor::{ActionKind, ExecError, Executor};
use crate::plan::ExecutionPlan;

/// Environment variable overriding the cache location.
pub const CACHE_ENV: &str = "PIMOD_CACHE";
/// Cache directory created beside the Pifile when `PIMOD_CACHE` is unset.
pub const DEFAULT_CACHE_DIR: &str = ".pimod-cache";

const URL_SCHEMES: [&str; 3] = ["http", "https", "ftp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PathKind {
    Missing,
    File,
    Directory,
    BlockDevice,
    Other,
}

/// Read-only view of the host filesystem.
pub trait FsProbe {
    fn kind(&self, path: &Path) -> PathKind;
}

/// Probes the real filesystem through `stat`.
#[derive(Debug, Default, Clone, Copy)]
pub struct HostProbe;

impl FsProbe for HostProbe {
    fn kind(&self, path: &Path) -> PathKind {
        match fs::metadata(path) {
            Err(_) => PathKind::Missing,
            Ok(m) if m.file_type().is_block_device() => PathKind::BlockDevice,
            Ok(m) if m.is_file() => PathKind::File,
            Ok(m) if m.is_dir() => PathKind::Directory,
            Ok(_) => PathKind::Other,
        }
    }
}

/// A fixed table of path kinds; everything else is missing.
#[derive(Debug, Default, Clone)]
pub struct MapProbe(HashMap<PathBuf, PathKind>);

impl MapProbe {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, path: impl Into<PathBuf>, kind: PathKind) -> Self {
        self.0.insert(path.into(), kind);
        self
    }
}

impl FsProbe for MapProbe {
    fn kind(&self, path: &Path) -> PathKind {
        self.0.get(path).copied().unwrap_or(PathKind::Missing)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceKind {
    LocalFile,
    BlockDevice,
    Url,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceSpec {
    pub kind: SourceKind,
    /// The URL, or the host path resolved against the Pifile directory.
    pub locator: String,
    pub partition_index: u32,
}

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("source `{0}` is neither a URL, a block device nor an existing file")]
    SourceNotFound(String),
    #[error("unsupported archive format: {0}")]
    UnsupportedArchive(String),
    #[error("archive holds several images: {}", .0.join(", "))]
    MultipleImagesInArchive(Vec<String>),
    #[error("archive {0} holds no image")]
    NoImageInArchive(String),
    #[error("corrupt archive {path}: {message}")]
    CorruptArchive { path: String, message: String },
    #[error("fetching {url} failed{}: {message}", status.map(|s| format!(" with status {s}")).unwrap_or_default())]
    FetchFailed {
        url: String,
        status: Option<u16>,
        message: String,
    },
    #[error("cache directory {} is not writable: {source}", path.display())]
    CacheUnwritable {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0} is not cached and downloads are disabled (--offline)")]
    OfflineMiss(String),
    #[error("{} is a directory", .0.display())]
    DestinationIsDirectory(PathBuf),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Returns the scheme if `locator` is an http, https or ftp URL.
pub fn url_scheme(locator: &str) -> Option<&str> {
    let (scheme, rest) = locator.split_once("://")?;
    let scheme_lower = scheme.to_ascii_lowercase();
    if URL_SCHEMES.contains(&scheme_lower.as_str()) && !rest.is_empty() {
        Some(scheme)
    } else {
        None
    }
}

pub fn classify_source(locator: &str, probe: &dyn FsProbe) -> Result<SourceKind, SourceError> {
    if url_scheme(locator).is_some() {
        return Ok(SourceKind::Url);
    }
    match probe.kind(Path::new(locator)) {
        PathKind::BlockDevice => Ok(SourceKind::BlockDevice),
        PathKind::File => Ok(SourceKind::LocalFile),
        _ => Err(SourceError::SourceNotFound(locator.to_string())),
    }
}

/// `$PIMOD_CACHE`, or `.pimod-cache` in the Pifile's directory.
pub fn default_cache_dir(pifile: &Path, env: &HashMap<String, String>) -> PathBuf {
    match env.get(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => pifile
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .join(DEFAULT_CACHE_DIR),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchError {
    pub status: Option<u16>,
    pub message: String,
}

impl fmt::Display for FetchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.status {
            Some(s) => write!(f, "status {}: {}", s, self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Streams the body behind a URL into `out`, returning the byte count.
pub trait Fetcher {
    fn fetch(&self, url: &str, out: &mut dyn Write) -> Result<u64, FetchError>;
}

/// HTTP(S) through `ureq`, FTP through the host's `curl`.
#[derive(Debug, Default, Clone, Copy)]
pub struct NetFetcher;

impl Fetcher for NetFetcher {
    fn fetch(&self, url: &str, out: &mut dyn Write) -> Result<u64, FetchError> {
        let scheme = url_scheme(url).map(str::to_ascii_lowercase);
        if scheme.as_deref() == Some("ftp") {
            return fetch_with_curl(url, out);
        }
        match ureq::get(url).call() {
            Ok(mut resp) => {
                let mut body = resp.body_mut().as_reader();
                io::copy(&mut body, out).map_err(|e| FetchError {
                    status: None,
                    message: e.to_string(),
                })
            }
            Err(ureq::Error::StatusCode(code)) => Err(FetchError {
                status: Some(code),
                message: "server returned an error status".into(),
            }),
            Err(e) => Err(FetchError {
                status: None,
                message: e.to_string(),
            }),
        }
    }
}

fn fetch_with_curl(url: &str, out: &mut dyn Write) -> Result<u64, FetchError> {
    let mut child = Process::new("curl")
        .args(["--fail", "--silent", "--show-error", "--location", url])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| FetchError {
            status: None,
            message: format!("cannot run curl for ftp download: {e}"),
        })?;
    let mut stdout = child.stdout.take().expect("piped");
    let copied = io::copy(&mut stdout, out);
    let output = child.wait_with_output().map_err(|e| FetchError {
        status: None,
        message: e.to_string(),
    })?;
    if !output.status.success() {
        return Err(FetchError {
            status: None,
            message: format!(
                "curl exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            ),
        });
    }
    copied.map_err(|e| FetchError {
        status: None,
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub key: String,
    pub stored_path: PathBuf,
    /// Seconds since the Unix epoch.
    pub fetched_at: u64,
}

#[derive(Debug, Clone)]
pub struct Cache {
    dir: PathBuf,
}

impl Cache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Cache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// SHA-256 of the exact URL string, lowercase hex.
    pub fn key(url: &str) -> String {
        hex::encode(Sha256::digest(url.as_bytes()))
    }

    pub fn entry_dir(&self, key: &str) -> PathBuf {
        self.dir.join(key)
    }

    /// A complete entry for `url`, if one exists. Never downloads.
    pub fn lookup(&self, url: &str) -> Option<CacheEntry> {
        let key = Self::key(url);
        let dir = self.entry_dir(&key);
        let image = dir.join("image");
        let meta = fs::read_to_string(dir.join("meta")).ok()?;
        if !image.is_file() {
            return None;
        }
        let fetched_at = meta
            .lines()
            .find_map(|l| l.strip_prefix("fetched_at="))
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        Some(CacheEntry {
            key,
            stored_path: image,
            fetched_at,
        })
    }

    /// Returns the cached entry for `url`, downloading it first on a miss
    /// (or always, with `refresh`). Downloads go to a temporary name and are
    /// renamed into place, so a failed fetch leaves no entry behind.
    pub fn fetch(
        &self,
        url: &str,
        fetcher: &dyn Fetcher,
        refresh: bool,
    ) -> Result<CacheEntry, SourceError> {
        let unwritable = |source| SourceError::CacheUnwritable {
            path: self.dir.clone(),
            source,
        };
        fs::create_dir_all(&self.dir).map_err(unwritable)?;
        let key = Self::key(url);
        let lock = File::create(self.dir.join(format!("{key}.lock"))).map_err(unwritable)?;
        lock.lock().map_err(unwritable)?;

        if !refresh {
            if let Some(hit) = self.lookup(url) {
                log::debug!("cache hit for {url}: {}", hit.stored_path.display());
                return Ok(hit);
            }
        }

        let dir = self.entry_dir(&key);
        let created_dir = !dir.exists();
        fs::create_dir_all(&dir).map_err(unwritable)?;
        let partial = dir.join("image.part");
        let result = download(url, &partial, fetcher);
        let size = match result {
            Ok(size) => size,
            Err(e) => {
                let _ = fs::remove_file(&partial);
                if created_dir {
                    let _ = fs::remove_dir(&dir);
                }
                return Err(e);
            }
        };
        let image = dir.join("image");
        fs::rename(&partial, &image)?;
        let fetched_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let meta_tmp = dir.join("meta.part");
        fs::write(
            &meta_tmp,
            format!("url={url}\nfetched_at={fetched_at}\nsize={size}\n"),
        )?;
        fs::rename(&meta_tmp, dir.join("meta"))?;
        // extracted images belong to the old payload
        if refresh {
            remove_extracted(&dir)?;
        }
        Ok(CacheEntry {
            key,
            stored_path: image,
            fetched_at,
        })
    }
}

fn remove_extracted(entry_dir: &Path) -> io::Result<()> {
    let extracted = entry_dir.join("extracted");
    if extracted.exists() {
        fs::remove_dir_all(extracted)?;
    }
    Ok(())
}

fn download(url: &str, dest: &Path, fetcher: &dyn Fetcher) -> Result<u64, SourceError> {
    let file = File::create(dest)?;
    let mut out = BufWriter::new(file);
    let size = fetcher
        .fetch(url, &mut out)
        .map_err(|e| SourceError::FetchFailed {
            url: url.to_string(),
            status: e.status,
            message: e.message,
        })?;
    let file = out.into_inner().map_err(|e| e.into_error())?;
    file.sync_all()?;
    Ok(size)
}

/// Downloads `url` into the cache at `cache_dir` unless already present.
pub fn fetch_to_cache(
    url: &str,
    cache_dir: &Path,
    fetcher: &dyn Fetcher,
) -> Result<PathBuf, SourceError> {
    Ok(Cache::new(cache_dir)
        .fetch(url, fetcher, false)?
        .stored_path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchiveFormat {
    Raw,
    Gzip,
    Xz,
    Zstd,
    Zip,
}

impl ArchiveFormat {
    /// Decides by file name suffix.
    pub fn from_name(name: &str) -> Result<Self, SourceError> {
        let lower = name.to_ascii_lowercase();
        let format = if lower.ends_with(".gz") {
            ArchiveFormat::Gzip
        } else if lower.ends_with(".xz") {
            ArchiveFormat::Xz
        } else if lower.ends_with(".zst") {
            ArchiveFormat::Zstd
        } else if lower.ends_with(".zip") {
            ArchiveFormat::Zip
        } else if [".tar", ".tgz", ".bz2", ".7z", ".rar", ".lz4", ".lzma"]
            .iter()
            .any(|s| lower.ends_with(s))
        {
            return Err(SourceError::UnsupportedArchive(name.to_string()));
        } else {
            ArchiveFormat::Raw
        };
        Ok(format)
    }
}

/// Decompresses a single-image archive into `workspace` and returns the
/// image path. Raw images are returned unchanged.
pub fn extract_image(archive: &Path, workspace: &Path) -> Result<PathBuf, SourceError> {
    let name = archive
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    extract_named(archive, &name, workspace)
}

/// Like [`extract_image`], but takes the file name (which decides the
/// format) separately from the path holding the bytes.
pub fn extract_named(archive: &Path, name: &str, workspace: &Path) -> Result<PathBuf, SourceError> {
    let format = ArchiveFormat::from_name(name)?;
    if format == ArchiveFormat::Raw {
        return Ok(archive.to_path_buf());
    }
    if !archive.is_file() {
        return Err(SourceError::SourceNotFound(archive.display().to_string()));
    }
    fs::create_dir_all(workspace)?;
    let corrupt = |e: io::Error| SourceError::CorruptArchive {
        path: archive.display().to_string(),
        message: e.to_string(),
    };

    if format == ArchiveFormat::Zip {
        return extract_zip(archive, workspace);
    }
    let stem = match name.rfind('.') {
        Some(dot) if dot > 0 => &name[..dot],
        _ => "image",
    };
    let out_path = workspace.join(stem);
    let partial = workspace.join(format!("{stem}.part"));
    let input = io::BufReader::new(File::open(archive)?);
    let mut reader: Box<dyn Read> = match format {
        ArchiveFormat::Gzip => Box::new(flate2::read::MultiGzDecoder::new(input)),
        ArchiveFormat::Xz => Box::new(xz2::read::XzDecoder::new_multi_decoder(input)),
        ArchiveFormat::Zstd => Box::new(zstd::stream::read::Decoder::new(input).map_err(corrupt)?),
        ArchiveFormat::Raw | ArchiveFormat::Zip => unreachable!(),
    };
    let written = (|| {
        let mut out = BufWriter::new(File::create(&partial)?);
        io::copy(&mut reader, &mut out)?;
        out.into_inner().map_err(|e| e.into_error())?.sync_all()
    })();
    if let Err(e) = written {
        let _ = fs::remove_file(&partial);
        return Err(corrupt(e));
    }
    fs::rename(&partial, &out_path)?;
    Ok(out_path)
}

fn extract_zip(archive: &Path, workspace: &Path) -> Result<PathBuf, SourceError> {
    let corrupt = |message: String| SourceError::CorruptArchive {
        path: archive.display().to_string(),
        message,
    };
    let mut zip = zip::ZipArchive::new(File::open(archive)?).map_err(|e| corrupt(e.to_string()))?;
    let mut files = Vec::new();
    for i in 0..zip.len() {
        let member = zip.by_index(i).map_err(|e| corrupt(e.to_string()))?;
        if !member.is_dir() {
            files.push((i, member.name().to_string()));
        }
    }
    let images: Vec<_> = files
        .iter()
        .filter(|(_, n)| n.to_ascii_lowercase().ends_with(".img"))
        .cloned()
        .collect();
    let (index, member_name) = match (images.as_slice(), files.as_slice()) {
        ([one], _) => one.clone(),
        ([], [only]) => only.clone(),
        ([], _) => return Err(SourceError::NoImageInArchive(archive.display().to_string())),
        (many, _) => {
            return Err(SourceError::MultipleImagesInArchive(
                many.iter().map(|(_, n)| n.clone()).collect(),
            ))
        }
    };
    let base = Path::new(&member_name)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .filter(|n| !n.is_empty() && n != "..")
        .unwrap_or_else(|| "image".into());
    let out_path = workspace.join(&base);
    let partial = workspace.join(format!("{base}.part"));
    let mut member = zip.by_index(index).map_err(|e| corrupt(e.to_string()))?;
    let written = (|| {
        let mut out = BufWriter::new(File::create(&partial)?);
        io::copy(&mut member, &mut out)?;
        out.into_inner().map_err(|e| e.into_error())?.sync_all()
    })();
    if let Err(e) = written {
        let _ = fs::remove_file(&partial);
        return Err(corrupt(e.to_string()));
    }
    fs::rename(&partial, &out_path)?;
    Ok(out_path)
}

pub struct ResolveOptions<'a> {
    pub cache: Cache,
    pub fetcher: &'a dyn Fetcher,
    pub refresh: bool,
    pub offline: bool,
}

/// A source that is available as a local path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedSource {
    pub path: PathBuf,
    /// Set when the image came from (or through) the download cache.
    pub fetched: Option<(String, CacheEntry)>,
}

/// Makes the source available locally: downloads URLs into the cache and
/// unpacks archives into the cache. Block devices and raw files pass through.
pub fn resolve_source(
    spec: &SourceSpec,
    opts: &ResolveOptions<'_>,
) -> Result<ResolvedSource, SourceError> {
    match spec.kind {
        SourceKind::BlockDevice => Ok(ResolvedSource {
            path: PathBuf::from(&spec.locator),
            fetched: None,
        }),
        SourceKind::LocalFile => {
            let path = PathBuf::from(&spec.locator);
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            if ArchiveFormat::from_name(&name)? == ArchiveFormat::Raw {
                return Ok(ResolvedSource {
                    path,
                    fetched: None,
                });
            }
            let key = Cache::key(&format!("file://{}", spec.locator));
            let workspace = opts.cache.entry_dir(&key).join("extracted");
            let path = extract_named(&path, &name, &workspace)?;
            Ok(ResolvedSource {
                path,
                fetched: None,
            })
        }
        SourceKind::Url => {
            let url = spec.locator.as_str();
            let entry = if opts.offline {
                opts.cache
                    .lookup(url)
                    .ok_or_else(|| SourceError::OfflineMiss(url.to_string()))?
            } else {
                opts.cache.fetch(url, opts.fetcher, opts.refresh)?
            };
            let name = url_file_name(url);
            let workspace = opts.cache.entry_dir(&entry.key).join("extracted");
            let path = match ArchiveFormat::from_name(&name)? {
                ArchiveFormat::Raw => entry.stored_path.clone(),
                _ => match reuse_extracted(&workspace) {
                    Some(p) => p,
                    None => extract_named(&entry.stored_path, &name, &workspace)?,
                },
            };
            Ok(ResolvedSource {
                path,
                fetched: Some((url.to_string(), entry)),
            })
        }
    }
}

fn reuse_extracted(workspace: &Path) -> Option<PathBuf> {
    let mut done: Vec<PathBuf> = fs::read_dir(workspace)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_none_or(|e| e != "part"))
        .collect();
    if done.len() == 1 {
        done.pop()
    } else {
        None
    }
}

fn url_file_name(url: &str) -> String {
    let path = url.split(['?', '#']).next().unwrap_or(url);
    path.rsplit('/').next().unwrap_or("").to_string()
}

/// Stage 1 conclusion: put the source bytes at the destination. Nothing
/// happens for in-place builds or when source and destination coincide.
pub fn materialize_destination(
    plan: &ExecutionPlan,
    source: &Path,
    executor: &mut dyn Executor,
) -> Result<PathBuf, ExecError> {
    let dest = plan.destination.path.clone();
    if plan.inplace || same_file(source, &dest) {
        return Ok(dest);
    }
    if plan.destination.is_device {
        executor.perform(&ActionKind::DeviceWrite {
            src: source.to_path_buf(),
            device: dest.clone(),
        })?;
        return Ok(dest);
    }
    if dest.is_dir() {
        return Err(SourceError::DestinationIsDirectory(dest).into());
    }
    executor.perform(&ActionKind::CopyImage {
        src: source.to_path_buf(),
        dst: dest.clone(),
    })?;
    Ok(dest)
}

fn same_file(a: &Path, b: &Path) -> bool {
    if a == b {
        return true;
    }
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}
