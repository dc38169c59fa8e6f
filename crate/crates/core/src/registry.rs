//! The operator registry: a directory tree of deployable operator packages.
//!
//! Layout: `<root>/<name>/<version>/manifest.json` plus
//! `<root>/<name>/<version>/package/`. The manifest is a canonical text
//! document. Nothing is cached in memory, so any process pointed at the
//! same root sees the same registry.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canonical;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PACKAGE_DIR: &str = "package";
const LOCK_FILE: &str = ".publish.lock";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("operator `{0}` not found")]
    NotFound(String),
    #[error("{name}@{version} already published with a different checksum")]
    Conflict { name: String, version: String },
    #[error("package {name}@{version} does not match its checksum")]
    CorruptPackage { name: String, version: String },
    #[error("invalid descriptor: {0}")]
    Invalid(String),
    #[error("timed out waiting for the registry lock")]
    LockTimeout,
    #[error("malformed manifest {path}: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Runtime {
    /// Launch `command` as a child process.
    Process,
}

/// A published, deployable operator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorDescriptor {
    pub name: String,
    pub version: String,
    pub runtime: Runtime,
    /// argv of the worker; run with the package directory as cwd.
    pub command: Vec<String>,
    #[serde(default)]
    pub config: BTreeMap<String, String>,
    /// Hex SHA-256 over the package directory.
    pub checksum: String,
    /// Epoch milliseconds.
    pub created_at: u64,
}

impl OperatorDescriptor {
    pub fn tag(&self) -> String {
        format!("{}@{}", self.name, self.version)
    }

    /// Equality ignoring the publish time.
    pub fn same_content(&self, other: &Self) -> bool {
        OperatorDescriptor { created_at: 0, ..self.clone() } == OperatorDescriptor { created_at: 0, ..other.clone() }
    }
}

/// What a caller supplies to publish; checksum and time are filled in.
#[derive(Debug, Clone)]
pub struct NewOperator {
    pub name: String,
    pub version: String,
    pub command: Vec<String>,
    pub config: BTreeMap<String, String>,
}

impl NewOperator {
    pub fn new(name: &str, version: &str, command: Vec<String>) -> Self {
        NewOperator { name: name.into(), version: version.into(), command, config: BTreeMap::new() }
    }
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.len() <= 48 && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

fn valid_version(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 64
        && !s.starts_with('.')
        && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'.' || b == b'-' || b == b'_' || b == b'+')
}

/// Orders versions by dot-separated components, numerically where both
/// sides are numbers. A leading `v` is ignored.
pub fn compare_versions(a: &str, b: &str) -> Ordering {
    let strip = |s: &str| s.strip_prefix('v').unwrap_or(s).to_owned();
    let (a, b) = (strip(a), strip(b));
    let mut xs = a.split(['.', '-', '+']);
    let mut ys = b.split(['.', '-', '+']);
    loop {
        match (xs.next(), ys.next()) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(x), Some(y)) => {
                let ord = match (x.parse::<u64>(), y.parse::<u64>()) {
                    (Ok(p), Ok(q)) => p.cmp(&q),
                    (Ok(_), Err(_)) => Ordering::Greater,
                    (Err(_), Ok(_)) => Ordering::Less,
                    (Err(_), Err(_)) => x.cmp(y),
                };
                if ord != Ordering::Equal {
                    return ord;
                }
            }
        }
    }
}

fn collect_files(dir: &Path, rel: &str, out: &mut Vec<(String, PathBuf)>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let rel_path = if rel.is_empty() { name } else { format!("{rel}/{name}") };
        let ty = entry.file_type()?;
        if ty.is_dir() {
            collect_files(&entry.path(), &rel_path, out)?;
        } else {
            out.push((rel_path, entry.path()));
        }
    }
    Ok(())
}

/// Hex SHA-256 over every file's relative path and contents, in path order.
pub fn package_checksum(dir: &Path) -> io::Result<String> {
    let mut files = Vec::new();
    collect_files(dir, "", &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, path) in files {
        let data = fs::read(&path)?;
        h.update((rel.len() as u64).to_le_bytes());
        h.update(rel.as_bytes());
        h.update((data.len() as u64).to_le_bytes());
        h.update(&data);
    }
    Ok(hex::encode(h.finalize()))
}

fn copy_dir(src: &Path, dst: &Path) -> io::Result<()> {
    fs::create_dir_all(dst)?;
    for entry in fs::read_dir(src)? {
        let entry = entry?;
        let target = dst.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

struct StoreLock {
    path: PathBuf,
}

impl StoreLock {
    fn acquire(root: &Path, timeout: Duration) -> Result<Self, RegistryError> {
        let path = root.join(LOCK_FILE);
        let deadline = Instant::now() + timeout;
        loop {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(_) => return Ok(StoreLock { path }),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    if Instant::now() >= deadline {
                        return Err(RegistryError::LockTimeout);
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
}

impl Registry {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, RegistryError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Registry { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn version_dir(&self, name: &str, version: &str) -> PathBuf {
        self.root.join(name).join(version)
    }

    fn read_manifest(path: &Path) -> Result<OperatorDescriptor, RegistryError> {
        let bytes = fs::read(path)?;
        canonical::from_canonical(&bytes).map_err(|source| RegistryError::Manifest { path: path.to_owned(), source })
    }

    /// Copies `package_dir` into the store and records its manifest.
    /// Republishing identical content is a no-op returning the same tag.
    pub fn publish(&self, op: &NewOperator, package_dir: &Path) -> Result<String, RegistryError> {
        if !valid_name(&op.name) {
            return Err(RegistryError::Invalid(format!("operator name `{}`", op.name)));
        }
        if !valid_version(&op.version) {
            return Err(RegistryError::Invalid(format!("version `{}`", op.version)));
        }
        if op.command.is_empty() || op.command[0].is_empty() {
            return Err(RegistryError::Invalid("command must not be empty".into()));
        }
        let checksum = package_checksum(package_dir)?;
        let _lock = StoreLock::acquire(&self.root, Duration::from_secs(10))?;
        let dir = self.version_dir(&op.name, &op.version);
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            let existing = Self::read_manifest(&manifest_path)?;
            if existing.checksum == checksum && existing.command == op.command && existing.config == op.config {
                return Ok(existing.tag());
            }
            return Err(RegistryError::Conflict { name: op.name.clone(), version: op.version.clone() });
        }
        let descriptor = OperatorDescriptor {
            name: op.name.clone(),
            version: op.version.clone(),
            runtime: Runtime::Process,
            command: op.command.clone(),
            config: op.config.clone(),
            checksum,
            created_at: SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_millis() as u64,
        };
        // Stage next to the final location, then rename into place.
        let staging = self.root.join(&op.name).join(format!(".staging-{}", op.version));
        let _ = fs::remove_dir_all(&staging);
        copy_dir(package_dir, &staging.join(PACKAGE_DIR))?;
        let doc = canonical::to_canonical(&descriptor).expect("descriptor serializes");
        fs::write(staging.join(MANIFEST_FILE), doc)?;
        let _ = fs::remove_dir_all(&dir);
        fs::rename(&staging, &dir)?;
        Ok(descriptor.tag())
    }

    fn versions_of(&self, name: &str) -> Result<Vec<OperatorDescriptor>, RegistryError> {
        let dir = self.root.join(name);
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut out = Vec::new();
        for entry in entries {
            let entry = entry?;
            if entry.file_name().to_string_lossy().starts_with('.') {
                continue;
            }
            let manifest = entry.path().join(MANIFEST_FILE);
            if manifest.is_file() {
                out.push(Self::read_manifest(&manifest)?);
            }
        }
        out.sort_by(|a, b| compare_versions(&a.version, &b.version).then(a.created_at.cmp(&b.created_at)));
        Ok(out)
    }

    /// Returns the descriptor and its package directory, checksum-verified.
    /// Without a version, the highest version wins.
    pub fn fetch(&self, name: &str, version: Option<&str>) -> Result<(OperatorDescriptor, PathBuf), RegistryError> {
        if !valid_name(name) {
            return Err(RegistryError::NotFound(name.to_owned()));
        }
        let descriptor = match version {
            Some(v) => {
                if !valid_version(v) {
                    return Err(RegistryError::NotFound(format!("{name}@{v}")));
                }
                let manifest = self.version_dir(name, v).join(MANIFEST_FILE);
                if !manifest.is_file() {
                    return Err(RegistryError::NotFound(format!("{name}@{v}")));
                }
                Self::read_manifest(&manifest)?
            }
            None => self.versions_of(name)?.pop().ok_or_else(|| RegistryError::NotFound(name.to_owned()))?,
        };
        let package = self.version_dir(&descriptor.name, &descriptor.version).join(PACKAGE_DIR);
        if package_checksum(&package)? != descriptor.checksum {
            return Err(RegistryError::CorruptPackage { name: descriptor.name, version: descriptor.version });
        }
        Ok((descriptor, package))
    }

    /// All descriptors, by name then version.
    pub fn list(&self) -> Result<Vec<OperatorDescriptor>, RegistryError> {
        let mut names = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.file_type()?.is_dir() && valid_name(&name) {
                names.push(name);
            }
        }
        names.sort();
        let mut out = Vec::new();
        for name in names {
            out.extend(self.versions_of(&name)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn package(files: &[(&str, &str)]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (name, body) in files {
            let p = dir.path().join(name);
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            fs::write(p, body).unwrap();
        }
        dir
    }

    fn op(name: &str, version: &str) -> NewOperator {
        NewOperator::new(name, version, vec!["/bin/true".into()])
    }

    #[test]
    fn publish_then_fetch_round_trips() {
        let root = tempfile::tempdir().unwrap();
        let reg = Registry::open(root.path()).unwrap();
        let pkg = package(&[("run.sh", "echo hi"), ("lib/a.txt", "a")]);
        let tag = reg.publish(&op("forward-op", "1.0.0"), pkg.path()).unwrap();
        assert_eq!(tag, "forward-op@1.0.0");
        let (d, dir) = reg.fetch("forward-op", Some("1.0.0")).unwrap();
        assert_eq!(d.command, vec!["/bin/true".to_string()]);
        assert_eq!(fs::read_to_string(dir.join("lib/a.txt")).unwrap(), "a");
        assert_eq!(d.checksum, package_checksum(pkg.path()).unwrap());
    }

    #[test]
    fn republish_identical_is_idempotent_and_modified_conflicts() {
        let root = tempfile::tempdir().unwrap();
        let reg = Registry::open(root.path()).unwrap();
        let pkg = package(&[("f", "1")]);
        let t1 = reg.publish(&op("x", "1"), pkg.path()).unwrap();
        let t2 = reg.publish(&op("x", "1"), pkg.path()).unwrap();
        assert_eq!(t1, t2);
        fs::write(pkg.path().join("f"), "2").unwrap();
        assert!(matches!(reg.publish(&op("x", "1"), pkg.path()), Err(RegistryError::Conflict { .. })));
    }

    #[test]
    fn fetch_latest_and_missing() {
        let root = tempfile::tempdir().unwrap();
        let reg = Registry::open(root.path()).unwrap();
        assert!(matches!(reg.fetch("nope", None), Err(RegistryError::NotFound(_))));
        let pkg = package(&[("f", "1")]);
        reg.publish(&op("x", "1.2.0"), pkg.path()).unwrap();
        reg.publish(&op("x", "1.10.0"), pkg.path()).unwrap();
        reg.publish(&op("x", "1.9.0"), pkg.path()).unwrap();
        assert_eq!(reg.fetch("x", None).unwrap().0.version, "1.10.0");
        assert!(matches!(reg.fetch("x", Some("2")), Err(RegistryError::NotFound(_))));
    }

    #[test]
    fn tampered_package_is_detected() {
        let root = tempfile::tempdir().unwrap();
        let reg = Registry::open(root.path()).unwrap();
        let pkg = package(&[("model.bin", "abcdef")]);
        reg.publish(&op("x", "1"), pkg.path()).unwrap();
        let stored = root.path().join("x/1/package/model.bin");
        let mut bytes = fs::read(&stored).unwrap();
        bytes[2] ^= 0x01;
        fs::write(&stored, &bytes).unwrap();
        // Independent re-hash agrees the content moved.
        assert_ne!(package_checksum(&root.path().join("x/1/package")).unwrap(), package_checksum(pkg.path()).unwrap());
        assert!(matches!(reg.fetch("x", Some("1")), Err(RegistryError::CorruptPackage { .. })));
    }

    #[test]
    fn list_orders_by_name_then_version() {
        let root = tempfile::tempdir().unwrap();
        let reg = Registry::open(root.path()).unwrap();
        assert!(reg.list().unwrap().is_empty());
        let pkg = package(&[("f", "1")]);
        reg.publish(&op("zeta", "1"), pkg.path()).unwrap();
        reg.publish(&op("alpha", "2"), pkg.path()).unwrap();
        reg.publish(&op("alpha", "10"), pkg.path()).unwrap();
        let tags: Vec<_> = reg.list().unwrap().iter().map(|d| d.tag()).collect();
        assert_eq!(tags, ["alpha@2", "alpha@10", "zeta@1"]);
    }

    #[test]
    fn rejects_bad_input() {
        let root = tempfile::tempdir().unwrap();
        let reg = Registry::open(root.path()).unwrap();
        let pkg = package(&[("f", "1")]);
        assert!(matches!(reg.publish(&op("Bad", "1"), pkg.path()), Err(RegistryError::Invalid(_))));
        assert!(matches!(reg.publish(&op("ok", "../1"), pkg.path()), Err(RegistryError::Invalid(_))));
        let empty = NewOperator::new("ok", "1", vec![]);
        assert!(matches!(reg.publish(&empty, pkg.path()), Err(RegistryError::Invalid(_))));
    }

    #[test]
    fn version_order() {
        assert_eq!(compare_versions("1.10", "1.9"), Ordering::Greater);
        assert_eq!(compare_versions("v2", "1.0"), Ordering::Greater);
        assert_eq!(compare_versions("1.0", "1.0.1"), Ordering::Less);
        assert_eq!(compare_versions("1.0-beta", "1.0-alpha"), Ordering::Greater);
    }
}
