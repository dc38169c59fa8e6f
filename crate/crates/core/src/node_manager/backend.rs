//! Launching worker processes.

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::thread;

use crate::registry::OperatorDescriptor;

const STDERR_TAIL: usize = 16 * 1024;

/// Starts operator workers. The process backend is the only built-in one;
/// a container runtime would implement the same single method.
pub trait Backend: Send + Sync + 'static {
    fn start(
        &self,
        descriptor: &OperatorDescriptor,
        package_dir: &Path,
        env: &BTreeMap<&'static str, String>,
    ) -> io::Result<Box<dyn WorkerProcess>>;
}

/// A running worker as seen by the node manager.
pub trait WorkerProcess: Send {
    fn pid(&self) -> u32;
    /// `Some(exit code)` once the worker has exited; the code is `None` when
    /// it was killed by a signal.
    fn try_wait(&mut self) -> io::Result<Option<Option<i32>>>;
    fn wait(&mut self) -> io::Result<Option<i32>>;
    /// Hard kill (SIGKILL on Unix).
    fn kill(&mut self) -> io::Result<()>;
    /// The last bytes the worker wrote to stderr.
    fn stderr_tail(&self) -> String;
}

#[derive(Debug, Default, Clone)]
pub struct ProcessBackend;

fn resolve_program(program: &str, package_dir: &Path) -> PathBuf {
    let p = Path::new(program);
    if p.is_relative() && program.contains('/') {
        package_dir.join(p)
    } else {
        p.to_owned()
    }
}

impl Backend for ProcessBackend {
    fn start(
        &self,
        descriptor: &OperatorDescriptor,
        package_dir: &Path,
        env: &BTreeMap<&'static str, String>,
    ) -> io::Result<Box<dyn WorkerProcess>> {
        let (program, args) = descriptor
            .command
            .split_first()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "empty command"))?;
        let mut child = Command::new(resolve_program(program, package_dir))
            .args(args)
            .current_dir(package_dir)
            .envs(env.iter().map(|(k, v)| (*k, v.as_str())))
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()?;
        let tail = Arc::new(Mutex::new(VecDeque::with_capacity(STDERR_TAIL)));
        if let Some(mut stderr) = child.stderr.take() {
            let tail = tail.clone();
            thread::Builder::new().name(format!("stderr-{}", child.id())).spawn(move || {
                let mut buf = [0u8; 4096];
                while let Ok(n) = stderr.read(&mut buf) {
                    if n == 0 {
                        break;
                    }
                    let mut t = tail.lock().unwrap_or_else(|p| p.into_inner());
                    t.extend(&buf[..n]);
                    let excess = t.len().saturating_sub(STDERR_TAIL);
                    t.drain(..excess);
                }
            })?;
        }
        Ok(Box::new(ChildProcess { child, tail }))
    }
}

struct ChildProcess {
    child: Child,
    tail: Arc<Mutex<VecDeque<u8>>>,
}

impl WorkerProcess for ChildProcess {
    fn pid(&self) -> u32 {
        self.child.id()
    }

    fn try_wait(&mut self) -> io::Result<Option<Option<i32>>> {
        Ok(self.child.try_wait()?.map(|s| s.code()))
    }

    fn wait(&mut self) -> io::Result<Option<i32>> {
        Ok(self.child.wait()?.code())
    }

    fn kill(&mut self) -> io::Result<()> {
        match self.child.kill() {
            // Already exited.
            Err(e) if e.kind() == io::ErrorKind::InvalidInput => Ok(()),
            other => other,
        }
    }

    fn stderr_tail(&self) -> String {
        let t = self.tail.lock().unwrap_or_else(|p| p.into_inner());
        let (a, b) = t.as_slices();
        let mut bytes = a.to_vec();
        bytes.extend_from_slice(b);
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

impl Drop for ChildProcess {
    fn drop(&mut self) {
        if let Ok(None) = self.child.try_wait() {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}
