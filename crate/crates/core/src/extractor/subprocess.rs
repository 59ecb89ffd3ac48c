//! FEX0: framed binary protocol for external extractors over stdin/stdout.
//!
//! All integers are `u32` little-endian, reals are `f32` little-endian.
//!
//! ```text
//! handshake  process -> host   "FEX0" dim
//! request    host -> process   "IMG0" H W C  H*W*C reals
//! response   process -> host   "VEC0" dim reals
//! shutdown   host -> process   "END0"
//! ```

use std::io::{Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use super::{Extractor, ExtractorDescriptor, ExtractorKind};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::types::FeatureVector;

pub const DEFAULT_IO_TIMEOUT: Duration = Duration::from_secs(30);

const HANDSHAKE: &[u8; 4] = b"FEX0";
const REQUEST: &[u8; 4] = b"IMG0";
const RESPONSE: &[u8; 4] = b"VEC0";
const SHUTDOWN: &[u8; 4] = b"END0";

/// One running extractor process, driven in strict request/response lockstep.
pub struct Fex0Process {
    child: Child,
    stdin: Option<ChildStdin>,
    chunks: Receiver<Vec<u8>>,
    pending: Vec<u8>,
    timeout: Duration,
    dim: usize,
    /// Set after a protocol failure; the process is then killed, not asked to stop.
    broken: bool,
}

impl Fex0Process {
    /// Launches `command` through `sh -c` and waits for the handshake.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Extractor(format!("cannot launch `{command}`: {e}")))?;
        let stdin = child.stdin.take();
        let mut stdout = child.stdout.take().expect("stdout is piped");

        // stdout is drained on a helper thread so every read can time out.
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut buf = vec![0u8; 1 << 16];
            loop {
                match stdout.read(&mut buf) {
                    Ok(0) | Err(_) => break,
                    Ok(n) => {
                        if tx.send(buf[..n].to_vec()).is_err() {
                            break;
                        }
                    }
                }
            }
        });

        let mut proc = Self {
            child,
            stdin,
            chunks: rx,
            pending: Vec::new(),
            timeout,
            dim: 0,
            broken: true,
        };
        let header = proc
            .read_exact(8)
            .map_err(|e| Error::Extractor(format!("handshake failed: {e}")))?;
        if &header[..4] != HANDSHAKE {
            return Err(Error::Extractor(format!(
                "handshake failed: bad magic {:?}",
                String::from_utf8_lossy(&header[..4])
            )));
        }
        let dim = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(Error::Extractor("handshake failed: dim is 0".into()));
        }
        proc.dim = dim;
        proc.broken = false;
        Ok(proc)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn read_exact(&mut self, n: usize) -> std::result::Result<Vec<u8>, String> {
        let deadline = Instant::now() + self.timeout;
        while self.pending.len() < n {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.chunks.recv_timeout(left) {
                Ok(chunk) => self.pending.extend_from_slice(&chunk),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(format!(
                        "timed out after {:?}: expected {n} bytes, received {}",
                        self.timeout,
                        self.pending.len()
                    ))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(format!(
                        "premature EOF: expected {n} bytes, received {}",
                        self.pending.len()
                    ))
                }
            }
        }
        let rest = self.pending.split_off(n);
        Ok(std::mem::replace(&mut self.pending, rest))
    }

    pub fn extract(&mut self, img: &ImageTensor) -> Result<FeatureVector> {
        if self.broken {
            return Err(Error::Extractor("extractor is unusable after an earlier protocol error".into()));
        }
        let result = self.exchange(img);
        self.broken = result.is_err();
        result
    }

    fn exchange(&mut self, img: &ImageTensor) -> Result<FeatureVector> {
        let mut frame = Vec::with_capacity(16 + img.data().len() * 4);
        frame.extend_from_slice(REQUEST);
        for v in [img.height(), img.width(), img.channels()] {
            frame.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in img.data() {
            frame.extend_from_slice(&v.to_le_bytes());
        }
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Extractor("extractor stdin closed".into()))?;
        stdin
            .write_all(&frame)
            .and_then(|_| stdin.flush())
            .map_err(|e| Error::Extractor(format!("broken pipe writing request: {e}")))?;

        let expected = 4 + 4 * self.dim;
        let resp = self
            .read_exact(expected)
            .map_err(|e| Error::Extractor(format!("protocol error reading response: {e}")))?;
        if &resp[..4] != RESPONSE {
            return Err(Error::Extractor(format!(
                "protocol error: expected VEC0, got {:?}",
                String::from_utf8_lossy(&resp[..4])
            )));
        }
        let values = resp[4..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FeatureVector::new(values).map_err(|e| Error::Extractor(format!("protocol error: {e}")))
    }

    /// Sends END0 and waits for the process to exit.
    pub fn shutdown(mut self) -> Result<()> {
        self.close()
    }

    fn close(&mut self) -> Result<()> {
        if self.broken {
            self.stdin.take();
            let _ = self.child.kill();
            let _ = self.child.wait();
            return Ok(());
        }
        if let Some(mut stdin) = self.stdin.take() {
            let _ = stdin.write_all(SHUTDOWN).and_then(|_| stdin.flush());
        }
        let deadline = Instant::now() + self.timeout;
        loop {
            match self.child.try_wait() {
                Ok(Some(status)) if status.success() => return Ok(()),
                Ok(Some(status)) => {
                    return Err(Error::Extractor(format!("extractor exited with {status}")))
                }
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(5)),
                Ok(None) => {
                    let _ = self.child.kill();
                    let _ = self.child.wait();
                    return Err(Error::Extractor("extractor did not exit after END0".into()));
                }
                Err(e) => return Err(Error::Extractor(e.to_string())),
            }
        }
    }
}

impl Drop for Fex0Process {
    fn drop(&mut self) {
        if self.stdin.is_some() {
            let _ = self.close();
        }
    }
}

/// Pool of FEX0 processes, one per worker.
pub struct SubprocessExtractor {
    descriptor: ExtractorDescriptor,
    workers: Vec<Mutex<Fex0Process>>,
    next: AtomicUsize,
}

impl SubprocessExtractor {
    pub fn spawn(command: &str, workers: usize, timeout: Duration) -> Result<Self> {
        let mut procs = Vec::with_capacity(workers.max(1));
        for _ in 0..workers.max(1) {
            procs.push(Fex0Process::spawn(command, timeout)?);
        }
        let dim = procs[0].dim();
        if let Some(p) = procs.iter().find(|p| p.dim() != dim) {
            return Err(Error::Extractor(format!(
                "workers disagree on dim: {dim} vs {}",
                p.dim()
            )));
        }
        Ok(Self {
            descriptor: ExtractorDescriptor {
                name: format!("subprocess:{command}"),
                dim,
                kind: ExtractorKind::Subprocess(command.to_string()),
            },
            workers: procs.into_iter().map(Mutex::new).collect(),
            next: AtomicUsize::new(0),
        })
    }
}

impl Extractor for SubprocessExtractor {
    fn descriptor(&self) -> &ExtractorDescriptor {
        &self.descriptor
    }

    fn extract(&self, img: &ImageTensor) -> Result<FeatureVector> {
        for w in &self.workers {
            if let Ok(mut p) = w.try_lock() {
                return p.extract(img);
            }
        }
        let i = self.next.fetch_add(1, Ordering::Relaxed) % self.workers.len();
        let mut p = self.workers[i]
            .lock()
            .map_err(|_| Error::Extractor("extractor worker poisoned".into()))?;
        p.extract(img)
    }
}

/// Serves `extractor` over FEX0 until END0 or EOF.
pub fn serve_fex0(extractor: &dyn Extractor, input: &mut impl Read, output: &mut impl Write) -> Result<()> {
    let io = |e: std::io::Error| Error::Extractor(format!("serve: {e}"));
    let read_u32 = |input: &mut dyn Read| -> Result<u32> {
        let mut b = [0u8; 4];
        input.read_exact(&mut b).map_err(io)?;
        Ok(u32::from_le_bytes(b))
    };

    output.write_all(HANDSHAKE).map_err(io)?;
    output.write_all(&(extractor.dim() as u32).to_le_bytes()).map_err(io)?;
    output.flush().map_err(io)?;

    loop {
        let mut tag = [0u8; 4];
        match input.read_exact(&mut tag) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(io(e)),
        }
        match &tag {
            SHUTDOWN => return Ok(()),
            REQUEST => {
                let h = read_u32(input)? as usize;
                let w = read_u32(input)? as usize;
                let c = read_u32(input)? as usize;
                let mut raw = vec![0u8; h * w * c * 4];
                input.read_exact(&mut raw).map_err(io)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                let img = ImageTensor::new(h, w, c, data)?;
                let f = extractor.extract(&img)?;
                output.write_all(RESPONSE).map_err(io)?;
                for v in f.values() {
                    output.write_all(&v.to_le_bytes()).map_err(io)?;
                }
                output.flush().map_err(io)?;
            }
            other => {
                return Err(Error::Extractor(format!(
                    "unexpected frame tag {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        }
    }
}
