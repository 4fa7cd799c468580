//! File access beneath datasets and checkpoints.
//!
//! Paths are dispatched by scheme; only plain paths and `file://` URIs are
//! served. [`AsyncWriter`] moves writes onto a background thread and reports
//! any failure at the next [`AsyncWriter::flush_barrier`].

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread::JoinHandle;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{0}: no such file")]
    NotFound(String),
    #[error("{0}: permission denied")]
    PermissionDenied(String),
    #[error("{path}: invalid UTF-8 on line {line}")]
    InvalidUtf8 { path: String, line: usize },
    #[error("unsupported uri scheme in `{0}`")]
    UnsupportedScheme(String),
    #[error("writer for {0} is closed")]
    WriterClosed(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl IoError {
    pub fn from_io(path: &str, e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::NotFound => IoError::NotFound(path.to_string()),
            io::ErrorKind::PermissionDenied => IoError::PermissionDenied(path.to_string()),
            _ => IoError::Io {
                path: path.to_string(),
                source: e,
            },
        }
    }
}

/// Maps a uri to a local path; the seam where other backends would plug in.
pub fn resolve(uri: &str) -> Result<PathBuf, IoError> {
    if let Some(rest) = uri.strip_prefix("file://") {
        return Ok(PathBuf::from(rest));
    }
    match uri.find("://") {
        Some(_) => Err(IoError::UnsupportedScheme(uri.to_string())),
        None => Ok(PathBuf::from(uri)),
    }
}

pub fn read_to_string(uri: &str) -> Result<String, IoError> {
    let path = resolve(uri)?;
    std::fs::read_to_string(&path).map_err(|e| IoError::from_io(uri, e))
}

pub fn read_bytes(uri: &str) -> Result<Vec<u8>, IoError> {
    let path = resolve(uri)?;
    std::fs::read(&path).map_err(|e| IoError::from_io(uri, e))
}

/// Writes a whole file synchronously.
pub fn write_bytes(uri: &str, bytes: &[u8]) -> Result<(), IoError> {
    let path = resolve(uri)?;
    ensure_parent(uri, &path)?;
    std::fs::write(&path, bytes).map_err(|e| IoError::from_io(uri, e))
}

/// Creates missing parent directories of an output path.
fn ensure_parent(uri: &str, path: &std::path::Path) -> Result<(), IoError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| IoError::from_io(uri, e)),
        _ => Ok(()),
    }
}

/// Sequential UTF-8 line reader; line terminators (`\n`, `\r\n`) are removed.
#[derive(Debug)]
pub struct LineReader {
    uri: String,
    inner: BufReader<File>,
    position: u64,
    line_no: usize,
    buf: Vec<u8>,
}

pub fn open_line_reader(uri: &str) -> Result<LineReader, IoError> {
    let path = resolve(uri)?;
    let file = File::open(&path).map_err(|e| IoError::from_io(uri, e))?;
    Ok(LineReader {
        uri: uri.to_string(),
        inner: BufReader::with_capacity(1 << 16, file),
        position: 0,
        line_no: 0,
        buf: Vec::new(),
    })
}

impl LineReader {
    pub fn uri(&self) -> &str {
        &self.uri
    }

    /// Byte offset of the next unread line.
    pub fn position(&self) -> u64 {
        self.position
    }

    /// 1-based number of the most recently returned line.
    pub fn line_number(&self) -> usize {
        self.line_no
    }

    pub fn reset(&mut self) -> Result<(), IoError> {
        self.inner
            .seek(SeekFrom::Start(0))
            .map_err(|e| IoError::from_io(&self.uri, e))?;
        self.position = 0;
        self.line_no = 0;
        Ok(())
    }

    pub fn next_line(&mut self) -> Option<Result<String, IoError>> {
        self.buf.clear();
        match self.inner.read_until(b'\n', &mut self.buf) {
            Ok(0) => None,
            Ok(n) => {
                self.position += n as u64;
                self.line_no += 1;
                if self.buf.last() == Some(&b'\n') {
                    self.buf.pop();
                    if self.buf.last() == Some(&b'\r') {
                        self.buf.pop();
                    }
                }
                Some(match std::str::from_utf8(&self.buf) {
                    Ok(s) => Ok(s.to_string()),
                    Err(_) => Err(IoError::InvalidUtf8 {
                        path: self.uri.clone(),
                        line: self.line_no,
                    }),
                })
            }
            Err(e) => Some(Err(IoError::from_io(&self.uri, e))),
        }
    }
}

impl Iterator for LineReader {
    type Item = Result<String, IoError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_line()
    }
}

/// Reads every line of a file.
pub fn read_lines(uri: &str) -> Result<Vec<String>, IoError> {
    open_line_reader(uri)?.collect()
}

enum Job {
    Write(Vec<u8>),
    Barrier(Sender<Result<(), IoError>>),
}

/// Append-only writer whose disk work runs on one background thread.
///
/// Payloads land in submission order. A failed write is remembered and
/// returned by the next barrier; later payloads are dropped until then.
#[derive(Debug)]
pub struct AsyncWriter {
    uri: String,
    tx: Option<Sender<Job>>,
    worker: Option<JoinHandle<()>>,
    pending: usize,
}

impl AsyncWriter {
    /// Creates (truncating) the target file.
    pub fn create(uri: &str) -> Result<Self, IoError> {
        let path = resolve(uri)?;
        ensure_parent(uri, &path)?;
        let file = File::create(&path).map_err(|e| IoError::from_io(uri, e))?;
        Ok(Self::spawn(uri, file))
    }

    /// Opens the target file for appending, creating it when missing.
    pub fn append(uri: &str) -> Result<Self, IoError> {
        let path = resolve(uri)?;
        ensure_parent(uri, &path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| IoError::from_io(uri, e))?;
        Ok(Self::spawn(uri, file))
    }

    fn spawn(uri: &str, file: File) -> Self {
        let (tx, rx) = mpsc::channel::<Job>();
        let name = uri.to_string();
        let worker = std::thread::Builder::new()
            .name("pgen-writer".into())
            .spawn(move || writer_loop(name, file, rx))
            .expect("spawn writer thread");
        Self {
            uri: uri.to_string(),
            tx: Some(tx),
            worker: Some(worker),
            pending: 0,
        }
    }

    pub fn uri(&self) -> &str {
        &self.uri
    }

    /// Payloads submitted since the last barrier.
    pub fn queue_depth(&self) -> usize {
        self.pending
    }

    /// Enqueues `payload` and returns immediately.
    pub fn submit_write(&mut self, payload: impl Into<Vec<u8>>) -> Result<(), IoError> {
        let tx = self.tx.as_ref().ok_or_else(|| IoError::WriterClosed(self.uri.clone()))?;
        tx.send(Job::Write(payload.into()))
            .map_err(|_| IoError::WriterClosed(self.uri.clone()))?;
        self.pending += 1;
        Ok(())
    }

    /// Blocks until every submitted payload is written and synced.
    pub fn flush_barrier(&mut self) -> Result<(), IoError> {
        let tx = self.tx.as_ref().ok_or_else(|| IoError::WriterClosed(self.uri.clone()))?;
        let (ack_tx, ack_rx) = mpsc::channel();
        tx.send(Job::Barrier(ack_tx))
            .map_err(|_| IoError::WriterClosed(self.uri.clone()))?;
        let result = ack_rx
            .recv()
            .unwrap_or_else(|_| Err(IoError::WriterClosed(self.uri.clone())));
        self.pending = 0;
        result
    }

    /// Flushes, then stops the worker. Later submits fail with `WriterClosed`.
    pub fn close(&mut self) -> Result<(), IoError> {
        if self.tx.is_none() {
            return Ok(());
        }
        let result = self.flush_barrier();
        self.tx = None;
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
        result
    }
}

impl Drop for AsyncWriter {
    fn drop(&mut self) {
        if let Err(e) = self.close() {
            log::error!("{e}");
        }
    }
}

fn writer_loop(uri: String, file: File, rx: Receiver<Job>) {
    let mut out = io::BufWriter::new(file);
    let mut failure: Option<io::Error> = None;
    for job in rx {
        match job {
            Job::Write(bytes) => {
                if failure.is_none() {
                    if let Err(e) = out.write_all(&bytes) {
                        failure = Some(e);
                    }
                }
            }
            Job::Barrier(ack) => {
                let result = match failure.take() {
                    Some(e) => Err(e),
                    None => out.flush().and_then(|_| out.get_ref().sync_data()),
                };
                let _ = ack.send(result.map_err(|e| IoError::from_io(&uri, e)));
            }
        }
    }
}

/// Whole-file writes (one file per job) on a background thread, used for
/// checkpoints. Same ordering and deferred-error contract as [`AsyncWriter`].
#[derive(Debug)]
pub struct AsyncFileWriter {
    tx: Option<Sender<FileJob>>,
    worker: Option<JoinHandle<()>>,
    pending: usize,
}

enum FileJob {
    Write(PathBuf, Vec<u8>),
    Barrier(Sender<Result<(), IoError>>),
}

impl Default for AsyncFileWriter {
    fn default() -> Self {
        Self::new()
    }
}

impl AsyncFileWriter {
    pub fn new() -> Self {
        let (tx, rx) = mpsc::channel::<FileJob>();
        let worker = std::thread::Builder::new()
            .name("pgen-files".into())
            .spawn(move || {
                let mut failure: Option<IoError> = None;
                for job in rx {
                    match job {
                        FileJob::Write(path, bytes) => {
                            if failure.is_none() {
                                if let Err(e) = write_synced(&path, &bytes) {
                                    failure = Some(IoError::from_io(&path.display().to_string(), e));
                                }
                            }
                        }
                        FileJob::Barrier(ack) => {
                            let _ = ack.send(failure.take().map_or(Ok(()), Err));
                        }
                    }
                }
            })
            .expect("spawn file writer thread");
        Self {
            tx: Some(tx),
            worker: Some(worker),
            pending: 0,
        }
    }

    pub fn queue_depth(&self) -> usize {
        self.pending
    }

    pub fn submit(&mut self, path: &Path, bytes: Vec<u8>) -> Result<(), IoError> {
        let closed = || IoError::WriterClosed(path.display().to_string());
        let tx = self.tx.as_ref().ok_or_else(closed)?;
        tx.send(FileJob::Write(path.to_path_buf(), bytes)).map_err(|_| closed())?;
        self.pending += 1;
        Ok(())
    }

    pub fn flush_barrier(&mut self) -> Result<(), IoError> {
        let closed = || IoError::WriterClosed("file writer".into());
        let tx = self.tx.as_ref().ok_or_else(closed)?;
        let (ack_tx, ack_rx) = mpsc::channel();
        tx.send(FileJob::Barrier(ack_tx)).map_err(|_| closed())?;
        let result = ack_rx.recv().unwrap_or_else(|_| Err(closed()));
        self.pending = 0;
        result
    }

    pub fn close(&mut self) -> Result<(), IoError> {
        if self.tx.is_none() {
            return Ok(());
        }
        let result = self.flush_barrier();
        self.tx = None;
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
        result
    }
}

impl Drop for AsyncFileWriter {
    fn drop(&mut self) {
        if let Err(e) = self.close() {
            log::error!("{e}");
        }
    }
}

fn write_synced(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut f = File::create(path)?;
    f.write_all(bytes)?;
    f.sync_data()
}
