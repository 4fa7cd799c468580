use std::fmt;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BatchError, BatchSource, Sampler};
use crate::data::{DataError, OnError, Sample, SampleStream};
use crate::pipeline::{collate, Batch, PipelineError, ProcessedSample, PAD};

/// Offline processing applied to each streamed sample.
pub type Processor = Arc<dyn Fn(Sample) -> Result<ProcessedSample, PipelineError> + Send + Sync>;

/// Fixed-capacity cache the sampler plans over.
#[derive(Debug)]
pub struct ShuffleBuffer {
    capacity: usize,
    slots: Vec<ProcessedSample>,
}

impl ShuffleBuffer {
    pub fn new(capacity: usize) -> Result<Self, BatchError> {
        if capacity == 0 {
            return Err(BatchError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            slots: Vec::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() >= self.capacity
    }

    /// Adds a sample; the caller checks `is_full` first.
    pub fn push(&mut self, s: ProcessedSample) {
        debug_assert!(!self.is_full());
        self.slots.push(s);
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.slots.iter().map(ProcessedSample::length).collect()
    }

    /// Removes the slots at `idx`, returned in `idx` order.
    pub fn take(&mut self, idx: &[usize]) -> Vec<ProcessedSample> {
        let mut order: Vec<usize> = (0..idx.len()).collect();
        order.sort_by(|&a, &b| idx[b].cmp(&idx[a]));
        let mut out: Vec<Option<ProcessedSample>> = vec![None; idx.len()];
        for o in order {
            out[o] = Some(self.slots.swap_remove(idx[o]));
        }
        out.into_iter().map(|s| s.expect("distinct indices")).collect()
    }

    pub fn clear(&mut self) {
        self.slots.clear();
    }
}

/// Keeps stream positions congruent to `worker` modulo `num_workers`.
pub struct Sharded {
    inner: Box<dyn SampleStream>,
    worker: usize,
    num_workers: usize,
    pos: usize,
}

impl fmt::Debug for Sharded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Sharded")
            .field("worker", &self.worker)
            .field("num_workers", &self.num_workers)
            .field("pos", &self.pos)
            .finish()
    }
}

pub fn shard_stream(inner: Box<dyn SampleStream>, worker: usize, num_workers: usize) -> Result<Sharded, BatchError> {
    if num_workers == 0 || worker >= num_workers {
        return Err(BatchError::BadShard { worker, num_workers });
    }
    Ok(Sharded {
        inner,
        worker,
        num_workers,
        pos: 0,
    })
}

impl SampleStream for Sharded {
    fn next_sample(&mut self) -> Result<Option<Sample>, DataError> {
        loop {
            let item = self.inner.next_sample();
            if matches!(item, Ok(None)) {
                return Ok(None);
            }
            let mine = self.pos % self.num_workers == self.worker;
            self.pos += 1;
            // failures on positions owned by other workers are theirs to report
            if mine {
                return item;
            }
        }
    }

    fn reset(&mut self) -> Result<(), DataError> {
        self.pos = 0;
        self.inner.reset()
    }
}

/// Buffered loader over an unbounded stream.
///
/// The buffer is topped up to capacity, the sampler plans over the cached
/// lengths, one planned batch is drawn at random and emitted, and the freed
/// slots are refilled. After the stream ends the buffer drains.
pub struct StreamingLoader {
    stream: Box<dyn SampleStream>,
    process: Processor,
    buffer: ShuffleBuffer,
    sampler: Box<dyn Sampler>,
    on_error: OnError,
    seed: u64,
    rng: ChaCha8Rng,
    ended: bool,
    skipped: usize,
}

impl fmt::Debug for StreamingLoader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StreamingLoader")
            .field("buffer", &self.buffer.len())
            .field("capacity", &self.buffer.capacity())
            .field("sampler", &self.sampler)
            .field("ended", &self.ended)
            .finish()
    }
}

impl StreamingLoader {
    pub fn new(
        stream: Box<dyn SampleStream>,
        process: Processor,
        capacity: usize,
        sampler: Box<dyn Sampler>,
        on_error: OnError,
        seed: u64,
    ) -> Result<Self, BatchError> {
        Ok(Self {
            stream,
            process,
            buffer: ShuffleBuffer::new(capacity)?,
            sampler,
            on_error,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ended: false,
            skipped: 0,
        })
    }

    /// Samples dropped under the skip policy so far.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    fn handle(&mut self, err: BatchError) -> Result<(), BatchError> {
        match self.on_error {
            OnError::Abort => Err(err),
            OnError::Skip => {
                log::warn!("skipping sample: {err}");
                self.skipped += 1;
                Ok(())
            }
        }
    }

    fn fill(&mut self) -> Result<(), BatchError> {
        while !self.ended && !self.buffer.is_full() {
            match self.stream.next_sample() {
                Ok(Some(sample)) => match (self.process)(sample) {
                    Ok(p) => self.buffer.push(p),
                    Err(e) => self.handle(e.into())?,
                },
                Ok(None) => self.ended = true,
                Err(e @ DataError::Parse { .. }) | Err(e @ DataError::Io(crate::io::IoError::InvalidUtf8 { .. })) => {
                    self.handle(e.into())?
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }
}

impl BatchSource for StreamingLoader {
    fn next_batch(&mut self) -> Result<Option<Batch>, BatchError> {
        self.fill()?;
        if self.buffer.is_empty() {
            return Ok(None);
        }
        let plan = self.sampler.plan(&self.buffer.lengths(), self.rng.next_u64())?;
        let pick = self.rng.gen_range(0..plan.len());
        let picked = self.buffer.take(&plan[pick]);
        Ok(Some(collate(picked, PAD)?))
    }

    fn start_epoch(&mut self, epoch: u64) -> Result<(), BatchError> {
        self.stream.reset()?;
        self.buffer.clear();
        self.ended = false;
        self.rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(epoch));
        Ok(())
    }
}

type Message = Result<Option<Batch>, BatchError>;

/// Runs a loader's epoch on a background thread, handing batches over a
/// queue of depth 2.
pub struct PrefetchLoader<L: BatchSource + 'static> {
    idle: Option<L>,
    running: Option<(Receiver<Message>, JoinHandle<L>)>,
}

impl<L: BatchSource + 'static> fmt::Debug for PrefetchLoader<L> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PrefetchLoader")
            .field("running", &self.running.is_some())
            .finish()
    }
}

pub const PREFETCH_DEPTH: usize = 2;

impl<L: BatchSource + 'static> PrefetchLoader<L> {
    pub fn new(loader: L) -> Self {
        let mut p = Self {
            idle: Some(loader),
            running: None,
        };
        p.spawn();
        p
    }

    fn spawn(&mut self) {
        let Some(mut loader) = self.idle.take() else { return };
        let (tx, rx) = sync_channel::<Message>(PREFETCH_DEPTH);
        let handle = std::thread::Builder::new()
            .name("pgen-prefetch".into())
            .spawn(move || {
                loop {
                    let item = loader.next_batch();
                    let last = !matches!(item, Ok(Some(_)));
                    if tx.send(item).is_err() || last {
                        break;
                    }
                }
                loader
            })
            .expect("spawn prefetch thread");
        self.running = Some((rx, handle));
    }

    fn stop(&mut self) -> Result<(), BatchError> {
        if let Some((rx, handle)) = self.running.take() {
            drop(rx);
            self.idle = Some(handle.join().map_err(|_| BatchError::WorkerPanicked)?);
        }
        Ok(())
    }
}

impl<L: BatchSource + 'static> BatchSource for PrefetchLoader<L> {
    fn next_batch(&mut self) -> Result<Option<Batch>, BatchError> {
        let Some((rx, _)) = &self.running else {
            return Ok(None);
        };
        let item = rx.recv().map_err(|_| BatchError::WorkerPanicked)?;
        if !matches!(item, Ok(Some(_))) {
            self.stop()?;
        }
        item
    }

    fn start_epoch(&mut self, epoch: u64) -> Result<(), BatchError> {
        self.stop()?;
        let loader = self.idle.as_mut().ok_or(BatchError::WorkerPanicked)?;
        loader.start_epoch(epoch)?;
        self.spawn();
        Ok(())
    }
}

impl<L: BatchSource + 'static> Drop for PrefetchLoader<L> {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}
