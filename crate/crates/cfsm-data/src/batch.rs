//! Batch assembly: decodes manifest records into `B×C×H×W` tensors in
//! [−1, 1], with an optional background prefetch thread.

use std::sync::mpsc;
use std::thread;

use ndarray::Array4;

use crate::error::{DataError, Result};
use crate::imageio::load_png;
use crate::manifest::Manifest;

/// A mini-batch of normalized images with their labels (−1 for unlabeled).
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Array4<f32>,
    pub labels: Vec<i64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Loads the records at `indices`, mapping 8-bit pixels to [−1, 1] via
/// `x·2 − 1`. Errors on out-of-range indices, size mismatches, or missing
/// files (naming the path).
pub fn load_batch(manifest: &Manifest, indices: &[usize]) -> Result<Batch> {
    if indices.is_empty() {
        return Err(DataError::InvalidArgument(
            "load_batch requires at least one index".into(),
        ));
    }
    let size = manifest.image_size;
    let mut images = Array4::<f32>::zeros((indices.len(), 3, size, size));
    let mut labels = Vec::with_capacity(indices.len());
    for (b, &idx) in indices.iter().enumerate() {
        let record = manifest.records.get(idx).ok_or_else(|| {
            DataError::InvalidArgument(format!(
                "index {idx} out of range for {} records",
                manifest.records.len()
            ))
        })?;
        let img = load_png(&manifest.resolve(record))?;
        let (h, w, _) = img.dim();
        if h != size || w != size {
            return Err(DataError::Manifest {
                path: manifest.resolve(record),
                detail: format!("image is {h}×{w}, manifest says {size}×{size}"),
            });
        }
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    images[[b, c, y, x]] = img[[y, x, c]] * 2.0 - 1.0;
                }
            }
        }
        labels.push(record.identity_id);
    }
    Ok(Batch { images, labels })
}

/// Background batch loader. Feeds a bounded channel from a worker thread;
/// `next()` yields batches in the exact order of the submitted index lists,
/// so outputs are bit-identical to calling [`load_batch`] sequentially —
/// prefetching only overlaps the decode I/O with compute.
pub struct Prefetcher {
    rx: Option<mpsc::Receiver<Result<Batch>>>,
    handle: Option<thread::JoinHandle<()>>,
}

impl Prefetcher {
    /// Spawns a worker that loads `schedule` (a list of index lists) ahead of
    /// the consumer, holding at most `depth` decoded batches in flight.
    pub fn new(manifest: Manifest, schedule: Vec<Vec<usize>>, depth: usize) -> Prefetcher {
        let (tx, rx) = mpsc::sync_channel(depth.max(1));
        let handle = thread::spawn(move || {
            for indices in schedule {
                if tx.send(load_batch(&manifest, &indices)).is_err() {
                    break; // consumer dropped
                }
            }
        });
        Prefetcher {
            rx: Some(rx),
            handle: Some(handle),
        }
    }

    /// Next batch in schedule order; `None` once the schedule is exhausted.
    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> Option<Result<Batch>> {
        self.rx.as_ref().and_then(|rx| rx.recv().ok())
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // Closing the channel unblocks a worker mid-send; then join.
        drop(self.rx.take());
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
