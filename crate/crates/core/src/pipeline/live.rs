use std::sync::mpsc::sync_channel;
use std::thread;
use std::time::{Duration, Instant};

use super::SimError;
use crate::autodiff::Tensor;
use crate::mapper::Checkpoint;
use crate::metrics::{topk_mask, PruneMask};
use crate::oracle::OracleSample;

/// Stage boundaries of one sample, in seconds since the run started.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub score_start: f64,
    pub score_end: f64,
    pub mask_start: f64,
    pub mask_end: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineRun {
    /// One `[L_l, H_l, N]` mask per sample, in input order.
    pub masks: Vec<PruneMask>,
    pub times: Vec<StageTimes>,
    /// Time the masking worker spent blocked on an empty queue.
    pub consumer_idle: Duration,
}

/// Queue slots between the scoring and masking workers.
const QUEUE_DEPTH: usize = 2;

fn score(checkpoint: &Checkpoint, sample: &OracleSample) -> Result<Tensor, SimError> {
    let s = sample.x.shape();
    let x = sample.x.reshape(&[1, s[0], s[1], s[2]])?;
    let y = checkpoint.mapper.forward_full(&x)?;
    let shape = y.shape()[1..].to_vec();
    Ok(y.reshape(&shape)?)
}

/// Scores and masks every sample on the calling thread.
pub fn sequential_masks(
    samples: &[OracleSample],
    checkpoint: &Checkpoint,
    ratio: f64,
) -> Result<Vec<PruneMask>, SimError> {
    samples
        .iter()
        .map(|s| Ok(topk_mask(&score(checkpoint, s)?, ratio)?))
        .collect()
}

/// Runs scoring and masking on two workers joined by a bounded FIFO. The
/// masks equal [`sequential_masks`] on the same inputs.
pub fn live_pipeline_demo(
    samples: &[OracleSample],
    checkpoint: &Checkpoint,
    ratio: f64,
) -> Result<PipelineRun, SimError> {
    let start = Instant::now();
    let since = |t: Instant| t.duration_since(start).as_secs_f64();
    let (tx, rx) = sync_channel::<(usize, Tensor, f64, f64)>(QUEUE_DEPTH);

    thread::scope(|scope| {
        let producer = scope.spawn(move || -> Result<(), SimError> {
            for (i, sample) in samples.iter().enumerate() {
                let t0 = Instant::now();
                let scores = score(checkpoint, sample)?;
                let t1 = Instant::now();
                if tx.send((i, scores, since(t0), since(t1))).is_err() {
                    // The consumer stopped; its error is reported instead.
                    break;
                }
            }
            Ok(())
        });

        let consumer = scope.spawn(move || -> Result<PipelineRun, SimError> {
            let mut masks = Vec::with_capacity(samples.len());
            let mut times = Vec::with_capacity(samples.len());
            let mut idle = Duration::ZERO;
            loop {
                let wait = Instant::now();
                let Ok((i, scores, score_start, score_end)) = rx.recv() else {
                    break;
                };
                idle += wait.elapsed();
                debug_assert_eq!(i, masks.len(), "FIFO preserves order");
                let t0 = Instant::now();
                masks.push(topk_mask(&scores, ratio)?);
                times.push(StageTimes {
                    score_start,
                    score_end,
                    mask_start: since(t0),
                    mask_end: since(Instant::now()),
                });
            }
            Ok(PipelineRun {
                masks,
                times,
                consumer_idle: idle,
            })
        });

        let produced = producer
            .join()
            .map_err(|_| SimError::Worker("scoring worker panicked".into()))?;
        let consumed = consumer
            .join()
            .map_err(|_| SimError::Worker("masking worker panicked".into()))?;
        produced?;
        let run = consumed?;
        if run.masks.len() != samples.len() {
            return Err(SimError::Worker(format!(
                "{} of {} samples masked",
                run.masks.len(),
                samples.len()
            )));
        }
        Ok(run)
    })
}
