//! Streaming decode runtime: a FIFO frame queue fed by a producer, an
//! incremental decode loop with text and visual caches, an offline
//! re-computation oracle, and freshness metrics over the timed transcript.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    CachedFrameStages, CrossMode, Frame, IncrementalState, Model, ModelError, TimedToken,
};
use crate::numkit::Real;

pub type Result<T, E = StreamError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("frame at {got}s pushed after frame at {last}s")]
    OutOfOrder { last: f64, got: f64 },
    #[error("queue capacity must be at least 1")]
    ZeroCapacity,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("frame producer failed: {0}")]
    Producer(String),
}

/// Bounded FIFO of encoded frames. Eviction is strictly oldest-first and
/// never re-times or re-positions the retained frames.
pub struct FrameQueue<T: Real> {
    capacity: usize,
    entries: VecDeque<CachedFrameStages<T>>,
    evicted: usize,
    last_time: Option<f64>,
}

impl<T: Real> FrameQueue<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(StreamError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            entries: VecDeque::new(),
            evicted: 0,
            last_time: None,
        })
    }

    pub fn push(&mut self, frame: CachedFrameStages<T>) -> Result<()> {
        if let Some(last) = self.last_time {
            if frame.time < last {
                return Err(StreamError::OutOfOrder {
                    last,
                    got: frame.time,
                });
            }
        }
        self.last_time = Some(frame.time);
        self.entries.push_back(frame);
        if self.entries.len() > self.capacity {
            self.entries.pop_front();
            self.evicted += 1;
        }
        Ok(())
    }

    /// All retained frames with timestamp at or before `now`, oldest first.
    /// Pure read.
    pub fn snapshot(&self, now: f64) -> Vec<&CachedFrameStages<T>> {
        self.entries.iter().filter(|f| f.time <= now).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn evicted(&self) -> usize {
        self.evicted
    }

    pub fn times(&self) -> Vec<f64> {
        self.entries.iter().map(|f| f.time).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClockMode {
    Simulated,
    Realtime,
}

/// Maps token indices to timestamps. Simulated mode stamps token k at
/// `t_q + k / decode_rate`; realtime mode reads the wall clock.
#[derive(Debug, Clone)]
pub struct Clock {
    pub mode: ClockMode,
    pub t_q: f64,
    pub decode_rate: f64,
    started: Option<std::time::Instant>,
}

impl Clock {
    pub fn simulated(t_q: f64, decode_rate: f64) -> Self {
        Self {
            mode: ClockMode::Simulated,
            t_q,
            decode_rate,
            started: None,
        }
    }

    pub fn realtime(t_q: f64) -> Self {
        Self {
            mode: ClockMode::Realtime,
            t_q,
            decode_rate: 1.0,
            started: Some(std::time::Instant::now()),
        }
    }

    pub fn token_time(&self, k: usize) -> f64 {
        match self.mode {
            ClockMode::Simulated => self.t_q + k as f64 / self.decode_rate,
            ClockMode::Realtime => {
                self.t_q + self.started.expect("started").elapsed().as_secs_f64()
            }
        }
    }
}

/// Supplies frames as simulated time advances. `poll` returns every frame
/// with arrival time at or before `now` that has not been returned yet,
/// in arrival order.
pub trait FrameProducer {
    fn poll(&mut self, now: f64) -> Result<Vec<(Frame, f64)>>;
}

/// Producer over a fixed (frame, time) schedule.
pub struct ScheduleProducer {
    schedule: Vec<(Frame, f64)>,
    next: usize,
}

impl ScheduleProducer {
    pub fn new(mut schedule: Vec<(Frame, f64)>) -> Self {
        schedule.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite times"));
        Self { schedule, next: 0 }
    }
}

impl FrameProducer for ScheduleProducer {
    fn poll(&mut self, now: f64) -> Result<Vec<(Frame, f64)>> {
        let mut out = Vec::new();
        while self.next < self.schedule.len() && self.schedule[self.next].1 <= now {
            out.push(self.schedule[self.next].clone());
            self.next += 1;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ContextMode {
    /// Frames keep arriving during generation.
    Streaming,
    /// The visual context is frozen at the question time.
    FixedContext,
}

#[derive(Debug, Clone)]
pub struct DecodeOptions {
    pub decode_rate: f64,
    pub max_tokens: usize,
    pub eos: u32,
    pub queue_capacity: usize,
    pub context: ContextMode,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            decode_rate: 1.0,
            max_tokens: 32,
            eos: 0,
            queue_capacity: 32,
            context: ContextMode::Streaming,
        }
    }
}

/// One emitted token with its decode-time audit: the timestamp of the text
/// row that produced it and the frame times that row attended.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub token: u32,
    pub time: f64,
    /// Timestamp of the text row whose logits produced this token.
    pub context_time: f64,
    pub attended_frame_times: Vec<f64>,
    pub retained_frames: usize,
}

#[derive(Debug, Clone)]
pub struct Transcript {
    pub tokens: Vec<TimedToken>,
    pub steps: Vec<StepRecord>,
    pub step_logits: Vec<Vec<f64>>,
    pub evicted: usize,
    /// Set when the producer failed part-way; tokens up to the failure are
    /// still returned.
    pub error: Option<String>,
}

pub const TRANSCRIPT_FORMAT: &str = "timed-transcript";
pub const TRANSCRIPT_VERSION: u32 = 1;

pub fn save_transcript(path: &std::path::Path, t: &Transcript) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "{}",
        serde_json::json!({
            "format": TRANSCRIPT_FORMAT,
            "version": TRANSCRIPT_VERSION,
            "tokens": t.tokens.len(),
            "evicted": t.evicted,
            "error": t.error,
        })
    )?;
    for s in &t.steps {
        writeln!(f, "{}", serde_json::to_string(s).expect("step record"))?;
    }
    Ok(())
}

fn argmax<T: Real>(logits: &[T]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

fn attended_times<T: Real>(visible: &[&CachedFrameStages<T>], row_time: f64) -> Vec<f64> {
    visible
        .iter()
        .filter(|f| f.time <= row_time)
        .map(|f| f.time)
        .collect()
}

/// Greedy streaming decode. The question is prefilled at `t_q`; answer
/// token k is stamped `t_q + k / decode_rate`. Each step polls the
/// producer up to the step's timestamp, but the row being processed only
/// attends frames at or before its own stamp, matching training.
pub fn decode_streaming<T: Real>(
    model: &Model<T>,
    question: &[u32],
    t_q: f64,
    producer: &mut dyn FrameProducer,
    opts: &DecodeOptions,
) -> Result<Transcript> {
    let clock = Clock::simulated(t_q, opts.decode_rate);
    let mut queue: FrameQueue<T> = FrameQueue::new(opts.queue_capacity)?;
    let mut state = IncrementalState::new(&model.cfg);
    let mut next_frame_id: u64 = 0;
    let mut tokens: Vec<TimedToken> = Vec::new();
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut step_logits: Vec<Vec<f64>> = Vec::new();
    let mut error = None;

    let mut feed = |queue: &mut FrameQueue<T>, next_id: &mut u64, now: f64| -> Result<()> {
        for (frame, t) in producer.poll(now)? {
            let cached = model.cache_frame(&frame, t, *next_id)?;
            *next_id += 1;
            queue.push(cached)?;
        }
        Ok(())
    };

    feed(&mut queue, &mut next_frame_id, t_q)?;
    // prefill the question; the last row's logits produce answer token 0
    let mut last_logits: Option<Vec<T>> = None;
    for &id in question {
        let visible = queue.snapshot(t_q);
        let logits = model.incr_step(
            &mut state,
            TimedToken { id, time: t_q },
            &visible,
            CrossMode::Normal,
        )?;
        last_logits = Some(logits);
    }

    for k in 0..opts.max_tokens {
        let now = clock.token_time(k);
        let (logits, context_time) = if k == 0 {
            match last_logits.take() {
                Some(l) => (l, t_q),
                None => break, // empty question: nothing to condition on
            }
        } else {
            let prev = tokens[k - 1];
            if opts.context == ContextMode::Streaming {
                if let Err(e) = feed(&mut queue, &mut next_frame_id, now) {
                    error = Some(e.to_string());
                    break;
                }
            }
            let visible = queue.snapshot(now);
            let l = model.incr_step(&mut state, prev, &visible, CrossMode::Normal)?;
            (l, prev.time)
        };
        let tok = argmax(&logits);
        tokens.push(TimedToken { id: tok, time: now });
        let visible = queue.snapshot(now);
        steps.push(StepRecord {
            index: k,
            token: tok,
            time: now,
            context_time,
            attended_frame_times: attended_times(&visible, context_time),
            retained_frames: queue.len(),
        });
        step_logits.push(logits.iter().map(|v| v.to_f64_lossy()).collect());
        if tok == opts.eos {
            break;
        }
    }
    Ok(Transcript {
        tokens,
        steps,
        step_logits,
        evicted: queue.evicted(),
        error,
    })
}

/// Ground-truth reference: replays the same queue arrivals and evictions,
/// but computes every step as a full forward from scratch over all text so
/// far plus the frames retained at that step. No caches.
pub fn decode_offline_oracle<T: Real>(
    model: &Model<T>,
    question: &[u32],
    t_q: f64,
    schedule: &[(Frame, f64)],
    opts: &DecodeOptions,
) -> Result<Transcript> {
    let clock = Clock::simulated(t_q, opts.decode_rate);
    let mut producer = ScheduleProducer::new(schedule.to_vec());
    let mut retained: VecDeque<(Frame, f64)> = VecDeque::new();
    let mut evicted = 0usize;
    let mut tokens: Vec<TimedToken> = Vec::new();
    let mut steps = Vec::new();
    let mut step_logits = Vec::new();

    let mut feed = |retained: &mut VecDeque<(Frame, f64)>, evicted: &mut usize, now: f64| {
        for f in producer.poll(now).expect("schedule producer is infallible") {
            retained.push_back(f);
            if retained.len() > opts.queue_capacity {
                retained.pop_front();
                *evicted += 1;
            }
        }
    };

    feed(&mut retained, &mut evicted, t_q);
    for k in 0..opts.max_tokens {
        let now = clock.token_time(k);
        if k > 0 && opts.context == ContextMode::Streaming {
            feed(&mut retained, &mut evicted, now);
        }
        let mut text: Vec<TimedToken> = question
            .iter()
            .map(|&id| TimedToken { id, time: t_q })
            .collect();
        text.extend_from_slice(&tokens);
        if text.is_empty() {
            break;
        }
        let context_time = text.last().unwrap().time;
        let visible: Vec<(Frame, f64)> = retained
            .iter()
            .filter(|(_, t)| *t <= now)
            .cloned()
            .collect();
        let encoded: Vec<crate::model::FrameTokens<T>> = visible
            .iter()
            .map(|(f, t)| model.encode_frame(f, *t))
            .collect::<std::result::Result<_, _>>()?;
        let logits = model.forward(&text, &encoded)?;
        let last: Vec<T> = logits.row(logits.rows - 1).to_vec();
        let tok = argmax(&last);
        tokens.push(TimedToken { id: tok, time: now });
        steps.push(StepRecord {
            index: k,
            token: tok,
            time: now,
            context_time,
            attended_frame_times: visible
                .iter()
                .filter(|(_, t)| *t <= context_time)
                .map(|(_, t)| *t)
                .collect(),
            retained_frames: retained.len(),
        });
        step_logits.push(last.iter().map(|v| v.to_f64_lossy()).collect());
        if tok == opts.eos {
            break;
        }
    }
    Ok(Transcript {
        tokens,
        steps,
        step_logits,
        evicted,
        error: None,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreshnessReport {
    pub mean_lag: f64,
    pub max_lag: f64,
    /// Fraction of tokens whose attended set includes the newest frame that
    /// had arrived by the producing row's timestamp.
    pub newest_fraction: f64,
    pub tokens: usize,
}

/// Per-token staleness of the visual context. Returns `None` when no token
/// attended any frame.
pub fn freshness_report(transcript: &Transcript, schedule: &[(Frame, f64)]) -> Option<FreshnessReport> {
    let mut lags = Vec::new();
    let mut newest_hits = 0usize;
    for s in &transcript.steps {
        let newest_attended = s
            .attended_frame_times
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if !newest_attended.is_finite() {
            continue;
        }
        lags.push(s.time - newest_attended);
        let newest_available = schedule
            .iter()
            .map(|(_, t)| *t)
            .filter(|&t| t <= s.context_time)
            .fold(f64::NEG_INFINITY, f64::max);
        if newest_attended >= newest_available {
            newest_hits += 1;
        }
    }
    if lags.is_empty() {
        return None;
    }
    let n = lags.len();
    Some(FreshnessReport {
        mean_lag: lags.iter().sum::<f64>() / n as f64,
        max_lag: lags.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        newest_fraction: newest_hits as f64 / n as f64,
        tokens: n,
    })
}
