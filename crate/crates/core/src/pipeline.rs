//! Turn orchestration.
//!
//! A conversation collects glosses from recognized clips until an
//! end-of-utterance signal (explicit flush, or `idle_gap_windows` windows in a
//! row with no confident gloss), then runs one turn: synthesize K candidates
//! in a single call, caption and embed them with at most
//! `caption_concurrency` calls in flight, and select the caption closest to
//! the keyword query.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use futures::future::try_join_all;
use futures::{Stream, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{mpsc, Semaphore};

use crate::config::ValidatedConfig;
use crate::domain::{
    CandidatePair, Clip, ConversationTurn, DomainError, Frame, GlossPrediction, KeywordSequence, StageTimings,
    SynthesisRequest, TimedStage,
};
use crate::ingest::{self, FrameSource, IngestError, LiveSegmenter};
use crate::protocol::{Backends, ProtocolError, Stage};
use crate::selection::{self, SelectionError};

/// Source of "now" for stage timings.
pub trait Clock: Send + Sync {
    fn now(&self) -> Instant;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct MonotonicClock;

impl Clock for MonotonicClock {
    fn now(&self) -> Instant {
        Instant::now()
    }
}

/// Always returns the same instant, so every recorded duration is zero.
#[derive(Debug, Clone, Copy)]
pub struct FrozenClock(Instant);

impl Default for FrozenClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for FrozenClock {
    fn now(&self) -> Instant {
        self.0
    }
}

fn ms_since(clock: &dyn Clock, start: Instant) -> f64 {
    clock.now().saturating_duration_since(start).as_secs_f64() * 1000.0
}

// ---------------------------------------------------------------------------
// Turn state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Collecting,
    Synthesizing,
    Captioning,
    Selecting,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlossOutcome {
    Accepted,
    /// Same label as the last accepted keyword.
    Duplicate,
    BelowThreshold,
    NotCollecting,
}

/// Progress of one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnState {
    phase: Phase,
    keywords: KeywordSequence,
    timings: StageTimings,
}

impl Default for TurnState {
    fn default() -> Self {
        Self { phase: Phase::Collecting, keywords: KeywordSequence::new(), timings: StageTimings::new() }
    }
}

impl TurnState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn keywords(&self) -> &KeywordSequence {
        &self.keywords
    }

    pub fn timings(&self) -> &StageTimings {
        &self.timings
    }

    /// Appends the top-1 label when it clears `threshold` and differs from
    /// the last accepted label.
    pub fn accept_gloss(&mut self, predictions: &[GlossPrediction], threshold: f64, clip_id: &str) -> GlossOutcome {
        if self.phase != Phase::Collecting {
            return GlossOutcome::NotCollecting;
        }
        let Some(top) = predictions.first() else {
            return GlossOutcome::BelowThreshold;
        };
        if top.confidence() < threshold {
            return GlossOutcome::BelowThreshold;
        }
        if self.keywords.last() == Some(top.label()) {
            return GlossOutcome::Duplicate;
        }
        self.keywords.push(top.label(), clip_id).expect("prediction labels are non-empty");
        GlossOutcome::Accepted
    }

    /// Moves forward in the fixed phase order, or to `Failed` from anywhere.
    pub fn advance(&mut self, next: Phase) -> Result<(), Phase> {
        let ok = match (self.phase, next) {
            (Phase::Done | Phase::Failed, _) => false,
            (_, Phase::Failed) => true,
            (Phase::Collecting, Phase::Synthesizing)
            | (Phase::Synthesizing, Phase::Captioning)
            | (Phase::Captioning, Phase::Selecting)
            | (Phase::Selecting, Phase::Done) => true,
            _ => false,
        };
        if ok {
            self.phase = next;
            Ok(())
        } else {
            Err(self.phase)
        }
    }

    fn record(&mut self, stage: TimedStage, ms: f64) {
        self.timings.insert(stage, ms);
    }
}

// ---------------------------------------------------------------------------
// Events
// ---------------------------------------------------------------------------

/// What a conversation reports as it progresses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum PipelineEvent {
    KeywordAccepted { keyword: String, clip_id: String, confidence: f64, keywords: KeywordSequence },
    TurnStarted { turn_id: u64, keywords: KeywordSequence, request: SynthesisRequest },
    CandidatesReady { turn_id: u64, candidates: Vec<CandidatePair> },
    SelectionMade { turn: ConversationTurn },
    TurnOverridden { turn: ConversationTurn },
    Error {
        code: String,
        message: String,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        turn_id: Option<u64>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        stage: Option<TimedStage>,
    },
}

impl PipelineEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineEvent::KeywordAccepted { .. } => "keyword_accepted",
            PipelineEvent::TurnStarted { .. } => "turn_started",
            PipelineEvent::CandidatesReady { .. } => "candidates_ready",
            PipelineEvent::SelectionMade { .. } => "selection_made",
            PipelineEvent::TurnOverridden { .. } => "turn_overridden",
            PipelineEvent::Error { .. } => "error",
        }
    }

    fn from_turn_error(err: &TurnError, turn_id: Option<u64>) -> Self {
        let (code, stage) = match err {
            TurnError::EmptyKeywords => ("empty_keywords", None),
            TurnError::StageFailed { stage, .. } => ("stage_failed", Some(*stage)),
            TurnError::TurnTimeout { .. } => ("turn_timeout", None),
            TurnError::Invalid(_) => ("invalid_turn", None),
        };
        PipelineEvent::Error { code: code.into(), message: err.to_string(), turn_id, stage }
    }
}

/// Receiver of pipeline events.
pub trait EventSink: Send {
    fn emit(&mut self, event: PipelineEvent);
}

impl EventSink for Vec<PipelineEvent> {
    fn emit(&mut self, event: PipelineEvent) {
        self.push(event);
    }
}

impl EventSink for mpsc::UnboundedSender<PipelineEvent> {
    fn emit(&mut self, event: PipelineEvent) {
        let _ = self.send(event);
    }
}

/// Discards everything.
pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&mut self, _event: PipelineEvent) {}
}

// ---------------------------------------------------------------------------
// Running a turn
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum TurnError {
    #[error("no keywords accepted")]
    EmptyKeywords,
    #[error("{stage} stage failed: {cause}")]
    StageFailed { stage: TimedStage, cause: String, timings: StageTimings },
    #[error("turn exceeded its {budget_ms} ms budget")]
    TurnTimeout { budget_ms: u64, timings: StageTimings },
    #[error("invalid turn: {0}")]
    Invalid(String),
}

impl TurnError {
    /// Timings of the phases that completed before the failure.
    pub fn partial_timings(&self) -> Option<&StageTimings> {
        match self {
            TurnError::StageFailed { timings, .. } | TurnError::TurnTimeout { timings, .. } => Some(timings),
            _ => None,
        }
    }
}

impl From<DomainError> for TurnError {
    fn from(e: DomainError) -> Self {
        TurnError::Invalid(e.to_string())
    }
}

/// Shared orchestration context: backends, clock and the turn-id counter.
pub struct Engine {
    backends: Backends,
    clock: Arc<dyn Clock>,
    next_turn: AtomicU64,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("backends", &self.backends).finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(backends: Backends) -> Self {
        Self::with_clock(backends, Arc::new(MonotonicClock))
    }

    pub fn with_clock(backends: Backends, clock: Arc<dyn Clock>) -> Self {
        Self { backends, clock, next_turn: AtomicU64::new(1) }
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn clock(&self) -> &dyn Clock {
        self.clock.as_ref()
    }

    /// Handshakes the four turn stages (features are only needed by benches).
    pub async fn handshake(&self, deadline: Duration) -> Result<(), ProtocolError> {
        self.backends
            .handshake(&[Stage::Recognize, Stage::Synthesize, Stage::Caption, Stage::Embed], deadline)
            .await
    }

    fn allocate_turn_id(&self) -> u64 {
        self.next_turn.fetch_add(1, Ordering::SeqCst)
    }

    /// Runs one turn from accepted keywords to a selected candidate.
    /// `recognize_ms` is the recognition time spent collecting the keywords.
    pub async fn run_turn(
        &self,
        keywords: &KeywordSequence,
        config: &ValidatedConfig,
        recognize_ms: f64,
        sink: &mut dyn EventSink,
    ) -> Result<ConversationTurn, TurnError> {
        if keywords.is_empty() {
            let err = TurnError::EmptyKeywords;
            sink.emit(PipelineEvent::from_turn_error(&err, None));
            return Err(err);
        }
        let turn_id = self.allocate_turn_id();
        let state = Mutex::new(TurnState { keywords: keywords.clone(), ..TurnState::default() });
        let budget = Duration::from_millis(config.turn_budget_ms);
        let result = match tokio::time::timeout(budget, self.turn_phases(turn_id, config, recognize_ms, &state, sink)).await {
            Ok(r) => r,
            Err(_) => {
                let mut st = state.lock().expect("turn state");
                let _ = st.advance(Phase::Failed);
                Err(TurnError::TurnTimeout { budget_ms: config.turn_budget_ms, timings: st.timings.clone() })
            }
        };
        if let Err(e) = &result {
            sink.emit(PipelineEvent::from_turn_error(e, Some(turn_id)));
        }
        result
    }

    async fn turn_phases(
        &self,
        turn_id: u64,
        config: &ValidatedConfig,
        recognize_ms: f64,
        state: &Mutex<TurnState>,
        sink: &mut dyn EventSink,
    ) -> Result<ConversationTurn, TurnError> {
        let clock = self.clock.as_ref();
        let deadline = Duration::from_millis(config.stage_deadline_ms);
        let with_state = |f: &mut dyn FnMut(&mut TurnState)| f(&mut state.lock().expect("turn state"));
        let fail = |stage: TimedStage, cause: String| {
            let mut st = state.lock().expect("turn state");
            let _ = st.advance(Phase::Failed);
            TurnError::StageFailed { stage, cause, timings: st.timings.clone() }
        };

        let keywords = state.lock().expect("turn state").keywords.clone();
        let query = selection::build_query(&keywords).map_err(|_| TurnError::EmptyKeywords)?;
        let request =
            SynthesisRequest::new(format!("turn-{turn_id}"), query.clone(), config.steps, config.resolution(), config.k, config.seed)?;
        with_state(&mut |st| {
            st.record(TimedStage::Recognize, recognize_ms);
            st.advance(Phase::Synthesizing).expect("collecting -> synthesizing");
        });
        sink.emit(PipelineEvent::TurnStarted { turn_id, keywords: keywords.clone(), request: request.clone() });

        let started = clock.now();
        let images = self
            .backends
            .synthesize
            .synthesize(request.clone(), deadline)
            .await
            .map_err(|e| fail(TimedStage::Synthesize, e.to_string()))?
            .value;
        with_state(&mut |st| {
            st.record(TimedStage::Synthesize, ms_since(clock, started));
            st.advance(Phase::Captioning).expect("synthesizing -> captioning");
        });

        let permits = Arc::new(Semaphore::new(config.caption_concurrency));
        let started = clock.now();
        let captions = try_join_all(images.iter().map(|img| {
            let permits = permits.clone();
            let client = self.backends.caption.clone();
            let img = img.clone();
            async move {
                let _permit = permits.acquire_owned().await.expect("semaphore open");
                client.caption(img, deadline).await.map(|t| t.value)
            }
        }))
        .await
        .map_err(|e| fail(TimedStage::Caption, e.to_string()))?;
        with_state(&mut |st| st.record(TimedStage::Caption, ms_since(clock, started)));

        // captions first, then the query, embedded once
        let started = clock.now();
        let texts: Vec<String> = captions.iter().map(|c| c.text().to_string()).chain([query.clone()]).collect();
        let mut embeddings = try_join_all(texts.into_iter().map(|text| {
            let permits = permits.clone();
            let client = self.backends.embed.clone();
            async move {
                let _permit = permits.acquire_owned().await.expect("semaphore open");
                client.embed(text, deadline).await.map(|t| t.value)
            }
        }))
        .await
        .map_err(|e| fail(TimedStage::Embed, e.to_string()))?;
        let query_embedding = embeddings.pop().expect("query embedding");
        with_state(&mut |st| {
            st.record(TimedStage::Embed, ms_since(clock, started));
            st.advance(Phase::Selecting).expect("captioning -> selecting");
        });

        let candidates = images
            .into_iter()
            .zip(captions)
            .zip(embeddings)
            .map(|((img, cap), emb)| CandidatePair::new(img, cap, emb))
            .collect::<Result<Vec<_>, _>>()?;
        sink.emit(PipelineEvent::CandidatesReady { turn_id, candidates: candidates.clone() });

        let started = clock.now();
        let sel_err = |e: SelectionError| fail(TimedStage::Select, e.to_string());
        let selection = selection::select(&candidates, &query_embedding).map_err(sel_err)?;
        let candidates = selection::apply_scores(candidates, &selection).map_err(sel_err)?;
        let timings = {
            let mut st = state.lock().expect("turn state");
            st.record(TimedStage::Select, ms_since(clock, started));
            st.advance(Phase::Done).expect("selecting -> done");
            st.timings.clone()
        };

        let turn = ConversationTurn::new(turn_id, keywords, query, request, candidates, selection, timings)?;
        sink.emit(PipelineEvent::SelectionMade { turn: turn.clone() });
        Ok(turn)
    }
}

// ---------------------------------------------------------------------------
// Streams
// ---------------------------------------------------------------------------

/// One item of a conversation's input.
#[derive(Debug, Clone)]
pub enum StreamInput {
    /// Raw frames, windowed live (a partial tail stays buffered). The hint
    /// applies to every window completed by this batch.
    Frames { frames: Vec<Frame>, hint: Option<String> },
    /// A pre-cut clip, optionally with a label hint for the stub recognizer.
    Clip { clip: Clip, hint: Option<String> },
    /// End of utterance.
    Flush,
}

/// Keyword collection plus turn triggering for one signer.
pub struct Conversation {
    engine: Arc<Engine>,
    config: ValidatedConfig,
    pending_config: Option<ValidatedConfig>,
    segmenter: LiveSegmenter,
    state: TurnState,
    recognize_ms: f64,
    idle_windows: usize,
    turns: Vec<ConversationTurn>,
}

impl Conversation {
    pub fn new(engine: Arc<Engine>, config: ValidatedConfig, source: FrameSource) -> Result<Self, IngestError> {
        let segmenter = LiveSegmenter::new(source, config.window_len, config.stride)?;
        Ok(Self {
            engine,
            config,
            pending_config: None,
            segmenter,
            state: TurnState::new(),
            recognize_ms: 0.0,
            idle_windows: 0,
            turns: Vec::new(),
        })
    }

    pub fn config(&self) -> &ValidatedConfig {
        &self.config
    }

    /// Takes effect when the next turn starts, never mid-turn.
    pub fn set_config(&mut self, config: ValidatedConfig) {
        self.pending_config = Some(config);
    }

    pub fn keywords(&self) -> &KeywordSequence {
        self.state.keywords()
    }

    pub fn phase(&self) -> Phase {
        self.state.phase()
    }

    pub fn turns(&self) -> &[ConversationTurn] {
        &self.turns
    }

    /// Frames buffered towards the next window.
    pub fn pending_frames(&self) -> usize {
        self.segmenter.pending()
    }

    fn apply_pending_config(&mut self) {
        if let Some(cfg) = self.pending_config.take() {
            if (cfg.window_len, cfg.stride) != (self.config.window_len, self.config.stride) {
                let source = self.segmenter.source().clone();
                self.segmenter = LiveSegmenter::new(source, cfg.window_len, cfg.stride).expect("validated window");
            }
            self.config = cfg;
        }
    }

    pub async fn push(&mut self, input: StreamInput, sink: &mut dyn EventSink) -> Result<(), IngestError> {
        match input {
            StreamInput::Frames { frames, hint } => self.push_frames(frames, hint, sink).await,
            StreamInput::Clip { clip, hint } => {
                self.push_clip(clip, hint, sink).await;
                Ok(())
            }
            StreamInput::Flush => {
                let _ = self.flush(sink).await;
                Ok(())
            }
        }
    }

    pub async fn push_frames(
        &mut self,
        frames: Vec<Frame>,
        hint: Option<String>,
        sink: &mut dyn EventSink,
    ) -> Result<(), IngestError> {
        for frame in frames {
            if let Some(clip) = self.segmenter.push(frame)? {
                self.push_clip(clip, hint.clone(), sink).await;
            }
        }
        Ok(())
    }

    /// Recognizes one clip and updates keyword state; may trigger a turn on
    /// an idle gap.
    pub async fn push_clip(&mut self, clip: Clip, hint: Option<String>, sink: &mut dyn EventSink) {
        let deadline = Duration::from_millis(self.config.stage_deadline_ms);
        let recognizer = self.engine.backends.recognize.clone();
        let clip = match recognizer.capabilities().and_then(|c| c.input_resolution) {
            Some(dims) => match ingest::resize_for_model(&clip, dims.width, dims.height) {
                Ok(c) => c,
                Err(e) => {
                    sink.emit(PipelineEvent::Error {
                        code: "ingest".into(),
                        message: e.to_string(),
                        turn_id: None,
                        stage: Some(TimedStage::Recognize),
                    });
                    return;
                }
            },
            None => clip,
        };
        let clip_id = clip.clip_id().to_string();
        let clock = self.engine.clock.as_ref();
        let started = clock.now();
        let predictions = match recognizer.recognize(clip, hint, deadline).await {
            Ok(t) => t.value,
            Err(e) => {
                sink.emit(PipelineEvent::Error {
                    code: "stage_failed".into(),
                    message: e.to_string(),
                    turn_id: None,
                    stage: Some(TimedStage::Recognize),
                });
                return;
            }
        };
        self.recognize_ms += ms_since(clock, started);

        match self.state.accept_gloss(&predictions, self.config.confidence_threshold, &clip_id) {
            GlossOutcome::Accepted => {
                self.idle_windows = 0;
                let top = &predictions[0];
                sink.emit(PipelineEvent::KeywordAccepted {
                    keyword: top.label().to_string(),
                    clip_id,
                    confidence: top.confidence(),
                    keywords: self.state.keywords().clone(),
                });
            }
            // a held sign keeps the utterance alive
            GlossOutcome::Duplicate | GlossOutcome::NotCollecting => {}
            GlossOutcome::BelowThreshold => {
                self.idle_windows += 1;
                if self.idle_windows >= self.config.idle_gap_windows && !self.state.keywords().is_empty() {
                    let _ = self.flush(sink).await;
                }
            }
        }
    }

    /// Ends the utterance: runs a turn over the collected keywords (or
    /// reports `EmptyKeywords`) and resets collection.
    pub async fn flush(&mut self, sink: &mut dyn EventSink) -> Result<ConversationTurn, TurnError> {
        self.apply_pending_config();
        let keywords = std::mem::take(&mut self.state).keywords;
        let recognize_ms = std::mem::take(&mut self.recognize_ms);
        self.idle_windows = 0;
        let result = self.engine.run_turn(&keywords, &self.config, recognize_ms, sink).await;
        if let Ok(turn) = &result {
            self.turns.push(turn.clone());
        }
        result
    }
}

/// Drives a conversation over an input stream. A source error ends the
/// stream with a final error event.
pub async fn run_stream<S>(
    engine: Arc<Engine>,
    config: ValidatedConfig,
    source: FrameSource,
    inputs: S,
    sink: &mut dyn EventSink,
) -> Result<Vec<ConversationTurn>, IngestError>
where
    S: Stream<Item = Result<StreamInput, IngestError>>,
{
    let mut conversation = Conversation::new(engine, config, source)?;
    let mut inputs = std::pin::pin!(inputs);
    while let Some(item) = inputs.next().await {
        let outcome = match item {
            Ok(input) => conversation.push(input, sink).await,
            Err(e) => Err(e),
        };
        if let Err(e) = outcome {
            sink.emit(PipelineEvent::Error { code: "source".into(), message: e.to_string(), turn_id: None, stage: None });
            break;
        }
    }
    Ok(conversation.turns)
}
