//! Latency and routing measurements derived from event logs.
//!
//! - `ttft_s`: first prefill duration.
//! - `slm_inference_s`: small-model decode steps plus re-prefills and cache
//!   extensions. The initial prefill is reported only as TTFT.
//! - `comm_llm_s`: total time inside large-model calls.
//! - `tbt_slm_s`: mean gap between consecutive small-model emissions.
//! - `overall_s`: `Done` minus the first prefill start.
//!
//! Time not covered by either bucket (initial prefill, router scoring,
//! bookkeeping) is the residual.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::{EventKind, SessionRecord};
use crate::types::Route;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("nothing to aggregate")]
    EmptySet,
    #[error("{flags} correctness flags for {rows} requests")]
    FlagCountMismatch { flags: usize, rows: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub ttft_s: f64,
    pub slm_inference_s: f64,
    pub tbt_slm_s: f64,
    pub comm_llm_s: f64,
    pub routing_number: usize,
    pub overall_s: f64,
    pub generated_tokens: usize,
    pub routed_tokens: usize,
}

impl RequestMetrics {
    /// `overall - (slm_inference + comm_llm)`.
    pub fn residual_s(&self) -> f64 {
        self.overall_s - (self.slm_inference_s + self.comm_llm_s)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Span {
    Prefill,
    SlmStep,
    LlmCall,
    RePrefill,
    CacheExtend,
}

fn span_of(kind: &EventKind) -> Option<(Span, bool)> {
    Some(match kind {
        EventKind::PrefillStart { .. } => (Span::Prefill, true),
        EventKind::PrefillEnd => (Span::Prefill, false),
        EventKind::SlmStepStart { .. } => (Span::SlmStep, true),
        EventKind::SlmStepEnd { .. } => (Span::SlmStep, false),
        EventKind::LlmCallStart { .. } => (Span::LlmCall, true),
        EventKind::LlmCallEnd { .. } => (Span::LlmCall, false),
        EventKind::RePrefillStart { .. } => (Span::RePrefill, true),
        EventKind::RePrefillEnd => (Span::RePrefill, false),
        EventKind::CacheExtendStart { .. } => (Span::CacheExtend, true),
        EventKind::CacheExtendEnd => (Span::CacheExtend, false),
        _ => return None,
    })
}

pub fn compute(record: &SessionRecord) -> Result<RequestMetrics, MetricsError> {
    let bad = |m: String| Err(MetricsError::MalformedRecord(m));
    let events = &record.events;
    let mut m = RequestMetrics::default();
    let mut open: Option<(Span, f64)> = None;
    let mut first_prefill: Option<(f64, Option<f64>)> = None;
    let mut last_slm_emit: Option<f64> = None;
    let mut slm_gaps = (0.0, 0usize);
    let mut done = None;
    let mut prev_t = f64::NEG_INFINITY;

    for (i, e) in events.iter().enumerate() {
        if !e.t.is_finite() || e.t < prev_t {
            return bad(format!("event {i}: timestamp goes backwards"));
        }
        prev_t = e.t;
        if done.is_some() {
            return bad(format!("event {i}: after Done"));
        }
        if let Some((span, start)) = span_of(&e.kind) {
            match (open, start) {
                (None, true) => open = Some((span, e.t)),
                (Some((s, t0)), false) if s == span => {
                    let d = e.t - t0;
                    match span {
                        Span::Prefill => {
                            if let Some((_, end @ None)) = first_prefill.as_mut() {
                                *end = Some(e.t);
                            }
                        }
                        Span::SlmStep | Span::RePrefill | Span::CacheExtend => m.slm_inference_s += d,
                        Span::LlmCall => {
                            m.comm_llm_s += d;
                            m.routing_number += 1;
                        }
                    }
                    open = None;
                }
                _ => return bad(format!("event {i}: unmatched span boundary")),
            }
            if span == Span::Prefill && start && first_prefill.is_none() {
                first_prefill = Some((e.t, None));
            }
            continue;
        }
        match &e.kind {
            EventKind::Emit { source, .. } => {
                m.generated_tokens += 1;
                if *source == Route::Llm {
                    m.routed_tokens += 1;
                } else {
                    if let Some(t) = last_slm_emit {
                        slm_gaps.0 += e.t - t;
                        slm_gaps.1 += 1;
                    }
                    last_slm_emit = Some(e.t);
                }
            }
            EventKind::Done { .. } => done = Some(e.t),
            _ => {}
        }
    }
    if open.is_some() {
        return bad("unterminated span".into());
    }
    let Some(done) = done else { return bad("no Done event".into()) };
    let Some((start, Some(prefill_end))) = first_prefill else { return bad("no completed prefill".into()) };
    m.ttft_s = prefill_end - start;
    m.overall_s = done - start;
    m.tbt_slm_s = if slm_gaps.1 == 0 { 0.0 } else { slm_gaps.0 / slm_gaps.1 as f64 };
    Ok(m)
}

/// Means over a request set at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub metrics: MeanMetrics,
    pub accuracy: Option<f64>,
    pub routed_ratio: f64,
    pub requests: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub ttft_s: f64,
    pub slm_inference_s: f64,
    pub tbt_slm_s: f64,
    pub comm_llm_s: f64,
    pub routing_number: f64,
    pub overall_s: f64,
    pub routed_tokens: usize,
    pub generated_tokens: usize,
}

impl MeanMetrics {
    pub fn residual_s(&self) -> f64 {
        self.overall_s - (self.slm_inference_s + self.comm_llm_s)
    }
}

pub fn aggregate(rows: &[RequestMetrics], threshold: f64, correct: Option<&[bool]>) -> Result<SweepRow, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    if let Some(flags) = correct {
        if flags.len() != rows.len() {
            return Err(MetricsError::FlagCountMismatch { flags: flags.len(), rows: rows.len() });
        }
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&RequestMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let routed: usize = rows.iter().map(|r| r.routed_tokens).sum();
    let generated: usize = rows.iter().map(|r| r.generated_tokens).sum();
    Ok(SweepRow {
        threshold,
        metrics: MeanMetrics {
            ttft_s: mean(|r| r.ttft_s),
            slm_inference_s: mean(|r| r.slm_inference_s),
            tbt_slm_s: mean(|r| r.tbt_slm_s),
            comm_llm_s: mean(|r| r.comm_llm_s),
            routing_number: mean(|r| r.routing_number as f64),
            overall_s: mean(|r| r.overall_s),
            routed_tokens: routed,
            generated_tokens: generated,
        },
        accuracy: correct.map(|f| f.iter().filter(|&&c| c).count() as f64 / n),
        routed_ratio: if generated == 0 { 0.0 } else { routed as f64 / generated as f64 },
        requests: rows.len(),
        failed: 0,
    })
}

pub const CSV_HEADER: [&str; 9] = [
    "Threshold",
    "Routing Number",
    "SLM Inference Time (s)",
    "TTFT (s)",
    "TBT for SLM (s)",
    "Comm + LLM Inference (s)",
    "Overall (s)",
    "Accuracy",
    "Routed Ratio",
];

pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.threshold.to_string(),
            m.routing_number.to_string(),
            format!("{:.4}", m.slm_inference_s),
            format!("{:.4}", m.ttft_s),
            format!("{:.4}", m.tbt_slm_s),
            format!("{:.4}", m.comm_llm_s),
            format!("{:.4}", m.overall_s),
            r.accuracy.map(|a| format!("{a:.4}")).unwrap_or_default(),
            format!("{:.4}", r.routed_ratio),
        ])?;
    }
    w.flush()?;
    Ok(())
}
