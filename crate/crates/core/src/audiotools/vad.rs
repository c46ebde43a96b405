//! Energy-threshold voice activity detection.
//!
//! Levels are in dBFS against a full-scale value of 1.0: `20 * log10(rms)`.
//! A full-scale sine therefore reads about -3 dBFS.

use serde::{Deserialize, Serialize};

use super::AudioBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VadConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub threshold_dbfs: f64,
    pub min_segment_ms: f64,
    pub merge_gap_ms: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        VadConfig {
            window_ms: 20.0,
            hop_ms: 10.0,
            threshold_dbfs: -40.0,
            min_segment_ms: 50.0,
            merge_gap_ms: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VadSegment {
    pub start_s: f64,
    pub end_s: f64,
}

fn dbfs(frame: &[f32]) -> f64 {
    if frame.is_empty() {
        return f64::NEG_INFINITY;
    }
    let energy: f64 = frame.iter().map(|&s| (s as f64) * (s as f64)).sum();
    let rms = (energy / frame.len() as f64).sqrt();
    if rms == 0.0 {
        f64::NEG_INFINITY
    } else {
        20.0 * rms.log10()
    }
}

fn ms_to_samples(ms: f64, sr: f64) -> usize {
    (ms * sr / 1000.0).round().max(0.0) as usize
}

/// Returns sorted, disjoint speech segments.
///
/// A run of active frames `a..=b` becomes `[a*hop + (win - hop), (b + 1)*hop)`
/// in samples: the onset lies in the last hop of the first active window and
/// the offset in the first hop of the last one. Runs touching the buffer
/// edges extend to the edge.
pub fn detect_voice_activity(buf: &AudioBuffer, cfg: &VadConfig) -> Vec<VadSegment> {
    let samples = buf.to_mono();
    let len = samples.len();
    if len == 0 {
        return Vec::new();
    }
    let sr = buf.sample_rate_hz() as f64;
    let hop = ms_to_samples(cfg.hop_ms, sr).max(1);
    let win = ms_to_samples(cfg.window_ms, sr).max(hop);
    let frames = if len < win { 1 } else { 1 + (len - win) / hop };

    let active: Vec<bool> = (0..frames)
        .map(|i| {
            let start = i * hop;
            dbfs(&samples[start..(start + win).min(len)]) > cfg.threshold_dbfs
        })
        .collect();

    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < frames {
        if !active[i] {
            i += 1;
            continue;
        }
        let a = i;
        while i + 1 < frames && active[i + 1] {
            i += 1;
        }
        let b = i;
        let start = if a == 0 { 0 } else { a * hop + (win - hop) };
        let end = if b + 1 == frames { len } else { (b + 1) * hop };
        if start < end {
            runs.push((start, end.min(len)));
        }
        i += 1;
    }

    let merge_gap = ms_to_samples(cfg.merge_gap_ms, sr);
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (s, e) in runs {
        match merged.last_mut() {
            Some(last) if s.saturating_sub(last.1) < merge_gap => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }

    let min_len = ms_to_samples(cfg.min_segment_ms, sr);
    merged
        .into_iter()
        .filter(|(s, e)| e - s >= min_len)
        .map(|(s, e)| VadSegment {
            start_s: s as f64 / sr,
            end_s: e as f64 / sr,
        })
        .collect()
}
