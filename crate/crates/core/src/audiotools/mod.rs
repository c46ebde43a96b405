//! Built-in audio tools: a WAV codec, gain/trim/mix, energy VAD, and the
//! tool-process entry point shared by the built-ins and the stub tools.

mod dsp;
pub mod toolproc;
mod vad;
mod wav;

pub use dsp::{apply_gain, mix, trim, MAX_GAIN_DB, MIN_GAIN_DB};
pub use vad::{detect_voice_activity, VadConfig, VadSegment};
pub use wav::{parse_wav, write_wav, SampleFormat};

use thiserror::Error;

pub const MIN_SAMPLE_RATE: u32 = 8_000;
pub const MAX_SAMPLE_RATE: u32 = 192_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AudioError {
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("truncated data: {0}")]
    TruncatedData(String),
    #[error("gain {0} dB outside [-60, 24]")]
    GainOutOfRange(f64),
    #[error("invalid range [{start_s}, {end_s}) for {duration_s} s of audio")]
    RangeInvalid { start_s: f64, end_s: f64, duration_s: f64 },
    #[error("sample rates differ: {0} vs {1}")]
    RateMismatch(u32, u32),
    #[error("channel counts differ: {0} vs {1}")]
    ChannelMismatch(usize, usize),
    #[error("invalid buffer: {0}")]
    InvalidBuffer(String),
}

/// Planar audio: one sample vector per channel, all the same length, every
/// sample within [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    sample_rate_hz: u32,
    channels: Vec<Vec<f32>>,
}

impl AudioBuffer {
    pub fn new(sample_rate_hz: u32, channels: Vec<Vec<f32>>) -> Result<Self, AudioError> {
        if !(MIN_SAMPLE_RATE..=MAX_SAMPLE_RATE).contains(&sample_rate_hz) {
            return Err(AudioError::InvalidBuffer(format!(
                "sample rate {sample_rate_hz} outside [{MIN_SAMPLE_RATE}, {MAX_SAMPLE_RATE}]"
            )));
        }
        if !(1..=2).contains(&channels.len()) {
            return Err(AudioError::InvalidBuffer(format!(
                "{} channels, expected 1 or 2",
                channels.len()
            )));
        }
        if channels.iter().any(|c| c.len() != channels[0].len()) {
            return Err(AudioError::InvalidBuffer("channel lengths differ".into()));
        }
        if channels.iter().flatten().any(|s| !(-1.0..=1.0).contains(s)) {
            return Err(AudioError::InvalidBuffer("sample outside [-1, 1]".into()));
        }
        Ok(AudioBuffer {
            sample_rate_hz,
            channels,
        })
    }

    pub fn mono(sample_rate_hz: u32, samples: Vec<f32>) -> Result<Self, AudioError> {
        Self::new(sample_rate_hz, vec![samples])
    }

    pub fn silence(sample_rate_hz: u32, channels: usize, frames: usize) -> Result<Self, AudioError> {
        Self::new(sample_rate_hz, vec![vec![0.0; frames]; channels])
    }

    /// Builds a buffer from arbitrary values, clamping into [-1, 1]; NaN becomes 0.
    pub(crate) fn from_clamped(sample_rate_hz: u32, channels: Vec<Vec<f32>>) -> Self {
        let channels = channels
            .into_iter()
            .map(|c| c.into_iter().map(clamp_sample).collect())
            .collect();
        AudioBuffer {
            sample_rate_hz,
            channels,
        }
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn length_frames(&self) -> usize {
        self.channels[0].len()
    }

    pub fn duration_s(&self) -> f64 {
        self.length_frames() as f64 / self.sample_rate_hz as f64
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    pub fn channel(&self, i: usize) -> &[f32] {
        &self.channels[i]
    }

    /// Channel average as a single sequence.
    pub fn to_mono(&self) -> Vec<f32> {
        if self.channels.len() == 1 {
            return self.channels[0].clone();
        }
        let n = self.channels.len() as f32;
        (0..self.length_frames())
            .map(|i| self.channels.iter().map(|c| c[i]).sum::<f32>() / n)
            .collect()
    }
}

pub(crate) fn clamp_sample(x: f32) -> f32 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(-1.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_enforces_invariants() {
        assert!(AudioBuffer::new(16_000, vec![vec![0.0; 3], vec![0.0; 2]]).is_err());
        assert!(AudioBuffer::new(4_000, vec![vec![0.0]]).is_err());
        assert!(AudioBuffer::new(16_000, vec![]).is_err());
        assert!(AudioBuffer::mono(16_000, vec![1.5]).is_err());
        assert_eq!(AudioBuffer::silence(16_000, 2, 10).unwrap().length_frames(), 10);
    }

    #[test]
    fn stereo_downmix_averages() {
        let b = AudioBuffer::new(8_000, vec![vec![0.5, -1.0], vec![0.25, 1.0]]).unwrap();
        assert_eq!(b.to_mono(), vec![0.375, 0.0]);
    }
}
