use super::{clamp_sample, AudioBuffer, AudioError};

pub const MIN_GAIN_DB: f64 = -60.0;
pub const MAX_GAIN_DB: f64 = 24.0;

/// Scales every sample by `10^(gain_db / 20)` and clamps to full scale.
pub fn apply_gain(buf: &AudioBuffer, gain_db: f64) -> Result<AudioBuffer, AudioError> {
    if !(MIN_GAIN_DB..=MAX_GAIN_DB).contains(&gain_db) {
        return Err(AudioError::GainOutOfRange(gain_db));
    }
    let factor = 10f64.powf(gain_db / 20.0);
    let channels = buf
        .channels()
        .iter()
        .map(|c| c.iter().map(|&x| clamp_sample((x as f64 * factor) as f32)).collect())
        .collect();
    Ok(AudioBuffer::from_clamped(buf.sample_rate_hz(), channels))
}

/// Keeps frames `[round(start_s * sr), round(end_s * sr))`.
pub fn trim(buf: &AudioBuffer, start_s: f64, end_s: f64) -> Result<AudioBuffer, AudioError> {
    let duration_s = buf.duration_s();
    if !(start_s >= 0.0 && start_s < end_s && end_s <= duration_s) {
        return Err(AudioError::RangeInvalid {
            start_s,
            end_s,
            duration_s,
        });
    }
    let sr = buf.sample_rate_hz() as f64;
    let len = buf.length_frames();
    let from = ((start_s * sr).round() as usize).min(len);
    let to = ((end_s * sr).round() as usize).min(len);
    let channels = buf.channels().iter().map(|c| c[from..to].to_vec()).collect();
    Ok(AudioBuffer::from_clamped(buf.sample_rate_hz(), channels))
}

/// Sample-wise sum, the shorter input padded with silence, clamped.
pub fn mix(a: &AudioBuffer, b: &AudioBuffer) -> Result<AudioBuffer, AudioError> {
    if a.sample_rate_hz() != b.sample_rate_hz() {
        return Err(AudioError::RateMismatch(a.sample_rate_hz(), b.sample_rate_hz()));
    }
    if a.channel_count() != b.channel_count() {
        return Err(AudioError::ChannelMismatch(a.channel_count(), b.channel_count()));
    }
    let len = a.length_frames().max(b.length_frames());
    let channels = a
        .channels()
        .iter()
        .zip(b.channels())
        .map(|(x, y)| {
            (0..len)
                .map(|i| {
                    let s = x.get(i).copied().unwrap_or(0.0) + y.get(i).copied().unwrap_or(0.0);
                    clamp_sample(s)
                })
                .collect()
        })
        .collect();
    Ok(AudioBuffer::from_clamped(a.sample_rate_hz(), channels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(frames: usize) -> AudioBuffer {
        let samples = (0..frames).map(|i| (i as f32 / frames as f32) * 1.6 - 0.8).collect();
        AudioBuffer::mono(16_000, samples).unwrap()
    }

    #[test]
    fn zero_db_is_identity() {
        let b = ramp(1000);
        assert_eq!(apply_gain(&b, 0.0).unwrap(), b);
    }

    #[test]
    fn six_db_doubles() {
        let b = AudioBuffer::mono(16_000, vec![0.25]).unwrap();
        let out = apply_gain(&b, 6.0206).unwrap();
        assert!((out.channel(0)[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn gain_clamps_and_checks_range() {
        let b = AudioBuffer::mono(16_000, vec![0.9, -0.9]).unwrap();
        assert_eq!(apply_gain(&b, 24.0).unwrap().channel(0), &[1.0, -1.0]);
        assert_eq!(apply_gain(&b, 24.5), Err(AudioError::GainOutOfRange(24.5)));
        assert!(apply_gain(&b, -61.0).is_err());
        assert!(apply_gain(&b, f64::NAN).is_err());
    }

    #[test]
    fn trim_examples() {
        let b = AudioBuffer::silence(16_000, 1, 32_000).unwrap();
        assert_eq!(trim(&b, 0.0, b.duration_s()).unwrap(), b);
        assert_eq!(trim(&b, 0.5, 1.0).unwrap().length_frames(), 8000);
        assert!(matches!(trim(&b, 1.0, 0.5), Err(AudioError::RangeInvalid { .. })));
        assert!(trim(&b, -0.1, 0.5).is_err());
        assert!(trim(&b, 0.0, 2.5).is_err());
    }

    #[test]
    fn mix_examples() {
        let x = ramp(500);
        let silence = AudioBuffer::silence(16_000, 1, 200).unwrap();
        assert_eq!(mix(&x, &silence).unwrap(), x);
        let y = ramp(333);
        assert_eq!(mix(&x, &y).unwrap(), mix(&y, &x).unwrap());
        let hot = AudioBuffer::mono(16_000, vec![0.8]).unwrap();
        assert_eq!(mix(&hot, &hot).unwrap().channel(0), &[1.0]);
    }

    #[test]
    fn mix_rejects_mismatch() {
        let a = AudioBuffer::silence(16_000, 1, 4).unwrap();
        let b = AudioBuffer::silence(22_050, 1, 4).unwrap();
        let c = AudioBuffer::silence(16_000, 2, 4).unwrap();
        assert_eq!(mix(&a, &b), Err(AudioError::RateMismatch(16_000, 22_050)));
        assert_eq!(mix(&a, &c), Err(AudioError::ChannelMismatch(1, 2)));
    }
}
