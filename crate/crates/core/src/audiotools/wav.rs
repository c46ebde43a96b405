//! RIFF/WAVE reading and canonical writing for 16-bit PCM and 32-bit float.

use super::{AudioBuffer, AudioError, MAX_SAMPLE_RATE, MIN_SAMPLE_RATE};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

impl SampleFormat {
    fn bits(self) -> u16 {
        match self {
            SampleFormat::Pcm16 => 16,
            SampleFormat::Float32 => 32,
        }
    }

    fn tag(self) -> u16 {
        match self {
            SampleFormat::Pcm16 => FORMAT_PCM,
            SampleFormat::Float32 => FORMAT_FLOAT,
        }
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

struct Fmt {
    format: SampleFormat,
    channels: usize,
    sample_rate: u32,
    block_align: usize,
}

fn parse_fmt(body: &[u8]) -> Result<Fmt, AudioError> {
    if body.len() < 16 {
        return Err(AudioError::CorruptHeader(format!("fmt chunk of {} bytes", body.len())));
    }
    let mut tag = u16_at(body, 0);
    let channels = u16_at(body, 2) as usize;
    let sample_rate = u32_at(body, 4);
    let block_align = u16_at(body, 12) as usize;
    let bits = u16_at(body, 14);
    if tag == FORMAT_EXTENSIBLE {
        if body.len() < 40 {
            return Err(AudioError::CorruptHeader("short WAVE_FORMAT_EXTENSIBLE".into()));
        }
        // first two bytes of the sub-format GUID carry the real format tag
        tag = u16_at(body, 24);
    }
    let format = match (tag, bits) {
        (FORMAT_PCM, 16) => SampleFormat::Pcm16,
        (FORMAT_FLOAT, 32) => SampleFormat::Float32,
        (t, b) => {
            return Err(AudioError::UnsupportedFormat(format!(
                "format tag {t} with {b} bits per sample"
            )))
        }
    };
    if !(1..=2).contains(&channels) {
        return Err(AudioError::UnsupportedFormat(format!("{channels} channels")));
    }
    if !(MIN_SAMPLE_RATE..=MAX_SAMPLE_RATE).contains(&sample_rate) {
        return Err(AudioError::UnsupportedFormat(format!("sample rate {sample_rate}")));
    }
    if block_align != channels * (bits as usize / 8) {
        return Err(AudioError::CorruptHeader(format!("block align {block_align}")));
    }
    Ok(Fmt {
        format,
        channels,
        sample_rate,
        block_align,
    })
}

pub fn parse_wav(bytes: &[u8]) -> Result<AudioBuffer, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::CorruptHeader("missing RIFF/WAVE signature".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<Fmt> = None;
    loop {
        if pos + 8 > bytes.len() {
            return Err(AudioError::CorruptHeader(if fmt.is_none() {
                "no fmt chunk".into()
            } else {
                "no data chunk".into()
            }));
        }
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        match id {
            b"fmt " => {
                let end = body_start
                    .checked_add(size)
                    .filter(|&e| e <= bytes.len())
                    .ok_or_else(|| AudioError::CorruptHeader("fmt chunk past end of file".into()))?;
                fmt = Some(parse_fmt(&bytes[body_start..end])?);
            }
            b"data" => {
                let fmt = fmt.ok_or_else(|| AudioError::CorruptHeader("data chunk before fmt chunk".into()))?;
                let available = bytes.len() - body_start;
                if size > available {
                    return Err(AudioError::TruncatedData(format!(
                        "data chunk declares {size} bytes, {available} present"
                    )));
                }
                if !size.is_multiple_of(fmt.block_align) {
                    return Err(AudioError::TruncatedData(format!(
                        "{size} data bytes is not a whole number of frames"
                    )));
                }
                return Ok(decode_samples(&fmt, &bytes[body_start..body_start + size]));
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body_start.saturating_add(size).saturating_add(size & 1);
    }
}

fn decode_samples(fmt: &Fmt, data: &[u8]) -> AudioBuffer {
    let frames = data.len() / fmt.block_align;
    let mut channels = vec![Vec::with_capacity(frames); fmt.channels];
    for frame in data.chunks_exact(fmt.block_align) {
        for (ch, out) in channels.iter_mut().enumerate() {
            let s = match fmt.format {
                SampleFormat::Pcm16 => i16::from_le_bytes([frame[2 * ch], frame[2 * ch + 1]]) as f32 / 32768.0,
                SampleFormat::Float32 => {
                    let at = 4 * ch;
                    f32::from_le_bytes([frame[at], frame[at + 1], frame[at + 2], frame[at + 3]])
                }
            };
            out.push(s);
        }
    }
    AudioBuffer::from_clamped(fmt.sample_rate, channels)
}

fn pcm16(x: f32) -> i16 {
    // f64::round rounds half away from zero
    (x as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes a canonical minimal RIFF file: a 16-byte fmt chunk then data.
pub fn write_wav(buf: &AudioBuffer, format: SampleFormat) -> Vec<u8> {
    let channels = buf.channel_count() as u16;
    let block_align = channels * format.bits() / 8;
    let data_len = buf.length_frames() * block_align as usize;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format.tag().to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&buf.sample_rate_hz().to_le_bytes());
    out.extend_from_slice(&(buf.sample_rate_hz() * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&format.bits().to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..buf.length_frames() {
        for ch in buf.channels() {
            match format {
                SampleFormat::Pcm16 => out.extend_from_slice(&pcm16(ch[i]).to_le_bytes()),
                SampleFormat::Float32 => out.extend_from_slice(&ch[i].to_le_bytes()),
            }
        }
    }
    out
}
