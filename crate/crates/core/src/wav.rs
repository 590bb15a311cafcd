//! RIFF/WAVE decoding and PCM16 encoding.
//!
//! Decoding accepts PCM 16-bit, PCM 24-bit and IEEE float (32/64-bit),
//! mono or stereo, at any sample rate, including `WAVE_FORMAT_EXTENSIBLE`
//! headers wrapping those formats. Integer samples are normalised by the
//! magnitude of the type's most negative value, so `-32768` maps to `-1.0`.
//! Float samples are clamped into `[-1, 1]`.

use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError};

const FORMAT_PCM: u16 = 0x0001;
const FORMAT_FLOAT: u16 = 0x0003;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed RIFF header: {0}")]
    Malformed(String),
    #[error("unsupported codec: format tag {format_tag:#06x}, {bits} bits per sample")]
    Unsupported { format_tag: u16, bits: u16 },
    #[error("truncated data chunk: header declares {declared} bytes, file holds {available}")]
    Truncated { declared: usize, available: usize },
    #[error("non-finite float sample at frame {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Debug, Clone, Copy)]
enum SampleFormat {
    Pcm16,
    Pcm24,
    Float32,
    Float64,
}

impl SampleFormat {
    fn bytes(self) -> usize {
        match self {
            SampleFormat::Pcm16 => 2,
            SampleFormat::Pcm24 => 3,
            SampleFormat::Float32 => 4,
            SampleFormat::Float64 => 8,
        }
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, WavError> {
    let bytes = std::fs::read(path)?;
    decode_wav(&bytes)
}

pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer, WavError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(WavError::Malformed("missing RIFF/WAVE signature".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(SampleFormat, usize, u32)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = LittleEndian::read_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + size > bytes.len() {
                    return Err(WavError::Malformed("fmt chunk too short".into()));
                }
                fmt = Some(parse_fmt(&bytes[body..body + size])?);
            }
            b"data" => {
                let (format, channels, rate) =
                    fmt.ok_or_else(|| WavError::Malformed("data chunk before fmt chunk".into()))?;
                let available = bytes.len() - body;
                if size > available {
                    return Err(WavError::Truncated { declared: size, available });
                }
                return decode_samples(&bytes[body..body + size], format, channels, rate);
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body + size + (size & 1);
    }
    Err(WavError::Malformed("no data chunk".into()))
}

fn parse_fmt(body: &[u8]) -> Result<(SampleFormat, usize, u32), WavError> {
    let mut tag = LittleEndian::read_u16(&body[0..2]);
    let channels = LittleEndian::read_u16(&body[2..4]) as usize;
    let rate = LittleEndian::read_u32(&body[4..8]);
    let bits = LittleEndian::read_u16(&body[14..16]);
    if tag == FORMAT_EXTENSIBLE {
        if body.len() < 40 {
            return Err(WavError::Malformed("extensible fmt chunk too short".into()));
        }
        // first two bytes of the sub-format GUID carry the real tag
        tag = LittleEndian::read_u16(&body[24..26]);
    }
    if channels == 0 || rate == 0 {
        return Err(WavError::Malformed(format!("{channels} channels at {rate} Hz")));
    }
    let format = match (tag, bits) {
        (FORMAT_PCM, 16) => SampleFormat::Pcm16,
        (FORMAT_PCM, 24) => SampleFormat::Pcm24,
        (FORMAT_FLOAT, 32) => SampleFormat::Float32,
        (FORMAT_FLOAT, 64) => SampleFormat::Float64,
        (format_tag, bits) => return Err(WavError::Unsupported { format_tag, bits }),
    };
    if channels > 2 {
        return Err(WavError::Audio(AudioError::ChannelCount(channels)));
    }
    Ok((format, channels, rate))
}

fn decode_samples(
    data: &[u8],
    format: SampleFormat,
    n_channels: usize,
    rate: u32,
) -> Result<AudioBuffer, WavError> {
    let frame_bytes = format.bytes() * n_channels;
    let n_frames = data.len() / frame_bytes;
    let mut channels = vec![Vec::with_capacity(n_frames); n_channels];
    for (i, frame) in data.chunks_exact(frame_bytes).enumerate() {
        for (c, raw) in frame.chunks_exact(format.bytes()).enumerate() {
            let s = match format {
                SampleFormat::Pcm16 => LittleEndian::read_i16(raw) as f32 / 32768.0,
                SampleFormat::Pcm24 => LittleEndian::read_i24(raw) as f32 / 8_388_608.0,
                SampleFormat::Float32 => finite(LittleEndian::read_f32(raw) as f64, i)?,
                SampleFormat::Float64 => finite(LittleEndian::read_f64(raw), i)?,
            };
            channels[c].push(s);
        }
    }
    Ok(AudioBuffer::new(rate, channels)?)
}

fn finite(v: f64, frame: usize) -> Result<f32, WavError> {
    if !v.is_finite() {
        return Err(WavError::NonFinite(frame));
    }
    Ok(v.clamp(-1.0, 1.0) as f32)
}

/// Encode as interleaved PCM16.
pub fn encode_wav_pcm16(audio: &AudioBuffer) -> Vec<u8> {
    let n_ch = audio.n_channels();
    let data_len = audio.len() * n_ch * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.write_u32::<LittleEndian>((36 + data_len) as u32).unwrap();
    out.extend_from_slice(b"WAVEfmt ");
    out.write_u32::<LittleEndian>(16).unwrap();
    out.write_u16::<LittleEndian>(FORMAT_PCM).unwrap();
    out.write_u16::<LittleEndian>(n_ch as u16).unwrap();
    out.write_u32::<LittleEndian>(audio.sample_rate()).unwrap();
    out.write_u32::<LittleEndian>(audio.sample_rate() * n_ch as u32 * 2).unwrap();
    out.write_u16::<LittleEndian>(n_ch as u16 * 2).unwrap();
    out.write_u16::<LittleEndian>(16).unwrap();
    out.extend_from_slice(b"data");
    out.write_u32::<LittleEndian>(data_len as u32).unwrap();
    for i in 0..audio.len() {
        for c in 0..n_ch {
            out.write_i16::<LittleEndian>(quantize16(audio.channel(c)[i])).unwrap();
        }
    }
    out
}

pub fn write_wav_pcm16(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<(), WavError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_wav_pcm16(audio))?;
    Ok(())
}

fn quantize16(s: f32) -> i16 {
    (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(tag: u16, channels: u16, rate: u32, bits: u16, data_len: u32) -> Vec<u8> {
        let block = channels * bits / 8;
        let mut v = Vec::new();
        v.extend_from_slice(b"RIFF");
        v.write_u32::<LittleEndian>(36 + data_len).unwrap();
        v.extend_from_slice(b"WAVEfmt ");
        v.write_u32::<LittleEndian>(16).unwrap();
        v.write_u16::<LittleEndian>(tag).unwrap();
        v.write_u16::<LittleEndian>(channels).unwrap();
        v.write_u32::<LittleEndian>(rate).unwrap();
        v.write_u32::<LittleEndian>(rate * block as u32).unwrap();
        v.write_u16::<LittleEndian>(block).unwrap();
        v.write_u16::<LittleEndian>(bits).unwrap();
        v.extend_from_slice(b"data");
        v.write_u32::<LittleEndian>(data_len).unwrap();
        v
    }

    #[test]
    fn stereo_silence() {
        let mut bytes = header(FORMAT_PCM, 2, 16000, 16, 16000 * 4);
        bytes.resize(bytes.len() + 16000 * 4, 0);
        let audio = decode_wav(&bytes).unwrap();
        assert_eq!(audio.n_channels(), 2);
        assert_eq!(audio.sample_rate(), 16000);
        assert_eq!(audio.len(), 16000);
        assert!(audio.channels().iter().all(|c| c.iter().all(|&s| s == 0.0)));
    }

    #[test]
    fn integer_normalization_edges() {
        let mut bytes = header(FORMAT_PCM, 1, 8000, 16, 4);
        bytes.write_i16::<LittleEndian>(-32768).unwrap();
        bytes.write_i16::<LittleEndian>(16384).unwrap();
        let audio = decode_wav(&bytes).unwrap();
        assert_eq!(audio.channel(0), &[-1.0, 0.5]);

        let mut bytes = header(FORMAT_PCM, 1, 8000, 24, 6);
        bytes.write_i24::<LittleEndian>(-8_388_608).unwrap();
        bytes.write_i24::<LittleEndian>(4_194_304).unwrap();
        assert_eq!(decode_wav(&bytes).unwrap().channel(0), &[-1.0, 0.5]);
    }

    #[test]
    fn float_samples_clamped() {
        let mut bytes = header(FORMAT_FLOAT, 1, 8000, 32, 8);
        bytes.write_f32::<LittleEndian>(1.5).unwrap();
        bytes.write_f32::<LittleEndian>(-0.25).unwrap();
        assert_eq!(decode_wav(&bytes).unwrap().channel(0), &[1.0, -0.25]);

        let mut bytes = header(FORMAT_FLOAT, 1, 8000, 32, 4);
        bytes.write_f32::<LittleEndian>(f32::NAN).unwrap();
        assert!(matches!(decode_wav(&bytes), Err(WavError::NonFinite(0))));
    }

    #[test]
    fn distinct_errors() {
        let mut bytes = header(FORMAT_PCM, 1, 8000, 16, 1000);
        bytes.resize(bytes.len() + 10, 0);
        assert!(matches!(
            decode_wav(&bytes),
            Err(WavError::Truncated { declared: 1000, available: 10 })
        ));
        assert!(matches!(decode_wav(b"RIFX0000WAVE"), Err(WavError::Malformed(_))));
        let bytes = header(0x0055, 1, 8000, 16, 0);
        assert!(matches!(decode_wav(&bytes), Err(WavError::Unsupported { format_tag: 0x55, .. })));
        let bytes = header(FORMAT_PCM, 1, 8000, 8, 0);
        assert!(matches!(decode_wav(&bytes), Err(WavError::Unsupported { bits: 8, .. })));
    }

    #[test]
    fn pcm16_round_trip_is_bit_exact() {
        let left: Vec<f32> = (0..100).map(|i| ((i as f32) * 0.37).sin() * 0.8).collect();
        let right: Vec<f32> = left.iter().map(|s| -s * 0.5).collect();
        let audio = AudioBuffer::stereo(22050, left, right).unwrap();
        let once = decode_wav(&encode_wav_pcm16(&audio)).unwrap();
        let twice = decode_wav(&encode_wav_pcm16(&once)).unwrap();
        assert_eq!(once, twice);
        for (a, b) in audio.channel(0).iter().zip(once.channel(0)) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn skips_unknown_chunks() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF\0\0\0\0WAVE");
        bytes.extend_from_slice(b"LIST");
        bytes.write_u32::<LittleEndian>(3).unwrap();
        bytes.extend_from_slice(&[1, 2, 3, 0]); // odd size + pad byte
        let h = header(FORMAT_PCM, 1, 8000, 16, 2);
        bytes.extend_from_slice(&h[12..]);
        bytes.write_i16::<LittleEndian>(0).unwrap();
        assert_eq!(decode_wav(&bytes).unwrap().len(), 1);
    }
}
