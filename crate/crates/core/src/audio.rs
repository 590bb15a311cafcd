use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AudioError {
    #[error("audio must have 1 or 2 channels, got {0}")]
    ChannelCount(usize),
    #[error("sample rate must be positive")]
    SampleRate,
    #[error("channel {channel} has {len} samples, expected {expected}")]
    RaggedChannels { channel: usize, len: usize, expected: usize },
    #[error("channel {channel} sample {index} is {value}, outside [-1, 1] or not finite")]
    SampleRange { channel: usize, index: usize, value: f32 },
}

/// Multi-channel PCM audio, one `Vec` per channel, amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    sample_rate: u32,
    channels: Vec<Vec<f32>>,
}

impl AudioBuffer {
    pub fn new(sample_rate: u32, channels: Vec<Vec<f32>>) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::SampleRate);
        }
        if channels.is_empty() || channels.len() > 2 {
            return Err(AudioError::ChannelCount(channels.len()));
        }
        let expected = channels[0].len();
        for (c, ch) in channels.iter().enumerate() {
            if ch.len() != expected {
                return Err(AudioError::RaggedChannels { channel: c, len: ch.len(), expected });
            }
            if let Some((index, &value)) =
                ch.iter().enumerate().find(|(_, s)| !(s.is_finite() && s.abs() <= 1.0))
            {
                return Err(AudioError::SampleRange { channel: c, index, value });
            }
        }
        Ok(Self { sample_rate, channels })
    }

    pub fn mono(sample_rate: u32, samples: Vec<f32>) -> Result<Self, AudioError> {
        Self::new(sample_rate, vec![samples])
    }

    pub fn stereo(sample_rate: u32, left: Vec<f32>, right: Vec<f32>) -> Result<Self, AudioError> {
        Self::new(sample_rate, vec![left, right])
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f32>> {
        self.channels
    }

    /// Single-channel buffer holding channel `c`.
    pub fn extract(&self, c: usize) -> AudioBuffer {
        AudioBuffer { sample_rate: self.sample_rate, channels: vec![self.channels[c].clone()] }
    }
}

/// RMS level in dBFS, floored at `floor_db` for silent input.
pub fn rms_db(samples: &[f32], floor_db: f64) -> f64 {
    if samples.is_empty() {
        return floor_db;
    }
    let energy: f64 = samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
    let rms = (energy / samples.len() as f64).sqrt();
    if rms <= 0.0 {
        floor_db
    } else {
        (20.0 * rms.log10()).max(floor_db)
    }
}
