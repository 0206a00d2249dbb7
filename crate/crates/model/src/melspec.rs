//! Differentiable spectrogram/mel pipeline used by the reconstruction loss.
//!
//! The STFT is a strided convolution with fixed windowed DFT basis kernels,
//! so gradients flow into generated audio through ordinary conv backward.
//! Filterbank and framing match the deterministic front end exactly; parity
//! is pinned by tests against `hiervc_core`.

use candle_core::{DType, Device, Tensor};
use hiervc_core::stft::{hann_window, mel_filterbank};
use hiervc_core::AudioConfig;

use crate::error::{ModelError, Result};

/// Frame a mono signal into overlapping windows: [B, 1, T] -> [B, frames, len].
/// Gather-based so both the forward and the scatter-add backward run as
/// indexing plus gemm rather than the slow direct conv path.
pub fn frame_signal(x: &Tensor, frame_len: usize, hop: usize) -> Result<Tensor> {
    let (b, c, t) = x.dims3()?;
    if c != 1 {
        return Err(ModelError::validation("expected mono audio [B, 1, T]"));
    }
    if t < frame_len {
        return Err(ModelError::validation(format!(
            "signal of {t} samples is shorter than one {frame_len}-sample frame"
        )));
    }
    let frames = (t - frame_len) / hop + 1;
    let mut idx = Vec::with_capacity(frames * frame_len);
    for f in 0..frames {
        let base = (f * hop) as u32;
        idx.extend((0..frame_len as u32).map(|i| base + i));
    }
    let idx = Tensor::from_vec(idx, frames * frame_len, x.device())?;
    Ok(x.reshape((b, t))?
        .index_select(&idx, 1)?
        .reshape((b, frames, frame_len))?)
}

/// Windowed DFT basis, `[frame_len, 2 * bins]`: cosine columns then negated
/// sine columns, so `frames x basis` yields stacked real/imaginary parts.
pub fn dft_basis(frame_len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let bins = frame_len / 2 + 1;
    let window = hann_window(frame_len);
    let mut basis = vec![0.0f64; frame_len * 2 * bins];
    for n in 0..frame_len {
        for k in 0..bins {
            let angle = 2.0 * std::f64::consts::PI * (k * n) as f64 / frame_len as f64;
            basis[n * 2 * bins + k] = angle.cos() * window[n];
            basis[n * 2 * bins + bins + k] = -angle.sin() * window[n];
        }
    }
    Ok(Tensor::from_vec(basis, (frame_len, 2 * bins), device)?.to_dtype(dtype)?)
}

pub struct MelAnalyzer {
    basis: Tensor, // [n_fft, 2*bins]
    fb: Tensor,    // [n_mels, bins]
    pub cfg: AudioConfig,
    pad: usize,
    mag_eps: f64,
}

impl MelAnalyzer {
    pub fn new(cfg: &AudioConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        if cfg.win_length != cfg.n_fft {
            return Err(ModelError::config("analysis window must fill the FFT frame"));
        }
        let basis = dft_basis(cfg.n_fft, dtype, device)?;
        let fb_mat = mel_filterbank(cfg);
        let fb = Tensor::from_vec(fb_mat.data.clone(), (fb_mat.rows, fb_mat.cols), device)?
            .to_dtype(dtype)?;
        // Gradient guard inside the magnitude sqrt; small enough that silent
        // bins stay far below the log floor.
        let mag_eps = match dtype {
            DType::F64 => 1e-18,
            _ => 1e-10,
        };
        Ok(Self { basis, fb, cfg: cfg.clone(), pad: (cfg.n_fft - cfg.hop) / 2, mag_eps })
    }

    fn reflect_pad(&self, x: &Tensor) -> Result<Tensor> {
        let t = *x.dims().last().expect("non-empty shape");
        if self.pad >= t {
            return Err(ModelError::validation(format!(
                "waveform of {t} samples is too short for reflect padding {}",
                self.pad
            )));
        }
        let mut idx = Vec::with_capacity(t + 2 * self.pad);
        for i in (1..=self.pad).rev() {
            idx.push(i as u32);
        }
        idx.extend(0..t as u32);
        for i in 0..self.pad {
            idx.push((t - 2 - i) as u32);
        }
        let idx = Tensor::from_vec(idx, t + 2 * self.pad, x.device())?;
        Ok(x.index_select(&idx, candle_core::D::Minus1)?)
    }

    /// Magnitude spectrogram: audio [B, 1, T] -> [B, bins, T/hop].
    pub fn linear(&self, audio: &Tensor) -> Result<Tensor> {
        let (_b, c, t) = audio.dims3()?;
        if c != 1 {
            return Err(ModelError::validation("expected mono audio [B, 1, T]"));
        }
        if t < self.cfg.win_length || t % self.cfg.hop != 0 {
            return Err(ModelError::validation(format!(
                "audio length {t} must be a hop multiple of at least one window"
            )));
        }
        let padded = self.reflect_pad(audio)?;
        let bins = self.cfg.bins();
        let frames = frame_signal(&padded, self.cfg.n_fft, self.cfg.hop)?;
        let ri = frames.broadcast_matmul(&self.basis)?.transpose(1, 2)?; // [B, 2*bins, F]
        let re = ri.narrow(1, 0, bins)?;
        let im = ri.narrow(1, bins, bins)?;
        Ok(((re.sqr()? + im.sqr()?)? + self.mag_eps)?.sqrt()?)
    }

    /// Log-mel: audio [B, 1, T] -> [B, n_mels, T/hop].
    pub fn mel(&self, audio: &Tensor) -> Result<Tensor> {
        let spec = self.linear(audio)?;
        self.mel_of_linear(&spec)
    }

    pub fn mel_of_linear(&self, spec: &Tensor) -> Result<Tensor> {
        let mel = self.fb.broadcast_matmul(spec)?;
        Ok(mel.maximum(self.cfg.log_floor)?.log()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hiervc_core::{SpectrumAnalyzer, Waveform};

    fn tone(len: usize) -> Vec<f64> {
        (0..len)
            .map(|n| {
                (2.0 * std::f64::consts::PI * 220.0 * n as f64 / 16000.0).sin() * 0.4
                    + (2.0 * std::f64::consts::PI * 1330.0 * n as f64 / 16000.0).sin() * 0.1
            })
            .collect()
    }

    #[test]
    fn parity_with_front_end_mel() {
        let cfg = AudioConfig::default();
        let analyzer = MelAnalyzer::new(&cfg, DType::F64, &Device::Cpu).unwrap();
        let samples = tone(9600);

        let wave = Waveform::new(samples.clone(), 16000).unwrap();
        let reference = SpectrumAnalyzer::new(cfg.clone()).unwrap().mel_spectrogram(&wave).unwrap();

        let x = Tensor::from_vec(samples, (1, 1, 9600), &Device::Cpu).unwrap();
        let mel = analyzer.mel(&x).unwrap();
        assert_eq!(mel.dims(), &[1, 80, 30]);

        let got = mel.squeeze(0).unwrap();
        let mut max_err = 0.0f64;
        for m in 0..80 {
            for t in 0..30 {
                let a = got.get(m).unwrap().get(t).unwrap().to_scalar::<f64>().unwrap();
                let b = reference.values.at(m, t);
                max_err = max_err.max((a - b).abs());
            }
        }
        assert!(max_err < 1e-4, "mel parity error {max_err}");
    }

    #[test]
    fn gradient_flows_to_audio() {
        let cfg = AudioConfig::default();
        let analyzer = MelAnalyzer::new(&cfg, DType::F64, &Device::Cpu).unwrap();
        let x = candle_core::Var::from_tensor(
            &Tensor::randn(0f64, 0.1f64, (1, 1, 3200), &Device::Cpu).unwrap(),
        )
        .unwrap();
        let mel = analyzer.mel(x.as_tensor()).unwrap();
        let grads = mel.mean_all().unwrap().backward().unwrap();
        let g = grads.get(&x).expect("gradient w.r.t. audio");
        let norm = g.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(norm > 0.0);
    }

    #[test]
    fn rejects_non_hop_lengths() {
        let cfg = AudioConfig::default();
        let analyzer = MelAnalyzer::new(&cfg, DType::F64, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 1, 3201), DType::F64, &Device::Cpu).unwrap();
        assert!(analyzer.mel(&x).is_err());
    }
}
