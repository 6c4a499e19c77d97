//! Spectral helpers: FFT plan cache, windows, STFT magnitudes, mel filter
//! banks and the orthonormal DCT-II.
//!
//! STFT magnitudes are scaled by `1 / sqrt(sum(w^2))` so that the spectra of
//! different window sizes sit on a comparable scale. Frames start at sample 0
//! and the tail is zero padded so that every sample lands in some frame.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<(FftPlanner<f32>, HashMap<(usize, bool), Arc<dyn Fft<f32>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

/// Cached FFT plan of length `n` (`inverse` selects the unnormalized inverse).
pub fn fft_plan(n: usize, inverse: bool) -> Arc<dyn Fft<f32>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let (planner, cache) = &mut *p;
        cache
            .entry((n, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| {
            let x = std::f64::consts::PI * i as f64 / n as f64;
            (x.sin() * x.sin()) as f32
        })
        .collect()
}

pub fn window_norm(window: &[f32]) -> f32 {
    let e: f64 = window.iter().map(|&w| (w as f64) * (w as f64)).sum();
    (1.0 / e.sqrt()) as f32
}

/// Frames needed to cover `n` samples with the given window and hop.
pub fn frame_count(n: usize, win: usize, hop: usize) -> usize {
    if n <= win {
        1
    } else {
        1 + (n - win).div_ceil(hop)
    }
}

/// Windowed complex spectrum of every frame: `[frames x (win/2+1)]`.
///
/// `win` doubles as the FFT size.
pub fn stft(x: &[f32], window: &[f32], hop: usize) -> (usize, usize, Vec<Complex32>) {
    let win = window.len();
    let bins = win / 2 + 1;
    let frames = frame_count(x.len(), win, hop);
    let plan = fft_plan(win, false);
    let norm = window_norm(window);
    let mut out = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex32::new(0.0, 0.0); win];
    for f in 0..frames {
        let start = f * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            let s = x.get(start + i).copied().unwrap_or(0.0);
            *b = Complex32::new(s * window[i] * norm, 0.0);
        }
        plan.process(&mut buf);
        out.extend_from_slice(&buf[..bins]);
    }
    (frames, bins, out)
}

/// Magnitude STFT: `[frames x bins]` row-major.
pub fn stft_magnitude(x: &[f32], window: &[f32], hop: usize) -> (usize, usize, Vec<f32>) {
    let (frames, bins, spec) = stft(x, window, hop);
    (frames, bins, spec.iter().map(|c| c.norm()).collect())
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filter bank (HTK mel scale, unit peak) laid out as
/// `[bins x n_mels]` so that `magnitudes . bank` gives mel energies.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Vec<f32> {
    let bins = n_fft / 2 + 1;
    let fmax = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(fmax);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut bank = vec![0.0f32; bins * n_mels];
    for b in 0..bins {
        let f = b as f64 * sample_rate as f64 / n_fft as f64;
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            bank[b * n_mels + m] = w as f32;
        }
    }
    bank
}

/// Mel spectrogram `[frames x n_mels]` from magnitudes.
pub fn mel_spectrogram(
    x: &[f32],
    sample_rate: u32,
    win: usize,
    hop: usize,
    n_mels: usize,
) -> (usize, Vec<f32>) {
    let window = hann(win);
    let (frames, bins, mag) = stft_magnitude(x, &window, hop);
    let bank = mel_filterbank(sample_rate, win, n_mels);
    (frames, crate::kernels::matmul(&mag, frames, bins, &bank, n_mels))
}

/// Orthonormal DCT-II.
pub fn dct2_ortho(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let nf = n as f64;
    (0..n)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * nf)).cos())
                .sum();
            let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
            s * scale
        })
        .collect()
}
