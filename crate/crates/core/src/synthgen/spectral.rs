use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Low-frequency fluctuation band in Hz.
pub const BOLD_BAND: (f64, f64) = (0.01, 0.08);

/// Shortest series accepted by the amplitude measures.
pub const MIN_TIMEPOINTS: usize = 64;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft(series: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = series.iter().map(|&x| Complex::new(x, 0.0)).collect();
    let plan = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(series.len()));
    plan.process(&mut buf);
    buf
}

fn ifft_real(mut buf: Vec<Complex<f64>>) -> Vec<f64> {
    let n = buf.len();
    let plan = PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n));
    plan.process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn in_band(k: usize, n: usize, fs: f64, low: f64, high: f64) -> bool {
    let f = k as f64 * fs / n as f64;
    k > 0 && f >= low && f <= high
}

/// `|X_k|` for `k = 0..=T/2`.
pub fn magnitude_spectrum(series: &[f64]) -> Vec<f64> {
    let spec = fft(series);
    spec[..=series.len() / 2].iter().map(|c| c.norm()).collect()
}

/// Zeroes every frequency bin outside `[low, high]` Hz (DC included).
pub fn bandpass_filter(series: &[f64], low: f64, high: f64, fs: f64) -> Result<Vec<f64>> {
    if !(fs > 0.0 && low > 0.0 && low < high && high < fs / 2.0) {
        return Err(Error::invalid(
            "bandpass_filter",
            format!("band [{low}, {high}] Hz invalid for fs {fs} Hz"),
        ));
    }
    let n = series.len();
    if n < 2 {
        return Err(Error::invalid("bandpass_filter", "series shorter than 2 samples"));
    }
    let mut spec = fft(series);
    for (k, c) in spec.iter_mut().enumerate() {
        let mirror = if k == 0 { 0 } else { n - k };
        if !in_band(k.min(mirror), n, fs, low, high) {
            *c = Complex::new(0.0, 0.0);
        }
    }
    Ok(ifft_real(spec))
}

fn band_bins(n: usize, fs: f64) -> Result<Vec<usize>> {
    if n < MIN_TIMEPOINTS {
        return Err(Error::invalid(
            "alff",
            format!("need at least {MIN_TIMEPOINTS} timepoints, got {n}"),
        ));
    }
    let bins: Vec<usize> = (1..=n / 2)
        .filter(|&k| in_band(k, n, fs, BOLD_BAND.0, BOLD_BAND.1))
        .collect();
    if bins.is_empty() {
        return Err(Error::invalid(
            "alff",
            format!("no frequency bins inside {BOLD_BAND:?} Hz for T={n}, fs={fs}"),
        ));
    }
    Ok(bins)
}

/// Mean single-sided amplitude (`2|X_k|/T`) over in-band bins.
pub fn compute_alff(series: &[f64], fs: f64) -> Result<f64> {
    let n = series.len();
    let bins = band_bins(n, fs)?;
    let mag = magnitude_spectrum(series);
    let total: f64 = bins.iter().map(|&k| 2.0 * mag[k] / n as f64).sum();
    Ok(total / bins.len() as f64)
}

/// In-band amplitude over amplitude summed from the first bin to Nyquist.
pub fn compute_falff(series: &[f64], fs: f64) -> Result<f64> {
    let n = series.len();
    let bins = band_bins(n, fs)?;
    let mag = magnitude_spectrum(series);
    let full: f64 = mag[1..].iter().sum();
    if full <= 0.0 {
        return Err(Error::invalid("compute_falff", "series has no non-DC spectral amplitude"));
    }
    let band: f64 = bins.iter().map(|&k| mag[k]).sum();
    Ok(band / full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    // fs = 0.5 Hz, T = 200 puts 0.05 Hz on bin 20 and 0.2 Hz on bin 80.
    const FS: f64 = 0.5;
    const T: usize = 200;

    fn tone(freq: f64, amp: f64) -> Vec<f64> {
        (0..T).map(|t| amp * (2.0 * PI * freq * t as f64 / FS).sin()).collect()
    }

    #[test]
    fn in_band_tone_passes() {
        let x = tone(0.05, 1.0);
        let y = bandpass_filter(&x, 0.01, 0.08, FS).unwrap();
        let peak_in = x.iter().cloned().fold(0.0, f64::max);
        let peak_out = y.iter().cloned().fold(0.0, f64::max);
        assert!((peak_out / peak_in - 1.0).abs() < 1e-6);
    }

    #[test]
    fn out_of_band_tone_removed() {
        let y = bandpass_filter(&tone(0.2, 1.0), 0.01, 0.08, FS).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn invalid_band_rejected() {
        assert!(bandpass_filter(&tone(0.05, 1.0), 0.08, 0.01, FS).is_err());
        assert!(bandpass_filter(&tone(0.05, 1.0), 0.01, 0.3, FS).is_err());
    }

    #[test]
    fn alff_of_zero_is_zero() {
        assert_eq!(compute_alff(&[0.0; 128], FS).unwrap(), 0.0);
    }

    #[test]
    fn alff_on_bin_tone() {
        // Direct DFT at bin 20 gives the single-sided amplitude of the tone.
        let x = tone(0.05, 1.0);
        let (re, im) = x.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, v)| {
            let ph = -2.0 * PI * 20.0 * t as f64 / T as f64;
            (re + v * ph.cos(), im + v * ph.sin())
        });
        let amp = 2.0 * (re * re + im * im).sqrt() / T as f64;
        let n_band = (1..=T / 2)
            .filter(|&k| {
                let f = k as f64 * FS / T as f64;
                (0.01..=0.08).contains(&f)
            })
            .count();
        let alff = compute_alff(&x, FS).unwrap();
        assert!((alff - amp / n_band as f64).abs() < 1e-12, "{alff}");
        assert!((amp - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alff_scales_with_abs_c() {
        let x = tone(0.05, 1.0);
        let base = compute_alff(&x, FS).unwrap();
        let neg: Vec<f64> = x.iter().map(|v| -3.0 * v).collect();
        assert!((compute_alff(&neg, FS).unwrap() - 3.0 * base).abs() < 1e-12);
    }

    #[test]
    fn alff_needs_band_bins() {
        assert!(compute_alff(&[1.0; 32], FS).is_err());
    }

    #[test]
    fn falff_extremes_and_split() {
        assert!((compute_falff(&tone(0.05, 1.0), FS).unwrap() - 1.0).abs() < 1e-9);
        assert!(compute_falff(&tone(0.2, 1.0), FS).unwrap().abs() < 1e-9);
        let mixed: Vec<f64> = tone(0.05, 1.0).iter().zip(tone(0.2, 1.0)).map(|(a, b)| a + b).collect();
        assert!((compute_falff(&mixed, FS).unwrap() - 0.5).abs() < 1e-6);
        assert!(compute_falff(&[0.0; 128], FS).is_err());
    }
}
