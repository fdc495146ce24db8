//! Mel-spectrogram frontend: STFT magnitudes, triangular mel filterbank,
//! log compression, and corpus normalization statistics.
//!
//! The STFT is evaluated as two matrix products against precomputed
//! window-folded cosine/sine tables rather than through an FFT. At the
//! transform sizes used here the GEMM route costs well under one percent
//! of a training step, keeps every reduction in a fixed order, and makes
//! the magnitude adjoint a pair of transposed products followed by
//! overlap-add, so the same tables serve inference and gradients.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::FeatureMap;
use crate::num::{gemm, MatView, Real};
use crate::tensor::Tensor;

/// Floor applied to mel values before the base-10 log.
pub const LOG_MEL_FLOOR: f64 = 1e-10;
/// Smallest admissible per-bin standard deviation.
pub const MIN_FEATURE_STD: f64 = 1e-8;

/// Analysis configuration for the conditioning features.
#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub sample_rate: f64,
    pub fft_size: usize,
    pub hop_size: usize,
    pub win_size: usize,
    pub num_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: 22050.0,
            fft_size: 1024,
            hop_size: 256,
            win_size: 1024,
            num_mels: 80,
            fmin: 80.0,
            fmax: 7600.0,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0) {
            return Err(Error::config(format!("sample rate {} must be positive", self.sample_rate)));
        }
        if self.fft_size < 2 {
            return Err(Error::config(format!("fft size {} is too small", self.fft_size)));
        }
        if self.hop_size == 0 {
            return Err(Error::config("hop size must be at least 1".to_string()));
        }
        if self.win_size == 0 || self.win_size > self.fft_size {
            return Err(Error::config(format!(
                "window size {} must lie in [1, fft size {}]",
                self.win_size, self.fft_size
            )));
        }
        if self.num_mels == 0 {
            return Err(Error::config("mel band count must be at least 1".to_string()));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate / 2.0) {
            return Err(Error::config(format!(
                "frequency range [{}, {}] must satisfy 0 <= fmin < fmax <= {}",
                self.fmin,
                self.fmax,
                self.sample_rate / 2.0
            )));
        }
        Ok(())
    }

    /// FNV-1a hash over a canonical encoding of every analysis choice,
    /// including the fixed window and padding conventions. Two feature
    /// grids are comparable only if their fingerprints agree.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(b"hann/reflect/log10");
        eat(&self.sample_rate.to_le_bytes());
        eat(&(self.fft_size as u64).to_le_bytes());
        eat(&(self.hop_size as u64).to_le_bytes());
        eat(&(self.win_size as u64).to_le_bytes());
        eat(&(self.num_mels as u64).to_le_bytes());
        eat(&self.fmin.to_le_bytes());
        eat(&self.fmax.to_le_bytes());
        h
    }
}

/// Normalized log-mel grid plus the provenance needed to interpret it.
#[derive(Debug, Clone)]
pub struct MelSpectrogram<T> {
    map: FeatureMap<T>,
    sample_rate: f64,
    hop_size: usize,
    fingerprint: u64,
}

impl<T: Real> MelSpectrogram<T> {
    pub fn new(map: FeatureMap<T>, sample_rate: f64, hop_size: usize, fingerprint: u64) -> Self {
        MelSpectrogram { map, sample_rate, hop_size, fingerprint }
    }

    pub fn num_mels(&self) -> usize {
        self.map.channels()
    }

    pub fn frames(&self) -> usize {
        self.map.time()
    }

    pub fn map(&self) -> &FeatureMap<T> {
        &self.map
    }

    pub fn into_map(self) -> FeatureMap<T> {
        self.map
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn hop_size(&self) -> usize {
        self.hop_size
    }

    /// Zero when the grid was loaded from a file and the full analysis
    /// configuration is unknown.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn matches_config(&self, config: &MelConfig) -> bool {
        self.fingerprint == config.fingerprint()
    }
}

/// Per-mel-bin normalization statistics from a training corpus.
#[derive(Debug, Clone)]
pub struct FeatureStats<T> {
    mean: Vec<T>,
    std: Vec<T>,
}

impl<T: Real> FeatureStats<T> {
    pub fn new(mean: Vec<T>, std: Vec<T>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::config(format!(
                "stats mean/std lengths differ: {} vs {}",
                mean.len(),
                std.len()
            )));
        }
        if let Some(i) = std.iter().position(|s| !(*s > T::zero())) {
            return Err(Error::config(format!("standard deviation for bin {i} is not positive")));
        }
        Ok(FeatureStats { mean, std })
    }

    pub fn num_mels(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn std(&self) -> &[T] {
        &self.std
    }

    /// Identity normalization for the given band count.
    pub fn identity(num_mels: usize) -> Self {
        FeatureStats { mean: vec![T::zero(); num_mels], std: vec![T::one(); num_mels] }
    }
}

/// Bounce-reflected index into a signal of the given length: positions
/// beyond either edge mirror without repeating the edge sample.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Precomputed STFT tables: row k of each table is the length-`win_size`
/// Hann-windowed cosine/sine at DFT bin k, so the transform of all frames
/// is one matrix product against a strided view of the padded signal.
#[derive(Debug, Clone)]
pub struct StftPlan<T> {
    fft_size: usize,
    hop_size: usize,
    win_size: usize,
    cos_w: Vec<T>,
    sin_w: Vec<T>,
}

impl<T: Real> StftPlan<T> {
    pub fn new(fft_size: usize, hop_size: usize, win_size: usize) -> Result<Self> {
        if fft_size < 2 {
            return Err(Error::config(format!("fft size {fft_size} is too small")));
        }
        if hop_size == 0 {
            return Err(Error::config("hop size must be at least 1".to_string()));
        }
        if win_size == 0 || win_size > fft_size {
            return Err(Error::config(format!(
                "window size {win_size} must lie in [1, fft size {fft_size}]"
            )));
        }
        let bins = fft_size / 2 + 1;
        let mut cos_w = vec![T::zero(); bins * win_size];
        let mut sin_w = vec![T::zero(); bins * win_size];
        let tau = 2.0 * std::f64::consts::PI;
        for n in 0..win_size {
            // Periodic Hann; the frame is implicitly zero-padded from
            // win_size to fft_size, which the tables absorb by simply
            // not having columns there.
            let w = 0.5 * (1.0 - (tau * n as f64 / win_size as f64).cos());
            for k in 0..bins {
                let angle = tau * (k * n) as f64 / fft_size as f64;
                cos_w[k * win_size + n] = T::from_f64_(angle.cos() * w);
                sin_w[k * win_size + n] = T::from_f64_(angle.sin() * w);
            }
        }
        Ok(StftPlan { fft_size, hop_size, win_size, cos_w, sin_w })
    }

    pub fn from_config(config: &MelConfig) -> Result<Self> {
        config.validate()?;
        StftPlan::new(config.fft_size, config.hop_size, config.win_size)
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn hop_size(&self) -> usize {
        self.hop_size
    }

    pub fn win_size(&self) -> usize {
        self.win_size
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    fn pad(&self) -> usize {
        self.win_size / 2
    }

    /// Frame count for a signal of the given length under centered
    /// reflect padding of `win_size/2` on each side.
    pub fn frames_for(&self, len: usize) -> usize {
        (len + 2 * self.pad() - self.win_size) / self.hop_size + 1
    }

    fn padded(&self, x: &[T]) -> Vec<T> {
        let pad = self.pad() as isize;
        (0..x.len() as isize + 2 * pad)
            .map(|i| x[reflect_index(i - pad, x.len())])
            .collect()
    }
}

/// Forward STFT keeping the real/imaginary parts for the adjoint pass.
/// Returns `(magnitude, re, im)`, each `bins x frames` row-major.
pub(crate) fn stft_forward_parts<T: Real>(
    plan: &StftPlan<T>,
    x: &[T],
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    if x.is_empty() {
        return Err(Error::input("cannot analyze an empty signal".to_string()));
    }
    let bins = plan.bins();
    let frames = plan.frames_for(x.len());
    let padded = plan.padded(x);
    let mut re = vec![T::zero(); bins * frames];
    let mut im = vec![T::zero(); bins * frames];
    // Frame t is the padded signal at column stride hop: no gather step.
    let frame_view = MatView::new(0, 1, plan.hop_size);
    gemm(
        bins,
        plan.win_size,
        frames,
        T::one(),
        &plan.cos_w,
        MatView::new(0, plan.win_size, 1),
        &padded,
        frame_view,
        T::zero(),
        &mut re,
        MatView::new(0, frames, 1),
    );
    gemm(
        bins,
        plan.win_size,
        frames,
        T::one(),
        &plan.sin_w,
        MatView::new(0, plan.win_size, 1),
        &padded,
        frame_view,
        T::zero(),
        &mut im,
        MatView::new(0, frames, 1),
    );
    let mag: Vec<T> =
        re.iter().zip(im.iter()).map(|(&r, &i)| (r * r + i * i).sqrt()).collect();
    Ok((Tensor::from_vec(&[bins, frames], mag)?, re, im))
}

/// Magnitude spectrogram, `fft_size/2 + 1` rows by `⌊len/hop⌋ + 1`-style
/// frames (see [`StftPlan::frames_for`]).
pub fn stft_magnitude<T: Real>(
    x: &[T],
    fft_size: usize,
    hop_size: usize,
    win_size: usize,
) -> Result<Tensor<T>> {
    let plan = StftPlan::new(fft_size, hop_size, win_size)?;
    Ok(stft_forward_parts(&plan, x)?.0)
}

/// Adjoint of the magnitude STFT: propagates a cotangent on the magnitude
/// grid back to the raw signal, through the window products, overlap-add,
/// and the reflect-padding fold. Zero-magnitude cells propagate zero.
pub(crate) fn stft_magnitude_vjp<T: Real>(
    plan: &StftPlan<T>,
    dmag: &[T],
    re: &[T],
    im: &[T],
    mag: &[T],
    input_len: usize,
) -> Vec<T> {
    let bins = plan.bins();
    let frames = plan.frames_for(input_len);
    debug_assert_eq!(dmag.len(), bins * frames);
    let mut dre = vec![T::zero(); bins * frames];
    let mut dim = vec![T::zero(); bins * frames];
    for i in 0..dmag.len() {
        if mag[i] > T::zero() {
            let scale = dmag[i] / mag[i];
            dre[i] = scale * re[i];
            dim[i] = scale * im[i];
        }
    }
    // dF = cosᵀ·dRe + sinᵀ·dIm, materialized because frame windows
    // overlap in the padded signal and GEMM outputs must not alias.
    let mut dframes = vec![T::zero(); plan.win_size * frames];
    gemm(
        plan.win_size,
        bins,
        frames,
        T::one(),
        &plan.cos_w,
        MatView::new(0, 1, plan.win_size),
        &dre,
        MatView::new(0, frames, 1),
        T::zero(),
        &mut dframes,
        MatView::new(0, frames, 1),
    );
    gemm(
        plan.win_size,
        bins,
        frames,
        T::one(),
        &plan.sin_w,
        MatView::new(0, 1, plan.win_size),
        &dim,
        MatView::new(0, frames, 1),
        T::one(),
        &mut dframes,
        MatView::new(0, frames, 1),
    );
    let pad = plan.pad();
    let mut dpadded = vec![T::zero(); input_len + 2 * pad];
    for t in 0..frames {
        let base = t * plan.hop_size;
        for n in 0..plan.win_size {
            dpadded[base + n] += dframes[n * frames + t];
        }
    }
    let mut dx = vec![T::zero(); input_len];
    for (i, &g) in dpadded.iter().enumerate() {
        dx[reflect_index(i as isize - pad as isize, input_len)] += g;
    }
    dx
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `num_mels x (fft_size/2 + 1)`, peaks spaced
/// uniformly on the mel scale between `fmin` and `fmax`.
pub fn mel_filterbank<T: Real>(config: &MelConfig) -> Result<Tensor<T>> {
    config.validate()?;
    let bins = config.fft_size / 2 + 1;
    let m_lo = hz_to_mel(config.fmin);
    let m_hi = hz_to_mel(config.fmax);
    let corners: Vec<f64> = (0..config.num_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (config.num_mels + 1) as f64))
        .collect();
    let mut fb = vec![T::zero(); config.num_mels * bins];
    for m in 0..config.num_mels {
        let (lo, peak, hi) = (corners[m], corners[m + 1], corners[m + 2]);
        let mut any = false;
        for j in 0..bins {
            let f = j as f64 * config.sample_rate / config.fft_size as f64;
            let rising = if peak > lo { (f - lo) / (peak - lo) } else { -1.0 };
            let falling = if hi > peak { (hi - f) / (hi - peak) } else { -1.0 };
            let w = rising.min(falling);
            if w > 0.0 {
                fb[m * bins + j] = T::from_f64_(w);
                any = true;
            }
        }
        if !any {
            return Err(Error::config(format!(
                "mel filter {m} has no nonzero weight; fft resolution {:.1} Hz cannot support {} bands over [{}, {}] Hz",
                config.sample_rate / config.fft_size as f64,
                config.num_mels,
                config.fmin,
                config.fmax
            )));
        }
    }
    Tensor::from_vec(&[config.num_mels, bins], fb)
}

/// `filterbank · magnitude`: project a `bins x frames` magnitude grid to
/// `num_mels x frames`.
pub(crate) fn mel_project<T: Real>(fb: &Tensor<T>, mag: &Tensor<T>) -> Tensor<T> {
    let (m, bins) = (fb.dims()[0], fb.dims()[1]);
    debug_assert_eq!(bins, mag.dims()[0]);
    let frames = mag.dims()[1];
    let mut out = Tensor::zeros(&[m, frames]);
    gemm(
        m,
        bins,
        frames,
        T::one(),
        fb.data(),
        MatView::new(0, bins, 1),
        mag.data(),
        MatView::new(0, frames, 1),
        T::zero(),
        out.data_mut(),
        MatView::new(0, frames, 1),
    );
    out
}

pub(crate) fn log10_floored<T: Real>(v: T) -> T {
    v.max(T::from_f64_(LOG_MEL_FLOOR)).log10()
}

/// Full conditioning-feature pipeline: magnitude STFT, mel projection,
/// floored base-10 log, then per-bin `(v - mean)/std` normalization.
pub fn log_mel_extract<T: Real>(
    x: &[T],
    config: &MelConfig,
    stats: &FeatureStats<T>,
) -> Result<MelSpectrogram<T>> {
    config.validate()?;
    if x.is_empty() {
        return Err(Error::input("cannot extract features from an empty signal".to_string()));
    }
    if stats.num_mels() != config.num_mels {
        return Err(Error::config(format!(
            "stats cover {} mel bins but the configuration has {}",
            stats.num_mels(),
            config.num_mels
        )));
    }
    let plan = StftPlan::from_config(config)?;
    let (mag, _, _) = stft_forward_parts(&plan, x)?;
    let fb = mel_filterbank::<T>(config)?;
    let mut mel = mel_project(&fb, &mag);
    let frames = mel.dims()[1];
    for m in 0..config.num_mels {
        let (mean, std) = (stats.mean()[m], stats.std()[m]);
        for v in &mut mel.data_mut()[m * frames..(m + 1) * frames] {
            *v = (log10_floored(*v) - mean) / std;
        }
    }
    let map = FeatureMap::from_tensor(&mel)?;
    Ok(MelSpectrogram::new(map, config.sample_rate, config.hop_size, config.fingerprint()))
}

/// Pool per-bin mean and standard deviation of the floored log-mel values
/// over every frame of every corpus item. Accumulation is compensated
/// (Kahan) in f64 in one fixed pass order, so results do not depend on
/// how work might be scheduled. Standard deviations are clamped at
/// [`MIN_FEATURE_STD`].
pub fn compute_feature_stats<T: Real>(
    corpus: &[Vec<T>],
    config: &MelConfig,
) -> Result<FeatureStats<T>> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::input("statistics need at least one corpus item".to_string()));
    }
    let plan = StftPlan::from_config(config)?;
    let fb = mel_filterbank::<T>(config)?;
    let m_bins = config.num_mels;
    let mut sum = vec![(0.0f64, 0.0f64); m_bins];
    let mut sum_sq = vec![(0.0f64, 0.0f64); m_bins];
    let mut count = 0u64;
    let kahan_add = |acc: &mut (f64, f64), v: f64| {
        let y = v - acc.1;
        let t = acc.0 + y;
        acc.1 = (t - acc.0) - y;
        acc.0 = t;
    };
    for (idx, item) in corpus.iter().enumerate() {
        if item.is_empty() {
            return Err(Error::input(format!("corpus item {idx} is empty")));
        }
        let (mag, _, _) = stft_forward_parts(&plan, item)?;
        let mel = mel_project(&fb, &mag);
        let frames = mel.dims()[1];
        for m in 0..m_bins {
            for t in 0..frames {
                let v = log10_floored(mel.data()[m * frames + t]).to_f64_();
                kahan_add(&mut sum[m], v);
                kahan_add(&mut sum_sq[m], v * v);
            }
        }
        count += frames as u64;
    }
    let n = count as f64;
    let mut mean = Vec::with_capacity(m_bins);
    let mut std = Vec::with_capacity(m_bins);
    for m in 0..m_bins {
        let mu = sum[m].0 / n;
        let var = (sum_sq[m].0 / n - mu * mu).max(0.0);
        mean.push(T::from_f64_(mu));
        std.push(T::from_f64_(var.sqrt().max(MIN_FEATURE_STD)));
    }
    FeatureStats::new(mean, std)
}

const MELF_MAGIC: &[u8; 4] = b"MELF";
const MSTA_MAGIC: &[u8; 4] = b"MSTA";
const MELF_VERSION: u32 = 1;

pub(crate) struct ByteReader {
    buf: Vec<u8>,
    pos: usize,
}

impl ByteReader {
    pub(crate) fn open(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Ok(ByteReader { buf, pos: 0 })
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                format!("truncated while reading {what}: need {n} bytes, file has {}", self.buf.len() - self.pos),
                self.pos as u64,
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn finite_f32(&mut self, what: &str) -> Result<f32> {
        let at = self.offset();
        let v = self.f32(what)?;
        if !v.is_finite() {
            return Err(Error::format(format!("non-finite value while reading {what}"), at));
        }
        Ok(v)
    }

    pub(crate) fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let at = self.offset();
        let got = self.take(4, "magic")?;
        if got != expect {
            return Err(Error::format(
                format!("bad magic {:?}, expected {:?}", got, expect),
                at,
            ));
        }
        Ok(())
    }

    pub(crate) fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                format!("{} trailing bytes after the declared payload", self.buf.len() - self.pos),
                self.pos as u64,
            ));
        }
        Ok(())
    }
}

/// Write a mel grid: magic `MELF`, version, `num_mels`, `frames`,
/// `sample_rate`, `hop`, then frame-major 32-bit floats.
pub fn write_melf<T: Real>(path: &Path, mel: &MelSpectrogram<T>) -> Result<()> {
    let mut out = Vec::with_capacity(24 + 4 * mel.num_mels() * mel.frames());
    out.extend_from_slice(MELF_MAGIC);
    out.extend_from_slice(&MELF_VERSION.to_le_bytes());
    out.extend_from_slice(&(mel.num_mels() as u32).to_le_bytes());
    out.extend_from_slice(&(mel.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(mel.sample_rate() as f32).to_le_bytes());
    out.extend_from_slice(&(mel.hop_size() as u32).to_le_bytes());
    let map = mel.map();
    for t in 0..mel.frames() {
        for m in 0..mel.num_mels() {
            out.extend_from_slice(&(map.get(m, t).to_f64_() as f32).to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Read a `MELF` file. The full analysis configuration is not stored in
/// the format, so the result carries fingerprint 0 (unknown provenance).
pub fn read_melf(path: &Path) -> Result<MelSpectrogram<f32>> {
    let mut r = ByteReader::open(path)?;
    r.magic(MELF_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != MELF_VERSION {
        return Err(Error::format(format!("unsupported version {version}"), at));
    }
    let num_mels = r.u32("mel band count")? as usize;
    let frames = r.u32("frame count")? as usize;
    if num_mels == 0 {
        return Err(Error::format("mel band count is zero".to_string(), 8));
    }
    let sample_rate = r.finite_f32("sample rate")? as f64;
    let hop = r.u32("hop size")? as usize;
    let mut data = vec![0f32; num_mels * frames];
    for t in 0..frames {
        for m in 0..num_mels {
            data[m * frames + t] = r.finite_f32("mel value")?;
        }
    }
    r.done()?;
    let map = FeatureMap::from_vec(num_mels, frames, data)?;
    Ok(MelSpectrogram::new(map, sample_rate, hop, 0))
}

/// Write normalization statistics: magic `MSTA`, `num_mels`, means, stds.
pub fn write_stats<T: Real>(path: &Path, stats: &FeatureStats<T>) -> Result<()> {
    let mut out = Vec::with_capacity(8 + 8 * stats.num_mels());
    out.extend_from_slice(MSTA_MAGIC);
    out.extend_from_slice(&(stats.num_mels() as u32).to_le_bytes());
    for v in stats.mean() {
        out.extend_from_slice(&(v.to_f64_() as f32).to_le_bytes());
    }
    for v in stats.std() {
        out.extend_from_slice(&(v.to_f64_() as f32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_stats(path: &Path) -> Result<FeatureStats<f32>> {
    let mut r = ByteReader::open(path)?;
    r.magic(MSTA_MAGIC)?;
    let num_mels = r.u32("mel band count")? as usize;
    let mean: Vec<f32> =
        (0..num_mels).map(|_| r.finite_f32("mean")).collect::<Result<_>>()?;
    let std_at = r.offset();
    let std: Vec<f32> = (0..num_mels).map(|_| r.finite_f32("std")).collect::<Result<_>>()?;
    r.done()?;
    if let Some(i) = std.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::format(
            format!("standard deviation for bin {i} is not positive"),
            std_at + 4 * i as u64,
        ));
    }
    FeatureStats::new(mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn sine(len: usize, freq: f64, sr: f64, amp: f64) -> Vec<f64> {
        (0..len)
            .map(|t| amp * (2.0 * std::f64::consts::PI * freq * t as f64 / sr).sin())
            .collect()
    }

    #[test]
    fn reflect_padding_bounces_without_repeating_edges() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_index(-7, 3), 3usize.saturating_sub(4).max(1));
        assert_eq!(reflect_index(0, 1), 0);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn zero_signal_gives_zero_magnitudes() {
        let mag = stft_magnitude(&vec![0.0f64; 4096], 1024, 256, 1024).unwrap();
        assert_eq!(mag.dims(), &[513, 17]);
        assert!(mag.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_second_at_default_config_gives_87_frames() {
        let plan = StftPlan::<f32>::from_config(&MelConfig::default()).unwrap();
        assert_eq!(plan.frames_for(22050), 87);
        assert_eq!(plan.frames_for(22016), 87);
        assert_eq!(plan.frames_for(256), 2);
    }

    #[test]
    fn magnitudes_match_naive_dft_oracle() {
        let x = noise(2000, 3);
        let (fft, hop, win) = (256usize, 64usize, 256usize);
        let mag = stft_magnitude(&x, fft, hop, win).unwrap();
        let frames = mag.dims()[1];
        let pad = win / 2;
        let padded: Vec<f64> =
            (0..x.len() as isize + 2 * pad as isize)
                .map(|i| x[reflect_index(i - pad as isize, x.len())])
                .collect();
        let tau = 2.0 * std::f64::consts::PI;
        for t in [0usize, 1, frames / 2, frames - 1] {
            for k in [0usize, 1, 7, 100, 128] {
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for n in 0..win {
                    let w = 0.5 * (1.0 - (tau * n as f64 / win as f64).cos());
                    let v = w * padded[t * hop + n];
                    re += v * (tau * (k * n) as f64 / fft as f64).cos();
                    im += v * (tau * (k * n) as f64 / fft as f64).sin();
                }
                let want = (re * re + im * im).sqrt();
                let got = mag.data()[k * frames + t];
                assert!(
                    (got - want).abs() <= 1e-9 * want.abs().max(1.0),
                    "frame {t} bin {k}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn bin_center_sine_peaks_at_its_bin() {
        let sr = 22050.0;
        let fft = 1024usize;
        let k = 64usize;
        let x = sine(22050, k as f64 * sr / fft as f64, sr, 1.0);
        let mag = stft_magnitude(&x, fft, 256, 1024).unwrap();
        let frames = mag.dims()[1];
        let bins = mag.dims()[0];
        for t in 2..frames - 3 {
            let mut best = (0usize, f64::NEG_INFINITY);
            for b in 0..bins {
                let v = mag.data()[b * frames + t];
                if v > best.1 {
                    best = (b, v);
                }
            }
            assert_eq!(best.0, k, "frame {t}");
        }
    }

    #[test]
    fn magnitude_is_homogeneous_in_the_input() {
        let x = noise(1500, 4);
        let doubled: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let a = stft_magnitude(&x, 512, 128, 512).unwrap();
        let b = stft_magnitude(&doubled, 512, 128, 512).unwrap();
        for (u, v) in a.data().iter().zip(b.data().iter()) {
            assert!((v - 2.0 * u).abs() <= 1e-9 * u.abs().max(1e-12));
        }
    }

    #[test]
    fn empty_signal_is_rejected() {
        assert!(matches!(stft_magnitude(&[] as &[f64], 512, 128, 512), Err(Error::Input(_))));
    }

    #[test]
    fn sine_energy_concentrates_near_its_frequency() {
        let sr = 22050.0;
        let fft = 1024usize;
        let x = sine(22050, 440.0, sr, 0.5);
        let mag = stft_magnitude(&x, fft, 256, 1024).unwrap();
        let frames = mag.dims()[1];
        let bins = mag.dims()[0];
        let bin_hz = sr / fft as f64;
        for t in 2..frames - 3 {
            let mut near = 0.0f64;
            let mut total = 0.0f64;
            for b in 0..bins {
                let e = mag.data()[b * frames + t].powi(2);
                total += e;
                if ((b as f64 * bin_hz) - 440.0).abs() <= 2.0 * bin_hz {
                    near += e;
                }
            }
            assert!(near / total >= 0.9, "frame {t}: ratio {}", near / total);
        }
    }

    #[test]
    fn magnitude_adjoint_matches_finite_differences() {
        let plan = StftPlan::<f64>::new(32, 8, 32).unwrap();
        let x = noise(96, 11);
        let (mag, re, im) = stft_forward_parts(&plan, &x).unwrap();
        let probe = noise(mag.numel(), 12);
        let dx = stft_magnitude_vjp(&plan, &probe, &re, &im, mag.data(), x.len());
        let loss = |x: &[f64]| -> f64 {
            let (m, _, _) = stft_forward_parts(&plan, x).unwrap();
            m.data().iter().zip(probe.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!(
                (dx[i] - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                "sample {i}: adjoint {} vs fd {fd}",
                dx[i]
            );
        }
    }

    #[test]
    fn filterbank_has_expected_shape_and_structure() {
        let config = MelConfig { fmin: 0.0, fmax: 11025.0, ..MelConfig::default() };
        let fb = mel_filterbank::<f64>(&config).unwrap();
        assert_eq!(fb.dims(), &[80, 513]);
        let mut last_peak = -1.0f64;
        for m in 0..80 {
            let row = &fb.data()[m * 513..(m + 1) * 513];
            let sum: f64 = row.iter().sum();
            assert!(sum > 0.0, "filter {m} sums to {sum}");
            let peak_bin =
                row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            let peak_hz = peak_bin as f64 * config.sample_rate / config.fft_size as f64;
            assert!(peak_hz > last_peak, "filter {m} peak {peak_hz} after {last_peak}");
            last_peak = peak_hz;
        }
    }

    #[test]
    fn too_many_mels_for_the_fft_resolution_is_rejected() {
        let config = MelConfig { num_mels: 300, fft_size: 64, win_size: 64, ..MelConfig::default() };
        assert!(matches!(mel_filterbank::<f64>(&config), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_frequency_range_is_rejected() {
        let config = MelConfig { fmin: 8000.0, fmax: 7600.0, ..MelConfig::default() };
        assert!(matches!(config.validate(), Err(Error::Config(_))));
        let config = MelConfig { fmax: 12000.0, ..MelConfig::default() };
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn stats_pool_identically_over_repeated_items() {
        let config = MelConfig::default();
        let item: Vec<f64> = noise(8192, 5);
        let one = compute_feature_stats(&[item.clone()], &config).unwrap();
        let three = compute_feature_stats(&[item.clone(), item.clone(), item], &config).unwrap();
        for m in 0..config.num_mels {
            assert!((one.mean()[m] - three.mean()[m]).abs() < 1e-9);
            assert!((one.std()[m] - three.std()[m]).abs() < 1e-9);
        }
    }

    #[test]
    fn self_normalization_centers_the_corpus() {
        let config = MelConfig::default();
        let corpus: Vec<Vec<f64>> = (0..3).map(|i| noise(6000 + 512 * i, 20 + i as u64)).collect();
        let stats = compute_feature_stats(&corpus, &config).unwrap();
        let mut sum = vec![0.0f64; config.num_mels];
        let mut sum_sq = vec![0.0f64; config.num_mels];
        let mut frames_total = 0usize;
        for item in &corpus {
            let mel = log_mel_extract(item, &config, &stats).unwrap();
            let frames = mel.frames();
            for m in 0..config.num_mels {
                for t in 0..frames {
                    let v = mel.map().get(m, t);
                    sum[m] += v;
                    sum_sq[m] += v * v;
                }
            }
            frames_total += frames;
        }
        for m in 0..config.num_mels {
            let mean = sum[m] / frames_total as f64;
            let var = sum_sq[m] / frames_total as f64 - mean * mean;
            assert!(mean.abs() < 1e-4, "bin {m} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-3, "bin {m} std {}", var.sqrt());
        }
    }

    #[test]
    fn constant_corpus_clamps_std_without_blowup() {
        let config = MelConfig::default();
        let corpus = vec![vec![0.25f64; 4096]];
        let stats = compute_feature_stats(&corpus, &config).unwrap();
        assert!(stats.std().iter().all(|&s| s >= MIN_FEATURE_STD));
        let mel = log_mel_extract(&corpus[0], &config, &stats).unwrap();
        assert!(mel.map().is_finite());
    }

    #[test]
    fn silence_extracts_to_finite_constant_rows() {
        let config = MelConfig::default();
        let stats = FeatureStats::identity(config.num_mels);
        let mel = log_mel_extract(&vec![0.0f64; 22050], &config, &stats).unwrap();
        assert_eq!(mel.frames(), 87);
        assert!(mel.map().is_finite());
        for m in 0..config.num_mels {
            let first = mel.map().get(m, 0);
            assert!((0..mel.frames()).all(|t| mel.map().get(m, t) == first));
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let config = MelConfig::default();
        let x = noise(22050, 33);
        let corpus = vec![x.clone()];
        let stats = compute_feature_stats(&corpus, &config).unwrap();
        let a = log_mel_extract(&x, &config, &stats).unwrap();
        let b = log_mel_extract(&x, &config, &stats).unwrap();
        assert_eq!(a.map().data(), b.map().data());
        assert!(a.matches_config(&config));
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(
            config.fingerprint(),
            MelConfig { fmin: 0.0, ..config.clone() }.fingerprint()
        );
    }

    #[test]
    fn stats_dimension_mismatch_is_rejected() {
        let config = MelConfig::default();
        let stats = FeatureStats::<f64>::identity(40);
        assert!(matches!(
            log_mel_extract(&noise(4096, 1), &config, &stats),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn melf_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.melf");
        let config = MelConfig::default();
        let stats = FeatureStats::identity(config.num_mels);
        let x: Vec<f32> = noise(8192, 9).iter().map(|&v| v as f32).collect();
        let mel = log_mel_extract(&x, &config, &stats).unwrap();
        write_melf(&path, &mel).unwrap();
        let back = read_melf(&path).unwrap();
        assert_eq!(back.num_mels(), mel.num_mels());
        assert_eq!(back.frames(), mel.frames());
        assert_eq!(back.hop_size(), mel.hop_size());
        assert_eq!(back.sample_rate(), mel.sample_rate());
        assert_eq!(back.fingerprint(), 0);
        assert_eq!(back.map().data(), mel.map().data());
    }

    #[test]
    fn melf_data_is_frame_major_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("layout.melf");
        let map = FeatureMap::from_vec(2, 3, vec![1.0f32, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap();
        let mel = MelSpectrogram::new(map, 22050.0, 256, 7);
        write_melf(&path, &mel).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"MELF");
        let floats: Vec<f32> = bytes[24..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(floats, vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]);
    }

    #[test]
    fn truncated_melf_reports_the_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.melf");
        let map = FeatureMap::from_vec(2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        write_melf(&path, &MelSpectrogram::new(map, 22050.0, 256, 0)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match read_melf(&path) {
            Err(Error::Format { offset, .. }) => assert!(offset >= 24),
            other => panic!("expected format error, got {other:?}"),
        }
        std::fs::write(&path, b"MELX").unwrap();
        match read_melf(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected magic error, got {other:?}"),
        }
    }

    #[test]
    fn stats_file_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.msta");
        let stats = FeatureStats::new(vec![0.5f32, -1.5], vec![2.0f32, 0.25]).unwrap();
        write_stats(&path, &stats).unwrap();
        let back = read_stats(&path).unwrap();
        assert_eq!(back.mean(), stats.mean());
        assert_eq!(back.std(), stats.std());
        let bad = FeatureStats::new(vec![0.0f32, 0.0], vec![1.0f32, 1.0]).unwrap();
        write_stats(&path, &bad).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let std_off = 8 + 2 * 4 + 4;
        bytes[std_off..std_off + 4].copy_from_slice(&0.0f32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match read_stats(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, std_off as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
