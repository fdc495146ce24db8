//! Minimal RIFF/WAVE I/O: 16-bit PCM, mono, little-endian.
//!
//! Disk samples map to reals by division by 32768, so the in-memory
//! range is [−1, 1). Writing rounds to the nearest 16-bit level and
//! clamps, which makes `write(read(x))` reproduce `x` byte for byte.

use std::io::Write;
use std::path::Path;

use tadevoc_core::{Error, Result};

/// Mono audio as reals in [−1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct WavAudio {
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl WavAudio {
    /// Duration in seconds.
    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn le_u16(buf: &[u8], pos: usize) -> u16 {
    u16::from_le_bytes([buf[pos], buf[pos + 1]])
}

fn le_u32(buf: &[u8], pos: usize) -> u32 {
    u32::from_le_bytes([buf[pos], buf[pos + 1], buf[pos + 2], buf[pos + 3]])
}

/// Read a mono 16-bit PCM WAV file. Stereo or other layouts are
/// rejected with an explanation rather than converted silently.
pub fn read_wav(path: &Path) -> Result<WavAudio> {
    let buf = std::fs::read(path)?;
    if buf.len() < 12 || &buf[0..4] != b"RIFF" || &buf[8..12] != b"WAVE" {
        return Err(Error::format("not a RIFF/WAVE file".to_string(), 0));
    }

    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<(usize, usize)> = None; // offset, len
    while pos + 8 <= buf.len() {
        let id = &buf[pos..pos + 4];
        let size = le_u32(&buf, pos + 4) as usize;
        let body = pos + 8;
        if body + size > buf.len() {
            return Err(Error::format(
                format!("chunk {:?} claims {size} bytes past the end of the file",
                    String::from_utf8_lossy(id)),
                pos as u64,
            ));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::format(
                        format!("fmt chunk has {size} bytes; PCM needs 16"),
                        pos as u64,
                    ));
                }
                fmt = Some((
                    le_u16(&buf, body),
                    le_u16(&buf, body + 2),
                    le_u32(&buf, body + 4),
                    le_u16(&buf, body + 14),
                ));
            }
            b"data" => data = Some((body, size)),
            _ => {} // ancillary chunks (LIST, fact, ...) are skipped
        }
        pos = body + size + size % 2; // chunks are word-aligned
    }

    let (format, channels, sample_rate, bits) = fmt
        .ok_or_else(|| Error::format("missing fmt chunk".to_string(), 12))?;
    if format != 1 {
        return Err(Error::input(format!(
            "unsupported WAV encoding tag {format}; only integer PCM (tag 1) is supported"
        )));
    }
    if channels != 1 {
        return Err(Error::input(format!(
            "{channels}-channel audio is not supported; convert to mono first \
             (for example, average the channels)"
        )));
    }
    if bits != 16 {
        return Err(Error::input(format!(
            "{bits}-bit samples are not supported; convert to 16-bit PCM first"
        )));
    }
    if sample_rate == 0 {
        return Err(Error::input("sample rate of 0 Hz".to_string()));
    }

    let (off, len) = data.ok_or_else(|| Error::format("missing data chunk".to_string(), 12))?;
    if len % 2 != 0 {
        return Err(Error::format(
            format!("data chunk has odd byte count {len} for 16-bit samples"),
            off as u64,
        ));
    }
    let samples = buf[off..off + len]
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
        .collect();
    Ok(WavAudio { sample_rate, samples })
}

/// Write a mono 16-bit PCM WAV file. Samples are clamped to [−1, 1]
/// and rounded to the nearest level.
pub fn write_wav(path: &Path, sample_rate: u32, samples: &[f32]) -> Result<()> {
    if sample_rate == 0 {
        return Err(Error::config("sample rate of 0 Hz".to_string()));
    }
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // integer PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let level = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&level.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Reject recordings at any other rate; resampling is out of scope and
/// the message says so.
pub fn ensure_sample_rate(wav: &WavAudio, expected: u32) -> Result<()> {
    if wav.sample_rate != expected {
        return Err(Error::input(format!(
            "expected a {expected} Hz recording, got {} Hz; resampling is not supported, \
             convert the file first",
            wav.sample_rate
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn roundtrip(samples: &[f32]) -> WavAudio {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.wav");
        write_wav(&path, 22050, samples).unwrap();
        read_wav(&path).unwrap()
    }

    #[test]
    fn write_then_read_is_sample_exact() {
        // every value representable on disk: i/32768
        let samples: Vec<f32> =
            (-20..20).map(|i| (i * 1601) as f32 / 32768.0).collect();
        let back = roundtrip(&samples);
        assert_eq!(back.sample_rate, 22050);
        assert_eq!(back.samples, samples);

        // and a second write of what was read reproduces the bytes
        let dir = tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.wav"), dir.path().join("b.wav"));
        write_wav(&p1, 22050, &samples).unwrap();
        write_wav(&p2, 22050, &back.samples).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn values_outside_the_disk_range_are_clamped() {
        let back = roundtrip(&[1.5, 1.0, -1.5]);
        assert_eq!(back.samples[0], 32767.0 / 32768.0);
        assert_eq!(back.samples[1], 32767.0 / 32768.0); // +1.0 has no 16-bit level
        assert_eq!(back.samples[2], -1.0);
    }

    #[test]
    fn stereo_is_rejected_with_a_conversion_hint() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        // hand-build a 2-channel header
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&40u32.to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&2u16.to_le_bytes()); // stereo
        out.extend_from_slice(&22050u32.to_le_bytes());
        out.extend_from_slice(&88200u32.to_le_bytes());
        out.extend_from_slice(&4u16.to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&4u32.to_le_bytes());
        out.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&path, &out).unwrap();

        let err = read_wav(&path).unwrap_err().to_string();
        assert!(err.contains("mono"), "error should hint at conversion: {err}");
    }

    #[test]
    fn ancillary_chunks_are_skipped() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("list.wav");
        let samples = [0.25f32, -0.25];
        write_wav(&path, 22050, &samples).unwrap();
        // splice a LIST chunk between fmt and data
        let orig = std::fs::read(&path).unwrap();
        let mut spliced = orig[..36].to_vec();
        spliced.extend_from_slice(b"LIST");
        spliced.extend_from_slice(&5u32.to_le_bytes());
        spliced.extend_from_slice(b"INFOx");
        spliced.push(0); // word-alignment pad
        spliced.extend_from_slice(&orig[36..]);
        let total = (spliced.len() - 8) as u32;
        spliced[4..8].copy_from_slice(&total.to_le_bytes());
        std::fs::write(&path, &spliced).unwrap();

        assert_eq!(read_wav(&path).unwrap().samples, samples);
    }

    #[test]
    fn truncated_data_chunk_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cut.wav");
        write_wav(&path, 22050, &[0.1, 0.2, 0.3]).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 2]).unwrap();
        assert!(matches!(read_wav(&path).unwrap_err(), Error::Format { .. }));
    }

    #[test]
    fn wrong_sample_rate_error_names_the_expected_rate() {
        let wav = WavAudio { sample_rate: 44100, samples: vec![0.0] };
        let err = ensure_sample_rate(&wav, 22050).unwrap_err().to_string();
        assert!(err.contains("22050") && err.contains("44100"), "{err}");
    }
}
