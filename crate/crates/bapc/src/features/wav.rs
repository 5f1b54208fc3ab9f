//! Minimal 16-bit PCM mono RIFF/WAVE reader and writer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::bytes::{ReadLe, WriteLe};
use crate::error::{Error, Result};
use crate::features::AudioBuffer;

fn bad(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {}", path.display(), what))
}

/// Read a mono 16-bit PCM WAV file; samples come back in [-1, 1).
pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let mut r = BufReader::new(File::open(path)?);

    let mut riff = [0u8; 4];
    r.read_exact(&mut riff)?;
    if &riff != b"RIFF" {
        return Err(bad(path, "not a RIFF file"));
    }
    let _riff_len = r.u32_le()?;
    let mut wave = [0u8; 4];
    r.read_exact(&mut wave)?;
    if &wave != b"WAVE" {
        return Err(bad(path, "not a WAVE file"));
    }

    let mut sample_rate: Option<u32> = None;
    let mut data: Option<Vec<u8>> = None;
    loop {
        let mut id = [0u8; 4];
        match r.read_exact(&mut id) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let len = r.u32_le()? as usize;
        match &id {
            b"fmt " => {
                let body = r.bytes_exact(len)?;
                if body.len() < 16 {
                    return Err(bad(path, "truncated fmt chunk"));
                }
                let format = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
                let bits = u16::from_le_bytes([body[14], body[15]]);
                if format != 1 {
                    return Err(bad(path, format!("unsupported format tag {format}, want PCM")));
                }
                if channels != 1 {
                    return Err(bad(path, format!("expected mono, got {channels} channels")));
                }
                if bits != 16 {
                    return Err(bad(path, format!("expected 16-bit samples, got {bits}")));
                }
                sample_rate = Some(rate);
            }
            b"data" => {
                data = Some(r.bytes_exact(len)?);
            }
            _ => {
                r.seek(SeekFrom::Current(len as i64))?;
            }
        }
        // RIFF chunks are word-aligned: odd-length bodies carry a pad byte.
        if len % 2 == 1 {
            r.seek(SeekFrom::Current(1))?;
        }
    }

    let sample_rate = sample_rate.ok_or_else(|| bad(path, "missing fmt chunk"))?;
    let data = data.ok_or_else(|| bad(path, "missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(bad(path, "odd data chunk length for 16-bit samples"));
    }
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    AudioBuffer::new(samples, sample_rate)
}

/// Write samples in [-1, 1] as a mono 16-bit PCM WAV file.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let data_len = (samples.len() * 2) as u32;
    w.write_all(b"RIFF")?;
    w.put_u32_le(36 + data_len)?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.put_u32_le(16)?;
    w.put_u16_le(1)?; // PCM
    w.put_u16_le(1)?; // mono
    w.put_u32_le(sample_rate)?;
    w.put_u32_le(sample_rate * 2)?;
    w.put_u16_le(2)?;
    w.put_u16_le(16)?;
    w.write_all(b"data")?;
    w.put_u32_le(data_len)?;
    for &s in samples {
        // Same scale as the reader, so a roundtrip only loses rounding error.
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_samples_to_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let samples: Vec<f64> = (0..1000)
            .map(|i| (i as f64 * 0.05).sin() * 0.8)
            .collect();
        write_wav(&path, &samples, 16000).unwrap();
        let audio = read_wav(&path).unwrap();
        assert_eq!(audio.sample_rate, 16000);
        assert_eq!(audio.samples.len(), samples.len());
        for (a, b) in audio.samples.iter().zip(&samples) {
            assert!((a - b).abs() < 1.0 / 32768.0 + 1e-9);
        }
    }

    #[test]
    fn rejects_non_wav_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not.wav");
        std::fs::write(&path, b"OggS junk that is not RIFF").unwrap();
        let err = read_wav(&path).unwrap_err();
        assert!(err.to_string().contains("RIFF"));
    }
}
