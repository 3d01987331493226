//! 16-bit PCM mono WAV at 16 kHz.

use std::io::{Cursor, Read, Seek};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::synth::SAMPLE_RATE;
use crate::error::{Error, Result};

const SCALE: f32 = 32767.0;

fn spec() -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    }
}

fn wav_err(field: &'static str) -> impl Fn(hound::Error) -> Error {
    move |e| Error::Wav {
        field,
        detail: e.to_string(),
    }
}

pub fn quantize(v: f32) -> i16 {
    (v.clamp(-1.0, 1.0) * SCALE).round() as i16
}

pub fn encode_wav(samples: &[f32]) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::with_capacity(44 + 2 * samples.len()));
    {
        let mut w = WavWriter::new(&mut buf, spec()).map_err(wav_err("header"))?;
        let mut w16 = w.get_i16_writer(samples.len() as u32);
        for &s in samples {
            w16.write_sample(quantize(s));
        }
        w16.flush().map_err(wav_err("data"))?;
        w.finalize().map_err(wav_err("data"))?;
    }
    Ok(buf.into_inner())
}

fn decode_from<R: Read + Seek>(reader: R) -> Result<Vec<f32>> {
    let reader = WavReader::new(reader).map_err(wav_err("header"))?;
    let s = reader.spec();
    if s.sample_rate != SAMPLE_RATE {
        return Err(Error::Wav {
            field: "sample_rate",
            detail: format!("expected {SAMPLE_RATE}, found {}", s.sample_rate),
        });
    }
    if s.channels != 1 {
        return Err(Error::Wav {
            field: "channels",
            detail: format!("expected 1, found {}", s.channels),
        });
    }
    if s.bits_per_sample != 16 || s.sample_format != SampleFormat::Int {
        return Err(Error::Wav {
            field: "bits_per_sample",
            detail: format!("expected 16-bit integer PCM, found {} bit {:?}", s.bits_per_sample, s.sample_format),
        });
    }
    reader
        .into_samples::<i16>()
        .map(|r| r.map(|v| v as f32 / SCALE).map_err(wav_err("data")))
        .collect()
}

pub fn decode_wav(bytes: &[u8]) -> Result<Vec<f32>> {
    decode_from(Cursor::new(bytes))
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_wav(samples)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    decode_from(std::io::BufReader::new(file))
}
