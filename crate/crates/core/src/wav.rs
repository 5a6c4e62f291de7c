//! Minimal RIFF/WAVE reader and writer.
//!
//! Reads 16-bit PCM and 32-bit IEEE float (plain or extensible headers) with
//! any channel count; writes 32-bit float.

use std::fs;
use std::path::Path;

use crate::audio::AudioClip;
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Encoding {
    Pcm16,
    Float32,
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

/// Decodes an in-memory WAV file.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::format("RIFF", "not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(Encoding, usize, u32)> = None;
    let mut data: Option<&[u8]> = None;

    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let name = String::from_utf8_lossy(id).into_owned();
        if bytes.len() - body_start < size {
            // Some writers leave a bogus data size; anything else is truncation.
            if id == b"data" {
                return Err(Error::format("data", "chunk extends past end of file"));
            }
            return Err(Error::format(name, "chunk extends past end of file"));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::format("fmt ", format!("chunk too short ({size} bytes)")));
                }
                let mut tag = u16_at(body, 0);
                let channels = u16_at(body, 2) as usize;
                let rate = u32_at(body, 4);
                let block_align = u16_at(body, 12) as usize;
                let bits = u16_at(body, 14);
                if tag == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err(Error::format("fmt ", "extensible header too short"));
                    }
                    tag = u16_at(body, 24);
                }
                if channels == 0 {
                    return Err(Error::format("fmt ", "zero channels"));
                }
                let enc = match (tag, bits) {
                    (FORMAT_PCM, 16) => Encoding::Pcm16,
                    (FORMAT_FLOAT, 32) => Encoding::Float32,
                    _ => {
                        return Err(Error::format(
                            "fmt ",
                            format!("unsupported codec: format tag {tag}, {bits} bits per sample"),
                        ))
                    }
                };
                let width = if enc == Encoding::Pcm16 { 2 } else { 4 };
                if block_align != width * channels {
                    return Err(Error::format("fmt ", format!("inconsistent block align {block_align}")));
                }
                fmt = Some((enc, channels, rate));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_start + size + (size & 1);
    }

    let (enc, channels, rate) = fmt.ok_or_else(|| Error::format("fmt ", "missing format chunk"))?;
    let data = data.ok_or_else(|| Error::format("data", "missing data chunk"))?;
    let width = if enc == Encoding::Pcm16 { 2 } else { 4 };
    let frame = width * channels;
    if data.len() % frame != 0 {
        return Err(Error::format("data", "size is not a whole number of frames"));
    }
    let frames = data.len() / frame;
    let mut samples = vec![Vec::with_capacity(frames); channels];
    for f in 0..frames {
        for (c, ch) in samples.iter_mut().enumerate() {
            let i = f * frame + c * width;
            let v = match enc {
                Encoding::Pcm16 => i16::from_le_bytes([data[i], data[i + 1]]) as f64 / 32768.0,
                Encoding::Float32 => f32::from_le_bytes([data[i], data[i + 1], data[i + 2], data[i + 3]]) as f64,
            };
            ch.push(v);
        }
    }
    AudioClip::new(rate, samples).map_err(|e| Error::format("data", e.to_string()))
}

/// Encodes a clip as 32-bit float WAV. Samples are rounded to `f32`.
pub fn encode_wav(clip: &AudioClip) -> Result<Vec<u8>> {
    if !clip.is_finite() {
        return Err(Error::numeric("refusing to write non-finite samples"));
    }
    let channels = clip.channels();
    let frames = clip.len();
    let data_len = frames * channels * 4;
    let mut buf = Vec::with_capacity(44 + data_len);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&FORMAT_FLOAT.to_le_bytes());
    buf.extend_from_slice(&(channels as u16).to_le_bytes());
    buf.extend_from_slice(&clip.sample_rate().to_le_bytes());
    buf.extend_from_slice(&(clip.sample_rate() * channels as u32 * 4).to_le_bytes());
    buf.extend_from_slice(&((channels * 4) as u16).to_le_bytes());
    buf.extend_from_slice(&32u16.to_le_bytes());
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&(data_len as u32).to_le_bytes());
    for f in 0..frames {
        for c in 0..channels {
            buf.extend_from_slice(&(clip.channel(c)[f] as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes).map_err(|e| match e {
        Error::Format { context, message } => Error::format(format!("{} ({context})", path.display()), message),
        other => other,
    })
}

pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_wav(clip)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pcm16(channels: u16, rate: u32, samples: &[i16]) -> Vec<u8> {
        let data_len = samples.len() * 2;
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
        b.extend_from_slice(b"WAVEfmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&channels.to_le_bytes());
        b.extend_from_slice(&rate.to_le_bytes());
        b.extend_from_slice(&(rate * channels as u32 * 2).to_le_bytes());
        b.extend_from_slice(&(channels * 2).to_le_bytes());
        b.extend_from_slice(&16u16.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&(data_len as u32).to_le_bytes());
        for s in samples {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b
    }

    #[test]
    fn pcm16_scaling() {
        let clip = decode_wav(&pcm16(1, 8000, &[-32768, 0, 16384, 32767])).unwrap();
        assert_eq!(clip.channel(0), &[-1.0, 0.0, 0.5, 32767.0 / 32768.0]);
        assert_eq!(clip.sample_rate(), 8000);
    }

    #[test]
    fn float_roundtrip_is_bitwise() {
        let clip = AudioClip::new(44100, vec![vec![0.25, -0.1f32 as f64, 3.5], vec![1e-7f32 as f64, 0.0, -2.0]]).unwrap();
        let back = decode_wav(&encode_wav(&clip).unwrap()).unwrap();
        assert_eq!(back, clip);
    }

    #[test]
    fn malformed_headers_name_the_chunk() {
        assert!(decode_wav(b"RIFX").unwrap_err().to_string().contains("RIFF"));
        let mut b = pcm16(2, 8000, &[1, 2, 3, 4]);
        b.truncate(b.len() - 1);
        assert!(decode_wav(&b).unwrap_err().to_string().contains("data"));
        let mut b = pcm16(1, 8000, &[1, 2]);
        b[34] = 24; // bits per sample
        let err = decode_wav(&b).unwrap_err().to_string();
        assert!(err.contains("fmt") && err.contains("unsupported"), "{err}");
    }

    #[test]
    fn skips_unknown_chunks() {
        let mut b = pcm16(1, 8000, &[100]);
        // insert an odd-sized LIST chunk (padded) before fmt
        let list = [b"LIST".as_slice(), &3u32.to_le_bytes(), &[1, 2, 3, 0]].concat();
        b.splice(12..12, list);
        let clip = decode_wav(&b).unwrap();
        assert_eq!(clip.channel(0), &[100.0 / 32768.0]);
    }
}
