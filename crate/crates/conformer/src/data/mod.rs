//! Token-stream ingestion and windowed batch construction.
//!
//! Two sources are supported: text8-style character data (27 symbols:
//! space plus `a`..`z`) and raw 8-bit audio sample streams (256 symbols).
//! Batches are fixed-context next-token windows: `targets[b, t]` is the
//! stream token immediately after `inputs[b, t]`.

pub mod synthetic;

use crate::error::{Error, Result};
use std::fs;
use std::path::Path;
use tensorcore::{StreamRng, TokenIds};

pub const TEXT8_VOCAB: usize = 27;
pub const AUDIO_VOCAB: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamSource {
    Text8,
    AudioU8,
}

/// Immutable token sequence with its vocabulary size.
#[derive(Debug, Clone)]
pub struct TokenStream {
    ids: Vec<u8>,
    vocab: usize,
    source: StreamSource,
}

impl TokenStream {
    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn source(&self) -> StreamSource {
        self.source
    }

    /// First `n` tokens (or the whole stream if shorter).
    pub fn truncated(&self, n: usize) -> TokenStream {
        TokenStream {
            ids: self.ids[..self.ids.len().min(n)].to_vec(),
            vocab: self.vocab,
            source: self.source,
        }
    }
}

/// Map a text8 byte to its token id: space is 0, `a`..`z` are 1..=26.
pub fn text8_byte_to_id(b: u8) -> Option<u8> {
    match b {
        b' ' => Some(0),
        b'a'..=b'z' => Some(b - b'a' + 1),
        _ => None,
    }
}

/// Inverse of [`text8_byte_to_id`].
pub fn text8_id_to_byte(id: u8) -> u8 {
    match id {
        0 => b' ',
        1..=26 => b'a' + id - 1,
        _ => b'?',
    }
}

/// Decode text8 bytes into a token stream (V = 27). Any byte outside
/// space + `a`..`z` is a data error carrying its offset.
pub fn text8_from_bytes(bytes: &[u8]) -> Result<TokenStream> {
    let mut ids = Vec::with_capacity(bytes.len());
    for (offset, &b) in bytes.iter().enumerate() {
        match text8_byte_to_id(b) {
            Some(id) => ids.push(id),
            None => return Err(Error::InvalidByte { byte: b, offset }),
        }
    }
    Ok(TokenStream {
        ids,
        vocab: TEXT8_VOCAB,
        source: StreamSource::Text8,
    })
}

pub fn load_text8(path: &Path) -> Result<TokenStream> {
    text8_from_bytes(&fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AudioFormat {
    /// Every byte of the file is one sample.
    Raw,
    /// Minimal PCM WAV container; must be 8-bit, mono, 8000 Hz.
    Wav,
}

/// Load an 8-bit audio sample stream (V = 256). Each unsigned byte sample
/// becomes one token.
pub fn load_audio_u8(path: &Path, format: AudioFormat) -> Result<TokenStream> {
    let bytes = fs::read(path)?;
    let ids = match format {
        AudioFormat::Raw => bytes,
        AudioFormat::Wav => parse_wav_u8(&bytes)?,
    };
    Ok(TokenStream {
        ids,
        vocab: AUDIO_VOCAB,
        source: StreamSource::AudioU8,
    })
}

pub fn audio_from_samples(samples: Vec<u8>) -> TokenStream {
    TokenStream {
        ids: samples,
        vocab: AUDIO_VOCAB,
        source: StreamSource::AudioU8,
    }
}

fn read_u16_le(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32_le(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Extract samples from a PCM WAV file, insisting on 8-bit mono 8 kHz.
fn parse_wav_u8(bytes: &[u8]) -> Result<Vec<u8>> {
    let fail = |field: &'static str, detail: String| Err(Error::WavFormat { field, detail });
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" {
        return fail("riff", "missing RIFF header".into());
    }
    if &bytes[8..12] != b"WAVE" {
        return fail("wave", "missing WAVE marker".into());
    }
    let mut pos = 12;
    let mut fmt_seen = false;
    let mut data: Option<Vec<u8>> = None;
    while pos + 8 <= bytes.len() {
        let chunk_id = &bytes[pos..pos + 4];
        let size = read_u32_le(bytes, pos + 4) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return fail("chunk", format!("chunk overruns file at offset {}", pos));
        }
        match chunk_id {
            b"fmt " => {
                if size < 16 {
                    return fail("fmt ", "fmt chunk too short".into());
                }
                let audio_format = read_u16_le(bytes, body);
                if audio_format != 1 {
                    return fail("audio_format", format!("expected PCM (1), got {}", audio_format));
                }
                let channels = read_u16_le(bytes, body + 2);
                if channels != 1 {
                    return fail("channels", format!("expected mono (1), got {}", channels));
                }
                let sample_rate = read_u32_le(bytes, body + 4);
                if sample_rate != 8000 {
                    return fail("sample_rate", format!("expected 8000 Hz, got {}", sample_rate));
                }
                let bits = read_u16_le(bytes, body + 14);
                if bits != 8 {
                    return fail("bits_per_sample", format!("expected 8, got {}", bits));
                }
                fmt_seen = true;
            }
            b"data" => {
                data = Some(bytes[body..body + size].to_vec());
            }
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body + size + (size & 1);
    }
    if !fmt_seen {
        return fail("fmt ", "missing fmt chunk".into());
    }
    data.ok_or(Error::WavFormat {
        field: "data",
        detail: "missing data chunk".into(),
    })
}

/// Contiguous positional split into (train, val, test); no shuffling.
/// Concatenating the three parts reproduces the input exactly.
pub fn split_stream(
    stream: &TokenStream,
    ratios: (f64, f64, f64),
) -> Result<(TokenStream, TokenStream, TokenStream)> {
    let (r_train, r_val, r_test) = ratios;
    if r_train <= 0.0 || r_val <= 0.0 || r_test <= 0.0 {
        return Err(Error::Data(format!(
            "split ratios must all be positive, got {:?}",
            ratios
        )));
    }
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!(
            "split ratios must sum to 1, got {:?}",
            ratios
        )));
    }
    let n = stream.len();
    let n_train = (n as f64 * r_train).floor() as usize;
    let n_val = (n as f64 * r_val).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Data(format!(
            "stream of {} tokens is too short to split {:?}",
            n, ratios
        )));
    }
    let part = |ids: &[u8]| TokenStream {
        ids: ids.to_vec(),
        vocab: stream.vocab,
        source: stream.source,
    };
    Ok((
        part(&stream.ids[..n_train]),
        part(&stream.ids[n_train..n_train + n_val]),
        part(&stream.ids[n_train + n_val..]),
    ))
}

/// One training batch of next-token windows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: TokenIds,
    pub targets: TokenIds,
}

/// Iterator over windowed batches of a stream.
pub struct BatchIter<'a> {
    stream: &'a TokenStream,
    starts: Vec<usize>,
    context: usize,
    batch_size: usize,
    cursor: usize,
}

impl<'a> BatchIter<'a> {
    pub fn num_windows(&self) -> usize {
        self.starts.len()
    }

    pub fn num_batches(&self) -> usize {
        self.starts.len().div_ceil(self.batch_size)
    }
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.starts.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.starts.len());
        let group = &self.starts[self.cursor..end];
        self.cursor = end;
        let b = group.len();
        let t = self.context;
        let mut inputs = Vec::with_capacity(b * t);
        let mut targets = Vec::with_capacity(b * t);
        for &s in group {
            inputs.extend(self.stream.ids[s..s + t].iter().map(|&x| x as u32));
            targets.extend(self.stream.ids[s + 1..s + t + 1].iter().map(|&x| x as u32));
        }
        Some(Batch {
            inputs: TokenIds::new(b, t, inputs).expect("batch shape"),
            targets: TokenIds::new(b, t, targets).expect("batch shape"),
        })
    }
}

/// Build next-token windows over `stream`: starts at `0, stride, 2*stride, ...`
/// while `start + context + 1 <= len`. With `shuffle`, the window order is a
/// seeded permutation; the final batch may be smaller than `batch_size`.
pub fn make_batches(
    stream: &TokenStream,
    context: usize,
    batch_size: usize,
    stride: usize,
    shuffle: bool,
    seed: u64,
) -> Result<BatchIter<'_>> {
    if stride == 0 || batch_size == 0 || context == 0 {
        return Err(Error::Data(
            "context, batch_size, and stride must all be >= 1".into(),
        ));
    }
    if stream.len() < context + 1 {
        return Err(Error::Data(format!(
            "stream of {} tokens is shorter than one window of {}+1",
            stream.len(),
            context
        )));
    }
    let mut starts: Vec<usize> = (0..)
        .step_by(stride)
        .take_while(|s| s + context + 1 <= stream.len())
        .collect();
    if shuffle {
        StreamRng::new(seed).shuffle(&mut starts);
    }
    Ok(BatchIter {
        stream,
        starts,
        context,
        batch_size,
        cursor: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text8_mapping_matches_declared_order() {
        let s = text8_from_bytes(b"abc ").unwrap();
        assert_eq!(s.ids(), &[1, 2, 3, 0]);
        assert_eq!(s.vocab(), 27);
    }

    #[test]
    fn text8_empty_input_is_empty_stream() {
        let s = text8_from_bytes(b"").unwrap();
        assert!(s.is_empty());
        assert_eq!(s.vocab(), 27);
    }

    #[test]
    fn text8_reports_bad_byte_offset() {
        match text8_from_bytes(b"abcde!gh").unwrap_err() {
            Error::InvalidByte { byte, offset } => {
                assert_eq!(byte, b'!');
                assert_eq!(offset, 5);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn text8_roundtrip_byte_mapping() {
        for b in b'a'..=b'z' {
            assert_eq!(text8_id_to_byte(text8_byte_to_id(b).unwrap()), b);
        }
        assert_eq!(text8_id_to_byte(0), b' ');
    }

    fn minimal_wav(channels: u16, rate: u32, bits: u16, samples: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        let data_len = samples.len() as u32;
        v.extend_from_slice(b"RIFF");
        v.extend_from_slice(&(36 + data_len).to_le_bytes());
        v.extend_from_slice(b"WAVE");
        v.extend_from_slice(b"fmt ");
        v.extend_from_slice(&16u32.to_le_bytes());
        v.extend_from_slice(&1u16.to_le_bytes()); // PCM
        v.extend_from_slice(&channels.to_le_bytes());
        v.extend_from_slice(&rate.to_le_bytes());
        let byte_rate = rate * channels as u32 * bits as u32 / 8;
        v.extend_from_slice(&byte_rate.to_le_bytes());
        v.extend_from_slice(&((channels * bits / 8) as u16).to_le_bytes());
        v.extend_from_slice(&bits.to_le_bytes());
        v.extend_from_slice(b"data");
        v.extend_from_slice(&data_len.to_le_bytes());
        v.extend_from_slice(samples);
        v
    }

    #[test]
    fn raw_audio_bytes_map_identically() {
        let s = audio_from_samples(vec![0, 255, 128]);
        assert_eq!(s.ids(), &[0, 255, 128]);
        assert_eq!(s.vocab(), 256);
    }

    #[test]
    fn wav_16bit_is_rejected_naming_field() {
        let wav = minimal_wav(1, 8000, 16, &[1, 2, 3, 4]);
        match parse_wav_u8(&wav).unwrap_err() {
            Error::WavFormat { field, .. } => assert_eq!(field, "bits_per_sample"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn wav_stereo_and_wrong_rate_rejected() {
        let wav = minimal_wav(2, 8000, 8, &[1, 2]);
        match parse_wav_u8(&wav).unwrap_err() {
            Error::WavFormat { field, .. } => assert_eq!(field, "channels"),
            other => panic!("unexpected {other}"),
        }
        let wav = minimal_wav(1, 44100, 8, &[1, 2]);
        match parse_wav_u8(&wav).unwrap_err() {
            Error::WavFormat { field, .. } => assert_eq!(field, "sample_rate"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn silent_three_second_wav_has_24000_tokens() {
        let samples = vec![128u8; 24000];
        let wav = minimal_wav(1, 8000, 8, &samples);
        let got = parse_wav_u8(&wav).unwrap();
        assert_eq!(got.len(), 24000);
        assert!(got.iter().all(|&s| s == 128));
    }

    fn stream_of(n: usize) -> TokenStream {
        TokenStream {
            ids: (0..n).map(|i| (i % 27) as u8).collect(),
            vocab: 27,
            source: StreamSource::Text8,
        }
    }

    #[test]
    fn split_100_tokens_default_ratios() {
        let s = stream_of(100);
        let (tr, va, te) = split_stream(&s, (0.9, 0.05, 0.05)).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (90, 5, 5));
    }

    #[test]
    fn split_rejects_non_positive_ratio() {
        let s = stream_of(100);
        assert!(split_stream(&s, (1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn split_concat_reproduces_stream() {
        let s = stream_of(541);
        let (tr, va, te) = split_stream(&s, (0.8, 0.1, 0.1)).unwrap();
        let mut joined = tr.ids().to_vec();
        joined.extend_from_slice(va.ids());
        joined.extend_from_slice(te.ids());
        assert_eq!(joined, s.ids());
    }

    #[test]
    fn split_text8_convention_lengths() {
        // 10^6 stands in for the full 10^8: the arithmetic is identical.
        let s = stream_of(1_000_000);
        let (tr, va, te) = split_stream(&s, (0.9, 0.05, 0.05)).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (900_000, 50_000, 50_000));
    }

    #[test]
    fn minimal_stream_yields_one_shifted_window() {
        let s = stream_of(257);
        let mut it = make_batches(&s, 256, 4, 1, false, 0).unwrap();
        assert_eq!(it.num_windows(), 1);
        let b = it.next().unwrap();
        assert_eq!(b.inputs.rows(), 1);
        for t in 0..255 {
            assert_eq!(b.targets.get(0, t), b.inputs.get(0, t + 1));
        }
        assert!(it.next().is_none());
    }

    #[test]
    fn targets_are_inputs_shifted_by_one() {
        let s = stream_of(300);
        let b = make_batches(&s, 256, 4, 1, false, 0).unwrap().next().unwrap();
        for t in 0..255 {
            assert_eq!(b.targets.get(0, t), b.inputs.get(0, t + 1));
        }
        assert_eq!(b.targets.get(0, 255), s.ids()[256] as u32);
    }

    #[test]
    fn stride_boundary_arithmetic() {
        // Length 512, stride 256: a second window would need token 513.
        let s = stream_of(512);
        let it = make_batches(&s, 256, 4, 256, false, 0).unwrap();
        assert_eq!(it.num_windows(), 1);
    }

    #[test]
    fn window_count_brute_force() {
        // Enumerate starts directly: every s with s + 257 <= 1000.
        let s = stream_of(1000);
        let expect = (0..1000).filter(|s| s + 257 <= 1000).count();
        assert_eq!(expect, 744);
        let it = make_batches(&s, 256, 32, 1, false, 0).unwrap();
        assert_eq!(it.num_windows(), expect);
    }

    #[test]
    fn final_partial_batch_is_emitted() {
        let s = stream_of(300);
        // 300 - 65 = 235... with context 64 and stride 16: starts while s+65 <= 300.
        let it = make_batches(&s, 64, 4, 16, false, 0).unwrap();
        let windows = it.num_windows();
        let batches: Vec<Batch> = make_batches(&s, 64, 4, 16, false, 0).unwrap().collect();
        let total: usize = batches.iter().map(|b| b.inputs.rows()).sum();
        assert_eq!(total, windows);
        assert!(batches.last().unwrap().inputs.rows() <= 4);
    }

    #[test]
    fn shuffle_is_deterministic_given_seed() {
        let s = stream_of(2000);
        let order = |seed: u64, shuffle: bool| {
            make_batches(&s, 64, 1, 64, shuffle, seed)
                .unwrap()
                .map(|b| b.inputs.get(0, 0))
                .collect::<Vec<_>>()
        };
        assert_eq!(order(7, true), order(7, true));
        assert_ne!(order(7, true), order(8, true));
        assert_eq!(order(0, false), order(9, false));
    }

    #[test]
    fn too_short_stream_is_a_data_error() {
        let s = stream_of(100);
        assert!(make_batches(&s, 256, 4, 1, false, 0).is_err());
    }
}
