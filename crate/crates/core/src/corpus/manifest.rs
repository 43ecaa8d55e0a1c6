//! Corpus manifests: JSON-lines, one object per utterance.
//!
//! `{"id": ..., "audio": ..., "text": ..., "split": ..., "origin": ...}`
//!
//! The `audio` field is either `"base64:<PCM16 LE bytes>"` inline audio or a
//! path (relative to the manifest) of a mono 16 kHz PCM16 WAV file.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::wav;
use super::{Corpus, Origin, Split, Utterance, SAMPLE_RATE};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub audio: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub split: Split,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub origin: Option<Origin>,
}

/// How audio is materialized when saving.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AudioMode {
    Inline,
    /// WAV files in `<dir>` next to the manifest.
    WavDir,
}

pub fn parse_record(line: &str) -> Result<ManifestRecord> {
    let rec: ManifestRecord =
        serde_json::from_str(line).map_err(|e| CoreError::parse("manifest", e.to_string()))?;
    if rec.id.is_empty() {
        return Err(CoreError::parse("manifest", "empty utterance id"));
    }
    Ok(rec)
}

/// Decode the audio field of a record that carries inline audio. Path-based
/// audio is resolved by [`load`].
pub fn decode_inline_audio(audio: &str) -> Result<Option<Vec<f32>>> {
    match audio.strip_prefix("base64:") {
        Some(b64) => {
            let bytes = B64
                .decode(b64)
                .map_err(|e| CoreError::parse("manifest", format!("bad base64 audio: {}", e)))?;
            Ok(Some(wav::pcm16_to_f32(&bytes)?))
        }
        None => Ok(None),
    }
}

pub fn save(corpus: &Corpus, path: &Path, mode: AudioMode) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let wav_dir = dir.join("wav");
    if mode == AudioMode::WavDir {
        std::fs::create_dir_all(&wav_dir)?;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for u in &corpus.utterances {
        let audio = match mode {
            AudioMode::Inline => format!("base64:{}", B64.encode(wav::f32_to_pcm16(&u.samples))),
            AudioMode::WavDir => {
                let rel = format!("wav/{}.wav", u.id);
                std::fs::write(dir.join(&rel), wav::encode_wav(&u.samples, SAMPLE_RATE))?;
                rel
            }
        };
        let rec = ManifestRecord {
            id: u.id.clone(),
            audio,
            text: u.transcript.clone(),
            split: u.split,
            origin: u.origin,
        };
        serde_json::to_writer(&mut file, &rec)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Corpus> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut corpus = Corpus::default();
    let mut ids = BTreeSet::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_record(&line)
            .map_err(|e| CoreError::parse("manifest", format!("line {}: {}", lineno + 1, e)))?;
        if !ids.insert(rec.id.clone()) {
            return Err(CoreError::parse(
                "manifest",
                format!("duplicate id `{}`", rec.id),
            ));
        }
        let samples = match decode_inline_audio(&rec.audio)? {
            Some(s) => s,
            None => {
                let bytes = std::fs::read(dir.join(&rec.audio))?;
                let (samples, rate) = wav::decode_wav(&bytes)?;
                if rate != SAMPLE_RATE {
                    return Err(CoreError::parse(
                        "manifest",
                        format!("{}: sample rate {} != {}", rec.audio, rate, SAMPLE_RATE),
                    ));
                }
                samples
            }
        };
        if samples.is_empty() {
            return Err(CoreError::parse(
                "manifest",
                format!("utterance `{}` has empty audio", rec.id),
            ));
        }
        corpus.utterances.push(Utterance {
            id: rec.id,
            samples,
            transcript: rec.text,
            split: rec.split,
            origin: rec.origin,
        });
    }
    Ok(corpus)
}
