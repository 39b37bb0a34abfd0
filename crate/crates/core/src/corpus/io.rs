//! Corpus directory I/O.
//!
//! Layout:
//!
//! ```text
//! <dir>/feats/<utt>.bin        little-endian: u32 rows, u32 cols, then
//!                              rows*cols f32 values, row-major
//! <dir>/text                   one line per utterance: <utt> p1 p2 ...
//! <dir>/utt2spk                one line per utterance: <utt> <speaker>
//! <dir>/alignments/<utt>.txt   one line: the per-input-frame phone ids
//! ```

use std::fs;
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{Corpus, CorpusError, Split, Utterance};
use crate::graph::Phone;

pub fn write_corpus(dir: impl AsRef<Path>, corpus: &Corpus) -> Result<(), CorpusError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("feats"))?;
    fs::create_dir_all(dir.join("alignments"))?;
    let mut text = BufWriter::new(fs::File::create(dir.join("text"))?);
    let mut utt2spk = BufWriter::new(fs::File::create(dir.join("utt2spk"))?);
    for u in &corpus.utterances {
        let ids: Vec<String> = u.transcript.iter().map(|p| p.to_string()).collect();
        writeln!(text, "{} {}", u.id, ids.join(" "))?;
        writeln!(utt2spk, "{} {}", u.id, u.speaker)?;

        let mut f = BufWriter::new(fs::File::create(
            dir.join("feats").join(format!("{}.bin", u.id)),
        )?);
        f.write_all(&(u.features.nrows() as u32).to_le_bytes())?;
        f.write_all(&(u.features.ncols() as u32).to_le_bytes())?;
        for v in u.features.iter() {
            f.write_all(&v.to_le_bytes())?;
        }

        let align: Vec<String> = u.alignment.iter().map(|p| p.to_string()).collect();
        let mut a = fs::File::create(dir.join("alignments").join(format!("{}.txt", u.id)))?;
        writeln!(a, "{}", align.join(" "))?;
    }
    Ok(())
}

fn corrupt(path: &Path, offset: u64, msg: impl Into<String>) -> CorpusError {
    CorpusError::CorruptFile {
        path: path.display().to_string(),
        offset,
        msg: msg.into(),
    }
}

fn read_feats(path: &Path) -> Result<Array2<f32>, CorpusError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(corrupt(path, bytes.len() as u64, "missing shape header"));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expect = 8 + rows * cols * 4;
    if bytes.len() != expect {
        return Err(corrupt(
            path,
            bytes.len() as u64,
            format!("expected {expect} bytes for {rows}x{cols} matrix"),
        ));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes[8..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| corrupt(path, 8, format!("shape error: {e}")))
}

fn parse_phones(path: &Path, line_no: usize, s: &str) -> Result<Vec<Phone>, CorpusError> {
    s.split_whitespace()
        .map(|tok| {
            tok.parse::<Phone>()
                .map_err(|e| corrupt(path, line_no as u64, format!("bad phone id {tok:?}: {e}")))
        })
        .collect()
}

/// Read a corpus directory written by [`write_corpus`]. The split tag is
/// supplied by the caller; it is not part of the on-disk layout.
pub fn read_corpus(dir: impl AsRef<Path>, split: Split) -> Result<Corpus, CorpusError> {
    let dir = dir.as_ref();
    let text_path = dir.join("text");
    let mut transcripts: Vec<(String, Vec<Phone>)> = Vec::new();
    for (i, line) in open_lines(&text_path)?.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once(' ')
            .ok_or_else(|| corrupt(&text_path, i as u64, "expected `<utt> <phones...>`"))?;
        transcripts.push((id.to_string(), parse_phones(&text_path, i, rest)?));
    }

    let spk_path = dir.join("utt2spk");
    let mut utt2spk: std::collections::HashMap<String, String> = Default::default();
    for (i, line) in open_lines(&spk_path)?.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, spk) = line
            .split_once(' ')
            .ok_or_else(|| corrupt(&spk_path, i as u64, "expected `<utt> <speaker>`"))?;
        utt2spk.insert(id.to_string(), spk.trim().to_string());
    }

    let mut utterances = Vec::with_capacity(transcripts.len());
    for (id, transcript) in transcripts {
        let speaker = utt2spk
            .get(&id)
            .ok_or_else(|| corrupt(&spk_path, 0, format!("utterance {id} missing speaker")))?
            .clone();
        let feats_path = dir.join("feats").join(format!("{id}.bin"));
        let features = read_feats(&feats_path)?;
        let align_path = dir.join("alignments").join(format!("{id}.txt"));
        let mut align_text = String::new();
        fs::File::open(&align_path)?.read_to_string(&mut align_text)?;
        let alignment = parse_phones(&align_path, 0, &align_text)?;
        if alignment.len() != features.nrows() {
            return Err(corrupt(
                &align_path,
                0,
                format!(
                    "alignment has {} frames, features have {}",
                    alignment.len(),
                    features.nrows()
                ),
            ));
        }
        utterances.push(Utterance {
            id,
            speaker,
            features,
            transcript,
            alignment,
        });
    }
    utterances.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Corpus { split, utterances })
}

fn open_lines(
    path: &Path,
) -> Result<impl Iterator<Item = std::io::Result<String>>, CorpusError> {
    Ok(std::io::BufReader::new(fs::File::open(path)?).lines())
}

#[cfg(test)]
mod tests {
    use super::super::{generate, GeneratorConfig};
    use super::*;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("latkit-corpus-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn round_trip_all_fields() {
        let cfg = GeneratorConfig {
            train_speakers: 2,
            test_speakers: 1,
            train_utts_per_speaker: 3,
            test_utts_per_speaker: 2,
            ..GeneratorConfig::default()
        };
        let (tr, _) = generate(&cfg).unwrap();
        let dir = tmpdir("roundtrip");
        write_corpus(&dir, &tr).unwrap();
        let back = read_corpus(&dir, Split::Train).unwrap();
        assert_eq!(back.utterances, tr.utterances);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn truncated_features_reported_with_offset() {
        let cfg = GeneratorConfig {
            train_speakers: 1,
            test_speakers: 1,
            train_utts_per_speaker: 1,
            test_utts_per_speaker: 1,
            ..GeneratorConfig::default()
        };
        let (tr, _) = generate(&cfg).unwrap();
        let dir = tmpdir("truncated");
        write_corpus(&dir, &tr).unwrap();
        let feat = dir
            .join("feats")
            .join(format!("{}.bin", tr.utterances[0].id));
        let bytes = fs::read(&feat).unwrap();
        fs::write(&feat, &bytes[..bytes.len() - 3]).unwrap();
        match read_corpus(&dir, Split::Train) {
            Err(CorpusError::CorruptFile { offset, .. }) => {
                assert_eq!(offset, (bytes.len() - 3) as u64)
            }
            other => panic!("expected CorruptFile, got {other:?}"),
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn empty_corpus_round_trips() {
        let dir = tmpdir("empty");
        let empty = Corpus {
            split: Split::Test,
            utterances: vec![],
        };
        write_corpus(&dir, &empty).unwrap();
        let back = read_corpus(&dir, Split::Test).unwrap();
        assert!(back.utterances.is_empty());
        fs::remove_dir_all(&dir).unwrap();
    }
}
