//! Corpus generation and the on-disk corpus format.
//!
//! ```text
//! b"GPNC"
//! u64                index length in bytes (little-endian)
//! [u8; len]          JSON lines: one header object, then one object per example
//! [f64; ...]         feature blobs, little-endian; blob k holds the frames
//!                    then the objects of one scene, row-major
//! ```
//!
//! Header fields: `corpus_seed`, `noise_sigma`, `frames`, `frame_dim`,
//! `object_dim`, `records`, `blobs`. Example fields: `scene`,
//! `question_type`, `question`, `answer`, `blob`. Examples that share a scene
//! share a blob.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gen_qa, gen_scene, LatentScene, Renderer, Vocabulary, NUM_FRAMES, QUESTION_TYPES};
use crate::encoder::{VideoFeatures, FRAME_DIM, OBJECT_DIM};
use crate::error::{GpnError, Result};
use crate::jqag::TokenSequence;
use crate::tensor::Tensor;

pub const CORPUS_MAGIC: &[u8; 4] = b"GPNC";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthExample {
    pub scene_id: u64,
    pub features: Arc<VideoFeatures>,
    pub question_type: usize,
    pub question: TokenSequence,
    pub answer: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub corpus_seed: u64,
    pub noise_sigma: f64,
    /// Sorted by `scene_id`.
    pub scenes: Vec<LatentScene>,
    pub examples: Vec<SynthExample>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn scene(&self, id: u64) -> Option<&LatentScene> {
        self.scenes
            .binary_search_by_key(&id, |s| s.scene_id)
            .ok()
            .map(|i| &self.scenes[i])
    }

    /// The first `scenes` scenes and their examples.
    pub fn truncated(&self, scenes: usize) -> Corpus {
        let keep: Vec<LatentScene> = self.scenes.iter().take(scenes).cloned().collect();
        let last = keep.last().map(|s| s.scene_id);
        Corpus {
            corpus_seed: self.corpus_seed,
            noise_sigma: self.noise_sigma,
            examples: self
                .examples
                .iter()
                .filter(|e| last.is_some_and(|l| e.scene_id <= l))
                .cloned()
                .collect(),
            scenes: keep,
        }
    }
}

/// Scenes `ids`, each rendered once and asked every applicable question type.
pub fn generate_corpus(vocab: &Vocabulary, corpus_seed: u64, ids: Range<u64>, noise_sigma: f64) -> Result<Corpus> {
    let renderer = Renderer::new(corpus_seed);
    let rendered: Vec<(LatentScene, Arc<VideoFeatures>)> = ids
        .into_par_iter()
        .map(|id| {
            let scene = gen_scene(corpus_seed, id);
            let feats = renderer.render(&scene, noise_sigma)?;
            Ok((scene, Arc::new(feats)))
        })
        .collect::<Result<_>>()?;
    let mut examples = Vec::with_capacity(rendered.len() * QUESTION_TYPES);
    for (scene, feats) in &rendered {
        for t in 0..QUESTION_TYPES {
            if let Some((question, answer)) = gen_qa(vocab, scene, t)? {
                examples.push(SynthExample {
                    scene_id: scene.scene_id,
                    features: Arc::clone(feats),
                    question_type: t,
                    question,
                    answer,
                });
            }
        }
    }
    Ok(Corpus {
        corpus_seed,
        noise_sigma,
        scenes: rendered.into_iter().map(|(s, _)| s).collect(),
        examples,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    corpus_seed: u64,
    noise_sigma: f64,
    frames: usize,
    frame_dim: usize,
    object_dim: usize,
    records: usize,
    blobs: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    scene: LatentScene,
    question_type: usize,
    question: TokenSequence,
    answer: usize,
    blob: usize,
}

fn blob_floats() -> usize {
    NUM_FRAMES * (FRAME_DIM + OBJECT_DIM)
}

pub fn corpus_to_bytes(corpus: &Corpus) -> Result<Vec<u8>> {
    let mut blob_of: HashMap<u64, usize> = HashMap::new();
    let mut blobs: Vec<&VideoFeatures> = Vec::new();
    let mut index = Vec::new();
    let mut lines = Vec::with_capacity(corpus.examples.len());
    for e in &corpus.examples {
        let feats = e.features.as_ref();
        if feats.frames.shape() != [NUM_FRAMES, FRAME_DIM] || feats.objects.shape() != [NUM_FRAMES, OBJECT_DIM] {
            return Err(GpnError::shape(
                "write_corpus",
                format!(
                    "scene {} has features {:?}/{:?}",
                    e.scene_id,
                    feats.frames.shape(),
                    feats.objects.shape()
                ),
            ));
        }
        let scene = corpus
            .scene(e.scene_id)
            .ok_or_else(|| GpnError::Data(format!("example refers to missing scene {}", e.scene_id)))?;
        let blob = *blob_of.entry(e.scene_id).or_insert_with(|| {
            blobs.push(feats);
            blobs.len() - 1
        });
        lines.push(Record {
            scene: scene.clone(),
            question_type: e.question_type,
            question: e.question.clone(),
            answer: e.answer,
            blob,
        });
    }
    serde_json::to_writer(
        &mut index,
        &Header {
            corpus_seed: corpus.corpus_seed,
            noise_sigma: corpus.noise_sigma,
            frames: NUM_FRAMES,
            frame_dim: FRAME_DIM,
            object_dim: OBJECT_DIM,
            records: lines.len(),
            blobs: blobs.len(),
        },
    )?;
    index.push(b'\n');
    for r in &lines {
        serde_json::to_writer(&mut index, r)?;
        index.push(b'\n');
    }
    let mut out = Vec::with_capacity(12 + index.len() + 8 * blob_floats() * blobs.len());
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&index);
    for b in blobs {
        for v in b.frames.data().iter().chain(b.objects.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn corpus_from_bytes(bytes: &[u8]) -> Result<Corpus> {
    let corrupt = |offset: usize, record: usize, reason: String| GpnError::Corrupt {
        offset: offset as u64,
        record,
        reason,
    };
    if bytes.len() < 12 || &bytes[..4] != CORPUS_MAGIC {
        return Err(corrupt(0, 0, "missing GPNC magic".into()));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let body = 12usize
        .checked_add(len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt(4, 0, format!("index length {len} exceeds file")))?;
    let mut lines = bytes[12..body].split(|&b| b == b'\n').filter(|l| !l.is_empty());
    let header: Header = serde_json::from_slice(lines.next().ok_or_else(|| corrupt(12, 0, "missing header".into()))?)
        .map_err(|e| corrupt(12, 0, format!("header: {e}")))?;
    if (header.frames, header.frame_dim, header.object_dim) != (NUM_FRAMES, FRAME_DIM, OBJECT_DIM) {
        return Err(corrupt(
            12,
            0,
            format!(
                "unsupported feature shape {}x{}/{}",
                header.frames, header.frame_dim, header.object_dim
            ),
        ));
    }
    let blob_bytes = 8 * blob_floats();
    let mut cache: Vec<Option<Arc<VideoFeatures>>> = vec![None; header.blobs];
    let mut scenes: Vec<LatentScene> = Vec::new();
    let mut examples = Vec::with_capacity(header.records);
    for i in 0..header.records {
        let line = lines
            .next()
            .ok_or_else(|| corrupt(body, i, format!("record {i} missing from index")))?;
        let r: Record = serde_json::from_slice(line).map_err(|e| corrupt(12, i, format!("record {i}: {e}")))?;
        if r.blob >= header.blobs {
            return Err(corrupt(12, i, format!("record {i}: blob {} out of range", r.blob)));
        }
        let feats = match &cache[r.blob] {
            Some(f) => Arc::clone(f),
            None => {
                let start = body + r.blob * blob_bytes;
                let end = start + blob_bytes;
                if end > bytes.len() {
                    return Err(corrupt(
                        start,
                        i,
                        format!(
                            "record {i} (scene {}): feature blob {} truncated",
                            r.scene.scene_id, r.blob
                        ),
                    ));
                }
                let mut vals = bytes[start..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
                let frames: Vec<f64> = vals.by_ref().take(NUM_FRAMES * FRAME_DIM).collect();
                let objects: Vec<f64> = vals.collect();
                let f = Arc::new(VideoFeatures::new(
                    Tensor::matrix(NUM_FRAMES, FRAME_DIM, frames)?,
                    Tensor::matrix(NUM_FRAMES, OBJECT_DIM, objects)?,
                )?);
                cache[r.blob] = Some(Arc::clone(&f));
                f
            }
        };
        if scenes.last().map(|s| s.scene_id) != Some(r.scene.scene_id) {
            scenes.push(r.scene.clone());
        }
        examples.push(SynthExample {
            scene_id: r.scene.scene_id,
            features: feats,
            question_type: r.question_type,
            question: r.question,
            answer: r.answer,
        });
    }
    scenes.sort_by_key(|s| s.scene_id);
    scenes.dedup_by_key(|s| s.scene_id);
    Ok(Corpus {
        corpus_seed: header.corpus_seed,
        noise_sigma: header.noise_sigma,
        scenes,
        examples,
    })
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, corpus_to_bytes(corpus)?)?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    corpus_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let v = Vocabulary::standard();
        let c = generate_corpus(&v, 4, 0..20, 0.1).unwrap();
        assert_eq!(c.len(), 100);
        let back = corpus_from_bytes(&corpus_to_bytes(&c).unwrap()).unwrap();
        assert_eq!(back.scenes, c.scenes);
        for (a, b) in c.examples.iter().zip(&back.examples) {
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.features.frames), bits(&b.features.frames));
            assert_eq!(bits(&a.features.objects), bits(&b.features.objects));
            assert_eq!(
                (a.question_type, &a.question, a.answer),
                (b.question_type, &b.question, b.answer)
            );
        }
    }

    #[test]
    fn empty_corpus_is_valid() {
        let v = Vocabulary::standard();
        let c = generate_corpus(&v, 4, 0..0, 0.1).unwrap();
        let back = corpus_from_bytes(&corpus_to_bytes(&c).unwrap()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn truncation_names_record() {
        let v = Vocabulary::standard();
        let c = generate_corpus(&v, 4, 0..3, 0.1).unwrap();
        let bytes = corpus_to_bytes(&c).unwrap();
        let err = corpus_from_bytes(&bytes[..bytes.len() - 100]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("record 10") && msg.contains("scene 2"), "{msg}");
    }
}
