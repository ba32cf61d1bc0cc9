//! Deterministic synthetic video-QA corpus.
//!
//! A latent scene (objects with category, color, action and a visibility
//! window, plus a scene tag) is rendered to frame and object features with
//! the same shapes as real clip features. Five question templates turn a
//! scene into question-answer pairs and [`oracle_answer`] evaluates any
//! question against the latent scene.

mod corpus;
mod render;

pub use corpus::{
    corpus_from_bytes, corpus_to_bytes, generate_corpus, read_corpus, write_corpus, Corpus, SynthExample, CORPUS_MAGIC,
};
pub use render::{Renderer, DESCRIPTOR_DIM, PHASE_DIM};

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GpnError, Result};
use crate::jqag::{TokenSequence, NUM_SPECIAL, UNK};

pub const CATEGORIES: [&str; 16] = [
    "person", "dog", "cat", "car", "bike", "ball", "horse", "bird", "chair", "table", "cup", "phone", "book", "tree",
    "boat", "guitar",
];
pub const COLORS: [&str; 8] = ["red", "blue", "green", "yellow", "black", "white", "brown", "gray"];
pub const ACTIONS: [&str; 8] = [
    "running", "sitting", "jumping", "standing", "walking", "falling", "spinning", "flying",
];
pub const TAGS: [&str; 4] = ["day", "night", "indoor", "outdoor"];
pub const MAX_OBJECTS: usize = 5;
pub const NUM_FRAMES: usize = 20;

pub const QUESTION_TYPES: usize = 5;
pub const TYPE_NAMES: [&str; QUESTION_TYPES] = ["what_object", "what_color", "count", "yes_no", "scene"];

const SPECIALS: [&str; NUM_SPECIAL] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const FUNCTION_WORDS: [&str; 15] = [
    "what", "object", "is", "color", "the", "how", "many", "are", "there", "more", "than", "one", "setting", "of",
    "video",
];
const QUESTION_MARK: &str = "?";

/// Mixes a seed with a stream label and an id into a generator seed.
pub(crate) fn derive_seed(seed: u64, stream: u64, id: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ id.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Word and answer tables. Indices `0..4` are PAD, BOS, EOS, UNK.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    word_index: HashMap<String, usize>,
    answers: Vec<String>,
    answer_index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>, answers: Vec<String>) -> Result<Self> {
        let index = |items: &[String], what: &str| -> Result<HashMap<String, usize>> {
            let mut m = HashMap::with_capacity(items.len());
            for (i, w) in items.iter().enumerate() {
                if m.insert(w.clone(), i).is_some() {
                    return Err(GpnError::Data(format!("duplicate {what} `{w}`")));
                }
            }
            Ok(m)
        };
        if words.len() < NUM_SPECIAL || words[..NUM_SPECIAL] != SPECIALS.map(String::from) {
            return Err(GpnError::Data(
                "vocabulary must start with <pad> <bos> <eos> <unk>".into(),
            ));
        }
        Ok(Vocabulary {
            word_index: index(&words, "word")?,
            answer_index: index(&answers, "answer")?,
            words,
            answers,
        })
    }

    /// The template vocabulary and closed answer set of the synthetic task.
    pub fn standard() -> Self {
        let words = SPECIALS
            .iter()
            .chain(FUNCTION_WORDS.iter())
            .chain([QUESTION_MARK].iter())
            .chain(CATEGORIES.iter())
            .chain(ACTIONS.iter())
            .map(|s| s.to_string())
            .collect();
        let answers = CATEGORIES
            .iter()
            .chain(COLORS.iter())
            .map(|s| s.to_string())
            .chain((1..=MAX_OBJECTS).map(|k| k.to_string()))
            .chain(["yes", "no"].iter().map(|s| s.to_string()))
            .chain(TAGS.iter().map(|s| s.to_string()))
            .collect();
        Vocabulary::new(words, answers).expect("standard vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn num_answers(&self) -> usize {
        self.answers.len()
    }

    pub fn word(&self, i: usize) -> Option<&str> {
        self.words.get(i).map(String::as_str)
    }

    pub fn word_id(&self, w: &str) -> Option<usize> {
        self.word_index.get(w).copied()
    }

    pub fn answer(&self, i: usize) -> Option<&str> {
        self.answers.get(i).map(String::as_str)
    }

    pub fn answer_id(&self, a: &str) -> Option<usize> {
        self.answer_index.get(a).copied()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    /// Whitespace tokenization with lowercasing; unknown words map to UNK.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let ids: Vec<usize> = text
            .split_whitespace()
            .map(|w| self.word_id(&w.to_lowercase()).unwrap_or(UNK))
            .collect();
        TokenSequence::from_words(&ids)
    }

    /// The words of a sequence, space-joined. Stops at EOS.
    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.words()
            .iter()
            .map(|&t| self.word(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn category_answer(&self, c: usize) -> usize {
        c
    }

    pub fn color_answer(&self, c: usize) -> usize {
        CATEGORIES.len() + c
    }

    pub fn count_answer(&self, k: usize) -> Option<usize> {
        (1..=MAX_OBJECTS)
            .contains(&k)
            .then(|| CATEGORIES.len() + COLORS.len() + k - 1)
    }

    pub fn yes_no_answer(&self, yes: bool) -> usize {
        CATEGORIES.len() + COLORS.len() + MAX_OBJECTS + usize::from(!yes)
    }

    pub fn tag_answer(&self, t: usize) -> usize {
        CATEGORIES.len() + COLORS.len() + MAX_OBJECTS + 2 + t
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: usize,
    pub color: usize,
    pub action: usize,
    /// Visible frames `start..end`.
    pub start: usize,
    pub end: usize,
}

impl SceneObject {
    pub fn visible(&self, frame: usize) -> bool {
        (self.start..self.end).contains(&frame)
    }
}

/// Ground truth of one synthetic clip. `objects[0]` is the primary object and
/// is visible in every frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentScene {
    pub scene_id: u64,
    pub objects: Vec<SceneObject>,
    pub tag: usize,
}

impl LatentScene {
    pub fn count(&self, category: usize) -> usize {
        self.objects.iter().filter(|o| o.category == category).count()
    }

    pub fn object_counts(&self) -> [usize; 16] {
        let mut c = [0; 16];
        for o in &self.objects {
            c[o.category] += 1;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GpnError::Data(format!("scene {}: {m}", self.scene_id)));
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return bad(format!("{} objects", self.objects.len()));
        }
        if self.tag >= TAGS.len() {
            return bad(format!("tag {}", self.tag));
        }
        for o in &self.objects {
            if o.category >= CATEGORIES.len() || o.color >= COLORS.len() || o.action >= ACTIONS.len() {
                return bad(format!("object {o:?} outside the grammar"));
            }
            if o.start >= o.end || o.end > NUM_FRAMES {
                return bad(format!("window {}..{}", o.start, o.end));
            }
        }
        Ok(())
    }
}

/// Probability that a secondary object repeats the primary category, so
/// counting and yes/no questions are not dominated by a single answer.
const REPEAT_PRIMARY: f64 = 0.4;

pub fn gen_scene(corpus_seed: u64, scene_id: u64) -> LatentScene {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(corpus_seed, 1, scene_id));
    let count = rng.random_range(1..=MAX_OBJECTS);
    let mut objects = Vec::with_capacity(count);
    for i in 0..count {
        let category = if i > 0 && rng.random_bool(REPEAT_PRIMARY) {
            objects.first().map(|o: &SceneObject| o.category).unwrap_or(0)
        } else {
            rng.random_range(0..CATEGORIES.len())
        };
        let (start, end) = if i == 0 {
            (0, NUM_FRAMES)
        } else {
            let len = rng.random_range(4..=NUM_FRAMES);
            let start = rng.random_range(0..=NUM_FRAMES - len);
            (start, start + len)
        };
        objects.push(SceneObject {
            category,
            color: rng.random_range(0..COLORS.len()),
            action: rng.random_range(0..ACTIONS.len()),
            start,
            end,
        });
    }
    LatentScene {
        scene_id,
        objects,
        tag: rng.random_range(0..TAGS.len()),
    }
}

fn words_of(vocab: &Vocabulary, words: &[&str]) -> TokenSequence {
    let ids: Vec<usize> = words.iter().map(|w| vocab.word_id(w).unwrap_or(UNK)).collect();
    TokenSequence::from_words(&ids)
}

/// Fill the template of `question_type` about the primary object. `None` when
/// the scene has no object to ask about.
pub fn gen_qa(vocab: &Vocabulary, scene: &LatentScene, question_type: usize) -> Result<Option<(TokenSequence, usize)>> {
    if question_type >= QUESTION_TYPES {
        return Err(GpnError::OutOfRange {
            what: "question type",
            index: question_type,
            len: QUESTION_TYPES,
        });
    }
    let Some(primary) = scene.objects.first() else {
        return Ok(if question_type == 4 {
            Some((
                words_of(vocab, &["what", "is", "the", "setting", "of", "the", "video", "?"]),
                vocab.tag_answer(scene.tag),
            ))
        } else {
            None
        });
    };
    let cat = CATEGORIES[primary.category];
    let qa = match question_type {
        0 => (
            words_of(vocab, &["what", "object", "is", ACTIONS[primary.action], "?"]),
            vocab.category_answer(primary.category),
        ),
        1 => (
            words_of(vocab, &["what", "color", "is", "the", cat, "?"]),
            vocab.color_answer(primary.color),
        ),
        2 => {
            let n = scene.count(primary.category);
            let Some(a) = vocab.count_answer(n) else {
                return Ok(None);
            };
            (words_of(vocab, &["how", "many", cat, "are", "there", "?"]), a)
        }
        3 => (
            words_of(vocab, &["is", "there", "more", "than", "one", cat, "?"]),
            vocab.yes_no_answer(scene.count(primary.category) > 1),
        ),
        _ => (
            words_of(vocab, &["what", "is", "the", "setting", "of", "the", "video", "?"]),
            vocab.tag_answer(scene.tag),
        ),
    };
    Ok(Some(qa))
}

/// Result of evaluating a question against a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleVerdict {
    Answer(usize),
    /// Well formed, but the entity it refers to is not in the scene.
    Unanswerable,
    /// Not produced by any template.
    Malformed,
}

enum Parsed {
    WhatObject(usize),
    WhatColor(usize),
    Count(usize),
    MoreThanOne(usize),
    Setting,
}

fn parse(words: &[&str]) -> Option<Parsed> {
    let cat = |w: &str| CATEGORIES.iter().position(|&c| c == w);
    let act = |w: &str| ACTIONS.iter().position(|&a| a == w);
    match words {
        ["what", "object", "is", a, "?"] => act(a).map(Parsed::WhatObject),
        ["what", "color", "is", "the", c, "?"] => cat(c).map(Parsed::WhatColor),
        ["how", "many", c, "are", "there", "?"] => cat(c).map(Parsed::Count),
        ["is", "there", "more", "than", "one", c, "?"] => cat(c).map(Parsed::MoreThanOne),
        ["what", "is", "the", "setting", "of", "the", "video", "?"] => Some(Parsed::Setting),
        _ => None,
    }
}

/// Template family of a question, if it parses.
pub fn question_type_of(vocab: &Vocabulary, question: &TokenSequence) -> Option<usize> {
    let words: Vec<&str> = question.words().iter().map(|&t| vocab.word(t).unwrap_or("")).collect();
    parse(&words).map(|p| match p {
        Parsed::WhatObject(_) => 0,
        Parsed::WhatColor(_) => 1,
        Parsed::Count(_) => 2,
        Parsed::MoreThanOne(_) => 3,
        Parsed::Setting => 4,
    })
}

/// Evaluate a question against the latent scene by brute force. When several
/// objects match, the first one listed answers. "Is there more than one X"
/// with no X present is answerable ("no").
pub fn oracle_answer(vocab: &Vocabulary, scene: &LatentScene, question: &TokenSequence) -> OracleVerdict {
    let words: Vec<&str> = question.words().iter().map(|&t| vocab.word(t).unwrap_or("")).collect();
    let Some(parsed) = parse(&words) else {
        return OracleVerdict::Malformed;
    };
    let first = |pred: &dyn Fn(&SceneObject) -> bool| scene.objects.iter().find(|o| pred(o));
    match parsed {
        Parsed::WhatObject(a) => first(&|o| o.action == a)
            .map(|o| OracleVerdict::Answer(vocab.category_answer(o.category)))
            .unwrap_or(OracleVerdict::Unanswerable),
        Parsed::WhatColor(c) => first(&|o| o.category == c)
            .map(|o| OracleVerdict::Answer(vocab.color_answer(o.color)))
            .unwrap_or(OracleVerdict::Unanswerable),
        Parsed::Count(c) => vocab
            .count_answer(scene.count(c))
            .map(OracleVerdict::Answer)
            .unwrap_or(OracleVerdict::Unanswerable),
        Parsed::MoreThanOne(c) => OracleVerdict::Answer(vocab.yes_no_answer(scene.count(c) > 1)),
        Parsed::Setting => OracleVerdict::Answer(vocab.tag_answer(scene.tag)),
    }
}

/// Whether an answer value is present in the scene at all, independent of
/// any question: some object has that category or color, some category
/// occurs that many times, or the tag matches. Yes and no are always
/// grounded.
pub fn answer_grounded(vocab: &Vocabulary, scene: &LatentScene, answer: usize) -> bool {
    let (c, k, y) = (CATEGORIES.len(), COLORS.len(), MAX_OBJECTS);
    match answer {
        a if a < c => scene.count(a) > 0,
        a if a < c + k => scene.objects.iter().any(|o| o.color == a - c),
        a if a < c + k + y => {
            let n = a - c - k + 1;
            scene.object_counts().contains(&n)
        }
        a if a < c + k + y + 2 => true,
        a => a < vocab.num_answers() && scene.tag == a - c - k - y - 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(objects: &[(usize, usize, usize)], tag: usize) -> LatentScene {
        LatentScene {
            scene_id: 0,
            objects: objects
                .iter()
                .map(|&(category, color, action)| SceneObject {
                    category,
                    color,
                    action,
                    start: 0,
                    end: NUM_FRAMES,
                })
                .collect(),
            tag,
        }
    }

    #[test]
    fn vocabulary_is_bijective() {
        let v = Vocabulary::standard();
        for (i, w) in v.words().iter().enumerate() {
            assert_eq!(v.word_id(w), Some(i));
        }
        for (i, a) in v.answers().iter().enumerate() {
            assert_eq!(v.answer_id(a), Some(i));
        }
        assert_eq!(v.word(0), Some("<pad>"));
        assert_eq!(v.word(3), Some("<unk>"));
        assert_eq!(v.answer(v.count_answer(3).unwrap()), Some("3"));
        assert_eq!(v.answer(v.yes_no_answer(false)), Some("no"));
        assert_eq!(v.answer(v.tag_answer(2)), Some("indoor"));
    }

    #[test]
    fn red_dog_color_question() {
        let v = Vocabulary::standard();
        let s = scene(&[(1, 0, 0)], 0);
        let (q, a) = gen_qa(&v, &s, 1).unwrap().unwrap();
        assert_eq!(v.decode(&q), "what color is the dog ?");
        assert_eq!(v.answer(a), Some("red"));
    }

    #[test]
    fn count_and_scene_questions() {
        let v = Vocabulary::standard();
        let s = scene(&[(2, 0, 0), (2, 1, 1), (5, 2, 2), (2, 3, 3)], 0);
        let (_, a) = gen_qa(&v, &s, 2).unwrap().unwrap();
        assert_eq!(v.answer(a), Some("3"));
        let (_, a) = gen_qa(&v, &s, 3).unwrap().unwrap();
        assert_eq!(v.answer(a), Some("yes"));
        let (q, a) = gen_qa(&v, &s, 4).unwrap().unwrap();
        assert_eq!(v.answer(a), Some("day"));
        assert_eq!(question_type_of(&v, &q), Some(4));
    }

    #[test]
    fn inapplicable_type_signals_none() {
        let v = Vocabulary::standard();
        let empty = LatentScene {
            scene_id: 0,
            objects: vec![],
            tag: 1,
        };
        assert_eq!(gen_qa(&v, &empty, 1).unwrap(), None);
        assert!(gen_qa(&v, &empty, 4).unwrap().is_some());
        assert!(gen_qa(&v, &empty, 9).is_err());
    }

    #[test]
    fn oracle_verdicts() {
        let v = Vocabulary::standard();
        let s = scene(&[(1, 0, 0)], 0);
        assert_eq!(
            oracle_answer(&v, &s, &v.encode("what color is the cat ?")),
            OracleVerdict::Unanswerable
        );
        assert_eq!(
            oracle_answer(&v, &s, &v.encode("how many cat are there ?")),
            OracleVerdict::Unanswerable
        );
        assert_eq!(
            oracle_answer(&v, &s, &v.encode("color the is ? dog what")),
            OracleVerdict::Malformed
        );
        assert_eq!(
            oracle_answer(&v, &s, &v.encode("what color is the zebra ?")),
            OracleVerdict::Malformed
        );
        assert_eq!(
            oracle_answer(&v, &s, &v.encode("is there more than one cat ?")),
            OracleVerdict::Answer(v.yes_no_answer(false))
        );
    }

    #[test]
    fn grounding() {
        let v = Vocabulary::standard();
        let s = scene(&[(1, 0, 0), (1, 2, 1), (4, 2, 1)], 3);
        assert!(answer_grounded(&v, &s, v.category_answer(4)));
        assert!(!answer_grounded(&v, &s, v.category_answer(2)));
        assert!(answer_grounded(&v, &s, v.color_answer(2)));
        assert!(!answer_grounded(&v, &s, v.color_answer(5)));
        assert!(answer_grounded(&v, &s, v.count_answer(2).unwrap()));
        assert!(!answer_grounded(&v, &s, v.count_answer(3).unwrap()));
        assert!(answer_grounded(&v, &s, v.tag_answer(3)));
        assert!(!answer_grounded(&v, &s, v.tag_answer(0)));
        assert!(answer_grounded(&v, &s, v.yes_no_answer(true)));
    }

    #[test]
    fn scenes_are_deterministic_and_valid() {
        for id in 0..200 {
            let s = gen_scene(7, id);
            assert_eq!(s, gen_scene(7, id));
            s.validate().unwrap();
            assert_eq!(s.objects[0].start, 0);
            assert_eq!(s.objects[0].end, NUM_FRAMES);
        }
    }

    #[test]
    fn generated_pairs_round_trip_through_oracle() {
        let v = Vocabulary::standard();
        for id in 0..500 {
            let s = gen_scene(3, id);
            for t in 0..QUESTION_TYPES {
                let (q, a) = gen_qa(&v, &s, t).unwrap().unwrap();
                assert_eq!(oracle_answer(&v, &s, &q), OracleVerdict::Answer(a));
                assert_eq!(question_type_of(&v, &q), Some(t));
                assert!(q.words().len() <= 10);
            }
        }
    }
}
