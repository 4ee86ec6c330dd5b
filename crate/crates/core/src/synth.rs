//! Seeded synthetic corpora with planted structure, plus the mock
//! predictors that go with them.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{assemble_document, CorpusError, Document, TaggedSentence};
use crate::mock::{MockResponse, MockSpec};
use crate::model::{LabelDistribution, NO_ENTITY, WITH_ENTITY};

pub const TOPICS: [&str; 3] = ["sports", "politics", "science"];

const TOPIC_WORDS: [&[&str]; 3] = [
    &["goal", "match", "striker", "league", "coach", "stadium", "season", "referee", "tournament", "keeper"],
    &["senate", "ballot", "minister", "parliament", "campaign", "policy", "election", "governor", "treaty", "caucus"],
    &["protein", "telescope", "neuron", "quantum", "enzyme", "genome", "laboratory", "molecule", "orbit", "fossil"],
];

const FILLER: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "it", "was", "on", "for", "that", "with", "as", "at", "by", "this", "from",
    "but", "or", "an", "they", "which", "one", "had", "were", "all", "there", "when", "up", "out", "about", "more",
    "some", "into", "time", "very", "then", "now", "people", "day", "way", "new", "many", "year", "said", "just",
    "over", "still", "long", "made", "after", "well", "back", "good", "much", "before", "most", "place", "where",
];

#[derive(Debug, Clone)]
pub struct SyntheticClassification {
    /// Documents with gold labels.
    pub docs: Vec<Document>,
    /// Which documents were generated easy.
    pub easy: Vec<bool>,
    /// Final-stage mock: correct on each document with the configured probability.
    pub mamabear: MockSpec,
}

fn topic_labels() -> Vec<String> {
    TOPICS.iter().map(|s| s.to_string()).collect()
}

/// Distribution putting `top` on `label` and splitting the rest evenly.
pub fn peaked(labels: &[String], label: usize, top: f64) -> LabelDistribution<f64> {
    let rest = (1.0 - top) / (labels.len() - 1) as f64;
    let probs = (0..labels.len()).map(|i| if i == label { top } else { rest }).collect();
    LabelDistribution::new(labels.to_vec(), probs).expect("valid peaked distribution")
}

/// A 3-topic corpus. Easy documents carry 3 to 5 keywords of their topic;
/// hard ones carry a single keyword of a random topic, so only the final
/// stage can resolve them. Every document is padded with shared filler words.
pub fn synthetic_classification(n: usize, easy_fraction: f64, mamabear_accuracy: f64, seed: u64) -> SyntheticClassification {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = topic_labels();
    let mut mamabear = MockSpec::classification("mamabear", labels.clone(), MockResponse::Fail("unknown text".into()));
    let mut docs = Vec::with_capacity(n);
    let mut easy = Vec::with_capacity(n);
    for i in 0..n {
        let topic = rng.random_range(0..TOPICS.len());
        let is_easy = rng.random_bool(easy_fraction);
        let mut words: Vec<&str> = (0..rng.random_range(8..16)).map(|_| *FILLER.choose(&mut rng).expect("filler")).collect();
        if is_easy {
            for _ in 0..rng.random_range(3..6) {
                words.push(TOPIC_WORDS[topic].choose(&mut rng).expect("keyword"));
            }
        } else {
            words.push(TOPIC_WORDS[rng.random_range(0..TOPICS.len())].choose(&mut rng).expect("keyword"));
        }
        words.shuffle(&mut rng);
        let text = format!("{} doc{i}", words.join(" "));
        let answer = if rng.random_bool(mamabear_accuracy) { topic } else { (topic + rng.random_range(1..TOPICS.len())) % TOPICS.len() };
        mamabear.insert_text(&text, MockResponse::Distribution(peaked(&labels, answer, 0.9)));
        docs.push(Document::new(format!("doc{i:05}"), text).with_label(TOPICS[topic]));
        easy.push(is_easy);
    }
    SyntheticClassification { docs, easy, mamabear }
}

const ENTITY_TERMS: &[(&str, &str)] = &[
    ("Varnholt", "PER"),
    ("Quillon Marsh", "PER"),
    ("Edda Strom", "PER"),
    ("Tobrik", "PER"),
    ("Zelmora", "LOC"),
    ("Port Anvel", "LOC"),
    ("Kestrin Valley", "LOC"),
    ("Orrisburg", "LOC"),
    ("Helvane Corp", "ORG"),
    ("Brightwater Trust", "ORG"),
    ("Nexil", "ORG"),
    ("Carrow Institute", "ORG"),
];

const OPENERS: &[&str] = &["Then", "Later", "Meanwhile", "Today", "Yesterday", "Still", "Often", "Here"];

#[derive(Debug, Clone)]
pub struct SyntheticTagged {
    pub sentences: Vec<TaggedSentence>,
    /// Entity term → type; every entity in `sentences` is a lexicon term.
    pub lexicon: BTreeMap<String, String>,
}

/// Tagged sentences, exactly `round(n * entity_free_fraction)` of them
/// without entities. Sentences start with a capitalized opener and end
/// with a separate `.` token, so joined text splits back cleanly.
pub fn synthetic_tagged(n: usize, entity_free_fraction: f64, seed: u64) -> SyntheticTagged {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_free = (n as f64 * entity_free_fraction).round() as usize;
    let mut free: Vec<bool> = (0..n).map(|i| i < n_free).collect();
    free.shuffle(&mut rng);
    let sentences = free
        .into_iter()
        .map(|is_free| {
            let mut tokens = vec![OPENERS.choose(&mut rng).expect("opener").to_string()];
            let mut tags = vec!["O".to_string()];
            let n_entities = if is_free { 0 } else { rng.random_range(1..4) };
            let n_words = rng.random_range(5..12);
            let mut slots: Vec<usize> = (0..n_entities).map(|_| rng.random_range(0..n_words)).collect();
            slots.sort_unstable();
            let mut slot = slots.into_iter().peekable();
            for w in 0..n_words {
                while slot.next_if(|&s| s == w).is_some() {
                    let (term, etype) = ENTITY_TERMS.choose(&mut rng).expect("term");
                    for (k, part) in term.split(' ').enumerate() {
                        tokens.push(part.to_string());
                        tags.push(format!("{}-{etype}", if k == 0 { "B" } else { "I" }));
                    }
                    // keep adjacent entities from merging
                    tokens.push("and".into());
                    tags.push("O".into());
                }
                tokens.push(FILLER.choose(&mut rng).expect("filler").to_string());
                tags.push("O".into());
            }
            tokens.push(".".into());
            tags.push("O".into());
            TaggedSentence::new(tokens, tags).expect("matching lengths")
        })
        .collect();
    let lexicon = ENTITY_TERMS.iter().map(|(t, e)| (t.to_string(), e.to_string())).collect();
    SyntheticTagged { sentences, lexicon }
}

/// Groups consecutive sentences into documents of `per_doc` sentences
/// (the last may be shorter), with gold spans in document coordinates.
pub fn tagged_documents(sentences: &[TaggedSentence], per_doc: usize, prefix: &str) -> Result<Vec<Document>, CorpusError> {
    sentences
        .chunks(per_doc.max(1))
        .enumerate()
        .map(|(i, chunk)| assemble_document(format!("{prefix}{i:05}"), chunk))
        .collect()
}

/// A binary no-entity/with-entity mock that is always right about each
/// sentence, with confidence drawn uniformly from `[0.55, 1.0)`.
pub fn perfect_entity_gate(sentences: &[TaggedSentence], seed: u64) -> Result<MockSpec, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = vec![NO_ENTITY.to_string(), WITH_ENTITY.to_string()];
    let mut spec = MockSpec::classification("entitybear", labels.clone(), MockResponse::Fail("unknown sentence".into()));
    for s in sentences {
        let has = !crate::corpus::tags_to_spans(s)?.is_empty();
        let conf = rng.random_range(0.55..1.0);
        spec.insert_text(&s.text, MockResponse::Distribution(peaked(&labels, usize::from(has), conf)));
    }
    Ok(spec)
}
