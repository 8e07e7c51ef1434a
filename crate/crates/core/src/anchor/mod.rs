//! Control-point generation: a retrieval-augmented LLM dialogue with a
//! cosine-similarity detector as baseline and fallback.

mod llm;
mod parse;
mod prompts;

pub use llm::{AudioPayload, HttpBackend, LlmClient, MockBackend, PromptId};
pub use parse::{parse_control_list, ParsedControl};
pub use prompts::{fill_template, number_word, ordinal_word, PromptBundle};

use serde::{Deserialize, Serialize};

use crate::annotate::{normalize_category, RetrievalStore, StoreEntry};
use crate::error::{Error, Result};
use crate::scalar::{cosine, Scalar};
use crate::types::{AudioFeatures, ControlPointList};

pub const DEFAULT_THETA: f64 = 0.85;
pub const DEFAULT_TOP_K: usize = 3;

/// Flags frame `t` when the cosine between rows `t` and `t - 1` falls below `theta`.
pub fn detect_boundaries_cosine<S: Scalar>(audio: &AudioFeatures<S>, theta: f64) -> Result<ControlPointList> {
    if !(theta > -1.0 && theta <= 1.0) {
        return Err(Error::InvalidInput(format!("theta must lie in (-1, 1], got {theta}")));
    }
    if audio.frames() == 0 {
        return Err(Error::InvalidInput("audio has no frames".into()));
    }
    if audio.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite audio features".into()));
    }
    let mut flags = vec![0u8; audio.frames()];
    flags[0] = 1;
    for t in 1..audio.frames() {
        let c = cosine(audio.row(t), audio.row(t - 1)).to_f64_lossy();
        if c < theta {
            flags[t] = 1;
        }
    }
    ControlPointList::new(flags)
}

/// Asks for a free-text description of the audio.
pub fn describe_audio(client: &dyn LlmClient, audio: &AudioPayload, prompt: &str) -> Result<String> {
    let text = client.complete(PromptId::Describe, prompt, audio)?;
    if text.trim().is_empty() {
        return Err(Error::Protocol(format!("{} returned an empty description", client.identity())));
    }
    Ok(text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Categorization {
    /// Retrieval key: the first category named in the reply.
    pub key: String,
    /// Every recognised category, in order of mention.
    pub categories: Vec<String>,
    pub reply: String,
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn word_matches(word: &str, target: &str) -> bool {
    word == target || word.strip_suffix('s') == Some(target) || word.strip_suffix("es") == Some(target)
}

fn first_mention(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - needle.len()).find(|&i| needle.iter().zip(&haystack[i..]).all(|(n, w)| word_matches(w, n)))
}

/// Extracts categories from a reply.
///
/// Known category names are located by word match; the earliest one is the key.
/// A reply that names no known category is accepted only if it is a short
/// alphabetic phrase (at most three words), e.g. "Harp.".
pub fn parse_category(reply: &str, known: &[String]) -> Result<Categorization> {
    let reply_words = words(reply);
    let mut found: Vec<(usize, String)> = known
        .iter()
        .map(|k| normalize_category(k))
        .filter_map(|k| first_mention(&reply_words, &words(&k)).map(|pos| (pos, k)))
        .collect();
    found.sort();
    found.dedup_by(|a, b| a.1 == b.1);
    if let Some((_, key)) = found.first() {
        return Ok(Categorization {
            key: key.clone(),
            categories: found.iter().map(|(_, k)| k.clone()).collect(),
            reply: reply.to_string(),
        });
    }
    let phrase = normalize_category(reply.trim().trim_end_matches(|c: char| c.is_ascii_punctuation()));
    let n_words = phrase.split_whitespace().count();
    let alphabetic = phrase.chars().all(|c| c.is_alphabetic() || c == ' ' || c == '-');
    if (1..=3).contains(&n_words) && alphabetic {
        let key = phrase.split_whitespace().collect::<Vec<_>>().join(" ");
        return Ok(Categorization {
            key: key.clone(),
            categories: vec![key],
            reply: reply.to_string(),
        });
    }
    Err(Error::Categorization(format!("no category recognised in {reply:?}")))
}

pub fn categorize_audio(client: &dyn LlmClient, audio: &AudioPayload, prompt: &str, known: &[String]) -> Result<Categorization> {
    let reply = client.complete(PromptId::Categorize, prompt, audio)?;
    parse_category(&reply, known)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Retrieval {
    pub examples: Vec<StoreEntry>,
    /// The category had no entry in the store.
    pub miss: bool,
}

/// Up to `k` annotated examples of category `q`, in video-id order.
pub fn retrieve_examples(store: &RetrievalStore, q: &str, k: usize) -> Retrieval {
    let all = store.get(q);
    Retrieval {
        examples: all.iter().take(k).cloned().collect(),
        miss: all.is_empty(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorMode {
    /// describe, categorize, retrieve, then ask for the list with examples.
    #[default]
    #[serde(rename = "rcpg")]
    Rcpg,
    #[serde(rename = "cosine")]
    Cosine,
    /// One prompt asking for the list directly.
    #[serde(rename = "1step")]
    OneStep,
    /// describe, count, then the one-step prompt; no retrieval.
    #[serde(rename = "3step")]
    ThreeStep,
}

impl std::str::FromStr for AnchorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rcpg" => Ok(AnchorMode::Rcpg),
            "cosine" => Ok(AnchorMode::Cosine),
            "1step" => Ok(AnchorMode::OneStep),
            "3step" => Ok(AnchorMode::ThreeStep),
            other => Err(Error::Config(format!("unknown anchor mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Rcpg,
    OneStep,
    ThreeStep,
    Cosine,
    CosineFallback,
    GroundTruth,
    Imported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub mode: AnchorMode,
    pub theta: f64,
    pub top_k: usize,
    pub prompts: PromptBundle,
    /// Category names the categorize step should recognise in addition to the store keys.
    pub categories: Vec<String>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            mode: AnchorMode::Rcpg,
            theta: DEFAULT_THETA,
            top_k: DEFAULT_TOP_K,
            prompts: PromptBundle::default(),
            categories: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorResult {
    pub control_points: ControlPointList,
    pub category: String,
    pub categories: Vec<String>,
    pub description: String,
    pub provenance: Provenance,
    pub raw_responses: Vec<String>,
    pub retrieval_miss: bool,
    /// Video ids of the examples placed in the prompt.
    pub examples: Vec<String>,
    pub coerced_first_flag: bool,
    pub fallback_reason: Option<String>,
}

impl AnchorResult {
    pub fn from_flags(control_points: ControlPointList, provenance: Provenance) -> Self {
        AnchorResult {
            control_points,
            category: String::new(),
            categories: Vec::new(),
            description: String::new(),
            provenance,
            raw_responses: Vec::new(),
            retrieval_miss: false,
            examples: Vec::new(),
            coerced_first_flag: false,
            fallback_reason: None,
        }
    }
}

/// Runs the configured protocol for one audio track. LLM and parse failures
/// fall back to the cosine detector; only invalid input is an error.
pub fn generate_control_points<S: Scalar>(
    client: &dyn LlmClient,
    payload: &AudioPayload,
    audio: &AudioFeatures<S>,
    store: &RetrievalStore,
    config: &AnchorConfig,
) -> Result<AnchorResult> {
    let cosine_flags = detect_boundaries_cosine(audio, config.theta)?;
    let frames = audio.frames();
    let mut result = AnchorResult::from_flags(cosine_flags.clone(), Provenance::Cosine);
    if config.mode == AnchorMode::Cosine {
        return Ok(result);
    }

    let outcome = match config.mode {
        AnchorMode::Rcpg => run_rcpg(client, payload, store, config, frames, &mut result),
        AnchorMode::OneStep => run_list_prompt(client, payload, &config.prompts.one_step(frames), frames, &mut result)
            .map(|()| Provenance::OneStep),
        AnchorMode::ThreeStep => run_three_step(client, payload, config, frames, &mut result),
        AnchorMode::Cosine => unreachable!(),
    };
    match outcome {
        Ok(p) => result.provenance = p,
        Err(e) => {
            log::warn!("anchoring fell back to cosine similarity: {e}");
            result.control_points = cosine_flags;
            result.coerced_first_flag = false;
            result.provenance = Provenance::CosineFallback;
            result.fallback_reason = Some(e.to_string());
        }
    }
    Ok(result)
}

fn run_list_prompt(client: &dyn LlmClient, payload: &AudioPayload, prompt: &str, frames: usize, result: &mut AnchorResult) -> Result<()> {
    let reply = client.complete(PromptId::Control, prompt, payload)?;
    result.raw_responses.push(reply.clone());
    let parsed = parse_control_list(&reply, frames)?;
    result.control_points = parsed.control_points;
    result.coerced_first_flag = parsed.coerced;
    Ok(())
}

fn run_rcpg(
    client: &dyn LlmClient,
    payload: &AudioPayload,
    store: &RetrievalStore,
    config: &AnchorConfig,
    frames: usize,
    result: &mut AnchorResult,
) -> Result<Provenance> {
    let description = describe_audio(client, payload, &config.prompts.describe_prompt)?;
    result.raw_responses.push(description.clone());
    result.description = description;

    let reply = client.complete(PromptId::Categorize, &config.prompts.categorize_prompt, payload)?;
    result.raw_responses.push(reply.clone());
    let mut known = config.categories.clone();
    known.extend(store.categories().map(str::to_string));
    let cat = parse_category(&reply, &known)?;
    result.category = cat.key.clone();
    result.categories = cat.categories;

    let retrieval = retrieve_examples(store, &cat.key, config.top_k);
    result.retrieval_miss = retrieval.miss;
    result.examples = retrieval.examples.iter().map(|e| e.video_id.clone()).collect();

    let prompt = config.prompts.control_prompt(&retrieval.examples, frames);
    run_list_prompt(client, payload, &prompt, frames, result)?;
    Ok(Provenance::Rcpg)
}

fn run_three_step(
    client: &dyn LlmClient,
    payload: &AudioPayload,
    config: &AnchorConfig,
    frames: usize,
    result: &mut AnchorResult,
) -> Result<Provenance> {
    let description = describe_audio(client, payload, &config.prompts.three_step_describe_prompt)?;
    result.raw_responses.push(description.clone());
    result.description = description;
    let count = client.complete(PromptId::Categorize, &config.prompts.three_step_count_prompt, payload)?;
    result.raw_responses.push(count);
    run_list_prompt(client, payload, &config.prompts.one_step(frames), frames, result)?;
    Ok(Provenance::ThreeStep)
}
