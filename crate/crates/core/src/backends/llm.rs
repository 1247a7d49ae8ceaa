//! Typed LLM client: template rendering, format validation, retries,
//! response caching, and majority-vote MCQ judging.
//!
//! Templates live as text files beside this module and are rendered by
//! filling the bracketed slots; nothing else about the template text is
//! altered. Tests pin the template hashes.

use std::cell::RefCell;
use std::collections::HashMap;
use std::time::Duration;

use crate::backends::{LlmApi, LlmExchange};
use crate::bank::{normalize_text, Verdict};
use crate::error::{Error, Result};

pub const TPL_GENERATION_SINGLE: &str = include_str!("templates/generation_single.txt");
pub const TPL_GENERATION_MULTI: &str = include_str!("templates/generation_multi.txt");
pub const TPL_FACT_VERIFICATION: &str = include_str!("templates/fact_verification.txt");
pub const TPL_EVAL_TRUTHFULNESS: &str = include_str!("templates/eval_truthfulness.txt");
pub const TPL_EVAL_DISTINGUISHABILITY: &str = include_str!("templates/eval_distinguishability.txt");

/// Superclass wording used when no superclass is known.
pub const DEFAULT_SUPERCLASS: &str = "object categories";

/// Render the single-label generation prompt. Deleted concepts previously
/// generated by this label's prompt are appended, one per line, after the
/// overlap note.
pub fn render_generation_single(label: &str, superclass: Option<&str>, exclusions: &[String]) -> String {
    let sc = superclass.unwrap_or(DEFAULT_SUPERCLASS);
    let mut prompt = TPL_GENERATION_SINGLE
        .replace("[class name]", label)
        .replace("[superclass]", sc);
    for e in exclusions {
        prompt.push('\n');
        prompt.push_str(e);
    }
    prompt
}

/// Render the multi-label (indistinguishable labels) generation prompt.
pub fn render_generation_multi(labels: &[String], exclusions: &[String]) -> String {
    let list = labels.join(", ");
    let mut prompt = TPL_GENERATION_MULTI.replace("[class name list]", &list);
    for e in exclusions {
        prompt.push('\n');
        prompt.push_str(e);
    }
    prompt
}

pub fn render_fact_verification(concept: &str, label: &str) -> String {
    TPL_FACT_VERIFICATION
        .replace("[concept]", concept)
        .replace("[class name]", label)
}

pub fn render_truthfulness(label: &str, features: &[String]) -> String {
    TPL_EVAL_TRUTHFULNESS
        .replace("[class name]", label)
        .replace("[feature list]", &features.join(", "))
}

pub fn render_distinguishability(features: &[String], superclass: &str, options: &[String]) -> String {
    assert_eq!(options.len(), 5, "distinguishability MCQs carry 5 options");
    TPL_EVAL_DISTINGUISHABILITY
        .replace("[feature list]", &features.join(", "))
        .replace("[superclass]", superclass)
        .replace("[A]", &options[0])
        .replace("[B]", &options[1])
        .replace("[C]", &options[2])
        .replace("[D]", &options[3])
        .replace("[E]", &options[4])
}

/// Parse newline-separated concept phrases; tolerates bullet markers but
/// rejects an empty list.
fn parse_phrases(raw: &str) -> Option<Vec<String>> {
    let phrases: Vec<String> = raw
        .lines()
        .map(|l| l.trim().trim_start_matches(['-', '*', '•']).trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if phrases.is_empty() {
        None
    } else {
        Some(phrases)
    }
}

/// Parse a single-letter answer out of `raw`, accepting forms like
/// "B", "b.", "B) ...". Returns the 0-based option index.
fn parse_letter(raw: &str, n_options: usize) -> Option<usize> {
    let trimmed = raw.trim();
    let first = trimmed.chars().next()?;
    let upper = first.to_ascii_uppercase();
    if !upper.is_ascii_uppercase() {
        return None;
    }
    let idx = (upper as u8).wrapping_sub(b'A') as usize;
    if idx >= n_options {
        return None;
    }
    // Anything after the letter must be punctuation or a delimiter, so a
    // sentence that merely starts with "A" does not parse as option A.
    match trimmed.chars().nth(1) {
        None => Some(idx),
        Some(c) if c == '.' || c == ')' || c == ':' || c.is_whitespace() => Some(idx),
        Some(_) => None,
    }
}

#[derive(Debug, Clone)]
enum Parsed {
    Phrases(Vec<String>),
    Verdict(Verdict),
    McqAnswer(usize),
}

impl Parsed {
    fn to_json(&self) -> serde_json::Value {
        match self {
            Parsed::Phrases(p) => serde_json::json!({ "phrases": p }),
            Parsed::Verdict(v) => serde_json::json!({ "verdict": v }),
            Parsed::McqAnswer(i) => serde_json::json!({ "answer": i }),
        }
    }
}

/// Behavior knobs for the client.
#[derive(Debug, Clone)]
pub struct LlmClientConfig {
    /// Attempts per request before giving up on format errors.
    pub retries: usize,
    /// Base backoff; attempt `i` sleeps `base * 2^i`. Zero disables sleeping.
    pub backoff: Duration,
    /// Sampling temperature for concept generation.
    pub generation_temperature: f64,
    /// Sampling temperature for verification and MCQ judging.
    pub judge_temperature: f64,
    /// Votes per MCQ; the majority wins, ties break to the lowest index.
    pub mcq_votes: usize,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        LlmClientConfig {
            retries: 3,
            backoff: Duration::from_millis(250),
            generation_temperature: 0.7,
            judge_temperature: 0.0,
            mcq_votes: 3,
        }
    }
}

/// LLM client over any [`LlmApi`] transport. Responses are cached by
/// (template id, filled arguments), so repeated identical calls cost one
/// request; every round trip is recorded for audit.
pub struct LlmClient {
    api: Box<dyn LlmApi>,
    config: LlmClientConfig,
    cache: RefCell<HashMap<String, Parsed>>,
    transcripts: RefCell<Vec<LlmExchange>>,
}

const SEP: char = '\u{1f}';

impl LlmClient {
    pub fn new(api: Box<dyn LlmApi>, config: LlmClientConfig) -> Self {
        LlmClient {
            api,
            config,
            cache: RefCell::new(HashMap::new()),
            transcripts: RefCell::new(Vec::new()),
        }
    }

    /// Total completions issued by the underlying transport.
    pub fn calls(&self) -> usize {
        self.api.calls()
    }

    pub fn transcripts(&self) -> Vec<LlmExchange> {
        self.transcripts.borrow().clone()
    }

    /// Write all recorded exchanges as JSON lines.
    pub fn write_transcripts(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::File::create(path)?;
        for ex in self.transcripts.borrow().iter() {
            writeln!(f, "{}", serde_json::to_string(ex)?)?;
        }
        Ok(())
    }

    fn backoff(&self, attempt: usize) {
        if !self.config.backoff.is_zero() {
            std::thread::sleep(self.config.backoff * (1u32 << attempt.min(4)));
        }
    }

    /// One validated request with retries. `validate` maps a raw response to
    /// a parsed value or rejects it.
    fn request(
        &self,
        template: &str,
        args: Vec<String>,
        prompt: &str,
        temperature: f64,
        sample_index: usize,
        validate: &dyn Fn(&str) -> Option<Parsed>,
    ) -> Result<Parsed> {
        let cache_key = format!("{template}{SEP}{}{SEP}{sample_index}", args.join(&SEP.to_string()));
        if let Some(hit) = self.cache.borrow().get(&cache_key) {
            return Ok(hit.clone());
        }
        let mut last_response = String::new();
        for attempt in 0..self.config.retries {
            if attempt > 0 {
                self.backoff(attempt - 1);
            }
            let raw = self.api.complete(prompt, temperature, sample_index)?;
            let parsed = validate(&raw);
            self.transcripts.borrow_mut().push(LlmExchange {
                template: template.to_string(),
                args: args.clone(),
                prompt: prompt.to_string(),
                raw_response: raw.clone(),
                parsed: parsed.as_ref().map(|p| p.to_json()),
                retries_used: attempt,
            });
            if let Some(p) = parsed {
                self.cache.borrow_mut().insert(cache_key, p.clone());
                return Ok(p);
            }
            last_response = raw;
        }
        Err(Error::LlmFormat {
            attempts: self.config.retries,
            last_response,
        })
    }

    /// Generate candidate concept phrases for one label. Phrases matching an
    /// exclusion (after normalization) are filtered from the output.
    pub fn generate_concepts(
        &self,
        label: &str,
        superclass: Option<&str>,
        exclusions: &[String],
    ) -> Result<Vec<String>> {
        if label.trim().is_empty() {
            return Err(Error::EmptyInput("generation label".to_string()));
        }
        let prompt = render_generation_single(label, superclass, exclusions);
        let args = vec![
            label.to_string(),
            superclass.unwrap_or(DEFAULT_SUPERCLASS).to_string(),
            exclusions.join("|"),
        ];
        let parsed = self.request(
            "generation_single",
            args,
            &prompt,
            self.config.generation_temperature,
            0,
            &|raw| parse_phrases(raw).map(Parsed::Phrases),
        )?;
        match parsed {
            Parsed::Phrases(p) => Ok(filter_exclusions(p, exclusions)),
            _ => unreachable!(),
        }
    }

    /// Generate phrases that distinguish between a confusable label group.
    pub fn generate_concepts_multi(
        &self,
        labels: &[String],
        exclusions: &[String],
    ) -> Result<Vec<String>> {
        if labels.len() < 2 {
            return Err(Error::EmptyInput(
                "multi-label generation needs at least two labels".to_string(),
            ));
        }
        let prompt = render_generation_multi(labels, exclusions);
        let args = vec![labels.join(","), exclusions.join("|")];
        let parsed = self.request(
            "generation_multi",
            args,
            &prompt,
            self.config.generation_temperature,
            0,
            &|raw| parse_phrases(raw).map(Parsed::Phrases),
        )?;
        match parsed {
            Parsed::Phrases(p) => Ok(filter_exclusions(p, exclusions)),
            _ => unreachable!(),
        }
    }

    /// Ask for the factual relation of a concept to a label.
    pub fn verify_fact(&self, concept: &str, label: &str) -> Result<Verdict> {
        if concept.trim().is_empty() || label.trim().is_empty() {
            return Err(Error::EmptyInput("fact verification inputs".to_string()));
        }
        let prompt = render_fact_verification(concept, label);
        let args = vec![concept.to_string(), label.to_string()];
        let parsed = self.request(
            "fact_verification",
            args,
            &prompt,
            self.config.judge_temperature,
            0,
            &|raw| {
                parse_letter(raw, 3).map(|i| {
                    Parsed::Verdict(match i {
                        0 => Verdict::Critical,
                        1 => Verdict::Occasional,
                        _ => Verdict::Unrelated,
                    })
                })
            },
        )?;
        match parsed {
            Parsed::Verdict(v) => Ok(v),
            _ => unreachable!(),
        }
    }

    /// Judge an MCQ with 2-5 options by majority over independent samples.
    /// Samples that stay unparseable after retries are dropped; if every
    /// sample drops, the last format error propagates. Ties break to the
    /// lowest option index.
    pub fn answer_mcq(&self, template: &str, args: Vec<String>, prompt: &str, n_options: usize) -> Result<usize> {
        self.answer_mcq_detailed(template, args, prompt, n_options)
            .map(|(majority, _)| majority)
    }

    /// Like [`Self::answer_mcq`] but also returns the individual votes.
    pub fn answer_mcq_detailed(
        &self,
        template: &str,
        args: Vec<String>,
        prompt: &str,
        n_options: usize,
    ) -> Result<(usize, Vec<usize>)> {
        assert!((2..=5).contains(&n_options), "MCQs carry 2-5 options");
        let mut votes = Vec::new();
        let mut last_err = None;
        for sample in 0..self.config.mcq_votes {
            let mut sample_args = args.clone();
            sample_args.push(format!("vote{sample}"));
            match self.request(
                template,
                sample_args,
                prompt,
                self.config.judge_temperature,
                sample,
                &|raw| parse_letter(raw, n_options).map(Parsed::McqAnswer),
            ) {
                Ok(Parsed::McqAnswer(i)) => votes.push(i),
                Ok(_) => unreachable!(),
                Err(e) => last_err = Some(e),
            }
        }
        if votes.is_empty() {
            return Err(last_err.expect("no votes implies at least one error"));
        }
        Ok((majority_vote(&votes, n_options), votes))
    }
}

/// Majority vote with ties broken by the lowest option index.
pub fn majority_vote(votes: &[usize], n_options: usize) -> usize {
    let mut counts = vec![0usize; n_options];
    for &v in votes {
        counts[v] += 1;
    }
    let best = *counts.iter().max().expect("n_options >= 2");
    counts.iter().position(|&c| c == best).expect("max exists")
}

fn filter_exclusions(phrases: Vec<String>, exclusions: &[String]) -> Vec<String> {
    let excluded: Vec<String> = exclusions.iter().map(|e| normalize_text(e)).collect();
    phrases
        .into_iter()
        .filter(|p| !excluded.contains(&normalize_text(p)))
        .collect()
}
