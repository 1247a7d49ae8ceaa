//! Scripted LLM transport for offline runs and tests.
//!
//! The transport receives rendered prompts, recognizes which template they
//! came from by prefix, extracts the filled slots, and answers from scripted
//! fixtures: generation lists per label, a fact-verdict table, and an MCQ
//! policy. The `Oracle` MCQ policy answers evaluation questions from the
//! same verdict table that defines the planted world, which makes the
//! interpretability harness checkable end to end.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::backends::synthetic::WorldSpec;
use crate::backends::LlmApi;
use crate::bank::{normalize_text, Verdict};
use crate::error::Result;

/// How the scripted transport answers MCQ prompts.
#[derive(Debug, Clone)]
pub enum McqScript {
    /// Always the same raw response.
    Always(String),
    /// Responses consumed in order; the last repeats once exhausted.
    Sequence(Vec<String>),
    /// Answer from the planted verdict table (see module docs).
    Oracle,
}

#[derive(Debug)]
struct Inner {
    gen_single: HashMap<String, Vec<String>>,
    gen_multi: HashMap<String, Vec<String>>,
    verdicts: HashMap<(String, String), Verdict>,
    mcq: McqScript,
    mcq_cursor: usize,
    calls: usize,
}

/// Cloneable handle to shared scripted state; clones observe the same
/// call counters, which lets tests keep a handle after boxing the
/// transport into a client.
#[derive(Debug, Clone)]
pub struct ScriptedLlm {
    inner: Arc<Mutex<Inner>>,
}

fn multi_key(labels: &[String]) -> String {
    let mut sorted: Vec<String> = labels.iter().map(|l| l.trim().to_string()).collect();
    sorted.sort();
    sorted.join("\u{1f}")
}

/// Substrings between double quotes, in order.
fn quoted(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find('"') {
        let after = &rest[start + 1..];
        match after.find('"') {
            Some(end) => {
                out.push(after[..end].to_string());
                rest = &after[end + 1..];
            }
            None => break,
        }
    }
    out
}

impl ScriptedLlm {
    pub fn new() -> Self {
        ScriptedLlm {
            inner: Arc::new(Mutex::new(Inner {
                gen_single: HashMap::new(),
                gen_multi: HashMap::new(),
                verdicts: HashMap::new(),
                mcq: McqScript::Always("A".to_string()),
                mcq_cursor: 0,
                calls: 0,
            })),
        }
    }

    /// Build a fully scripted transport from a planted world: generation
    /// fixtures, the verdict table, and the oracle MCQ policy.
    pub fn from_world(spec: &WorldSpec) -> Self {
        let llm = ScriptedLlm::new();
        {
            let mut inner = llm.inner.lock().unwrap();
            for label in spec.label_names() {
                inner
                    .gen_single
                    .insert(label.clone(), spec.generation_fixture(&label));
            }
            let mut groups: Vec<Vec<String>> = Vec::new();
            for c in &spec.concepts {
                for g in &c.confusable_for {
                    if !groups.contains(g) {
                        groups.push(g.clone());
                    }
                }
            }
            for g in groups {
                inner
                    .gen_multi
                    .insert(multi_key(&g), spec.confusable_fixture(&g));
            }
            for c in &spec.concepts {
                let norm = normalize_text(&c.text);
                for label in spec.label_names() {
                    let v = c.verdicts.get(&label).copied().unwrap_or(Verdict::Unrelated);
                    inner.verdicts.insert((norm.clone(), label), v);
                }
            }
            inner.mcq = McqScript::Oracle;
        }
        llm
    }

    pub fn script_generation(&self, label: &str, phrases: &[&str]) {
        self.inner.lock().unwrap().gen_single.insert(
            label.to_string(),
            phrases.iter().map(|s| s.to_string()).collect(),
        );
    }

    pub fn script_generation_multi(&self, labels: &[String], phrases: &[&str]) {
        self.inner.lock().unwrap().gen_multi.insert(
            multi_key(labels),
            phrases.iter().map(|s| s.to_string()).collect(),
        );
    }

    pub fn script_verdict(&self, concept: &str, label: &str, verdict: Verdict) {
        self.inner
            .lock()
            .unwrap()
            .verdicts
            .insert((normalize_text(concept), label.to_string()), verdict);
    }

    pub fn set_mcq_script(&self, script: McqScript) {
        let mut inner = self.inner.lock().unwrap();
        inner.mcq = script;
        inner.mcq_cursor = 0;
    }

    fn verdict_of(inner: &Inner, concept: &str, label: &str) -> Verdict {
        inner
            .verdicts
            .get(&(normalize_text(concept), label.to_string()))
            .copied()
            .unwrap_or(Verdict::Unrelated)
    }

    fn answer_mcq(inner: &mut Inner, prompt: &str) -> String {
        let scripted = match &inner.mcq {
            McqScript::Always(s) => return s.clone(),
            McqScript::Sequence(seq) => {
                let idx = inner.mcq_cursor.min(seq.len().saturating_sub(1));
                inner.mcq_cursor += 1;
                return seq[idx].clone();
            }
            McqScript::Oracle => None::<String>,
        };
        debug_assert!(scripted.is_none());
        if prompt.starts_with("I have a batch of images of ") {
            // Truthfulness: class is the first quoted slot, the ranked
            // feature list the third. Answer A only when every feature is
            // factually compatible with the class.
            let q = quoted(prompt);
            if q.len() < 3 {
                return String::new();
            }
            let class = &q[0];
            let all_compatible = q[2]
                .split(", ")
                .filter(|f| !f.is_empty())
                .all(|f| Self::verdict_of(inner, f, class) != Verdict::Unrelated);
            if all_compatible { "A".into() } else { "B".into() }
        } else if prompt.starts_with("I have a batch of images characterized by") {
            // Distinguishability: pick the option whose verdict-weighted
            // overlap with the feature list is largest; ties go to the
            // earliest option.
            let q = quoted(prompt);
            if q.len() < 2 {
                return String::new();
            }
            let features: Vec<&str> = q[0].split(", ").filter(|f| !f.is_empty()).collect();
            let options_line = match prompt.lines().last() {
                Some(l) => l,
                None => return String::new(),
            };
            let options: Vec<&str> = options_line
                .split("; ")
                .map(|o| o.splitn(2, ". ").nth(1).unwrap_or(o))
                .collect();
            let mut best = 0usize;
            let mut best_score = -1i64;
            for (i, opt) in options.iter().enumerate() {
                let score: i64 = features
                    .iter()
                    .map(|f| match Self::verdict_of(inner, f, opt) {
                        Verdict::Critical => 2,
                        Verdict::Occasional => 1,
                        Verdict::Unrelated => 0,
                    })
                    .sum();
                if score > best_score {
                    best_score = score;
                    best = i;
                }
            }
            char::from(b'A' + best as u8).to_string()
        } else {
            String::new()
        }
    }
}

impl Default for ScriptedLlm {
    fn default() -> Self {
        Self::new()
    }
}

impl LlmApi for ScriptedLlm {
    fn complete(&self, prompt: &str, _temperature: f64, _sample_index: usize) -> Result<String> {
        let mut inner = self.inner.lock().unwrap();
        inner.calls += 1;
        if prompt.starts_with("What are the helpful visual features to distinguish between ") {
            let q = quoted(prompt);
            let labels: Vec<String> = q
                .first()
                .map(|list| list.split(", ").map(|s| s.to_string()).collect())
                .unwrap_or_default();
            let phrases = inner.gen_multi.get(&multi_key(&labels)).cloned();
            return Ok(phrases.map(|p| p.join("\n")).unwrap_or_default());
        }
        if prompt.starts_with("What are the helpful visual features to distinguish ") {
            let q = quoted(prompt);
            let phrases = q.first().and_then(|label| inner.gen_single.get(label)).cloned();
            return Ok(phrases.map(|p| p.join("\n")).unwrap_or_default());
        }
        if prompt.starts_with("Is the phrase ") {
            let q = quoted(prompt);
            if q.len() < 2 {
                return Ok(String::new());
            }
            let letter = match Self::verdict_of(&inner, &q[0], &q[1]) {
                Verdict::Critical => "A",
                Verdict::Occasional => "B",
                Verdict::Unrelated => "C",
            };
            return Ok(letter.to_string());
        }
        Ok(Self::answer_mcq(&mut inner, prompt))
    }

    fn calls(&self) -> usize {
        self.inner.lock().unwrap().calls
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::llm::{render_distinguishability, render_truthfulness};

    #[test]
    fn quoted_extraction() {
        assert_eq!(
            quoted(r#"a "b" c "d e" f"#),
            vec!["b".to_string(), "d e".to_string()]
        );
    }

    #[test]
    fn oracle_truthfulness_checks_every_feature() {
        let llm = ScriptedLlm::new();
        llm.set_mcq_script(McqScript::Oracle);
        llm.script_verdict("red crest", "Cardinal", Verdict::Critical);
        llm.script_verdict("short beak", "Cardinal", Verdict::Occasional);
        let ok = render_truthfulness("Cardinal", &["red crest".into(), "short beak".into()]);
        assert_eq!(llm.complete(&ok, 0.0, 0).unwrap(), "A");
        let bad = render_truthfulness("Cardinal", &["red crest".into(), "webbed feet".into()]);
        assert_eq!(llm.complete(&bad, 0.0, 0).unwrap(), "B");
    }

    #[test]
    fn oracle_distinguishability_picks_max_overlap() {
        let llm = ScriptedLlm::new();
        llm.set_mcq_script(McqScript::Oracle);
        llm.script_verdict("red crest", "Cardinal", Verdict::Critical);
        llm.script_verdict("red crest", "Robin", Verdict::Occasional);
        let options: Vec<String> = ["Robin", "Cardinal", "Sparrow", "Jay", "Crow"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let prompt = render_distinguishability(&["red crest".into()], "bird", &options);
        assert_eq!(llm.complete(&prompt, 0.0, 0).unwrap(), "B");
    }

    #[test]
    fn call_counter_shared_across_clones() {
        let llm = ScriptedLlm::new();
        let clone = llm.clone();
        llm.complete("Is the phrase \"x\" a feature that helps identify the presence of \"y\" in photos?", 0.0, 0)
            .unwrap();
        assert_eq!(clone.calls(), 1);
    }
}
