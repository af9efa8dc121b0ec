//! Generation prompts, the embedding prompt, and hypothesis extraction.
//!
//! A generation prompt is an instruction containing the premise followed by
//! the answer cue `Answer: "`. The model's completion is read up to the next
//! `"`, which becomes the hypothesis. Few-shot prompts prepend each example as
//! a complete instruction/answer exchange in the same format, separated from
//! the next exchange by one blank line.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PremiseSentence;
use crate::fewshot::FewShotSet;

pub const PREMISE_PLACEHOLDER: &str = "[premise]";
pub const ANSWER_CUE: &str = "Answer: \"";
pub const EXCHANGE_SEPARATOR: &str = "\n\n";

const ENTAILMENT_INSTRUCTION: &str = "Write one sentence that is logically entailed by [premise] in the form of a statement beginning with \"Answer: \". ";
const CONTRADICTION_INSTRUCTION: &str =
    "Write one sentence that logically contradicts [premise] in the form of a statement beginning with \"Answer: \". ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Entailment,
    Contradiction,
    Neutral,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::Entailment, Relation::Neutral, Relation::Contradiction];
    pub const GENERATED: [Relation; 2] = [Relation::Entailment, Relation::Contradiction];

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Entailment => "entailment",
            Relation::Contradiction => "contradiction",
            Relation::Neutral => "neutral",
        }
    }

    /// Only entailment and contradiction hypotheses are generated.
    pub fn is_generated(self) -> bool {
        !matches!(self, Relation::Neutral)
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Relation {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "entailment" => Ok(Relation::Entailment),
            "contradiction" => Ok(Relation::Contradiction),
            "neutral" => Ok(Relation::Neutral),
            other => Err(PromptError::UnknownRelation(other.to_owned())),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("no generation prompt exists for relation `{0}`")]
    NotGenerated(Relation),
    #[error("few-shot example {index} has relation `{found}` but the prompt is for `{expected}`")]
    ShotRelationMismatch {
        index: usize,
        expected: Relation,
        found: Relation,
    },
    #[error("template must contain `[premise]` exactly once, found {0}")]
    PlaceholderCount(usize),
    #[error("template must end with the answer cue `Answer: \"`")]
    MissingAnswerCue,
    #[error("sentence is empty")]
    EmptySentence,
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("invalid template override: {0}")]
    InvalidOverride(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ExtractionError {
    #[error("completion has no closing quote")]
    MissingClosingQuote,
    #[error("completion closes the quote before any text")]
    EmptySpan,
}

/// What to do when a completion cannot be parsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractionPolicy {
    #[default]
    Drop,
    RetryOnce,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    relation: Relation,
    instruction_text: String,
}

impl PromptTemplate {
    /// `instruction_text` is everything before the answer cue and must contain
    /// the `[premise]` placeholder exactly once.
    pub fn new(relation: Relation, instruction_text: impl Into<String>) -> Result<Self, PromptError> {
        if !relation.is_generated() {
            return Err(PromptError::NotGenerated(relation));
        }
        let instruction_text = instruction_text.into();
        let placeholders = instruction_text.matches(PREMISE_PLACEHOLDER).count();
        if placeholders != 1 {
            return Err(PromptError::PlaceholderCount(placeholders));
        }
        Ok(Self {
            relation,
            instruction_text,
        })
    }

    /// Parses a full template (instruction followed by the answer cue).
    pub fn from_full_text(relation: Relation, text: &str) -> Result<Self, PromptError> {
        let instruction = text.strip_suffix(ANSWER_CUE).ok_or(PromptError::MissingAnswerCue)?;
        Self::new(relation, instruction)
    }

    pub fn paper_default(relation: Relation) -> Result<Self, PromptError> {
        match relation {
            Relation::Entailment => Self::new(relation, ENTAILMENT_INSTRUCTION),
            Relation::Contradiction => Self::new(relation, CONTRADICTION_INSTRUCTION),
            Relation::Neutral => Err(PromptError::NotGenerated(relation)),
        }
    }

    pub fn relation(&self) -> Relation {
        self.relation
    }

    pub fn instruction_text(&self) -> &str {
        &self.instruction_text
    }

    fn affixes(&self) -> (&str, &str) {
        self.instruction_text
            .split_once(PREMISE_PLACEHOLDER)
            .expect("placeholder validated at construction")
    }

    /// Instruction with the premise substituted, ending at the open quote.
    pub fn render(&self, premise: &str) -> String {
        let (head, tail) = self.affixes();
        let mut out = String::with_capacity(self.instruction_text.len() + premise.len() + ANSWER_CUE.len());
        out.push_str(head);
        out.push_str(premise);
        out.push_str(tail);
        out.push_str(ANSWER_CUE);
        out
    }

    /// Inverse of [`render`](Self::render): recovers the premise from one exchange.
    pub fn parse_query<'a>(&self, exchange: &'a str) -> Option<&'a str> {
        let (head, tail) = self.affixes();
        exchange
            .strip_prefix(head)?
            .strip_suffix(ANSWER_CUE)?
            .strip_suffix(tail)
    }
}

/// The pair of generation templates in use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    entailment: PromptTemplate,
    contradiction: PromptTemplate,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            entailment: PromptTemplate::paper_default(Relation::Entailment).expect("builtin template"),
            contradiction: PromptTemplate::paper_default(Relation::Contradiction).expect("builtin template"),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateOverrides {
    entailment: Option<String>,
    contradiction: Option<String>,
}

impl TemplateSet {
    /// Loads overrides from a TOML file with optional `entailment` and
    /// `contradiction` keys. Each value is a full template ending with the
    /// answer cue. Missing keys keep the built-in template.
    pub fn from_overrides(toml_text: &str) -> Result<Self, PromptError> {
        let overrides: TemplateOverrides =
            toml::from_str(toml_text).map_err(|e| PromptError::InvalidOverride(e.to_string()))?;
        let mut set = Self::default();
        if let Some(text) = overrides.entailment {
            set.entailment = PromptTemplate::from_full_text(Relation::Entailment, &text)?;
        }
        if let Some(text) = overrides.contradiction {
            set.contradiction = PromptTemplate::from_full_text(Relation::Contradiction, &text)?;
        }
        Ok(set)
    }

    pub fn get(&self, relation: Relation) -> Result<&PromptTemplate, PromptError> {
        match relation {
            Relation::Entailment => Ok(&self.entailment),
            Relation::Contradiction => Ok(&self.contradiction),
            Relation::Neutral => Err(PromptError::NotGenerated(relation)),
        }
    }

    pub fn build_generation_prompt(
        &self,
        premise: &PremiseSentence,
        relation: Relation,
        shots: Option<&FewShotSet>,
    ) -> Result<RenderedPrompt, PromptError> {
        let template = self.get(relation)?;
        let mut text = String::new();
        let mut shot_count = 0;
        if let Some(set) = shots {
            for (index, example) in set.examples().iter().enumerate() {
                if example.relation() != relation {
                    return Err(PromptError::ShotRelationMismatch {
                        index,
                        expected: relation,
                        found: example.relation(),
                    });
                }
                text.push_str(&template.render(example.premise()));
                text.push_str(example.hypothesis());
                text.push('"');
                text.push_str(EXCHANGE_SEPARATOR);
                shot_count += 1;
            }
        }
        text.push_str(&template.render(&premise.text));
        Ok(RenderedPrompt {
            text,
            relation,
            premise_id: premise.id,
            fewshot_set_id: shots.map(|s| s.set_id()),
            shot_count,
        })
    }

    /// Recovers `(relation, premise)` from the final exchange of a rendered prompt.
    pub fn parse_query<'a>(&self, prompt: &'a str) -> Option<(Relation, &'a str)> {
        let last = prompt.rsplit(EXCHANGE_SEPARATOR).next()?;
        [&self.entailment, &self.contradiction]
            .into_iter()
            .find_map(|t| t.parse_query(last).map(|p| (t.relation, p)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub relation: Relation,
    pub premise_id: u64,
    pub fewshot_set_id: Option<usize>,
    pub shot_count: usize,
}

impl AsRef<str> for RenderedPrompt {
    fn as_ref(&self) -> &str {
        &self.text
    }
}

/// Builds a generation prompt with the built-in templates.
pub fn build_generation_prompt(
    premise: &PremiseSentence,
    relation: Relation,
    shots: Option<&FewShotSet>,
) -> Result<RenderedPrompt, PromptError> {
    TemplateSet::default().build_generation_prompt(premise, relation, shots)
}

/// Counts answer positions in a prompt.
///
/// The instruction quotes the cue itself (`beginning with "Answer: "`); that
/// quoted mention is preceded by `"` and is not an answer position.
pub fn count_answer_cues(text: &str) -> usize {
    text.match_indices(ANSWER_CUE)
        .filter(|(at, _)| !text[..*at].ends_with('"'))
        .count()
}

/// Reads the hypothesis from a completion that continues after `Answer: "`.
pub fn extract_hypothesis(raw: &str) -> Result<String, ExtractionError> {
    let (span, _) = raw.split_once('"').ok_or(ExtractionError::MissingClosingQuote)?;
    let span = span.trim_end();
    if span.trim_start().is_empty() {
        return Err(ExtractionError::EmptySpan);
    }
    Ok(span.to_owned())
}

/// The one-word-limitation embedding prompt.
pub fn build_embedding_prompt(sentence: &str) -> Result<String, PromptError> {
    if sentence.trim().is_empty() {
        return Err(PromptError::EmptySentence);
    }
    Ok(format!("This sentence: \"{sentence}\" means in one word: \""))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fewshot::FewShotExample;
    use proptest::prelude::*;

    fn premise(text: &str) -> PremiseSentence {
        PremiseSentence::new(0, text, &crate::corpus::WhitespaceCounter).unwrap()
    }

    fn shots(relation: Relation, n: usize) -> FewShotSet {
        let examples = (0..n)
            .map(|i| FewShotExample::new(format!("Premise number {i}."), format!("Hypothesis {i}."), relation).unwrap())
            .collect();
        FewShotSet::new(3, relation, examples).unwrap()
    }

    #[test]
    fn zero_shot_entailment_golden() {
        let p = build_generation_prompt(&premise("It concluded in July 2019."), Relation::Entailment, None).unwrap();
        assert_eq!(
            p.text,
            "Write one sentence that is logically entailed by It concluded in July 2019. in the form of a statement beginning with \"Answer: \". Answer: \""
        );
        assert_eq!(p.fewshot_set_id, None);
        assert_eq!(count_answer_cues(&p.text), 1);
    }

    #[test]
    fn zero_shot_contradiction_golden() {
        let p = build_generation_prompt(&premise("It concluded in July 2019."), Relation::Contradiction, None).unwrap();
        assert_eq!(
            p.text,
            "Write one sentence that logically contradicts It concluded in July 2019. in the form of a statement beginning with \"Answer: \". Answer: \""
        );
    }

    #[test]
    fn one_shot_has_two_cues_and_ends_with_cue() {
        let set = shots(Relation::Entailment, 1);
        let p = build_generation_prompt(&premise("A cat sat down."), Relation::Entailment, Some(&set)).unwrap();
        assert_eq!(count_answer_cues(&p.text), 2);
        assert!(p.text.ends_with(ANSWER_CUE));
        assert_eq!(p.fewshot_set_id, Some(3));
        assert_eq!(
            p.text,
            "Write one sentence that is logically entailed by Premise number 0. in the form of a statement beginning with \"Answer: \". Answer: \"Hypothesis 0.\"\n\n\
             Write one sentence that is logically entailed by A cat sat down. in the form of a statement beginning with \"Answer: \". Answer: \""
        );
    }

    #[test]
    fn neutral_and_mismatched_shots_rejected() {
        let p = premise("A cat sat down.");
        assert_eq!(
            build_generation_prompt(&p, Relation::Neutral, None).unwrap_err(),
            PromptError::NotGenerated(Relation::Neutral)
        );
        let set = shots(Relation::Contradiction, 2);
        assert!(matches!(
            build_generation_prompt(&p, Relation::Entailment, Some(&set)),
            Err(PromptError::ShotRelationMismatch { index: 0, .. })
        ));
    }

    #[test]
    fn prompt_length_increases_with_shots() {
        let p = premise("A cat sat down.");
        let mut last = build_generation_prompt(&p, Relation::Entailment, None)
            .unwrap()
            .text
            .len();
        for k in 1..=20 {
            let set = shots(Relation::Entailment, k);
            let rendered = build_generation_prompt(&p, Relation::Entailment, Some(&set)).unwrap();
            assert_eq!(count_answer_cues(&rendered.text), k + 1);
            assert!(rendered.text.len() > last);
            last = rendered.text.len();
        }
    }

    #[test]
    fn extraction_cases() {
        assert_eq!(
            extract_hypothesis("It was completed in July 2019.\" Some trailing text").unwrap(),
            "It was completed in July 2019."
        );
        assert_eq!(extract_hypothesis("\"").unwrap_err(), ExtractionError::EmptySpan);
        assert_eq!(extract_hypothesis("   \" x").unwrap_err(), ExtractionError::EmptySpan);
        assert_eq!(
            extract_hypothesis("no quote at all").unwrap_err(),
            ExtractionError::MissingClosingQuote
        );
        assert_eq!(extract_hypothesis("Padded.   \"").unwrap(), "Padded.");
    }

    #[test]
    fn embedding_prompt() {
        assert_eq!(
            build_embedding_prompt("I have a dog.").unwrap(),
            "This sentence: \"I have a dog.\" means in one word: \""
        );
        assert_eq!(
            build_embedding_prompt("He said \"hi\".").unwrap(),
            "This sentence: \"He said \"hi\".\" means in one word: \""
        );
        assert_eq!(build_embedding_prompt("").unwrap_err(), PromptError::EmptySentence);
    }

    #[test]
    fn overrides_are_validated() {
        let ok = TemplateSet::from_overrides("entailment = 'Entail [premise] now. Answer: \"'").unwrap();
        let p = ok
            .build_generation_prompt(&premise("X y z."), Relation::Entailment, None)
            .unwrap();
        assert_eq!(p.text, "Entail X y z. now. Answer: \"");
        // contradiction untouched
        assert_eq!(
            ok.get(Relation::Contradiction).unwrap(),
            TemplateSet::default().get(Relation::Contradiction).unwrap()
        );

        assert_eq!(
            TemplateSet::from_overrides("entailment = 'No placeholder. Answer: \"'").unwrap_err(),
            PromptError::PlaceholderCount(0)
        );
        assert_eq!(
            TemplateSet::from_overrides("contradiction = '[premise] and [premise] Answer: \"'").unwrap_err(),
            PromptError::PlaceholderCount(2)
        );
        assert_eq!(
            TemplateSet::from_overrides("entailment = 'Missing cue [premise]'").unwrap_err(),
            PromptError::MissingAnswerCue
        );
        assert!(matches!(
            TemplateSet::from_overrides("neutral = 'x [premise] Answer: \"'"),
            Err(PromptError::InvalidOverride(_))
        ));
    }

    #[test]
    fn parse_query_recovers_premise() {
        let set = shots(Relation::Contradiction, 3);
        let templates = TemplateSet::default();
        let p = templates
            .build_generation_prompt(
                &premise("Her last public performance was in 1954."),
                Relation::Contradiction,
                Some(&set),
            )
            .unwrap();
        assert_eq!(
            templates.parse_query(&p.text),
            Some((Relation::Contradiction, "Her last public performance was in 1954."))
        );
        assert_eq!(templates.parse_query("unrelated text"), None);
    }

    proptest! {
        #[test]
        fn extraction_round_trip(h in "[^\"\\s][^\"]{0,40}[^\"\\s]|[^\"\\s]", junk in ".{0,30}") {
            let raw = format!("{h}\"{junk}");
            prop_assert_eq!(extract_hypothesis(&raw).unwrap(), h);
        }
    }
}
