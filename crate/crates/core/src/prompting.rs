//! Prompt construction for the two strategies (few-shot P1, structured P2),
//! few-shot example selection, and rating extraction from model output.
//!
//! The templates here are the normative plain-text transcriptions; the
//! golden files under `goldens/` freeze their rendered form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Sample;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no training sample with gold rating {0}; cannot build few-shot set")]
    EmptyLevel(u8),
    #[error("expected 5 few-shot examples ordered by rating 1..5")]
    BadShots,
    #[error("no rating integer found in response: {0:?}")]
    NoRating(String),
    #[error("rating {value} outside 1..5 in response: {raw:?}")]
    OutOfRange { value: i64, raw: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    P1,
    P2,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "p1" => Ok(Strategy::P1),
            "p2" => Ok(Strategy::P2),
            other => Err(format!("unknown strategy '{other}' (expected p1 or p2)")),
        }
    }
}

/// A fully rendered prompt for one sample. P1 carries five example turns;
/// P2 is a single system message and no examples.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub strategy: Strategy,
    pub system_text: String,
    /// (user_text, assistant_text) pairs, empty for P2.
    pub example_turns: Vec<(String, String)>,
    pub user_text: String,
}

pub const P1_SYSTEM: &str = "\
You are evaluating whether a proposed meaning of a homonym is supported by its narrative context.

Input format:
- Homonym: The ambiguous word
- Meaning: The proposed interpretation
- Precontext: Background narrative
- Sentence: The sentence containing the homonym
- Ending: The conclusion (may be none)

Rating scale:
1 = Completely implausible. The meaning clearly conflicts with the narrative.
2 = Mostly implausible. Weak or contradictory support.
3 = Moderately plausible. Possible but ambiguous.
4 = Very plausible. Strong and consistent support.
5 = Highly plausible. Clearly intended and strongly confirmed.

The ending is the most important factor for disambiguation.
Return only a single integer (1-5). No explanation.";

const P2_TEMPLATE: &str = "\
You are an impartial evaluator assessing whether a proposed meaning of a word is supported by the provided narrative context. Base your judgment only on the text given.

Word: {homonym}    Proposed meaning: {judged_meaning}

Narrative context
- Beginning (precontext): {precontext}
- Sentence containing the word: {sentence}
- Ending (conclusion): {ending}

Task: Rate the plausibility that the word {homonym} is used with the proposed meaning {judged_meaning} in this narrative.

Evaluation criteria
1. Precontext: Does the setup make this meaning likely or expected?
2. Target sentence: Does the local usage support this meaning?
3. Ending: Does the conclusion reinforce or confirm this meaning? This is the strongest source of evidence.

Decision rules
- If the ending clearly contradicts the proposed meaning, the rating must be 1 or 2.
- If evidence is mixed or unclear, choose the lower plausible rating.
- A rating of 5 requires explicit confirmation in the ending and no contradictions elsewhere.

Rating scale
1 Completely implausible: Clear contradiction.
2 Mostly implausible: Weak or conflicting evidence.
3 Moderately plausible: Possible but ambiguous.
4 Very plausible: Strong and consistent support.
5 Highly plausible: Clearly intended and explicitly confirmed.

Output format: Return only a single integer from 1 to 5. Do not include explanations, comments, or any extra text.";

/// Absent endings render as the literal "none".
fn ending_text(sample: &Sample) -> &str {
    sample.ending.as_deref().unwrap_or("none")
}

/// Few-shot selection result; warnings record levels where the zero-sigma
/// rule had to fall back to the minimum-sigma sample.
#[derive(Debug, Clone)]
pub struct FewshotSelection {
    pub shots: Vec<Sample>,
    pub warnings: Vec<String>,
}

/// Picks one example per rating level 1..5, preferring samples with zero
/// annotator standard deviation; ties break on the lexicographically
/// smallest id. Returns shots in ascending rating order.
pub fn select_fewshot(train: &[Sample]) -> Result<FewshotSelection, PromptError> {
    let mut shots = Vec::with_capacity(5);
    let mut warnings = Vec::new();
    for level in 1..=5u8 {
        let at_level: Vec<&Sample> = train
            .iter()
            .filter(|s| (s.gold_mean - level as f64).abs() < 1e-9)
            .collect();
        if at_level.is_empty() {
            return Err(PromptError::EmptyLevel(level));
        }
        let zero_sigma = at_level
            .iter()
            .filter(|s| s.gold_std == 0.0)
            .min_by(|a, b| a.id.cmp(&b.id));
        let chosen = match zero_sigma {
            Some(s) => *s,
            None => {
                let fallback = at_level
                    .iter()
                    .min_by(|a, b| {
                        a.gold_std
                            .partial_cmp(&b.gold_std)
                            .unwrap()
                            .then_with(|| a.id.cmp(&b.id))
                    })
                    .unwrap();
                warnings.push(format!(
                    "level {level}: no zero-sigma sample, using '{}' (sigma {})",
                    fallback.id, fallback.gold_std
                ));
                *fallback
            }
        };
        shots.push(chosen.clone());
    }
    Ok(FewshotSelection { shots, warnings })
}

/// One few-shot block up to and including the "Rating:" label; the answer
/// integer goes in the assistant turn.
fn example_block(sample: &Sample) -> String {
    format!(
        "Homonym: {} | Meaning: {}\nPrecontext: {}\nSentence: {}\nEnding: {}\nRating:",
        sample.homonym,
        sample.judged_meaning,
        sample.precontext,
        sample.sentence,
        ending_text(sample)
    )
}

fn user_block(sample: &Sample) -> String {
    format!(
        "Homonym: {}\nMeaning: {}\nPrecontext: {}\nSentence: {}\nEnding: {}\nRating:",
        sample.homonym,
        sample.judged_meaning,
        sample.precontext,
        sample.sentence,
        ending_text(sample)
    )
}

/// Few-shot prompt: fixed system text, five example turns with ratings 1..5
/// ascending, and the target sample as the final user message.
pub fn build_p1(sample: &Sample, shots: &[Sample]) -> Result<PromptBundle, PromptError> {
    if shots.len() != 5 {
        return Err(PromptError::BadShots);
    }
    for (i, shot) in shots.iter().enumerate() {
        if (shot.gold_mean - (i + 1) as f64).abs() > 0.5 {
            return Err(PromptError::BadShots);
        }
    }
    let example_turns = shots
        .iter()
        .enumerate()
        .map(|(i, shot)| (example_block(shot), format!("{}", i + 1)))
        .collect();
    Ok(PromptBundle {
        strategy: Strategy::P1,
        system_text: P1_SYSTEM.to_string(),
        example_turns,
        user_text: user_block(sample),
    })
}

/// Structured prompt with decision rules; the whole prompt is the system
/// message and there are no example turns.
pub fn build_p2(sample: &Sample) -> PromptBundle {
    let system_text = P2_TEMPLATE
        .replace("{homonym}", &sample.homonym)
        .replace("{judged_meaning}", &sample.judged_meaning)
        .replace("{precontext}", &sample.precontext)
        .replace("{sentence}", &sample.sentence)
        .replace("{ending}", ending_text(sample));
    PromptBundle {
        strategy: Strategy::P2,
        system_text,
        example_turns: Vec::new(),
        user_text: String::new(),
    }
}

/// Flat transcript of a bundle, used by `prompt-render` and the golden
/// files. Sections are labeled by role.
pub fn render_transcript(bundle: &PromptBundle) -> String {
    let mut out = String::new();
    out.push_str("[system]\n");
    out.push_str(&bundle.system_text);
    out.push('\n');
    for (user, assistant) in &bundle.example_turns {
        out.push_str("\n[example user]\n");
        out.push_str(user);
        out.push('\n');
        out.push_str("[example assistant]\n");
        out.push_str(assistant);
        out.push('\n');
    }
    if !bundle.user_text.is_empty() {
        out.push_str("\n[user]\n");
        out.push_str(&bundle.user_text);
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    Strict,
    Lenient,
}

impl std::str::FromStr for ParseMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "strict" => Ok(ParseMode::Strict),
            "lenient" => Ok(ParseMode::Lenient),
            other => Err(format!("unknown parse mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedRating {
    pub value: u8,
    pub mode: ParseMode,
}

/// Extracts the rating integer from a model response.
///
/// Strict mode accepts only a whitespace-padded bare integer and rejects
/// values outside 1..5. Lenient mode returns the first standalone integer
/// in 1..5 anywhere in the text.
pub fn parse_rating(text: &str, mode: ParseMode) -> Result<ParsedRating, PromptError> {
    match mode {
        ParseMode::Strict => {
            let trimmed = text.trim();
            let value: i64 = trimmed
                .parse()
                .map_err(|_| PromptError::NoRating(text.to_string()))?;
            if !(1..=5).contains(&value) {
                return Err(PromptError::OutOfRange {
                    value,
                    raw: text.to_string(),
                });
            }
            Ok(ParsedRating {
                value: value as u8,
                mode,
            })
        }
        ParseMode::Lenient => {
            // standalone = maximal digit run whose value lies in 1..5
            let bytes = text.as_bytes();
            let mut i = 0;
            while i < bytes.len() {
                if bytes[i].is_ascii_digit() {
                    let start = i;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                    if let Ok(value) = text[start..i].parse::<i64>() {
                        if (1..=5).contains(&value) {
                            return Ok(ParsedRating {
                                value: value as u8,
                                mode,
                            });
                        }
                    }
                } else {
                    i += 1;
                }
            }
            Err(PromptError::NoRating(text.to_string()))
        }
    }
}
