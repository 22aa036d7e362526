//! Bracket-tag input/target formatting for the three task-model settings.
//!
//! Canonical spacing: every tag is separated from its neighbours by exactly
//! one ASCII space and field text is emitted verbatim.
//!
//! ```text
//! XY*->R  [question] q [choice] c1 ... [choice] cn [answer] y [rationale]  =>  r <eos>
//! X->YR   [question] q [choice] c1 ... [choice] cn [answer]                =>  y [rationale] r <eos>
//! X->RY   [question] q [choice] c1 ... [choice] cn [rationale]             =>  r [answer] y <eos>
//! ```
//!
//! NLI inputs replace the question/choice block with `[premise] p [hypothesis] h`.

use super::{CorpusError, Example, Setting, TaskInput};

pub const DEFAULT_EOS: &str = "<eos>";

const QUESTION: &str = "[question]";
const CHOICE: &str = "[choice]";
const PREMISE: &str = "[premise]";
const HYPOTHESIS: &str = "[hypothesis]";
const ANSWER: &str = "[answer]";
const RATIONALE: &str = "[rationale]";

fn check_setting(setting: Setting) -> Result<(), CorpusError> {
    if setting.is_generated() {
        Ok(())
    } else {
        Err(CorpusError::UnsupportedSetting(setting))
    }
}

fn input_block(input: &TaskInput) -> Result<String, CorpusError> {
    match input {
        TaskInput::Cqa { question, choices } => {
            if choices.is_empty() {
                return Err(CorpusError::MissingField("choices"));
            }
            let mut s = format!("{QUESTION} {question}");
            for c in choices {
                s.push(' ');
                s.push_str(CHOICE);
                s.push(' ');
                s.push_str(c);
            }
            Ok(s)
        }
        TaskInput::Nli {
            premise,
            hypothesis,
        } => Ok(format!("{PREMISE} {premise} {HYPOTHESIS} {hypothesis}")),
    }
}

/// Task-model input text for `setting`.
pub fn serialize_input(example: &Example, setting: Setting) -> Result<String, CorpusError> {
    check_setting(setting)?;
    let mut s = input_block(&example.input)?;
    match setting {
        Setting::Rationalize => {
            s.push_str(&format!(" {ANSWER} {} {RATIONALE}", example.gold_label));
        }
        Setting::LabelThenRationale => s.push_str(&format!(" {ANSWER}")),
        Setting::RationaleThenLabel => s.push_str(&format!(" {RATIONALE}")),
        _ => unreachable!(),
    }
    Ok(s)
}

/// Training target built from the gold label and gold rationale.
pub fn serialize_target(
    example: &Example,
    setting: Setting,
    eos: &str,
) -> Result<String, CorpusError> {
    check_setting(setting)?;
    let rationale = example
        .gold_rationale
        .as_deref()
        .ok_or(CorpusError::MissingField("gold_rationale"))?;
    let label = &example.gold_label;
    Ok(match setting {
        Setting::Rationalize => format!("{rationale} {eos}"),
        Setting::LabelThenRationale => format!("{label} {RATIONALE} {rationale} {eos}"),
        Setting::RationaleThenLabel => format!("{rationale} {ANSWER} {label} {eos}"),
        _ => unreachable!(),
    })
}

pub fn serialize_for_task(
    example: &Example,
    setting: Setting,
    eos: &str,
) -> Result<(String, String), CorpusError> {
    Ok((
        serialize_input(example, setting)?,
        serialize_target(example, setting, eos)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedInput {
    pub input: TaskInput,
    /// Present for the rationalize setting, which carries the gold label.
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTarget {
    pub label: Option<String>,
    pub rationale: String,
}

fn unparseable(what: &str, text: &str) -> CorpusError {
    CorpusError::Unparseable(format!("{what} in `{text}`"))
}

fn parse_block(block: &str, full: &str) -> Result<TaskInput, CorpusError> {
    if let Some(rest) = block.strip_prefix(&format!("{QUESTION} ")) {
        let sep = format!(" {CHOICE} ");
        let mut parts = rest.split(sep.as_str());
        let question = parts.next().unwrap_or_default().to_string();
        let choices: Vec<String> = parts.map(str::to_string).collect();
        if choices.is_empty() {
            return Err(unparseable("no [choice] tags", full));
        }
        Ok(TaskInput::Cqa { question, choices })
    } else if let Some(rest) = block.strip_prefix(&format!("{PREMISE} ")) {
        let (premise, hypothesis) = rest
            .split_once(&format!(" {HYPOTHESIS} "))
            .ok_or_else(|| unparseable("missing [hypothesis]", full))?;
        Ok(TaskInput::Nli {
            premise: premise.to_string(),
            hypothesis: hypothesis.to_string(),
        })
    } else {
        Err(unparseable("missing [question] or [premise]", full))
    }
}

/// Inverse of [`serialize_input`].
pub fn parse_task_input(text: &str, setting: Setting) -> Result<ParsedInput, CorpusError> {
    check_setting(setting)?;
    match setting {
        Setting::Rationalize => {
            let head = text
                .strip_suffix(&format!(" {RATIONALE}"))
                .ok_or_else(|| unparseable("missing trailing [rationale]", text))?;
            let (block, label) = head
                .rsplit_once(&format!(" {ANSWER} "))
                .ok_or_else(|| unparseable("missing [answer]", text))?;
            Ok(ParsedInput {
                input: parse_block(block, text)?,
                label: Some(label.to_string()),
            })
        }
        Setting::LabelThenRationale | Setting::RationaleThenLabel => {
            let tag = if setting == Setting::LabelThenRationale {
                ANSWER
            } else {
                RATIONALE
            };
            let block = text
                .strip_suffix(&format!(" {tag}"))
                .ok_or_else(|| unparseable("missing trailing tag", text))?;
            Ok(ParsedInput {
                input: parse_block(block, text)?,
                label: None,
            })
        }
        _ => unreachable!(),
    }
}

/// Inverse of [`serialize_target`]. A trailing end marker is removed when present.
pub fn parse_task_target(
    text: &str,
    setting: Setting,
    eos: &str,
) -> Result<ParsedTarget, CorpusError> {
    check_setting(setting)?;
    let body = text
        .strip_suffix(&format!(" {eos}"))
        .or_else(|| text.strip_suffix(eos))
        .unwrap_or(text);
    match setting {
        Setting::Rationalize => Ok(ParsedTarget {
            label: None,
            rationale: body.to_string(),
        }),
        Setting::LabelThenRationale => {
            let (label, rationale) = body
                .split_once(&format!(" {RATIONALE} "))
                .ok_or_else(|| unparseable("missing [rationale]", text))?;
            Ok(ParsedTarget {
                label: Some(label.to_string()),
                rationale: rationale.to_string(),
            })
        }
        Setting::RationaleThenLabel => {
            let (rationale, label) = body
                .rsplit_once(&format!(" {ANSWER} "))
                .ok_or_else(|| unparseable("missing [answer]", text))?;
            Ok(ParsedTarget {
                label: Some(label.to_string()),
                rationale: rationale.to_string(),
            })
        }
        _ => unreachable!(),
    }
}
