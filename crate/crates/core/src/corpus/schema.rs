//! Adapters from each public corpus's native JSON columns to [`Example`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Example, NliLabel, RationaleLabelPair, Setting, Source, TaskInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Schema {
    /// `q_no`, `q_text`, `q_op1`..`q_op5`, `q_ans`, `taskB`.
    Ecqa,
    /// CommonsenseQA layout with `explanation.open-ended`.
    Cose,
    /// CommonsenseQA layout with the knowledge statement in `para`.
    Quartz,
    /// `pairID`, `gold_label`, `Sentence1`, `Sentence2`, `Explanation_1`.
    Esnli,
    /// Externally produced `(question, choices, label, rationale)` or
    /// `(premise, hypothesis, label, rationale)` records.
    GenericTriples,
}

impl Schema {
    pub fn as_str(self) -> &'static str {
        match self {
            Schema::Ecqa => "ECQA",
            Schema::Cose => "COSE",
            Schema::Quartz => "QUARTZ",
            Schema::Esnli => "ESNLI",
            Schema::GenericTriples => "GENERIC_TRIPLES",
        }
    }

    pub(crate) fn adapt(
        self,
        v: &Value,
        line: usize,
    ) -> Result<(Example, Option<RationaleLabelPair>), String> {
        match self {
            Schema::Ecqa => ecqa(v).map(|e| (e, None)),
            Schema::Cose => commonsense(v, &["explanation", "open-ended"]).map(|e| (e, None)),
            Schema::Quartz => commonsense(v, &["para"]).map(|e| (e, None)),
            Schema::Esnli => esnli(v).map(|e| (e, None)),
            Schema::GenericTriples => triple(v, line).map(|(e, p)| (e, Some(p))),
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Schema {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "ECQA" => Ok(Schema::Ecqa),
            "COSE" | "COS_E" => Ok(Schema::Cose),
            "QUARTZ" => Ok(Schema::Quartz),
            "ESNLI" | "E_SNLI" => Ok(Schema::Esnli),
            "GENERIC_TRIPLES" | "TRIPLES" => Ok(Schema::GenericTriples),
            _ => Err(format!("unknown schema `{s}`")),
        }
    }
}

fn field<'a>(v: &'a Value, path: &[&str]) -> Option<&'a Value> {
    path.iter().try_fold(v, |cur, key| cur.get(key))
}

fn string(v: &Value, path: &[&str]) -> Result<String, String> {
    match field(v, path) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(other) => Err(format!("field `{}` is not a string: {other}", path.join("."))),
        None => Err(format!("missing field `{}`", path.join("."))),
    }
}

fn opt_string(v: &Value, path: &[&str]) -> Result<Option<String>, String> {
    match field(v, path) {
        None | Some(Value::Null) => Ok(None),
        Some(_) => string(v, path).map(Some),
    }
}

fn ecqa(v: &Value) -> Result<Example, String> {
    let id = string(v, &["q_no"])?;
    let question = string(v, &["q_text"])?;
    let mut choices = Vec::new();
    for i in 1..=5 {
        let key = format!("q_op{i}");
        if let Some(op) = opt_string(v, &[key.as_str()])? {
            choices.push(op);
        }
    }
    Ok(Example {
        id,
        input: TaskInput::Cqa { question, choices },
        gold_label: string(v, &["q_ans"])?,
        gold_rationale: opt_string(v, &["taskB"])?,
        source: Source::Gold,
    })
}

/// CommonsenseQA-style record: `question.stem`, `question.choices[{label,text}]`,
/// `answerKey`, and a rationale at `rationale_path`.
fn commonsense(v: &Value, rationale_path: &[&str]) -> Result<Example, String> {
    let id = string(v, &["id"])?;
    let question = string(v, &["question", "stem"])?;
    let raw = field(v, &["question", "choices"])
        .and_then(Value::as_array)
        .ok_or("missing field `question.choices`")?;
    let mut keys = Vec::with_capacity(raw.len());
    let mut choices = Vec::with_capacity(raw.len());
    for c in raw {
        keys.push(string(c, &["label"])?);
        choices.push(string(c, &["text"])?);
    }
    let answer_key = string(v, &["answerKey"])?;
    let gold_label = keys
        .iter()
        .position(|k| *k == answer_key)
        .map(|i| choices[i].clone())
        .ok_or_else(|| format!("answerKey `{answer_key}` matches no choice label"))?;
    Ok(Example {
        id,
        input: TaskInput::Cqa { question, choices },
        gold_label,
        gold_rationale: opt_string(v, rationale_path)?,
        source: Source::Gold,
    })
}

fn esnli(v: &Value) -> Result<Example, String> {
    let label: NliLabel = string(v, &["gold_label"])?.parse()?;
    Ok(Example {
        id: string(v, &["pairID"])?,
        input: TaskInput::Nli {
            premise: string(v, &["Sentence1"])?,
            hypothesis: string(v, &["Sentence2"])?,
        },
        gold_label: label.as_str().to_string(),
        gold_rationale: opt_string(v, &["Explanation_1"])?,
        source: Source::Gold,
    })
}

fn triple(v: &Value, line: usize) -> Result<(Example, RationaleLabelPair), String> {
    let id = opt_string(v, &["id"])?.unwrap_or_else(|| format!("line-{line}"));
    let input = if field(v, &["premise"]).is_some() {
        TaskInput::Nli {
            premise: string(v, &["premise"])?,
            hypothesis: string(v, &["hypothesis"])?,
        }
    } else {
        let choices = field(v, &["choices"])
            .and_then(Value::as_array)
            .ok_or("missing field `choices`")?
            .iter()
            .map(|c| match c {
                Value::String(s) => Ok(s.clone()),
                other => string(other, &["text"]),
            })
            .collect::<Result<Vec<_>, _>>()?;
        TaskInput::Cqa {
            question: string(v, &["question"])?,
            choices,
        }
    };
    let mut label = string(v, &["label"])?;
    if let TaskInput::Nli { .. } = input {
        label = label.parse::<NliLabel>()?.as_str().to_string();
    }
    if label.trim().is_empty() {
        return Err("empty label".to_string());
    }
    let rationale = string(v, &["rationale"])?;
    let gold_label = opt_string(v, &["gold_label"])?.unwrap_or_else(|| label.clone());
    let example = Example {
        id: id.clone(),
        input,
        gold_label,
        gold_rationale: None,
        source: Source::External,
    };
    let pair = RationaleLabelPair {
        example_id: id,
        label,
        rationale,
        setting: Setting::External,
    };
    Ok((example, pair))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn cose_resolves_answer_key_to_choice_text() {
        let v = json!({
            "id": "abc",
            "question": {"stem": "Q?", "choices": [
                {"label": "A", "text": "alpha"}, {"label": "B", "text": "beta"}]},
            "answerKey": "B",
            "explanation": {"open-ended": "because"}
        });
        let (ex, pair) = Schema::Cose.adapt(&v, 1).unwrap();
        assert_eq!(ex.gold_label, "beta");
        assert_eq!(ex.gold_rationale.as_deref(), Some("because"));
        assert!(pair.is_none());
    }

    #[test]
    fn esnli_normalizes_label_case() {
        let v = json!({"pairID": "p1", "gold_label": "Neutral", "Sentence1": "a",
                       "Sentence2": "b", "Explanation_1": "c"});
        let (ex, _) = Schema::Esnli.adapt(&v, 1).unwrap();
        assert_eq!(ex.gold_label, "neutral");
    }

    #[test]
    fn missing_field_is_named() {
        let err = Schema::Ecqa.adapt(&json!({"q_no": "1"}), 1).unwrap_err();
        assert!(err.contains("q_text"), "{err}");
    }

    #[test]
    fn schema_names_parse() {
        for s in [
            Schema::Ecqa,
            Schema::Cose,
            Schema::Quartz,
            Schema::Esnli,
            Schema::GenericTriples,
        ] {
            assert_eq!(s.as_str().parse::<Schema>().unwrap(), s);
        }
    }
}
