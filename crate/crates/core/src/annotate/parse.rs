//! Extraction of the predicted lab from a free-form model reply.

use serde_json::Value;
use thiserror::Error;

use crate::bandit::Task;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("no JSON object found in response")]
    NoJsonObject,

    #[error("response object has no `predicted_lab` key")]
    MissingKey,

    #[error("`predicted_lab` is not numeric: {0}")]
    NotNumeric(String),

    #[error("`predicted_lab` is not finite")]
    NonFinite,

    #[error("predicted lab {value} outside physiologic range [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },
}

const LAB_KEYS: [&str; 5] = [
    "predicted_lab",
    "predicted_lab_value",
    "lab_value",
    "predicted_value",
    "prediction",
];
const JUSTIFICATION_KEYS: [&str; 3] = ["justification", "reasoning", "explanation"];

/// Every balanced `{...}` span, in order of appearance. String literals are
/// respected so braces inside text do not confuse the scan.
fn object_spans(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut start = 0;
    while let Some(off) = text[start..].find('{') {
        let open = start + off;
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        let mut end = None;
        for (i, &b) in bytes.iter().enumerate().skip(open) {
            if in_str {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(i);
                        break;
                    }
                }
                _ => {}
            }
        }
        match end {
            Some(e) => {
                spans.push(&text[open..=e]);
                start = e + 1;
            }
            None => start = open + 1,
        }
    }
    spans
}

fn lab_number(v: &Value) -> Result<f64, ParseError> {
    match v {
        Value::Number(n) => n.as_f64().ok_or(ParseError::NonFinite),
        Value::String(s) => {
            let t = s.trim();
            let head: String = t
                .chars()
                .take_while(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E'))
                .collect();
            head.parse::<f64>().map_err(|_| ParseError::NotNumeric(s.clone()))
        }
        other => Err(ParseError::NotNumeric(other.to_string())),
    }
}

/// Returns the predicted lab and justification. The first JSON object that
/// carries a lab key wins; surrounding prose and code fences are ignored.
pub fn parse_response(raw: &str, task: Task) -> Result<(f64, String), ParseError> {
    let objects: Vec<serde_json::Map<String, Value>> = object_spans(raw)
        .into_iter()
        .filter_map(|s| serde_json::from_str::<Value>(s).ok())
        .filter_map(|v| match v {
            Value::Object(m) => Some(m),
            _ => None,
        })
        .collect();
    if objects.is_empty() {
        return Err(ParseError::NoJsonObject);
    }
    let (obj, lab_value) = objects
        .iter()
        .find_map(|o| LAB_KEYS.iter().find_map(|k| o.get(*k)).map(|v| (o, v)))
        .ok_or(ParseError::MissingKey)?;
    let lab = lab_number(lab_value)?;
    if !lab.is_finite() {
        return Err(ParseError::NonFinite);
    }
    let (min, max) = task.physiologic_range();
    if lab < min || lab > max {
        return Err(ParseError::OutOfRange { value: lab, min, max });
    }
    let justification = JUSTIFICATION_KEYS
        .iter()
        .find_map(|k| obj.get(*k))
        .map(|v| match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        })
        .unwrap_or_default();
    Ok((lab, justification))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_formed() {
        let (lab, why) = parse_response(r#"{"predicted_lab": 4.1, "justification": "..."}"#, Task::Potassium).unwrap();
        assert_eq!(lab, 4.1);
        assert_eq!(why, "...");
    }

    #[test]
    fn fenced_inside_prose() {
        let raw = "Sure. Considering the creatinine of 1.1 {approximately normal}, I expect a modest rise.\n\n\
```json\n{\n  \"predicted_lab\": \"3.9 mEq/L\",\n  \"justification\": \"20 mEq raises K by ~0.2 {per 10 mEq}\"\n}\n```\n\
Hope this helps!";
        let (lab, why) = parse_response(raw, Task::Potassium).unwrap();
        assert_eq!(lab, 3.9);
        assert!(why.contains("{per 10 mEq}"));
    }

    #[test]
    fn errors_are_typed() {
        assert_eq!(
            parse_response("no json here", Task::Potassium),
            Err(ParseError::NoJsonObject)
        );
        assert_eq!(
            parse_response(r#"{"value": 1}"#, Task::Potassium),
            Err(ParseError::MissingKey)
        );
        assert!(matches!(
            parse_response(r#"{"predicted_lab": "high"}"#, Task::Potassium),
            Err(ParseError::NotNumeric(_))
        ));
        assert!(matches!(
            parse_response(r#"{"predicted_lab": 0.0}"#, Task::Potassium),
            Err(ParseError::OutOfRange { .. })
        ));
        assert!(matches!(
            parse_response(r#"{"predicted_lab": 4.0}"#, Task::Sodium),
            Err(ParseError::OutOfRange { .. })
        ));
        assert!(parse_response(r#"{"predicted_lab": 140}"#, Task::Sodium).is_ok());
    }
}
