use serde_json::Value;

/// Parses the JSON object or array in an LLM reply, tolerating code fences
/// and prose around it.
pub fn extract_json(text: &str) -> Option<Value> {
    let body = strip_fences(text.trim());
    if let Ok(v) = serde_json::from_str::<Value>(body) {
        if v.is_object() || v.is_array() {
            return Some(v);
        }
    }
    for (open, close) in [('{', '}'), ('[', ']')] {
        if let (Some(lo), Some(hi)) = (body.find(open), body.rfind(close)) {
            if lo < hi {
                if let Ok(v) = serde_json::from_str::<Value>(&body[lo..=hi]) {
                    return Some(v);
                }
            }
        }
    }
    None
}

/// Removes a surrounding Markdown code fence, if present.
pub fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.split_once('\n').map_or("", |(_, body)| body);
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn plain_and_fenced() {
        assert_eq!(extract_json(r#"{"a": 1}"#), Some(json!({"a": 1})));
        assert_eq!(extract_json("```json\n{\"a\": 1}\n```"), Some(json!({"a": 1})));
        assert_eq!(
            extract_json("Sure! {\"a\": [1]} Hope it helps."),
            Some(json!({"a": [1]}))
        );
        assert_eq!(extract_json("not json"), None);
        assert_eq!(extract_json("42"), None);
    }

    #[test]
    fn fences_without_language() {
        assert_eq!(strip_fences("```\nSELECT 1\n```"), "SELECT 1");
        assert_eq!(strip_fences("SELECT 1"), "SELECT 1");
    }
}
