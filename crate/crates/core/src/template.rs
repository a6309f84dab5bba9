//! Named-slot text templates.
//!
//! A slot is `{name}` where `name` is an ASCII identifier. `{{` and `}}`
//! render as literal braces. Any other brace is literal text. Rendering
//! never leaves a slot marker in its output.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unknown slot `{0}`")]
    UnknownSlot(String),
}

impl Template {
    pub fn parse(text: &str) -> Self {
        let bytes = text.as_bytes();
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut i = 0;
        while i < bytes.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    literal.push('{');
                    i += 2;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    literal.push('}');
                    i += 2;
                }
                b'{' => match slot_at(text, i) {
                    Some((name, end)) => {
                        if !literal.is_empty() {
                            segments.push(Segment::Literal(std::mem::take(&mut literal)));
                        }
                        segments.push(Segment::Slot(name.to_string()));
                        i = end;
                    }
                    None => {
                        literal.push('{');
                        i += 1;
                    }
                },
                _ => {
                    // Copy the whole UTF-8 scalar starting here.
                    let ch = text[i..].chars().next().expect("in bounds");
                    literal.push(ch);
                    i += ch.len_utf8();
                }
            }
        }
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Template { segments }
    }

    /// Slot names in order of appearance, with repeats.
    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(name) => Some(name.as_str()),
            Segment::Literal(_) => None,
        })
    }

    pub fn slot_count(&self, name: &str) -> usize {
        self.slots().filter(|s| *s == name).count()
    }

    /// Renders the template, resolving each slot through `lookup`.
    pub fn render<F>(&self, mut lookup: F) -> Result<String, TemplateError>
    where
        F: FnMut(&str) -> Option<String>,
    {
        let mut out = String::new();
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Slot(name) => match lookup(name) {
                    Some(value) => out.push_str(&value),
                    None => return Err(TemplateError::UnknownSlot(name.clone())),
                },
            }
        }
        Ok(out)
    }
}

fn slot_at(text: &str, open: usize) -> Option<(&str, usize)> {
    let rest = &text[open + 1..];
    let mut len = 0;
    for (k, ch) in rest.char_indices() {
        let ok = if k == 0 {
            ch.is_ascii_alphabetic() || ch == '_'
        } else {
            ch.is_ascii_alphanumeric() || ch == '_'
        };
        if ok {
            len = k + 1;
        } else {
            break;
        }
    }
    if len > 0 && rest.as_bytes().get(len) == Some(&b'}') {
        Some((&rest[..len], open + 1 + len + 1))
    } else {
        None
    }
}

/// True if `text` still contains something that parses as a slot.
pub fn has_slot_marker(text: &str) -> bool {
    let bytes = text.as_bytes();
    (0..bytes.len()).any(|i| bytes[i] == b'{' && slot_at(text, i).is_some())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn render(t: &str, pairs: &[(&str, &str)]) -> Result<String, TemplateError> {
        Template::parse(t).render(|k| {
            pairs
                .iter()
                .find(|(name, _)| *name == k)
                .map(|(_, v)| v.to_string())
        })
    }

    #[test]
    fn substitutes_and_repeats() {
        let out = render("{a} and {b}, {a}!", &[("a", "x"), ("b", "y")]).unwrap();
        assert_eq!(out, "x and y, x!");
    }

    #[test]
    fn zero_slots_is_verbatim() {
        let t = "No slots here. Braces { alone } stay.";
        assert_eq!(render(t, &[]).unwrap(), t);
    }

    #[test]
    fn escaped_braces() {
        assert_eq!(render("{{a}} {a}", &[("a", "1")]).unwrap(), "{a} 1");
    }

    #[test]
    fn unknown_slot_is_named() {
        let err = render("size {shoe_size}", &[]).unwrap_err();
        assert_eq!(err, TemplateError::UnknownSlot("shoe_size".into()));
    }

    #[test]
    fn marker_detection() {
        assert!(has_slot_marker("a {b} c"));
        assert!(!has_slot_marker("a { b } c {1x}"));
    }

    #[test]
    fn unicode_literals_survive() {
        assert_eq!(render("café {a} ü", &[("a", "é")]).unwrap(), "café é ü");
    }
}
