use super::PromptError;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(String),
}

/// A parsed prompt template. `{Name}` is a placeholder, `{{` and `}}` are
/// literal braces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    segments: Vec<Segment>,
}

impl Template {
    pub fn parse(name: &str, source: &str) -> Result<Self, PromptError> {
        let syntax = |offset: usize, reason: &str| PromptError::TemplateSyntax {
            template: name.to_string(),
            offset,
            reason: reason.to_string(),
        };
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut chars = source.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            match c {
                '{' if chars.peek().is_some_and(|&(_, n)| n == '{') => {
                    chars.next();
                    literal.push('{');
                }
                '}' if chars.peek().is_some_and(|&(_, n)| n == '}') => {
                    chars.next();
                    literal.push('}');
                }
                '{' => {
                    let mut slot = String::new();
                    loop {
                        match chars.next() {
                            Some((_, '}')) => break,
                            Some((j, '{')) | Some((j, '\n')) => {
                                return Err(syntax(j, "unterminated placeholder"))
                            }
                            Some((_, ch)) => slot.push(ch),
                            None => return Err(syntax(i, "unterminated placeholder")),
                        }
                    }
                    if slot.trim().is_empty() {
                        return Err(syntax(i, "empty placeholder"));
                    }
                    if literal.is_empty() && matches!(segments.last(), Some(Segment::Slot(_))) {
                        return Err(syntax(i, "adjacent placeholders"));
                    }
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(Segment::Slot(slot));
                }
                '}' => return Err(syntax(i, "unmatched '}'")),
                _ => literal.push(c),
            }
        }
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Ok(Self {
            name: name.to_string(),
            segments,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Placeholder names in order of appearance, repeats included.
    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(n) => Some(n.as_str()),
            Segment::Literal(_) => None,
        })
    }

    /// Literal text with every placeholder removed.
    pub fn literal_text(&self) -> String {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Literal(l) => Some(l.as_str()),
                Segment::Slot(_) => None,
            })
            .collect()
    }

    /// Single-pass substitution. Values are inserted verbatim and never
    /// re-scanned. Extra values are ignored; a missing one is an error.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(l) => out.push_str(l),
                Segment::Slot(name) => {
                    let value = values
                        .iter()
                        .find(|(k, _)| k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| PromptError::MissingValue {
                            template: self.name.clone(),
                            slot: name.clone(),
                        })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }

    /// Inverse of `render`: recover placeholder values from a rendered text.
    /// Each value extends to the first occurrence of the following literal.
    pub fn extract(&self, text: &str) -> Option<Vec<(String, String)>> {
        let mut values = Vec::new();
        let mut cursor = 0;
        let mut pending: Option<&str> = None;
        for seg in &self.segments {
            match seg {
                Segment::Slot(name) => pending = Some(name),
                Segment::Literal(lit) => {
                    let rest = &text[cursor..];
                    match pending.take() {
                        Some(name) => {
                            let at = rest.find(lit.as_str())?;
                            values.push((name.to_string(), rest[..at].to_string()));
                            cursor += at + lit.len();
                        }
                        None => {
                            if !rest.starts_with(lit.as_str()) {
                                return None;
                            }
                            cursor += lit.len();
                        }
                    }
                }
            }
        }
        match pending {
            Some(name) => values.push((name.to_string(), text[cursor..].to_string())),
            None if cursor != text.len() => return None,
            None => {}
        }
        Some(values)
    }
}
