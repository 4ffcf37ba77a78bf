//! Dictionary-style fragments such as `{'Overall Score': 7}`.

/// A top-level brace group. `body` excludes the outer braces and, for the
/// `{{...}}` form, the inner pair too.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct BraceGroup<'a> {
    pub start: usize,
    pub end: usize,
    pub body: &'a str,
}

/// Top-level brace groups in order, plus the byte offset of a trailing `{`
/// that never closes.
pub(crate) fn brace_groups(text: &str) -> (Vec<BraceGroup<'_>>, Option<usize>) {
    let mut groups = Vec::new();
    let mut depth = 0usize;
    let mut open = 0usize;
    for (i, ch) in text.char_indices() {
        match ch {
            '{' => {
                if depth == 0 {
                    open = i;
                }
                depth += 1;
            }
            '}' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    let mut body = &text[open + 1..i];
                    let trimmed = body.trim();
                    if trimmed.starts_with('{') && trimmed.ends_with('}') && trimmed.len() >= 2 {
                        body = &trimmed[1..trimmed.len() - 1];
                    }
                    groups.push(BraceGroup {
                        start: open,
                        end: i + 1,
                        body,
                    });
                }
            }
            _ => {}
        }
    }
    (groups, (depth > 0).then_some(open))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum FragmentValue {
    /// Bare token, e.g. `7`.
    Bare(String),
    /// Quoted string, e.g. `'7'` or `'Assistant 1'`.
    Quoted(String),
}

impl FragmentValue {
    pub fn text(&self) -> &str {
        match self {
            FragmentValue::Bare(s) | FragmentValue::Quoted(s) => s,
        }
    }

    pub fn as_int(&self) -> Option<i32> {
        self.text().trim().parse().ok()
    }
}

fn is_quote(c: char) -> bool {
    matches!(c, '\'' | '"' | '‘' | '’' | '“' | '”')
}

fn is_colon(c: char) -> bool {
    c == ':' || c == '：'
}

fn is_separator(c: char) -> bool {
    c == ',' || c == '，' || c == ';' || c == '；'
}

struct Cursor<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
}

impl Cursor<'_> {
    fn skip_ws(&mut self) {
        while self.chars.peek().is_some_and(|c| c.is_whitespace()) {
            self.chars.next();
        }
    }

    fn quoted(&mut self) -> Result<String, String> {
        self.chars.next();
        let mut out = String::new();
        for c in self.chars.by_ref() {
            if is_quote(c) {
                return Ok(out);
            }
            out.push(c);
        }
        Err("unterminated quote".into())
    }

    fn until(&mut self, stop: impl Fn(char) -> bool) -> String {
        let mut out = String::new();
        while let Some(&c) = self.chars.peek() {
            if stop(c) {
                break;
            }
            out.push(c);
            self.chars.next();
        }
        out.trim().to_string()
    }
}

/// Parse `key: value, key: value` pairs. Keys may be quoted or bare, values
/// quoted or bare, halfwidth and fullwidth punctuation both accepted.
pub(crate) fn parse_entries(body: &str) -> Result<Vec<(String, FragmentValue)>, String> {
    let mut cur = Cursor {
        chars: body.chars().peekable(),
    };
    let mut entries = Vec::new();
    loop {
        cur.skip_ws();
        let Some(&c) = cur.chars.peek() else { break };
        let key = if is_quote(c) {
            cur.quoted()?
        } else {
            cur.until(is_colon)
        };
        if key.is_empty() {
            return Err("empty key".into());
        }
        cur.skip_ws();
        match cur.chars.next() {
            Some(c) if is_colon(c) => {}
            _ => return Err(format!("missing ':' after key {key:?}")),
        }
        cur.skip_ws();
        let value = match cur.chars.peek() {
            Some(&c) if is_quote(c) => FragmentValue::Quoted(cur.quoted()?),
            Some(_) => FragmentValue::Bare(cur.until(is_separator)),
            None => return Err(format!("missing value for key {key:?}")),
        };
        if value.text().is_empty() {
            return Err(format!("empty value for key {key:?}"));
        }
        entries.push((key.trim().to_string(), value));
        cur.skip_ws();
        match cur.chars.next() {
            None => break,
            Some(c) if is_separator(c) => continue,
            Some(c) => return Err(format!("unexpected {c:?} after value")),
        }
    }
    if entries.is_empty() {
        return Err("fragment has no entries".into());
    }
    Ok(entries)
}
