const EXCHANGES: [(&str, &str); 6] = [
    ("Assistant 1", "Assistant 2"),
    ("Assistant 2", "Assistant 1"),
    ("助手1", "助手2"),
    ("助手2", "助手1"),
    ("[[1]]", "[[2]]"),
    ("[[2]]", "[[1]]"),
];

/// Exchange assistant labels in one left-to-right pass (simultaneous
/// substitution), so applying it twice restores the input.
pub fn swap_assistant_labels(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    'outer: while !rest.is_empty() {
        for (from, to) in EXCHANGES {
            if let Some(tail) = rest.strip_prefix(from) {
                out.push_str(to);
                rest = tail;
                continue 'outer;
            }
        }
        let ch = rest.chars().next().expect("non-empty");
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    out
}
