use serde::{Deserialize, Serialize};

/// One query read from `n.@@text@@&&category&&##difficulty##` output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedQuery {
    /// Serial number before the first marker, if any.
    pub index: Option<usize>,
    pub text: String,
    pub category: String,
    pub difficulty: Option<u8>,
}

/// Content between the first two occurrences of `marker`, plus what follows.
/// `Err` when the marker appears an odd number of times or more than twice.
fn enclosed<'a>(line: &'a str, marker: &str) -> Result<Option<(&'a str, &'a str, &'a str)>, usize> {
    let count = line.matches(marker).count();
    match count {
        0 => Ok(None),
        2 => {
            let open = line.find(marker).expect("counted");
            let inner_start = open + marker.len();
            let close = inner_start + line[inner_start..].find(marker).expect("counted");
            Ok(Some((
                &line[..open],
                &line[inner_start..close],
                &line[close + marker.len()..],
            )))
        }
        n => Err(n),
    }
}

/// Best-effort extraction; malformed lines are skipped with a warning.
pub fn parse_augmented_queries(raw: &str) -> (Vec<AugmentedQuery>, Vec<String>) {
    let mut queries = Vec::new();
    let mut warnings = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        let lineno = lineno + 1;
        let (prefix, text, rest) = match enclosed(line, "@@") {
            Ok(Some(parts)) => parts,
            Ok(None) => continue,
            Err(n) => {
                warnings.push(format!("line {lineno}: unbalanced @@ markers ({n} found)"));
                continue;
            }
        };
        let text = text.trim();
        if text.is_empty() {
            warnings.push(format!("line {lineno}: empty query text"));
            continue;
        }
        let (category, rest) = match enclosed(rest, "&&") {
            Ok(Some((_, cat, after))) if !cat.trim().is_empty() => (cat.trim(), after),
            Ok(Some(_)) => {
                warnings.push(format!("line {lineno}: empty category"));
                continue;
            }
            Ok(None) => {
                warnings.push(format!("line {lineno}: missing &&category&&"));
                continue;
            }
            Err(n) => {
                warnings.push(format!("line {lineno}: unbalanced && markers ({n} found)"));
                continue;
            }
        };
        let difficulty = match enclosed(rest, "##") {
            Ok(None) => None,
            Ok(Some((_, score, _))) => match score.trim().parse::<u8>() {
                Ok(d) if (1..=3).contains(&d) => Some(d),
                _ => {
                    warnings.push(format!(
                        "line {lineno}: difficulty {score:?} is not 1, 2 or 3"
                    ));
                    None
                }
            },
            Err(n) => {
                warnings.push(format!("line {lineno}: unbalanced ## markers ({n} found)"));
                continue;
            }
        };
        let index = prefix
            .trim()
            .trim_end_matches(['.', '、', ')'])
            .trim()
            .parse()
            .ok();
        queries.push(AugmentedQuery {
            index,
            text: text.to_string(),
            category: category.to_string(),
            difficulty,
        });
    }
    (queries, warnings)
}
