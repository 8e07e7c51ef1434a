//! Extraction of a 0/1 flag list from free-form model output.

use crate::error::{Error, Result};
use crate::types::ControlPointList;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedControl {
    pub control_points: ControlPointList,
    /// The reply started with 0 and the first flag was forced to 1.
    pub coerced: bool,
}

fn is_soft_separator(c: char) -> bool {
    c.is_whitespace() || matches!(c, ',' | '\'' | '"')
}

fn check_alphabet(tokens: &[&str]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|t| match *t {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(Error::ControlParse(format!("token {other:?} is not 0 or 1"))),
        })
        .collect()
}

/// Token lists of every `[...]` group, in order of appearance.
fn bracket_groups(text: &str) -> Vec<Vec<&str>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('[') {
        let after = &rest[open + 1..];
        let Some(close) = after.find(']') else { break };
        let inner = &after[..close];
        // a nested '[' restarts the group at the innermost bracket
        if let Some(nested) = inner.rfind('[') {
            rest = &after[nested..];
            continue;
        }
        out.push(inner.split(is_soft_separator).filter(|s| !s.is_empty()).collect());
        rest = &after[close + 1..];
    }
    out
}

/// Maximal runs of integer tokens separated only by whitespace, commas or quotes.
fn integer_runs(text: &str) -> Vec<Vec<&str>> {
    let mut runs = Vec::new();
    let mut run: Vec<&str> = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(i, c)) = chars.peek() {
        if c.is_alphanumeric() {
            let mut end = i;
            while let Some(&(j, d)) = chars.peek() {
                if !d.is_alphanumeric() {
                    break;
                }
                end = j + d.len_utf8();
                chars.next();
            }
            let word = &text[i..end];
            if word.chars().all(|d| d.is_ascii_digit()) {
                run.push(word);
            } else if !run.is_empty() {
                runs.push(std::mem::take(&mut run));
            }
        } else {
            if !is_soft_separator(c) && !run.is_empty() {
                runs.push(std::mem::take(&mut run));
            }
            chars.next();
        }
    }
    if !run.is_empty() {
        runs.push(run);
    }
    runs
}

/// Finds the first bracketed group, or failing that the first bare run, of
/// exactly `frames` tokens and reads it as control flags.
pub fn parse_control_list(text: &str, frames: usize) -> Result<ParsedControl> {
    if frames == 0 {
        return Err(Error::ControlParse("frame count must be >= 1".into()));
    }
    let candidate = bracket_groups(text)
        .into_iter()
        .find(|g| g.len() == frames)
        .or_else(|| integer_runs(text).into_iter().find(|r| r.len() == frames))
        .ok_or_else(|| Error::ControlParse(format!("no list of {frames} flags found")))?;
    let mut flags = check_alphabet(&candidate)?;
    let coerced = flags[0] == 0;
    if coerced {
        log::info!("model marked the first frame 0; forcing it to 1");
        flags[0] = 1;
    }
    Ok(ParsedControl {
        control_points: ControlPointList::new(flags)?,
        coerced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(text: &str, t: usize) -> Result<Vec<u8>> {
        parse_control_list(text, t).map(|p| p.control_points.flags().to_vec())
    }

    #[test]
    fn examples() {
        let p = parse_control_list("Answer: [0,0,1,0,0]", 5).unwrap();
        assert_eq!(p.control_points.flags(), &[1, 0, 1, 0, 0]);
        assert!(p.coerced);
        assert_eq!(flags("1 0 0 1", 4).unwrap(), vec![1, 0, 0, 1]);
        assert!(matches!(parse_control_list("[1,0,2,0]", 4), Err(Error::ControlParse(_))));
    }

    #[test]
    fn picks_group_of_matching_length() {
        let text = "Frames [1, 2, 3] map to ['1', '0', '0', '1'] in order.";
        assert_eq!(flags(text, 4).unwrap(), vec![1, 0, 0, 1]);
        assert_eq!(flags("x [[1, 0]] y", 2).unwrap(), vec![1, 0]);
        assert_eq!(flags("The list is 1, 0, 1.", 3).unwrap(), vec![1, 0, 1]);
    }

    #[test]
    fn failures() {
        assert!(flags("no list here", 3).is_err());
        assert!(flags("[1, 0]", 3).is_err());
        assert!(flags("frame one: 1 then 0", 2).is_err());
        assert!(flags("", 1).is_err());
        assert!(flags("[1]", 0).is_err());
    }
}
