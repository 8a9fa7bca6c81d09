//! Parsing of tagged model output into REQUIREMENT / ENDPOINTS / TEST
//! sections, and extraction of the fenced test script.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    Requirement,
    Endpoints,
    Test,
}

impl Tag {
    pub const ALL: [Tag; 3] = [Tag::Requirement, Tag::Endpoints, Tag::Test];

    pub fn label(self) -> &'static str {
        match self {
            Tag::Requirement => "REQUIREMENT",
            Tag::Endpoints => "ENDPOINTS",
            Tag::Test => "TEST",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("model output is empty")]
    Empty,
    #[error("model output has no {0} tag")]
    MissingTag(Tag),
}

/// One parsed model output.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub requirement_text: String,
    pub endpoints_text: String,
    pub test_text: String,
    pub code: Option<String>,
}

impl Generation {
    pub fn has_code(&self) -> bool {
        self.code.as_deref().is_some_and(|c| !c.trim().is_empty())
    }
}

fn tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)^[ \t]*(?:[*#_>][ \t]*)*(REQUIREMENTS?|ENDPOINTS?|TEST)[*_]*[ \t]*(?::[*_]*[ \t]*(.*)|[*_]*[ \t]*)$",
        )
        .expect("static regex")
    })
}

fn classify(name: &str) -> Tag {
    let upper = name.to_ascii_uppercase();
    if upper.starts_with("REQ") {
        Tag::Requirement
    } else if upper.starts_with("END") {
        Tag::Endpoints
    } else {
        Tag::Test
    }
}

struct FenceOpen<'a> {
    indent: usize,
    ticks: usize,
    _info: &'a str,
}

fn fence_open(line: &str) -> Option<FenceOpen<'_>> {
    let trimmed = line.trim_start_matches([' ', '\t']);
    let indent = line.len() - trimmed.len();
    let ticks = trimmed.bytes().take_while(|b| *b == b'`').count();
    if ticks < 3 {
        return None;
    }
    let info = &trimmed[ticks..];
    if info.contains('`') {
        return None;
    }
    Some(FenceOpen {
        indent,
        ticks,
        _info: info.trim(),
    })
}

fn is_fence_close(line: &str, ticks: usize) -> bool {
    let t = line.trim();
    t.len() >= ticks && t.bytes().all(|b| b == b'`')
}

/// Byte offset of the start of each line together with the line text
/// (without the terminator).
fn lines_with_offsets(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut offset = 0;
    text.split_inclusive('\n').map(move |chunk| {
        let start = offset;
        offset += chunk.len();
        let line = chunk.strip_suffix('\n').unwrap_or(chunk);
        (start, line.strip_suffix('\r').unwrap_or(line))
    })
}

struct TagHit {
    tag: Tag,
    line_start: usize,
    content_start: usize,
}

/// First occurrence of every tag, ignoring anything inside code fences.
fn find_tags(raw: &str) -> Vec<TagHit> {
    let mut hits: Vec<TagHit> = Vec::new();
    let mut open_fence: Option<usize> = None;
    for (start, line) in lines_with_offsets(raw) {
        if let Some(ticks) = open_fence {
            if is_fence_close(line, ticks) {
                open_fence = None;
            }
            continue;
        }
        if let Some(f) = fence_open(line) {
            open_fence = Some(f.ticks);
            continue;
        }
        let Some(cap) = tag_re().captures(line) else {
            continue;
        };
        let tag = classify(&cap[1]);
        if hits.iter().any(|h| h.tag == tag) {
            continue;
        }
        let content_start = match cap.get(2) {
            Some(inline) => start + inline.start(),
            None => start + line.len(),
        };
        hits.push(TagHit {
            tag,
            line_start: start,
            content_start,
        });
    }
    hits
}

/// Split tagged output into its sections and extract the test script.
///
/// Tags may carry markdown decoration and appear in any order; each section
/// runs from its tag to the next tag or the end of the text, trimmed.
pub fn parse_generation(raw: &str) -> Result<Generation, ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let hits = find_tags(raw);
    for tag in Tag::ALL {
        if !hits.iter().any(|h| h.tag == tag) {
            return Err(ParseError::MissingTag(tag));
        }
    }
    if hits.windows(2).any(|w| w[0].tag > w[1].tag) {
        tracing::warn!("output tags appear out of order; sections associated by name");
    }
    let section = |tag: Tag| -> &str {
        let i = hits.iter().position(|h| h.tag == tag).expect("checked above");
        let end = hits.get(i + 1).map_or(raw.len(), |h| h.line_start);
        raw[hits[i].content_start..end].trim()
    };
    let test_text = section(Tag::Test);
    Ok(Generation {
        requirement_text: section(Tag::Requirement).to_string(),
        endpoints_text: section(Tag::Endpoints).to_string(),
        test_text: test_text.to_string(),
        code: extract_code_block(test_text),
    })
}

/// Contents of the first triple-backtick fence. The info string is ignored
/// and the fence's own indentation is removed from the content lines.
pub fn extract_code_block(md: &str) -> Option<String> {
    let mut lines = lines_with_offsets(md).map(|(_, l)| l);
    let open = loop {
        let line = lines.next()?;
        if let Some(f) = fence_open(line) {
            break f;
        }
    };
    let mut body: Vec<&str> = Vec::new();
    for line in lines {
        if is_fence_close(line, open.ticks) {
            return Some(body.join("\n"));
        }
        body.push(dedent(line, open.indent));
    }
    tracing::warn!("unterminated code fence; treating the block as absent");
    None
}

fn dedent(line: &str, indent: usize) -> &str {
    let strip = line.bytes().take(indent).take_while(|b| *b == b' ' || *b == b'\t').count();
    &line[strip..]
}

/// Lay out three sections in the tagged output format.
pub fn render_output(requirement: &str, endpoints: &str, test: &str) -> String {
    format!("REQUIREMENT:\n{requirement}\nENDPOINTS:\n{endpoints}\nTEST:\n{test}\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_layout() {
        let g = parse_generation("REQUIREMENT:\nA\nENDPOINTS:\nB\nTEST:\n```typescript\nX\n```").unwrap();
        assert_eq!(g.requirement_text, "A");
        assert_eq!(g.endpoints_text, "B");
        assert_eq!(g.test_text, "```typescript\nX\n```");
        assert_eq!(g.code.as_deref(), Some("X"));
    }

    #[test]
    fn decorated_tags_parse_the_same() {
        let plain = parse_generation("REQUIREMENT: A\nENDPOINTS: B\nTEST:\n```\nX\n```").unwrap();
        for raw in [
            "**REQUIREMENT:** A\n**ENDPOINTS:** B\n**TEST:**\n```\nX\n```",
            "## Requirement\nA\n## Endpoints\nB\n## Test\n```\nX\n```",
            "**REQUIREMENT**: A\n### ENDPOINT:\nB\n_test_:\n```ts\nX\n```",
        ] {
            let g = parse_generation(raw).unwrap();
            assert_eq!(g.requirement_text, plain.requirement_text, "{raw}");
            assert_eq!(g.endpoints_text, plain.endpoints_text, "{raw}");
            assert_eq!(g.code, plain.code, "{raw}");
        }
    }

    #[test]
    fn missing_tag_is_named() {
        assert_eq!(
            parse_generation("REQUIREMENT:\nA\nTEST:\nx"),
            Err(ParseError::MissingTag(Tag::Endpoints))
        );
        assert_eq!(parse_generation("  \n"), Err(ParseError::Empty));
        let err = parse_generation("ENDPOINTS: b\nTEST: c").unwrap_err();
        assert_eq!(err.to_string(), "model output has no REQUIREMENT tag");
    }

    #[test]
    fn out_of_order_tags_associate_by_name() {
        let g = parse_generation("TEST:\n```\nX\n```\nREQUIREMENT: A\nENDPOINTS: B").unwrap();
        assert_eq!(g.requirement_text, "A");
        assert_eq!(g.endpoints_text, "B");
        assert_eq!(g.code.as_deref(), Some("X"));
    }

    #[test]
    fn prose_mentioning_tags_mid_line_is_content() {
        let g = parse_generation("REQUIREMENT: the TEST: part\nENDPOINTS: B\nTEST: none").unwrap();
        assert_eq!(g.requirement_text, "the TEST: part");
        assert_eq!(g.test_text, "none");
        assert!(g.code.is_none());
    }

    #[test]
    fn tags_inside_code_are_ignored() {
        let raw = "REQUIREMENT: A\nTEST:\n```\nENDPOINTS:\n```\nENDPOINTS: B";
        let g = parse_generation(raw).unwrap();
        assert_eq!(g.code.as_deref(), Some("ENDPOINTS:"));
        assert_eq!(g.endpoints_text, "B");
    }

    #[test]
    fn trailing_prose_kept_in_test_but_not_code() {
        let raw = "REQUIREMENT: A\nENDPOINTS: B\nTEST:\n```ts\nX\n```\n\nPlease remember to replace the URL.";
        let g = parse_generation(raw).unwrap();
        assert!(g.test_text.ends_with("Please remember to replace the URL."));
        assert_eq!(g.code.as_deref(), Some("X"));
    }

    #[test]
    fn code_block_cases() {
        assert_eq!(extract_code_block("```typescript\ncode\n```").as_deref(), Some("code"));
        assert_eq!(extract_code_block("no fences here"), None);
        assert_eq!(
            extract_code_block("a\n```js\nfirst\n```\nb\n```\nsecond\n```").as_deref(),
            Some("first")
        );
        assert_eq!(extract_code_block("```\nnever closed"), None);
        assert_eq!(extract_code_block("```\n```").as_deref(), Some(""));
        assert_eq!(extract_code_block("```\r\nx\r\n```\r\n").as_deref(), Some("x"));
    }

    #[test]
    fn indented_fence_is_dedented() {
        let md = "    ```typescript\n    import a from 'a';\n    \n      nested();\n    ```";
        assert_eq!(
            extract_code_block(md).as_deref(),
            Some("import a from 'a';\n\n  nested();")
        );
    }

    #[test]
    fn longer_fences_need_matching_close() {
        let md = "````\n```\ninner\n```\n````";
        assert_eq!(extract_code_block(md).as_deref(), Some("```\ninner\n```"));
    }

    #[test]
    fn has_code_requires_content() {
        let mut g = Generation::default();
        assert!(!g.has_code());
        g.code = Some("  ".into());
        assert!(!g.has_code());
        g.code = Some("x".into());
        assert!(g.has_code());
    }
}
