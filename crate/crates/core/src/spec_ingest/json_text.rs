//! Single-line JSON rendering used for token accounting and chunk text.
//!
//! The layout matches the default output of Python's `json.dumps`: `", "`
//! between items, `": "` between key and value, and every non-ASCII
//! character escaped as `\uXXXX`. Token counts of specifications are measured
//! on this form.

use std::io;

use serde::Serialize;
use serde_json::ser::{CharEscape, Formatter, Serializer};
use serde_json::Value;

#[derive(Default)]
struct SpacedAsciiFormatter;

impl Formatter for SpacedAsciiFormatter {
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        if first {
            Ok(())
        } else {
            w.write_all(b", ")
        }
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        if first {
            Ok(())
        } else {
            w.write_all(b", ")
        }
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        w.write_all(b": ")
    }

    fn write_string_fragment<W: ?Sized + io::Write>(&mut self, w: &mut W, fragment: &str) -> io::Result<()> {
        if fragment.is_ascii() {
            return w.write_all(fragment.as_bytes());
        }
        let mut buf = [0u16; 2];
        for ch in fragment.chars() {
            if ch.is_ascii() {
                w.write_all(&[ch as u8])?;
            } else {
                for unit in ch.encode_utf16(&mut buf) {
                    write!(w, "\\u{unit:04x}")?;
                }
            }
        }
        Ok(())
    }

    fn write_char_escape<W: ?Sized + io::Write>(&mut self, w: &mut W, escape: CharEscape) -> io::Result<()> {
        let s: &[u8] = match escape {
            CharEscape::Quote => b"\\\"",
            CharEscape::ReverseSolidus => b"\\\\",
            CharEscape::Solidus => b"\\/",
            CharEscape::Backspace => b"\\b",
            CharEscape::FormFeed => b"\\f",
            CharEscape::LineFeed => b"\\n",
            CharEscape::CarriageReturn => b"\\r",
            CharEscape::Tab => b"\\t",
            CharEscape::AsciiControl(byte) => {
                return write!(w, "\\u{byte:04x}");
            }
        };
        w.write_all(s)
    }
}

/// Render a JSON tree in the token-accounting layout.
pub fn to_token_text(value: &Value) -> String {
    let mut out = Vec::with_capacity(256);
    let mut ser = Serializer::with_formatter(&mut out, SpacedAsciiFormatter);
    value
        .serialize(&mut ser)
        .expect("serializing a JSON value into memory cannot fail");
    String::from_utf8(out).expect("formatter emits ASCII only")
}

/// Two-space pretty form used for files meant to be read by people.
pub fn to_pretty(value: &Value) -> String {
    serde_json::to_string_pretty(value).expect("serializing a JSON value into memory cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn spaced_separators() {
        let v = json!({"a": [1, 2], "b": {"c": null}});
        assert_eq!(to_token_text(&v), r#"{"a": [1, 2], "b": {"c": null}}"#);
    }

    #[test]
    fn non_ascii_is_escaped() {
        let v = json!({"k": "café €😀"});
        assert_eq!(to_token_text(&v), r#"{"k": "caf\u00e9 \u20ac\ud83d\ude00"}"#);
    }

    #[test]
    fn control_characters_escaped() {
        let v = json!("a\nb\t\u{1}");
        assert_eq!(to_token_text(&v), r#""a\nb\t\u0001""#);
    }

    #[test]
    fn empty_containers() {
        assert_eq!(to_token_text(&json!({})), "{}");
        assert_eq!(to_token_text(&json!([])), "[]");
    }

    #[test]
    fn round_trips_through_parser() {
        let v = json!({"x": ["ü", 1.5, true], "y": "\"q\""});
        let back: Value = serde_json::from_str(&to_token_text(&v)).unwrap();
        assert_eq!(back, v);
    }
}
