//! Line-oriented scanner for region headers and SUVmax mentions.
//!
//! Grammar, applied per line and case-insensitively:
//!
//! ```text
//! SUV[ -]?max (\s*(of|=|:))? \s* [0-9]+(\.[0-9]+)?
//! ```
//!
//! A line whose trimmed text is a region name (optionally followed by `:`
//! and more text) opens that region. Mentions attach to the most recently
//! opened region.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::RegionName;

/// One SUVmax value found in a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionMention {
    pub suv_max: f64,
    /// `[start, end)` character offsets of the whole mention in the report.
    pub source_span: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WarningKind {
    /// A mention before any region header; kept under the unknown region.
    MentionBeforeRegion { suv_max: f64 },
    /// An SUVmax keyword not followed by a usable positive number.
    UnparseableValue { text: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParseWarning {
    /// 1-based line number.
    pub line: usize,
    pub source_span: (usize, usize),
    #[serde(flatten)]
    pub kind: WarningKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportFindings {
    pub exam_id: String,
    pub regions: BTreeMap<RegionName, Vec<LesionMention>>,
    /// Mentions found before any region header.
    pub unknown: Vec<LesionMention>,
    pub warnings: Vec<ParseWarning>,
}

impl ReportFindings {
    pub fn mentions(&self, region: RegionName) -> &[LesionMention] {
        self.regions.get(&region).map_or(&[], Vec::as_slice)
    }

    pub fn with_exam_id(mut self, exam_id: impl Into<String>) -> Self {
        self.exam_id = exam_id.into();
        self
    }
}

/// Largest SUVmax mentioned in `region`, if any.
pub fn region_suvmax(findings: &ReportFindings, region: RegionName) -> Option<f64> {
    findings
        .mentions(region)
        .iter()
        .map(|m| m.suv_max)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
}

const HEADERS: [(&str, RegionName); 4] = [
    ("ABDOMEN AND PELVIS", RegionName::AbdomenPelvis),
    ("HEAD AND NECK", RegionName::HeadNeck),
    ("ABDOMEN", RegionName::AbdomenPelvis),
    ("THORAX", RegionName::Thorax),
];

fn header_region(line: &str) -> Option<RegionName> {
    let upper = line.trim().to_uppercase();
    for (name, region) in HEADERS {
        if let Some(rest) = upper.strip_prefix(name) {
            let rest = rest.trim_start();
            if rest.is_empty() || rest.starts_with(':') {
                return Some(region);
            }
        }
    }
    None
}

// Case-insensitive comparison with Unicode simple case folding; the only
// non-ASCII fold among the keyword letters is LONG S.
fn eq_fold(c: char, lower: char) -> bool {
    c.to_ascii_lowercase() == lower || (lower == 's' && c == '\u{17F}')
}

fn match_word(chars: &[char], at: usize, word: &str) -> Option<usize> {
    let mut i = at;
    for w in word.chars() {
        if !eq_fold(*chars.get(i)?, w) {
            return None;
        }
        i += 1;
    }
    Some(i)
}

fn match_keyword(chars: &[char], at: usize) -> Option<usize> {
    let i = match_word(chars, at, "suv")?;
    if let Some(&sep) = chars.get(i) {
        if sep == ' ' || sep == '-' {
            if let Some(end) = match_word(chars, i + 1, "max") {
                return Some(end);
            }
        }
    }
    match_word(chars, i, "max")
}

fn skip_ws(chars: &[char], mut i: usize) -> usize {
    while chars.get(i).is_some_and(|c| c.is_whitespace()) {
        i += 1;
    }
    i
}

fn match_number(chars: &[char], at: usize) -> Option<usize> {
    let digits = |mut i: usize| {
        let s = i;
        while chars.get(i).is_some_and(|c| c.is_ascii_digit()) {
            i += 1;
        }
        (i > s).then_some(i)
    };
    let i = digits(at)?;
    if chars.get(i) == Some(&'.') {
        if let Some(j) = digits(i + 1) {
            return Some(j);
        }
    }
    Some(i)
}

/// Result of trying the full grammar at one keyword position.
enum Attempt {
    Value { end: usize, num: (usize, usize) },
    Unparseable { end: usize },
}

fn match_mention(chars: &[char], start: usize) -> Option<Attempt> {
    let kw_end = match_keyword(chars, start)?;
    // optional connector
    let j = skip_ws(chars, kw_end);
    let after_connector = if let Some(k) = match_word(chars, j, "of") {
        Some(k)
    } else if matches!(chars.get(j), Some('=') | Some(':')) {
        Some(j + 1)
    } else {
        None
    };
    if let Some(k) = after_connector {
        let n = skip_ws(chars, k);
        if let Some(e) = match_number(chars, n) {
            return Some(Attempt::Value { end: e, num: (n, e) });
        }
    }
    let n = skip_ws(chars, kw_end);
    if let Some(e) = match_number(chars, n) {
        return Some(Attempt::Value { end: e, num: (n, e) });
    }
    // report the keyword plus the next token for context
    let mut e = skip_ws(chars, after_connector.unwrap_or(kw_end));
    while chars.get(e).is_some_and(|c| !c.is_whitespace()) {
        e += 1;
    }
    Some(Attempt::Unparseable { end: e.max(kw_end) })
}

/// Parses a report into per-region SUVmax mentions. Never fails.
pub fn parse_report(text: &str) -> ReportFindings {
    let mut findings = ReportFindings::default();
    let mut region: Option<RegionName> = None;
    let mut base = 0usize;
    for (lineno, line) in text.split('\n').enumerate() {
        let chars: Vec<char> = line.chars().collect();
        if let Some(r) = header_region(line) {
            region = Some(r);
            findings.regions.entry(r).or_default();
        }
        let mut i = 0;
        while i < chars.len() {
            match match_mention(&chars, i) {
                None => i += 1,
                Some(Attempt::Unparseable { end }) => {
                    findings.warnings.push(ParseWarning {
                        line: lineno + 1,
                        source_span: (base + i, base + end),
                        kind: WarningKind::UnparseableValue {
                            text: chars[i..end].iter().collect(),
                        },
                    });
                    i += 1;
                }
                Some(Attempt::Value { end, num }) => {
                    let span = (base + i, base + end);
                    let raw: String = chars[num.0..num.1].iter().collect();
                    match raw.parse::<f64>() {
                        Ok(v) if v > 0.0 && v.is_finite() => {
                            let mention = LesionMention {
                                suv_max: v,
                                source_span: span,
                            };
                            match region {
                                Some(r) => findings.regions.entry(r).or_default().push(mention),
                                None => {
                                    findings.warnings.push(ParseWarning {
                                        line: lineno + 1,
                                        source_span: span,
                                        kind: WarningKind::MentionBeforeRegion { suv_max: v },
                                    });
                                    findings.unknown.push(mention);
                                }
                            }
                        }
                        _ => findings.warnings.push(ParseWarning {
                            line: lineno + 1,
                            source_span: span,
                            kind: WarningKind::UnparseableValue {
                                text: chars[i..end].iter().collect(),
                            },
                        }),
                    }
                    i = end;
                }
            }
        }
        base += chars.len() + 1;
    }
    for r in RegionName::ALL {
        findings.regions.entry(r).or_default();
    }
    findings
}

#[cfg(test)]
mod tests {
    use super::*;

    fn values(f: &ReportFindings, r: RegionName) -> Vec<f64> {
        f.mentions(r).iter().map(|m| m.suv_max).collect()
    }

    #[test]
    fn single_thorax_mention_on_header_line() {
        let f = parse_report("FINDINGS:\nTHORAX: 2.1 cm nodule, SUVmax 5.4.");
        assert_eq!(values(&f, RegionName::Thorax), vec![5.4]);
        assert!(f.warnings.is_empty());
        assert!(values(&f, RegionName::AbdomenPelvis).is_empty());
    }

    #[test]
    fn empty_report_has_all_regions_empty() {
        let f = parse_report("");
        assert_eq!(f.regions.len(), 3);
        assert!(f.regions.values().all(Vec::is_empty));
        assert!(f.warnings.is_empty() && f.unknown.is_empty());
    }

    #[test]
    fn mentions_attach_to_latest_region() {
        let text = "FINDINGS:\nABDOMEN:\nLiver lesion, SUV max of 3.2.\nTHORAX:\nRight upper lobe mass with SUVmax 7.7.";
        let f = parse_report(text);
        assert_eq!(values(&f, RegionName::AbdomenPelvis), vec![3.2]);
        assert_eq!(values(&f, RegionName::Thorax), vec![7.7]);
    }

    #[test]
    fn header_aliases() {
        let f = parse_report("Abdomen and Pelvis\nSUV-max = 2\nHEAD AND NECK:\nnode SUVMAX: 4.25");
        assert_eq!(values(&f, RegionName::AbdomenPelvis), vec![2.0]);
        assert_eq!(values(&f, RegionName::HeadNeck), vec![4.25]);
    }

    #[test]
    fn prose_mentioning_a_region_is_not_a_header() {
        let f = parse_report("THORAX\nthorax and abdomen are unremarkable, SUVmax 2.0");
        assert_eq!(values(&f, RegionName::Thorax), vec![2.0]);
    }

    #[test]
    fn mention_before_header_goes_to_unknown_with_warning() {
        let f = parse_report("History: prior SUVmax 12.0\nTHORAX:\nSUVmax 3");
        assert_eq!(f.unknown.len(), 1);
        assert_eq!(f.unknown[0].suv_max, 12.0);
        assert!(matches!(f.warnings[0].kind, WarningKind::MentionBeforeRegion { .. }));
        assert_eq!(values(&f, RegionName::Thorax), vec![3.0]);
    }

    #[test]
    fn unparseable_values_are_skipped_with_warning() {
        let f = parse_report("THORAX:\nbulky mass SUVmax >10, another SUVmax 0 and SUVmax 6.1");
        assert_eq!(values(&f, RegionName::Thorax), vec![6.1]);
        assert_eq!(f.warnings.len(), 2);
        assert!(f.warnings.iter().all(|w| matches!(w.kind, WarningKind::UnparseableValue { .. })));
    }

    #[test]
    fn spans_are_character_offsets() {
        let text = "THORAX: é SUVmax 5.5";
        let f = parse_report(text);
        let m = &f.mentions(RegionName::Thorax)[0];
        let covered: String = text.chars().skip(m.source_span.0).take(m.source_span.1 - m.source_span.0).collect();
        assert_eq!(covered, "SUVmax 5.5");
    }

    #[test]
    fn trailing_dot_is_not_part_of_number() {
        let f = parse_report("THORAX\nSUVmax 3. Next");
        assert_eq!(values(&f, RegionName::Thorax), vec![3.0]);
    }

    #[test]
    fn region_max_is_largest_mention() {
        let f = parse_report("THORAX:\nSUVmax 5.4\nSUVmax 9.9\nSUVmax 2.0");
        assert_eq!(region_suvmax(&f, RegionName::Thorax), Some(9.9));
        assert_eq!(region_suvmax(&f, RegionName::AbdomenPelvis), None);
        let empty = parse_report("THORAX:\nclear");
        assert_eq!(region_suvmax(&empty, RegionName::Thorax), None);
    }
}
