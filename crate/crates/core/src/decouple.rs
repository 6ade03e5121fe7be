//! Rule-based splitting of a referring expression into a static-object
//! stream and a spatial-motion stream.
//!
//! The split is a deterministic single pass over normalized tokens. Content
//! words are routed by lexical class; function words stay pending until the
//! next content word claims them, so phrases travel whole ("in the right"
//! goes to the motion stream as one piece, "in light color" to the static
//! stream). Unknown content words default to the static stream, which acts
//! as the attribute recognizer of last resort.

use std::collections::BTreeSet;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecoupleError {
    #[error("empty expression: nothing to decouple")]
    EmptyExpression,
    #[error("lexicon parse error at line {line}: {reason}")]
    LexiconParse { line: usize, reason: String },
    #[error("lexicon classes overlap on `{term}`")]
    LexiconOverlap { term: String },
    #[error("corpus is empty")]
    EmptyCorpus,
}

/// Lexical class of a single token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Color,
    Category,
    Direction,
    Motion,
    State,
    Preposition,
    Relative,
    Function,
    Unknown,
}

/// Stream label assigned to each token of an expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Assignment {
    Static,
    Motion,
    DroppedFunction,
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Assignment::Static => write!(f, "STATIC"),
            Assignment::Motion => write!(f, "MOTION"),
            Assignment::DroppedFunction => write!(f, "DROPPED-FUNCTION"),
        }
    }
}

/// Term classes backing the decoupling rules, loaded from the versioned
/// plain-text data file.
#[derive(Debug, Clone)]
pub struct Lexicon {
    colors: BTreeSet<String>,
    categories: BTreeSet<String>,
    directions: BTreeSet<String>,
    motion: BTreeSet<String>,
    state: BTreeSet<String>,
    prepositions: BTreeSet<String>,
    relative: BTreeSet<String>,
    function: BTreeSet<String>,
}

pub const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.txt");

impl Lexicon {
    /// Parse the section-header/one-term-per-line format. `#` starts a
    /// comment. The five content classes must be pairwise disjoint.
    pub fn parse(text: &str) -> Result<Self, DecoupleError> {
        let mut lex = Lexicon {
            colors: BTreeSet::new(),
            categories: BTreeSet::new(),
            directions: BTreeSet::new(),
            motion: BTreeSet::new(),
            state: BTreeSet::new(),
            prepositions: BTreeSet::new(),
            relative: BTreeSet::new(),
            function: BTreeSet::new(),
        };
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = Some(line[1..line.len() - 1].to_string());
                continue;
            }
            let term = line.to_lowercase();
            let set = match section.as_deref() {
                Some("colors") => &mut lex.colors,
                Some("categories") => &mut lex.categories,
                Some("directions") => &mut lex.directions,
                Some("motion") => &mut lex.motion,
                Some("state") => &mut lex.state,
                Some("prepositions") => &mut lex.prepositions,
                Some("relative") => &mut lex.relative,
                Some("function") => &mut lex.function,
                Some(other) => {
                    return Err(DecoupleError::LexiconParse {
                        line: idx + 1,
                        reason: format!("unknown section [{other}]"),
                    })
                }
                None => {
                    return Err(DecoupleError::LexiconParse {
                        line: idx + 1,
                        reason: "term before any section header".to_string(),
                    })
                }
            };
            set.insert(term);
        }
        lex.check_disjoint()?;
        Ok(lex)
    }

    pub fn default_lexicon() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }

    fn check_disjoint(&self) -> Result<(), DecoupleError> {
        let content: [&BTreeSet<String>; 5] = [
            &self.colors,
            &self.categories,
            &self.directions,
            &self.motion,
            &self.state,
        ];
        for i in 0..content.len() {
            for j in i + 1..content.len() {
                if let Some(term) = content[i].intersection(content[j]).next() {
                    return Err(DecoupleError::LexiconOverlap { term: term.clone() });
                }
            }
        }
        Ok(())
    }

    pub fn classify(&self, token: &str) -> TokenClass {
        let t = token.to_lowercase();
        if self.colors.contains(&t) {
            TokenClass::Color
        } else if self.categories.contains(&t) {
            TokenClass::Category
        } else if self.directions.contains(&t) {
            TokenClass::Direction
        } else if self.motion.contains(&t) {
            TokenClass::Motion
        } else if self.state.contains(&t) {
            TokenClass::State
        } else if self.prepositions.contains(&t) {
            TokenClass::Preposition
        } else if self.relative.contains(&t) {
            TokenClass::Relative
        } else if self.function.contains(&t) {
            TokenClass::Function
        } else {
            TokenClass::Unknown
        }
    }

    pub fn colors(&self) -> &BTreeSet<String> {
        &self.colors
    }

    pub fn categories(&self) -> &BTreeSet<String> {
        &self.categories
    }
}

/// An expression split into its two streams with per-token provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoupledExpression {
    pub original: Vec<String>,
    pub assignment: Vec<Assignment>,
}

impl DecoupledExpression {
    pub fn static_stream(&self) -> Vec<&str> {
        self.stream(Assignment::Static)
    }

    pub fn motion_stream(&self) -> Vec<&str> {
        self.stream(Assignment::Motion)
    }

    fn stream(&self, which: Assignment) -> Vec<&str> {
        self.original
            .iter()
            .zip(&self.assignment)
            .filter(|(_, &a)| a == which)
            .map(|(t, _)| t.as_str())
            .collect()
    }

    pub fn static_text(&self) -> String {
        self.static_stream().join(" ")
    }

    pub fn motion_text(&self) -> String {
        self.motion_stream().join(" ")
    }
}

/// Lower-cased, punctuation-stripped whitespace tokens. Hyphenated
/// compounds stay whole; edge punctuation is trimmed.
pub fn tokenize(expression: &str) -> Result<Vec<String>, DecoupleError> {
    let tokens: Vec<String> = expression
        .split_whitespace()
        .filter_map(|w| {
            let trimmed = w.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_lowercase())
            }
        })
        .collect();
    if tokens.is_empty() {
        return Err(DecoupleError::EmptyExpression);
    }
    Ok(tokens)
}

/// Split an expression into static-object and spatial-motion streams.
pub fn decouple(expression: &str, lexicon: &Lexicon) -> Result<DecoupledExpression, DecoupleError> {
    let tokens = tokenize(expression)?;
    let classes: Vec<TokenClass> = tokens.iter().map(|t| lexicon.classify(t)).collect();
    let mut assignment: Vec<Option<Assignment>> = vec![None; tokens.len()];
    // indices of function/preposition/relative tokens not yet claimed by a phrase
    let mut pending: Vec<usize> = Vec::new();
    let mut last_content: Option<Assignment> = None;

    for i in 0..tokens.len() {
        let target = match classes[i] {
            TokenClass::Color | TokenClass::Category | TokenClass::Unknown => Assignment::Static,
            TokenClass::Direction | TokenClass::Motion | TokenClass::State => Assignment::Motion,
            TokenClass::Preposition | TokenClass::Relative | TokenClass::Function => {
                pending.push(i);
                continue;
            }
        };
        for p in pending.drain(..) {
            assignment[p] = Some(target);
        }
        assignment[i] = Some(target);
        last_content = Some(target);
    }

    // A trailing function run closes the last phrase ("...direction of ours"),
    // and with no phrase at all it is dropped.
    let tail = last_content.unwrap_or(Assignment::DroppedFunction);
    for p in pending {
        assignment[p] = Some(tail);
    }

    Ok(DecoupledExpression {
        original: tokens,
        assignment: assignment.into_iter().map(|a| a.expect("all assigned")).collect(),
    })
}

/// One corpus entry: an expression and its expected split.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CorpusEntry {
    pub expr: String,
    #[serde(rename = "static")]
    pub static_expected: String,
    pub motion: String,
}

#[derive(Debug, Clone)]
pub struct CorpusMismatch {
    pub expr: String,
    pub got_static: String,
    pub got_motion: String,
    pub want_static: String,
    pub want_motion: String,
}

#[derive(Debug, Clone)]
pub struct CorpusReport {
    pub entries: usize,
    pub exact_matches: usize,
    pub tokens_total: usize,
    pub tokens_correct: usize,
    pub mismatches: Vec<CorpusMismatch>,
}

impl CorpusReport {
    pub fn exact_match_rate(&self) -> f64 {
        if self.entries == 0 {
            1.0
        } else {
            self.exact_matches as f64 / self.entries as f64
        }
    }

    pub fn token_accuracy(&self) -> f64 {
        if self.tokens_total == 0 {
            1.0
        } else {
            self.tokens_correct as f64 / self.tokens_total as f64
        }
    }
}

/// Exact-match and per-token assignment accuracy over a labeled corpus.
pub fn corpus_eval(corpus: &[CorpusEntry], lexicon: &Lexicon) -> Result<CorpusReport, DecoupleError> {
    if corpus.is_empty() {
        return Err(DecoupleError::EmptyCorpus);
    }
    let mut report = CorpusReport {
        entries: corpus.len(),
        exact_matches: 0,
        tokens_total: 0,
        tokens_correct: 0,
        mismatches: Vec::new(),
    };
    for entry in corpus {
        let got = decouple(&entry.expr, lexicon)?;
        let got_static = got.static_text();
        let got_motion = got.motion_text();
        let exact = got_static == entry.static_expected && got_motion == entry.motion;
        if exact {
            report.exact_matches += 1;
        } else {
            report.mismatches.push(CorpusMismatch {
                expr: entry.expr.clone(),
                got_static: got_static.clone(),
                got_motion: got_motion.clone(),
                want_static: entry.static_expected.clone(),
                want_motion: entry.motion.clone(),
            });
        }
        // Token-level accuracy against the label sequence implied by the
        // expected streams (two-pointer walk; unmatched tokens are expected
        // to be dropped).
        let want_static: Vec<String> = entry
            .static_expected
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let want_motion: Vec<String> =
            entry.motion.split_whitespace().map(str::to_string).collect();
        let mut si = 0;
        let mut mi = 0;
        for (tok, &got_label) in got.original.iter().zip(&got.assignment) {
            let want_label = if si < want_static.len() && want_static[si] == *tok {
                si += 1;
                Assignment::Static
            } else if mi < want_motion.len() && want_motion[mi] == *tok {
                mi += 1;
                Assignment::Motion
            } else {
                Assignment::DroppedFunction
            };
            report.tokens_total += 1;
            if want_label == got_label {
                report.tokens_correct += 1;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lex() -> Lexicon {
        Lexicon::default_lexicon()
    }

    #[test]
    fn tokenize_strips_punctuation_and_case() {
        assert_eq!(
            tokenize("Black cars, in the right.").unwrap(),
            vec!["black", "cars", "in", "the", "right"]
        );
    }

    #[test]
    fn tokenize_keeps_hyphenated_compounds() {
        assert_eq!(tokenize("light-color").unwrap(), vec!["light-color"]);
    }

    #[test]
    fn tokenize_single_word() {
        assert_eq!(tokenize("women").unwrap(), vec!["women"]);
    }

    #[test]
    fn tokenize_rejects_empty() {
        assert!(matches!(tokenize("   "), Err(DecoupleError::EmptyExpression)));
        assert!(matches!(tokenize("...!"), Err(DecoupleError::EmptyExpression)));
    }

    #[test]
    fn splits_attribute_and_spatial_phrase() {
        let d = decouple("black cars in the right", &lex()).unwrap();
        assert_eq!(d.static_stream(), vec!["black", "cars"]);
        assert_eq!(d.motion_stream(), vec!["in", "the", "right"]);
    }

    #[test]
    fn splits_relative_motion_clause() {
        let d = decouple("left people who are walking", &lex()).unwrap();
        assert_eq!(d.static_stream(), vec!["people"]);
        assert_eq!(d.motion_stream(), vec!["left", "who", "are", "walking"]);
    }

    #[test]
    fn splits_bare_participle() {
        let d = decouple("moving vehicles", &lex()).unwrap();
        assert_eq!(d.static_stream(), vec!["vehicles"]);
        assert_eq!(d.motion_stream(), vec!["moving"]);
    }

    #[test]
    fn appearance_complement_stays_static() {
        let d = decouple("vehicles in light color", &lex()).unwrap();
        assert_eq!(d.static_stream(), vec!["vehicles", "in", "light", "color"]);
        assert!(d.motion_stream().is_empty());
    }

    #[test]
    fn bare_noun_is_static() {
        let d = decouple("women", &lex()).unwrap();
        assert_eq!(d.static_stream(), vec!["women"]);
        assert!(d.motion_stream().is_empty());
    }

    #[test]
    fn state_verbs_go_to_motion_stream() {
        let d = decouple("parked cars", &lex()).unwrap();
        assert_eq!(d.static_stream(), vec!["cars"]);
        assert_eq!(d.motion_stream(), vec!["parked"]);
    }

    #[test]
    fn trailing_phrase_tail_is_absorbed() {
        let d = decouple("cars in the counter direction of ours", &lex()).unwrap();
        assert_eq!(d.static_stream(), vec!["cars"]);
        assert_eq!(
            d.motion_stream(),
            vec!["in", "the", "counter", "direction", "of", "ours"]
        );
    }

    #[test]
    fn all_function_words_are_dropped() {
        let d = decouple("the and a", &lex()).unwrap();
        assert!(d.static_stream().is_empty());
        assert!(d.motion_stream().is_empty());
        assert!(d
            .assignment
            .iter()
            .all(|&a| a == Assignment::DroppedFunction));
    }

    #[test]
    fn unknown_content_defaults_to_static() {
        let d = decouple("purple zeppelins", &lex()).unwrap();
        assert_eq!(d.static_stream(), vec!["purple", "zeppelins"]);
    }

    #[test]
    fn corpus_eval_counts_deliberate_mismatch() {
        let corpus = vec![
            CorpusEntry {
                expr: "moving vehicles".into(),
                static_expected: "vehicles".into(),
                motion: "moving".into(),
            },
            CorpusEntry {
                expr: "moving vehicles".into(),
                static_expected: "moving vehicles".into(), // wrong on purpose
                motion: "".into(),
            },
        ];
        let report = corpus_eval(&corpus, &lex()).unwrap();
        assert_eq!(report.exact_matches, 1);
        assert_eq!(report.mismatches.len(), 1);
        assert_eq!(report.mismatches[0].want_static, "moving vehicles");
    }

    #[test]
    fn corpus_eval_empty_expectation_matches_empty_output() {
        let corpus = vec![CorpusEntry {
            expr: "women".into(),
            static_expected: "women".into(),
            motion: "".into(),
        }];
        let report = corpus_eval(&corpus, &lex()).unwrap();
        assert_eq!(report.exact_match_rate(), 1.0);
    }

    #[test]
    fn idempotent_on_pure_streams() {
        let lex = lex();
        for expr in [
            "black cars in the right",
            "left people who are walking",
            "moving vehicles",
            "vehicles in light color",
            "women",
        ] {
            let d = decouple(expr, &lex).unwrap();
            if !d.static_stream().is_empty() {
                let re = decouple(&d.static_text(), &lex).unwrap();
                assert_eq!(re.static_stream(), d.static_stream(), "static of {expr}");
            }
            if !d.motion_stream().is_empty() {
                let re = decouple(&d.motion_text(), &lex).unwrap();
                assert_eq!(re.motion_stream(), d.motion_stream(), "motion of {expr}");
            }
        }
    }

    proptest! {
        // Partition property: every token is assigned exactly one label and
        // the streams plus dropped tokens reconstruct the input in order.
        #[test]
        fn partition_invariant_on_fuzzed_expressions(words in prop::collection::vec("[a-z]{1,8}(-[a-z]{1,4})?", 1..12)) {
            let lex = lex();
            let expr = words.join(" ");
            let d = decouple(&expr, &lex).unwrap();
            prop_assert_eq!(d.original.len(), d.assignment.len());
            let mut rebuilt: Vec<&str> = Vec::new();
            let mut si = 0usize;
            let mut mi = 0usize;
            let stat = d.static_stream();
            let mot = d.motion_stream();
            for (tok, &a) in d.original.iter().zip(&d.assignment) {
                match a {
                    Assignment::Static => { prop_assert_eq!(stat[si], tok.as_str()); si += 1; }
                    Assignment::Motion => { prop_assert_eq!(mot[mi], tok.as_str()); mi += 1; }
                    Assignment::DroppedFunction => {}
                }
                rebuilt.push(tok);
            }
            prop_assert_eq!(si, stat.len());
            prop_assert_eq!(mi, mot.len());
            prop_assert_eq!(rebuilt.len(), d.original.len());
        }

        #[test]
        fn deterministic(words in prop::collection::vec("[a-z]{1,8}", 1..10)) {
            let lex = lex();
            let expr = words.join(" ");
            let a = decouple(&expr, &lex).unwrap();
            let b = decouple(&expr, &lex).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
