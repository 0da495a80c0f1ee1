//! Two-step language augmentation of caption pairs.
//!
//! Step 1 asks a rewriter for a question that targets the differing detail.
//! Step 2 asks it to revise that question and both captions. Replies to step 2
//! must follow the three-line format of the prompt exactly; anything else, or
//! a revision that loses the contrast, falls back to the raw captions.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::rewriter::{Provenance, RewriteError, RewriteRequest, Rewriter};
use crate::synth::Corpus;

pub const CAPTIONS_FORMAT: &str = "mvc-captions";
pub const AUGMENTED_FORMAT: &str = "mvc-augmented";
pub const FORMAT_VERSION: u32 = 1;

const INSTRUCTION_PREFIX: &str = "Revised Instruction:";
const CHOSEN_PREFIX: &str = "Revised Chosen Response:";
const REJECTED_PREFIX: &str = "Revised Rejected Response:";

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid captions: {0}")]
    Input(String),
    #[error("rewriter failed after {attempts} attempt(s): {source}")]
    Rewriter {
        attempts: u32,
        #[source]
        source: RewriteError,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("augmentation I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3 }
    }
}

/// Lowercased alphanumeric words.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Words of `a` and of `b` that fall outside their longest common subsequence.
pub fn contrast_tokens(a: &str, b: &str) -> (Vec<String>, Vec<String>) {
    let (a, b) = (words(a), words(b));
    let (n, m) = (a.len(), b.len());
    let mut lcs = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i][j] = if a[i] == b[j] {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }
    let (mut only_a, mut only_b) = (Vec::new(), Vec::new());
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] {
            i += 1;
            j += 1;
        } else if lcs[i + 1][j] >= lcs[i][j + 1] {
            only_a.push(a[i].clone());
            i += 1;
        } else {
            only_b.push(b[j].clone());
            j += 1;
        }
    }
    only_a.extend(a[i..].iter().cloned());
    only_b.extend(b[j..].iter().cloned());
    (only_a, only_b)
}

const COLOR_WORDS: &[&str] = &[
    "red", "blue", "green", "yellow", "black", "white", "brown", "blonde", "gray", "grey", "pink",
    "purple", "orange", "silver", "golden", "dark", "light",
];
const NUMBER_WORDS: &[&str] = &[
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "single",
    "several", "many", "few",
];
const POSITION_WORDS: &[&str] = &[
    "left", "right", "above", "below", "under", "over", "behind", "front", "top", "bottom",
    "inside", "outside", "beside", "near", "far",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Aspect {
    Color,
    Number,
    Position,
    Identity,
}

fn aspect_of(word: &str) -> Aspect {
    if COLOR_WORDS.contains(&word) {
        Aspect::Color
    } else if NUMBER_WORDS.contains(&word) || word.chars().all(|c| c.is_ascii_digit()) {
        Aspect::Number
    } else if POSITION_WORDS.contains(&word) {
        Aspect::Position
    } else {
        Aspect::Identity
    }
}

const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "is", "are", "of", "and", "in", "on", "to", "with", "wearing", "has",
];

/// Hyphen-aware words, so "blonde-haired" keeps its parts together.
fn raw_words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '_'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn singular(word: &str) -> String {
    match word.strip_suffix('s') {
        Some(stem) if stem.len() > 2 && !stem.ends_with('s') => stem.to_string(),
        _ => word.to_string(),
    }
}

/// First content noun after the raw word containing `diff`, plus any
/// "-ed" compound that `diff` is part of ("blonde-haired" gives "hair").
fn focus(caption: &str, diff: &str) -> (Option<String>, Option<String>) {
    let raw = raw_words(caption);
    let Some(pos) = raw
        .iter()
        .position(|w| w.split(['-', '_']).any(|p| p == diff))
    else {
        return (None, None);
    };
    let compound = raw[pos]
        .split('-')
        .skip_while(|p| *p != diff)
        .nth(1)
        .and_then(|p| p.strip_suffix("ed"))
        .map(str::to_string);
    let noun = raw[pos + 1..]
        .iter()
        .filter(|w| !STOP_WORDS.contains(&w.as_str()))
        .find(|w| aspect_of(w) == Aspect::Identity && !w.contains('_'))
        .cloned();
    (compound, noun)
}

/// Last content noun after the differing word, for "relative to the X".
fn landmark(caption: &str, diff: &str) -> Option<String> {
    let raw = raw_words(caption);
    let pos = raw
        .iter()
        .position(|w| w.split(['-', '_']).any(|p| p == diff))?;
    raw[pos + 1..]
        .iter()
        .rev()
        .find(|w| !STOP_WORDS.contains(&w.as_str()) && aspect_of(w) == Aspect::Identity)
        .cloned()
}

fn subject_before(caption: &str, diff: &str) -> Option<String> {
    let raw = raw_words(caption);
    let pos = raw
        .iter()
        .position(|w| w.split(['-', '_']).any(|p| p == diff))?;
    raw[..pos]
        .iter()
        .rev()
        .find(|w| !STOP_WORDS.contains(&w.as_str()) && aspect_of(w) == Aspect::Identity)
        .cloned()
}

/// Deterministic slot-filled question about the first differing detail.
pub fn template_question(caption_w: &str, caption_l: &str) -> String {
    let (only_w, only_l) = contrast_tokens(caption_w, caption_l);
    let Some(diff) = only_w.first().or(only_l.first()).cloned() else {
        return "What do you see in the image?".into();
    };
    let source = if only_w.is_empty() { caption_l } else { caption_w };
    let (compound, noun) = focus(source, &diff);
    match aspect_of(&diff) {
        Aspect::Color => match (compound, noun) {
            (Some(part), Some(noun)) => {
                format!("What can you tell me about the {part} color of the {noun} in the image?")
            }
            (None, Some(noun)) => format!("What color is the {noun} in the image?"),
            _ => "What colors stand out in the image?".into(),
        },
        Aspect::Number => match noun {
            Some(noun) => format!("How many {noun}s can you count in the image?", noun = singular(&noun)),
            None => "How many objects are there in the image?".into(),
        },
        Aspect::Position => {
            let subject = subject_before(source, &diff);
            let anchor = landmark(source, &diff);
            match (subject, anchor) {
                (Some(s), Some(a)) => {
                    format!("Where is the {s} relative to the {a} in the image?")
                }
                (Some(s), None) => format!("Where is the {s} located in the image?"),
                _ => "How are the objects arranged in the image?".into(),
            }
        }
        Aspect::Identity => match landmark(source, &diff) {
            Some(a) if a != diff => format!("Which object appears next to the {a} in the image?"),
            _ => "What is the main object shown in the image?".into(),
        },
    }
}

fn sentence(text: &str) -> String {
    let t = text.trim().replace('_', " ");
    let mut chars = t.chars();
    let mut out = match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect::<String>(),
        None => String::new(),
    };
    if !out.ends_with(['.', '!', '?']) {
        out.push('.');
    }
    out
}

/// The reply a faithful rewriter would give: captions as sentences, wording kept.
pub fn template_step2_reply(instruction: &str, caption_w: &str, caption_l: &str) -> String {
    format!(
        "{INSTRUCTION_PREFIX} {}\n{CHOSEN_PREFIX} {}\n{REJECTED_PREFIX} {}",
        instruction.trim(),
        sentence(caption_w),
        sentence(caption_l)
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Revision {
    pub instruction: String,
    pub chosen: String,
    pub rejected: String,
}

fn unquote(s: &str) -> &str {
    let s = s.trim();
    s.strip_prefix('"')
        .and_then(|r| r.strip_suffix('"'))
        .unwrap_or(s)
        .trim()
}

/// Parses exactly three non-empty lines in the step-2 reply format.
pub fn parse_step2_reply(reply: &str) -> Result<Revision, String> {
    let lines: Vec<&str> = reply.trim().lines().collect();
    if lines.len() != 3 {
        return Err(format!("expected 3 lines, got {}", lines.len()));
    }
    let field = |line: &str, prefix: &str| -> Result<String, String> {
        let value = line
            .trim_end()
            .strip_prefix(prefix)
            .ok_or_else(|| format!("line does not start with {prefix:?}"))?;
        let value = unquote(value);
        if value.is_empty() {
            return Err(format!("{prefix:?} has no text"));
        }
        Ok(value.to_string())
    };
    Ok(Revision {
        instruction: field(lines[0], INSTRUCTION_PREFIX)?,
        chosen: field(lines[1], CHOSEN_PREFIX)?,
        rejected: field(lines[2], REJECTED_PREFIX)?,
    })
}

/// Contrast words of each caption must appear in its own revision and, unless
/// shared by both captions, not in the other one.
pub fn contrast_preserved(caption_w: &str, caption_l: &str, chosen: &str, rejected: &str) -> bool {
    if words(chosen) == words(rejected) {
        return false;
    }
    let (only_w, only_l) = contrast_tokens(caption_w, caption_l);
    let rw: HashSet<String> = words(chosen).into_iter().collect();
    let rl: HashSet<String> = words(rejected).into_iter().collect();
    let cw: HashSet<String> = words(caption_w).into_iter().collect();
    let cl: HashSet<String> = words(caption_l).into_iter().collect();
    only_w.iter().all(|t| rw.contains(t) && (cl.contains(t) || !rl.contains(t)))
        && only_l.iter().all(|t| rl.contains(t) && (cw.contains(t) || !rw.contains(t)))
}

fn check_captions(caption_w: &str, caption_l: &str) -> Result<(), AugmentError> {
    if caption_w.trim().is_empty() || caption_l.trim().is_empty() {
        return Err(AugmentError::Input("captions must be non-empty".into()));
    }
    if words(caption_w) == words(caption_l) {
        return Err(AugmentError::Input("captions are identical".into()));
    }
    Ok(())
}

fn call_with_retry(
    rewriter: &dyn Rewriter,
    base: &RewriteRequest,
    policy: RetryPolicy,
    mut accept: impl FnMut(&str) -> bool,
    replies: &mut Vec<String>,
) -> Result<Option<String>, AugmentError> {
    let mut last = None;
    for attempt in 1..=policy.max_attempts.max(1) {
        let mut req = base.clone();
        req.attempt = attempt;
        match rewriter.rewrite(&req) {
            Ok(reply) => {
                log::info!("rewriter reply (attempt {attempt}): {reply}");
                replies.push(reply.clone());
                if accept(&reply) {
                    return Ok(Some(reply));
                }
            }
            Err(e) if e.is_retryable() => {
                log::warn!("rewriter attempt {attempt} failed: {e}");
                last = Some(e);
            }
            Err(e) => return Err(AugmentError::Rewriter { attempts: attempt, source: e }),
        }
    }
    match last {
        Some(source) if replies.is_empty() => Err(AugmentError::Rewriter {
            attempts: policy.max_attempts.max(1),
            source,
        }),
        _ => Ok(None),
    }
}

/// Step 1: a question about the differing detail.
pub fn augment_step1(
    caption_w: &str,
    caption_l: &str,
    rewriter: &dyn Rewriter,
    policy: RetryPolicy,
) -> Result<String, AugmentError> {
    step1_logged(caption_w, caption_l, rewriter, policy, &mut Vec::new())
}

fn step1_logged(
    caption_w: &str,
    caption_l: &str,
    rewriter: &dyn Rewriter,
    policy: RetryPolicy,
    replies: &mut Vec<String>,
) -> Result<String, AugmentError> {
    check_captions(caption_w, caption_l)?;
    let req = RewriteRequest::step1(caption_w, caption_l);
    let reply = call_with_retry(rewriter, &req, policy, |r| !unquote(r).is_empty(), replies)?;
    reply
        .map(|r| unquote(&r).to_string())
        .ok_or_else(|| AugmentError::Rewriter {
            attempts: policy.max_attempts.max(1),
            source: RewriteError::Transport("empty step-1 reply".into()),
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub pair_id: String,
    pub caption_w: String,
    pub caption_l: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fallback {
    Malformed,
    ContrastLost,
    RewriterFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedRecord {
    pub pair_id: String,
    pub query: String,
    pub response_w: String,
    pub response_l: String,
    pub provenance: Provenance,
    pub caption_w: String,
    pub caption_l: String,
    /// Every rewriter reply received for this pair, verbatim.
    pub replies: Vec<String>,
    pub fallback: Option<Fallback>,
}

fn fallback_record(
    pair: &CaptionPair,
    replies: Vec<String>,
    reason: Fallback,
) -> AugmentedRecord {
    AugmentedRecord {
        pair_id: pair.pair_id.clone(),
        query: template_question(&pair.caption_w, &pair.caption_l),
        response_w: pair.caption_w.clone(),
        response_l: pair.caption_l.clone(),
        provenance: Provenance::Template,
        caption_w: pair.caption_w.clone(),
        caption_l: pair.caption_l.clone(),
        replies,
        fallback: Some(reason),
    }
}

/// Step 2: revise query and captions; falls back to the raw captions when the
/// reply stays malformed or the contrast does not survive.
pub fn augment_step2(
    pair: &CaptionPair,
    query: &str,
    rewriter: &dyn Rewriter,
    policy: RetryPolicy,
) -> Result<AugmentedRecord, AugmentError> {
    check_captions(&pair.caption_w, &pair.caption_l)?;
    let req = RewriteRequest::step2(query, &pair.caption_w, &pair.caption_l);
    let mut replies = Vec::new();
    let mut saw_wellformed = false;
    let accepted = call_with_retry(
        rewriter,
        &req,
        policy,
        |reply| match parse_step2_reply(reply) {
            Ok(rev) => {
                saw_wellformed = true;
                contrast_preserved(&pair.caption_w, &pair.caption_l, &rev.chosen, &rev.rejected)
            }
            Err(e) => {
                log::warn!("{}: malformed step-2 reply: {e}", pair.pair_id);
                false
            }
        },
        &mut replies,
    );
    let reply = match accepted {
        Ok(Some(reply)) => reply,
        Ok(None) if saw_wellformed => {
            return Ok(fallback_record(pair, replies, Fallback::ContrastLost))
        }
        Ok(None) => return Ok(fallback_record(pair, replies, Fallback::Malformed)),
        Err(AugmentError::Rewriter { .. }) => {
            return Ok(fallback_record(pair, replies, Fallback::RewriterFailed))
        }
        Err(e) => return Err(e),
    };
    let rev = parse_step2_reply(&reply).expect("accepted replies parse");
    Ok(AugmentedRecord {
        pair_id: pair.pair_id.clone(),
        query: rev.instruction,
        response_w: rev.chosen,
        response_l: rev.rejected,
        provenance: rewriter.provenance(),
        caption_w: pair.caption_w.clone(),
        caption_l: pair.caption_l.clone(),
        replies,
        fallback: None,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub total: usize,
    pub rewritten: usize,
    pub fallback_malformed: usize,
    pub fallback_contrast_lost: usize,
    pub fallback_rewriter_failed: usize,
}

/// Both steps over every pair; output sorted by pair id.
pub fn augment_all(
    pairs: &[CaptionPair],
    rewriter: &dyn Rewriter,
    policy: RetryPolicy,
) -> Result<(Vec<AugmentedRecord>, AugmentReport), AugmentError> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(pairs.len());
    let mut report = AugmentReport {
        total: pairs.len(),
        ..Default::default()
    };
    for pair in pairs {
        if !seen.insert(pair.pair_id.as_str()) {
            return Err(AugmentError::Input(format!("duplicate pair id {}", pair.pair_id)));
        }
        let mut step1_replies = Vec::new();
        let rec = match step1_logged(&pair.caption_w, &pair.caption_l, rewriter, policy, &mut step1_replies) {
            Ok(query) => {
                let mut rec = augment_step2(pair, &query, rewriter, policy)?;
                step1_replies.append(&mut rec.replies);
                rec.replies = step1_replies;
                rec
            }
            Err(AugmentError::Rewriter { attempts, source }) => {
                log::warn!("{}: step 1 failed after {attempts} attempt(s): {source}", pair.pair_id);
                fallback_record(pair, step1_replies, Fallback::RewriterFailed)
            }
            Err(e) => return Err(e),
        };
        match rec.fallback {
            None => report.rewritten += 1,
            Some(Fallback::Malformed) => report.fallback_malformed += 1,
            Some(Fallback::ContrastLost) => report.fallback_contrast_lost += 1,
            Some(Fallback::RewriterFailed) => report.fallback_rewriter_failed += 1,
        }
        out.push(rec);
    }
    out.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    Ok((out, report))
}

/// Stable id for the `index`-th pair of a generated corpus.
pub fn corpus_pair_id(index: usize) -> String {
    format!("pair-{index:06}")
}

pub fn captions_from_corpus(corpus: &Corpus) -> Vec<CaptionPair> {
    corpus
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (caption_w, caption_l) = p.captions();
            CaptionPair {
                pair_id: corpus_pair_id(i),
                caption_w,
                caption_l,
            }
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    count: usize,
}

fn write_with_header<T: Serialize>(format: &str, items: &[T], mut w: impl Write) -> std::io::Result<()> {
    let header = Header {
        format: format.into(),
        version: FORMAT_VERSION,
        count: items.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn read_with_header<T: for<'de> Deserialize<'de>>(
    format: &str,
    r: impl BufRead,
) -> Result<Vec<T>, AugmentError> {
    let mut header: Option<Header> = None;
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| AugmentError::Parse {
            line: line_no,
            message,
        };
        if header.is_none() {
            let h: Header = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            if h.format != format || h.version != FORMAT_VERSION {
                return Err(err(format!(
                    "expected {format} v{FORMAT_VERSION}, found {} v{}",
                    h.format, h.version
                )));
            }
            header = Some(h);
        } else {
            out.push(serde_json::from_str(&line).map_err(|e| err(e.to_string()))?);
        }
    }
    match header {
        None => Err(AugmentError::Parse {
            line: 1,
            message: "missing header".into(),
        }),
        Some(h) if h.count != out.len() => Err(AugmentError::Parse {
            line: out.len() + 1,
            message: format!("header declares {} records, found {}", h.count, out.len()),
        }),
        Some(_) => Ok(out),
    }
}

pub fn write_captions(pairs: &[CaptionPair], w: impl Write) -> std::io::Result<()> {
    write_with_header(CAPTIONS_FORMAT, pairs, w)
}

pub fn read_captions(r: impl BufRead) -> Result<Vec<CaptionPair>, AugmentError> {
    read_with_header(CAPTIONS_FORMAT, r)
}

pub fn write_augmented(records: &[AugmentedRecord], w: impl Write) -> std::io::Result<()> {
    write_with_header(AUGMENTED_FORMAT, records, w)
}

pub fn read_augmented(r: impl BufRead) -> Result<Vec<AugmentedRecord>, AugmentError> {
    read_with_header(AUGMENTED_FORMAT, r)
}

/// Caption pairs from either a caption file or a generated corpus file.
pub fn load_caption_pairs(path: impl AsRef<Path>) -> Result<Vec<CaptionPair>, AugmentError> {
    let bytes = std::fs::read(path)?;
    let first = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
    let is_corpus = serde_json::from_slice::<Header>(first)
        .map(|h| h.format == crate::synth::CORPUS_FORMAT)
        .unwrap_or(false);
    if is_corpus {
        let corpus = Corpus::read_jsonl(bytes.as_slice()).map_err(|e| AugmentError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        Ok(captions_from_corpus(&corpus))
    } else {
        read_captions(bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mvc::rewriter::TemplateRewriter;
    use std::cell::RefCell;

    /// Replays scripted replies in order; `Err` entries become transport errors.
    struct Scripted {
        replies: RefCell<Vec<Result<String, String>>>,
    }

    impl Scripted {
        fn new(replies: &[Result<&str, &str>]) -> Self {
            Self {
                replies: RefCell::new(
                    replies
                        .iter()
                        .rev()
                        .map(|r| r.map(str::to_string).map_err(str::to_string))
                        .collect(),
                ),
            }
        }
    }

    impl Rewriter for Scripted {
        fn rewrite(&self, _req: &RewriteRequest) -> Result<String, RewriteError> {
            match self.replies.borrow_mut().pop() {
                Some(Ok(s)) => Ok(s),
                Some(Err(e)) => Err(RewriteError::Transport(e)),
                None => Err(RewriteError::Transport("script exhausted".into())),
            }
        }

        fn provenance(&self) -> Provenance {
            Provenance::ExternalLlm
        }
    }

    const HAIR_W: &str = "A blonde-haired woman wearing a white skirt, white shirt, white apron, and black shoes is sweeping the floor.";
    const HAIR_L: &str = "A black-haired woman wearing a white skirt, white shirt, white apron, and black shoes is sweeping the floor.";
    const STUNT_W: &str = "An air stunt is above a snowy mound.";
    const STUNT_L: &str = "An air stunt is below a snowy mound.";

    fn pair(w: &str, l: &str) -> CaptionPair {
        CaptionPair {
            pair_id: "p".into(),
            caption_w: w.into(),
            caption_l: l.into(),
        }
    }

    #[test]
    fn lcs_contrast() {
        assert_eq!(
            contrast_tokens(HAIR_W, HAIR_L),
            (vec!["blonde".to_string()], vec!["black".to_string()])
        );
        assert_eq!(
            contrast_tokens(STUNT_W, STUNT_L),
            (vec!["above".to_string()], vec!["below".to_string()])
        );
        let (a, b) = contrast_tokens("two red cup", "two red cup is here");
        assert!(a.is_empty());
        assert_eq!(b, vec!["is", "here"]);
    }

    #[test]
    fn template_questions() {
        let q = augment_step1(HAIR_W, HAIR_L, &TemplateRewriter, RetryPolicy::default()).unwrap();
        assert!(q.contains("hair color"), "{q}");
        assert!(q.contains("woman"), "{q}");
        assert_eq!(q, augment_step1(HAIR_W, HAIR_L, &TemplateRewriter, RetryPolicy::default()).unwrap());
        let q = template_question(STUNT_W, STUNT_L);
        assert_eq!(q, "Where is the stunt relative to the mound in the image?");
        assert_eq!(
            template_question("the two red cup is left_of the box", "the two blue cup is left_of the box"),
            "What color is the cup in the image?"
        );
        assert_eq!(
            template_question("the two red cup is left_of the box", "the three red cup is left_of the box"),
            "How many cups can you count in the image?"
        );
        assert_eq!(
            template_question("the two red cup is left_of the box", "the two red cup is right_of the box"),
            "Where is the cup relative to the box in the image?"
        );
        assert_eq!(
            template_question("the two red cup is left_of the box", "the two red dog is left_of the box"),
            "Which object appears next to the box in the image?"
        );
    }

    #[test]
    fn step1_input_errors() {
        let p = RetryPolicy::default();
        assert!(matches!(augment_step1("a", "a", &TemplateRewriter, p), Err(AugmentError::Input(_))));
        assert!(matches!(augment_step1(" ", "a", &TemplateRewriter, p), Err(AugmentError::Input(_))));
        let down = Scripted::new(&[Err("down"), Err("down"), Err("down")]);
        match augment_step1(STUNT_W, STUNT_L, &down, p) {
            Err(AugmentError::Rewriter { attempts: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        let flaky = Scripted::new(&[Err("down"), Ok("\"Where is the stunt?\"")]);
        assert_eq!(augment_step1(STUNT_W, STUNT_L, &flaky, p).unwrap(), "Where is the stunt?");
    }

    #[test]
    fn parser_is_strict() {
        let ok = "Revised Instruction: \"Q?\"\nRevised Chosen Response: \"A.\"\nRevised Rejected Response: \"B.\"";
        assert_eq!(
            parse_step2_reply(ok).unwrap(),
            Revision {
                instruction: "Q?".into(),
                chosen: "A.".into(),
                rejected: "B.".into()
            }
        );
        assert!(parse_step2_reply("Revised Instruction: Q?\nRevised Chosen Response: A.").is_err());
        assert!(parse_step2_reply(&format!("Sure!\n{ok}")).is_err());
        assert!(parse_step2_reply("Revised Instruction: Q?\nRevised Chosen Response:\nRevised Rejected Response: B.").is_err());
        assert!(parse_step2_reply("Revised Instruction: Q?\nChosen Response: A.\nRevised Rejected Response: B.").is_err());
        assert!(parse_step2_reply("Revised Instruction: Q?\n\nRevised Chosen Response: A.\nRevised Rejected Response: B.").is_err());
    }

    #[test]
    fn hair_color_example_through_external() {
        let reply = "Revised Instruction: \"Describe the woman's hair color and her attire while she's sweeping the floor?\"\n\
Revised Chosen Response: \"The woman sweeping the floor has blonde hair and is wearing a white skirt, white shirt, white apron, and black shoes.\"\n\
Revised Rejected Response: \"The woman sweeping the floor has black hair and is wearing a white skirt, white shirt, white apron, and black shoes.\"";
        let ext = Scripted::new(&[
            Ok("What can you tell me about the hair color of the woman who is sweeping the floor?"),
            Ok(reply),
        ]);
        let (recs, report) = augment_all(&[pair(HAIR_W, HAIR_L)], &ext, RetryPolicy::default()).unwrap();
        assert_eq!(report.rewritten, 1);
        let r = &recs[0];
        assert_eq!(r.provenance, Provenance::ExternalLlm);
        assert!(r.response_w.contains("blonde hair"));
        assert!(r.response_l.contains("black hair"));
        assert_eq!(r.replies.len(), 2);
        assert_eq!(r.replies[1], reply);
    }

    #[test]
    fn above_below_example_keeps_contrast() {
        let reply = "Revised Instruction: \"What do you notice about the position of the air stunt in relation to the snowy mound in the image?\"\n\
Revised Chosen Response: \"The air stunt is positioned above the snowy mound.\"\n\
Revised Rejected Response: \"The air stunt is located below the snowy mound.\"";
        let ext = Scripted::new(&[Ok(reply)]);
        let rec = augment_step2(
            &pair(STUNT_W, STUNT_L),
            "Where is the air stunt relative to the snowy mound in the image?",
            &ext,
            RetryPolicy::default(),
        )
        .unwrap();
        assert_eq!(rec.fallback, None);
        assert!(words(&rec.response_w).contains(&"above".to_string()));
        assert!(words(&rec.response_l).contains(&"below".to_string()));
    }

    #[test]
    fn fallbacks_are_counted() {
        let p = RetryPolicy { max_attempts: 2 };
        let missing = "Revised Instruction: Q?\nRevised Chosen Response: above.";
        let ext = Scripted::new(&[Ok("Q?"), Ok(missing), Ok(missing)]);
        let (recs, report) = augment_all(&[pair(STUNT_W, STUNT_L)], &ext, p).unwrap();
        assert_eq!(report.fallback_malformed, 1);
        assert_eq!(recs[0].provenance, Provenance::Template);
        assert_eq!(recs[0].response_w, STUNT_W);
        assert_eq!(recs[0].replies.len(), 3);

        let inverted = "Revised Instruction: Q?\nRevised Chosen Response: It is below.\nRevised Rejected Response: It is above.";
        let ext = Scripted::new(&[Ok("Q?"), Ok(inverted), Ok(inverted)]);
        let (recs, report) = augment_all(&[pair(STUNT_W, STUNT_L)], &ext, p).unwrap();
        assert_eq!(report.fallback_contrast_lost, 1);
        assert_eq!(recs[0].response_l, STUNT_L);

        let ext = Scripted::new(&[Err("x"), Err("x")]);
        let (_, report) = augment_all(&[pair(STUNT_W, STUNT_L)], &ext, p).unwrap();
        assert_eq!(report.fallback_rewriter_failed, 1);
    }

    #[test]
    fn template_pipeline_on_synthetic_corpus() {
        let corpus = crate::synth::gen_corpus(3, 200, &crate::synth::TypeMix::uniform(), false).unwrap();
        let pairs = captions_from_corpus(&corpus);
        let (recs, report) = augment_all(&pairs, &TemplateRewriter, RetryPolicy::default()).unwrap();
        assert_eq!(report.rewritten, 200);
        for r in &recs {
            assert!(contrast_preserved(&r.caption_w, &r.caption_l, &r.response_w, &r.response_l), "{r:?}");
            assert_eq!(r.provenance, Provenance::Template);
        }
        let mut buf = Vec::new();
        write_augmented(&recs, &mut buf).unwrap();
        assert_eq!(read_augmented(buf.as_slice()).unwrap(), recs);
        let mut again = Vec::new();
        let (recs2, _) = augment_all(&pairs, &TemplateRewriter, RetryPolicy::default()).unwrap();
        write_augmented(&recs2, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn caption_file_roundtrip_and_errors() {
        let pairs = vec![pair(STUNT_W, STUNT_L)];
        let mut buf = Vec::new();
        write_captions(&pairs, &mut buf).unwrap();
        assert_eq!(read_captions(buf.as_slice()).unwrap(), pairs);
        assert!(read_augmented(buf.as_slice()).is_err());
        let err = read_captions(&b"{\"format\":\"mvc-captions\",\"version\":1,\"count\":1}\nnope\n"[..]).unwrap_err();
        assert!(matches!(err, AugmentError::Parse { line: 2, .. }), "{err}");
        assert!(read_captions(&b""[..]).is_err());
    }
}
