//! Melody ingestion and the syllable-structure token algebra.
//!
//! A melody line is a run of notes and rests with beat durations. Contiguous
//! note runs — broken by a rest or by a phrase-ending long note — form
//! *music segments*, and each line maps to one token per note: `S` marks the
//! sentence start, `B`/`M`/`E` the beginning, middle and end of a segment.
//! One Chinese character carries one syllable, so the token string is
//! exactly the character budget of the lyric line.
//!
//! Canonical tagging convention:
//!
//! * position 0 is always `S` (it absorbs the first segment's `B`);
//! * a multi-note segment ends with `E`, with `M` filling the interior;
//! * a single-note segment after position 0 is a bare `E`, so segment ends
//!   are always recoverable by scanning for `E`.
//!
//! Under this convention a single-note *first* segment is a bare `S`, which
//! makes `[1, 1, …]` and `[2, …]` collide on the same token string. Token
//! strings therefore decode to the *canonical* segmentation (the `[2, …]`
//! reading), and [`boundaries_from_tokens`] inverts [`tokens_from_segments`]
//! exactly on every segmentation that is not of the colliding form.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use core::fmt;

use num_rational::Ratio;

use crate::{Error, Result};

// ── Beat durations ───────────────────────────────────────────────────

/// Exact beat duration (a positive rational with a finite decimal form).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Beats(Ratio<u64>);

impl Beats {
    /// Build from a reduced fraction; the denominator may only contain the
    /// factors 2 and 5 so the duration prints back as a finite decimal.
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 {
            return Err(Error::contract("beat denominator must be non-zero"));
        }
        if num == 0 {
            return Err(Error::contract("beat duration must be positive"));
        }
        let r = Ratio::new(num, den);
        let mut d = *r.denom();
        for f in [2u64, 5] {
            while d % f == 0 {
                d /= f;
            }
        }
        if d != 1 {
            return Err(Error::contract(format!(
                "beat duration {num}/{den} has no finite decimal form"
            )));
        }
        Ok(Beats(r))
    }

    pub fn from_int(beats: u64) -> Self {
        Beats(Ratio::from_integer(beats))
    }

    /// Parse a positive decimal such as `1`, `0.5` or `2.25`.
    pub fn parse(text: &str) -> core::result::Result<Self, String> {
        let (int_part, frac_part) = match text.split_once('.') {
            Some((i, f)) => (i, f),
            None => (text, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err("empty duration".into());
        }
        if !int_part.chars().all(|c| c.is_ascii_digit())
            || !frac_part.chars().all(|c| c.is_ascii_digit())
            || (int_part.is_empty() && frac_part.is_empty())
        {
            return Err(format!("malformed duration `{text}`"));
        }
        if int_part.len() + frac_part.len() > 12 {
            return Err(format!("duration `{text}` has too many digits"));
        }
        let digits: u64 = format!("{int_part}{frac_part}")
            .parse()
            .map_err(|_| format!("malformed duration `{text}`"))?;
        if digits == 0 {
            return Err(format!("duration `{text}` must be positive"));
        }
        let den = 10u64.pow(frac_part.len() as u32);
        Ok(Beats(Ratio::new(digits, den)))
    }

    pub fn as_f64(&self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }
}

impl fmt::Display for Beats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (n, d) = (*self.0.numer(), *self.0.denom());
        // d = 2^a·5^b by construction; scale to a power of ten
        let mut k = 0u32;
        let mut scale = 1u64;
        while d * scale % 10u64.pow(k) != 0 || (d * scale) != 10u64.pow(k) {
            if 10u64.pow(k) % d == 0 {
                scale = 10u64.pow(k) / d;
                break;
            }
            k += 1;
        }
        let digits = n * scale;
        if k == 0 {
            return write!(f, "{digits}");
        }
        let int = digits / 10u64.pow(k);
        let frac = digits % 10u64.pow(k);
        let frac_str = format!("{frac:0width$}", width = k as usize);
        let trimmed = frac_str.trim_end_matches('0');
        if trimmed.is_empty() {
            write!(f, "{int}")
        } else {
            write!(f, "{int}.{trimmed}")
        }
    }
}

// ── Score types ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Note,
    Rest,
}

/// One melody event. Pitch is preserved when a caller supplies it but plays
/// no role here: structure tokens depend only on rhythm.
#[derive(Debug, Clone, PartialEq)]
pub struct MelodyEvent {
    pub kind: EventKind,
    pub duration: Beats,
    pub pitch: Option<i32>,
}

impl MelodyEvent {
    pub fn note(duration: Beats) -> Self {
        MelodyEvent {
            kind: EventKind::Note,
            duration,
            pitch: None,
        }
    }

    pub fn rest(duration: Beats) -> Self {
        MelodyEvent {
            kind: EventKind::Rest,
            duration,
            pitch: None,
        }
    }

    pub fn is_note(&self) -> bool {
        self.kind == EventKind::Note
    }
}

/// An ordered score: one event line per lyric sentence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MelodyScore {
    pub lines: Vec<Vec<MelodyEvent>>,
}

/// A maximal run of notes sung as one word group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    note_count: usize,
}

impl Segment {
    pub fn new(note_count: usize) -> Result<Self> {
        if note_count == 0 {
            return Err(Error::contract("segment must contain at least one note"));
        }
        Ok(Segment { note_count })
    }

    pub fn note_count(&self) -> usize {
        self.note_count
    }
}

// ── Structure tokens ─────────────────────────────────────────────────

/// Embedding row reserved for padded structure positions.
pub const STRUCT_PAD_INDEX: usize = 4;
/// Embedding row reserved for an end-of-sequence structure marker.
pub const STRUCT_EOS_INDEX: usize = 5;
/// Structure embedding table height: S, B, M, E plus PAD and EOS.
pub const STRUCT_VOCAB_SIZE: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StructTok {
    S,
    B,
    M,
    E,
}

impl StructTok {
    pub fn as_char(self) -> char {
        match self {
            StructTok::S => 'S',
            StructTok::B => 'B',
            StructTok::M => 'M',
            StructTok::E => 'E',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'S' => Some(StructTok::S),
            'B' => Some(StructTok::B),
            'M' => Some(StructTok::M),
            'E' => Some(StructTok::E),
            _ => None,
        }
    }

    /// Row in the structure embedding table.
    pub fn embedding_index(self) -> usize {
        match self {
            StructTok::S => 0,
            StructTok::B => 1,
            StructTok::M => 2,
            StructTok::E => 3,
        }
    }
}

/// Per-syllable token string for one lyric line.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StructureTokenSeq {
    tokens: Vec<StructTok>,
}

impl StructureTokenSeq {
    /// Validate and wrap an explicit token sequence.
    pub fn from_tokens(tokens: Vec<StructTok>) -> Result<Self> {
        let seq = StructureTokenSeq { tokens };
        boundaries_from_tokens(&seq)?;
        Ok(seq)
    }

    /// Parse a compact string such as `SEBEBEBE`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = Vec::with_capacity(text.len());
        for (i, c) in text.chars().enumerate() {
            let tok = StructTok::from_char(c).ok_or(Error::Parse {
                line: 1,
                col: i + 1,
                msg: format!("invalid structure token `{c}`"),
            })?;
            tokens.push(tok);
        }
        StructureTokenSeq::from_tokens(tokens)
    }

    /// The structure of a sentence treated as one segment of `n` syllables.
    pub fn single_segment(n: usize) -> Result<Self> {
        tokens_from_segments(&[Segment::new(n)?])
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[StructTok] {
        &self.tokens
    }
}

impl fmt::Display for StructureTokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tokens {
            write!(f, "{}", t.as_char())?;
        }
        Ok(())
    }
}

// ── Parsing and serialization ────────────────────────────────────────

/// Parse the line-oriented melody format: one lyric line per text line,
/// events split on whitespace, `N<d>` a note of `d` beats, `R<d>` a rest,
/// `|` ignored, `#` starting a comment. Blank lines are skipped.
pub fn parse_melody(text: &str) -> Result<MelodyScore> {
    let mut lines = Vec::new();
    for (line_no, raw) in text.lines().enumerate() {
        let line_no = line_no + 1;
        let visible = match raw.find('#') {
            Some(idx) => &raw[..idx],
            None => raw,
        };
        let mut events = Vec::new();
        for (col, token) in tokenize(visible) {
            if token == "|" {
                continue;
            }
            let (kind, dur_text) = match token.chars().next() {
                Some('N') => (EventKind::Note, &token[1..]),
                Some('R') => (EventKind::Rest, &token[1..]),
                _ => {
                    return Err(Error::Parse {
                        line: line_no,
                        col,
                        msg: format!("unknown event `{token}` (expected N<beats> or R<beats>)"),
                    })
                }
            };
            let duration = Beats::parse(dur_text).map_err(|msg| Error::Parse {
                line: line_no,
                col,
                msg,
            })?;
            events.push(MelodyEvent {
                kind,
                duration,
                pitch: None,
            });
        }
        if events.is_empty() {
            continue;
        }
        if !events.iter().any(MelodyEvent::is_note) {
            return Err(Error::Parse {
                line: line_no,
                col: 1,
                msg: "melody line contains no notes".into(),
            });
        }
        lines.push(events);
    }
    if lines.is_empty() {
        return Err(Error::Parse {
            line: 1,
            col: 1,
            msg: "no melody lines in input".into(),
        });
    }
    Ok(MelodyScore { lines })
}

/// Whitespace-separated tokens with their 1-based character columns.
fn tokenize(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start: Option<(usize, usize)> = None; // (char col, byte idx)
    let mut col = 0;
    for (byte, c) in line.char_indices() {
        col += 1;
        if c.is_whitespace() {
            if let Some((c0, b0)) = start.take() {
                out.push((c0, &line[b0..byte]));
            }
        } else if start.is_none() {
            start = Some((col, byte));
        }
    }
    if let Some((c0, b0)) = start {
        out.push((c0, &line[b0..]));
    }
    out
}

/// Inverse of [`parse_melody`] for programmatic scores (pitch is dropped).
pub fn serialize_melody(score: &MelodyScore) -> String {
    let mut out = String::new();
    for (i, line) in score.lines.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (j, e) in line.iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            let tag = match e.kind {
                EventKind::Note => 'N',
                EventKind::Rest => 'R',
            };
            out.push(tag);
            out.push_str(&format!("{}", e.duration));
        }
    }
    out.push('\n');
    out
}

// ── Segment derivation and the token algebra ─────────────────────────

/// Phrase-ending long-note threshold when none is configured.
pub fn default_long_note_threshold() -> Beats {
    Beats::from_int(2)
}

/// Split a line's notes into segments: a boundary falls after a note that
/// is immediately followed by a rest, and after any note at least
/// `long_note_threshold` beats long. Rests belong to no segment.
pub fn derive_segments(line: &[MelodyEvent], long_note_threshold: Beats) -> Result<Vec<Segment>> {
    if !line.iter().any(MelodyEvent::is_note) {
        return Err(Error::contract("cannot segment a line with no notes"));
    }
    let mut segments = Vec::new();
    let mut run = 0usize;
    for event in line {
        match event.kind {
            EventKind::Note => {
                run += 1;
                if event.duration >= long_note_threshold {
                    segments.push(Segment { note_count: run });
                    run = 0;
                }
            }
            EventKind::Rest => {
                if run > 0 {
                    segments.push(Segment { note_count: run });
                    run = 0;
                }
            }
        }
    }
    if run > 0 {
        segments.push(Segment { note_count: run });
    }
    Ok(segments)
}

/// Number of sung syllables in a line (= its note count).
pub fn syllable_count(line: &[MelodyEvent]) -> usize {
    line.iter().filter(|e| e.is_note()).count()
}

/// Tag each note position: `S` at position 0, then `B`/`M`/`E` per segment,
/// with single-note segments after position 0 collapsing to `E`.
pub fn tokens_from_segments(segments: &[Segment]) -> Result<StructureTokenSeq> {
    if segments.is_empty() {
        return Err(Error::contract("tokens_from_segments on no segments"));
    }
    let mut tokens = Vec::new();
    for (idx, seg) in segments.iter().enumerate() {
        let n = seg.note_count;
        if idx == 0 {
            tokens.push(StructTok::S);
            if n >= 2 {
                tokens.extend(core::iter::repeat(StructTok::M).take(n - 2));
                tokens.push(StructTok::E);
            }
        } else if n == 1 {
            tokens.push(StructTok::E);
        } else {
            tokens.push(StructTok::B);
            tokens.extend(core::iter::repeat(StructTok::M).take(n - 2));
            tokens.push(StructTok::E);
        }
    }
    Ok(StructureTokenSeq { tokens })
}

/// Recover the canonical segmentation from a token sequence, rejecting
/// strings that no segmentation produces.
pub fn boundaries_from_tokens(tokens: &StructureTokenSeq) -> Result<Vec<Segment>> {
    let toks = &tokens.tokens;
    let parse_err = |pos: usize, msg: &str| Error::Parse {
        line: 1,
        col: pos + 1,
        msg: msg.into(),
    };
    if toks.is_empty() {
        return Err(parse_err(0, "empty token sequence"));
    }
    if toks[0] != StructTok::S {
        return Err(parse_err(0, "token sequence must start with S"));
    }
    if toks[1..].contains(&StructTok::S) {
        let pos = 1 + toks[1..]
            .iter()
            .position(|&t| t == StructTok::S)
            .expect("just found");
        return Err(parse_err(pos, "S may only appear at position 0"));
    }

    let mut segments = Vec::new();
    let mut i = 1;
    // first segment: bare S, or S M* E
    match toks.get(i) {
        Some(StructTok::M) | Some(StructTok::E) => {
            let mut n = 1;
            while toks.get(i) == Some(&StructTok::M) {
                n += 1;
                i += 1;
            }
            match toks.get(i) {
                Some(StructTok::E) => {
                    i += 1;
                    segments.push(Segment { note_count: n + 1 });
                }
                _ => return Err(parse_err(i, "M run not closed by E")),
            }
        }
        _ => segments.push(Segment { note_count: 1 }),
    }
    // remaining segments: B M* E, or a bare E
    while i < toks.len() {
        match toks[i] {
            StructTok::E => {
                segments.push(Segment { note_count: 1 });
                i += 1;
            }
            StructTok::B => {
                let mut n = 1;
                i += 1;
                while toks.get(i) == Some(&StructTok::M) {
                    n += 1;
                    i += 1;
                }
                match toks.get(i) {
                    Some(StructTok::E) => {
                        i += 1;
                        segments.push(Segment { note_count: n + 1 });
                    }
                    _ => return Err(parse_err(i, "segment opened by B is not closed by E")),
                }
            }
            StructTok::M => return Err(parse_err(i, "M without an enclosing B…E segment")),
            StructTok::S => unreachable!("checked above"),
        }
    }
    Ok(segments)
}
