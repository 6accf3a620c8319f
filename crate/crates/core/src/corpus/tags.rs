//! Span codecs: IOBC for (possibly discontinuous) targets and IOB2 for
//! argument spans.

use std::fmt;

use crate::error::{Error, Result};

/// Target-identification labels. `C` continues a target after a gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TargetTag {
    O,
    B,
    I,
    C,
}

impl TargetTag {
    pub const ALL: [TargetTag; 4] = [TargetTag::O, TargetTag::B, TargetTag::I, TargetTag::C];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetTag::O => "O",
            TargetTag::B => "B-Lu",
            TargetTag::I => "I-Lu",
            TargetTag::C => "C-Lu",
        }
    }
}

impl fmt::Display for TargetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpanTag {
    O,
    B,
    I,
}

impl SpanTag {
    pub const ALL: [SpanTag; 3] = [SpanTag::O, SpanTag::B, SpanTag::I];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SpanTag::O => "O",
            SpanTag::B => "B",
            SpanTag::I => "I",
        }
    }
}

impl fmt::Display for SpanTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Encodes target index sets as IOBC labels.
///
/// Every set is sorted; a continuation after a gap is written as `C`, which
/// the decoder attaches to the most recently opened target. Sets whose gap
/// continuation would be attached to another target are rejected since they
/// cannot round-trip.
pub fn encode_iobc(target_sets: &[Vec<usize>], n: usize) -> Result<Vec<TargetTag>> {
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut sorted: Vec<Vec<usize>> = Vec::with_capacity(target_sets.len());
    for (s, set) in target_sets.iter().enumerate() {
        let mut set = set.clone();
        set.sort_unstable();
        set.dedup();
        if set.is_empty() {
            return Err(Error::Codec(format!("target set {s} is empty")));
        }
        for &i in &set {
            if i >= n {
                return Err(Error::Codec(format!(
                    "target index {i} out of range for length {n}"
                )));
            }
            if let Some(other) = owner[i] {
                return Err(Error::Codec(format!(
                    "target sets {other} and {s} overlap at index {i}"
                )));
            }
            owner[i] = Some(s);
        }
        sorted.push(set);
    }

    let mut tags = vec![TargetTag::O; n];
    for (s, set) in sorted.iter().enumerate() {
        tags[set[0]] = TargetTag::B;
        for w in set.windows(2) {
            let (prev, i) = (w[0], w[1]);
            if i == prev + 1 {
                tags[i] = TargetTag::I;
            } else {
                // The continuation attaches to the latest target started before `i`.
                let latest = sorted
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t[0] < i)
                    .max_by_key(|(_, t)| t[0])
                    .map(|(k, _)| k);
                if latest != Some(s) {
                    return Err(Error::Codec(format!(
                        "target set {s} continues at {i} after another target opened; not IOBC-encodable"
                    )));
                }
                tags[i] = TargetTag::C;
            }
        }
    }
    Ok(tags)
}

/// Total IOBC decoder. A stray `I-Lu` is read as `B-Lu`; a `C-Lu` joins the
/// most recently opened target, or opens one if there is none.
pub fn decode_iobc(tags: &[TargetTag]) -> Vec<Vec<usize>> {
    let mut targets: Vec<Vec<usize>> = Vec::new();
    let mut owner: Vec<Option<usize>> = vec![None; tags.len()];
    for (i, &tag) in tags.iter().enumerate() {
        let slot = match tag {
            TargetTag::O => None,
            TargetTag::B => {
                targets.push(Vec::new());
                Some(targets.len() - 1)
            }
            TargetTag::I => match i.checked_sub(1).and_then(|p| owner[p]) {
                Some(t) => Some(t),
                None => {
                    targets.push(Vec::new());
                    Some(targets.len() - 1)
                }
            },
            TargetTag::C => {
                if targets.is_empty() {
                    targets.push(Vec::new());
                }
                Some(targets.len() - 1)
            }
        };
        if let Some(t) = slot {
            targets[t].push(i);
            owner[i] = Some(t);
        }
    }
    targets
}

/// Encodes inclusive `[start, end]` spans as IOB2 labels.
pub fn encode_iob2(spans: &[(usize, usize)], n: usize) -> Result<Vec<SpanTag>> {
    let mut tags = vec![SpanTag::O; n];
    let mut used = vec![false; n];
    for &(start, end) in spans {
        if start > end || end >= n {
            return Err(Error::Codec(format!(
                "span [{start},{end}] invalid for length {n}"
            )));
        }
        if used[start..=end].iter().any(|&u| u) {
            return Err(Error::Codec(format!("span [{start},{end}] overlaps another span")));
        }
        used[start..=end].iter_mut().for_each(|u| *u = true);
        tags[start] = SpanTag::B;
        for t in &mut tags[start + 1..=end] {
            *t = SpanTag::I;
        }
    }
    Ok(tags)
}

/// Opens a span at each `B` and extends it over the following `I`s. A stray
/// `I` after `O` opens a span as well.
pub fn decode_iob2(tags: &[SpanTag]) -> Vec<(usize, usize)> {
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut open = false;
    for (i, &tag) in tags.iter().enumerate() {
        match tag {
            SpanTag::O => open = false,
            SpanTag::B => {
                spans.push((i, i));
                open = true;
            }
            SpanTag::I => {
                if open {
                    spans.last_mut().expect("open span").1 = i;
                } else {
                    spans.push((i, i));
                    open = true;
                }
            }
        }
    }
    spans
}
