//! Token vocabularies and the genome ↔ pattern-spec encoding.
//!
//! A genome is the controller's view of a dropout configuration: one token
//! vector per conv layer group (8 slots) or per transformer application site
//! (4 slots), each token an index into that slot's value table.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{
    ConvPatternSpec, TransformerPatternSpec, CONV_ROTATE, CONV_SHEAR, CONV_STRIDE, REPEAT_MAX,
    XFMR_SIZE, XFMR_STRIDE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Conv,
    Transformer,
}

pub const CONV_SLOTS: [&str; 8] = [
    "size_k", "stride", "repeat", "rotate", "shear_x", "shear_y", "share_c", "residual",
];
pub const XFMR_SLOTS: [&str; 4] = ["size", "stride", "share_t", "share_c"];

const CONV_CARDS: [usize; 8] = [5, 5, 32, 6, 12, 12, 2, 2];
const XFMR_CARDS: [usize; 4] = [8, 5, 2, 2];

pub fn slot_names(kind: TargetKind) -> &'static [&'static str] {
    match kind {
        TargetKind::Conv => &CONV_SLOTS,
        TargetKind::Transformer => &XFMR_SLOTS,
    }
}

/// Number of admissible values per slot, in slot order.
pub fn slot_cards(kind: TargetKind) -> &'static [usize] {
    match kind {
        TargetKind::Conv => &CONV_CARDS,
        TargetKind::Transformer => &XFMR_CARDS,
    }
}

/// The ordered transformer application sites a full model exposes.
pub const TRANSFORMER_SITES: [&str; 8] = [
    "query",
    "key",
    "value",
    "attn_probs",
    "attn_out",
    "attn_residual",
    "ffn_inner",
    "ffn_out",
];

/// An ordered, duplicate-free selection of transformer sites. Small searches
/// use a subset; the toy language model uses all eight.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteLayout {
    sites: Vec<String>,
}

impl SiteLayout {
    pub fn full() -> Self {
        SiteLayout {
            sites: TRANSFORMER_SITES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn subset(names: &[&str]) -> Result<Self> {
        let mut sites: Vec<String> = Vec::with_capacity(names.len());
        for &n in names {
            let canon = TRANSFORMER_SITES
                .iter()
                .find(|&&s| s == n)
                .ok_or_else(|| Error::contract(format!("unknown transformer site {n:?}")))?;
            if sites.iter().any(|s| s == canon) {
                return Err(Error::contract(format!("duplicate transformer site {n:?}")));
            }
            sites.push(canon.to_string());
        }
        if sites.is_empty() {
            return Err(Error::contract("site layout must name at least one site"));
        }
        Ok(SiteLayout { sites })
    }

    pub fn sites(&self) -> &[String] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.sites.iter().position(|s| s == name)
    }
}

/// Shape of the token sequence the controller emits: `n_groups` vectors of
/// per-kind slots, flattened group-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenomeLayout {
    pub kind: TargetKind,
    pub n_groups: usize,
}

impl GenomeLayout {
    pub fn conv(n_groups: usize) -> Result<Self> {
        if n_groups == 0 {
            return Err(Error::contract("conv genome needs at least one layer group"));
        }
        Ok(GenomeLayout { kind: TargetKind::Conv, n_groups })
    }

    pub fn transformer(sites: &SiteLayout) -> Self {
        GenomeLayout { kind: TargetKind::Transformer, n_groups: sites.len() }
    }

    pub fn slots_per_group(&self) -> usize {
        slot_cards(self.kind).len()
    }

    pub fn total_slots(&self) -> usize {
        self.n_groups * self.slots_per_group()
    }

    /// Vocabulary size of every flattened slot, group-major.
    pub fn flat_cards(&self) -> Vec<usize> {
        let per = slot_cards(self.kind);
        (0..self.n_groups).flat_map(|_| per.iter().copied()).collect()
    }

    /// Number of distinct genomes in this layout.
    pub fn space_size(&self) -> u128 {
        let per: u128 = slot_cards(self.kind).iter().map(|&c| c as u128).product();
        per.pow(self.n_groups as u32)
    }

    pub fn genome_from_flat(&self, tokens: &[usize]) -> Result<PatternGenome> {
        if tokens.len() != self.total_slots() {
            return Err(Error::contract(format!(
                "expected {} tokens for this layout, got {}",
                self.total_slots(),
                tokens.len()
            )));
        }
        let per = self.slots_per_group();
        let groups = tokens.chunks(per).map(|c| c.to_vec()).collect();
        let g = PatternGenome { kind: self.kind, groups };
        g.validate()?;
        Ok(g)
    }
}

/// A sampled dropout configuration as token indices: `groups[g][s]` indexes
/// slot `s`'s value table for layer group / site `g`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatternGenome {
    pub kind: TargetKind,
    pub groups: Vec<Vec<usize>>,
}

impl PatternGenome {
    pub fn validate(&self) -> Result<()> {
        let cards = slot_cards(self.kind);
        let names = slot_names(self.kind);
        if self.groups.is_empty() {
            return Err(Error::Genome("genome has no groups".into()));
        }
        for (g, group) in self.groups.iter().enumerate() {
            if group.len() != cards.len() {
                return Err(Error::Genome(format!(
                    "group {g} has {} tokens, expected {}",
                    group.len(),
                    cards.len()
                )));
            }
            for (s, (&tok, &card)) in group.iter().zip(cards).enumerate() {
                if tok >= card {
                    return Err(Error::Genome(format!(
                        "slot {} token {tok} out of range 0..{card} in group {g}",
                        names[s]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn flat_tokens(&self) -> Vec<usize> {
        self.groups.iter().flatten().copied().collect()
    }

    pub fn matches_layout(&self, layout: &GenomeLayout) -> Result<()> {
        if self.kind != layout.kind || self.groups.len() != layout.n_groups {
            return Err(Error::Genome(format!(
                "genome has {} {:?} groups, layout expects {} {:?}",
                self.groups.len(),
                self.kind,
                layout.n_groups,
                layout.kind
            )));
        }
        self.validate()
    }
}

// ---- decoding ---------------------------------------------------------------

fn float_token(table: &[f64], v: f64, slot: &str) -> Result<usize> {
    table
        .iter()
        .position(|t| (t - v).abs() < 1e-9)
        .ok_or_else(|| Error::Genome(format!("{slot} value {v} is not in the vocabulary")))
}

fn int_token(table: &[u32], v: u32, slot: &str) -> Result<usize> {
    table
        .iter()
        .position(|&t| t == v)
        .ok_or_else(|| Error::Genome(format!("{slot} value {v} is not in the vocabulary")))
}

/// Decode a conv genome into one pattern spec per layer group.
pub fn decode_conv(genome: &PatternGenome) -> Result<Vec<ConvPatternSpec>> {
    if genome.kind != TargetKind::Conv {
        return Err(Error::Genome("expected a conv genome".into()));
    }
    genome.validate()?;
    genome
        .groups
        .iter()
        .map(|g| {
            let spec = ConvPatternSpec {
                size_k: g[0] as u32,
                stride: CONV_STRIDE[g[1]],
                repeat: g[2] as u32 + 1,
                rotate_max: CONV_ROTATE[g[3]],
                shear_x_max: CONV_SHEAR[g[4]],
                shear_y_max: CONV_SHEAR[g[5]],
                share_c: g[6] == 1,
                residual: g[7] == 1,
            };
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

/// Decode a transformer genome into `(site, spec)` pairs following `layout`.
pub fn decode_transformer(
    genome: &PatternGenome,
    layout: &SiteLayout,
) -> Result<Vec<(String, TransformerPatternSpec)>> {
    if genome.kind != TargetKind::Transformer {
        return Err(Error::Genome("expected a transformer genome".into()));
    }
    genome.validate()?;
    if genome.groups.len() != layout.len() {
        return Err(Error::Genome(format!(
            "genome has {} site groups, layout has {} sites",
            genome.groups.len(),
            layout.len()
        )));
    }
    layout
        .sites()
        .iter()
        .zip(&genome.groups)
        .map(|(site, g)| {
            let spec = TransformerPatternSpec {
                size: XFMR_SIZE[g[0]],
                stride: XFMR_STRIDE[g[1]],
                share_t: g[2] == 1,
                share_c: g[3] == 1,
            };
            spec.validate()?;
            Ok((site.clone(), spec))
        })
        .collect()
}

pub fn encode_conv(specs: &[ConvPatternSpec]) -> Result<PatternGenome> {
    let groups = specs
        .iter()
        .map(|s| {
            s.validate()?;
            Ok(vec![
                s.size_k as usize,
                int_token(&CONV_STRIDE, s.stride, "stride")?,
                (s.repeat - 1) as usize,
                float_token(&CONV_ROTATE, s.rotate_max, "rotate")?,
                float_token(&CONV_SHEAR, s.shear_x_max, "shear_x")?,
                float_token(&CONV_SHEAR, s.shear_y_max, "shear_y")?,
                s.share_c as usize,
                s.residual as usize,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatternGenome { kind: TargetKind::Conv, groups })
}

pub fn encode_transformer(specs: &[TransformerPatternSpec]) -> Result<PatternGenome> {
    let groups = specs
        .iter()
        .map(|s| {
            s.validate()?;
            Ok(vec![
                int_token(&XFMR_SIZE, s.size, "size")?,
                int_token(&XFMR_STRIDE, s.stride, "stride")?,
                s.share_t as usize,
                s.share_c as usize,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatternGenome { kind: TargetKind::Transformer, groups })
}

// ---- named special cases ------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpecialCase {
    /// One noise draw shared across time at every site: `share_t`, full size.
    VariationalDropout,
    /// Whole token vectors dropped: `share_c`, full size.
    WordDropout,
    /// Every site disabled (`size = 0`); masks are identically all-ones.
    NoneEverywhere,
}

impl FromStr for SpecialCase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variational-dropout" => Ok(SpecialCase::VariationalDropout),
            "word-dropout" => Ok(SpecialCase::WordDropout),
            "none" => Ok(SpecialCase::NoneEverywhere),
            other => Err(Error::Genome(format!(
                "unknown special case {other:?}; expected variational-dropout, word-dropout, or none"
            ))),
        }
    }
}

/// The canonical genome realizing a named baseline within this search space,
/// with the same spec repeated at every site of `layout`.
pub fn encode_special(case: SpecialCase, layout: &SiteLayout) -> PatternGenome {
    let spec = match case {
        SpecialCase::VariationalDropout => TransformerPatternSpec {
            size: *XFMR_SIZE.last().unwrap(),
            stride: 0,
            share_t: true,
            share_c: false,
        },
        SpecialCase::WordDropout => TransformerPatternSpec {
            size: *XFMR_SIZE.last().unwrap(),
            stride: 0,
            share_t: false,
            share_c: true,
        },
        SpecialCase::NoneEverywhere => TransformerPatternSpec {
            size: 0,
            stride: 0,
            share_t: false,
            share_c: false,
        },
    };
    encode_transformer(&vec![spec; layout.len()]).expect("special-case specs are always in vocabulary")
}

pub fn is_variational_dropout(spec: &TransformerPatternSpec) -> bool {
    spec.size == *XFMR_SIZE.last().unwrap() && spec.stride == 0 && spec.share_t && !spec.share_c
}

pub fn is_word_dropout(spec: &TransformerPatternSpec) -> bool {
    spec.size == *XFMR_SIZE.last().unwrap() && spec.stride == 0 && !spec.share_t && spec.share_c
}

pub fn is_disabled(spec: &TransformerPatternSpec) -> bool {
    spec.size == 0
}

// ---- random genomes -------------------------------------------------------------

/// Every slot drawn independently and uniformly over its vocabulary.
pub fn uniform_random_genome(layout: &GenomeLayout, rng: &mut impl Rng) -> PatternGenome {
    let cards = slot_cards(layout.kind);
    let groups = (0..layout.n_groups)
        .map(|_| cards.iter().map(|&c| rng.random_range(0..c)).collect())
        .collect();
    PatternGenome { kind: layout.kind, groups }
}

// ---- canonical text format -------------------------------------------------------

fn fmt_slot(kind: TargetKind, slot: usize, tok: usize) -> String {
    match kind {
        TargetKind::Conv => match slot {
            0 => tok.to_string(),
            1 => CONV_STRIDE[tok].to_string(),
            2 => (tok + 1).to_string(),
            3 => format!("{}", CONV_ROTATE[tok]),
            4 | 5 => format!("{:.2}", CONV_SHEAR[tok]),
            6 | 7 => (if tok == 1 { "T" } else { "F" }).to_string(),
            _ => unreachable!(),
        },
        TargetKind::Transformer => match slot {
            0 => XFMR_SIZE[tok].to_string(),
            1 => XFMR_STRIDE[tok].to_string(),
            2 | 3 => (if tok == 1 { "T" } else { "F" }).to_string(),
            _ => unreachable!(),
        },
    }
}

fn parse_slot(kind: TargetKind, slot: usize, name: &str, raw: &str) -> Result<usize> {
    let flag = |raw: &str| match raw {
        "T" => Ok(1),
        "F" => Ok(0),
        _ => Err(Error::Genome(format!("{name} must be T or F, got {raw:?}"))),
    };
    let float = |raw: &str| -> Result<f64> {
        raw.parse::<f64>().map_err(|_| Error::Genome(format!("{name} value {raw:?} is not a number")))
    };
    let int = |raw: &str| -> Result<u32> {
        raw.parse::<u32>().map_err(|_| Error::Genome(format!("{name} value {raw:?} is not an integer")))
    };
    match (kind, slot) {
        (TargetKind::Conv, 0) => {
            let v = int(raw)? as usize;
            if v >= CONV_CARDS[0] {
                return Err(Error::Genome(format!("size_k value {v} is not in the vocabulary")));
            }
            Ok(v)
        }
        (TargetKind::Conv, 1) => int_token(&CONV_STRIDE, int(raw)?, name),
        (TargetKind::Conv, 2) => {
            let v = int(raw)?;
            if v < 1 || v > REPEAT_MAX {
                return Err(Error::Genome(format!("repeat value {v} is not in 1..={REPEAT_MAX}")));
            }
            Ok((v - 1) as usize)
        }
        (TargetKind::Conv, 3) => float_token(&CONV_ROTATE, float(raw)?, name),
        (TargetKind::Conv, 4 | 5) => float_token(&CONV_SHEAR, float(raw)?, name),
        (TargetKind::Conv, 6 | 7) => flag(raw),
        (TargetKind::Transformer, 0) => int_token(&XFMR_SIZE, int(raw)?, name),
        (TargetKind::Transformer, 1) => int_token(&XFMR_STRIDE, int(raw)?, name),
        (TargetKind::Transformer, 2 | 3) => flag(raw),
        _ => unreachable!(),
    }
}

impl fmt::Display for PatternGenome {
    /// `conv:` or `xfmr:` followed by `;`-separated groups of
    /// `name=value` pairs in slot order.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.kind {
            TargetKind::Conv => "conv",
            TargetKind::Transformer => "xfmr",
        };
        write!(f, "{tag}:")?;
        let names = slot_names(self.kind);
        for (g, group) in self.groups.iter().enumerate() {
            if g > 0 {
                write!(f, ";")?;
            }
            for (s, &tok) in group.iter().enumerate() {
                if s > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{}={}", names[s], fmt_slot(self.kind, s, tok))?;
            }
        }
        Ok(())
    }
}

impl FromStr for PatternGenome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (tag, body) = s
            .split_once(':')
            .ok_or_else(|| Error::Genome("genome text must start with conv: or xfmr:".into()))?;
        let kind = match tag {
            "conv" => TargetKind::Conv,
            "xfmr" => TargetKind::Transformer,
            other => return Err(Error::Genome(format!("unknown genome kind {other:?}"))),
        };
        let names = slot_names(kind);
        let mut groups = Vec::new();
        for group_text in body.split(';') {
            let mut tokens: Vec<Option<usize>> = vec![None; names.len()];
            for pair in group_text.split(',') {
                let (key, raw) = pair
                    .split_once('=')
                    .ok_or_else(|| Error::Genome(format!("expected name=value, got {pair:?}")))?;
                let slot = names
                    .iter()
                    .position(|&n| n == key.trim())
                    .ok_or_else(|| Error::Genome(format!("unknown slot {key:?} for {kind:?}")))?;
                if tokens[slot].is_some() {
                    return Err(Error::Genome(format!("slot {key:?} given twice")));
                }
                tokens[slot] = Some(parse_slot(kind, slot, names[slot], raw.trim())?);
            }
            let group = tokens
                .into_iter()
                .enumerate()
                .map(|(s, t)| t.ok_or_else(|| Error::Genome(format!("missing slot {:?}", names[s]))))
                .collect::<Result<Vec<_>>>()?;
            groups.push(group);
        }
        let genome = PatternGenome { kind, groups };
        genome.validate()?;
        Ok(genome)
    }
}
