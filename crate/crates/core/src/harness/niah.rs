//! Synthetic needle-in-a-haystack items.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BenchItem, PromptRegions};
use crate::error::{Error, Result};
use crate::seed::mix;

pub const DEFAULT_INSTRUCTION: &[&str] = &[
    "<sys>", "read", "the", "document", "and", "report", "the", "secret", "code", "</sys>",
];
pub const DEFAULT_QUESTION: &[&str] = &["<user>", "code", "?", "<asst>"];

const NEEDLE_LEAD: &[&str] = &["the", "secret", "code", "is"];
/// Length of "the secret code is X Y ."
const NEEDLE_SENTENCE_LEN: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeedlePosition {
    Early,
    Middle,
    Late,
}

impl NeedlePosition {
    pub const ALL: [NeedlePosition; 3] = [
        NeedlePosition::Early,
        NeedlePosition::Middle,
        NeedlePosition::Late,
    ];

    /// Half-open range, as a fraction of the context, where the needle
    /// sentence starts.
    pub fn range(self) -> (f64, f64) {
        match self {
            NeedlePosition::Early => (0.10, 0.25),
            NeedlePosition::Middle => (0.40, 0.60),
            NeedlePosition::Late => (0.75, 0.85),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NeedlePosition::Early => "early",
            NeedlePosition::Middle => "middle",
            NeedlePosition::Late => "late",
        }
    }
}

impl fmt::Display for NeedlePosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NeedlePosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NeedlePosition::ALL
            .into_iter()
            .find(|p| p.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown needle position `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahItem {
    pub id: String,
    pub context_tokens: Vec<String>,
    /// Two space-separated alphanumeric code words.
    pub needle: String,
    pub needle_position: NeedlePosition,
    /// Context index where the needle sentence starts.
    pub needle_start: usize,
    pub question_tokens: Vec<String>,
}

impl NiahItem {
    /// Context indices of the two code words.
    pub fn needle_indices(&self) -> [usize; 2] {
        let first = self.needle_start + NEEDLE_LEAD.len();
        [first, first + 1]
    }

    /// Lay the item out as `<s> instruction context question`, cutting the
    /// middle of the context if the prompt would exceed `prompt_token_cap`.
    pub fn to_bench_item(&self, prompt_token_cap: usize) -> Result<BenchItem> {
        let fixed = 1 + DEFAULT_INSTRUCTION.len() + self.question_tokens.len();
        if prompt_token_cap <= fixed {
            return Err(Error::Config(format!(
                "prompt_token_cap {prompt_token_cap} leaves no room for context"
            )));
        }
        let avail = prompt_token_cap - fixed;
        let n = self.context_tokens.len();
        // Context indices that survive truncation, in order.
        let kept: Vec<usize> = if n <= avail {
            (0..n).collect()
        } else {
            let head = avail / 2;
            let tail = avail - head;
            (0..head).chain(n - tail..n).collect()
        };
        let base = 1 + DEFAULT_INSTRUCTION.len();
        let mut prompt: Vec<String> = Vec::with_capacity(base + kept.len() + 4);
        prompt.push("<s>".into());
        prompt.extend(DEFAULT_INSTRUCTION.iter().map(|s| s.to_string()));
        prompt.extend(kept.iter().map(|&i| self.context_tokens[i].clone()));
        let q_start = prompt.len();
        prompt.extend(self.question_tokens.iter().cloned());

        let answer: Vec<usize> = self
            .needle_indices()
            .iter()
            .filter_map(|ni| kept.iter().position(|k| k == ni).map(|j| base + j))
            .collect();
        Ok(BenchItem {
            id: self.id.clone(),
            references: vec![self.needle.clone()],
            regions: PromptRegions {
                instruction: (1..base).collect(),
                question: (q_start..prompt.len()).collect(),
                answer: if answer.len() == 2 { answer } else { Vec::new() },
            },
            prompt,
            needle_position: Some(self.needle_position),
            domain: Some("niah".into()),
        })
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const CONS: &[u8] = b"bcdfghjklmnprstvwz";
    const VOWELS: &[u8] = b"aeiou";
    let syllables = rng.gen_range(1..=3);
    let mut w = String::with_capacity(syllables * 2);
    for _ in 0..syllables {
        w.push(CONS[rng.gen_range(0..CONS.len())] as char);
        w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
    }
    w
}

/// Four characters from `[a-z0-9]`, at least one a digit.
fn code_word(rng: &mut ChaCha8Rng) -> String {
    const ALNUM: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    let mut chars: Vec<u8> = (0..4).map(|_| ALNUM[rng.gen_range(0..ALNUM.len())]).collect();
    if !chars.iter().any(u8::is_ascii_digit) {
        let slot = rng.gen_range(0..4);
        chars[slot] = b'0' + rng.gen_range(0..10u8);
    }
    String::from_utf8(chars).expect("ascii")
}

/// A balanced grid of `n_items` items: every (position, length) cell gets
/// `n_items / (|positions| · |lengths|)` items. `lengths_words` counts
/// context tokens including the needle sentence.
pub fn gen_niah(
    n_items: usize,
    positions: &[NeedlePosition],
    lengths_words: &[usize],
    seed: u64,
) -> Result<Vec<NiahItem>> {
    let cells = positions.len() * lengths_words.len();
    if cells == 0 {
        return Err(Error::Config("NIAH grid needs positions and lengths".into()));
    }
    if n_items % cells != 0 {
        return Err(Error::Config(format!(
            "{n_items} items do not divide into {cells} grid cells"
        )));
    }
    if let Some(&len) = lengths_words.iter().find(|&&l| l < 50) {
        return Err(Error::Config(format!("context length {len} is too short")));
    }
    let per_cell = n_items / cells;
    let mut used = HashSet::new();
    let mut items = Vec::with_capacity(n_items);
    for &position in positions {
        for &len in lengths_words {
            for i in 0..per_cell {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, items.len() as u64));
                let needle = loop {
                    let (a, b) = (code_word(&mut rng), code_word(&mut rng));
                    let code = format!("{a} {b}");
                    if a != b && used.insert(code.clone()) {
                        break code;
                    }
                };
                let (lo, hi) = position.range();
                let first = (lo * len as f64).ceil() as usize;
                let last = ((hi * len as f64).ceil() as usize).saturating_sub(1);
                let needle_start = rng.gen_range(first..=last.max(first));

                let mut context = Vec::with_capacity(len);
                let mut until_stop = rng.gen_range(8..15);
                while context.len() < len - NEEDLE_SENTENCE_LEN {
                    if context.len() == needle_start {
                        break;
                    }
                    until_stop -= 1;
                    if until_stop == 0 {
                        context.push(".".to_string());
                        until_stop = rng.gen_range(8..15);
                    } else {
                        context.push(pseudo_word(&mut rng));
                    }
                }
                context.extend(NEEDLE_LEAD.iter().map(|s| s.to_string()));
                context.extend(needle.split(' ').map(str::to_owned));
                context.push(".".into());
                while context.len() < len {
                    until_stop -= 1;
                    if until_stop == 0 {
                        context.push(".".to_string());
                        until_stop = rng.gen_range(8..15);
                    } else {
                        context.push(pseudo_word(&mut rng));
                    }
                }
                items.push(NiahItem {
                    id: format!("niah-{position}-{len}-{i:03}"),
                    context_tokens: context,
                    needle,
                    needle_position: position,
                    needle_start,
                    question_tokens: DEFAULT_QUESTION.iter().map(|s| s.to_string()).collect(),
                });
            }
        }
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_counts() {
        let items = gen_niah(63, &NeedlePosition::ALL, &[800, 1500, 3000], 1).unwrap();
        assert_eq!(items.len(), 63);
        for p in NeedlePosition::ALL {
            assert_eq!(items.iter().filter(|i| i.needle_position == p).count(), 21);
            for len in [800, 1500, 3000] {
                let cell = items
                    .iter()
                    .filter(|i| i.needle_position == p && i.context_tokens.len() == len)
                    .count();
                assert_eq!(cell, 7);
            }
        }
    }

    #[test]
    fn long_context_grid() {
        let items = gen_niah(60, &NeedlePosition::ALL, &[49_000], 2).unwrap();
        for p in NeedlePosition::ALL {
            assert_eq!(items.iter().filter(|i| i.needle_position == p).count(), 20);
        }
    }

    #[test]
    fn indivisible_count_rejected() {
        assert!(gen_niah(100, &NeedlePosition::ALL, &[200], 0).is_err());
    }

    #[test]
    fn deterministic_and_unique() {
        let a = gen_niah(30, &NeedlePosition::ALL, &[150, 300], 9).unwrap();
        assert_eq!(a, gen_niah(30, &NeedlePosition::ALL, &[150, 300], 9).unwrap());
        let needles: HashSet<_> = a.iter().map(|i| i.needle.clone()).collect();
        assert_eq!(needles.len(), a.len());
    }

    #[test]
    fn needle_placement_and_uniqueness() {
        for item in gen_niah(90, &NeedlePosition::ALL, &[150, 400], 4).unwrap() {
            let len = item.context_tokens.len() as f64;
            let (lo, hi) = item.needle_position.range();
            let frac = item.needle_start as f64 / len;
            assert!(frac >= lo && frac < hi, "{} at {frac}", item.id);
            let code: Vec<&str> = item.needle.split(' ').collect();
            assert_eq!(code.len(), 2);
            for w in &code {
                assert_eq!(w.len(), 4);
                assert!(w.chars().any(|c| c.is_ascii_digit()));
                assert_eq!(item.context_tokens.iter().filter(|t| t == w).count(), 1);
            }
            let [a, b] = item.needle_indices();
            assert_eq!(item.context_tokens[a], code[0]);
            assert_eq!(item.context_tokens[b], code[1]);
        }
    }

    #[test]
    fn bench_layout() {
        let item = &gen_niah(3, &NeedlePosition::ALL, &[150], 5).unwrap()[2];
        let b = item.to_bench_item(1920).unwrap();
        assert_eq!(b.prompt.len(), 1 + 10 + 150 + 4);
        assert_eq!(b.prompt[0], "<s>");
        assert_eq!(b.regions.instruction, (1..=10).collect::<Vec<_>>());
        assert_eq!(b.regions.question, (161..165).collect::<Vec<_>>());
        let code: Vec<_> = b.regions.answer.iter().map(|&i| b.prompt[i].clone()).collect();
        assert_eq!(code.join(" "), item.needle);
        b.validate().unwrap();
    }

    #[test]
    fn truncation_cuts_the_middle() {
        let items = gen_niah(3, &NeedlePosition::ALL, &[400], 6).unwrap();
        let early = items.iter().find(|i| i.needle_position == NeedlePosition::Early).unwrap();
        let middle = items.iter().find(|i| i.needle_position == NeedlePosition::Middle).unwrap();
        let b = early.to_bench_item(255).unwrap();
        assert_eq!(b.prompt.len(), 255);
        assert_eq!(b.regions.answer.len(), 2);
        assert_eq!(&b.prompt[11], &early.context_tokens[0]);
        assert_eq!(&b.prompt[250], early.context_tokens.last().unwrap());
        assert!(middle.to_bench_item(255).unwrap().regions.answer.is_empty());
    }
}
