//! Synthetic training corpora and needle-in-a-haystack tasks.
//!
//! Two styles: `Lines` emits short assignment statements whose operands
//! reuse variables assigned on earlier lines, so something useful crosses
//! line boundaries; `Membership` emits list-membership questions in the
//! same template the needle evaluation uses, with the gold answer appended
//! so the items double as supervised training text.

use crate::harness::text::{encode_text, FALSE_TOKEN, LINEBREAK_TOKEN, TRUE_TOKEN};
use crate::numerics::Rng;
use crate::{Error, Result};

const VAR_LETTERS: u8 = 10;
const OPERATORS: [char; 3] = ['+', '-', '*'];
const REUSE_P: f64 = 0.65;
const STATEMENTS_PER_SEQ: usize = 27;

const ALPHABET_LEN: u8 = 16;
const MIN_LIST: usize = 4;
const MAX_LIST: usize = 128;
const EXTRA_ASSERTS: usize = 4;
/// Worst-case planted footprint of one follow-up question: 19 raw stub
/// tokens plus answer, linebreak and the anchor planted after it.
const ASSERT_INTERNAL: usize = 22;
/// Planted membership sequences never exceed this many tokens; anchored
/// configs training on the membership corpus need max_seq of at least this.
pub const MEMBERSHIP_MAX_INTERNAL: usize = 440;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusStyle {
    Lines,
    Membership,
}

/// Generates token sequences totalling at least `size_tokens`, same seed
/// giving the same corpus. `Lines` sequences hold a fixed number of
/// statements; `Membership` sequences hold one list followed by several
/// question/answer stubs about it.
pub fn make_corpus(rng: &mut Rng, size_tokens: usize, style: CorpusStyle) -> Result<Vec<Vec<u32>>> {
    if size_tokens == 0 {
        return Err(Error::Input("corpus size must be at least one token".into()));
    }
    let mut out = Vec::new();
    let mut total = 0usize;
    let mut next_gold_true = true;
    while total < size_tokens {
        let seq = match style {
            CorpusStyle::Lines => lines_sequence(rng),
            CorpusStyle::Membership => {
                let gold = next_gold_true;
                next_gold_true = !next_gold_true;
                membership_item(rng, gold)?
            }
        };
        total += seq.len();
        out.push(seq);
    }
    Ok(out)
}

fn lines_sequence(rng: &mut Rng) -> Vec<u32> {
    let mut assigned: Vec<char> = Vec::new();
    let mut text = String::with_capacity(STATEMENTS_PER_SEQ * 7);
    for _ in 0..STATEMENTS_PER_SEQ {
        let target = var_letter(rng);
        let x = operand(rng, &assigned);
        let op = *rng.choose(&OPERATORS);
        let y = operand(rng, &assigned);
        text.push(target);
        text.push('=');
        text.push(x);
        text.push(op);
        text.push(y);
        text.push('\n');
        if !assigned.contains(&target) {
            assigned.push(target);
        }
    }
    encode_text(&text).expect("generated statements are ASCII")
}

fn var_letter(rng: &mut Rng) -> char {
    (b'a' + rng.range(VAR_LETTERS as usize) as u8) as char
}

fn operand(rng: &mut Rng, assigned: &[char]) -> char {
    if !assigned.is_empty() && rng.chance(REUSE_P) {
        *rng.choose(assigned)
    } else {
        var_letter(rng)
    }
}

fn membership_item(rng: &mut Rng, gold: bool) -> Result<Vec<u32>> {
    // Quadratic bias toward short lists keeps answer supervision dense per
    // token while still covering the longest lists the evaluation grid uses.
    let u = rng.next_f64();
    let n = MIN_LIST + ((MAX_LIST - MIN_LIST + 1) as f64 * u * u) as usize;
    let n = n.min(MAX_LIST);
    let depth = rng.next_f64();
    let not_in = rng.chance(0.5);
    let present = gold != not_in;
    let task = build_needle(rng, n, depth, present, not_in)?;
    let mut seq = task.prompt;
    seq.push(if gold { TRUE_TOKEN } else { FALSE_TOKEN });
    seq.push(LINEBREAK_TOKEN);

    // Follow-up questions about the same list multiply the per-sequence
    // answer supervision. Each draws target, presence and verb so that no
    // pair of them is correlated: a uniformly drawn letter would sit in a
    // long list ~95% of the time and let the verb alone decode the answer,
    // so presence is a fair coin and the letter comes from the matching
    // pool. An empty pool skips the question rather than biasing presence.
    let mut internal_len =
        seq.len() + seq.iter().filter(|&&t| t == LINEBREAK_TOKEN).count();
    for _ in 0..EXTRA_ASSERTS {
        if internal_len + ASSERT_INTERNAL > MEMBERSHIP_MAX_INTERNAL {
            break;
        }
        let g = rng.chance(0.5);
        // The answer is presence XOR verb, and neither factor alone
        // correlates with it under an even verb split, which starves the
        // lookup circuit of any first-order gradient. Biasing follow-ups
        // 3:1 toward the plain variant restores that gradient while the
        // remaining quarter still teaches the negated readout.
        let use_in = !rng.chance(0.25);
        let want_present = g == use_in;
        let pool: Vec<u8> = (b'a'..b'a' + ALPHABET_LEN)
            .filter(|&b| task.list.contains(&(b as u32)) == want_present)
            .collect();
        if pool.is_empty() {
            continue;
        }
        let b = pool[rng.range(pool.len())];
        let verb = if use_in { "in" } else { "not in" };
        let toks = encode_text(&format!("assert {} {verb} l==", b as char))?;
        internal_len += toks.len() + 3;
        seq.extend(toks);
        seq.push(if g { TRUE_TOKEN } else { FALSE_TOKEN });
        seq.push(LINEBREAK_TOKEN);
    }
    Ok(seq)
}

/// One list-membership question: an instruction line naming the needle, a
/// list block holding one item per line, and an assert stub the model must
/// complete with T or F.
#[derive(Debug, Clone)]
pub struct NeedleTask {
    pub n: usize,
    pub depth: f64,
    /// The token the question asks about.
    pub needle: u32,
    /// True for the `not in` variant of the assert stub.
    pub not_in: bool,
    /// Whether the needle was actually placed in the list.
    pub present: bool,
    /// `round(depth * (n-1))`: the slot the needle occupies when present.
    pub needle_index: usize,
    /// The n list item tokens.
    pub list: Vec<u32>,
    /// The full rendered prompt, ending right after `==`.
    pub prompt: Vec<u32>,
    pub gold: bool,
}

impl NeedleTask {
    pub fn gold_token(&self) -> u32 {
        if self.gold {
            TRUE_TOKEN
        } else {
            FALSE_TOKEN
        }
    }
}

/// Builds a task with `n` list slots and the needle at the depth-scaled
/// index (round half-up) when `present`. The in/not-in variant is drawn
/// from the rng; distractors never equal the needle, so the needle appears
/// in the list exactly once or not at all.
pub fn make_needle(rng: &mut Rng, n: usize, depth: f64, present: bool) -> Result<NeedleTask> {
    let not_in = rng.chance(0.5);
    build_needle(rng, n, depth, present, not_in)
}

fn build_needle(
    rng: &mut Rng,
    n: usize,
    depth: f64,
    present: bool,
    not_in: bool,
) -> Result<NeedleTask> {
    if n < 2 {
        return Err(Error::Input(format!("list length must be at least 2, got {n}")));
    }
    if !(0.0..=1.0).contains(&depth) || !depth.is_finite() {
        return Err(Error::Input(format!("needle depth must lie in [0, 1], got {depth}")));
    }
    let needle_byte = b'a' + rng.range(ALPHABET_LEN as usize) as u8;
    let needle_index = (depth * (n - 1) as f64).round() as usize;
    // Distractors draw from the 15 non-needle letters via an offset, so the
    // rng consumes the same number of draws whether or not the needle is
    // placed; present/absent twins from one seed differ only at the slot.
    let mut list_bytes: Vec<u8> = (0..n)
        .map(|_| {
            let r = b'a' + rng.range(ALPHABET_LEN as usize - 1) as u8;
            if r >= needle_byte {
                r + 1
            } else {
                r
            }
        })
        .collect();
    if present {
        list_bytes[needle_index] = needle_byte;
    }

    let c = needle_byte as char;
    let mut text = format!("# find {c}\nl=[\n");
    for &b in &list_bytes {
        text.push(b as char);
        text.push('\n');
    }
    text.push_str("]\n");
    let verb = if not_in { "not in" } else { "in" };
    text.push_str(&format!("assert {c} {verb} l=="));

    Ok(NeedleTask {
        n,
        depth,
        needle: needle_byte as u32,
        not_in,
        present,
        needle_index,
        list: list_bytes.iter().map(|&b| b as u32).collect(),
        prompt: encode_text(&text).expect("rendered task is ASCII"),
        gold: present != not_in,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::text::decode_text;

    #[test]
    fn same_seed_gives_identical_corpora() {
        for style in [CorpusStyle::Lines, CorpusStyle::Membership] {
            let a = make_corpus(&mut Rng::new(5), 4000, style).unwrap();
            let b = make_corpus(&mut Rng::new(5), 4000, style).unwrap();
            assert_eq!(a, b);
            assert!(a.iter().map(Vec::len).sum::<usize>() >= 4000);
        }
    }

    #[test]
    fn lines_corpus_has_moderate_linebreak_frequency() {
        let corpus = make_corpus(&mut Rng::new(7), 20_000, CorpusStyle::Lines).unwrap();
        let total: usize = corpus.iter().map(Vec::len).sum();
        let breaks: usize = corpus
            .iter()
            .flatten()
            .filter(|&&t| t == LINEBREAK_TOKEN)
            .count();
        let freq = breaks as f64 / total as f64;
        assert!((0.05..=0.20).contains(&freq), "linebreak frequency {freq}");
    }

    #[test]
    fn lines_statements_parse_as_assignments() {
        let corpus = make_corpus(&mut Rng::new(11), 2000, CorpusStyle::Lines).unwrap();
        for seq in &corpus {
            let text = decode_text(seq).unwrap();
            for line in text.lines() {
                let b = line.as_bytes();
                assert_eq!(b.len(), 5, "statement {line:?}");
                assert!(b[0].is_ascii_lowercase());
                assert_eq!(b[1], b'=');
                assert!(b[2].is_ascii_lowercase());
                assert!(OPERATORS.contains(&(b[3] as char)));
                assert!(b[4].is_ascii_lowercase());
            }
        }
    }

    #[test]
    fn membership_corpus_is_balanced_and_answered() {
        let corpus = make_corpus(&mut Rng::new(13), 40_000, CorpusStyle::Membership).unwrap();
        let mut trues = 0usize;
        let mut answers = 0usize;
        let mut follow_ups = 0usize;
        for seq in &corpus {
            let answer = seq[seq.len() - 2];
            assert_eq!(seq[seq.len() - 1], LINEBREAK_TOKEN);
            assert!(answer == TRUE_TOKEN || answer == FALSE_TOKEN);
            let mut in_seq = 0usize;
            for &t in seq.iter() {
                if t == TRUE_TOKEN || t == FALSE_TOKEN {
                    in_seq += 1;
                    if t == TRUE_TOKEN {
                        trues += 1;
                    }
                }
            }
            answers += in_seq;
            follow_ups += in_seq - 1;
            let breaks = seq.iter().filter(|&&t| t == LINEBREAK_TOKEN).count();
            assert!(seq.len() + breaks <= MEMBERSHIP_MAX_INTERNAL);
        }
        assert!(follow_ups > corpus.len(), "follow-up questions missing");
        let ratio = trues as f64 / answers as f64;
        assert!((ratio - 0.5).abs() <= 0.02, "true ratio {ratio}");
    }

    #[test]
    fn needle_placement_follows_the_rounding_rule() {
        let mut rng = Rng::new(3);
        assert_eq!(make_needle(&mut rng, 64, 0.0, true).unwrap().needle_index, 0);
        assert_eq!(make_needle(&mut rng, 64, 1.0, true).unwrap().needle_index, 63);
        assert_eq!(make_needle(&mut rng, 64, 0.5, true).unwrap().needle_index, 32);
        assert_eq!(make_needle(&mut rng, 11, 0.5, true).unwrap().needle_index, 5);
    }

    #[test]
    fn present_needle_appears_exactly_once_at_its_slot() {
        let mut rng = Rng::new(21);
        for _ in 0..50 {
            let n = 2 + rng.range(100);
            let depth = rng.next_f64();
            let t = make_needle(&mut rng, n, depth, true).unwrap();
            let hits: Vec<usize> = t
                .list
                .iter()
                .enumerate()
                .filter(|(_, &x)| x == t.needle)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(hits, vec![t.needle_index]);
            assert!(t.gold != t.not_in);
        }
    }

    #[test]
    fn absent_needle_is_nowhere_in_the_list() {
        let mut rng = Rng::new(22);
        for _ in 0..50 {
            let n = 2 + rng.range(100);
            let depth = rng.next_f64();
            let t = make_needle(&mut rng, n, depth, false).unwrap();
            assert!(t.list.iter().all(|&x| x != t.needle));
            assert!(t.gold == t.not_in);
        }
    }

    #[test]
    fn present_and_absent_twins_differ_only_at_the_slot() {
        for seed in 0..20u64 {
            let a = make_needle(&mut Rng::new(seed), 32, 0.4, true).unwrap();
            let b = make_needle(&mut Rng::new(seed), 32, 0.4, false).unwrap();
            assert_eq!(a.needle, b.needle);
            assert_eq!(a.not_in, b.not_in);
            assert_eq!(a.needle_index, b.needle_index);
            for i in 0..32 {
                if i == a.needle_index {
                    assert_eq!(a.list[i], a.needle);
                    assert_ne!(b.list[i], b.needle);
                } else {
                    assert_eq!(a.list[i], b.list[i]);
                }
            }
            assert_ne!(a.gold, b.gold);
        }
    }

    #[test]
    fn prompt_renders_the_documented_template() {
        let t = make_needle(&mut Rng::new(41), 3, 1.0, true).unwrap();
        let c = t.needle as u8 as char;
        let items: Vec<String> =
            t.list.iter().map(|&x| format!("{}\n", x as u8 as char)).collect();
        let verb = if t.not_in { "not in" } else { "in" };
        let expect =
            format!("# find {c}\nl=[\n{}]\nassert {c} {verb} l==", items.concat());
        assert_eq!(decode_text(&t.prompt).unwrap(), expect);
    }

    #[test]
    fn degenerate_needle_parameters_are_rejected() {
        let mut rng = Rng::new(1);
        assert!(make_needle(&mut rng, 1, 0.5, true).is_err());
        assert!(make_needle(&mut rng, 8, 1.5, true).is_err());
        assert!(make_needle(&mut rng, 8, -0.1, true).is_err());
    }
}
