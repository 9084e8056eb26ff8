//! Byte-level BPE tokenizer shared by the LM backbone and the grounding text
//! encoder.
//!
//! The vocabulary is: 4 special tokens, the 256 single bytes, then one token
//! per learned merge. Byte fallback means `decode(encode(x)) == x` for any
//! byte string. Merges never cross a word boundary: text is first split into
//! pre-tokens, each starting at a whitespace byte, so a word keeps the same
//! tokens whether it appears mid-sentence, at a truncation point, or inside
//! a novel phrasing. Both towers of the model are built from the *same*
//! `Vocab` value; [`Vocab::fingerprint`] is asserted equal at model build.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const N_SPECIALS: usize = 4;
/// Specials plus the byte alphabet; merge tokens start here.
pub const BASE_VOCAB: usize = N_SPECIALS + 256;

const SPECIAL_NAMES: [&[u8]; N_SPECIALS] = [b"<pad>", b"<bos>", b"<eos>", b"<unk>"];

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("target vocab size {target} must exceed the base alphabet ({min})")]
    TargetTooSmall { target: usize, min: usize },
    #[error("token id {id} out of range for vocab of {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("vocab file, line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An immutable token-string ↔ id bijection plus ordered merge rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    pair_token: HashMap<(u32, u32), u32>,
}

impl Vocab {
    fn base() -> Self {
        let mut tokens: Vec<Vec<u8>> = SPECIAL_NAMES.iter().map(|s| s.to_vec()).collect();
        for b in 0u16..256 {
            tokens.push(vec![b as u8]);
        }
        Vocab {
            tokens,
            merges: Vec::new(),
            pair_token: HashMap::new(),
        }
    }

    /// Greedy BPE training: repeatedly merge the most frequent adjacent pair
    /// until `target_vocab_size` is reached or no pair occurs at least twice.
    /// Pairs are counted within pre-tokens, so merges never span a word
    /// boundary. Ties break toward the lexicographically smallest
    /// (left, right) byte strings, so training is deterministic.
    pub fn train_bpe<I, L>(corpus: I, target_vocab_size: usize) -> Result<Vocab, TokenizerError>
    where
        I: IntoIterator<Item = L>,
        L: AsRef<[u8]>,
    {
        let mut vocab = Vocab::base();
        let mut lines: Vec<Vec<u32>> = corpus
            .into_iter()
            .flat_map(|l| {
                split_pre_tokens(l.as_ref())
                    .map(|pt| pt.iter().map(|&b| N_SPECIALS as u32 + b as u32).collect())
                    .collect::<Vec<Vec<u32>>>()
            })
            .filter(|l: &Vec<u32>| !l.is_empty())
            .collect();
        if lines.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        if target_vocab_size <= BASE_VOCAB {
            return Err(TokenizerError::TargetTooSmall {
                target: target_vocab_size,
                min: BASE_VOCAB,
            });
        }

        while vocab.tokens.len() < target_vocab_size {
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for line in &lines {
                for w in line.windows(2) {
                    *counts.entry((w[0], w[1])).or_insert(0) += 1;
                }
            }
            let mut best: Option<((u32, u32), usize)> = None;
            for (&pair, &count) in &counts {
                if count < 2 {
                    continue;
                }
                best = match best {
                    None => Some((pair, count)),
                    Some((bp, bc)) => {
                        if count > bc
                            || (count == bc
                                && (vocab.token_bytes(pair.0), vocab.token_bytes(pair.1))
                                    < (vocab.token_bytes(bp.0), vocab.token_bytes(bp.1)))
                        {
                            Some((pair, count))
                        } else {
                            Some((bp, bc))
                        }
                    }
                };
            }
            let Some((pair, _)) = best else { break };
            let new_id = vocab.tokens.len() as u32;
            let mut bytes = vocab.token_bytes(pair.0).to_vec();
            bytes.extend_from_slice(vocab.token_bytes(pair.1));
            vocab.tokens.push(bytes);
            vocab.merges.push(pair);
            vocab.pair_token.insert(pair, new_id);
            for line in &mut lines {
                merge_pass(line, pair, new_id);
            }
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> &[u8] {
        &self.tokens[id as usize]
    }

    /// Applies merges in learned order within each pre-token; byte fallback
    /// covers every input.
    pub fn encode(&self, text: impl AsRef<[u8]>) -> Vec<u32> {
        let mut out = Vec::new();
        for pre in split_pre_tokens(text.as_ref()) {
            let mut ids: Vec<u32> = pre.iter().map(|&b| N_SPECIALS as u32 + b as u32).collect();
            for (rank, &pair) in self.merges.iter().enumerate() {
                if ids.len() < 2 {
                    break;
                }
                merge_pass(&mut ids, pair, (BASE_VOCAB + rank) as u32);
            }
            out.extend(ids);
        }
        out
    }

    /// Concatenates token byte strings; special tokens decode to nothing.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            if id as usize >= self.tokens.len() {
                return Err(TokenizerError::IdOutOfRange { id, vocab: self.tokens.len() });
            }
            if (id as usize) < N_SPECIALS {
                continue;
            }
            out.extend_from_slice(&self.tokens[id as usize]);
        }
        Ok(out)
    }

    pub fn decode_string(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        Ok(String::from_utf8_lossy(&self.decode(ids)?).into_owned())
    }

    /// Stable hash of the full vocabulary, used to assert that the backbone
    /// and the grounding encoder share one tokenizer.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for t in &self.tokens {
            for &b in t {
                eat(b);
            }
            eat(0xff);
        }
        for &(a, b) in &self.merges {
            for byte in a.to_le_bytes().into_iter().chain(b.to_le_bytes()) {
                eat(byte);
            }
        }
        h
    }

    // ── persistence ─────────────────────────────────────────────────

    /// Serializes as text: a header, one escaped line per token, then one
    /// line per merge pair.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("glimvocab 1\n");
        let _ = writeln!(out, "specials {PAD} {BOS} {EOS} {UNK}");
        let _ = writeln!(out, "tokens {}", self.tokens.len());
        for t in &self.tokens {
            let _ = writeln!(out, "t {}", escape_bytes(t));
        }
        let _ = writeln!(out, "merges {}", self.merges.len());
        for &(a, b) in &self.merges {
            let _ = writeln!(out, "m {a} {b}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Vocab, TokenizerError> {
        let fail = |line: usize, msg: &str| TokenizerError::Format { line, msg: msg.to_string() };
        let mut lines = text.lines().enumerate();
        let (ln, header) = lines.next().ok_or_else(|| fail(1, "empty file"))?;
        if header != "glimvocab 1" {
            return Err(fail(ln + 1, "bad magic, expected `glimvocab 1`"));
        }
        let (ln, specials) = lines.next().ok_or_else(|| fail(2, "missing specials line"))?;
        if specials != format!("specials {PAD} {BOS} {EOS} {UNK}") {
            return Err(fail(ln + 1, "unexpected specials line"));
        }
        let (ln, tok_header) = lines.next().ok_or_else(|| fail(3, "missing tokens line"))?;
        let n_tokens: usize = tok_header
            .strip_prefix("tokens ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(ln + 1, "expected `tokens <count>`"))?;
        if n_tokens < BASE_VOCAB {
            return Err(fail(ln + 1, "token count below base alphabet"));
        }
        let mut tokens = Vec::with_capacity(n_tokens);
        for i in 0..n_tokens {
            let (ln, line) = lines.next().ok_or_else(|| fail(0, "unexpected end of token list"))?;
            let body = line
                .strip_prefix("t ")
                .ok_or_else(|| fail(ln + 1, "expected `t <token>`"))?;
            let bytes = unescape_bytes(body).map_err(|msg| fail(ln + 1, &msg))?;
            if i < N_SPECIALS && bytes != SPECIAL_NAMES[i] {
                return Err(fail(ln + 1, "special token out of place"));
            }
            if (N_SPECIALS..BASE_VOCAB).contains(&i) && bytes != [(i - N_SPECIALS) as u8] {
                return Err(fail(ln + 1, "byte token out of place"));
            }
            tokens.push(bytes);
        }
        let (ln, merge_header) = lines.next().ok_or_else(|| fail(0, "missing merges line"))?;
        let n_merges: usize = merge_header
            .strip_prefix("merges ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(ln + 1, "expected `merges <count>`"))?;
        if n_tokens != BASE_VOCAB + n_merges {
            return Err(fail(ln + 1, "token count does not match base alphabet plus merges"));
        }
        let mut merges = Vec::with_capacity(n_merges);
        let mut pair_token = HashMap::new();
        for i in 0..n_merges {
            let (ln, line) = lines.next().ok_or_else(|| fail(0, "unexpected end of merge list"))?;
            let body = line
                .strip_prefix("m ")
                .ok_or_else(|| fail(ln + 1, "expected `m <left> <right>`"))?;
            let mut parts = body.split(' ');
            let a: u32 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| fail(ln + 1, "bad merge left id"))?;
            let b: u32 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| fail(ln + 1, "bad merge right id"))?;
            if parts.next().is_some() {
                return Err(fail(ln + 1, "trailing content on merge line"));
            }
            let merged_id = BASE_VOCAB + i;
            if a as usize >= merged_id || b as usize >= merged_id {
                return Err(fail(ln + 1, "merge references a token that does not exist yet"));
            }
            let mut expect = tokens[a as usize].clone();
            expect.extend_from_slice(&tokens[b as usize]);
            if expect != tokens[merged_id] {
                return Err(fail(ln + 1, "merged token bytes do not match pair concatenation"));
            }
            merges.push((a, b));
            pair_token.insert((a, b), merged_id as u32);
        }
        if lines.next().is_some() {
            return Err(fail(0, "trailing content after merge list"));
        }
        Ok(Vocab { tokens, merges, pair_token })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocab, TokenizerError> {
        let text = std::fs::read_to_string(path)?;
        Vocab::from_text(&text)
    }
}

/// Splits text into pre-tokens: a new pre-token starts at every whitespace
/// byte, so "the door." becomes ["the", " door."]. Concatenating pre-tokens
/// reproduces the input exactly.
fn split_pre_tokens(text: &[u8]) -> impl Iterator<Item = &[u8]> {
    let is_boundary = |b: u8| b == b' ' || b == b'\n' || b == b'\t' || b == b'\r';
    let mut starts = vec![0usize];
    for (i, &b) in text.iter().enumerate() {
        if i > 0 && is_boundary(b) {
            starts.push(i);
        }
    }
    starts.push(text.len());
    (0..starts.len() - 1)
        .map(move |i| &text[starts[i]..starts[i + 1]])
        .filter(|s| !s.is_empty())
}

/// One left-to-right pass replacing every adjacent `pair` with `new_id`.
fn merge_pass(ids: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut read = 0;
    let mut write = 0;
    while read < ids.len() {
        if read + 1 < ids.len() && ids[read] == pair.0 && ids[read + 1] == pair.1 {
            ids[write] = new_id;
            read += 2;
        } else {
            ids[write] = ids[read];
            read += 1;
        }
        write += 1;
    }
    ids.truncate(write);
}

fn escape_bytes(bytes: &[u8]) -> String {
    let mut out = String::new();
    for &b in bytes {
        match b {
            b'\\' => out.push_str("\\\\"),
            b'\n' => out.push_str("\\n"),
            b'\r' => out.push_str("\\r"),
            b'\t' => out.push_str("\\t"),
            0x20..=0x7e => out.push(b as char),
            _ => {
                let _ = write!(out, "\\x{b:02x}");
            }
        }
    }
    out
}

fn unescape_bytes(text: &str) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    let mut chars = text.bytes();
    while let Some(b) = chars.next() {
        if b != b'\\' {
            out.push(b);
            continue;
        }
        match chars.next() {
            Some(b'\\') => out.push(b'\\'),
            Some(b'n') => out.push(b'\n'),
            Some(b'r') => out.push(b'\r'),
            Some(b't') => out.push(b'\t'),
            Some(b'x') => {
                let hi = chars.next().ok_or("truncated \\x escape")?;
                let lo = chars.next().ok_or("truncated \\x escape")?;
                let hex = [hi, lo];
                let s = std::str::from_utf8(&hex).map_err(|_| "bad \\x escape")?;
                let v = u8::from_str_radix(s, 16).map_err(|_| "bad \\x escape")?;
                out.push(v);
            }
            other => return Err(format!("unknown escape {other:?}")),
        }
    }
    Ok(out)
}
