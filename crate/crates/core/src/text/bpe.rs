//! Byte-level BPE: training, encoding, decoding and the on-disk vocabulary format.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const SPECIAL_NAMES: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
const N_SPECIAL: usize = SPECIAL_NAMES.len();
const FIRST_BYTE_ID: u32 = N_SPECIAL as u32;
const HEADER: &str = "#lyricfusion-vocab v1";

/// Smallest legal vocabulary: the specials plus one token per byte.
pub const MIN_VOCAB: usize = N_SPECIAL + 256;

/// Token table plus ordered merge rules.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    /// Byte content of each id; empty for specials.
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.merges == other.merges
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Space,
    Word,
    Other,
}

fn class(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if c.is_alphanumeric() {
        CharClass::Word
    } else {
        CharClass::Other
    }
}

/// Splits text into runs of one character class; a single space before a
/// non-space run is moved onto that run. Concatenating the pieces gives back
/// the input.
pub(crate) fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut runs: Vec<(usize, usize, CharClass)> = Vec::new();
    for (i, c) in text.char_indices() {
        let cl = class(c);
        match runs.last_mut() {
            Some(last) if last.2 == cl => last.1 = i + c.len_utf8(),
            _ => runs.push((i, i + c.len_utf8(), cl)),
        }
    }
    let mut pieces = Vec::with_capacity(runs.len());
    let mut carry_from: Option<usize> = None;
    for (idx, &(start, end, cl)) in runs.iter().enumerate() {
        let start = carry_from.take().unwrap_or(start);
        if cl == CharClass::Space && text[..end].ends_with(' ') && idx + 1 < runs.len() {
            if end - 1 > start {
                pieces.push(&text[start..end - 1]);
            }
            carry_from = Some(end - 1);
        } else {
            pieces.push(&text[start..end]);
        }
    }
    pieces
}

/// GPT-2 style printable stand-ins for raw bytes, used only in the vocabulary file.
fn byte_to_char_table() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| (33..=126).contains(&b) || (161..=172).contains(&b) || (174..=255).contains(&b);
    let mut extra = 0;
    for b in 0..256u32 {
        table[b as usize] = if printable(b) {
            char::from_u32(b).expect("latin-1")
        } else {
            extra += 1;
            char::from_u32(255 + extra).expect("shifted code point")
        };
    }
    table
}

impl Vocabulary {
    fn base() -> Self {
        let mut tokens: Vec<Vec<u8>> = vec![Vec::new(); N_SPECIAL];
        tokens.extend((0..=255u8).map(|b| vec![b]));
        Vocabulary {
            tokens,
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    fn push_merge(&mut self, a: u32, b: u32) -> u32 {
        let mut bytes = self.tokens[a as usize].clone();
        bytes.extend_from_slice(&self.tokens[b as usize]);
        let id = self.tokens.len() as u32;
        self.tokens.push(bytes);
        self.ranks.insert((a, b), (self.merges.len(), id));
        self.merges.push((a, b));
        id
    }

    /// Trains byte-level BPE on `corpus`, merging the most frequent adjacent
    /// pair until the vocabulary holds `cap` entries or no pair remains. Ties go
    /// to the lexicographically smallest `(left bytes, right bytes)`.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, cap: usize) -> Result<Vocabulary> {
        if cap < MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocabulary cap {cap} is below the minimum {MIN_VOCAB} (specials + 256 bytes)"
            )));
        }
        let mut word_counts: BTreeMap<&[u8], u64> = BTreeMap::new();
        let mut any = false;
        for text in corpus {
            any = true;
            for piece in pre_tokenize(text) {
                *word_counts.entry(piece.as_bytes()).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::pre("build_vocab", "corpus is empty"));
        }
        let mut vocab = Vocabulary::base();
        let mut words: Vec<(Vec<u32>, u64)> = word_counts
            .into_iter()
            .map(|(w, c)| (w.iter().map(|&b| FIRST_BYTE_ID + b as u32).collect(), c))
            .collect();

        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for (wi, (syms, c)) in words.iter().enumerate() {
            for p in syms.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += c;
                pair_words.entry((p[0], p[1])).or_default().insert(wi);
            }
        }

        while vocab.tokens.len() < cap {
            let best = pair_counts
                .iter()
                .filter(|(_, &c)| c > 0)
                .max_by(|(pa, ca), (pb, cb)| {
                    ca.cmp(cb).then_with(|| {
                        let ka = (&vocab.tokens[pa.0 as usize], &vocab.tokens[pa.1 as usize]);
                        let kb = (&vocab.tokens[pb.0 as usize], &vocab.tokens[pb.1 as usize]);
                        kb.cmp(&ka)
                    })
                })
                .map(|(&p, _)| p);
            let Some(pair) = best else { break };
            let new_id = vocab.push_merge(pair.0, pair.1);
            let mut affected: Vec<usize> = pair_words.remove(&pair).unwrap_or_default().into_iter().collect();
            affected.sort_unstable();
            for wi in affected {
                let (syms, c) = &mut words[wi];
                for p in syms.windows(2) {
                    let key = (p[0], p[1]);
                    if let Some(v) = pair_counts.get_mut(&key) {
                        *v -= *c;
                    }
                    if let Some(set) = pair_words.get_mut(&key) {
                        set.remove(&wi);
                    }
                }
                let mut merged = Vec::with_capacity(syms.len());
                let mut i = 0;
                while i < syms.len() {
                    if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
                        merged.push(new_id);
                        i += 2;
                    } else {
                        merged.push(syms[i]);
                        i += 1;
                    }
                }
                *syms = merged;
                for p in syms.windows(2) {
                    *pair_counts.entry((p[0], p[1])).or_default() += *c;
                    pair_words.entry((p[0], p[1])).or_default().insert(wi);
                }
            }
            pair_counts.remove(&pair);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < N_SPECIAL
    }

    /// Byte content of a token; `None` for specials and unknown ids.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        if Self::is_special(id) {
            return None;
        }
        self.tokens.get(id as usize).map(|t| t.as_slice())
    }

    fn encode_piece(&self, piece: &[u8], out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = piece.iter().map(|&b| FIRST_BYTE_ID + b as u32).collect();
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| self.ranks.get(&(p[0], p[1])).map(|&(rank, id)| (rank, i, id)))
                .min();
            let Some((_, i, id)) = best else { break };
            syms[i] = id;
            syms.remove(i + 1);
        }
        out.extend(syms);
    }

    /// Token ids for `text` without specials.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in pre_tokenize(text) {
            self.encode_piece(piece.as_bytes(), &mut out);
        }
        out
    }

    /// `bos + tokens + eos`, truncated so the row fits `max_len` (eos is always
    /// kept), then padded to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<EncodedRow> {
        let mut row = self.encode_unpadded(text, max_len)?;
        let real = row.ids.len();
        row.ids.resize(max_len, PAD);
        row.mask = (0..max_len).map(|i| i < real).collect();
        Ok(row)
    }

    /// Like [`Vocabulary::encode`] without the trailing padding.
    pub fn encode_unpadded(&self, text: &str, max_len: usize) -> Result<EncodedRow> {
        if max_len < 2 {
            return Err(Error::Config(format!("max_len {max_len} cannot hold bos and eos")));
        }
        let mut tokens = self.tokenize(text);
        tokens.truncate(max_len - 2);
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(BOS);
        ids.extend(tokens);
        ids.push(EOS);
        let mask = vec![true; ids.len()];
        Ok(EncodedRow { ids, mask })
    }

    /// Drops specials and maps the remaining tokens back to text.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            if id as usize >= self.tokens.len() {
                return Err(Error::UnknownToken(id));
            }
            bytes.extend_from_slice(&self.tokens[id as usize]);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Serializes as a versioned UTF-8 document: one token per line, then merges.
    pub fn to_text(&self) -> String {
        let table = byte_to_char_table();
        let show = |bytes: &[u8]| bytes.iter().map(|&b| table[b as usize]).collect::<String>();
        let mut s = format!("{HEADER}\n#size {}\n", self.tokens.len());
        for (id, t) in self.tokens.iter().enumerate() {
            if id < N_SPECIAL {
                s.push_str(SPECIAL_NAMES[id]);
            } else {
                s.push_str(&show(t));
            }
            s.push('\n');
        }
        let _ = writeln!(s, "#merges {}", self.merges.len());
        for &(a, b) in &self.merges {
            let _ = writeln!(s, "{} {}", show(&self.tokens[a as usize]), show(&self.tokens[b as usize]));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Vocabulary> {
        let err = |line: usize, msg: &str| Error::Parse {
            path: "<vocabulary>".into(),
            line,
            msg: msg.into(),
        };
        let table = byte_to_char_table();
        let unmap: HashMap<char, u8> = table.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let to_bytes = |s: &str, line: usize| -> Result<Vec<u8>> {
            s.chars()
                .map(|c| unmap.get(&c).copied().ok_or_else(|| err(line, "character outside the byte map")))
                .collect()
        };
        let lines: Vec<&str> = text.lines().collect();
        if lines.first() != Some(&HEADER) {
            return Err(err(1, "missing or unsupported header"));
        }
        let size: usize = lines
            .get(1)
            .and_then(|l| l.strip_prefix("#size "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| err(2, "expected `#size N`"))?;
        if size < MIN_VOCAB || lines.len() < 3 + size {
            return Err(err(2, "size field inconsistent with contents"));
        }
        let mut vocab = Vocabulary::base();
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            if lines[2 + i] != *name {
                return Err(err(3 + i, "unexpected special token"));
            }
        }
        for b in 0..256usize {
            let line = 2 + N_SPECIAL + b;
            if to_bytes(lines[line], line + 1)? != [b as u8] {
                return Err(err(line + 1, "byte tokens out of order"));
            }
        }
        let merges_line = 2 + size;
        let n_merges: usize = lines
            .get(merges_line)
            .and_then(|l| l.strip_prefix("#merges "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| err(merges_line + 1, "expected `#merges N`"))?;
        if n_merges != size - MIN_VOCAB {
            return Err(err(merges_line + 1, "merge count does not match size"));
        }
        let mut by_bytes: HashMap<Vec<u8>, u32> = vocab
            .tokens
            .iter()
            .enumerate()
            .skip(N_SPECIAL)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for k in 0..n_merges {
            let ln = merges_line + 1 + k;
            let line = lines.get(ln).ok_or_else(|| err(ln + 1, "truncated merges"))?;
            let (l, r) = line.split_once(' ').ok_or_else(|| err(ln + 1, "expected `left right`"))?;
            let a = *by_bytes.get(&to_bytes(l, ln + 1)?).ok_or_else(|| err(ln + 1, "unknown left token"))?;
            let b = *by_bytes.get(&to_bytes(r, ln + 1)?).ok_or_else(|| err(ln + 1, "unknown right token"))?;
            let id = vocab.push_merge(a, b);
            let expect = to_bytes(lines[2 + id as usize], 3 + id as usize)?;
            if vocab.tokens[id as usize] != expect {
                return Err(err(ln + 1, "merge result disagrees with the token table"));
            }
            if by_bytes.insert(expect, id).is_some() {
                return Err(err(ln + 1, "duplicate token"));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// One encoded sequence and its attention mask (`true` = real token).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedRow {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CORPUS: &[&str] = &[
        "the night is young and the stars are bright",
        "the song is about a lost love, and the night that follows",
        "I think the singer is talking about the night sky",
    ];

    #[test]
    fn pre_tokenize_concatenates_back() {
        let text = "Hello,  world!\n It's  2am ";
        let pieces = pre_tokenize(text);
        assert_eq!(pieces.concat(), text);
        assert!(pieces.contains(&" world"));
    }

    #[test]
    fn specials_and_cap() {
        let v = Vocabulary::build(CORPUS.iter().copied(), MIN_VOCAB + 10).unwrap();
        assert_eq!(v.len(), MIN_VOCAB + 10);
        assert_eq!(v.decode(&[BOS, EOS]).unwrap(), "");
        assert!(Vocabulary::build(CORPUS.iter().copied(), MIN_VOCAB - 1).is_err());
        assert!(Vocabulary::build(std::iter::empty(), 1000).is_err());
        let tiny = Vocabulary::build(CORPUS.iter().copied(), MIN_VOCAB).unwrap();
        assert!(tiny.merges().is_empty());
    }

    #[test]
    fn most_frequent_pair_merged_first() {
        let v = Vocabulary::build(["aaab ab ab"], MIN_VOCAB + 1).unwrap();
        // "ab" occurs 3 times, "aa" and " a" twice each
        let (a, b) = v.merges()[0];
        assert_eq!(v.token_bytes(a).unwrap(), b"a");
        assert_eq!(v.token_bytes(b).unwrap(), b"b");
        // all pairs occur once; (" ", "a") is the smallest byte key
        let t = Vocabulary::build(["xy ab"], MIN_VOCAB + 1).unwrap();
        let (a, b) = t.merges()[0];
        assert_eq!((t.token_bytes(a).unwrap(), t.token_bytes(b).unwrap()), (&b" "[..], &b"a"[..]));
    }

    #[test]
    fn encode_examples() {
        let v = Vocabulary::build(CORPUS.iter().copied(), 300).unwrap();
        let row = v.encode("", 8).unwrap();
        assert_eq!(row.ids, vec![BOS, EOS, PAD, PAD, PAD, PAD, PAD, PAD]);
        assert_eq!(row.mask, vec![true, true, false, false, false, false, false, false]);

        let long = "the night ".repeat(40);
        let n = v.tokenize(&long).len();
        let max_len = n + 2 - 50;
        let row = v.encode(&long, max_len).unwrap();
        assert_eq!(row.ids.len(), max_len);
        assert_eq!(*row.ids.last().unwrap(), EOS);
        assert!(row.mask.iter().all(|&m| m));
    }

    #[test]
    fn decode_rejects_unknown_ids_and_skips_pads() {
        let v = Vocabulary::build(CORPUS.iter().copied(), 300).unwrap();
        assert!(matches!(v.decode(&[9999]), Err(Error::UnknownToken(9999))));
        let mut row = v.encode("night", 10).unwrap().ids;
        row.push(PAD);
        assert_eq!(v.decode(&row).unwrap(), "night");
    }

    #[test]
    fn text_format_round_trip() {
        let v = Vocabulary::build(CORPUS.iter().copied(), 320).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("#lyricfusion-vocab v1\n#size 320\n<pad>\n<s>\n</s>\n<unk>\n"));
        let back = Vocabulary::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.tokenize("the night sky"), v.tokenize("the night sky"));
        assert!(Vocabulary::from_text("#other v9\n").is_err());
    }

    #[test]
    fn deterministic_training() {
        let a = Vocabulary::build(CORPUS.iter().copied(), 340).unwrap();
        let b = Vocabulary::build(CORPUS.iter().copied(), 340).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    proptest! {
        #[test]
        fn round_trip_arbitrary_utf8(text in "\\PC{0,80}") {
            let v = Vocabulary::build(CORPUS.iter().copied(), 330).unwrap();
            let row = v.encode(&text, 4096).unwrap();
            prop_assert_eq!(v.decode(&row.ids).unwrap(), text.clone());
            let real = row.mask.iter().filter(|&&m| m).count();
            prop_assert_eq!(real, v.tokenize(&text).len() + 2);
            prop_assert!(row.ids[real..].iter().all(|&i| i == PAD));
            prop_assert!(!row.ids.contains(&UNK));
        }
    }
}
