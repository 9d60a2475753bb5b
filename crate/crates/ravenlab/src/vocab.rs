//! Token vocabulary: character mode by default, or greedy byte-pair merges
//! learned from the corpus transcripts. Ids 0..=3 are reserved for blank
//! (CTC), start, end, and pad; content tokens follow densely.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RavenError, Result};

pub const BLANK: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const PAD: usize = 3;
pub const NUM_SPECIALS: usize = 4;

const SPACE_TOKEN: &str = "<space>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabMode {
    Character,
    Bpe,
}

#[derive(Clone, Debug)]
pub struct Vocab {
    pub mode: VocabMode,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    merges: Vec<(String, String)>,
}

impl Vocab {
    fn from_content(mode: VocabMode, content: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let mut tokens = vec![
            "<blank>".to_string(),
            "<sos>".to_string(),
            "<eos>".to_string(),
            "<pad>".to_string(),
        ];
        tokens.extend(content);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { mode, tokens, index, merges }
    }

    /// Character vocabulary over everything the transcripts contain.
    pub fn character(transcripts: &[String]) -> Result<Self> {
        let mut chars: Vec<char> = transcripts
            .iter()
            .flat_map(|t| t.chars())
            .filter(|c| *c != ' ')
            .collect();
        chars.sort_unstable();
        chars.dedup();
        if chars.is_empty() {
            return Err(RavenError::Vocab("no characters in corpus transcripts".into()));
        }
        let mut content = vec![SPACE_TOKEN.to_string()];
        content.extend(chars.iter().map(|c| c.to_string()));
        Ok(Vocab::from_content(VocabMode::Character, content, Vec::new()))
    }

    /// Greedy merge-frequency BPE: repeatedly merge the most frequent
    /// adjacent pair (ties broken by lexicographic pair order) until the
    /// content vocabulary reaches `target_size` or no pair repeats.
    pub fn bpe(transcripts: &[String], target_size: usize) -> Result<Self> {
        let base = Vocab::character(transcripts)?;
        let mut content: Vec<String> =
            base.tokens[NUM_SPECIALS..].iter().cloned().collect();
        let mut merges: Vec<(String, String)> = Vec::new();
        // Words as mutable symbol sequences, weighted by occurrence count.
        let mut words: HashMap<Vec<String>, usize> = HashMap::new();
        for t in transcripts {
            for word in t.split(' ').filter(|w| !w.is_empty()) {
                let symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
                *words.entry(symbols).or_insert(0) += 1;
            }
        }
        while content.len() < target_size {
            let mut pair_counts: HashMap<(String, String), usize> = HashMap::new();
            for (symbols, count) in &words {
                for pair in symbols.windows(2) {
                    *pair_counts
                        .entry((pair[0].clone(), pair[1].clone()))
                        .or_insert(0) += count;
                }
            }
            let best = pair_counts
                .into_iter()
                .filter(|(_, c)| *c >= 2)
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some(((left, right), _)) = best else {
                break;
            };
            let merged = format!("{left}{right}");
            let mut next: HashMap<Vec<String>, usize> = HashMap::new();
            for (symbols, count) in words {
                let mut out = Vec::with_capacity(symbols.len());
                let mut i = 0;
                while i < symbols.len() {
                    if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                        out.push(merged.clone());
                        i += 2;
                    } else {
                        out.push(symbols[i].clone());
                        i += 1;
                    }
                }
                *next.entry(out).or_insert(0) += count;
            }
            words = next;
            content.push(merged.clone());
            merges.push((left, right));
        }
        Ok(Vocab::from_content(VocabMode::Bpe, content, merges))
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn content_ids(&self) -> std::ops::Range<usize> {
        NUM_SPECIALS..self.size()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    fn encode_word(&self, word: &str) -> Result<Vec<usize>> {
        let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        for s in &symbols {
            if !self.index.contains_key(s) {
                return Err(RavenError::Vocab(format!("character {s:?} not in vocabulary")));
            }
        }
        if self.mode == VocabMode::Bpe {
            for (left, right) in &self.merges {
                let mut out = Vec::with_capacity(symbols.len());
                let mut i = 0;
                while i < symbols.len() {
                    if i + 1 < symbols.len() && &symbols[i] == left && &symbols[i + 1] == right {
                        out.push(format!("{left}{right}"));
                        i += 2;
                    } else {
                        out.push(symbols[i].clone());
                        i += 1;
                    }
                }
                symbols = out;
            }
        }
        Ok(symbols.iter().map(|s| self.index[s]).collect())
    }

    /// Text -> content-token ids (no specials, no blank).
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        if text.is_empty() {
            return Err(RavenError::Vocab("cannot tokenize an empty string".into()));
        }
        let space = self.index[SPACE_TOKEN];
        let mut ids = Vec::new();
        for (i, word) in text.split(' ').enumerate() {
            if i > 0 {
                ids.push(space);
            }
            if !word.is_empty() {
                ids.extend(self.encode_word(word)?);
            }
        }
        Ok(ids)
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if id >= self.size() {
                return Err(RavenError::Vocab(format!("token id {id} out of range")));
            }
            if id < NUM_SPECIALS {
                continue;
            }
            if self.tokens[id] == SPACE_TOKEN {
                out.push(' ');
            } else {
                out.push_str(&self.tokens[id]);
            }
        }
        Ok(out)
    }

    /// Line-delimited vocab file with a header line `mode size`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mode = match self.mode {
            VocabMode::Character => "character",
            VocabMode::Bpe => "bpe",
        };
        let mut out = format!("{mode} {}\n", self.size());
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        for (l, r) in &self.merges {
            out.push_str(&format!("#merge {l} {r}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| RavenError::Vocab("empty vocab file".into()))?;
        let mut parts = header.split(' ');
        let mode = match parts.next() {
            Some("character") => VocabMode::Character,
            Some("bpe") => VocabMode::Bpe,
            other => {
                return Err(RavenError::Vocab(format!("unknown vocab mode {other:?}")));
            }
        };
        let size: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| RavenError::Vocab("bad vocab header".into()))?;
        let mut tokens = Vec::with_capacity(size);
        let mut merges = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("#merge ") {
                let mut it = rest.splitn(2, ' ');
                let l = it.next().unwrap_or_default().to_string();
                let r = it.next().unwrap_or_default().to_string();
                merges.push((l, r));
            } else {
                tokens.push(line.to_string());
            }
        }
        if tokens.len() != size {
            return Err(RavenError::Vocab(format!(
                "vocab file lists {} tokens, header says {size}",
                tokens.len()
            )));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocab { mode, tokens, index, merges })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn character_mode_maps_chars_to_ids() {
        let v = Vocab::character(&["ab".to_string()]).unwrap();
        let ids = v.tokenize("ab").unwrap();
        assert_eq!(ids.len(), 2);
        assert_eq!(ids[0], v.id("a").unwrap());
        assert_eq!(ids[1], v.id("b").unwrap());
    }

    #[test]
    fn empty_string_rejected() {
        let v = Vocab::character(&["ab".to_string()]).unwrap();
        assert!(v.tokenize("").is_err());
    }

    #[test]
    fn out_of_alphabet_rejected() {
        let v = Vocab::character(&["ab".to_string()]).unwrap();
        assert!(v.tokenize("az").is_err());
    }

    #[test]
    fn bpe_learns_ab_merge_on_three_string_corpus() {
        // Hand oracle: pairs (a,b) x3 dominate; first merge is "ab".
        let corpus =
            vec!["ab".to_string(), "ab c".to_string(), "ab".to_string()];
        let v = Vocab::bpe(&corpus, 10).unwrap();
        let ids = v.tokenize("ab").unwrap();
        assert_eq!(ids.len(), 1);
        assert_eq!(v.token(ids[0]), "ab");
    }

    #[test]
    fn round_trip_on_corpus_like_transcripts() {
        let transcripts: Vec<String> =
            vec!["a b c".into(), "c a f".into(), "f f b".into(), "a".into()];
        for vocab in [
            Vocab::character(&transcripts).unwrap(),
            Vocab::bpe(&transcripts, 12).unwrap(),
        ] {
            for t in &transcripts {
                let ids = vocab.tokenize(t).unwrap();
                assert!(ids.iter().all(|i| *i >= NUM_SPECIALS));
                assert_eq!(&vocab.detokenize(&ids).unwrap(), t);
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let transcripts = vec!["ab ab".to_string(), "ba".to_string()];
        let v = Vocab::bpe(&transcripts, 8).unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let w = Vocab::load(&path).unwrap();
        assert_eq!(v.size(), w.size());
        assert_eq!(v.tokenize("ab ba").unwrap(), w.tokenize("ab ba").unwrap());
    }
}
