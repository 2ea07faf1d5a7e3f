//! Byte-pair encoding over whitespace-pre-tokenized text.
//!
//! Words are split into characters with an end-of-word marker appended, then
//! the most frequent adjacent symbol pair is merged greedily, ties broken by
//! lexicographic order of the pair. Encoding applies the learned merges by
//! rank; decoding joins symbols and drops the marker, which restores the
//! original whitespace tokenization.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::TextError;

pub const WORD_END: &str = "</w>";

#[derive(Debug, Clone)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn train(corpus: &[String], merge_count: usize) -> Result<Self, TextError> {
        if corpus.is_empty() || corpus.iter().all(|line| line.split_whitespace().count() == 0) {
            return Err(TextError::EmptyCorpus);
        }
        // word -> frequency, in deterministic order
        let mut freq: HashMap<String, u64> = HashMap::new();
        for line in corpus {
            for word in line.split_whitespace() {
                *freq.entry(word.to_string()).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(Vec<String>, u64)> = {
            let mut pairs: Vec<(&String, &u64)> = freq.iter().collect();
            pairs.sort_by(|a, b| a.0.cmp(b.0));
            pairs
                .into_iter()
                .map(|(w, &n)| (char_symbols(w), n))
                .collect()
        };

        let mut merges = Vec::with_capacity(merge_count);
        for _ in 0..merge_count {
            let mut counts: HashMap<(String, String), u64> = HashMap::new();
            for (symbols, n) in &words {
                for pair in symbols.windows(2) {
                    *counts
                        .entry((pair[0].clone(), pair[1].clone()))
                        .or_insert(0) += n;
                }
            }
            let mut best: Option<((String, String), u64)> = None;
            for (pair, count) in counts {
                let better = match &best {
                    None => true,
                    Some((best_pair, best_count)) => {
                        count > *best_count || (count == *best_count && pair < *best_pair)
                    }
                };
                if better {
                    best = Some((pair, count));
                }
            }
            let Some((pair, _)) = best else { break };
            for (symbols, _) in &mut words {
                merge_pair(symbols, &pair);
            }
            merges.push(pair);
        }
        Ok(BpeModel::from_merges(merges))
    }

    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let ranks = merges
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, pair)| (pair, i))
            .collect();
        BpeModel { merges, ranks }
    }

    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    /// Split a word into subword symbols by applying merges in rank order.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols = char_symbols(word);
        loop {
            let mut best: Option<(usize, (String, String))> = None;
            for pair in symbols.windows(2) {
                let key = (pair[0].clone(), pair[1].clone());
                if let Some(&rank) = self.ranks.get(&key) {
                    if best.as_ref().is_none_or(|(r, _)| rank < *r) {
                        best = Some((rank, key));
                    }
                }
            }
            match best {
                Some((_, pair)) => merge_pair(&mut symbols, &pair),
                None => break,
            }
        }
        symbols
    }

    pub fn segment_sentence(&self, line: &str) -> Vec<String> {
        line.split_whitespace()
            .flat_map(|w| self.segment_word(w))
            .collect()
    }

    /// Inverse of segmentation: concatenate symbols and turn end-of-word
    /// markers back into spaces.
    pub fn join(symbols: &[String]) -> String {
        let mut text = String::new();
        for s in symbols {
            text.push_str(s);
        }
        text.split(WORD_END)
            .filter(|w| !w.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &str) -> Result<(), TextError> {
        let mut out = String::new();
        let _ = writeln!(out, "bpe-merges v1 {}", self.merges.len());
        for (a, b) in &self.merges {
            let _ = writeln!(out, "{a} {b}");
        }
        std::fs::write(path, out).map_err(|source| TextError::Io {
            path: path.to_string(),
            source,
        })
    }

    pub fn load(path: &str) -> Result<Self, TextError> {
        let body = super::read_to_string(path)?;
        let mut lines = body.lines();
        let header = lines.next().unwrap_or("");
        let parts: Vec<&str> = header.split_whitespace().collect();
        let count: usize = match parts.as_slice() {
            ["bpe-merges", "v1", n] => n.parse().map_err(|_| TextError::BadFormat {
                path: path.to_string(),
                line: 1,
                what: "merge count".to_string(),
            })?,
            _ => {
                return Err(TextError::BadFormat {
                    path: path.to_string(),
                    line: 1,
                    what: "header (expected `bpe-merges v1 <count>`)".to_string(),
                })
            }
        };
        let mut merges = Vec::with_capacity(count);
        for (i, line) in lines.enumerate() {
            let mut it = line.split(' ');
            match (it.next(), it.next(), it.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()));
                }
                _ => {
                    return Err(TextError::BadFormat {
                        path: path.to_string(),
                        line: i + 2,
                        what: "merge rule (expected `left right`)".to_string(),
                    })
                }
            }
        }
        if merges.len() != count {
            return Err(TextError::BadFormat {
                path: path.to_string(),
                line: merges.len() + 1,
                what: format!("expected {count} merges, found {}", merges.len()),
            });
        }
        Ok(BpeModel::from_merges(merges))
    }

    /// Every distinct symbol this model can emit for the given corpus, in
    /// (frequency desc, token asc) order; the usual vocabulary source.
    pub fn corpus_symbols(&self, corpus: &[String]) -> Vec<String> {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for line in corpus {
            for sym in self.segment_sentence(line) {
                *counts.entry(sym).or_insert(0) += 1;
            }
        }
        let mut items: Vec<(String, u64)> = counts.into_iter().collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        items.into_iter().map(|(s, _)| s).collect()
    }
}

fn char_symbols(word: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    symbols.push(WORD_END.to_string());
    symbols
}

/// Merge every left-to-right occurrence of `pair` in place.
fn merge_pair(symbols: &mut Vec<String>, pair: &(String, String)) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    *symbols = out;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_merge_on_aaab_learns_aa() {
        let corpus = vec!["aaab".to_string()];
        let model = BpeModel::train(&corpus, 1).unwrap();
        assert_eq!(model.merges, vec![("a".to_string(), "a".to_string())]);
        assert_eq!(model.segment_word("aaab"), vec!["aa", "a", "b", WORD_END]);
    }

    #[test]
    fn zero_merges_is_character_level() {
        let corpus = vec!["hi yo".to_string()];
        let model = BpeModel::train(&corpus, 0).unwrap();
        assert_eq!(model.merge_count(), 0);
        assert_eq!(model.segment_word("hi"), vec!["h", "i", WORD_END]);
    }

    #[test]
    fn encode_decode_round_trips_training_sentences() {
        let corpus = vec![
            "the cat sat on the mat".to_string(),
            "the dog sat on the log".to_string(),
        ];
        let model = BpeModel::train(&corpus, 20).unwrap();
        for line in &corpus {
            let symbols = model.segment_sentence(line);
            assert_eq!(BpeModel::join(&symbols), *line);
        }
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            BpeModel::train(&[], 5),
            Err(TextError::EmptyCorpus)
        ));
        assert!(matches!(
            BpeModel::train(&["   ".to_string()], 5),
            Err(TextError::EmptyCorpus)
        ));
    }

    #[test]
    fn ties_break_lexicographically() {
        // every pair occurs once; ("a", "</w>") is the lexicographic minimum
        let corpus = vec!["ba ab".to_string()];
        let model = BpeModel::train(&corpus, 1).unwrap();
        assert_eq!(model.merges[0], ("a".to_string(), WORD_END.to_string()));
    }

    #[test]
    fn save_load_round_trip() {
        let corpus = vec!["banana bandana".to_string()];
        let model = BpeModel::train(&corpus, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bpe.txt");
        model.save(path.to_str().unwrap()).unwrap();
        let loaded = BpeModel::load(path.to_str().unwrap()).unwrap();
        assert_eq!(loaded.merges, model.merges);
        assert_eq!(loaded.segment_word("banana"), model.segment_word("banana"));
    }

    #[test]
    fn load_rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bpe.txt");
        std::fs::write(&path, "merges 3\n").unwrap();
        assert!(BpeModel::load(path.to_str().unwrap()).is_err());
    }
}
