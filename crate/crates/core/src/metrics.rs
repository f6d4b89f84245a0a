//! Text-generation metrics: smoothed BLEU-N with brevity penalty,
//! ROUGE-L F-score, METEOR with fragmentation penalty, and CIDEr with
//! TF-IDF n-gram cosine similarity.
//!
//! Matching is exact over lowercase tokens; every sample carries a
//! single reference.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ROUGE_BETA: f64 = 1.2;
pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;
pub const NGRAM_MAX: usize = 4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction/reference ids do not align; missing in predictions: {missing_in_predictions:?}, missing in references: {missing_in_references:?}")]
    IdMismatch {
        missing_in_predictions: Vec<String>,
        missing_in_references: Vec<String>,
    },
    #[error("no aligned prediction/reference pairs")]
    EmptyCorpus,
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("record {line}: {source}")]
    BadRecord {
        line: usize,
        source: serde_json::Error,
    },
}

/// One scored pair: candidate tokens against a single reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n && n >= 1 {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Smoothed BLEU-N: clipped n-gram precision with +1 smoothing for
/// n >= 2, uniform weights, and the brevity penalty. Zero unigram
/// precision (or an empty candidate) scores 0.
pub fn bleu(candidate: &[String], reference: &[String], n_max: usize) -> f64 {
    if candidate.is_empty() {
        log::warn!("bleu: empty candidate scores 0");
        return 0.0;
    }
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };

    let mut log_sum = 0.0;
    for n in 1..=n_max {
        let cand_counts = ngram_counts(candidate, n);
        let ref_counts = ngram_counts(reference, n);
        let total: usize = cand_counts.values().sum();
        let matches: usize = cand_counts
            .iter()
            .map(|(gram, &count)| count.min(*ref_counts.get(gram).unwrap_or(&0)))
            .sum();
        let p = if n == 1 {
            if matches == 0 {
                return 0.0;
            }
            matches as f64 / total as f64
        } else {
            (matches + 1) as f64 / (total + 1) as f64
        };
        log_sum += p.ln() / n_max as f64;
    }
    bp * log_sum.exp()
}

/// Longest common subsequence length via dynamic programming.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let (m, n) = (a.len(), b.len());
    let mut dp = vec![vec![0usize; n + 1]; m + 1];
    for i in 1..=m {
        for j in 1..=n {
            dp[i][j] = if a[i - 1] == b[j - 1] {
                dp[i - 1][j - 1] + 1
            } else {
                dp[i - 1][j].max(dp[i][j - 1])
            };
        }
    }
    dp[m][n]
}

/// ROUGE-L F-score with recall weight `beta`.
pub fn rouge_l(candidate: &[String], reference: &[String], beta: f64) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    (1.0 + beta * beta) * p * r / (r + beta * beta * p)
}

/// Maximal one-to-one exact-match alignment statistics: the number of
/// matches and the fewest chunks any maximal alignment can form.
pub fn alignment_stats(candidate: &[String], reference: &[String]) -> (usize, usize) {
    let mut ref_budget: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *ref_budget.entry(t).or_insert(0) += 1;
    }
    let mut need: HashMap<&str, usize> = HashMap::new();
    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    for t in candidate {
        *cand_counts.entry(t).or_insert(0) += 1;
    }
    for (t, &cc) in &cand_counts {
        let rc = *ref_budget.get(t).unwrap_or(&0);
        let m = cc.min(rc);
        if m > 0 {
            need.insert(t, m);
        }
    }
    let total: usize = need.values().sum();
    if total == 0 {
        return (0, 0);
    }

    // Remaining candidate occurrences of each word at or after a position.
    let mut suffix: Vec<HashMap<&str, usize>> = vec![HashMap::new(); candidate.len() + 1];
    for i in (0..candidate.len()).rev() {
        suffix[i] = suffix[i + 1].clone();
        *suffix[i].entry(candidate[i].as_str()).or_insert(0) += 1;
    }

    struct Search<'a> {
        candidate: &'a [String],
        reference: &'a [String],
        suffix: Vec<HashMap<&'a str, usize>>,
        best: usize,
    }
    impl<'a> Search<'a> {
        fn go(
            &mut self,
            pos: usize,
            used: &mut Vec<bool>,
            need: &mut HashMap<&'a str, usize>,
            last: Option<(usize, usize)>,
            chunks: usize,
        ) {
            if chunks >= self.best {
                return;
            }
            if pos == self.candidate.len() {
                if need.values().all(|&n| n == 0) {
                    self.best = chunks;
                }
                return;
            }
            let word = self.candidate[pos].as_str();
            let remaining = need.get(word).copied().unwrap_or(0);
            if remaining > 0 {
                for j in 0..self.reference.len() {
                    if used[j] || self.reference[j] != word {
                        continue;
                    }
                    let adjacent = matches!(last, Some((lc, lr)) if lc + 1 == pos && lr + 1 == j);
                    let next_chunks = if adjacent { chunks } else { chunks + 1 };
                    used[j] = true;
                    *need.get_mut(word).unwrap() -= 1;
                    self.go(pos + 1, used, need, Some((pos, j)), next_chunks);
                    *need.get_mut(word).unwrap() += 1;
                    used[j] = false;
                }
            }
            // Leave this occurrence unmatched when later occurrences can
            // still satisfy the word's match budget.
            let later = self
                .suffix[pos + 1]
                .get(word)
                .copied()
                .unwrap_or(0);
            if later >= remaining {
                self.go(pos + 1, used, need, last, chunks);
            }
        }
    }

    let mut search = Search {
        candidate,
        reference,
        suffix,
        best: total + 1,
    };
    let mut used = vec![false; reference.len()];
    let mut need_mut = need.clone();
    search.go(0, &mut used, &mut need_mut, None, 0);
    (total, search.best)
}

/// METEOR: harmonic F over exact unigram matches with a fragmentation
/// penalty over the fewest-chunk maximal alignment.
pub fn meteor(
    candidate: &[String],
    reference: &[String],
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (m, chunks) = alignment_stats(candidate, reference);
    if m == 0 {
        return 0.0;
    }
    let m = m as f64;
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let f = p * r / (alpha * p + (1.0 - alpha) * r);
    let frag = chunks as f64 / m;
    let penalty = gamma * frag.powf(beta);
    f * (1.0 - penalty)
}

/// Document frequencies of reference n-grams, per n.
#[derive(Debug, Clone, Default)]
pub struct CorpusStats {
    df: Vec<HashMap<Vec<String>, usize>>,
    pub reference_count: usize,
}

impl CorpusStats {
    pub fn build(references: &[Vec<String>], n_max: usize) -> CorpusStats {
        let mut df = vec![HashMap::new(); n_max];
        for reference in references {
            for (n, table) in df.iter_mut().enumerate() {
                let mut seen: BTreeSet<Vec<String>> = BTreeSet::new();
                if reference.len() >= n + 1 {
                    for gram in reference.windows(n + 1) {
                        seen.insert(gram.to_vec());
                    }
                }
                for gram in seen {
                    *table.entry(gram).or_insert(0) += 1;
                }
            }
        }
        CorpusStats {
            df,
            reference_count: references.len(),
        }
    }

    /// `max(0, ln(refCount / (1 + df)))`.
    fn idf(&self, n: usize, gram: &[String]) -> f64 {
        let df = *self.df[n].get(gram).unwrap_or(&0);
        (self.reference_count as f64 / (1 + df) as f64).ln().max(0.0)
    }

    /// TF-IDF vector of a sentence's n-grams for one n.
    fn tfidf<'a>(&self, tokens: &'a [String], n: usize) -> HashMap<&'a [String], f64> {
        let mut vec = HashMap::new();
        if tokens.len() >= n + 1 {
            for gram in tokens.windows(n + 1) {
                *vec.entry(gram).or_insert(0.0) += 1.0;
            }
        }
        for (gram, w) in vec.iter_mut() {
            *w *= self.idf(n, gram);
        }
        vec
    }
}

fn cosine(a: &HashMap<&[String], f64>, b: &HashMap<&[String], f64>) -> f64 {
    let na: f64 = a.values().map(|w| w * w).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|w| w * w).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a
        .iter()
        .filter_map(|(gram, w)| b.get(gram).map(|v| w * v))
        .sum();
    dot / (na * nb)
}

/// CIDEr over a corpus: per-sample scores (range `[0, 10]` via the
/// `10/N` combination weights) and their mean.
pub fn cider(
    pairs: &[EvalPair],
    stats: &CorpusStats,
    n_max: usize,
) -> (Vec<f64>, f64) {
    let weight = 10.0 / n_max as f64;
    let scores: Vec<f64> = pairs
        .iter()
        .map(|pair| {
            (0..n_max)
                .map(|n| {
                    let gc = stats.tfidf(&pair.candidate, n);
                    let gr = stats.tfidf(&pair.reference, n);
                    weight * cosine(&gc, &gr)
                })
                .sum()
        })
        .collect();
    let mean = if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    (scores, mean)
}

/// Corpus-level report. BLEU-4, METEOR, and ROUGE-L are sentence-level
/// scores averaged over samples and reported in percentages; CIDEr is a
/// real value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub bleu_4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BLEU-4: {:.2}", self.bleu_4)?;
        writeln!(f, "METEOR: {:.2}", self.meteor)?;
        writeln!(f, "ROUGE-L: {:.2}", self.rouge_l)?;
        write!(f, "CIDER: {:.2}", self.cider)
    }
}

/// Score id-aligned predictions against references.
pub fn evaluate_corpus(
    predictions: &[(String, Vec<String>)],
    references: &[(String, Vec<String>)],
) -> Result<Report, MetricsError> {
    let pred_ids: BTreeSet<&String> = predictions.iter().map(|(id, _)| id).collect();
    let ref_ids: BTreeSet<&String> = references.iter().map(|(id, _)| id).collect();
    let missing_in_predictions: Vec<String> = ref_ids
        .difference(&pred_ids)
        .map(|s| (*s).clone())
        .collect();
    let missing_in_references: Vec<String> = pred_ids
        .difference(&ref_ids)
        .map(|s| (*s).clone())
        .collect();
    if !missing_in_predictions.is_empty() || !missing_in_references.is_empty() {
        return Err(MetricsError::IdMismatch {
            missing_in_predictions,
            missing_in_references,
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }

    let by_id: HashMap<&String, &Vec<String>> =
        references.iter().map(|(id, toks)| (id, toks)).collect();
    let pairs: Vec<EvalPair> = predictions
        .iter()
        .map(|(id, cand)| EvalPair {
            candidate: cand.clone(),
            reference: (*by_id[id]).clone(),
        })
        .collect();

    let n = pairs.len() as f64;
    let bleu_mean = pairs
        .iter()
        .map(|p| bleu(&p.candidate, &p.reference, NGRAM_MAX))
        .sum::<f64>()
        / n;
    let meteor_mean = pairs
        .iter()
        .map(|p| meteor(&p.candidate, &p.reference, METEOR_ALPHA, METEOR_BETA, METEOR_GAMMA))
        .sum::<f64>()
        / n;
    let rouge_mean = pairs
        .iter()
        .map(|p| rouge_l(&p.candidate, &p.reference, ROUGE_BETA))
        .sum::<f64>()
        / n;
    let ref_tokens: Vec<Vec<String>> = pairs.iter().map(|p| p.reference.clone()).collect();
    let stats = CorpusStats::build(&ref_tokens, NGRAM_MAX);
    let (_, cider_mean) = cider(&pairs, &stats, NGRAM_MAX);

    Ok(Report {
        bleu_4: 100.0 * bleu_mean,
        meteor: 100.0 * meteor_mean,
        rouge_l: 100.0 * rouge_mean,
        cider: cider_mean,
    })
}

/// One prediction or reference record: `{"id": ..., "tokens": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenRecord {
    pub id: String,
    pub tokens: Vec<String>,
}

pub fn read_token_records(path: &Path) -> Result<Vec<(String, Vec<String>)>, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TokenRecord = serde_json::from_str(line)
            .map_err(|source| MetricsError::BadRecord { line: i + 1, source })?;
        out.push((rec.id, rec.tokens));
    }
    Ok(out)
}

pub fn write_token_records(
    path: &Path,
    records: &[(String, Vec<String>)],
) -> Result<(), MetricsError> {
    let mut text = String::new();
    for (id, tokens) in records {
        let rec = TokenRecord {
            id: id.clone(),
            tokens: tokens.clone(),
        };
        text.push_str(&serde_json::to_string(&rec).expect("record json"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}
