//! Okapi BM25 over repository files, used for the coarse retrieval pass.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::repo::RepoSnapshot;
use crate::skeleton::{extract_skeleton, FileDoc};

/// Candidates handed to the retrieval model.
pub const DEFAULT_TOP_K: usize = 30;

const ARTIFACT_FORMAT: &str = "issuefix-bm25-index";
const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate document path {0:?}")]
    DuplicatePath(String),
    #[error("unknown document id {0}")]
    UnknownDoc(usize),
    #[error("index artifact: {0}")]
    Artifact(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

/// Splits on non-alphanumeric characters and camel-case humps, lowercasing
/// every piece: `"HTTPError in parse_url()"` gives `http error in parse url`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split(|c: char| !c.is_alphanumeric()) {
        if word.is_empty() {
            continue;
        }
        split_camel(word, &mut tokens);
    }
    tokens
}

fn split_camel(word: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = word.chars().collect();
    let mut start = 0;
    for i in 1..chars.len() {
        let prev = chars[i - 1];
        let cur = chars[i];
        let next_lower = chars.get(i + 1).is_some_and(|c| c.is_lowercase());
        let boundary = cur.is_uppercase()
            && ((prev.is_lowercase() || prev.is_numeric()) || (prev.is_uppercase() && next_lower));
        if boundary {
            out.push(chars[start..i].iter().collect::<String>().to_lowercase());
            start = i;
        }
    }
    out.push(chars[start..].iter().collect::<String>().to_lowercase());
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: usize,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    params: Bm25Params,
    /// Document paths, sorted; a document's id is its position here.
    doc_paths: Vec<String>,
    doc_lens: Vec<usize>,
    avg_doc_len: f64,
    postings: BTreeMap<String, Vec<Posting>>,
}

#[derive(Serialize, Deserialize)]
struct Artifact {
    format: String,
    version: u32,
    index: Bm25Index,
}

impl Bm25Index {
    /// Indexes `(path, text)` documents. Document ids follow sorted path order
    /// so the index does not depend on input order.
    pub fn build<P, T>(docs: &[(P, T)], params: Bm25Params) -> Result<Self, IndexError>
    where
        P: AsRef<str> + Sync,
        T: AsRef<str> + Sync,
    {
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.sort_by(|&a, &b| docs[a].0.as_ref().cmp(docs[b].0.as_ref()));
        for w in order.windows(2) {
            if docs[w[0]].0.as_ref() == docs[w[1]].0.as_ref() {
                return Err(IndexError::DuplicatePath(docs[w[0]].0.as_ref().to_string()));
            }
        }
        let counted: Vec<(usize, BTreeMap<String, u32>)> = order
            .par_iter()
            .map(|&i| {
                let tokens = tokenize(docs[i].1.as_ref());
                let mut tf = BTreeMap::new();
                for t in &tokens {
                    *tf.entry(t.clone()).or_insert(0u32) += 1;
                }
                (tokens.len(), tf)
            })
            .collect();
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lens = Vec::with_capacity(docs.len());
        for (doc, (len, tf)) in counted.into_iter().enumerate() {
            doc_lens.push(len);
            for (term, tf) in tf {
                postings.entry(term).or_default().push(Posting { doc, tf });
            }
        }
        let avg_doc_len = if doc_lens.is_empty() {
            0.0
        } else {
            doc_lens.iter().sum::<usize>() as f64 / doc_lens.len() as f64
        };
        Ok(Bm25Index {
            params,
            doc_paths: order.iter().map(|&i| docs[i].0.as_ref().to_string()).collect(),
            doc_lens,
            avg_doc_len,
            postings,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_count(&self) -> usize {
        self.doc_paths.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn doc_len(&self, doc: usize) -> Option<usize> {
        self.doc_lens.get(doc).copied()
    }

    pub fn doc_path(&self, doc: usize) -> Option<&str> {
        self.doc_paths.get(doc).map(String::as_str)
    }

    pub fn doc_id(&self, path: &str) -> Option<usize> {
        self.doc_paths.binary_search_by(|p| p.as_str().cmp(path)).ok()
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`, never negative.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count() as f64;
        let df = self.postings(term).len() as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, doc_len: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = if self.avg_doc_len > 0.0 {
            1.0 - b + b * doc_len as f64 / self.avg_doc_len
        } else {
            1.0
        };
        idf * (tf * (k1 + 1.0)) / (tf + k1 * norm)
    }

    /// BM25 score of one document; repeated query terms count once.
    pub fn score(&self, query_tokens: &[String], doc: usize) -> Result<f64, IndexError> {
        let doc_len = self.doc_len(doc).ok_or(IndexError::UnknownDoc(doc))?;
        let mut total = 0.0;
        for term in unique_terms(query_tokens) {
            let postings = self.postings(term);
            if let Ok(pos) = postings.binary_search_by_key(&doc, |p| p.doc) {
                total += self.term_weight(self.idf(term), postings[pos].tf, doc_len);
            }
        }
        Ok(total)
    }

    /// Scores every document at once by walking the query terms' postings.
    pub fn score_all(&self, query_tokens: &[String]) -> Vec<f64> {
        let mut scores = vec![0.0; self.doc_count()];
        for term in unique_terms(query_tokens) {
            let idf = self.idf(term);
            for p in self.postings(term) {
                scores[p.doc] += self.term_weight(idf, p.tf, self.doc_lens[p.doc]);
            }
        }
        scores
    }

    /// The `k` best documents, highest score first, ties by path.
    pub fn top_k(&self, query_text: &str, k: usize) -> Vec<(String, f64)> {
        let scores = self.score_all(&tokenize(query_text));
        let mut ranked: Vec<usize> = (0..self.doc_count()).collect();
        // ids are in path order, so a stable sort on score keeps path ties ordered
        ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        ranked
            .into_iter()
            .take(k)
            .map(|d| (self.doc_paths[d].clone(), scores[d]))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&Artifact {
            format: ARTIFACT_FORMAT.to_string(),
            version: ARTIFACT_VERSION,
            index: self.clone(),
        })
        .expect("index serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, IndexError> {
        let artifact: Artifact =
            serde_json::from_str(text).map_err(|e| IndexError::Artifact(e.to_string()))?;
        if artifact.format != ARTIFACT_FORMAT || artifact.version != ARTIFACT_VERSION {
            return Err(IndexError::Artifact(format!(
                "unsupported artifact {} v{}",
                artifact.format, artifact.version
            )));
        }
        let index = artifact.index;
        if index.doc_lens.len() != index.doc_paths.len()
            || index
                .postings
                .values()
                .flatten()
                .any(|p| p.doc >= index.doc_paths.len())
        {
            return Err(IndexError::Artifact("inconsistent document tables".into()));
        }
        Ok(index)
    }
}

fn unique_terms(tokens: &[String]) -> impl Iterator<Item = &str> {
    let mut seen = HashSet::new();
    tokens
        .iter()
        .map(String::as_str)
        .filter(move |t| seen.insert(*t))
}

/// What text stands in for each file when indexing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DocSource {
    #[default]
    Skeleton,
    Content,
}

/// Retrieval corpus of a snapshot: the index plus the skeleton of every
/// indexed file, keyed by path.
#[derive(Debug, Clone)]
pub struct SnapshotIndex {
    pub index: Bm25Index,
    pub docs: HashMap<String, FileDoc>,
}

impl SnapshotIndex {
    /// Indexes the non-test source files of `snapshot`.
    pub fn build(snapshot: &RepoSnapshot, params: Bm25Params, source: DocSource) -> Self {
        let files: Vec<_> = snapshot.retrievable_files().collect();
        let docs: Vec<FileDoc> = files
            .par_iter()
            .map(|f| match source {
                DocSource::Skeleton => extract_skeleton(f),
                DocSource::Content => FileDoc::from_content(f),
            })
            .collect();
        let texts: Vec<(&str, &str)> = docs
            .iter()
            .map(|d| (d.path.as_str(), d.rendered.as_str()))
            .collect();
        let index = Bm25Index::build(&texts, params).expect("snapshot paths are unique");
        SnapshotIndex {
            index,
            docs: docs.into_iter().map(|d| (d.path.clone(), d)).collect(),
        }
    }

    /// Ranked skeletons for a query.
    pub fn ranked_docs(&self, query: &str, k: usize) -> Vec<&FileDoc> {
        self.index
            .top_k(query, k)
            .into_iter()
            .filter_map(|(p, _)| self.docs.get(&p))
            .collect()
    }
}
