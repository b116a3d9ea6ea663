//! Embedded document store with exact top-k retrieval by dot score.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{dot, EmbeddingScalar};

const MAGIC: &[u8; 4] = b"DRIX";
const VERSION: u8 = 0x01;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("embedding of {doc_id:?} has length {found}, index dimension is {expected}")]
    DimensionMismatch { doc_id: String, expected: usize, found: usize },
    #[error("duplicate document id {0:?}")]
    DuplicateDocId(String),
    #[error("document {0:?} has empty text")]
    EmptyText(String),
    #[error("no documents to search for language filter {0:?}")]
    EmptyCorpusForFilter(Vec<String>),
    #[error("invalid retrieval depth: k_final={k_final}, k_candidates={k_candidates}")]
    InvalidDepth { k_final: usize, k_candidates: usize },
    #[error("index dimension must be positive")]
    ZeroDimension,
    #[error("corrupt index: {0}")]
    CorruptIndex(String),
    #[error("line {line_no}: malformed corpus record: {reason}")]
    MalformedRecord { line_no: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A document of the knowledge base together with its embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentRecord<S> {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
    pub lang: String,
    #[serde(default = "Vec::new")]
    pub embedding: Vec<S>,
}

impl<S> DocumentRecord<S> {
    pub fn new(
        doc_id: impl Into<String>,
        title: impl Into<String>,
        text: impl Into<String>,
        lang: impl Into<String>,
        embedding: Vec<S>,
    ) -> Self {
        Self {
            doc_id: doc_id.into(),
            title: title.into(),
            text: text.into(),
            lang: lang.into(),
            embedding,
        }
    }
}

/// A scored document returned by [`CorpusIndex::retrieve`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalHit<'a, S> {
    pub document: &'a DocumentRecord<S>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusIndex<S> {
    dim: usize,
    documents: Vec<DocumentRecord<S>>,
    language_partitions: BTreeMap<String, Vec<usize>>,
}

/// Higher score first; equal scores by ascending document id.
fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

impl<S: EmbeddingScalar> CorpusIndex<S> {
    pub fn build(documents: Vec<DocumentRecord<S>>, dim: usize) -> Result<Self, IndexError> {
        if dim == 0 {
            return Err(IndexError::ZeroDimension);
        }
        let mut seen = HashSet::with_capacity(documents.len());
        let mut language_partitions: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (offset, doc) in documents.iter().enumerate() {
            if doc.embedding.len() != dim {
                return Err(IndexError::DimensionMismatch {
                    doc_id: doc.doc_id.clone(),
                    expected: dim,
                    found: doc.embedding.len(),
                });
            }
            if doc.text.is_empty() {
                return Err(IndexError::EmptyText(doc.doc_id.clone()));
            }
            if !seen.insert(doc.doc_id.as_str()) {
                return Err(IndexError::DuplicateDocId(doc.doc_id.clone()));
            }
            language_partitions.entry(doc.lang.clone()).or_default().push(offset);
        }
        Ok(Self {
            dim,
            documents,
            language_partitions,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn documents(&self) -> &[DocumentRecord<S>] {
        &self.documents
    }

    pub fn language_partitions(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.language_partitions
    }

    /// Top `k_candidates` documents by dot score, truncated to `k_final`.
    ///
    /// With `langs` set, only documents in those languages are scored. The scan
    /// is exhaustive, so the result is exact.
    pub fn retrieve(
        &self,
        query: &[S],
        k_candidates: usize,
        k_final: usize,
        langs: Option<&BTreeSet<String>>,
    ) -> Result<Vec<RetrievalHit<'_, S>>, IndexError> {
        if query.len() != self.dim {
            return Err(IndexError::DimensionMismatch {
                doc_id: "<query>".into(),
                expected: self.dim,
                found: query.len(),
            });
        }
        if k_final == 0 || k_final > k_candidates {
            return Err(IndexError::InvalidDepth { k_final, k_candidates });
        }

        let offsets: Vec<usize> = match langs {
            None => (0..self.documents.len()).collect(),
            Some(langs) => {
                let mut offsets: Vec<usize> = langs
                    .iter()
                    .filter_map(|l| self.language_partitions.get(l))
                    .flatten()
                    .copied()
                    .collect();
                offsets.sort_unstable();
                offsets
            }
        };
        if offsets.is_empty() {
            return Err(IndexError::EmptyCorpusForFilter(
                langs.map(|l| l.iter().cloned().collect()).unwrap_or_default(),
            ));
        }

        let mut scored: Vec<(f64, usize)> = offsets
            .into_iter()
            .map(|i| (dot(query, &self.documents[i].embedding), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            rank_order(a.0, &self.documents[a.1].doc_id, b.0, &self.documents[b.1].doc_id)
        };
        let keep = k_candidates.min(scored.len());
        if keep < scored.len() {
            scored.select_nth_unstable_by(keep - 1, cmp);
            scored.truncate(keep);
        }
        scored.sort_unstable_by(cmp);
        scored.truncate(k_final);

        Ok(scored
            .into_iter()
            .map(|(score, i)| RetrievalHit {
                document: &self.documents[i],
                score,
            })
            .collect())
    }
}

impl CorpusIndex<f32> {
    /// Writes the binary index format: `DRIX`, version byte, then little-endian
    /// `u32` dim, `u64` count and, per document, `u32`-length-prefixed UTF-8
    /// id/title/text/lang followed by `dim` `f32` values.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<(), IndexError> {
        out.write_all(MAGIC)?;
        out.write_all(&[VERSION])?;
        let dim = u32::try_from(self.dim).map_err(|_| IndexError::CorruptIndex("dimension exceeds u32".into()))?;
        out.write_all(&dim.to_le_bytes())?;
        out.write_all(&(self.documents.len() as u64).to_le_bytes())?;
        for doc in &self.documents {
            for field in [&doc.doc_id, &doc.title, &doc.text, &doc.lang] {
                let len = u32::try_from(field.len())
                    .map_err(|_| IndexError::CorruptIndex(format!("field of {:?} exceeds u32 length", doc.doc_id)))?;
                out.write_all(&len.to_le_bytes())?;
                out.write_all(field.as_bytes())?;
            }
            for value in &doc.embedding {
                out.write_all(&value.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let mut input = BufReader::new(fs::File::open(path)?);
        Self::read_from(&mut input)
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self, IndexError> {
        let mut reader = Reader(input);
        let magic = reader.bytes(4, "magic")?;
        if magic != MAGIC {
            return Err(IndexError::CorruptIndex("bad magic bytes".into()));
        }
        let version = reader.bytes(1, "version")?[0];
        if version != VERSION {
            return Err(IndexError::CorruptIndex(format!("unsupported version {version:#04x}")));
        }
        let dim = reader.u32("dimension")? as usize;
        let count = reader.u64("document count")?;
        let mut documents = Vec::new();
        for n in 0..count {
            let mut fields = Vec::with_capacity(4);
            for name in ["doc_id", "title", "text", "lang"] {
                let len = reader.u32(name)? as usize;
                let raw = reader.bytes(len, name)?;
                let text = String::from_utf8(raw)
                    .map_err(|_| IndexError::CorruptIndex(format!("document {n}: {name} is not UTF-8")))?;
                fields.push(text);
            }
            let raw = reader.bytes(dim * 4, "embedding")?;
            let embedding = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let lang = fields.pop().unwrap_or_default();
            let text = fields.pop().unwrap_or_default();
            let title = fields.pop().unwrap_or_default();
            let doc_id = fields.pop().unwrap_or_default();
            documents.push(DocumentRecord {
                doc_id,
                title,
                text,
                lang,
                embedding,
            });
        }
        let mut probe = [0u8; 1];
        if reader.0.read(&mut probe)? != 0 {
            return Err(IndexError::CorruptIndex("trailing bytes after last document".into()));
        }
        Self::build(documents, dim).map_err(|e| match e {
            IndexError::Io(e) => IndexError::Io(e),
            other => IndexError::CorruptIndex(other.to_string()),
        })
    }
}

struct Reader<'r, R: Read>(&'r mut R);

impl<R: Read> Reader<'_, R> {
    fn bytes(&mut self, len: usize, what: &str) -> Result<Vec<u8>, IndexError> {
        let mut buf = Vec::new();
        let got = (&mut *self.0).take(len as u64).read_to_end(&mut buf)?;
        if got != len {
            return Err(IndexError::CorruptIndex(format!("truncated while reading {what}")));
        }
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32, IndexError> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64, IndexError> {
        let b = self.bytes(8, what)?;
        let mut arr = [0u8; 8];
        arr.copy_from_slice(&b);
        Ok(u64::from_le_bytes(arr))
    }
}

/// Reads line-delimited corpus records. Embeddings may be absent (pool files).
pub fn read_documents<S>(path: impl AsRef<Path>) -> Result<Vec<DocumentRecord<S>>, IndexError>
where
    S: for<'de> Deserialize<'de>,
{
    let reader = BufReader::new(fs::File::open(path)?);
    let mut docs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: DocumentRecord<S> = serde_json::from_str(&line).map_err(|e| IndexError::MalformedRecord {
            line_no: idx + 1,
            reason: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str, lang: &str, e: Vec<f32>) -> DocumentRecord<f32> {
        DocumentRecord::new(id, "", format!("text of {id}"), lang, e)
    }

    fn unit_docs() -> CorpusIndex<f32> {
        CorpusIndex::build(
            vec![
                doc("e1", "en", vec![1.0, 0.0]),
                doc("e2", "de", vec![0.0, 1.0]),
                doc("e3", "en", vec![0.6, 0.8]),
            ],
            2,
        )
        .unwrap()
    }

    fn ids<S>(hits: &[RetrievalHit<'_, S>]) -> Vec<String> {
        hits.iter().map(|h| h.document.doc_id.clone()).collect()
    }

    #[test]
    fn builds_three_doc_index() {
        let index = unit_docs();
        assert_eq!(index.len(), 3);
        assert_eq!(index.language_partitions()["en"], vec![0, 2]);
    }

    #[test]
    fn rejects_wrong_dimension() {
        let err = CorpusIndex::build(vec![doc("x", "en", vec![1.0, 2.0, 3.0])], 2).unwrap_err();
        assert!(matches!(err, IndexError::DimensionMismatch { found: 3, .. }));
    }

    #[test]
    fn rejects_duplicate_ids_and_empty_text() {
        let err = CorpusIndex::build(vec![doc("x", "en", vec![1.0]), doc("x", "en", vec![2.0])], 1).unwrap_err();
        assert!(matches!(err, IndexError::DuplicateDocId(_)));
        let mut empty = doc("y", "en", vec![1.0]);
        empty.text.clear();
        assert!(matches!(CorpusIndex::build(vec![empty], 1), Err(IndexError::EmptyText(_))));
    }

    #[test]
    fn orthonormal_ranking() {
        let index = unit_docs();
        let hits = index.retrieve(&[1.0, 0.0], 10, 5, None).unwrap();
        assert_eq!(ids(&hits), ["e1", "e3", "e2"]);
        let scores: Vec<f64> = hits.iter().map(|h| h.score).collect();
        assert_eq!(scores, [1.0, 0.6000000238418579, 0.0]);
    }

    #[test]
    fn ties_break_by_doc_id() {
        let index = CorpusIndex::build(
            vec![doc("b", "en", vec![1.0]), doc("c", "en", vec![1.0]), doc("a", "en", vec![1.0])],
            1,
        )
        .unwrap();
        assert_eq!(ids(&index.retrieve(&[1.0], 2, 2, None).unwrap()), ["a", "b"]);
    }

    #[test]
    fn language_filter() {
        let index = unit_docs();
        let de: BTreeSet<String> = ["de".to_string()].into();
        assert_eq!(ids(&index.retrieve(&[1.0, 0.0], 10, 5, Some(&de)).unwrap()), ["e2"]);
        let fr: BTreeSet<String> = ["fr".to_string()].into();
        assert!(matches!(
            index.retrieve(&[1.0, 0.0], 10, 5, Some(&fr)),
            Err(IndexError::EmptyCorpusForFilter(l)) if l == ["fr"]
        ));
    }

    #[test]
    fn invalid_query_and_depth() {
        let index = unit_docs();
        assert!(matches!(
            index.retrieve(&[1.0], 10, 5, None),
            Err(IndexError::DimensionMismatch { .. })
        ));
        assert!(matches!(index.retrieve(&[1.0, 0.0], 3, 5, None), Err(IndexError::InvalidDepth { .. })));
        assert!(matches!(index.retrieve(&[1.0, 0.0], 3, 0, None), Err(IndexError::InvalidDepth { .. })));
    }

    #[test]
    fn works_over_f64_storage() {
        let index = CorpusIndex::<f64>::build(
            vec![
                DocumentRecord::new("a", "", "t", "en", vec![0.1, 0.2]),
                DocumentRecord::new("b", "", "t", "en", vec![0.3, 0.1]),
            ],
            2,
        )
        .unwrap();
        assert_eq!(ids(&index.retrieve(&[1.0, 0.0], 2, 2, None).unwrap()), ["b", "a"]);
    }

    #[test]
    fn round_trip_and_corruption() {
        let index = unit_docs();
        let mut bytes = Vec::new();
        index.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..5], b"DRIX\x01");
        let back = CorpusIndex::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, index);

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            CorpusIndex::read_from(&mut &truncated[..]),
            Err(IndexError::CorruptIndex(_))
        ));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            CorpusIndex::read_from(&mut bad_magic.as_slice()),
            Err(IndexError::CorruptIndex(_))
        ));
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            CorpusIndex::read_from(&mut trailing.as_slice()),
            Err(IndexError::CorruptIndex(_))
        ));
    }

    #[test]
    fn header_layout_is_little_endian() {
        let index = CorpusIndex::build(vec![doc("d", "en", vec![1.5])], 1).unwrap();
        let mut bytes = Vec::new();
        index.write_to(&mut bytes).unwrap();
        let mut expected = b"DRIX\x01".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        for field in ["d", "", "text of d", "en"] {
            expected.extend((field.len() as u32).to_le_bytes());
            expected.extend(field.as_bytes());
        }
        expected.extend(1.5f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    proptest! {
        #[test]
        fn depth_prefix_property(
            vectors in prop::collection::vec(prop::collection::vec(-4i8..4, 3), 1..40),
            query in prop::collection::vec(-4i8..4, 3),
            k in 1usize..10,
        ) {
            // Small integer coordinates force many exact ties.
            let docs: Vec<_> = vectors
                .iter()
                .enumerate()
                .map(|(i, v)| doc(&format!("d{i:02}"), "en", v.iter().map(|&x| x as f32).collect()))
                .collect();
            let index = CorpusIndex::build(docs, 3).unwrap();
            let q: Vec<f32> = query.iter().map(|&x| x as f32).collect();
            let n = index.len().max(k);
            let all = index.retrieve(&q, n, n, None).unwrap();
            let top = index.retrieve(&q, n, k, None).unwrap();
            prop_assert_eq!(ids(&top), ids(&all[..k.min(all.len())]));
        }
    }
}
