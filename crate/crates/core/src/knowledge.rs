//! Per-domain vector knowledge bases and exact top-K retrieval.
//!
//! Search is an exhaustive cosine scan — at desk scale there is no index to
//! maintain and results are exactly reproducible, which the retrieval tests
//! rely on. Ties are broken by ascending doc id so orderings are total.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::math::{cosine, l2_norm};
use crate::policy::FeatureVector;

/// Default retrieval depth.
pub const DEFAULT_TOP_K: usize = 5;

/// Seed of the stock toy encoder used for repo fixtures.
pub const TOY_ENCODER_SEED: u64 = 7;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Doc {
    pub doc_id: String,
    pub text: String,
    pub vector: FeatureVector,
}

/// One domain's vector store. Doc ids are unique within a store; the same
/// id may appear in several stores (cross-domain documents).
#[derive(Debug, Clone)]
pub struct DomainKB {
    pub domain_id: usize,
    pub dim: usize,
    docs: Vec<Doc>,
}

impl DomainKB {
    pub fn new(domain_id: usize, dim: usize, docs: Vec<Doc>) -> Result<Self> {
        let mut seen = HashSet::new();
        for doc in &docs {
            if doc.vector.dim() != dim {
                return Err(Error::Shape {
                    expected: dim,
                    got: doc.vector.dim(),
                });
            }
            if l2_norm(doc.vector.values()) == 0.0 {
                return Err(Error::domain(format!(
                    "doc `{}` has a zero vector; cosine similarity is undefined",
                    doc.doc_id
                )));
            }
            if !seen.insert(doc.doc_id.clone()) {
                return Err(Error::domain(format!(
                    "duplicate doc_id `{}` in domain {domain_id}",
                    doc.doc_id
                )));
            }
        }
        Ok(DomainKB {
            domain_id,
            dim,
            docs,
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Doc] {
        &self.docs
    }

    pub fn doc_text(&self, doc_id: &str) -> Option<&str> {
        self.docs
            .iter()
            .find(|d| d.doc_id == doc_id)
            .map(|d| d.text.as_str())
    }
}

/// Frozen multimodal query encoder contract.
pub trait QueryEncoder {
    fn output_dim(&self) -> usize;
    /// Deterministic unit-norm embedding of an (image, question) pair.
    fn embed(&self, image: &FeatureVector, question: &FeatureVector) -> Result<FeatureVector>;
}

/// Stock encoder: a seeded random projection of the concatenated modality
/// blocks, L2-normalized. No pretrained weights, fully reproducible.
#[derive(Debug, Clone)]
pub struct ToyProjectionEncoder {
    image_dim: usize,
    text_dim: usize,
    projection: Vec<Vec<f64>>, // out_dim rows of (image_dim + text_dim)
}

impl ToyProjectionEncoder {
    pub fn seeded(image_dim: usize, text_dim: usize, out_dim: usize, seed: u64) -> Self {
        let in_dim = image_dim + text_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).unwrap();
        let projection = (0..out_dim)
            .map(|_| (0..in_dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        ToyProjectionEncoder {
            image_dim,
            text_dim,
            projection,
        }
    }
}

impl QueryEncoder for ToyProjectionEncoder {
    fn output_dim(&self) -> usize {
        self.projection.len()
    }

    fn embed(&self, image: &FeatureVector, question: &FeatureVector) -> Result<FeatureVector> {
        if image.dim() != self.image_dim {
            return Err(Error::Shape {
                expected: self.image_dim,
                got: image.dim(),
            });
        }
        if question.dim() != self.text_dim {
            return Err(Error::Shape {
                expected: self.text_dim,
                got: question.dim(),
            });
        }
        let joint: Vec<f64> = image
            .values()
            .iter()
            .chain(question.values())
            .cloned()
            .collect();
        let raw: Vec<f64> = self
            .projection
            .iter()
            .map(|row| crate::math::dot(row, &joint))
            .collect();
        let norm = l2_norm(&raw);
        if norm == 0.0 {
            return Err(Error::domain(
                "query projects to the zero vector; cannot normalize",
            ));
        }
        FeatureVector::new(raw.into_iter().map(|x| x / norm).collect())
    }
}

/// An encoded query, carrying its raw modality blocks and the unit-norm
/// joint embedding used for retrieval and routing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultimodalQuery {
    pub image: FeatureVector,
    pub question: FeatureVector,
    pub embedding: FeatureVector,
}

pub fn embed_query(
    encoder: &dyn QueryEncoder,
    image: &FeatureVector,
    question: &FeatureVector,
) -> Result<MultimodalQuery> {
    let embedding = encoder.embed(image, question)?;
    Ok(MultimodalQuery {
        image: image.clone(),
        question: question.clone(),
        embedding,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub domain_id: usize,
    pub hits: Vec<Hit>,
    pub k: usize,
}

/// Exact top-k by cosine similarity, ties broken by ascending doc id.
pub fn knn(kb: &DomainKB, query: &MultimodalQuery, k: usize) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::domain("k must be >= 1"));
    }
    if kb.is_empty() {
        return Err(Error::domain(format!(
            "retrieval from empty knowledge base (domain {})",
            kb.domain_id
        )));
    }
    if kb.dim != query.embedding.dim() {
        return Err(Error::Shape {
            expected: kb.dim,
            got: query.embedding.dim(),
        });
    }
    let mut scored: Vec<Hit> = kb
        .docs
        .iter()
        .map(|doc| Hit {
            doc_id: doc.doc_id.clone(),
            similarity: cosine(query.embedding.values(), doc.vector.values()),
        })
        .collect();
    scored.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap()
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
    scored.truncate(k.min(kb.len()));
    Ok(RetrievalResult {
        domain_id: kb.domain_id,
        hits: scored,
        k,
    })
}

/// One `knn` per domain, domain order preserved.
pub fn retrieve_all(
    kbs: &[DomainKB],
    query: &MultimodalQuery,
    k: usize,
) -> Result<Vec<RetrievalResult>> {
    kbs.iter().map(|kb| knn(kb, query, k)).collect()
}

/// Same results as [`retrieve_all`], computed across a thread pool.
pub fn retrieve_all_parallel(
    kbs: &[DomainKB],
    query: &MultimodalQuery,
    k: usize,
) -> Result<Vec<RetrievalResult>> {
    kbs.par_iter().map(|kb| knn(kb, query, k)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub domain_id: usize,
    pub path: PathBuf,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub dim: usize,
    pub domains: Vec<ManifestEntry>,
}

pub fn write_kb_jsonl(kb: &DomainKB, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for doc in &kb.docs {
        serde_json::to_writer(&mut out, doc)?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_kb_jsonl(domain_id: usize, dim: usize, path: &Path) -> Result<DomainKB> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut docs = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(serde_json::from_str::<Doc>(&line)?);
    }
    DomainKB::new(domain_id, dim, docs)
}

/// Write every store plus a `manifest.json` describing the layout.
pub fn write_kb_dir(kbs: &[DomainKB], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(kbs.len());
    for kb in kbs {
        let file = format!("kb_{}.jsonl", kb.domain_id);
        write_kb_jsonl(kb, &dir.join(&file))?;
        entries.push(ManifestEntry {
            domain_id: kb.domain_id,
            path: PathBuf::from(file),
            count: kb.len(),
        });
    }
    let dim = kbs.first().map(|kb| kb.dim).unwrap_or(0);
    let manifest = Manifest {
        dim,
        domains: entries,
    };
    let out = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(out, &manifest)?;
    Ok(())
}

pub fn read_kb_dir(dir: &Path) -> Result<Vec<DomainKB>> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact {
            stage: "kb".into(),
            path: manifest_path,
        });
    }
    let manifest: Manifest = serde_json::from_reader(std::fs::File::open(manifest_path)?)?;
    manifest
        .domains
        .iter()
        .map(|entry| read_kb_jsonl(entry.domain_id, manifest.dim, &dir.join(&entry.path)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit(values: Vec<f64>) -> FeatureVector {
        let n = l2_norm(&values);
        FeatureVector::new(values.into_iter().map(|v| v / n).collect()).unwrap()
    }

    fn query_from(embedding: FeatureVector) -> MultimodalQuery {
        MultimodalQuery {
            image: FeatureVector::zeros(1),
            question: FeatureVector::zeros(1),
            embedding,
        }
    }

    fn random_kb(rng: &mut ChaCha8Rng, domain_id: usize, dim: usize, n: usize) -> DomainKB {
        let docs = (0..n)
            .map(|i| Doc {
                doc_id: format!("d{i:04}"),
                text: format!("doc {i}"),
                vector: FeatureVector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap(),
            })
            .collect();
        DomainKB::new(domain_id, dim, docs).unwrap()
    }

    /// Brute-force oracle: score everything, full sort, truncate.
    fn brute_force(kb: &DomainKB, query: &MultimodalQuery, k: usize) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = kb
            .docs()
            .iter()
            .map(|d| {
                (
                    d.doc_id.clone(),
                    cosine(query.embedding.values(), d.vector.values()),
                )
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        all.truncate(k.min(all.len()));
        all
    }

    #[test]
    fn singleton_kb_returns_its_doc_with_exact_cosine() {
        let doc_vec = FeatureVector::new(vec![1.0, 2.0, 2.0]).unwrap();
        let kb = DomainKB::new(
            0,
            3,
            vec![Doc {
                doc_id: "only".into(),
                text: "t".into(),
                vector: doc_vec.clone(),
            }],
        )
        .unwrap();
        let q = query_from(unit(vec![2.0, 1.0, 0.0]));
        let res = knn(&kb, &q, 5).unwrap();
        assert_eq!(res.hits.len(), 1);
        assert_eq!(res.hits[0].doc_id, "only");
        let expected = cosine(q.embedding.values(), doc_vec.values());
        assert_eq!(res.hits[0].similarity, expected);
    }

    #[test]
    fn self_match_scores_one() {
        let v = unit(vec![0.3, -0.4, 0.5, 0.7]);
        let kb = DomainKB::new(
            0,
            4,
            vec![
                Doc {
                    doc_id: "target".into(),
                    text: String::new(),
                    vector: v.clone(),
                },
                Doc {
                    doc_id: "other".into(),
                    text: String::new(),
                    vector: unit(vec![-0.7, 0.1, 0.1, 0.1]),
                },
            ],
        )
        .unwrap();
        let res = knn(&kb, &query_from(v), 2).unwrap();
        assert_eq!(res.hits[0].doc_id, "target");
        assert!((res.hits[0].similarity - 1.0).abs() < 1e-9);
    }

    #[test]
    fn matches_brute_force_oracle_on_random_kbs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..100 {
            let dim = rng.random_range(2..16);
            let n = rng.random_range(1..64);
            let kb = random_kb(&mut rng, 0, dim, n);
            let q = query_from(unit(
                (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ));
            let k = rng.random_range(1..10);
            let got = knn(&kb, &q, k).unwrap();
            let expected = brute_force(&kb, &q, k);
            assert_eq!(got.hits.len(), expected.len());
            for (hit, (id, sim)) in got.hits.iter().zip(&expected) {
                assert_eq!(&hit.doc_id, id);
                assert_eq!(hit.similarity, *sim);
            }
        }
    }

    #[test]
    fn equal_similarities_break_ties_by_doc_id() {
        let v = unit(vec![1.0, 0.0]);
        let docs = ["zz", "aa", "mm"]
            .iter()
            .map(|id| Doc {
                doc_id: id.to_string(),
                text: String::new(),
                vector: v.clone(),
            })
            .collect();
        let kb = DomainKB::new(0, 2, docs).unwrap();
        let res = knn(&kb, &query_from(v), 3).unwrap();
        let ids: Vec<_> = res.hits.iter().map(|h| h.doc_id.as_str()).collect();
        assert_eq!(ids, ["aa", "mm", "zz"]);
    }

    #[test]
    fn similarities_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let dim = rng.random_range(2..8);
            let kb = random_kb(&mut rng, 0, dim, 32);
            let q = query_from(unit(
                (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ));
            for hit in knn(&kb, &q, 32).unwrap().hits {
                assert!(hit.similarity >= -1.0 - 1e-9 && hit.similarity <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn empty_kb_and_zero_k_error() {
        let kb = DomainKB::new(0, 2, vec![]).unwrap();
        let q = query_from(unit(vec![1.0, 0.0]));
        assert!(knn(&kb, &q, 1).is_err());
        let kb2 = random_kb(&mut ChaCha8Rng::seed_from_u64(1), 0, 2, 3);
        assert!(knn(&kb2, &q, 0).is_err());
    }

    #[test]
    fn retrieve_all_is_per_domain_knn() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kbs: Vec<_> = (0..4).map(|d| random_kb(&mut rng, d, 6, 20)).collect();
        let q = query_from(unit((0..6).map(|_| rng.random_range(-1.0..1.0)).collect()));
        let all = retrieve_all(&kbs, &q, 5).unwrap();
        assert_eq!(all.len(), 4);
        for (d, res) in all.iter().enumerate() {
            assert_eq!(res.domain_id, d);
            assert_eq!(res, &knn(&kbs[d], &q, 5).unwrap());
        }
        // duplicate stores produce identical results
        let dup = vec![kbs[0].clone(), kbs[0].clone()];
        let rr = retrieve_all(&dup, &q, 5).unwrap();
        assert_eq!(rr[0].hits, rr[1].hits);
    }

    #[test]
    fn parallel_and_sequential_schedules_agree_byte_for_byte() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let kbs: Vec<_> = (0..6).map(|d| random_kb(&mut rng, d, 8, 40)).collect();
        let q = query_from(unit((0..8).map(|_| rng.random_range(-1.0..1.0)).collect()));
        let seq = retrieve_all(&kbs, &q, DEFAULT_TOP_K).unwrap();
        let par = retrieve_all_parallel(&kbs, &q, DEFAULT_TOP_K).unwrap();
        assert_eq!(
            serde_json::to_vec(&seq).unwrap(),
            serde_json::to_vec(&par).unwrap()
        );
    }

    #[test]
    fn encoder_is_deterministic_and_unit_norm() {
        let enc = ToyProjectionEncoder::seeded(4, 3, 8, TOY_ENCODER_SEED);
        let img = FeatureVector::new(vec![0.5, -1.0, 0.25, 2.0]).unwrap();
        let q = FeatureVector::new(vec![1.0, 0.0, -0.5]).unwrap();
        let a = embed_query(&enc, &img, &q).unwrap();
        let b = embed_query(&enc, &img, &q).unwrap();
        assert_eq!(a.embedding, b.embedding);
        assert!((l2_norm(a.embedding.values()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn encoder_rejects_mismatched_dims_and_zero_input() {
        let enc = ToyProjectionEncoder::seeded(4, 3, 8, 7);
        let img = FeatureVector::zeros(5);
        let q = FeatureVector::zeros(3);
        assert!(matches!(
            enc.embed(&img, &q),
            Err(Error::Shape {
                expected: 4,
                got: 5
            })
        ));
        // all-zero input projects to zero: normalization must fail loudly
        assert!(enc.embed(&FeatureVector::zeros(4), &q).is_err());
    }

    #[test]
    fn kb_dir_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let kbs: Vec<_> = (0..3).map(|d| random_kb(&mut rng, d, 4, 10)).collect();
        let dir = tempfile::tempdir().unwrap();
        write_kb_dir(&kbs, dir.path()).unwrap();
        let loaded = read_kb_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (orig, back) in kbs.iter().zip(&loaded) {
            assert_eq!(orig.domain_id, back.domain_id);
            assert_eq!(orig.len(), back.len());
            assert_eq!(orig.docs()[2].vector, back.docs()[2].vector);
        }
        // loading from a directory without a manifest names the missing file
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_kb_dir(empty.path()),
            Err(Error::MissingArtifact { .. })
        ));
    }

    #[test]
    fn duplicate_doc_ids_rejected_within_a_store() {
        let v = unit(vec![1.0, 1.0]);
        let docs = vec![
            Doc {
                doc_id: "same".into(),
                text: String::new(),
                vector: v.clone(),
            },
            Doc {
                doc_id: "same".into(),
                text: String::new(),
                vector: v,
            },
        ];
        assert!(DomainKB::new(0, 2, docs).is_err());
    }
}
