//! Image embeddings and the two retrieval queries behind inter-image
//! disruption.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine as _;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::rng_for;
use crate::gateway::ImagePayload;
use crate::tagging::ImageLabels;

pub const MOCK_DIMENSION: usize = 64;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("no candidate image satisfies the constraint for {0}")]
    NotFound(String),
    #[error("image {0} is not in the similarity index")]
    UnknownImage(String),
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("embedding for {image_id} has dimension {got}, expected {expected}")]
    Dimension {
        image_id: String,
        got: usize,
        expected: usize,
    },
    #[error("embedding for {0} has zero norm")]
    ZeroVector(String),
    #[error("embedding cache: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub image_id: String,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    /// Normalizes `values` to unit length.
    pub fn new(image_id: impl Into<String>, mut values: Vec<f64>) -> Result<Self, SimilarityError> {
        let image_id = image_id.into();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(SimilarityError::ZeroVector(image_id));
        }
        for v in &mut values {
            *v /= norm;
        }
        Ok(EmbeddingVector { image_id, values })
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        cosine(&self.values, &other.values)
    }
}

/// Dot product; equals cosine similarity for unit vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub trait EmbeddingProvider: Send + Sync {
    /// Identifies the provider in the cache sidecar.
    fn id(&self) -> String;
    fn embed(&self, image: &ImagePayload) -> Result<Vec<f64>, SimilarityError>;
}

/// Keyed hash of the image digest expanded into a pseudo-random vector.
pub struct MockEmbedder {
    pub seed: u64,
    pub dimension: usize,
}

impl MockEmbedder {
    pub fn new(seed: u64) -> Self {
        MockEmbedder {
            seed,
            dimension: MOCK_DIMENSION,
        }
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn id(&self) -> String {
        format!("mock:{}:{}", self.seed, self.dimension)
    }

    fn embed(&self, image: &ImagePayload) -> Result<Vec<f64>, SimilarityError> {
        let mut rng = rng_for(self.seed, &["mock-embed", &image.digest()]);
        Ok((0..self.dimension).map(|_| rng.random_range(-1.0..1.0)).collect())
    }
}

/// Embeddings endpoint speaking `{"model", "input": [data-url]}` →
/// `{"data": [{"embedding": [...]}]}`.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    retries: u32,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(endpoint: &str, model: &str, api_key_env: Option<&str>, timeout: Duration) -> Result<Self, SimilarityError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| SimilarityError::Provider(e.to_string()))?;
        let api_key = match api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| SimilarityError::Provider(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        Ok(HttpEmbedder {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key,
            retries: 2,
            client,
        })
    }

    fn once(&self, image: &ImagePayload) -> Result<Vec<f64>, SimilarityError> {
        let url = format!(
            "data:{};base64,{}",
            image.media_type,
            base64::engine::general_purpose::STANDARD.encode(image.bytes.as_slice())
        );
        let mut req = self
            .client
            .post(&self.endpoint)
            .json(&serde_json::json!({"model": self.model, "input": [url]}));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| SimilarityError::Provider(e.to_string()))?;
        let status = resp.status();
        let body: serde_json::Value = resp.json().map_err(|e| SimilarityError::Provider(e.to_string()))?;
        if !status.is_success() {
            return Err(SimilarityError::Provider(format!("status {status}: {body}")));
        }
        body.pointer("/data/0/embedding")
            .and_then(|v| v.as_array())
            .and_then(|a| a.iter().map(|x| x.as_f64()).collect::<Option<Vec<f64>>>())
            .ok_or_else(|| SimilarityError::Provider("missing data[0].embedding".into()))
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn id(&self) -> String {
        format!("http:{}:{}", self.endpoint, self.model)
    }

    fn embed(&self, image: &ImagePayload) -> Result<Vec<f64>, SimilarityError> {
        let mut last = None;
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(200 << attempt));
            }
            match self.once(image) {
                Ok(v) => return Ok(v),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CacheSidecar {
    schema: String,
    provider: String,
    dimension: usize,
}

/// Disk cache keyed by image digest.
///
/// `embeddings.bin` holds fixed-size records of 32 digest bytes followed by
/// `dimension` little-endian f64 values. `embeddings.json` records the
/// provider id and dimension; a mismatch discards the cache.
pub struct EmbeddingCache {
    bin: PathBuf,
    dimension: Option<usize>,
    provider: String,
    entries: Mutex<HashMap<String, Vec<f64>>>,
    writer: Mutex<Option<BufWriter<File>>>,
}

const CACHE_SCHEMA: &str = "insets.embeddings/1";

impl EmbeddingCache {
    pub fn open(dir: impl AsRef<Path>, provider: &str) -> Result<Self, SimilarityError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let bin = dir.join("embeddings.bin");
        let sidecar_path = dir.join("embeddings.json");
        let sidecar: Option<CacheSidecar> = std::fs::read_to_string(&sidecar_path)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok());
        let mut entries = HashMap::new();
        let mut dimension = None;
        match sidecar {
            Some(sc) if sc.provider == provider && sc.schema == CACHE_SCHEMA => {
                dimension = Some(sc.dimension);
                let mut buf = Vec::new();
                if let Ok(mut f) = File::open(&bin) {
                    f.read_to_end(&mut buf)?;
                }
                let record = 32 + 8 * sc.dimension;
                let whole = buf.len() / record * record;
                if whole < buf.len() {
                    log::warn!("embedding cache: dropping {} trailing bytes", buf.len() - whole);
                    OpenOptions::new().write(true).open(&bin)?.set_len(whole as u64)?;
                }
                for chunk in buf[..whole].chunks_exact(record) {
                    let digest = hex::encode(&chunk[..32]);
                    let values = chunk[32..]
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect();
                    entries.insert(digest, values);
                }
            }
            Some(_) => {
                log::warn!("embedding cache at {} belongs to another provider; discarding", dir.display());
                let _ = std::fs::remove_file(&bin);
                let _ = std::fs::remove_file(&sidecar_path);
            }
            None => {
                let _ = std::fs::remove_file(&bin);
            }
        }
        Ok(EmbeddingCache {
            bin,
            dimension,
            provider: provider.to_string(),
            entries: Mutex::new(entries),
            writer: Mutex::new(None),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, digest: &str) -> Option<Vec<f64>> {
        self.entries.lock().unwrap().get(digest).cloned()
    }

    fn put(&self, digest: &str, values: &[f64]) -> Result<(), SimilarityError> {
        let raw = hex::decode(digest).map_err(|e| SimilarityError::Provider(format!("bad digest {digest}: {e}")))?;
        if raw.len() != 32 {
            return Err(SimilarityError::Provider(format!("bad digest {digest}")));
        }
        let mut w = self.writer.lock().unwrap();
        if w.is_none() {
            let expected = self.dimension.unwrap_or(values.len());
            if expected != values.len() {
                return Err(SimilarityError::Dimension {
                    image_id: digest.into(),
                    got: values.len(),
                    expected,
                });
            }
            let dir = self.bin.parent().unwrap();
            let sidecar = CacheSidecar {
                schema: CACHE_SCHEMA.into(),
                provider: self.provider.clone(),
                dimension: values.len(),
            };
            std::fs::write(dir.join("embeddings.json"), serde_json::to_string_pretty(&sidecar).unwrap())?;
            let f = OpenOptions::new().create(true).append(true).open(&self.bin)?;
            *w = Some(BufWriter::new(f));
        }
        let out = w.as_mut().unwrap();
        out.write_all(&raw)?;
        for v in values {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        self.entries.lock().unwrap().insert(digest.to_string(), values.to_vec());
        Ok(())
    }
}

/// Embeds `image`, consulting and filling `cache`. Returns the unit vector
/// and whether it came from the cache.
pub fn embed(
    image_id: &str,
    image: &ImagePayload,
    provider: &dyn EmbeddingProvider,
    cache: Option<&EmbeddingCache>,
) -> Result<(EmbeddingVector, bool), SimilarityError> {
    let digest = image.digest();
    if let Some(values) = cache.and_then(|c| c.get(&digest)) {
        return Ok((EmbeddingVector::new(image_id, values)?, true));
    }
    let values = provider.embed(image)?;
    let v = EmbeddingVector::new(image_id, values)?;
    if let Some(c) = cache {
        c.put(&digest, &v.values)?;
    }
    Ok((v, false))
}

struct Entry {
    image_id: String,
    values: Vec<f64>,
    tertiaries: BTreeSet<String>,
}

/// Embeddings of the labeled corpus with each image's tertiary categories.
pub struct SimilarityIndex {
    entries: Vec<Entry>,
    position: HashMap<String, usize>,
}

impl SimilarityIndex {
    /// Indexes every image that has both an embedding and at least one label.
    pub fn build(embeddings: &[EmbeddingVector], labels: &[ImageLabels]) -> Result<Self, SimilarityError> {
        let by_id: HashMap<&str, &EmbeddingVector> = embeddings.iter().map(|e| (e.image_id.as_str(), e)).collect();
        let mut items: Vec<(String, Vec<f64>, BTreeSet<String>)> = Vec::new();
        for l in labels {
            if l.labels.is_empty() {
                continue;
            }
            match by_id.get(l.image_id.as_str()) {
                Some(e) => items.push((
                    l.image_id.clone(),
                    e.values.clone(),
                    l.labels.iter().map(|x| x.tertiary.clone()).collect(),
                )),
                None => log::warn!("image {} has no embedding; excluded from retrieval", l.image_id),
            }
        }
        Self::from_parts(items)
    }

    pub fn from_parts(items: Vec<(String, Vec<f64>, BTreeSet<String>)>) -> Result<Self, SimilarityError> {
        let mut entries: Vec<Entry> = Vec::with_capacity(items.len());
        let dim = items.first().map(|i| i.1.len());
        for (image_id, values, tertiaries) in items {
            if Some(values.len()) != dim {
                return Err(SimilarityError::Dimension {
                    image_id,
                    got: values.len(),
                    expected: dim.unwrap_or(0),
                });
            }
            entries.push(Entry {
                image_id,
                values,
                tertiaries,
            });
        }
        entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        entries.dedup_by(|a, b| a.image_id == b.image_id);
        let position = entries.iter().enumerate().map(|(i, e)| (e.image_id.clone(), i)).collect();
        Ok(SimilarityIndex { entries, position })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.position.contains_key(image_id)
    }

    fn scan(&self, image_id: &str, share: bool, maximize: bool) -> Result<&str, SimilarityError> {
        let &qi = self
            .position
            .get(image_id)
            .ok_or_else(|| SimilarityError::UnknownImage(image_id.to_string()))?;
        let q = &self.entries[qi];
        let mut best: Option<(f64, usize)> = None;
        // entries are sorted by id, so strict comparison keeps the smallest id on ties
        for (i, e) in self.entries.iter().enumerate() {
            if i == qi || share == q.tertiaries.is_disjoint(&e.tertiaries) {
                continue;
            }
            let s = cosine(&q.values, &e.values);
            let better = match best {
                None => true,
                Some((b, _)) if maximize => s > b,
                Some((b, _)) => s < b,
            };
            if better {
                best = Some((s, i));
            }
        }
        best.map(|(_, i)| self.entries[i].image_id.as_str())
            .ok_or_else(|| SimilarityError::NotFound(image_id.to_string()))
    }

    /// Most cosine-similar image sharing no tertiary category with the query.
    pub fn most_visual_similar_emotion_dissimilar(&self, image_id: &str) -> Result<&str, SimilarityError> {
        self.scan(image_id, false, true)
    }

    /// Least cosine-similar image sharing at least one tertiary category.
    pub fn most_emotion_similar_visual_dissimilar(&self, image_id: &str) -> Result<&str, SimilarityError> {
        self.scan(image_id, true, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn unit_normalization() {
        let v = EmbeddingVector::new("a", vec![3.0, 4.0]).unwrap();
        assert_eq!(v.values, vec![0.6, 0.8]);
        assert!((v.cosine(&v) - 1.0).abs() < 1e-12);
        assert!(EmbeddingVector::new("z", vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn mock_is_deterministic() {
        let e = MockEmbedder::new(3);
        let img = ImagePayload::new("image/png", vec![1, 2, 3]);
        assert_eq!(e.embed(&img).unwrap(), e.embed(&img).unwrap());
        let other = ImagePayload::new("image/png", vec![1, 2, 4]);
        assert_ne!(e.embed(&img).unwrap(), e.embed(&other).unwrap());
    }

    #[test]
    fn three_image_retrieval() {
        let idx = SimilarityIndex::from_parts(vec![
            ("q".into(), vec![1.0, 0.0], set(&["joy"])),
            ("near".into(), vec![0.8, 0.6], set(&["grief"])),
            ("far".into(), vec![0.0, 1.0], set(&["joy", "rage"])),
        ])
        .unwrap();
        assert_eq!(idx.most_visual_similar_emotion_dissimilar("q").unwrap(), "near");
        assert_eq!(idx.most_emotion_similar_visual_dissimilar("q").unwrap(), "far");
        assert_eq!(idx.most_emotion_similar_visual_dissimilar("near").unwrap_err().to_string(), "no candidate image satisfies the constraint for near");
        assert!(matches!(
            idx.most_visual_similar_emotion_dissimilar("missing"),
            Err(SimilarityError::UnknownImage(_))
        ));
    }

    #[test]
    fn all_sharing_means_not_found() {
        let idx = SimilarityIndex::from_parts(vec![
            ("a".into(), vec![1.0, 0.0], set(&["joy"])),
            ("b".into(), vec![0.0, 1.0], set(&["joy"])),
        ])
        .unwrap();
        assert!(matches!(
            idx.most_visual_similar_emotion_dissimilar("a"),
            Err(SimilarityError::NotFound(_))
        ));
        // the query itself never counts as a candidate
        assert_eq!(idx.most_emotion_similar_visual_dissimilar("a").unwrap(), "b");
    }

    struct Counting(AtomicUsize);
    impl EmbeddingProvider for Counting {
        fn id(&self) -> String {
            "counting".into()
        }
        fn embed(&self, _: &ImagePayload) -> Result<Vec<f64>, SimilarityError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(vec![1.0, 2.0, 2.0])
        }
    }

    #[test]
    fn cache_hit_skips_provider() {
        let dir = tempfile::tempdir().unwrap();
        let p = Counting(AtomicUsize::new(0));
        let img = ImagePayload::new("image/png", vec![9; 10]);
        {
            let cache = EmbeddingCache::open(dir.path(), &p.id()).unwrap();
            let (v, hit) = embed("i", &img, &p, Some(&cache)).unwrap();
            assert!(!hit);
            assert!((v.values[0] - 1.0 / 3.0).abs() < 1e-12);
            let (_, hit) = embed("i", &img, &p, Some(&cache)).unwrap();
            assert!(hit);
        }
        let cache = EmbeddingCache::open(dir.path(), &p.id()).unwrap();
        assert_eq!(cache.len(), 1);
        let (_, hit) = embed("i", &img, &p, Some(&cache)).unwrap();
        assert!(hit);
        assert_eq!(p.0.load(Ordering::SeqCst), 1);

        let other = EmbeddingCache::open(dir.path(), "another").unwrap();
        assert!(other.is_empty());
    }
}
