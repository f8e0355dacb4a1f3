//! Stance-conditioned prompting for competing rationales.
//!
//! For every sample a large multimodal model is asked to argue *both* stances
//! (sarcastic and non-sarcastic). The two answers are packed next to the tweet
//! text as extra, deliberately conflicting context. Target-identification
//! samples are sarcastic by construction and only get the sarcastic rationale.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cell::RefCell;
use core::sync::atomic::{AtomicUsize, Ordering};

use alloc::collections::BTreeMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sample::{Sample, Stance};

/// Literal joining token between the tweet text and each rationale.
pub const SEPARATOR: &str = "<sep>";

const TEMPLATE_HEAD: &str =
    "Given a tweet that consists of a text and an image, please give me a rationale of why the tweet is ";

/// Training phase: coarse detection pre-training or target fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

impl core::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            other => Err(Error::RejectedInput(format!("unknown phase `{other}`"))),
        }
    }
}

/// A rendered prompt plus the reference to the attached image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptText {
    pub text: String,
    pub stance: Stance,
    pub image_ref: String,
}

impl PromptText {
    /// First 8 bytes of the SHA-256 of the rendered text, big-endian.
    pub fn hash64(&self) -> u64 {
        let digest = Sha256::digest(self.text.as_bytes());
        u64::from_be_bytes(digest[..8].try_into().unwrap())
    }
}

/// Renders the prompt template for one stance.
pub fn build_prompt(sample: &Sample, stance: Stance) -> Result<PromptText> {
    if sample.text.trim().is_empty() {
        return Err(Error::RejectedInput(format!("sample `{}` has empty text", sample.id)));
    }
    let image_ref = if sample.image_path.is_empty() {
        "<image>".to_string()
    } else {
        sample.image_path.clone()
    };
    let text = format!("{TEMPLATE_HEAD}{stance}.\ntweet text: {}\ntweet image: {image_ref}", sample.text);
    Ok(PromptText { text, stance, image_ref })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleSet {
    pub r_pos: String,
    pub r_neg: Option<String>,
    pub backend_id: String,
    pub prompt_hash: u64,
}

/// Failure reported by a backend for a single request. All kinds are retried.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClientError {
    Timeout(String),
    Refused(String),
    Transport(String),
}

impl core::fmt::Display for ClientError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ClientError::Timeout(m) => write!(f, "timeout: {m}"),
            ClientError::Refused(m) => write!(f, "refused: {m}"),
            ClientError::Transport(m) => write!(f, "transport: {m}"),
        }
    }
}

/// A large multimodal model answering one prompt about one sample.
pub trait RationaleClient {
    fn backend_id(&self) -> &str;
    fn complete(&self, prompt: &PromptText, sample: &Sample) -> core::result::Result<String, ClientError>;
}

impl<C: RationaleClient + ?Sized> RationaleClient for &C {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }

    fn complete(&self, prompt: &PromptText, sample: &Sample) -> core::result::Result<String, ClientError> {
        (**self).complete(prompt, sample)
    }
}

/// One persisted rationale.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub sample_id: String,
    pub stance: Stance,
    pub backend_id: String,
    pub rationale: String,
    /// Unix seconds; stamped by the cache implementation.
    pub created_at: u64,
}

/// SHA-256 (hex) of `(sample id, stance, backend id)`.
pub fn cache_key(sample_id: &str, stance: Stance, backend_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(sample_id.as_bytes());
    h.update([0x1f]);
    h.update(stance.as_str().as_bytes());
    h.update([0x1f]);
    h.update(backend_id.as_bytes());
    hex::encode(h.finalize())
}

/// Rationale store. Implementations must serialise their own writes.
pub trait RationaleCache {
    fn get(&self, key: &str) -> Option<String>;
    fn put(&self, record: CacheRecord) -> Result<()>;
}

/// In-memory cache, single-threaded.
#[derive(Debug, Default)]
pub struct MemoryCache {
    entries: RefCell<BTreeMap<String, CacheRecord>>,
}

impl MemoryCache {
    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.borrow().is_empty()
    }

    pub fn keys(&self) -> Vec<String> {
        self.entries.borrow().keys().cloned().collect()
    }
}

impl RationaleCache for MemoryCache {
    fn get(&self, key: &str) -> Option<String> {
        self.entries.borrow().get(key).map(|r| r.rationale.clone())
    }

    fn put(&self, record: CacheRecord) -> Result<()> {
        self.entries.borrow_mut().insert(record.key.clone(), record);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 2 }
    }
}

/// Drives prompting, retries and caching for one backend.
pub struct RationaleGenerator<'a, C: ?Sized, K: ?Sized> {
    pub client: &'a C,
    pub cache: &'a K,
    pub retry: RetryPolicy,
}

impl<'a, C, K> RationaleGenerator<'a, C, K>
where
    C: RationaleClient + ?Sized,
    K: RationaleCache + ?Sized,
{
    pub fn new(client: &'a C, cache: &'a K) -> Self {
        Self { client, cache, retry: RetryPolicy::default() }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn one(&self, sample: &Sample, stance: Stance) -> Result<(String, PromptText)> {
        let prompt = build_prompt(sample, stance)?;
        let backend = self.client.backend_id();
        let key = cache_key(&sample.id, stance, backend);
        if let Some(hit) = self.cache.get(&key) {
            return Ok((hit, prompt));
        }
        let attempts = self.retry.max_retries + 1;
        let mut last = None;
        for _ in 0..attempts {
            match self.client.complete(&prompt, sample) {
                Ok(text) => {
                    self.cache.put(CacheRecord {
                        key,
                        sample_id: sample.id.clone(),
                        stance,
                        backend_id: backend.to_string(),
                        rationale: text.clone(),
                        created_at: 0,
                    })?;
                    return Ok((text, prompt));
                }
                Err(e) => last = Some(e),
            }
        }
        Err(Error::Generation {
            stance,
            attempts,
            message: last.map(|e| e.to_string()).unwrap_or_default(),
        })
    }

    /// Both stances, positive first.
    pub fn generate_competing(&self, sample: &Sample) -> Result<RationaleSet> {
        let (r_pos, p_pos) = self.one(sample, Stance::Sarcastic)?;
        let (r_neg, p_neg) = self.one(sample, Stance::NonSarcastic)?;
        Ok(RationaleSet {
            r_pos,
            r_neg: Some(r_neg),
            backend_id: self.client.backend_id().to_string(),
            prompt_hash: combined_hash(&[&p_pos, &p_neg]),
        })
    }

    /// Sarcastic stance only.
    pub fn generate_sarcastic(&self, sample: &Sample) -> Result<RationaleSet> {
        let (r_pos, p_pos) = self.one(sample, Stance::Sarcastic)?;
        Ok(RationaleSet {
            r_pos,
            r_neg: None,
            backend_id: self.client.backend_id().to_string(),
            prompt_hash: combined_hash(&[&p_pos]),
        })
    }

    /// Competing rationales for pre-training, a single one for fine-tuning.
    pub fn generate_for_phase(&self, sample: &Sample, phase: Phase) -> Result<RationaleSet> {
        match phase {
            Phase::Pretrain => self.generate_competing(sample),
            Phase::Finetune => self.generate_sarcastic(sample),
        }
    }
}

fn combined_hash(prompts: &[&PromptText]) -> u64 {
    if let [only] = prompts {
        return only.hash64();
    }
    let mut h = Sha256::new();
    for p in prompts {
        h.update(p.text.as_bytes());
        h.update([0x1e]);
    }
    u64::from_be_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Packed input text: tweet, then the rationales, joined by [`SEPARATOR`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedText(pub String);

impl AugmentedText {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

fn scrub(s: &str) -> String {
    s.replace(SEPARATOR, "[sep]")
}

pub fn pack_input(sample: &Sample, rationales: &RationaleSet, phase: Phase) -> Result<AugmentedText> {
    if rationales.r_pos.trim().is_empty() {
        return Err(Error::contract(format!("sample `{}`: missing sarcastic rationale", sample.id)));
    }
    let joiner = format!(" {SEPARATOR} ");
    let mut parts = alloc::vec![scrub(&sample.text), scrub(&rationales.r_pos)];
    if phase == Phase::Pretrain {
        match rationales.r_neg.as_deref() {
            Some(r) if !r.trim().is_empty() => parts.push(scrub(r)),
            _ => {
                return Err(Error::contract(format!(
                    "sample `{}`: pre-training needs the non-sarcastic rationale",
                    sample.id
                )))
            }
        }
    }
    Ok(AugmentedText(parts.join(&joiner)))
}

/// Deterministic offline backend: answers `RATIONALE[<stance>|<first two words>...]`.
#[derive(Debug, Default)]
pub struct MockClient {
    calls: AtomicUsize,
    fail_first: usize,
}

impl MockClient {
    pub const BACKEND_ID: &'static str = "mock";

    pub fn new() -> Self {
        Self::default()
    }

    /// Fails the first `n` requests with a timeout.
    pub fn failing_first(n: usize) -> Self {
        Self { calls: AtomicUsize::new(0), fail_first: n }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn render(stance: Stance, text: &str) -> String {
        let words: Vec<&str> = text.split_whitespace().collect();
        let prefix = words.iter().take(2).copied().collect::<Vec<_>>().join(" ");
        let ellipsis = if words.len() > 2 { "..." } else { "" };
        format!("RATIONALE[{stance}|{prefix}{ellipsis}]")
    }
}

impl RationaleClient for MockClient {
    fn backend_id(&self) -> &str {
        Self::BACKEND_ID
    }

    fn complete(&self, prompt: &PromptText, sample: &Sample) -> core::result::Result<String, ClientError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if n < self.fail_first {
            return Err(ClientError::Timeout(format!("mock timeout #{n}")));
        }
        Ok(Self::render(prompt.stance, &sample.text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::Raster;

    fn sample(id: &str, text: &str) -> Sample {
        Sample::new(id, text, Raster::solid(4, 4, [1, 2, 3]))
    }

    #[test]
    fn prompt_contains_stance_and_text() {
        let s = sample("1", "thank god for no product placement");
        let p = build_prompt(&s, Stance::Sarcastic).unwrap();
        assert!(p.text.contains("please give me a rationale of why the tweet is sarcastic"));
        assert!(p.text.contains("thank god for no product placement"));
        let n = build_prompt(&sample("2", "hello"), Stance::NonSarcastic).unwrap();
        assert!(n.text.contains("why the tweet is non-sarcastic"));
        assert_eq!(p, build_prompt(&s, Stance::Sarcastic).unwrap());
    }

    #[test]
    fn empty_text_rejected() {
        assert!(matches!(build_prompt(&sample("1", "  "), Stance::Sarcastic), Err(Error::RejectedInput(_))));
    }

    #[test]
    fn mock_contract() {
        let s = sample("1", "thank god for no product placement");
        let client = MockClient::new();
        let cache = MemoryCache::default();
        let gen = RationaleGenerator::new(&client, &cache);
        let set = gen.generate_competing(&s).unwrap();
        assert_eq!(set.r_pos, "RATIONALE[sarcastic|thank god...]");
        assert_eq!(set.r_neg.as_deref(), Some("RATIONALE[non-sarcastic|thank god...]"));
        assert_eq!(client.calls(), 2);

        let again = gen.generate_competing(&s).unwrap();
        assert_eq!(again, set);
        assert_eq!(client.calls(), 2);
    }

    #[test]
    fn sarcastic_only() {
        let s = sample("1", "so fun");
        let client = MockClient::new();
        let cache = MemoryCache::default();
        let gen = RationaleGenerator::new(&client, &cache);
        let set = gen.generate_sarcastic(&s).unwrap();
        assert!(set.r_neg.is_none());
        assert_eq!(gen.generate_sarcastic(&s).unwrap(), set);
        assert_eq!(client.calls(), 1);
    }

    #[test]
    fn distinct_ids_distinct_keys() {
        let client = MockClient::new();
        let cache = MemoryCache::default();
        let gen = RationaleGenerator::new(&client, &cache);
        gen.generate_competing(&sample("a", "same text")).unwrap();
        gen.generate_competing(&sample("b", "same text")).unwrap();
        let mut expected = alloc::vec![
            cache_key("a", Stance::Sarcastic, "mock"),
            cache_key("a", Stance::NonSarcastic, "mock"),
            cache_key("b", Stance::Sarcastic, "mock"),
            cache_key("b", Stance::NonSarcastic, "mock"),
        ];
        expected.sort();
        assert_eq!(cache.keys(), expected);
    }

    #[test]
    fn retries_then_fails_with_stance() {
        let s = sample("1", "so fun");
        let cache = MemoryCache::default();
        let flaky = MockClient::failing_first(2);
        let gen = RationaleGenerator::new(&flaky, &cache).with_retry(RetryPolicy { max_retries: 2 });
        assert!(gen.generate_sarcastic(&s).is_ok());

        let dead = MockClient::failing_first(100);
        let gen = RationaleGenerator::new(&dead, &cache).with_retry(RetryPolicy { max_retries: 1 });
        match gen.generate_competing(&sample("2", "x")) {
            Err(Error::Generation { stance, attempts, .. }) => {
                assert_eq!(stance, Stance::Sarcastic);
                assert_eq!(attempts, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn packing() {
        let s = sample("1", "a");
        let set = RationaleSet { r_pos: "b".into(), r_neg: Some("c".into()), backend_id: "m".into(), prompt_hash: 0 };
        assert_eq!(pack_input(&s, &set, Phase::Pretrain).unwrap().0, "a <sep> b <sep> c");
        assert_eq!(pack_input(&s, &set, Phase::Finetune).unwrap().0, "a <sep> b");
        let no_neg = RationaleSet { r_neg: Some(String::new()), ..set.clone() };
        assert!(matches!(pack_input(&s, &no_neg, Phase::Pretrain), Err(Error::Contract(_))));
        let tricky = sample("2", "x <sep> y");
        let packed = pack_input(&tricky, &set, Phase::Pretrain).unwrap();
        assert_eq!(packed.0.matches(SEPARATOR).count(), 2);
    }
}
