//! Chat-completion gateway: templating, budget enforcement, retries and transcripts.

mod http;
pub mod parse;
mod scripted;
mod template;

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use http::{HttpChatClient, HttpChatConfig};
pub use parse::parse_label;
pub use scripted::{ScriptRule, ScriptedResponder, Scenario};
pub use template::{placeholders, render_prompt, PromptTemplate, TemplateId};

use crate::error::{Error, Result};

pub const NO_EVIDENCE: &str = "(no evidence retrieved)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub template_id: TemplateId,
    /// Caller tag, e.g. the DER path, so interleaved traces stay attributable.
    pub tag: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    pub text: String,
    pub usage: Usage,
    #[serde(skip)]
    pub latency: Duration,
    pub attempts: u32,
}

pub trait ChatClient: Send + Sync {
    /// One attempt; retry policy lives in [`Gateway`].
    fn send(&self, request: &ChatRequest) -> Result<String>;

    fn fingerprint(&self) -> String;
}

impl<T: ChatClient + ?Sized> ChatClient for Arc<T> {
    fn send(&self, request: &ChatRequest) -> Result<String> {
        (**self).send(request)
    }
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Estimated-token limit for a rendered prompt.
    pub context_budget: usize,
    pub chars_per_token: usize,
    pub max_retries: u32,
    /// First backoff delay; doubles per retry.
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 1024,
            context_budget: 128_000,
            chars_per_token: 4,
            max_retries: 3,
            backoff_base_ms: 1000,
            max_in_flight: 4,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::Config("temperature out of [0,2]".into()));
        }
        if self.context_budget == 0 || self.chars_per_token == 0 || self.max_in_flight == 0 {
            return Err(Error::Config(
                "context_budget, chars_per_token and max_in_flight must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn estimate_tokens(text: &str, chars_per_token: usize) -> usize {
    text.chars().count().div_ceil(chars_per_token.max(1))
}

/// Template variables plus the evidence block, which is the only part the
/// gateway may shorten to fit the budget.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptInput {
    pub template_id: TemplateId,
    pub vars: BTreeMap<String, String>,
    /// Evidence items, oldest first. Rendered into `{{evidence}}`.
    pub evidence: Vec<String>,
    pub separator: String,
}

impl PromptInput {
    pub fn new(template_id: TemplateId) -> Self {
        Self {
            template_id,
            vars: BTreeMap::new(),
            evidence: Vec::new(),
            separator: "\n\n".into(),
        }
    }

    pub fn var(mut self, name: &str, value: impl Into<String>) -> Self {
        self.vars.insert(name.to_string(), value.into());
        self
    }

    pub fn evidence(mut self, items: Vec<String>, separator: &str) -> Self {
        self.evidence = items;
        self.separator = separator.to_string();
        self
    }

    /// Render keeping only evidence items from `skip` onward.
    pub fn render_from(&self, skip: usize) -> Result<String> {
        let mut vars = self.vars.clone();
        let kept = &self.evidence[skip.min(self.evidence.len())..];
        let block = if kept.is_empty() {
            NO_EVIDENCE.to_string()
        } else {
            kept.join(&self.separator)
        };
        vars.insert("evidence".into(), block);
        render_prompt(self.template_id, &vars)
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.freed.wait(p).unwrap();
        }
        *p -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

/// One model call as recorded in a transcript. Latency is left out so
/// transcripts compare byte-for-byte across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub tag: String,
    pub template_id: TemplateId,
    pub prompt: String,
    pub reply: Option<String>,
    pub error: Option<String>,
    pub attempts: u32,
    pub retry_log: Vec<String>,
    /// Evidence items dropped (oldest first) to fit the context budget.
    pub evidence_dropped: usize,
    pub estimated_tokens: usize,
}

pub struct Gateway {
    client: Box<dyn ChatClient>,
    config: GatewayConfig,
    in_flight: Semaphore,
}

impl Gateway {
    pub fn new(client: impl ChatClient + 'static, config: GatewayConfig) -> Self {
        let in_flight = Semaphore::new(config.max_in_flight.max(1));
        Self {
            client: Box::new(client),
            config,
            in_flight,
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> String {
        self.client.fingerprint()
    }

    pub fn session(&self, tag: impl Into<String>) -> Session<'_> {
        Session {
            gateway: self,
            tag: tag.into(),
            entries: Vec::new(),
            flags: Vec::new(),
        }
    }

    /// Fit the prompt to the budget by dropping the oldest evidence items.
    fn fit(&self, input: &PromptInput) -> Result<(String, usize, usize)> {
        let limit = self.config.context_budget;
        let cpt = self.config.chars_per_token;
        let full = input.render_from(0)?;
        let est = estimate_tokens(&full, cpt);
        if est <= limit {
            return Ok((full, 0, est));
        }
        let n = input.evidence.len();
        let bare = input.render_from(n)?;
        let bare_est = estimate_tokens(&bare, cpt);
        if bare_est > limit {
            return Err(Error::Budget {
                estimated: bare_est,
                limit,
            });
        }
        // tokens are monotone in the number of dropped items: binary search the fewest drops
        let (mut lo, mut hi) = (1, n);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if estimate_tokens(&input.render_from(mid)?, cpt) <= limit {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        let prompt = input.render_from(lo)?;
        let est = estimate_tokens(&prompt, cpt);
        Ok((prompt, lo, est))
    }

    /// Render, budget-check, send with retries. The entry is returned even on failure.
    pub fn complete(&self, input: &PromptInput, tag: &str) -> (TranscriptEntry, Result<ChatReply>) {
        let mut entry = TranscriptEntry {
            tag: tag.to_string(),
            template_id: input.template_id,
            prompt: String::new(),
            reply: None,
            error: None,
            attempts: 0,
            retry_log: Vec::new(),
            evidence_dropped: 0,
            estimated_tokens: 0,
        };
        let (prompt, dropped, est) = match self.fit(input) {
            Ok(v) => v,
            Err(e) => {
                entry.error = Some(e.to_string());
                return (entry, Err(e));
            }
        };
        entry.prompt = prompt;
        entry.evidence_dropped = dropped;
        entry.estimated_tokens = est;
        let request = ChatRequest {
            template_id: input.template_id,
            tag: tag.to_string(),
            prompt: entry.prompt.clone(),
            temperature: self.config.temperature,
            max_output_tokens: self.config.max_output_tokens,
        };

        let started = Instant::now();
        loop {
            entry.attempts += 1;
            let outcome = {
                let _permit = self.in_flight.acquire();
                self.client.send(&request)
            };
            match outcome {
                Ok(text) => {
                    entry.reply = Some(text.clone());
                    let usage = Usage {
                        prompt_tokens: est,
                        completion_tokens: estimate_tokens(&text, self.config.chars_per_token),
                    };
                    let reply = ChatReply {
                        text,
                        usage,
                        latency: started.elapsed(),
                        attempts: entry.attempts,
                    };
                    return (entry, Ok(reply));
                }
                Err(e) if e.is_retriable() && entry.attempts <= self.config.max_retries => {
                    let delay = self.config.backoff_base_ms << (entry.attempts - 1);
                    entry
                        .retry_log
                        .push(format!("attempt {} failed: {e}; retrying in {delay} ms", entry.attempts));
                    std::thread::sleep(Duration::from_millis(delay));
                }
                Err(e) => {
                    entry.error = Some(e.to_string());
                    return (entry, Err(e));
                }
            }
        }
    }
}

/// A caller-scoped view of the gateway that accumulates its own transcript and flags.
pub struct Session<'g> {
    gateway: &'g Gateway,
    tag: String,
    pub entries: Vec<TranscriptEntry>,
    pub flags: Vec<String>,
}

impl<'g> Session<'g> {
    pub fn gateway(&self) -> &'g Gateway {
        self.gateway
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn complete(&mut self, input: &PromptInput) -> Result<ChatReply> {
        let (entry, result) = self.gateway.complete(input, &self.tag);
        if entry.evidence_dropped > 0 {
            self.flags.push(format!(
                "{}: dropped {} of {} evidence items to fit the context budget",
                input.template_id,
                entry.evidence_dropped,
                input.evidence.len()
            ));
        }
        self.entries.push(entry);
        result
    }

    pub fn flag(&mut self, message: impl Into<String>) {
        self.flags.push(format!("[{}] {}", self.tag, message.into()));
    }

    /// Call, parse, and on parse failure call exactly once more.
    pub fn complete_parsed<T>(
        &mut self,
        input: &PromptInput,
        mut parse: impl FnMut(&str) -> Option<T>,
    ) -> Result<Option<T>> {
        for _ in 0..2 {
            let reply = self.complete(input)?;
            if let Some(v) = parse(&reply.text) {
                return Ok(Some(v));
            }
        }
        Ok(None)
    }

    pub fn into_parts(self) -> (Vec<TranscriptEntry>, Vec<String>) {
        (self.entries, self.flags)
    }
}

/// Line-delimited JSON transcript.
pub fn transcript_jsonl(entries: &[TranscriptEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("transcript entry serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Flaky {
        failures: AtomicUsize,
        retriable: bool,
    }

    impl ChatClient for Flaky {
        fn send(&self, _: &ChatRequest) -> Result<String> {
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(Error::transport("connection reset", self.retriable));
            }
            Ok("FINAL: 1".into())
        }
        fn fingerprint(&self) -> String {
            "flaky".into()
        }
    }

    fn fast() -> GatewayConfig {
        GatewayConfig {
            backoff_base_ms: 0,
            ..GatewayConfig::default()
        }
    }

    fn sufficiency_input(evidence: Vec<String>) -> PromptInput {
        PromptInput::new(TemplateId::Sufficiency)
            .var("task_name", "t")
            .var("task_description", "d")
            .var("query", "q")
            .evidence(evidence, "\n\n")
    }

    #[test]
    fn scripted_rule_reply() {
        let g = Gateway::new(
            ScriptedResponder::new("SUFFICIENT: no").rule(ScriptRule::template(
                TemplateId::Sufficiency,
                "SUFFICIENT: yes",
            )),
            fast(),
        );
        let mut s = g.session("test");
        let r = s.complete(&sufficiency_input(vec![])).unwrap();
        assert_eq!(r.text, "SUFFICIENT: yes");
        assert!(s.entries[0].prompt.contains(NO_EVIDENCE));
    }

    #[test]
    fn transport_errors_retry_then_succeed() {
        let g = Gateway::new(
            Flaky {
                failures: AtomicUsize::new(3),
                retriable: true,
            },
            fast(),
        );
        let mut s = g.session("t");
        let r = s.complete(&sufficiency_input(vec![])).unwrap();
        assert_eq!(r.attempts, 4);
        assert_eq!(s.entries[0].retry_log.len(), 3);
    }

    #[test]
    fn retries_exhaust() {
        let g = Gateway::new(
            Flaky {
                failures: AtomicUsize::new(4),
                retriable: true,
            },
            fast(),
        );
        let err = g.session("t").complete(&sufficiency_input(vec![])).unwrap_err();
        assert!(matches!(err, Error::Transport { .. }));
    }

    #[test]
    fn non_retriable_fails_fast() {
        let g = Gateway::new(
            Flaky {
                failures: AtomicUsize::new(1),
                retriable: false,
            },
            fast(),
        );
        let mut s = g.session("t");
        assert!(s.complete(&sufficiency_input(vec![])).is_err());
        assert_eq!(s.entries[0].attempts, 1);
    }

    #[test]
    fn oversized_prompt_drops_oldest_evidence() {
        let cfg = GatewayConfig {
            context_budget: 200,
            ..fast()
        };
        let g = Gateway::new(ScriptedResponder::new("SUFFICIENT: no"), cfg);
        let items: Vec<String> = (0..20).map(|i| format!("item-{i:02} {}", "x".repeat(60))).collect();
        let mut s = g.session("t");
        s.complete(&sufficiency_input(items.clone())).unwrap();
        let e = &s.entries[0];
        assert!(e.evidence_dropped > 0);
        assert!(e.estimated_tokens <= 200);
        assert!(e.prompt.contains("item-19"));
        assert!(!e.prompt.contains("item-00"));
        assert_eq!(s.flags.len(), 1);
        // one fewer drop would not have fit
        let input = sufficiency_input(items);
        let prev = input.render_from(e.evidence_dropped - 1).unwrap();
        assert!(estimate_tokens(&prev, 4) > 200);
    }

    #[test]
    fn budget_error_when_template_alone_overflows() {
        let cfg = GatewayConfig {
            context_budget: 10,
            ..fast()
        };
        let g = Gateway::new(ScriptedResponder::new("x"), cfg);
        let err = g.session("t").complete(&sufficiency_input(vec![])).unwrap_err();
        assert!(matches!(err, Error::Budget { limit: 10, .. }));
    }

    #[test]
    fn transcript_has_no_latency() {
        let g = Gateway::new(ScriptedResponder::new("SUFFICIENT: no"), fast());
        let mut s = g.session("t");
        s.complete(&sufficiency_input(vec!["a".into()])).unwrap();
        let line = transcript_jsonl(&s.entries);
        assert!(!line.contains("latency"));
        assert_eq!(line.lines().count(), 1);
    }
}
