//! Attribute word extraction.
//!
//! Two backends produce an [`AttributeList`] for a caption: a lexicon lookup
//! that needs no network, and a chat-completion client that asks a language
//! model to list the attribute words in a bracketed reply. Both results are
//! validated so that every returned word occurs in the caption.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::tokenizer::normalize_words;

const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.tsv");

/// Environment variable read for the bearer token of the chat endpoint.
pub const DEFAULT_API_KEY_ENV: &str = "FGOVD_LLM_API_KEY";

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("request to {endpoint} failed after {attempts} attempt(s): {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("unparseable reply ({reason}): {raw:?}")]
    Format { raw: String, reason: String },
    #[error("lexicon line {line}: {reason}")]
    Lexicon { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeType {
    Color,
    Material,
    Pattern,
    Transparency,
}

impl AttributeType {
    pub const ALL: [AttributeType; 4] = [
        AttributeType::Color,
        AttributeType::Material,
        AttributeType::Pattern,
        AttributeType::Transparency,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttributeType::Color => "color",
            AttributeType::Material => "material",
            AttributeType::Pattern => "pattern",
            AttributeType::Transparency => "transparency",
        }
    }
}

impl fmt::Display for AttributeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AttributeType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "color" | "colour" => Ok(AttributeType::Color),
            "material" => Ok(AttributeType::Material),
            "pattern" => Ok(AttributeType::Pattern),
            "transparency" => Ok(AttributeType::Transparency),
            other => Err(format!("unknown attribute type `{other}`")),
        }
    }
}

/// Ordered attribute words of one caption. An empty list is the `[None]` answer.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AttributeList {
    words: Vec<String>,
}

impl AttributeList {
    /// Builds a list from words, normalizing case and dropping duplicates.
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut seen = HashSet::new();
        let words = words
            .into_iter()
            .flat_map(|w| normalize_words(w.as_ref()))
            .filter(|w| seen.insert(w.clone()))
            .collect();
        Self { words }
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn is_none(&self) -> bool {
        self.words.is_empty()
    }

    /// Keeps only words that occur in `caption`.
    pub fn validated_against(self, caption: &str) -> Self {
        let caption_words: HashSet<String> = normalize_words(caption).into_iter().collect();
        let words = self
            .words
            .into_iter()
            .filter(|w| caption_words.contains(w))
            .collect();
        Self { words }
    }
}

impl fmt::Display for AttributeList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.words.is_empty() {
            f.write_str("[None]")
        } else {
            write!(f, "[{}]", self.words.join(" "))
        }
    }
}

/// Parses a bracketed reply such as `[red striped]` or `[None]`.
///
/// Text outside the brackets is ignored as long as exactly one bracketed
/// group is present.
pub fn parse_llm_output(raw: &str) -> Result<AttributeList, ExtractError> {
    let format_err = |reason: &str| ExtractError::Format {
        raw: raw.to_string(),
        reason: reason.to_string(),
    };

    let mut groups = Vec::new();
    let mut open: Option<usize> = None;
    for (i, c) in raw.char_indices() {
        match c {
            '[' if open.is_none() => open = Some(i + 1),
            '[' => return Err(format_err("nested brackets")),
            ']' => match open.take() {
                Some(start) => groups.push(&raw[start..i]),
                None => return Err(format_err("unbalanced `]`")),
            },
            _ => {}
        }
    }
    if open.is_some() {
        return Err(format_err("unclosed `[`"));
    }
    let body = match groups.as_slice() {
        [] => return Err(format_err("no bracketed group")),
        [one] => *one,
        _ => return Err(format_err("multiple bracketed groups")),
    };

    let words: Vec<&str> = body.split_whitespace().collect();
    if words.len() == 1 && words[0].eq_ignore_ascii_case("none") {
        return Ok(AttributeList::none());
    }
    Ok(AttributeList::new(words))
}

/// Word → attribute type table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    entries: BTreeMap<String, AttributeType>,
}

impl Lexicon {
    /// Parses `word<TAB>type` lines. Blank lines and `#` comments are skipped.
    pub fn from_tsv(text: &str) -> Result<Self, ExtractError> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, ty) = line.split_once('\t').ok_or_else(|| ExtractError::Lexicon {
                line: n + 1,
                reason: "expected `word<TAB>type`".into(),
            })?;
            let ty: AttributeType = ty.parse().map_err(|reason| ExtractError::Lexicon {
                line: n + 1,
                reason,
            })?;
            let word = word.trim().to_ascii_lowercase();
            if word.is_empty() || word.contains(char::is_whitespace) {
                return Err(ExtractError::Lexicon {
                    line: n + 1,
                    reason: format!("lexicon entries must be single words, got `{word}`"),
                });
            }
            entries.insert(word, ty);
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExtractError> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, word: &str) -> Option<AttributeType> {
        self.entries.get(word).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, AttributeType)> {
        self.entries.iter().map(|(w, t)| (w.as_str(), *t))
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::from_tsv(DEFAULT_LEXICON).expect("bundled lexicon is well-formed")
    }
}

/// Caption words found in `lexicon`, in caption order.
pub fn extract_rule_based(text: &str, lexicon: &Lexicon) -> AttributeList {
    AttributeList::new(
        normalize_words(text)
            .into_iter()
            .filter(|w| lexicon.get(w).is_some()),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.to_string(),
            content: content.into(),
        }
    }
}

/// System message, in-context examples and the user turn template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionPrompt {
    pub system_message: String,
    pub examples: Vec<(String, String)>,
    /// Must contain `{caption}`.
    pub user_template: String,
}

const SYSTEM_MESSAGE: &str = "You extract attribute words from object descriptions. \
An attribute word describes how an object looks: its color, material, pattern or transparency. \
Category names, counts, actions and function words are not attribute words. \
Copy attribute words exactly as they appear in the description. \
Answer with the attribute words separated by single spaces inside one pair of square brackets, \
for example [attribute1 attribute2], and write nothing else. \
If the description has no attribute word, answer [None].";

// Hand-written demonstrations for this project; not taken from any published prompt.
const DEFAULT_EXAMPLES: [(&str, &str); 15] = [
    ("a red apple on a table", "[red]"),
    ("a dark brown leather sofa", "[dark brown leather]"),
    ("a dog running in the park", "[None]"),
    ("a transparent plastic bottle", "[transparent plastic]"),
    ("a striped cotton shirt", "[striped cotton]"),
    ("two people crossing the street", "[None]"),
    ("a frosted glass vase with floral pattern", "[frosted glass floral]"),
    ("a black metal chair", "[black metal]"),
    ("a checkered wool blanket", "[checkered wool]"),
    ("a light blue ceramic mug", "[light blue ceramic]"),
    ("the car parked near the house", "[None]"),
    ("a translucent pink umbrella", "[translucent pink]"),
    ("a wooden bench with dotted cushions", "[wooden dotted]"),
    ("an opaque white stone bowl", "[opaque white stone]"),
    ("a green plaid denim jacket", "[green plaid denim]"),
];

impl Default for ExtractionPrompt {
    fn default() -> Self {
        Self {
            system_message: SYSTEM_MESSAGE.to_string(),
            examples: DEFAULT_EXAMPLES
                .iter()
                .map(|(c, a)| (c.to_string(), a.to_string()))
                .collect(),
            user_template: "Description: {caption}".to_string(),
        }
    }
}

impl ExtractionPrompt {
    pub fn user_turn(&self, caption: &str) -> String {
        self.user_template.replace("{caption}", caption)
    }

    /// System message, then one user/assistant pair per example, then the caption.
    pub fn messages(&self, caption: &str) -> Vec<ChatMessage> {
        let mut messages = Vec::with_capacity(2 + 2 * self.examples.len());
        messages.push(ChatMessage::new("system", self.system_message.clone()));
        for (example, answer) in &self.examples {
            messages.push(ChatMessage::new("user", self.user_turn(example)));
            messages.push(ChatMessage::new("assistant", answer.clone()));
        }
        messages.push(ChatMessage::new("user", self.user_turn(caption)));
        messages
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmClientConfig {
    /// Full URL of the chat-completion route.
    pub endpoint_url: String,
    pub model_name: String,
    #[serde(with = "duration_ms")]
    pub timeout: Duration,
    pub max_retries: u32,
    pub temperature: f64,
    #[serde(with = "duration_ms")]
    pub initial_backoff: Duration,
    /// Upper bound on concurrent requests in [`LlmClient::extract_many`].
    pub max_in_flight: usize,
    pub api_key_env: String,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://127.0.0.1:8080/v1/chat/completions".to_string(),
            model_name: "llama-2-7b-chat".to_string(),
            timeout: Duration::from_secs(30),
            max_retries: 2,
            temperature: 0.0,
            initial_backoff: Duration::from_millis(250),
            max_in_flight: 4,
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
        }
    }
}

mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Blocking chat-completion client with retry and exponential backoff.
#[derive(Debug, Clone)]
pub struct LlmClient {
    config: LlmClientConfig,
    http: reqwest::blocking::Client,
    api_key: Option<String>,
}

enum Attempt {
    Retry(String),
    Fatal(ExtractError),
}

impl LlmClient {
    pub fn new(config: LlmClientConfig) -> Result<Self, ExtractError> {
        if config.temperature.is_nan() || config.temperature < 0.0 {
            return Err(ExtractError::Format {
                raw: config.temperature.to_string(),
                reason: "temperature must be non-negative".into(),
            });
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ExtractError::Transport {
                endpoint: config.endpoint_url.clone(),
                attempts: 0,
                message: e.to_string(),
            })?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self {
            config,
            http,
            api_key,
        })
    }

    pub fn config(&self) -> &LlmClientConfig {
        &self.config
    }

    /// Sends the messages and returns the assistant text of the reply.
    pub fn complete(&self, messages: &[ChatMessage]) -> Result<String, ExtractError> {
        let body = json!({
            "model": self.config.model_name,
            "messages": messages,
            "temperature": self.config.temperature,
        });
        let attempts = self.config.max_retries + 1;
        let mut delay = self.config.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.try_once(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(message)) => {
                    log::warn!(
                        "chat request attempt {attempt}/{attempts} to {} failed: {message}",
                        self.config.endpoint_url
                    );
                    last = message;
                    if attempt < attempts {
                        std::thread::sleep(delay);
                        delay = delay.saturating_mul(2);
                    }
                }
            }
        }
        Err(ExtractError::Transport {
            endpoint: self.config.endpoint_url.clone(),
            attempts,
            message: last,
        })
    }

    fn try_once(&self, body: &serde_json::Value) -> Result<String, Attempt> {
        let mut request = self.http.post(&self.config.endpoint_url).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(ExtractError::Transport {
                endpoint: self.config.endpoint_url.clone(),
                attempts: 1,
                message: format!("HTTP {status}: {text}"),
            }));
        }
        reply_text(&text).map_err(Attempt::Fatal)
    }

    pub fn extract(&self, caption: &str, prompt: &ExtractionPrompt) -> Result<AttributeList, ExtractError> {
        let reply = self.complete(&prompt.messages(caption))?;
        Ok(parse_llm_output(&reply)?.validated_against(caption))
    }

    /// Extracts for many captions with at most `max_in_flight` concurrent requests.
    /// Results keep the input order.
    pub fn extract_many(
        &self,
        captions: &[String],
        prompt: &ExtractionPrompt,
    ) -> Vec<Result<AttributeList, ExtractError>> {
        use rayon::prelude::*;

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.max_in_flight.max(1))
            .build();
        match pool {
            Ok(pool) => pool.install(|| {
                captions
                    .par_iter()
                    .map(|c| self.extract(c, prompt))
                    .collect()
            }),
            Err(_) => captions.iter().map(|c| self.extract(c, prompt)).collect(),
        }
    }
}

/// Pulls the assistant text out of a chat-completion reply body.
///
/// Accepts `choices[0].message.content`, `message.content` or a top-level
/// `content` string.
fn reply_text(body: &str) -> Result<String, ExtractError> {
    let format_err = |reason: &str| ExtractError::Format {
        raw: body.to_string(),
        reason: reason.to_string(),
    };
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| format_err(&format!("invalid JSON: {e}")))?;
    let text = [
        value.pointer("/choices/0/message/content"),
        value.pointer("/message/content"),
        value.pointer("/content"),
    ]
    .into_iter()
    .flatten()
    .find_map(|v| v.as_str())
    .map(str::to_string);
    text.ok_or_else(|| format_err("no assistant text in reply"))
}

/// Convenience wrapper for a one-off call.
pub fn extract_llm(
    text: &str,
    prompt: &ExtractionPrompt,
    cfg: &LlmClientConfig,
) -> Result<AttributeList, ExtractError> {
    LlmClient::new(cfg.clone())?.extract(text, prompt)
}

/// Anything that turns a caption into its attribute words.
pub trait AttributeExtractor: Send + Sync {
    fn extract(&self, caption: &str) -> Result<AttributeList, ExtractError>;

    fn name(&self) -> &str;
}

#[derive(Debug, Clone, Default)]
pub struct RuleBasedExtractor {
    pub lexicon: Lexicon,
}

impl AttributeExtractor for RuleBasedExtractor {
    fn extract(&self, caption: &str) -> Result<AttributeList, ExtractError> {
        Ok(extract_rule_based(caption, &self.lexicon))
    }

    fn name(&self) -> &str {
        "lexicon"
    }
}

/// LLM extraction, optionally falling back to the lexicon on transport errors.
#[derive(Debug, Clone)]
pub struct LlmExtractor {
    pub client: LlmClient,
    pub prompt: ExtractionPrompt,
    pub fallback: Option<Lexicon>,
}

impl AttributeExtractor for LlmExtractor {
    fn extract(&self, caption: &str) -> Result<AttributeList, ExtractError> {
        match (self.client.extract(caption, &self.prompt), &self.fallback) {
            (Err(ExtractError::Transport { message, .. }), Some(lexicon)) => {
                log::warn!("falling back to lexicon extraction: {message}");
                Ok(extract_rule_based(caption, lexicon))
            }
            (result, _) => result,
        }
    }

    fn name(&self) -> &str {
        "llm"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(list: &AttributeList) -> Vec<&str> {
        list.words().iter().map(String::as_str).collect()
    }

    #[test]
    fn rule_based_examples() {
        let lex = Lexicon::default();
        let out = extract_rule_based("a dark brown wooden chair", &lex);
        assert_eq!(words(&out), ["dark", "brown", "wooden"]);
        assert!(extract_rule_based("a dog", &lex).is_none());
        let out = extract_rule_based("striped transparent glass bottle", &lex);
        assert_eq!(words(&out), ["striped", "transparent", "glass"]);
    }

    #[test]
    fn default_lexicon_covers_the_four_types() {
        let lex = Lexicon::default();
        assert!(lex.len() >= 150);
        for ty in AttributeType::ALL {
            assert!(lex.iter().filter(|(_, t)| *t == ty).count() >= 8, "{ty}");
        }
    }

    #[test]
    fn parse_examples() {
        assert_eq!(words(&parse_llm_output("[red striped]").unwrap()), ["red", "striped"]);
        assert!(parse_llm_output("Sure! [None]").unwrap().is_none());
        assert!(parse_llm_output("[none]").unwrap().is_none());
        assert!(matches!(parse_llm_output("[a][b]"), Err(ExtractError::Format { .. })));
        assert!(matches!(parse_llm_output("red striped"), Err(ExtractError::Format { .. })));
        assert!(matches!(parse_llm_output("[red"), Err(ExtractError::Format { .. })));
        assert!(matches!(parse_llm_output("[[red]]"), Err(ExtractError::Format { .. })));
    }

    #[test]
    fn format_error_keeps_raw_reply() {
        match parse_llm_output("I cannot help") {
            Err(ExtractError::Format { raw, .. }) => assert_eq!(raw, "I cannot help"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validation_drops_words_not_in_caption() {
        let out = parse_llm_output("[blue cat]").unwrap().validated_against("a blue dog");
        assert_eq!(words(&out), ["blue"]);
        let out = parse_llm_output("[dark brown]").unwrap().validated_against("a dark brown dog");
        assert_eq!(words(&out), ["dark", "brown"]);
    }

    #[test]
    fn display_round_trips() {
        let list = AttributeList::new(["red", "striped"]);
        assert_eq!(list.to_string(), "[red striped]");
        assert_eq!(parse_llm_output(&list.to_string()).unwrap(), list);
        assert_eq!(AttributeList::none().to_string(), "[None]");
    }

    #[test]
    fn prompt_layout() {
        let prompt = ExtractionPrompt::default();
        assert_eq!(prompt.examples.len(), 15);
        let msgs = prompt.messages("a red box");
        assert_eq!(msgs.len(), 32);
        assert_eq!(msgs[0].role, "system");
        assert_eq!(msgs[1].role, "user");
        assert_eq!(msgs[2].role, "assistant");
        assert_eq!(msgs.last().unwrap().content, "Description: a red box");
        // demonstrations obey the reply contract themselves
        for (caption, answer) in &prompt.examples {
            let parsed = parse_llm_output(answer).unwrap();
            assert_eq!(parsed.clone().validated_against(caption), parsed);
        }
    }

    #[test]
    fn reply_shapes() {
        let openai = r#"{"choices":[{"message":{"role":"assistant","content":"[red]"}}]}"#;
        assert_eq!(reply_text(openai).unwrap(), "[red]");
        let ollama = r#"{"message":{"role":"assistant","content":"[None]"}}"#;
        assert_eq!(reply_text(ollama).unwrap(), "[None]");
        assert!(matches!(reply_text("{}"), Err(ExtractError::Format { .. })));
        assert!(matches!(reply_text("<html>"), Err(ExtractError::Format { .. })));
    }

    #[test]
    fn lexicon_parse_errors() {
        assert!(matches!(
            Lexicon::from_tsv("red\tcolor\nblue colour\n"),
            Err(ExtractError::Lexicon { line: 2, .. })
        ));
        assert!(matches!(
            Lexicon::from_tsv("red\tshape\n"),
            Err(ExtractError::Lexicon { line: 1, .. })
        ));
        let lex = Lexicon::from_tsv("# comment\n\nRed\tcolour\n").unwrap();
        assert_eq!(lex.get("red"), Some(AttributeType::Color));
    }
}
