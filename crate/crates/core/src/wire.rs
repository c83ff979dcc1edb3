//! Routing wire schema.
//!
//! A request carries everything the large-model side needs to continue a
//! transcript: the detokenized context, the small model's rejected candidate,
//! its last-position hidden state, the routing history and session metadata.
//! Field names and nesting follow the published request format exactly:
//!
//! ```json
//! {"context": "...", "current_token": "...", "token_index": 15,
//!  "routing_threshold": 0.7,
//!  "slm_state": {"hidden_states": [...], "attention_states": null},
//!  "llm_state": null,
//!  "history": {"previous_decisions": [{"token": "...", "route": "SLM"}]},
//!  "meta_data": {"session_id": "...", "request_id": "...", "schema_version": "1.0"}}
//! ```
//!
//! Encoding is canonical: compact JSON, fixed field order, shortest
//! round-trip float formatting. Identical requests produce identical bytes.
//! Absent optionals are written as explicit `null`. Unknown fields are
//! ignored on parse and never emitted. `llm_state` is reserved and always
//! emitted as `null`. Parsing also accepts the `[...]` elision used in
//! documentation examples, treating it as an absent array.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::types::{Route, TokenId};

pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("malformed encoding: {0}")]
    MalformedEncoding(String),
    #[error("missing field {0}")]
    MissingField(String),
    #[error("field {0} out of range")]
    FieldOutOfRange(String),
    #[error("invariant violated on field {0}")]
    InvariantViolation(String),
}

impl WireError {
    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            WireError::MalformedEncoding(_) => "malformed_encoding",
            WireError::MissingField(_) => "missing_field",
            WireError::FieldOutOfRange(_) => "field_out_of_range",
            WireError::InvariantViolation(_) => "invariant_violation",
        }
    }

    /// The offending field, when the error names one.
    pub fn field(&self) -> Option<&str> {
        match self {
            WireError::MalformedEncoding(_) => None,
            WireError::MissingField(f) | WireError::FieldOutOfRange(f) | WireError::InvariantViolation(f) => Some(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SlmState {
    /// Last-position, last-layer hidden vector.
    pub hidden_states: Option<Vec<f64>>,
    /// Opaque, never interpreted.
    pub attention_states: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub token: String,
    pub route: Route,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct History {
    pub previous_decisions: Vec<DecisionRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaData {
    pub session_id: String,
    pub request_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRequest {
    pub context: String,
    pub current_token: String,
    pub token_index: u64,
    pub routing_threshold: f64,
    pub slm_state: SlmState,
    pub history: History,
    pub meta_data: MetaData,
}

#[derive(Serialize)]
struct MetaOut<'a> {
    session_id: &'a str,
    request_id: &'a str,
    schema_version: &'static str,
}

#[derive(Serialize)]
struct RequestOut<'a> {
    context: &'a str,
    current_token: &'a str,
    token_index: u64,
    routing_threshold: f64,
    slm_state: &'a SlmState,
    llm_state: Option<()>,
    history: &'a History,
    meta_data: MetaOut<'a>,
}

impl RoutingRequest {
    pub fn validate(&self) -> Result<(), WireError> {
        if !(0.0..=1.0).contains(&self.routing_threshold) {
            return Err(WireError::InvariantViolation("routing_threshold".into()));
        }
        if self.meta_data.session_id.is_empty() {
            return Err(WireError::InvariantViolation("meta_data.session_id".into()));
        }
        if self.meta_data.request_id.is_empty() {
            return Err(WireError::InvariantViolation("meta_data.request_id".into()));
        }
        if let Some(h) = &self.slm_state.hidden_states {
            if h.iter().any(|v| !v.is_finite()) {
                return Err(WireError::InvariantViolation("slm_state.hidden_states".into()));
            }
        }
        Ok(())
    }
}

pub fn serialize_request(r: &RoutingRequest) -> Result<Vec<u8>, WireError> {
    r.validate()?;
    let out = RequestOut {
        context: &r.context,
        current_token: &r.current_token,
        token_index: r.token_index,
        routing_threshold: r.routing_threshold,
        slm_state: &r.slm_state,
        llm_state: None,
        history: &r.history,
        meta_data: MetaOut {
            session_id: &r.meta_data.session_id,
            request_id: &r.meta_data.request_id,
            schema_version: SCHEMA_VERSION,
        },
    };
    serde_json::to_vec(&out).map_err(|e| WireError::InvariantViolation(e.to_string()))
}

/// Replaces `[...]` placeholders outside string literals with `null`.
fn strip_elisions(bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(bytes.len());
    let mut in_string = false;
    let mut escaped = false;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if in_string {
            out.push(b);
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            i += 1;
            continue;
        }
        if b == b'"' {
            in_string = true;
        } else if b == b'[' {
            let mut j = i + 1;
            while j < bytes.len() && bytes[j].is_ascii_whitespace() {
                j += 1;
            }
            if bytes[j..].starts_with(b"...") {
                let mut k = j + 3;
                while k < bytes.len() && bytes[k].is_ascii_whitespace() {
                    k += 1;
                }
                if k < bytes.len() && bytes[k] == b']' {
                    out.extend_from_slice(b"null");
                    i = k + 1;
                    continue;
                }
            }
        }
        out.push(b);
        i += 1;
    }
    out
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

struct Obj<'a> {
    map: &'a Map<String, Value>,
    path: String,
}

impl<'a> Obj<'a> {
    fn root(v: &'a Value) -> Result<Self, WireError> {
        match v {
            Value::Object(map) => Ok(Obj { map, path: String::new() }),
            _ => Err(WireError::MalformedEncoding("top level must be an object".into())),
        }
    }

    fn required(&self, key: &str) -> Result<&'a Value, WireError> {
        self.map.get(key).ok_or_else(|| WireError::MissingField(join(&self.path, key)))
    }

    fn type_error(&self, key: &str, want: &str) -> WireError {
        WireError::MalformedEncoding(format!("{} must be {want}", join(&self.path, key)))
    }

    fn object(&self, key: &str) -> Result<Obj<'a>, WireError> {
        match self.required(key)? {
            Value::Object(map) => Ok(Obj { map, path: join(&self.path, key) }),
            _ => Err(self.type_error(key, "an object")),
        }
    }

    fn string(&self, key: &str) -> Result<String, WireError> {
        match self.required(key)? {
            Value::String(s) => Ok(s.clone()),
            _ => Err(self.type_error(key, "a string")),
        }
    }

    fn non_empty_string(&self, key: &str) -> Result<String, WireError> {
        let s = self.string(key)?;
        if s.is_empty() {
            return Err(WireError::FieldOutOfRange(join(&self.path, key)));
        }
        Ok(s)
    }

    fn number(&self, key: &str) -> Result<&'a serde_json::Number, WireError> {
        match self.required(key)? {
            Value::Number(n) => Ok(n),
            _ => Err(self.type_error(key, "a number")),
        }
    }

    fn optional(&self, key: &str) -> Option<&'a Value> {
        self.map.get(key).filter(|v| !v.is_null())
    }
}

pub fn parse_request(bytes: &[u8]) -> Result<RoutingRequest, WireError> {
    let cleaned = strip_elisions(bytes);
    let value: Value = serde_json::from_slice(&cleaned).map_err(|e| WireError::MalformedEncoding(e.to_string()))?;
    let root = Obj::root(&value)?;

    let context = root.string("context")?;
    let current_token = root.string("current_token")?;
    let n = root.number("token_index")?;
    let token_index = match n.as_u64() {
        Some(v) => v,
        None if n.as_i64().is_some() || n.as_f64().is_some_and(|f| f < 0.0) => {
            return Err(WireError::FieldOutOfRange("token_index".into()))
        }
        None => return Err(WireError::MalformedEncoding("token_index must be a non-negative integer".into())),
    };
    let routing_threshold = root.number("routing_threshold")?.as_f64().unwrap_or(f64::NAN);
    if !(0.0..=1.0).contains(&routing_threshold) {
        return Err(WireError::FieldOutOfRange("routing_threshold".into()));
    }

    let slm = root.object("slm_state")?;
    let hidden_states = match slm.optional("hidden_states") {
        None => None,
        Some(Value::Array(items)) => Some(
            items
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| slm.type_error("hidden_states", "an array of numbers")))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        Some(_) => return Err(slm.type_error("hidden_states", "an array or null")),
    };
    let attention_states = slm.optional("attention_states").cloned();

    let history = root.object("history")?;
    let decisions = match history.required("previous_decisions")? {
        Value::Array(items) => items,
        _ => return Err(history.type_error("previous_decisions", "an array")),
    };
    let mut previous_decisions = Vec::with_capacity(decisions.len());
    for (i, d) in decisions.iter().enumerate() {
        let entry = match d {
            Value::Object(map) => Obj { map, path: format!("history.previous_decisions[{i}]") },
            _ => return Err(WireError::MalformedEncoding(format!("history.previous_decisions[{i}] must be an object"))),
        };
        let token = entry.string("token")?;
        let route = entry
            .string("route")?
            .parse::<Route>()
            .map_err(|_| WireError::FieldOutOfRange(join(&entry.path, "route")))?;
        previous_decisions.push(DecisionRecord { token, route });
    }

    let meta = root.object("meta_data")?;
    let session_id = meta.non_empty_string("session_id")?;
    let request_id = meta.non_empty_string("request_id")?;
    if let Some(v) = meta.optional("schema_version") {
        match v.as_str() {
            Some(s) if s.split('.').next() == SCHEMA_VERSION.split('.').next() => {}
            _ => return Err(WireError::FieldOutOfRange("meta_data.schema_version".into())),
        }
    }

    let request = RoutingRequest {
        context,
        current_token,
        token_index,
        routing_threshold,
        slm_state: SlmState { hidden_states, attention_states },
        history: History { previous_decisions },
        meta_data: MetaData { session_id, request_id },
    };
    Ok(request)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseToken {
    pub text: String,
    pub token: TokenId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingResponse {
    pub tokens: Vec<ResponseToken>,
    pub llm_time_seconds: f64,
    pub request_id: String,
    pub updated_history: History,
}

pub fn serialize_response(r: &RoutingResponse) -> Result<Vec<u8>, WireError> {
    if !(r.llm_time_seconds >= 0.0 && r.llm_time_seconds.is_finite()) {
        return Err(WireError::InvariantViolation("llm_time_seconds".into()));
    }
    if r.request_id.is_empty() {
        return Err(WireError::InvariantViolation("request_id".into()));
    }
    serde_json::to_vec(r).map_err(|e| WireError::InvariantViolation(e.to_string()))
}

pub fn parse_response(bytes: &[u8]) -> Result<RoutingResponse, WireError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| WireError::MalformedEncoding(e.to_string()))?;
    let root = Obj::root(&value)?;
    for key in ["tokens", "llm_time_seconds", "request_id", "updated_history"] {
        root.required(key)?;
    }
    let r: RoutingResponse = serde_json::from_value(value).map_err(|e| WireError::MalformedEncoding(e.to_string()))?;
    if !(r.llm_time_seconds >= 0.0) {
        return Err(WireError::FieldOutOfRange("llm_time_seconds".into()));
    }
    if r.request_id.is_empty() {
        return Err(WireError::FieldOutOfRange("request_id".into()));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn figure_request() -> RoutingRequest {
        RoutingRequest {
            context: "The mitochondria is the powerhouse of the".into(),
            current_token: "cell".into(),
            token_index: 15,
            routing_threshold: 0.7,
            slm_state: SlmState::default(),
            history: History {
                previous_decisions: vec![
                    DecisionRecord { token: "mitochondria".into(), route: Route::Slm },
                    DecisionRecord { token: "powerhouse".into(), route: Route::Llm },
                ],
            },
            meta_data: MetaData { session_id: "session123".into(), request_id: "req456".into() },
        }
    }

    fn without(key: &str) -> Vec<u8> {
        let mut v: Value = serde_json::from_slice(&serialize_request(&figure_request()).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove(key);
        serde_json::to_vec(&v).unwrap()
    }

    #[test]
    fn absent_hidden_states_encode_as_null() {
        let bytes = serialize_request(&figure_request()).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("\"hidden_states\":null"));
        assert!(text.contains("\"llm_state\":null"));
        assert_eq!(parse_request(&bytes).unwrap().slm_state.hidden_states, None);
    }

    #[test]
    fn missing_meta_data_is_named() {
        assert_eq!(parse_request(&without("meta_data")), Err(WireError::MissingField("meta_data".into())));
        assert_eq!(parse_request(&without("history")), Err(WireError::MissingField("history".into())));
    }

    #[test]
    fn threshold_out_of_range() {
        let text = String::from_utf8(serialize_request(&figure_request()).unwrap()).unwrap();
        let bad = text.replace("\"routing_threshold\":0.7", "\"routing_threshold\":1.3");
        assert_eq!(parse_request(bad.as_bytes()), Err(WireError::FieldOutOfRange("routing_threshold".into())));
    }

    #[test]
    fn bad_encodings_are_distinguished() {
        assert!(matches!(parse_request(b"{not json"), Err(WireError::MalformedEncoding(_))));
        assert!(matches!(parse_request(b"[1,2]"), Err(WireError::MalformedEncoding(_))));
        let text = String::from_utf8(serialize_request(&figure_request()).unwrap()).unwrap();
        let neg = text.replace("\"token_index\":15", "\"token_index\":-1");
        assert_eq!(parse_request(neg.as_bytes()), Err(WireError::FieldOutOfRange("token_index".into())));
        let route = text.replace("\"route\":\"LLM\"", "\"route\":\"GPU\"");
        assert_eq!(
            parse_request(route.as_bytes()),
            Err(WireError::FieldOutOfRange("history.previous_decisions[1].route".into()))
        );
        let empty = text.replace("\"session123\"", "\"\"");
        assert_eq!(parse_request(empty.as_bytes()), Err(WireError::FieldOutOfRange("meta_data.session_id".into())));
        let ver = text.replace("\"schema_version\":\"1.0\"", "\"schema_version\":\"2.0\"");
        assert_eq!(parse_request(ver.as_bytes()), Err(WireError::FieldOutOfRange("meta_data.schema_version".into())));
    }

    #[test]
    fn unknown_fields_ignored_and_not_emitted() {
        let mut v: Value = serde_json::from_slice(&serialize_request(&figure_request()).unwrap()).unwrap();
        v["extra"] = Value::from(1);
        v["meta_data"]["trace"] = Value::from("x");
        let parsed = parse_request(&serde_json::to_vec(&v).unwrap()).unwrap();
        assert_eq!(parsed, figure_request());
        let again = String::from_utf8(serialize_request(&parsed).unwrap()).unwrap();
        assert!(!again.contains("extra") && !again.contains("trace"));
    }

    #[test]
    fn serialize_rejects_invalid_requests() {
        let mut r = figure_request();
        r.routing_threshold = 2.0;
        assert_eq!(serialize_request(&r), Err(WireError::InvariantViolation("routing_threshold".into())));
        let mut r = figure_request();
        r.meta_data.request_id.clear();
        assert_eq!(serialize_request(&r), Err(WireError::InvariantViolation("meta_data.request_id".into())));
    }

    #[test]
    fn elision_inside_strings_is_preserved() {
        let mut r = figure_request();
        r.context = "look: [...] stays".into();
        let back = parse_request(&serialize_request(&r).unwrap()).unwrap();
        assert_eq!(back.context, "look: [...] stays");
    }

    #[test]
    fn response_round_trip_and_validation() {
        let r = RoutingResponse {
            tokens: vec![ResponseToken { text: "c".into(), token: TokenId(99) }],
            llm_time_seconds: 0.9,
            request_id: "req456".into(),
            updated_history: History::default(),
        };
        assert_eq!(parse_response(&serialize_response(&r).unwrap()).unwrap(), r);
        assert!(matches!(parse_response(b"{\"tokens\":[]}"), Err(WireError::MissingField(_))));
    }
}
