//! Wire shapes of the OpenAI-compatible `/v1/completions` endpoint.
//!
//! Request bodies serialize fields in this order: `model, prompt, max_tokens,
//! temperature, top_p, n, seed, echo, logprobs, stop`. `seed`, `logprobs` and
//! `stop` are omitted when absent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub echo: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("n must be >= 1".into()));
        }
        if self.max_tokens == 0 && !(self.echo && self.logprobs.is_some()) {
            return Err(Error::InvalidParameter("max_tokens = 0 is only valid for echo scoring requests".into()));
        }
        Ok(())
    }

    /// Pure scoring: echo the prompt back with its log-probabilities, generate nothing.
    pub fn is_scoring(&self) -> bool {
        self.echo && self.max_tokens == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub choices: Vec<WireChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireChoice {
    pub text: String,
    #[serde(default)]
    pub index: usize,
    #[serde(default)]
    pub logprobs: Option<WireLogprobs>,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireLogprobs {
    #[serde(default)]
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<Option<f64>>,
    pub text_offset: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
}

/// One returned continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionChoice {
    pub text: String,
    /// Present iff log-probabilities were requested and served. The first
    /// echoed token usually has no log-probability.
    pub token_logprobs: Option<Vec<Option<f64>>>,
    pub text_offsets: Option<Vec<usize>>,
    pub finish_reason: FinishReason,
}

impl TryFrom<WireChoice> for CompletionChoice {
    type Error = Error;
    fn try_from(c: WireChoice) -> Result<Self> {
        let finish_reason = match c.finish_reason.as_deref() {
            Some("stop") | Some("eos") => FinishReason::Stop,
            Some("length") | None => FinishReason::Length,
            Some(other) => return Err(Error::Protocol(format!("unknown finish_reason {other:?}"))),
        };
        let (token_logprobs, text_offsets) = match c.logprobs {
            Some(lp) => {
                if lp.token_logprobs.len() != lp.text_offset.len() {
                    return Err(Error::Protocol("token_logprobs and text_offset lengths differ".into()));
                }
                (Some(lp.token_logprobs), Some(lp.text_offset))
            }
            None => (None, None),
        };
        Ok(Self { text: c.text, token_logprobs, text_offsets, finish_reason })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn body_field_order_and_omissions() {
        let req = CompletionRequest {
            model: "m".into(),
            prompt: "hi".into(),
            max_tokens: 5,
            temperature: 0.7,
            top_p: 1.0,
            n: 2,
            seed: Some(9),
            echo: false,
            logprobs: None,
            stop: None,
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"model":"m","prompt":"hi","max_tokens":5,"temperature":0.7,"top_p":1.0,"n":2,"seed":9,"echo":false}"#
        );
    }

    #[test]
    fn parses_openai_style_choice() {
        let body = r#"{"id":"x","choices":[{"text":"ab","index":0,"logprobs":{"tokens":["a","b"],"token_logprobs":[null,-0.5],"text_offset":[0,1]},"finish_reason":"length"}]}"#;
        let resp: CompletionResponse = serde_json::from_str(body).unwrap();
        let c = CompletionChoice::try_from(resp.choices[0].clone()).unwrap();
        assert_eq!(c.token_logprobs.unwrap(), vec![None, Some(-0.5)]);
        assert_eq!(c.finish_reason, FinishReason::Length);
    }

    #[test]
    fn validation() {
        let mut req = CompletionRequest {
            model: "m".into(),
            prompt: "".into(),
            max_tokens: 0,
            temperature: 1.0,
            top_p: 1.0,
            n: 1,
            seed: None,
            echo: false,
            logprobs: None,
            stop: None,
        };
        assert!(req.validate().is_err());
        req.echo = true;
        req.logprobs = Some(1);
        assert!(req.validate().is_ok());
        req.n = 0;
        assert!(req.validate().is_err());
    }
}
