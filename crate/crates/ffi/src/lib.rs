//! C ABI over `cbs-core`.
//!
//! Objects cross the boundary as opaque handles created by `cbs_*_new` /
//! `cbs_*_load` style constructors and released by the matching `*_free`.
//! Every fallible call returns a [`CbsStatus`]; on failure a message is
//! available from [`cbs_last_error_message`] on the same thread.
//!
//! Strings passed in must be NUL-terminated UTF-8. Strings returned as
//! `char *` are owned by the caller and released with [`cbs_string_free`];
//! `const char *` results are borrowed from their handle.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cbs_core::harness::fixtures::builtin_model;
use cbs_core::harness::{bundled_fixtures, verify};
use cbs_core::{
    best_of_n, cbs, guidance_score, sample_base, ChunkLength, Error, GuidancePair, Hypothesis, LanguageModel, Prompt, SamplingParams,
    SearchConfig, TabularLM, TopK,
};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Tokenization = 4,
    Model = 5,
    VocabMismatch = 6,
    Budget = 7,
    Remote = 8,
    Io = 9,
    Parse = 10,
    Panic = 11,
}

impl From<&Error> for CbsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::UntokenizableText { .. } | Error::InvalidSequence(_) => CbsStatus::Tokenization,
            Error::InvalidParameter(_) | Error::InvalidVocab(_) | Error::InvalidLogits(_) => CbsStatus::InvalidArgument,
            Error::MissingContext { .. } | Error::ZeroSupport { .. } | Error::StateSpaceTooLarge { .. } | Error::ScoringUnsupported => {
                CbsStatus::Model
            }
            Error::VocabMismatch(_) => CbsStatus::VocabMismatch,
            Error::BudgetExceeded { .. } | Error::SupportTooLarge { .. } => CbsStatus::Budget,
            Error::Timeout | Error::HttpStatus(_) | Error::RateLimited { .. } | Error::Transport(_) | Error::Protocol(_) => {
                CbsStatus::Remote
            }
            Error::Io(_) => CbsStatus::Io,
            Error::Fixture { .. } | Error::Config(_) | Error::Json(_) => CbsStatus::Parse,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(CbsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(CbsStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CbsStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status plus last-error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CbsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CbsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            CbsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|e| Failure(CbsStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map(CString::into_raw).unwrap_or(ptr::null_mut())
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cbs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn cbs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn cbs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ── models ───────────────────────────────────────────────────────────────

/// A tabular n-gram language model.
pub struct CbsModel {
    inner: TabularLM,
}

fn new_model(lm: TabularLM, out: *mut *mut CbsModel) -> Result<(), Failure> {
    let out = unsafe { out_arg(out, "out")? };
    *out = Box::into_raw(Box::new(CbsModel { inner: lm }));
    Ok(())
}

/// Parses a model from fixture text.
///
/// # Safety
/// `text` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cbs_model_parse(text: *const c_char, out: *mut *mut CbsModel) -> CbsStatus {
    guard(|| new_model(TabularLM::parse(str_arg(text, "text")?)?, out))
}

/// Loads a model from a fixture file.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cbs_model_load(path: *const c_char, out: *mut *mut CbsModel) -> CbsStatus {
    guard(|| new_model(TabularLM::load(str_arg(path, "path")?)?, out))
}

/// Builds a bundled model: `w2s-ref`, `w2s-tuned`, `w2s-base` or `uniform27`.
///
/// # Safety
/// `name` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cbs_model_builtin(name: *const c_char, out: *mut *mut CbsModel) -> CbsStatus {
    guard(|| new_model(builtin_model(str_arg(name, "name")?)?, out))
}

/// Vocabulary size including EOS; 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cbs_model_vocab_size(model: *const CbsModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.vocab().len())
}

/// Serializes the model back to fixture text.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cbs_model_to_fixture(model: *const CbsModel, out: *mut *mut c_char) -> CbsStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        *out_arg(out, "out")? = owned_string(m.inner.to_fixture());
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cbs_model_free(model: *mut CbsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ── guidance ─────────────────────────────────────────────────────────────

/// A tuned/untuned model pair scoring responses by their log-probability ratio.
pub struct CbsGuidance {
    inner: GuidancePair,
}

/// Pairs two models over the same vocabulary. Both are copied; the caller
/// keeps ownership of its handles.
///
/// # Safety
/// `tuned` and `untuned` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cbs_guidance_new(tuned: *const CbsModel, untuned: *const CbsModel, out: *mut *mut CbsGuidance) -> CbsStatus {
    guard(|| {
        let t = ref_arg(tuned, "tuned")?.inner.clone();
        let u = ref_arg(untuned, "untuned")?.inner.clone();
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(CbsGuidance { inner: GuidancePair::from_models(t, u)? }));
        Ok(())
    })
}

/// Guidance score of `response` after `prompt`, both as text under the pair's
/// vocabulary.
///
/// # Safety
/// `guidance` must be a live handle, strings valid, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cbs_guidance_score(
    guidance: *const CbsGuidance,
    prompt: *const c_char,
    response: *const c_char,
    out: *mut f64,
) -> CbsStatus {
    guard(|| {
        let g = &ref_arg(guidance, "guidance")?.inner;
        let vocab = g.vocab().ok_or_else(|| Failure(CbsStatus::Model, "guidance pair has no token vocabulary".into()))?;
        let x = vocab.encode(str_arg(prompt, "prompt")?)?;
        let y = vocab.encode(str_arg(response, "response")?)?;
        *out_arg(out, "out")? = guidance_score(g, &x, &y)?.0;
        Ok(())
    })
}

/// # Safety
/// `guidance` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cbs_guidance_free(guidance: *mut CbsGuidance) {
    if !guidance.is_null() {
        drop(Box::from_raw(guidance));
    }
}

// ── search ───────────────────────────────────────────────────────────────

/// Search and sampling settings. `chunk_length = 0` means unbounded chunks and
/// `top_k = 0` keeps every token.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CbsSearchParams {
    pub beam_width: usize,
    pub successors: usize,
    pub chunk_length: usize,
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub seed: u64,
    /// Expand every token of the filtered support instead of sampling.
    pub exhaustive: bool,
}

/// W = 4, K = 4, L = 5, 64 tokens, T = 0.7, top-k 50, top-p 1, seed 0.
#[no_mangle]
pub extern "C" fn cbs_search_params_default() -> CbsSearchParams {
    let s = SamplingParams::default();
    CbsSearchParams {
        beam_width: 4,
        successors: 4,
        chunk_length: 5,
        max_tokens: 64,
        temperature: s.temperature,
        top_k: match s.top_k {
            TopK::All => 0,
            TopK::Keep(k) => k,
        },
        top_p: s.top_p,
        seed: s.seed,
        exhaustive: false,
    }
}

impl CbsSearchParams {
    fn sampling(&self) -> SamplingParams {
        SamplingParams {
            temperature: self.temperature,
            top_k: if self.top_k == 0 { TopK::All } else { TopK::Keep(self.top_k) },
            top_p: self.top_p,
            seed: self.seed,
        }
    }

    fn config(&self) -> SearchConfig {
        let config = if self.exhaustive {
            SearchConfig::exhaustive(self.beam_width, self.max_tokens)
        } else {
            let l = if self.chunk_length == 0 { ChunkLength::Infinite } else { ChunkLength::Tokens(self.chunk_length) };
            SearchConfig::new(self.beam_width, self.successors, l, self.max_tokens)
        };
        config.with_sampling(self.sampling())
    }
}

/// Output of a search or sampling call.
pub struct CbsResult {
    best: Hypothesis,
    text: CString,
    sampled_tokens: usize,
    rounds: usize,
}

impl CbsResult {
    fn new(best: Hypothesis, sampled_tokens: usize, rounds: usize) -> Self {
        let text = CString::new(best.response.text.replace('\0', " ")).unwrap_or_default();
        Self { best, text, sampled_tokens, rounds }
    }
}

unsafe fn search_inputs<'a>(
    base: *const CbsModel,
    prompt: *const c_char,
    params: *const CbsSearchParams,
) -> Result<(&'a TabularLM, Prompt, &'a CbsSearchParams), Failure> {
    let base = &ref_arg(base, "base")?.inner;
    let prompt = Prompt::encode(base.vocab(), str_arg(prompt, "prompt")?)?;
    Ok((base, prompt, ref_arg(params, "params")?))
}

fn store(result: CbsResult, out: *mut *mut CbsResult) -> Result<(), Failure> {
    *unsafe { out_arg(out, "out")? } = Box::into_raw(Box::new(result));
    Ok(())
}

/// Chunk-level beam search from `prompt` (text under the base vocabulary).
///
/// # Safety
/// Handles must be live, `prompt` a valid C string, `params` and `out` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cbs_search(
    base: *const CbsModel,
    guidance: *const CbsGuidance,
    prompt: *const c_char,
    params: *const CbsSearchParams,
    out: *mut *mut CbsResult,
) -> CbsStatus {
    guard(|| {
        let (base, prompt, params) = search_inputs(base, prompt, params)?;
        let pair = &ref_arg(guidance, "guidance")?.inner;
        let o = cbs(base, pair, &prompt, &params.config())?;
        store(CbsResult::new(o.best, o.sampled_tokens, o.rounds), out)
    })
}

/// Best-of-N: `n` full samples, keep the highest guidance score. Uses the
/// sampling fields and `max_tokens` of `params`.
///
/// # Safety
/// As for [`cbs_search`].
#[no_mangle]
pub unsafe extern "C" fn cbs_best_of_n(
    base: *const CbsModel,
    guidance: *const CbsGuidance,
    prompt: *const c_char,
    n: usize,
    params: *const CbsSearchParams,
    out: *mut *mut CbsResult,
) -> CbsStatus {
    guard(|| {
        let (base, prompt, params) = search_inputs(base, prompt, params)?;
        let pair = &ref_arg(guidance, "guidance")?.inner;
        let o = best_of_n(base, pair, &prompt, n, &params.sampling(), params.max_tokens)?;
        store(CbsResult::new(o.best, o.sampled_tokens, 1), out)
    })
}

/// One plain sample from the base model. The result's score is 0.
///
/// # Safety
/// As for [`cbs_search`].
#[no_mangle]
pub unsafe extern "C" fn cbs_sample(
    base: *const CbsModel,
    prompt: *const c_char,
    params: *const CbsSearchParams,
    out: *mut *mut CbsResult,
) -> CbsStatus {
    guard(|| {
        let (base, prompt, params) = search_inputs(base, prompt, params)?;
        let response = sample_base(base, &prompt, &params.sampling(), params.max_tokens)?;
        let sampled = response.len;
        let best = Hypothesis {
            complete: response.is_complete(params.max_tokens),
            truncated: response.is_truncated(params.max_tokens),
            response,
            score: Default::default(),
            slot_seed: params.seed,
        };
        store(CbsResult::new(best, sampled, 1), out)
    })
}

/// Response text, borrowed from the result. NULL for a NULL handle.
///
/// # Safety
/// `result` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cbs_result_text(result: *const CbsResult) -> *const c_char {
    result.as_ref().map_or(ptr::null(), |r| r.text.as_ptr())
}

/// Copies up to `cap` token ids into `buf` and returns the full token count.
///
/// # Safety
/// `result` must be NULL or a live handle; `buf` must hold `cap` entries
/// (it may be NULL when `cap` is 0).
#[no_mangle]
pub unsafe extern "C" fn cbs_result_tokens(result: *const CbsResult, buf: *mut u32, cap: usize) -> usize {
    let Some(r) = result.as_ref() else { return 0 };
    let tokens = &r.best.response.tokens;
    if !buf.is_null() {
        ptr::copy_nonoverlapping(tokens.as_ptr(), buf, tokens.len().min(cap));
    }
    tokens.len()
}

/// Guidance score of the returned response; NaN for a NULL handle.
///
/// # Safety
/// `result` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cbs_result_score(result: *const CbsResult) -> f64 {
    result.as_ref().map_or(f64::NAN, |r| r.best.score.0)
}

/// Whether the response ended with EOS or reached `max_tokens`.
///
/// # Safety
/// `result` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cbs_result_complete(result: *const CbsResult) -> bool {
    result.as_ref().is_some_and(|r| r.best.complete)
}

/// Base-model tokens sampled to produce the result.
///
/// # Safety
/// `result` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cbs_result_sampled_tokens(result: *const CbsResult) -> usize {
    result.as_ref().map_or(0, |r| r.sampled_tokens)
}

/// Search rounds run (1 for best-of-N and plain sampling).
///
/// # Safety
/// `result` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cbs_result_rounds(result: *const CbsResult) -> usize {
    result.as_ref().map_or(0, |r| r.rounds)
}

/// The best hypothesis as JSON; free with [`cbs_string_free`].
///
/// # Safety
/// `result` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cbs_result_to_json(result: *const CbsResult, out: *mut *mut c_char) -> CbsStatus {
    guard(|| {
        let r = ref_arg(result, "result")?;
        let json = serde_json::to_string(&r.best).map_err(Error::from)?;
        *out_arg(out, "out")? = owned_string(json);
        Ok(())
    })
}

/// # Safety
/// `result` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cbs_result_free(result: *mut CbsResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

// ── invariant checks ─────────────────────────────────────────────────────

/// Runs the bundled invariant checks. Writes whether all passed and, when
/// `report` is non-NULL, the JSON report (free with [`cbs_string_free`]).
///
/// # Safety
/// `all_passed` must be a valid pointer; `report` NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn cbs_verify(seed: u64, all_passed: *mut bool, report: *mut *mut c_char) -> CbsStatus {
    guard(|| {
        let all_passed = out_arg(all_passed, "all_passed")?;
        let r = verify(&bundled_fixtures()?, seed);
        *all_passed = r.all_passed();
        if let Some(out) = report.as_mut() {
            *out = owned_string(serde_json::to_string(&r).map_err(Error::from)?);
        }
        Ok(())
    })
}
