//! C ABI over `plrh-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_load`/`*_new`
//! and released by the matching `*_free`. Every fallible call returns a
//! [`PlrhStatus`]; on failure, [`plrh_last_error`] describes the error for
//! the calling thread. Strings returned through out-parameters are owned by
//! the caller and released with [`plrh_string_free`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use libc::{c_char, size_t};
use plrh_core::data_model::{load_dataset, AnnotatedAnswers, Dataset, SampleId};
use plrh_core::evaluation::{normalize_answer, score_sample};
use plrh_core::prompting::{build_stage1, build_stage2, build_stage3, ExampleBlock, Prompt};
use plrh_core::retrieval::{cosine_similarity_f64, select_examples, SelectionResult, TrainPool};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlrhStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    InvalidData = 4,
    Retrieval = 5,
    Prompt = 6,
    Evaluation = 7,
    NotFound = 8,
    OutOfRange = 9,
    Panic = 10,
}

/// Which prompt a builder produces.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlrhPromptStage {
    Stage1Rationale = 1,
    Stage2Rationale = 2,
    Stage3Answer = 3,
}

/// A loaded dataset and its train pool.
pub struct PlrhDataset {
    dataset: Dataset,
    pool: TrainPool,
}

/// Ranked examples returned by a selection call.
pub struct PlrhSelection {
    result: SelectionResult,
}

/// Example blocks collected before a prompt is built.
pub struct PlrhPromptBuilder {
    stage: PlrhPromptStage,
    head: String,
    no_rationale: bool,
    examples: Vec<ExampleBlock>,
    input: Option<ExampleBlock>,
}

/// A validated, rendered prompt.
pub struct PlrhPrompt {
    prompt: Prompt,
    rendered: CString,
    hash: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(PlrhStatus, String);

impl Failure {
    fn new(status: PlrhStatus, e: impl ToString) -> Self {
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PlrhStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PlrhStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside plrh");
            PlrhStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(PlrhStatus::NullArgument, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(PlrhStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn opt_str_arg(p: *const c_char, name: &str) -> Result<Option<String>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(|s| Some(s.to_owned()))
    }
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure::new(PlrhStatus::NullArgument, format!("`{name}` is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure::new(PlrhStatus::NullArgument, format!("`{name}` is null")))
}

unsafe fn f32_slice<'a>(p: *const f32, len: size_t, name: &str) -> Result<&'a [f32], Failure> {
    if p.is_null() {
        return Err(Failure::new(PlrhStatus::NullArgument, format!("`{name}` is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn c_string(s: &str) -> Result<CString, Failure> {
    CString::new(s).map_err(|_| Failure::new(PlrhStatus::InvalidData, "string contains NUL"))
}

/// Message for the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn plrh_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn plrh_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a samples file and a features file (text or binary).
///
/// # Safety
/// Path arguments must be valid NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plrh_dataset_load(
    samples_path: *const c_char,
    features_path: *const c_char,
    out: *mut *mut PlrhDataset,
) -> PlrhStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let samples = str_arg(samples_path, "samples_path")?;
        let features = str_arg(features_path, "features_path")?;
        let dataset = load_dataset(Path::new(samples), Path::new(features)).map_err(|e| {
            let status = match e {
                plrh_core::DataError::Io { .. } => PlrhStatus::Io,
                _ => PlrhStatus::InvalidData,
            };
            Failure::new(status, e)
        })?;
        let pool = TrainPool::from_dataset(&dataset);
        *out = Box::into_raw(Box::new(PlrhDataset { dataset, pool }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from [`plrh_dataset_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn plrh_dataset_free(ds: *mut PlrhDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn plrh_dataset_len(ds: *const PlrhDataset) -> size_t {
    ds.as_ref().map_or(0, |d| d.dataset.len())
}

/// Number of train samples, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn plrh_dataset_train_len(ds: *const PlrhDataset) -> size_t {
    ds.as_ref().map_or(0, |d| d.pool.len())
}

/// Feature dimension, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn plrh_dataset_feature_dim(ds: *const PlrhDataset) -> size_t {
    ds.as_ref().map_or(0, |d| d.dataset.feature_dim())
}

/// Top-`n` train samples for the dataset sample `sample_id`.
///
/// # Safety
/// `ds` must be a live dataset handle, `sample_id` a valid string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn plrh_select_for_sample(
    ds: *const PlrhDataset,
    sample_id: *const c_char,
    n: size_t,
    out: *mut *mut PlrhSelection,
) -> PlrhStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ds = ref_arg(ds, "ds")?;
        let id = SampleId::new(str_arg(sample_id, "sample_id")?)
            .map_err(|e| Failure::new(PlrhStatus::InvalidData, e))?;
        let sample = ds
            .dataset
            .get(&id)
            .ok_or_else(|| Failure::new(PlrhStatus::NotFound, format!("unknown sample `{id}`")))?;
        let mut result = select_examples(&sample.feature.to_f64(), &ds.pool, n)
            .map_err(|e| Failure::new(PlrhStatus::Retrieval, e))?;
        result.query_id = Some(id);
        *out = Box::into_raw(Box::new(PlrhSelection { result }));
        Ok(())
    })
}

/// Top-`n` train samples for an arbitrary query vector of the dataset's dimension.
///
/// # Safety
/// `query` must point to `dim` readable floats; other pointers as above.
#[no_mangle]
pub unsafe extern "C" fn plrh_select_examples(
    ds: *const PlrhDataset,
    query: *const f32,
    dim: size_t,
    n: size_t,
    out: *mut *mut PlrhSelection,
) -> PlrhStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ds = ref_arg(ds, "ds")?;
        let q: Vec<f64> = f32_slice(query, dim, "query")?.iter().map(|&x| x as f64).collect();
        let result = select_examples(&q, &ds.pool, n).map_err(|e| Failure::new(PlrhStatus::Retrieval, e))?;
        *out = Box::into_raw(Box::new(PlrhSelection { result }));
        Ok(())
    })
}

/// # Safety
/// `sel` must be null or a live selection handle.
#[no_mangle]
pub unsafe extern "C" fn plrh_selection_len(sel: *const PlrhSelection) -> size_t {
    sel.as_ref().map_or(0, |s| s.result.selected.len())
}

/// Id and score at `rank` (0-based). `out_id` receives a caller-owned string.
///
/// # Safety
/// `sel` must be a live selection handle; `out_id` and `out_score` writable.
#[no_mangle]
pub unsafe extern "C" fn plrh_selection_get(
    sel: *const PlrhSelection,
    rank: size_t,
    out_id: *mut *mut c_char,
    out_score: *mut f64,
) -> PlrhStatus {
    guard(|| {
        let sel = ref_arg(sel, "sel")?;
        let out_id = out_arg(out_id, "out_id")?;
        let out_score = out_arg(out_score, "out_score")?;
        let entry = sel.result.selected.get(rank).ok_or_else(|| {
            Failure::new(
                PlrhStatus::OutOfRange,
                format!("rank {rank} out of {}", sel.result.selected.len()),
            )
        })?;
        *out_id = c_string(entry.sample_id.as_str())?.into_raw();
        *out_score = entry.score;
        Ok(())
    })
}

/// # Safety
/// `sel` must be null or a live selection handle.
#[no_mangle]
pub unsafe extern "C" fn plrh_selection_free(sel: *mut PlrhSelection) {
    if !sel.is_null() {
        drop(Box::from_raw(sel));
    }
}

/// Cosine similarity of two vectors of length `dim`.
///
/// # Safety
/// `a` and `b` must point to `dim` readable floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plrh_cosine_similarity(
    a: *const f32,
    b: *const f32,
    dim: size_t,
    out: *mut f64,
) -> PlrhStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let a: Vec<f64> = f32_slice(a, dim, "a")?.iter().map(|&x| x as f64).collect();
        let b: Vec<f64> = f32_slice(b, dim, "b")?.iter().map(|&x| x as f64).collect();
        *out = cosine_similarity_f64(&a, &b).map_err(|e| Failure::new(PlrhStatus::Retrieval, e))?;
        Ok(())
    })
}

/// Normalized form of an answer string, as used for scoring.
///
/// # Safety
/// `answer` must be a valid string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plrh_normalize_answer(answer: *const c_char, out: *mut *mut c_char) -> PlrhStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let s = str_arg(answer, "answer")?;
        *out = c_string(&normalize_answer(s))?.into_raw();
        Ok(())
    })
}

/// Soft accuracy of `predicted` against `n_answers` annotations.
///
/// # Safety
/// `answers` must point to `n_answers` valid strings; out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn plrh_score_sample(
    predicted: *const c_char,
    answers: *const *const c_char,
    n_answers: size_t,
    out_matches: *mut size_t,
    out_accuracy: *mut f64,
) -> PlrhStatus {
    guard(|| {
        let out_matches = out_arg(out_matches, "out_matches")?;
        let out_accuracy = out_arg(out_accuracy, "out_accuracy")?;
        let predicted = str_arg(predicted, "predicted")?;
        if answers.is_null() && n_answers > 0 {
            return Err(Failure::new(PlrhStatus::NullArgument, "`answers` is null"));
        }
        let mut list = Vec::with_capacity(n_answers);
        for i in 0..n_answers {
            list.push(str_arg(*answers.add(i), "answers[i]")?.to_owned());
        }
        let (m, acc) = score_sample(predicted, &AnnotatedAnswers::new(list))
            .map_err(|e| Failure::new(PlrhStatus::Evaluation, e))?;
        *out_matches = m;
        *out_accuracy = acc;
        Ok(())
    })
}

/// Starts a prompt for `stage`, one of the [`PlrhPromptStage`] values.
/// `no_rationale` selects the stage-3 variant without rationales and is
/// ignored for the other stages.
///
/// # Safety
/// `head` must be a valid string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plrh_prompt_builder_new(
    stage: u32,
    head: *const c_char,
    no_rationale: bool,
    out: *mut *mut PlrhPromptBuilder,
) -> PlrhStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let stage = match stage {
            1 => PlrhPromptStage::Stage1Rationale,
            2 => PlrhPromptStage::Stage2Rationale,
            3 => PlrhPromptStage::Stage3Answer,
            _ => return Err(Failure::new(PlrhStatus::OutOfRange, format!("unknown stage {stage}"))),
        };
        let head = str_arg(head, "head")?.to_owned();
        *out = Box::into_raw(Box::new(PlrhPromptBuilder {
            stage,
            head,
            no_rationale,
            examples: Vec::new(),
            input: None,
        }));
        Ok(())
    })
}

unsafe fn block(
    caption: *const c_char,
    question: *const c_char,
    answer: *const c_char,
    rationale: *const c_char,
) -> Result<ExampleBlock, Failure> {
    Ok(ExampleBlock::new(
        str_arg(caption, "caption")?,
        str_arg(question, "question")?,
        opt_str_arg(answer, "answer")?,
        opt_str_arg(rationale, "rationale")?,
    ))
}

/// Appends an in-context example. `answer` and `rationale` may be null.
///
/// # Safety
/// `b` must be a live builder; non-null strings must be valid.
#[no_mangle]
pub unsafe extern "C" fn plrh_prompt_builder_add_example(
    b: *mut PlrhPromptBuilder,
    caption: *const c_char,
    question: *const c_char,
    answer: *const c_char,
    rationale: *const c_char,
) -> PlrhStatus {
    guard(|| {
        let b = out_arg(b, "b")?;
        b.examples.push(block(caption, question, answer, rationale)?);
        Ok(())
    })
}

/// Sets the input block. `answer` and `rationale` may be null.
///
/// # Safety
/// As for [`plrh_prompt_builder_add_example`].
#[no_mangle]
pub unsafe extern "C" fn plrh_prompt_builder_set_input(
    b: *mut PlrhPromptBuilder,
    caption: *const c_char,
    question: *const c_char,
    answer: *const c_char,
    rationale: *const c_char,
) -> PlrhStatus {
    guard(|| {
        let b = out_arg(b, "b")?;
        b.input = Some(block(caption, question, answer, rationale)?);
        Ok(())
    })
}

/// Validates and renders the prompt. The builder stays usable.
///
/// # Safety
/// `b` must be a live builder; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plrh_prompt_build(b: *const PlrhPromptBuilder, out: *mut *mut PlrhPrompt) -> PlrhStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let b = ref_arg(b, "b")?;
        let input = b
            .input
            .clone()
            .ok_or_else(|| Failure::new(PlrhStatus::Prompt, "input block not set"))?;
        let examples = b.examples.clone();
        let prompt = match b.stage {
            PlrhPromptStage::Stage1Rationale => build_stage1(&b.head, examples, input),
            PlrhPromptStage::Stage2Rationale => build_stage2(&b.head, examples, input),
            PlrhPromptStage::Stage3Answer => build_stage3(&b.head, examples, input, b.no_rationale),
        }
        .map_err(|e| Failure::new(PlrhStatus::Prompt, e))?;
        let rendered = c_string(prompt.render())?;
        let hash = c_string(prompt.rendered_hash())?;
        *out = Box::into_raw(Box::new(PlrhPrompt { prompt, rendered, hash }));
        Ok(())
    })
}

/// # Safety
/// `b` must be null or a live builder.
#[no_mangle]
pub unsafe extern "C" fn plrh_prompt_builder_free(b: *mut PlrhPromptBuilder) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}

/// Rendered text, borrowed from the prompt; null for a null handle.
///
/// # Safety
/// `p` must be null or a live prompt handle.
#[no_mangle]
pub unsafe extern "C" fn plrh_prompt_text(p: *const PlrhPrompt) -> *const c_char {
    p.as_ref().map_or(ptr::null(), |p| p.rendered.as_ptr())
}

/// Lowercase hex SHA-256 of the rendered text, borrowed from the prompt.
///
/// # Safety
/// `p` must be null or a live prompt handle.
#[no_mangle]
pub unsafe extern "C" fn plrh_prompt_hash(p: *const PlrhPrompt) -> *const c_char {
    p.as_ref().map_or(ptr::null(), |p| p.hash.as_ptr())
}

/// Number of in-context examples.
///
/// # Safety
/// `p` must be null or a live prompt handle.
#[no_mangle]
pub unsafe extern "C" fn plrh_prompt_example_count(p: *const PlrhPrompt) -> size_t {
    p.as_ref().map_or(0, |p| p.prompt.examples().len())
}

/// # Safety
/// `p` must be null or a live prompt handle.
#[no_mangle]
pub unsafe extern "C" fn plrh_prompt_free(p: *mut PlrhPrompt) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}
