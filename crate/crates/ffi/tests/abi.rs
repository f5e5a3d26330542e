use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use cbs_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(cbs_last_error_message()).to_string_lossy().into_owned() }
}

fn builtin(name: &str) -> *mut CbsModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cbs_model_builtin(c(name).as_ptr(), &mut m) }, CbsStatus::Ok);
    m
}

fn w2s_params(seed: u64) -> CbsSearchParams {
    CbsSearchParams { max_tokens: 4, chunk_length: 2, temperature: 1.0, top_k: 0, seed, ..cbs_search_params_default() }
}

#[test]
fn search_through_the_abi_matches_the_library() {
    let (base, tuned, reference) = (builtin("w2s-base"), builtin("w2s-tuned"), builtin("w2s-ref"));
    let mut g = ptr::null_mut();
    unsafe {
        assert_eq!(cbs_guidance_new(tuned, reference, &mut g), CbsStatus::Ok);
        let params = w2s_params(3);
        let mut r = ptr::null_mut();
        assert_eq!(cbs_search(base, g, c("b").as_ptr(), &params, &mut r), CbsStatus::Ok);

        let lib = {
            let f = cbs_core::harness::fixtures::WeakToStrong::build().unwrap();
            let pair = cbs_core::GuidancePair::from_models(f.tuned.clone(), f.reference.clone()).unwrap();
            let prompt = cbs_core::Prompt::encode(cbs_core::LanguageModel::vocab(&f.base), "b").unwrap();
            let config = cbs_core::SearchConfig::new(4, 4, cbs_core::ChunkLength::Tokens(2), 4)
                .with_sampling(cbs_core::SamplingParams::unfiltered(3));
            cbs_core::cbs(&f.base, &pair, &prompt, &config).unwrap()
        };
        assert_eq!(CStr::from_ptr(cbs_result_text(r)).to_str().unwrap(), lib.best.response.text);
        assert_eq!(cbs_result_score(r).to_bits(), lib.best.score.0.to_bits());
        assert_eq!(cbs_result_sampled_tokens(r), lib.sampled_tokens);
        assert_eq!(cbs_result_rounds(r), lib.rounds);
        assert!(cbs_result_complete(r));

        let n = cbs_result_tokens(r, ptr::null_mut(), 0);
        let mut buf = vec![0u32; n];
        assert_eq!(cbs_result_tokens(r, buf.as_mut_ptr(), n), n);
        assert_eq!(buf, lib.best.response.tokens.to_vec());

        let mut json = ptr::null_mut();
        assert_eq!(cbs_result_to_json(r, &mut json), CbsStatus::Ok);
        assert_eq!(CStr::from_ptr(json).to_str().unwrap(), serde_json::to_string(&lib.best).unwrap());
        cbs_string_free(json);

        let mut bon = ptr::null_mut();
        assert_eq!(cbs_best_of_n(base, g, c("b").as_ptr(), 16, &params, &mut bon), CbsStatus::Ok);
        let mut one = params;
        one.beam_width = 1;
        one.successors = 16;
        one.chunk_length = 0;
        let mut equiv = ptr::null_mut();
        assert_eq!(cbs_search(base, g, c("b").as_ptr(), &one, &mut equiv), CbsStatus::Ok);
        assert_eq!(CStr::from_ptr(cbs_result_text(bon)), CStr::from_ptr(cbs_result_text(equiv)));

        let mut sample = ptr::null_mut();
        assert_eq!(cbs_sample(base, c("a").as_ptr(), &params, &mut sample), CbsStatus::Ok);
        assert_eq!(cbs_result_score(sample), 0.0);
        assert!(cbs_result_sampled_tokens(sample) >= 1);

        for h in [r, bon, equiv, sample] {
            cbs_result_free(h);
        }
        cbs_guidance_free(g);
        for m in [base, tuned, reference] {
            cbs_model_free(m);
        }
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(cbs_model_builtin(ptr::null(), &mut m), CbsStatus::NullPointer);
        assert!(last_error().contains("name"));
        assert_eq!(cbs_model_builtin(c("missing").as_ptr(), &mut m), CbsStatus::Parse);
        assert!(last_error().contains("missing"));
        assert!(m.is_null());
        assert_eq!(cbs_model_parse(c("not a fixture").as_ptr(), &mut m), CbsStatus::Parse);
        assert_eq!(cbs_model_load(c("/nonexistent/model.tbl").as_ptr(), &mut m), CbsStatus::Io);

        let bad = [0xffu8, 0];
        assert_eq!(cbs_model_builtin(bad.as_ptr().cast(), &mut m), CbsStatus::InvalidUtf8);

        let (base, tuned, reference) = (builtin("w2s-base"), builtin("w2s-tuned"), builtin("w2s-ref"));
        let mut g = ptr::null_mut();
        assert_eq!(cbs_guidance_new(tuned, reference, &mut g), CbsStatus::Ok);
        let mut r = ptr::null_mut();
        let params = w2s_params(0);
        assert_eq!(cbs_search(base, g, c("xyz").as_ptr(), &params, &mut r), CbsStatus::Tokenization);
        let zero = CbsSearchParams { beam_width: 0, ..params };
        assert_eq!(cbs_search(base, g, c("a").as_ptr(), &zero, &mut r), CbsStatus::InvalidArgument);
        // the tuned table has no row for a two-symbol prompt
        assert_eq!(cbs_search(base, g, c("ab").as_ptr(), &params, &mut r), CbsStatus::Model);
        assert_eq!(cbs_search(base, g, c("a").as_ptr(), ptr::null(), &mut r), CbsStatus::NullPointer);
        assert!(r.is_null());

        let uniform = builtin("uniform27");
        let other = cbs_core::TabularLM::uniform(cbs_core::Vocab::with_eos(["x"]).unwrap(), 3).unwrap().to_fixture();
        let mut o = ptr::null_mut();
        assert_eq!(cbs_model_parse(c(&other).as_ptr(), &mut o), CbsStatus::Ok);
        assert_eq!(cbs_guidance_new(uniform, o, &mut g), CbsStatus::VocabMismatch);

        assert_eq!(cbs_result_text(ptr::null()), ptr::null());
        assert!(cbs_result_score(ptr::null()).is_nan());
        assert_eq!(cbs_model_vocab_size(uniform), 4);
        assert_eq!(cbs_model_vocab_size(ptr::null()), 0);
        cbs_model_free(ptr::null_mut());
        cbs_result_free(ptr::null_mut());
        cbs_string_free(ptr::null_mut());
        for h in [base, tuned, reference, uniform, o] {
            cbs_model_free(h);
        }
    }
}

#[test]
fn last_error_is_per_thread() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(cbs_model_builtin(c("first").as_ptr(), &mut m), CbsStatus::Parse);
        std::thread::spawn(|| {
            let mut m = ptr::null_mut();
            assert_eq!(cbs_model_builtin(c("second").as_ptr(), &mut m), CbsStatus::Parse);
            assert!(last_error().contains("second"));
        })
        .join()
        .unwrap();
        assert!(last_error().contains("first"));
    }
}

#[test]
fn model_round_trips_through_fixture_text() {
    unsafe {
        let m = builtin("w2s-ref");
        let mut text = ptr::null_mut();
        assert_eq!(cbs_model_to_fixture(m, &mut text), CbsStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(cbs_model_parse(text, &mut back), CbsStatus::Ok);
        let mut again = ptr::null_mut();
        assert_eq!(cbs_model_to_fixture(back, &mut again), CbsStatus::Ok);
        assert_eq!(CStr::from_ptr(text), CStr::from_ptr(again));
        cbs_string_free(text);
        cbs_string_free(again);
        cbs_model_free(m);
        cbs_model_free(back);
    }
}

#[test]
fn verify_reports_through_the_abi() {
    unsafe {
        let mut ok = false;
        let mut report = ptr::null_mut();
        assert_eq!(cbs_verify(0, &mut ok, &mut report), CbsStatus::Ok);
        assert!(ok);
        let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(report).to_str().unwrap()).unwrap();
        assert_eq!(v["checks"].as_array().unwrap().len(), 18);
        cbs_string_free(report);
        assert_eq!(cbs_verify(0, &mut ok, ptr::null_mut()), CbsStatus::Ok);
        assert_eq!(cbs_verify(0, ptr::null_mut(), ptr::null_mut()), CbsStatus::NullPointer);
        assert!(!CStr::from_ptr(cbs_version()).to_bytes().is_empty());
    }
}

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include/cbs_ffi.h");
    assert!(header.exists(), "build script did not write {}", header.display());
    // target/<profile>/deps/<test> -> target/<profile>
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libcbs_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cbs_ffi_smoke");
    let status = Command::new("cc")
        .args(["-std=c11", "-Wall", "-Werror", "-o"])
        .arg(&out)
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .expect("run cc");
    assert!(status.success());
    let run = Command::new(&out).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.trim_end().contains(' '), "{stdout}");
}
