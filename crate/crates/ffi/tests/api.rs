use std::ffi::{CStr, CString};
use std::ptr;

use xft_ffi::*;

fn init(seed: u64) -> *mut XftModel {
    let mut m = ptr::null_mut();
    let s = unsafe { xft_model_init_dense(16, 2, 2, 32, 32, seed, &mut m) };
    assert_eq!(s, XftStatus::Ok);
    assert!(!m.is_null());
    m
}

fn logits(m: *const XftModel, tokens: &[u32]) -> Vec<f32> {
    let mut vocab = 0usize;
    assert_eq!(unsafe { xft_model_vocab_size(m, &mut vocab) }, XftStatus::Ok);
    let mut out = vec![0f32; tokens.len() * vocab];
    let s = unsafe { xft_model_logits(m, tokens.as_ptr(), tokens.len(), out.as_mut_ptr(), out.len()) };
    assert_eq!(s, XftStatus::Ok);
    out
}

fn last_error() -> String {
    let p = xft_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn upcycle_then_extract_preserves_logits() {
    let dense = init(1);
    let mut moe = ptr::null_mut();
    assert_eq!(unsafe { xft_model_upcycle(dense, 4, 3, true, 2, &mut moe) }, XftStatus::Ok);
    assert_eq!(unsafe { xft_model_is_moe(moe) }, 1);
    assert_eq!(unsafe { xft_model_is_moe(dense) }, 0);
    let tokens = [256u32, 72, 105, 257, 33];
    let a = logits(dense, &tokens);
    let b = logits(moe, &tokens);
    let gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
    assert!(gap < 1e-5, "{gap}");

    let mut back = ptr::null_mut();
    assert_eq!(unsafe { xft_model_merge(moe, XftMergeMethod::ExtractShared, 0.0, &mut back) }, XftStatus::Ok);
    assert_eq!(logits(back, &tokens), a);
    unsafe {
        xft_model_free(back);
        xft_model_free(moe);
        xft_model_free(dense);
    }
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.xftc").to_str().unwrap()).unwrap();
    let phase = CString::new("init").unwrap();
    let m = init(3);
    assert_eq!(unsafe { xft_model_save(m, path.as_ptr(), phase.as_ptr(), 3) }, XftStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { xft_model_load(path.as_ptr(), &mut loaded) }, XftStatus::Ok);
    let (mut n1, mut n2) = (0u64, 0u64);
    unsafe {
        xft_model_param_count(m, &mut n1);
        xft_model_param_count(loaded, &mut n2);
    }
    assert_eq!(n1, n2);
    assert_eq!(logits(m, &[1, 2, 3]), logits(loaded, &[1, 2, 3]));
    unsafe {
        xft_model_free(loaded);
        xft_model_free(m);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let missing = CString::new("/nonexistent/dir/m.xftc").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { xft_model_load(missing.as_ptr(), &mut m) }, XftStatus::Io);
    assert!(last_error().contains("/nonexistent/dir/m.xftc"));
    assert!(m.is_null());

    assert_eq!(unsafe { xft_model_load(ptr::null(), &mut m) }, XftStatus::NullPointer);

    let dense = init(4);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { xft_model_merge(dense, XftMergeMethod::Uniform, 0.0, &mut out) }, XftStatus::Config);
    assert_eq!(unsafe { xft_model_upcycle(dense, 4, 6, true, 0, &mut out) }, XftStatus::Config);

    let mut small = [0f32; 3];
    let s = unsafe { xft_model_logits(dense, [1u32, 2].as_ptr(), 2, small.as_mut_ptr(), small.len()) };
    assert_eq!(s, XftStatus::BufferTooSmall);

    let mut big = vec![0f32; 259 * 40];
    let long: Vec<u32> = vec![1; 40];
    let s = unsafe { xft_model_logits(dense, long.as_ptr(), long.len(), big.as_mut_ptr(), big.len()) };
    assert_eq!(s, XftStatus::Shape);
    assert!(last_error().contains("max_seq_len"));

    let mut loss = 0f64;
    let s = unsafe { xft_model_loss(dense, [1u32, 2].as_ptr(), [0u8, 0].as_ptr(), 2, &mut loss) };
    assert_eq!(s, XftStatus::Contract);
    unsafe { xft_model_free(dense) };
    assert_eq!(unsafe { xft_model_is_moe(ptr::null()) }, -1);
}

#[test]
fn generate_fills_buffer() {
    let m = init(5);
    let prompt = CString::new("hi").unwrap();
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let mut written = 0usize;
    let s = unsafe { xft_model_generate(m, prompt.as_ptr(), 8, buf.as_mut_ptr(), buf.len(), &mut written) };
    assert_eq!(s, XftStatus::Ok);
    let text = unsafe { CStr::from_ptr(buf.as_ptr()) };
    assert_eq!(text.to_bytes().len(), written);
    assert!(written <= 8 * 4);
    let mut tiny = [0 as std::ffi::c_char; 1];
    let s = unsafe { xft_model_generate(m, prompt.as_ptr(), 8, tiny.as_mut_ptr(), 1, &mut written) };
    assert!(s == XftStatus::Ok || s == XftStatus::BufferTooSmall);
    unsafe { xft_model_free(m) };
}
