use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use acseg::acg::{AcgConfig, AcgParams};
use acseg::checkpoint::{write_checkpoint, Checkpoint};
use acseg::io::FeatureMap;
use acseg::trainer::Segmenter;
use acseg::Tensor;
use acseg_ffi::*;

fn last_error() -> String {
    let p = acseg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn saved_model(dir: &tempfile::TempDir) -> (CString, AcgParams) {
    let params = AcgParams::init(AcgConfig::new(4, 8, 2).with_seed(3)).unwrap();
    let path = dir.path().join("m.acgp");
    write_checkpoint(
        &path,
        &Checkpoint {
            params: params.clone(),
            optimizer: None,
        },
    )
    .unwrap();
    (CString::new(path.to_str().unwrap()).unwrap(), params)
}

fn features(n: usize, d: usize) -> Vec<f32> {
    (0..n * d).map(|i| ((i * 7 % 13) as f32 - 6.0) / 5.0).collect()
}

#[test]
fn model_round_trip_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, params) = saved_model(&dir);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { acseg_model_load(path.as_ptr(), &mut model) }, AcsegStatus::Ok);
    assert!(!model.is_null());

    let (mut k, mut d) = (0usize, 0usize);
    assert_eq!(unsafe { acseg_model_shape(model, &mut k, &mut d) }, AcsegStatus::Ok);
    assert_eq!((k, d), (4, 8));

    let (h, w) = (3, 4);
    let x = features(h * w, d);
    let mut labels = vec![u32::MAX; h * w];
    let mut active = 0usize;
    let st = unsafe { acseg_model_segment(model, x.as_ptr(), h, w, d, labels.as_mut_ptr(), &mut active) };
    assert_eq!(st, AcsegStatus::Ok);

    let t = Tensor::new(vec![h * w, d], x.iter().map(|&v| v as f64).collect()).unwrap();
    let expected = Segmenter::<f32>::new(&params).segment(&FeatureMap::new("x", (h, w), t)).unwrap();
    let expected: Vec<u32> = expected.labels().iter().map(|&l| l as u32).collect();
    assert_eq!(labels, expected);
    let mut distinct = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    assert_eq!(active, distinct.len());

    unsafe { acseg_model_free(model) };
}

#[test]
fn segment_rejects_wrong_width() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved_model(&dir);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { acseg_model_load(path.as_ptr(), &mut model) }, AcsegStatus::Ok);
    let x = features(4, 5);
    let mut labels = vec![0u32; 4];
    let st = unsafe { acseg_model_segment(model, x.as_ptr(), 2, 2, 5, labels.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, AcsegStatus::Dimension);
    assert!(last_error().contains("expects 8"));
    unsafe { acseg_model_free(model) };
}

#[test]
fn load_errors_are_reported() {
    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.acgp").unwrap();
    assert_eq!(unsafe { acseg_model_load(missing.as_ptr(), &mut model) }, AcsegStatus::Format);
    assert!(model.is_null());
    assert!(!last_error().is_empty());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.acgp");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { acseg_model_load(junk.as_ptr(), &mut model) }, AcsegStatus::Format);

    assert_eq!(unsafe { acseg_model_load(ptr::null(), &mut model) }, AcsegStatus::NullPointer);
    assert_eq!(last_error(), "path is null");
    unsafe { acseg_model_free(ptr::null_mut()) };
}

#[test]
fn error_clears_on_success() {
    let mut m = [0i64; 1];
    let st = unsafe { acseg_hungarian(ptr::null(), 1, 1, m.as_mut_ptr()) };
    assert_eq!(st, AcsegStatus::NullPointer);
    let one = [1.0f64];
    assert_eq!(unsafe { acseg_hungarian(one.as_ptr(), 1, 1, m.as_mut_ptr()) }, AcsegStatus::Ok);
    assert!(acseg_last_error().is_null());
}

fn brute_force_best(m: &[f64], rows: usize, cols: usize) -> f64 {
    // every injection from the smaller side into the larger
    fn go(m: &[f64], rows: usize, cols: usize, r: usize, used: &mut Vec<bool>) -> f64 {
        if r == rows {
            return 0.0;
        }
        let mut best = if rows > cols { go(m, rows, cols, r + 1, used) } else { f64::NEG_INFINITY };
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                best = best.max(m[r * cols + c] + go(m, rows, cols, r + 1, used));
                used[c] = false;
            }
        }
        best
    }
    go(m, rows, cols, 0, &mut vec![false; cols])
}

#[test]
fn hungarian_matches_brute_force() {
    let mut state = 12345u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) as f64 / (1u64 << 31) as f64
    };
    for (rows, cols) in [(3, 3), (2, 4), (4, 2), (5, 5)] {
        let m: Vec<f64> = (0..rows * cols).map(|_| next()).collect();
        let mut matches = vec![0i64; rows];
        assert_eq!(unsafe { acseg_hungarian(m.as_ptr(), rows, cols, matches.as_mut_ptr()) }, AcsegStatus::Ok);
        let mut seen = vec![false; cols];
        let mut total = 0.0;
        for (r, &c) in matches.iter().enumerate() {
            if c >= 0 {
                assert!(!std::mem::replace(&mut seen[c as usize], true));
                total += m[r * cols + c as usize];
            }
        }
        assert_eq!(matches.iter().filter(|&&c| c >= 0).count(), rows.min(cols));
        assert!((total - brute_force_best(&m, rows, cols)).abs() < 1e-12);
    }
}

#[test]
fn two_block_loss_is_minus_half() {
    let n = 6;
    let mut x = vec![0.0f64; n * 2];
    let mut s = vec![0.0f64; n * 2];
    for i in 0..n {
        let b = usize::from(i >= n / 2);
        x[i * 2 + b] = 1.0 + i as f64;
        s[i * 2 + b] = 1.0;
    }
    let mut loss = 0.0;
    assert_eq!(unsafe { acseg_modularity_loss(x.as_ptr(), n, 2, s.as_ptr(), 2, true, &mut loss) }, AcsegStatus::Ok);
    assert!((loss + 0.5).abs() < 1e-12, "{loss}");

    let same = vec![1.0f64; n * 2];
    assert_eq!(unsafe { acseg_modularity_loss(x.as_ptr(), n, 2, same.as_ptr(), 2, true, &mut loss) }, AcsegStatus::Ok);
    assert!(loss.abs() < 1e-12);
}

#[test]
fn zero_extent_is_invalid() {
    let mut loss = 0.0;
    let x = [1.0f64];
    let st = unsafe { acseg_modularity_loss(x.as_ptr(), 0, 1, x.as_ptr(), 1, true, &mut loss) };
    assert_eq!(st, AcsegStatus::InvalidArgument);
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(acseg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"acseg.h\"\n\
         int probe(void) {\n\
           AcsegModel *m = 0;\n\
           AcsegStatus s = acseg_model_load(\"x\", &m);\n\
           acseg_model_free(m);\n\
           return s == ACSEG_STATUS_OK ? 0 : (int)s;\n\
         }\n",
    )
    .unwrap();
    let out = match Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", include]).arg(&src).output() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("skipping: no C compiler ({e})");
            return;
        }
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
