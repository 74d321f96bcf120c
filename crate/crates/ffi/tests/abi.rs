use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use neuromed_ffi::*;

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(nm_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn dataset_round_trip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let file = cpath(&dir.path().join("d.ngds"));
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(nm_dataset_generate(24, 6, 16, 0.04, 3, &mut ds), NmStatus::Ok);
        assert_eq!(nm_dataset_len(ds), 24);
        assert_eq!(nm_dataset_save(ds, file.as_ptr()), NmStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(nm_dataset_load(file.as_ptr(), &mut back), NmStatus::Ok);
        let (mut a, mut b) = (vec![0u32; 24], vec![0u32; 24]);
        assert_eq!(nm_dataset_labels(ds, a.as_mut_ptr(), a.len()), NmStatus::Ok);
        assert_eq!(nm_dataset_labels(back, b.as_mut_ptr(), b.len()), NmStatus::Ok);
        assert_eq!(a, b);
        assert_eq!(nm_dataset_labels(ds, a.as_mut_ptr(), 3), NmStatus::InvalidArgument);
        assert!(last_error().contains("need 24"));
        nm_dataset_free(ds);
        nm_dataset_free(back);
        nm_dataset_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = cpath(&dir.path().join("absent.nnir"));
    let junk_path = dir.path().join("junk.snnc");
    std::fs::write(&junk_path, b"not a network").unwrap();
    let junk = cpath(&junk_path);
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(nm_model_load(missing.as_ptr(), &mut m), NmStatus::Io);
        assert!(m.is_null());
        let mut n = ptr::null_mut();
        assert_eq!(nm_snn_load(junk.as_ptr(), &mut n), NmStatus::Format);
        assert!(!last_error().is_empty());
        assert_eq!(nm_dataset_load(ptr::null(), ptr::null_mut()), NmStatus::NullPointer);
        let mut acc = 0.0;
        assert_eq!(nm_model_accuracy(ptr::null(), ptr::null(), &mut acc), NmStatus::NullPointer);
        assert_eq!(nm_dataset_generate(0, 1, 16, 0.0, 0, &mut ptr::null_mut()), NmStatus::Contract);
    }
    assert_eq!(unsafe { CStr::from_ptr(nm_version()) }.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn convert_and_simulate_untrained_cnn() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("m.nnir");
    let model = neuromed::model::zoo::toy_cnn([1, 16, 16], 3, 5).unwrap();
    neuromed::model::save_model(&model, &model_path).unwrap();
    let mp = cpath(&model_path);
    let sp = cpath(&dir.path().join("n.snnc"));
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(nm_dataset_generate(30, 6, 16, 0.04, 1, &mut ds), NmStatus::Ok);
        let mut m = ptr::null_mut();
        assert_eq!(nm_model_load(mp.as_ptr(), &mut m), NmStatus::Ok);
        let mut preds = vec![9u32; 30];
        assert_eq!(nm_model_predict(m, ds, preds.as_mut_ptr(), preds.len()), NmStatus::Ok);
        assert!(preds.iter().all(|&p| p < 3));
        let mut net = ptr::null_mut();
        assert_eq!(nm_snn_convert(m, ds, 99.9, &mut net), NmStatus::Ok, "{}", last_error());
        assert_eq!(nm_snn_save(net, sp.as_ptr()), NmStatus::Ok);
        let mut again = ptr::null_mut();
        assert_eq!(nm_snn_load(sp.as_ptr(), &mut again), NmStatus::Ok);
        let (mut a, mut b) = (-1.0, -1.0);
        assert_eq!(nm_snn_accuracy(net, ds, 32, NmEncoding::Default, 0, &mut a), NmStatus::Ok);
        assert_eq!(nm_snn_accuracy(again, ds, 32, NmEncoding::Default, 0, &mut b), NmStatus::Ok);
        assert!((0.0..=1.0).contains(&a));
        assert_eq!(a, b);
        assert_eq!(nm_snn_accuracy(net, ds, 0, NmEncoding::Poisson, 0, &mut a), NmStatus::Contract);
        nm_snn_free(net);
        nm_snn_free(again);
        nm_model_free(m);
        nm_dataset_free(ds);
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/neuromed.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["nm_dataset_generate", "nm_snn_convert", "nm_last_error", "NM_STATUS_UNCONVERTIBLE", "typedef struct NmSnn NmSnn"] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"neuromed.h\"\nint main(void) { NmDataset *d = 0; NmStatus s = nm_dataset_generate(8, 2, 16, 0.0, 1, &d); nm_dataset_free(d); return s == NM_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let include = header.parent().unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let Ok(out) = Command::new(compiler).args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I"]).arg(include).arg(&src).output() else {
            eprintln!("{compiler} not found; skipping");
            continue;
        };
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
