use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use vnfmig::mdn::{Architecture, MdnModel};
use vnfmig_ffi::*;

fn last_error() -> String {
    let p = vnf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn decide_two_users() {
    let params = VnfEconomics {
        loss_rate: 1.0,
        cost_nf: 0.5,
        cost_sp: 0.1,
        interval: 2,
    };
    let users = [7u64, 9];
    let p_o = [0.5, 0.5];
    let p_v = [1.0, 1.0, 0.0, 0.1];
    let mut out = VnfDecision::default();
    let mut synced = [9u8; 2];
    let s = unsafe { vnf_decide(users.as_ptr(), 2, p_o.as_ptr(), p_v.as_ptr(), &params, &mut out, synced.as_mut_ptr()) };
    assert_eq!(s, VnfStatus::Ok);
    assert!(out.migrate);
    assert_eq!(out.n_synced, 1);
    assert_eq!(synced, [1, 0]);
    assert!((out.bound_migrate - 0.65).abs() < 1e-12);
    assert!((out.bound_stay - 1.05).abs() < 1e-12);
    assert_eq!(out.achieved, out.bound_migrate);
}

#[test]
fn decide_errors() {
    let params = VnfEconomics {
        loss_rate: 1.0,
        cost_nf: 0.5,
        cost_sp: 0.1,
        interval: 2,
    };
    let mut out = VnfDecision::default();
    let p_o = [0.5, 1.5];
    let s = unsafe { vnf_decide(ptr::null(), 0, p_o.as_ptr(), ptr::null(), &params, &mut out, ptr::null_mut()) };
    assert_eq!(s, VnfStatus::InvalidArgument);
    assert!(!last_error().is_empty());
    let s = unsafe { vnf_decide(ptr::null(), 0, ptr::null(), ptr::null(), &params, &mut out, ptr::null_mut()) };
    assert_eq!(s, VnfStatus::NullPointer);
    let s = unsafe { vnf_decide(ptr::null(), 0, p_o.as_ptr(), ptr::null(), ptr::null(), &mut out, ptr::null_mut()) };
    assert_eq!(s, VnfStatus::NullPointer);
}

#[test]
fn chain_lifecycle() {
    let m = [0.9, 0.1, 0.5, 0.5];
    let outage = [1usize];
    let mut chain = ptr::null_mut();
    unsafe {
        assert_eq!(vnf_chain_new(m.as_ptr(), 2, outage.as_ptr(), 1, 0, 3, &mut chain), VnfStatus::Ok);
        let mut h = [0.0; 2];
        assert_eq!(vnf_chain_outage_horizon(chain, 2, h.as_mut_ptr()), VnfStatus::Ok);
        assert!((h[0] - 0.1).abs() < 1e-15 && (h[1] - 0.14).abs() < 1e-15);
        let mut p = 0.0;
        assert_eq!(vnf_chain_outage_probability(chain, 1, 1, &mut p), VnfStatus::Ok);
        assert_eq!(p, 0.5);
        assert_eq!(vnf_chain_outage_probability(chain, 0, 0, &mut p), VnfStatus::InvalidArgument);
        let (mut state, mut down) = (9usize, false);
        for _ in 0..50 {
            assert_eq!(vnf_chain_step(chain, &mut state, &mut down), VnfStatus::Ok);
            assert_eq!(down, state == 1);
        }
        assert_eq!(vnf_chain_set_state(chain, 5), VnfStatus::InvalidArgument);
        vnf_chain_free(chain);

        let bad = [0.9, 0.2, 0.5, 0.5];
        assert_eq!(vnf_chain_new(bad.as_ptr(), 2, outage.as_ptr(), 1, 0, 3, &mut chain), VnfStatus::InvalidArgument);
        assert!(last_error().contains("row 0"));

        let mut def = ptr::null_mut();
        assert_eq!(vnf_chain_default(1, &mut def), VnfStatus::Ok);
        let mut h = [0.0; 1];
        assert_eq!(vnf_chain_outage_horizon(def, 1, h.as_mut_ptr()), VnfStatus::Ok);
        assert!((h[0] - 0.002).abs() < 1e-15);
        vnf_chain_free(def);
        vnf_chain_free(ptr::null_mut());
    }
}

#[test]
fn model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = MdnModel::new(Architecture::default(), 4).unwrap();
    model.save(&path).unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(vnf_model_load(c_path.as_ptr(), &mut h), VnfStatus::Ok);
        assert_eq!(vnf_model_components(h), 2);
        let window = [0.5; 64];
        let mut comps = [VnfComponent::default(); 2];
        let mut n = 0usize;
        assert_eq!(vnf_model_forward(h, window.as_ptr(), 64, comps.as_mut_ptr(), 2, &mut n), VnfStatus::Ok);
        assert_eq!(n, 2);
        let direct = model
            .forward(&vnfmig::mdn::FeatureWindow::new(window.to_vec()).unwrap())
            .unwrap();
        assert_eq!(comps[0].weight, direct.components[0].weight);
        assert_eq!(vnf_model_forward(h, window.as_ptr(), 64, comps.as_mut_ptr(), 1, &mut n), VnfStatus::Capacity);
        assert_eq!(vnf_model_forward(h, window.as_ptr(), 10, comps.as_mut_ptr(), 2, &mut n), VnfStatus::InvalidArgument);

        let mut d = 0.0;
        assert_eq!(vnf_mixture_density(comps.as_ptr(), 2, 0.1, -0.2, &mut d), VnfStatus::Ok);
        assert_eq!(d, direct.density([0.1, -0.2]));

        let positions: Vec<f64> = (0..33).flat_map(|i| [i as f64, 0.0]).collect();
        let mut pv = [0.0; 5];
        assert_eq!(
            vnf_predict_visit(h, positions.as_ptr(), 33, 0.0, 0.0, 1e6, 5, 8, 1, pv.as_mut_ptr()),
            VnfStatus::Ok
        );
        assert_eq!(pv, [1.0; 5]);
        assert_eq!(
            vnf_predict_visit(h, positions.as_ptr(), 10, 0.0, 0.0, 1.0, 5, 8, 1, pv.as_mut_ptr()),
            VnfStatus::InvalidArgument
        );
        vnf_model_free(h);

        let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
        assert_eq!(vnf_model_load(missing.as_ptr(), &mut h), VnfStatus::Io);
        std::fs::write(&path, b"garbage").unwrap();
        assert_eq!(vnf_model_load(c_path.as_ptr(), &mut h), VnfStatus::Format);
    }
}

#[test]
fn unit_gaussian_density() {
    let c = VnfComponent {
        weight: 1.0,
        std_x: 1.0,
        std_y: 1.0,
        ..Default::default()
    };
    let mut d = 0.0;
    assert_eq!(unsafe { vnf_mixture_density(&c, 1, 0.0, 0.0, &mut d) }, VnfStatus::Ok);
    assert!((d - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-15);
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

/// Compiles a C program against the generated header and, when the static
/// library is present, links and runs it.
#[test]
fn header_compiles_as_c() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "vnfmig.h"
int main(void) {
    uint64_t users[2] = {1, 2};
    double p_o[2] = {0.5, 0.5};
    double p_v[4] = {1.0, 1.0, 0.0, 0.1};
    VnfEconomics params = {1.0, 0.5, 0.1, 2};
    VnfDecision d;
    uint8_t synced[2];
    if (vnf_decide(users, 2, p_o, p_v, &params, &d, synced) != VNF_STATUS_OK) return 1;
    VnfChain *chain = NULL;
    if (vnf_chain_default(7, &chain) != VNF_STATUS_OK) return 2;
    double h[3];
    if (vnf_chain_outage_horizon(chain, 3, h) != VNF_STATUS_OK) return 3;
    vnf_chain_free(chain);
    if (vnf_model_load("/nonexistent", NULL) != VNF_STATUS_NULL_POINTER) return 4;
    printf("%d %zu %.2f %.3f\n", d.migrate, d.n_synced, d.bound_migrate, h[0]);
    return 0;
}
"#,
    )
    .unwrap();
    let status = Command::new(&cc)
        .args(["-std=c11", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success(), "header does not compile");

    let lib = target_dir().join("libvnfmig_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping link step", lib.display());
        return;
    }
    let exe = dir.path().join("smoke");
    let status = Command::new(&cc)
        .args(["-std=c11", "-I"])
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "link failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "smoke program exited with {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "1 1 0.65 0.002");
}
