//! Single-precision GEMM backend.
//!
//! We load the system OpenBLAS lazily via `dlopen` instead of linking it at
//! build time. That order matters: OpenBLAS selects its compute kernel in a
//! load-time constructor, and on some virtualized hosts its own CPUID parsing
//! picks a generic kernel that is ~4x slower than the correct one. By loading
//! lazily we can set `OPENBLAS_CORETYPE` from Rust feature detection *before*
//! the library initializes. When no OpenBLAS is present we fall back to
//! ndarray's pure-Rust matmul, which is correct but slower.

use std::ffi::CString;
use std::sync::OnceLock;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};

#[allow(clippy::too_many_arguments)]
type CblasSgemm = unsafe extern "C" fn(
    order: i32,
    transa: i32,
    transb: i32,
    m: i32,
    n: i32,
    k: i32,
    alpha: f32,
    a: *const f32,
    lda: i32,
    b: *const f32,
    ldb: i32,
    beta: f32,
    c: *mut f32,
    ldc: i32,
);

const CBLAS_ROW_MAJOR: i32 = 101;
const CBLAS_NO_TRANS: i32 = 111;
const CBLAS_TRANS: i32 = 112;

static SGEMM: OnceLock<Option<CblasSgemm>> = OnceLock::new();

#[cfg(target_arch = "x86_64")]
fn preferred_coretype() -> Option<&'static str> {
    if std::arch::is_x86_feature_detected!("avx512f")
        && std::arch::is_x86_feature_detected!("avx512bw")
        && std::arch::is_x86_feature_detected!("avx512dq")
        && std::arch::is_x86_feature_detected!("avx512vl")
    {
        Some("SKYLAKEX")
    } else if std::arch::is_x86_feature_detected!("avx2") {
        Some("HASWELL")
    } else {
        None
    }
}

#[cfg(not(target_arch = "x86_64"))]
fn preferred_coretype() -> Option<&'static str> {
    None
}

#[cfg(unix)]
fn load_openblas() -> Option<CblasSgemm> {
    // Must happen before the library's constructor runs, hence before dlopen.
    if std::env::var_os("OPENBLAS_CORETYPE").is_none() {
        if let Some(core) = preferred_coretype() {
            std::env::set_var("OPENBLAS_CORETYPE", core);
        }
    }
    // The engine manages its own parallelism; a threaded BLAS underneath would
    // oversubscribe and break run-to-run determinism.
    if std::env::var_os("OPENBLAS_NUM_THREADS").is_none() {
        std::env::set_var("OPENBLAS_NUM_THREADS", "1");
    }
    for name in ["libopenblas.so.0", "libopenblas.so", "libopenblas.dylib"] {
        let cname = CString::new(name).unwrap();
        let handle = unsafe { libc::dlopen(cname.as_ptr(), libc::RTLD_NOW | libc::RTLD_LOCAL) };
        if handle.is_null() {
            continue;
        }
        let sym = CString::new("cblas_sgemm").unwrap();
        let ptr = unsafe { libc::dlsym(handle, sym.as_ptr()) };
        if ptr.is_null() {
            unsafe { libc::dlclose(handle) };
            continue;
        }
        // Handle is intentionally leaked; the library stays loaded for the
        // lifetime of the process.
        return Some(unsafe { std::mem::transmute::<*mut libc::c_void, CblasSgemm>(ptr) });
    }
    None
}

#[cfg(not(unix))]
fn load_openblas() -> Option<CblasSgemm> {
    None
}

fn backend() -> Option<CblasSgemm> {
    *SGEMM.get_or_init(load_openblas)
}

/// True when the accelerated OpenBLAS backend is in use.
pub fn accelerated() -> bool {
    backend().is_some()
}

/// `c = alpha * op(a) @ op(b) + beta * c` where `op` optionally transposes.
///
/// `a` and `b` are passed in their stored (row-major) orientation; `ta`/`tb`
/// select the transposed reading. All operands must be contiguous row-major.
pub fn sgemm(
    ta: bool,
    tb: bool,
    alpha: f32,
    a: &ArrayView2<f32>,
    b: &ArrayView2<f32>,
    beta: f32,
    c: &mut ArrayViewMut2<f32>,
) {
    let (m, ka) = if ta {
        (a.ncols(), a.nrows())
    } else {
        (a.nrows(), a.ncols())
    };
    let (kb, n) = if tb {
        (b.ncols(), b.nrows())
    } else {
        (b.nrows(), b.ncols())
    };
    assert_eq!(ka, kb, "sgemm: inner dimensions differ ({ka} vs {kb})");
    assert_eq!(c.nrows(), m, "sgemm: output rows");
    assert_eq!(c.ncols(), n, "sgemm: output cols");

    if let Some(f) = backend() {
        let (a_s, b_s) = (
            a.as_slice().expect("sgemm: `a` must be contiguous"),
            b.as_slice().expect("sgemm: `b` must be contiguous"),
        );
        let c_s = c.as_slice_mut().expect("sgemm: `c` must be contiguous");
        unsafe {
            f(
                CBLAS_ROW_MAJOR,
                if ta { CBLAS_TRANS } else { CBLAS_NO_TRANS },
                if tb { CBLAS_TRANS } else { CBLAS_NO_TRANS },
                m as i32,
                n as i32,
                ka as i32,
                alpha,
                a_s.as_ptr(),
                a.ncols() as i32,
                b_s.as_ptr(),
                b.ncols() as i32,
                beta,
                c_s.as_mut_ptr(),
                n as i32,
            );
        }
    } else {
        let a_eff = if ta { a.t() } else { a.view() };
        let b_eff = if tb { b.t() } else { b.view() };
        let mut c_arr = c.view_mut();
        general_mat_mul_dyn(alpha, &a_eff, &b_eff, beta, &mut c_arr);
    }
}

fn general_mat_mul_dyn(
    alpha: f32,
    a: &ArrayView2<f32>,
    b: &ArrayView2<f32>,
    beta: f32,
    c: &mut ArrayViewMut2<f32>,
) {
    general_mat_mul(alpha, a, b, beta, c);
}

/// Convenience wrapper allocating the output: `op(a) @ op(b)`.
pub fn matmul(ta: bool, tb: bool, a: &ArrayView2<f32>, b: &ArrayView2<f32>) -> Array2<f32> {
    let m = if ta { a.ncols() } else { a.nrows() };
    let n = if tb { b.nrows() } else { b.ncols() };
    let mut c = Array2::zeros((m, n));
    sgemm(ta, tb, 1.0, a, b, 0.0, &mut c.view_mut());
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matches_reference_matmul() {
        let a = array![[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let b = array![[7.0f32, 8.0], [9.0, 10.0], [11.0, 12.0]];
        let c = matmul(false, false, &a.view(), &b.view());
        let mut expect = Array2::zeros((2, 2));
        general_mat_mul(1.0, &a.view(), &b.view(), 0.0, &mut expect.view_mut());
        assert_eq!(c, expect);
    }

    #[test]
    fn transposed_orientations_agree() {
        let a = array![[1.0f32, -2.0], [0.5, 3.0], [2.0, 1.0]]; // 3x2
        let b = array![[1.0f32, 0.0, 2.0], [-1.0, 1.5, 0.5]]; // 2x3
        // a^T (2x3) @ b^T (3x2) -> 2x2
        let c = matmul(true, true, &a.view(), &b.view());
        let at = a.t().to_owned();
        let bt = b.t().to_owned();
        let mut expect = Array2::zeros((2, 2));
        general_mat_mul(1.0, &at.view(), &bt.view(), 0.0, &mut expect.view_mut());
        for (x, y) in c.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn accumulates_with_beta() {
        let a = array![[2.0f32]];
        let b = array![[3.0f32]];
        let mut c = array![[10.0f32]];
        sgemm(false, false, 1.0, &a.view(), &b.view(), 1.0, &mut c.view_mut());
        assert_eq!(c[[0, 0]], 16.0);
    }
}
