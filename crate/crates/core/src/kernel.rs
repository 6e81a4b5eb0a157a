//! Dot-product microkernels.
//!
//! Every entry of a block product is computed with the same arithmetic
//! sequence no matter which tile shape produced it, so results never depend
//! on block sizes, tile remainders or how rows are split across workers.
//! On x86_64 with AVX-512F the double-precision sequence is: one 8-lane
//! fused accumulator per entry over full chunks, a fixed-order horizontal
//! sum, then a scalar fused tail. AVX2+FMA machines use 4 lanes, and other
//! targets use 4 lanes with unfused arithmetic.

/// Dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut out = [0.0];
    dot_block(a, 1, b, 1, a.len(), &mut out);
    out[0]
}

/// Computes `out[i * b_rows + j] = dot(a_i, b_j)` for row-major `a`
/// (`a_rows × dim`) and `b` (`b_rows × dim`).
pub fn dot_block(a: &[f64], a_rows: usize, b: &[f64], b_rows: usize, dim: usize, out: &mut [f64]) {
    assert_eq!(a.len(), a_rows * dim);
    assert_eq!(b.len(), b_rows * dim);
    assert_eq!(out.len(), a_rows * b_rows);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was detected and the slice
            // lengths were checked above.
            unsafe { avx512::dot_block(a, a_rows, b, b_rows, dim, out) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: as above.
            unsafe { avx2::dot_block(a, a_rows, b, b_rows, dim, out) };
            return;
        }
    }
    // SAFETY: slice lengths were checked above.
    unsafe { portable::dot_block(a, a_rows, b, b_rows, dim, out) };
}

/// Single-precision counterpart of [`dot_block`], used only to screen
/// candidates before exact rescoring. See [`f32_dot_error_bound`].
pub fn dot_block_f32(a: &[f32], a_rows: usize, b: &[f32], b_rows: usize, dim: usize, out: &mut [f32]) {
    assert_eq!(a.len(), a_rows * dim);
    assert_eq!(b.len(), b_rows * dim);
    assert_eq!(out.len(), a_rows * b_rows);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was detected and the slice
            // lengths were checked above.
            unsafe { avx512_f32::dot_block(a, a_rows, b, b_rows, dim, out) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: as above.
            unsafe { avx2_f32::dot_block(a, a_rows, b, b_rows, dim, out) };
            return;
        }
    }
    // SAFETY: slice lengths were checked above.
    unsafe { portable_f32::dot_block(a, a_rows, b, b_rows, dim, out) };
}

/// Upper bound on `|dot_block_f32(a32, b32) − a·b|` for f64 rows `a`, `b`
/// of length `dim` rounded to f32, given bounds on their norms.
///
/// Rounding the inputs costs at most `3u·Σ|a_i b_i|` with `u = 2⁻²⁴`, and
/// any accumulation order with at most `dim + 2` roundings per term costs
/// `γ_{dim+2}·Σ|a_i b_i|`; `Σ|a_i b_i| ≤ |a|·|b|`. The bound doubles that
/// sum and adds `1e-9` so callers can also absorb clamping of unit dots.
pub fn f32_dot_error_bound(dim: usize, norm_a: f64, norm_b: f64) -> f64 {
    let u = f32::EPSILON as f64 / 2.0;
    2.0 * (dim as f64 + 8.0) * u * norm_a * norm_b * (1.0 + 1e-6) + 1e-9
}

// Walks `R×C` tiles over the interior and narrower tiles over the
// remainders. A tile receives pointers to its first `a` and `b` rows and
// writes its results straight into `out` (row stride `b_rows`).
macro_rules! tiled_driver {
    ($tile:ident, $rows:literal, $cols:literal, $a:ident, $a_rows:ident, $b:ident, $b_rows:ident, $dim:ident, $out:ident) => {{
        const R: usize = $rows;
        const C: usize = $cols;
        let (a_rows, b_rows, dim) = ($a_rows, $b_rows, $dim);
        let (ap, bp, op) = ($a.as_ptr(), $b.as_ptr(), $out.as_mut_ptr());
        let mut i = 0;
        while i < a_rows {
            let (a_i, o_i) = (ap.add(i * dim), op.add(i * b_rows));
            let mut j = 0;
            if i + R <= a_rows {
                while j + C <= b_rows {
                    $tile::<R, C>(a_i, bp.add(j * dim), dim, o_i.add(j), b_rows);
                    j += C;
                }
                while j < b_rows {
                    $tile::<R, 1>(a_i, bp.add(j * dim), dim, o_i.add(j), b_rows);
                    j += 1;
                }
                i += R;
            } else {
                while j + C <= b_rows {
                    $tile::<1, C>(a_i, bp.add(j * dim), dim, o_i.add(j), b_rows);
                    j += C;
                }
                while j < b_rows {
                    $tile::<1, 1>(a_i, bp.add(j * dim), dim, o_i.add(j), b_rows);
                    j += 1;
                }
                i += 1;
            }
        }
    }};
}

mod portable {
    const LANES: usize = 4;

    #[inline(always)]
    unsafe fn tile<const QR: usize, const RR: usize>(a: *const f64, b: *const f64, dim: usize, out: *mut f64, stride: usize) {
        let full = dim / LANES * LANES;
        let mut acc = [[[0.0f64; LANES]; RR]; QR];
        let mut k = 0;
        while k < full {
            for r in 0..RR {
                for q in 0..QR {
                    for l in 0..LANES {
                        acc[q][r][l] += *a.add(q * dim + k + l) * *b.add(r * dim + k + l);
                    }
                }
            }
            k += LANES;
        }
        for q in 0..QR {
            for r in 0..RR {
                let v = &acc[q][r];
                let mut s = (v[0] + v[2]) + (v[1] + v[3]);
                for kk in full..dim {
                    s += *a.add(q * dim + kk) * *b.add(r * dim + kk);
                }
                *out.add(q * stride + r) = s;
            }
        }
    }

    pub(super) unsafe fn dot_block(a: &[f64], a_rows: usize, b: &[f64], b_rows: usize, dim: usize, out: &mut [f64]) {
        tiled_driver!(tile, 4, 2, a, a_rows, b, b_rows, dim, out);
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    const LANES: usize = 4;

    #[inline]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn tile<const QR: usize, const RR: usize>(a: *const f64, b: *const f64, dim: usize, out: *mut f64, stride: usize) {
        let full = dim / LANES * LANES;
        let mut acc = [[_mm256_setzero_pd(); RR]; QR];
        let mut k = 0;
        while k < full {
            let mut bv = [_mm256_setzero_pd(); RR];
            for r in 0..RR {
                bv[r] = _mm256_loadu_pd(b.add(r * dim + k));
            }
            for q in 0..QR {
                let av = _mm256_loadu_pd(a.add(q * dim + k));
                for r in 0..RR {
                    acc[q][r] = _mm256_fmadd_pd(av, bv[r], acc[q][r]);
                }
            }
            k += LANES;
        }
        for q in 0..QR {
            for r in 0..RR {
                // (l0 + l2) + (l1 + l3)
                let v = acc[q][r];
                let h2 = _mm_add_pd(_mm256_castpd256_pd128(v), _mm256_extractf128_pd::<1>(v));
                let mut s = _mm_cvtsd_f64(h2) + _mm_cvtsd_f64(_mm_unpackhi_pd(h2, h2));
                for kk in full..dim {
                    s = (*a.add(q * dim + kk)).mul_add(*b.add(r * dim + kk), s);
                }
                *out.add(q * stride + r) = s;
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn dot_block(a: &[f64], a_rows: usize, b: &[f64], b_rows: usize, dim: usize, out: &mut [f64]) {
        tiled_driver!(tile, 4, 2, a, a_rows, b, b_rows, dim, out);
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    const LANES: usize = 8;

    #[inline]
    #[target_feature(enable = "avx512f")]
    unsafe fn tile<const QR: usize, const RR: usize>(a: *const f64, b: *const f64, dim: usize, out: *mut f64, stride: usize) {
        let full = dim / LANES * LANES;
        let mut acc = [[_mm512_setzero_pd(); RR]; QR];
        let mut k = 0;
        while k < full {
            let mut bv = [_mm512_setzero_pd(); RR];
            for r in 0..RR {
                bv[r] = _mm512_loadu_pd(b.add(r * dim + k));
            }
            for q in 0..QR {
                let av = _mm512_loadu_pd(a.add(q * dim + k));
                for r in 0..RR {
                    acc[q][r] = _mm512_fmadd_pd(av, bv[r], acc[q][r]);
                }
            }
            k += LANES;
        }
        for q in 0..QR {
            for r in 0..RR {
                // ((l0 + l4) + (l2 + l6)) + ((l1 + l5) + (l3 + l7))
                let v = acc[q][r];
                let h4 = _mm256_add_pd(_mm512_castpd512_pd256(v), _mm512_extractf64x4_pd::<1>(v));
                let h2 = _mm_add_pd(_mm256_castpd256_pd128(h4), _mm256_extractf128_pd::<1>(h4));
                let mut s = _mm_cvtsd_f64(h2) + _mm_cvtsd_f64(_mm_unpackhi_pd(h2, h2));
                for kk in full..dim {
                    s = (*a.add(q * dim + kk)).mul_add(*b.add(r * dim + kk), s);
                }
                *out.add(q * stride + r) = s;
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn dot_block(a: &[f64], a_rows: usize, b: &[f64], b_rows: usize, dim: usize, out: &mut [f64]) {
        tiled_driver!(tile, 8, 3, a, a_rows, b, b_rows, dim, out);
    }
}

mod portable_f32 {
    const LANES: usize = 8;

    #[inline(always)]
    unsafe fn tile<const QR: usize, const RR: usize>(a: *const f32, b: *const f32, dim: usize, out: *mut f32, stride: usize) {
        let full = dim / LANES * LANES;
        let mut acc = [[[0.0f32; LANES]; RR]; QR];
        let mut k = 0;
        while k < full {
            for r in 0..RR {
                for q in 0..QR {
                    for l in 0..LANES {
                        acc[q][r][l] += *a.add(q * dim + k + l) * *b.add(r * dim + k + l);
                    }
                }
            }
            k += LANES;
        }
        for q in 0..QR {
            for r in 0..RR {
                let mut s: f32 = acc[q][r].iter().sum();
                for kk in full..dim {
                    s += *a.add(q * dim + kk) * *b.add(r * dim + kk);
                }
                *out.add(q * stride + r) = s;
            }
        }
    }

    pub(super) unsafe fn dot_block(a: &[f32], a_rows: usize, b: &[f32], b_rows: usize, dim: usize, out: &mut [f32]) {
        tiled_driver!(tile, 4, 2, a, a_rows, b, b_rows, dim, out);
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2_f32 {
    use std::arch::x86_64::*;

    const LANES: usize = 8;

    #[inline]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn tile<const QR: usize, const RR: usize>(a: *const f32, b: *const f32, dim: usize, out: *mut f32, stride: usize) {
        let full = dim / LANES * LANES;
        let mut acc = [[_mm256_setzero_ps(); RR]; QR];
        let mut k = 0;
        while k < full {
            let mut bv = [_mm256_setzero_ps(); RR];
            for r in 0..RR {
                bv[r] = _mm256_loadu_ps(b.add(r * dim + k));
            }
            for q in 0..QR {
                let av = _mm256_loadu_ps(a.add(q * dim + k));
                for r in 0..RR {
                    acc[q][r] = _mm256_fmadd_ps(av, bv[r], acc[q][r]);
                }
            }
            k += LANES;
        }
        for q in 0..QR {
            for r in 0..RR {
                let v = acc[q][r];
                let h4 = _mm_add_ps(_mm256_castps256_ps128(v), _mm256_extractf128_ps::<1>(v));
                let h2 = _mm_add_ps(h4, _mm_movehl_ps(h4, h4));
                let mut s = _mm_cvtss_f32(_mm_add_ss(h2, _mm_shuffle_ps::<1>(h2, h2)));
                for kk in full..dim {
                    s = (*a.add(q * dim + kk)).mul_add(*b.add(r * dim + kk), s);
                }
                *out.add(q * stride + r) = s;
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn dot_block(a: &[f32], a_rows: usize, b: &[f32], b_rows: usize, dim: usize, out: &mut [f32]) {
        tiled_driver!(tile, 4, 2, a, a_rows, b, b_rows, dim, out);
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512_f32 {
    use std::arch::x86_64::*;

    const LANES: usize = 16;

    #[inline]
    #[target_feature(enable = "avx512f")]
    unsafe fn tile<const QR: usize, const RR: usize>(a: *const f32, b: *const f32, dim: usize, out: *mut f32, stride: usize) {
        let full = dim / LANES * LANES;
        let mut acc = [[_mm512_setzero_ps(); RR]; QR];
        let mut k = 0;
        while k < full {
            let mut bv = [_mm512_setzero_ps(); RR];
            for r in 0..RR {
                bv[r] = _mm512_loadu_ps(b.add(r * dim + k));
            }
            for q in 0..QR {
                let av = _mm512_loadu_ps(a.add(q * dim + k));
                for r in 0..RR {
                    acc[q][r] = _mm512_fmadd_ps(av, bv[r], acc[q][r]);
                }
            }
            k += LANES;
        }
        for q in 0..QR {
            for r in 0..RR {
                let mut s = _mm512_reduce_add_ps(acc[q][r]);
                for kk in full..dim {
                    s = (*a.add(q * dim + kk)).mul_add(*b.add(r * dim + kk), s);
                }
                *out.add(q * stride + r) = s;
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn dot_block(a: &[f32], a_rows: usize, b: &[f32], b_rows: usize, dim: usize, out: &mut [f32]) {
        tiled_driver!(tile, 8, 3, a, a_rows, b, b_rows, dim, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect()
    }

    #[test]
    fn block_matches_naive_for_awkward_shapes() {
        for &(p, q, d) in &[(1, 1, 1), (3, 5, 7), (9, 4, 16), (5, 3, 33), (4, 2, 4)] {
            let a = pseudo(p * d, 1);
            let b = pseudo(q * d, 2);
            let mut out = vec![0.0; p * q];
            dot_block(&a, p, &b, q, d, &mut out);
            for i in 0..p {
                for j in 0..q {
                    let want = naive(&a[i * d..(i + 1) * d], &b[j * d..(j + 1) * d]);
                    assert!((out[i * q + j] - want).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn entries_do_not_depend_on_tile_position() {
        let d = 19;
        let a = pseudo(7 * d, 3);
        let b = pseudo(5 * d, 4);
        let mut full = vec![0.0; 35];
        dot_block(&a, 7, &b, 5, d, &mut full);
        for i in 0..7 {
            for j in 0..5 {
                let single = dot(&a[i * d..(i + 1) * d], &b[j * d..(j + 1) * d]);
                assert_eq!(single.to_bits(), full[i * 5 + j].to_bits());
            }
        }
    }

    #[test]
    fn f32_block_stays_within_error_bound() {
        for &(p, q, d) in &[(9, 7, 512), (3, 5, 37), (17, 4, 64)] {
            let a = pseudo(p * d, 5);
            let b = pseudo(q * d, 6);
            let na = (0..p).map(|i| naive(&a[i * d..(i + 1) * d], &a[i * d..(i + 1) * d]).sqrt()).fold(0.0, f64::max);
            let nb = (0..q).map(|j| naive(&b[j * d..(j + 1) * d], &b[j * d..(j + 1) * d]).sqrt()).fold(0.0, f64::max);
            let a32: Vec<f32> = a.iter().map(|&x| x as f32).collect();
            let b32: Vec<f32> = b.iter().map(|&x| x as f32).collect();
            let mut out = vec![0.0f32; p * q];
            dot_block_f32(&a32, p, &b32, q, d, &mut out);
            let bound = f32_dot_error_bound(d, na, nb);
            for i in 0..p {
                for j in 0..q {
                    let exact = naive(&a[i * d..(i + 1) * d], &b[j * d..(j + 1) * d]);
                    assert!((out[i * q + j] as f64 - exact).abs() <= bound);
                }
            }
        }
    }
}
