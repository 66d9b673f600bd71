//! Raw f64 slice kernels behind the tape ops: three matmul variants and
//! im2col/col2im for valid convolution. All loops are laid out for
//! row-major cache hits; `acc` selects overwrite vs accumulate.

/// c[m,p] (+)= a[m,n] * b[n,p]
pub fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize, acc: bool) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(c.len(), m * p);
    if !acc {
        c.fill(0.0);
    }
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * p..(i + 1) * p];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * p..(k + 1) * p];
            for (cj, &bkj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bkj;
            }
        }
    }
}

/// c[m,p] (+)= a[m,n] * b[p,n]^T
pub fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize, acc: bool) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(c.len(), m * p);
    if !acc {
        c.fill(0.0);
    }
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * p..(i + 1) * p];
        for j in 0..p {
            let b_row = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            c_row[j] += s;
        }
    }
}

/// c[n,p] (+)= a[m,n]^T * b[m,p]
pub fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize, acc: bool) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), m * p);
    debug_assert_eq!(c.len(), n * p);
    if !acc {
        c.fill(0.0);
    }
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let b_row = &b[i * p..(i + 1) * p];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let c_row = &mut c[k * p..(k + 1) * p];
            for (cj, &bij) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bij;
            }
        }
    }
}

/// Valid-convolution output extent.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

/// Unfolds one sample x[cin,h,w] into cols[oh*ow, cin*kh*kw].
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    cols: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) {
    let oh = conv_out_extent(h, kh, stride);
    let ow = conv_out_extent(w, kw, stride);
    debug_assert_eq!(cols.len(), oh * ow * cin * kh * kw);
    let mut idx = 0;
    for oy in 0..oh {
        for ox in 0..ow {
            for c in 0..cin {
                let plane = &x[c * h * w..(c + 1) * h * w];
                for dy in 0..kh {
                    let row = &plane[(oy * stride + dy) * w + ox * stride..];
                    for &value in &row[..kw] {
                        cols[idx] = value;
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Scatters gradient columns back onto one sample's input gradient.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc(
    cols: &[f64],
    dx: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) {
    let oh = conv_out_extent(h, kh, stride);
    let ow = conv_out_extent(w, kw, stride);
    debug_assert_eq!(cols.len(), oh * ow * cin * kh * kw);
    let mut idx = 0;
    for oy in 0..oh {
        for ox in 0..ow {
            for c in 0..cin {
                let base = c * h * w;
                for dy in 0..kh {
                    let off = base + (oy * stride + dy) * w + ox * stride;
                    for dx_i in 0..kw {
                        dx[off + dx_i] += cols[idx];
                        idx += 1;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_variants_agree_on_transposes() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c_nn = [0.0; 4];
        mm_nn(&a, &b, &mut c_nn, 2, 3, 2, false);
        // b^T stored row-major as 2x3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c_nt = [0.0; 4];
        mm_nt(&a, &bt, &mut c_nt, 2, 3, 2, false);
        assert_eq!(c_nn, c_nt);
        // a^T stored row-major as 3x2; (a^T)^T b = a b
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c_tn = [0.0; 4];
        mm_tn(&at, &b, &mut c_tn, 3, 2, 2, false);
        assert_eq!(c_nn, c_tn);
        assert_eq!(c_nn, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn im2col_roundtrip_counts_overlaps() {
        // 1 channel 3x3, 2x2 kernel, stride 1: center cell appears 4 times.
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let mut cols = vec![0.0; 4 * 4];
        im2col(&x, &mut cols, 1, 3, 3, 2, 2, 1);
        let mut dx = vec![0.0; 9];
        col2im_acc(&cols, &mut dx, 1, 3, 3, 2, 2, 1);
        // each position accumulates value * multiplicity
        assert_eq!(dx[4], 5.0 * 4.0);
        assert_eq!(dx[0], 1.0);
        assert_eq!(dx[1], 2.0 * 2.0);
    }
}
