//! Heavy inner loops behind the tape ops: direct 2-D convolution and matmul.
//!
//! Each kernel has a sequential body and a rayon variant that splits work
//! across disjoint output slices only; per-element accumulation order is
//! identical in both, so the two paths are bit-for-bit interchangeable.

use crate::parallel;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Output spatial extent of a direct convolution.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Geometry of one conv2d call. Shapes: input `(batch, c_in, w, h)`,
/// kernel `(c_out, c_in, k, k)`, output `(batch, c_out, w_out, h_out)`.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub w: usize,
    pub h: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvDims {
    pub fn w_out(&self) -> usize {
        conv_out_extent(self.w, self.k, self.stride, self.padding)
    }

    pub fn h_out(&self) -> usize {
        conv_out_extent(self.h, self.k, self.stride, self.padding)
    }
}

fn conv_forward_item(d: &ConvDims, input_b: &[f64], kernel: &[f64], out_b: &mut [f64]) {
    let (wo, ho) = (d.w_out(), d.h_out());
    let k = d.k;
    for co in 0..d.c_out {
        for x in 0..wo {
            for y in 0..ho {
                let mut acc = 0.0;
                for ci in 0..d.c_in {
                    let in_base = ci * d.w * d.h;
                    let ker_base = (co * d.c_in + ci) * k * k;
                    for kx in 0..k {
                        let ix = (x * d.stride + kx) as isize - d.padding as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        for ky in 0..k {
                            let iy = (y * d.stride + ky) as isize - d.padding as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            acc += input_b[in_base + ix as usize * d.h + iy as usize]
                                * kernel[ker_base + kx * k + ky];
                        }
                    }
                }
                out_b[(co * wo + x) * ho + y] = acc;
            }
        }
    }
}

pub fn conv2d_forward_seq(d: &ConvDims, input: &[f64], kernel: &[f64], out: &mut [f64]) {
    let in_stride = d.c_in * d.w * d.h;
    let out_stride = d.c_out * d.w_out() * d.h_out();
    for b in 0..d.batch {
        conv_forward_item(
            d,
            &input[b * in_stride..(b + 1) * in_stride],
            kernel,
            &mut out[b * out_stride..(b + 1) * out_stride],
        );
    }
}

#[cfg(feature = "parallel")]
pub fn conv2d_forward_par(d: &ConvDims, input: &[f64], kernel: &[f64], out: &mut [f64]) {
    let in_stride = d.c_in * d.w * d.h;
    let out_stride = d.c_out * d.w_out() * d.h_out();
    out.par_chunks_mut(out_stride)
        .enumerate()
        .for_each(|(b, out_b)| {
            conv_forward_item(d, &input[b * in_stride..(b + 1) * in_stride], kernel, out_b)
        });
}

pub fn conv2d_forward(d: &ConvDims, input: &[f64], kernel: &[f64], out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if parallel::enabled() {
        return conv2d_forward_par(d, input, kernel, out);
    }
    conv2d_forward_seq(d, input, kernel, out)
}

fn conv_backward_input_item(d: &ConvDims, d_out_b: &[f64], kernel: &[f64], d_in_b: &mut [f64]) {
    let (wo, ho) = (d.w_out(), d.h_out());
    let k = d.k;
    for co in 0..d.c_out {
        for x in 0..wo {
            for y in 0..ho {
                let g = d_out_b[(co * wo + x) * ho + y];
                for ci in 0..d.c_in {
                    let in_base = ci * d.w * d.h;
                    let ker_base = (co * d.c_in + ci) * k * k;
                    for kx in 0..k {
                        let ix = (x * d.stride + kx) as isize - d.padding as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        for ky in 0..k {
                            let iy = (y * d.stride + ky) as isize - d.padding as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            d_in_b[in_base + ix as usize * d.h + iy as usize] +=
                                g * kernel[ker_base + kx * k + ky];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward_input_seq(d: &ConvDims, d_out: &[f64], kernel: &[f64], d_in: &mut [f64]) {
    let in_stride = d.c_in * d.w * d.h;
    let out_stride = d.c_out * d.w_out() * d.h_out();
    for b in 0..d.batch {
        conv_backward_input_item(
            d,
            &d_out[b * out_stride..(b + 1) * out_stride],
            kernel,
            &mut d_in[b * in_stride..(b + 1) * in_stride],
        );
    }
}

#[cfg(feature = "parallel")]
pub fn conv2d_backward_input_par(d: &ConvDims, d_out: &[f64], kernel: &[f64], d_in: &mut [f64]) {
    let in_stride = d.c_in * d.w * d.h;
    let out_stride = d.c_out * d.w_out() * d.h_out();
    d_in.par_chunks_mut(in_stride)
        .enumerate()
        .for_each(|(b, d_in_b)| {
            conv_backward_input_item(
                d,
                &d_out[b * out_stride..(b + 1) * out_stride],
                kernel,
                d_in_b,
            )
        });
}

pub fn conv2d_backward_input(d: &ConvDims, d_out: &[f64], kernel: &[f64], d_in: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if parallel::enabled() {
        return conv2d_backward_input_par(d, d_out, kernel, d_in);
    }
    conv2d_backward_input_seq(d, d_out, kernel, d_in)
}

/// Fills the `(c_in, k, k)` kernel-gradient slice for one output channel.
/// Accumulates over batch items in index order regardless of scheduling.
fn conv_backward_kernel_item(
    d: &ConvDims,
    co: usize,
    input: &[f64],
    d_out: &[f64],
    d_ker_co: &mut [f64],
) {
    let (wo, ho) = (d.w_out(), d.h_out());
    let k = d.k;
    let in_stride = d.c_in * d.w * d.h;
    let out_stride = d.c_out * wo * ho;
    for ci in 0..d.c_in {
        for kx in 0..k {
            for ky in 0..k {
                let mut acc = 0.0;
                for b in 0..d.batch {
                    let in_base = b * in_stride + ci * d.w * d.h;
                    let out_base = b * out_stride + co * wo * ho;
                    for x in 0..wo {
                        let ix = (x * d.stride + kx) as isize - d.padding as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        for y in 0..ho {
                            let iy = (y * d.stride + ky) as isize - d.padding as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            acc += d_out[out_base + x * ho + y]
                                * input[in_base + ix as usize * d.h + iy as usize];
                        }
                    }
                }
                d_ker_co[(ci * k + kx) * k + ky] += acc;
            }
        }
    }
}

pub fn conv2d_backward_kernel_seq(d: &ConvDims, input: &[f64], d_out: &[f64], d_ker: &mut [f64]) {
    let ker_stride = d.c_in * d.k * d.k;
    for co in 0..d.c_out {
        conv_backward_kernel_item(
            d,
            co,
            input,
            d_out,
            &mut d_ker[co * ker_stride..(co + 1) * ker_stride],
        );
    }
}

#[cfg(feature = "parallel")]
pub fn conv2d_backward_kernel_par(d: &ConvDims, input: &[f64], d_out: &[f64], d_ker: &mut [f64]) {
    let ker_stride = d.c_in * d.k * d.k;
    d_ker
        .par_chunks_mut(ker_stride)
        .enumerate()
        .for_each(|(co, d_ker_co)| conv_backward_kernel_item(d, co, input, d_out, d_ker_co));
}

pub fn conv2d_backward_kernel(d: &ConvDims, input: &[f64], d_out: &[f64], d_ker: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if parallel::enabled() {
        return conv2d_backward_kernel_par(d, input, d_out, d_ker);
    }
    conv2d_backward_kernel_seq(d, input, d_out, d_ker)
}

fn matmul_row(a_row: &[f64], b: &[f64], n: usize, out_row: &mut [f64]) {
    for (l, &av) in a_row.iter().enumerate() {
        let b_row = &b[l * n..(l + 1) * n];
        for j in 0..n {
            out_row[j] += av * b_row[j];
        }
    }
}

/// `out (m,n) = a (m,k) * b (k,n)`; `out` must be zeroed by the caller.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let _ = m;
    for (i, out_row) in out.chunks_mut(n).enumerate() {
        matmul_row(&a[i * k..(i + 1) * k], b, n, out_row);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let _ = m;
    out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
        matmul_row(&a[i * k..(i + 1) * k], b, n, out_row);
    });
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if parallel::enabled() {
        return matmul_par(a, b, m, k, n, out);
    }
    matmul_seq(a, b, m, k, n, out)
}

fn matmul_nt_row(a_row: &[f64], b: &[f64], k: usize, out_row: &mut [f64]) {
    for (j, out_v) in out_row.iter_mut().enumerate() {
        let b_row = &b[j * k..(j + 1) * k];
        let mut acc = 0.0;
        for l in 0..k {
            acc += a_row[l] * b_row[l];
        }
        *out_v += acc;
    }
}

/// `out (m,n) = a (m,k) * b^T` with `b (n,k)`; `out` zeroed by the caller.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let _ = m;
    #[cfg(feature = "parallel")]
    if parallel::enabled() {
        out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
            matmul_nt_row(&a[i * k..(i + 1) * k], b, k, out_row);
        });
        return;
    }
    for (i, out_row) in out.chunks_mut(n).enumerate() {
        matmul_nt_row(&a[i * k..(i + 1) * k], b, k, out_row);
    }
}

fn matmul_tn_row(a: &[f64], b: &[f64], i: usize, kdim: usize, m: usize, n: usize, out_row: &mut [f64]) {
    for l in 0..kdim {
        let av = a[l * m + i];
        let b_row = &b[l * n..(l + 1) * n];
        for j in 0..n {
            out_row[j] += av * b_row[j];
        }
    }
}

/// `out (m,n) = a^T * b` with `a (k,m)`, `b (k,n)`; `out` zeroed by the caller.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if parallel::enabled() {
        out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
            matmul_tn_row(a, b, i, k, m, n, out_row);
        });
        return;
    }
    for (i, out_row) in out.chunks_mut(n).enumerate() {
        matmul_tn_row(a, b, i, k, m, n, out_row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, k, n) = (5, 7, 4);
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);
        let mut out = vec![0.0; m * n];
        matmul_seq(&a, &b, m, k, n, &mut out);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a[i * k + l] * b[l * n + j];
                }
                assert!((out[i * n + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_kernels_bit_identical_to_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = ConvDims {
            batch: 3,
            c_in: 4,
            w: 9,
            h: 7,
            c_out: 5,
            k: 3,
            stride: 2,
            padding: 1,
        };
        let input = rand_vec(&mut rng, d.batch * d.c_in * d.w * d.h);
        let kernel = rand_vec(&mut rng, d.c_out * d.c_in * d.k * d.k);
        let out_len = d.batch * d.c_out * d.w_out() * d.h_out();
        let d_out = rand_vec(&mut rng, out_len);

        let mut f_seq = vec![0.0; out_len];
        let mut f_par = vec![0.0; out_len];
        conv2d_forward_seq(&d, &input, &kernel, &mut f_seq);
        conv2d_forward_par(&d, &input, &kernel, &mut f_par);
        assert!(f_seq.iter().zip(&f_par).all(|(a, b)| a.to_bits() == b.to_bits()));

        let mut di_seq = vec![0.0; input.len()];
        let mut di_par = vec![0.0; input.len()];
        conv2d_backward_input_seq(&d, &d_out, &kernel, &mut di_seq);
        conv2d_backward_input_par(&d, &d_out, &kernel, &mut di_par);
        assert!(di_seq.iter().zip(&di_par).all(|(a, b)| a.to_bits() == b.to_bits()));

        let mut dk_seq = vec![0.0; kernel.len()];
        let mut dk_par = vec![0.0; kernel.len()];
        conv2d_backward_kernel_seq(&d, &input, &d_out, &mut dk_seq);
        conv2d_backward_kernel_par(&d, &input, &d_out, &mut dk_par);
        assert!(dk_seq.iter().zip(&dk_par).all(|(a, b)| a.to_bits() == b.to_bits()));

        let (m, k, n) = (6, 31, 5);
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);
        let mut s = vec![0.0; m * n];
        let mut p = vec![0.0; m * n];
        matmul_seq(&a, &b, m, k, n, &mut s);
        matmul_par(&a, &b, m, k, n, &mut p);
        assert!(s.iter().zip(&p).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
