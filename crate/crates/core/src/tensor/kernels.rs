//! Inner loops shared by the graph operations.
//!
//! Everything here works on flat row-major slices. Loops are ordered so the
//! innermost one walks contiguous memory; `axpy` vectorizes as written and
//! `dot` keeps eight independent partial sums in a fixed order so results are
//! reproducible.

#[inline]
pub fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `outs[c][p] += Σ_t taps[c][t] * x[p + t]` for every row `c`.
///
/// All `outs` rows share one length, as do all `taps` rows, and `x` must hold
/// at least `outs.len() + taps.len() - 1` samples. Rows are processed in
/// blocks of up to four with a strip of output positions held in registers.
pub fn correlate_rows(outs: &mut [&mut [f64]], taps: &[&[f64]], x: &[f64]) {
    if outs.is_empty() {
        return;
    }
    let n_out = outs[0].len();
    let n_taps = taps[0].len();
    assert!(x.len() + 1 >= n_out + n_taps);
    let mut c0 = 0;
    while c0 < outs.len() {
        let cb = (outs.len() - c0).min(4);
        let (o, t) = (&mut outs[c0..c0 + cb], &taps[c0..c0 + cb]);
        match cb {
            4 => correlate_block::<4>(o, t, x),
            3 => correlate_block::<3>(o, t, x),
            2 => correlate_block::<2>(o, t, x),
            _ => correlate_block::<1>(o, t, x),
        }
        c0 += cb;
    }
}

fn correlate_block<const C: usize>(outs: &mut [&mut [f64]], taps: &[&[f64]], x: &[f64]) {
    let n_out = outs[0].len();
    let n_taps = taps[0].len();
    let taps: [&[f64]; C] = std::array::from_fn(|c| &taps[c][..n_taps]);
    let mut p0 = correlate_strips::<C, 16>(outs, &taps, x, 0);
    p0 = correlate_strips::<C, 8>(outs, &taps, x, p0);
    for p in p0..n_out {
        for c in 0..C {
            outs[c][p] += dot(taps[c], &x[p..p + n_taps]);
        }
    }
}

/// Full strips of `P` positions from `p0`; returns the first position not covered.
#[inline(always)]
fn correlate_strips<const C: usize, const P: usize>(
    outs: &mut [&mut [f64]],
    taps: &[&[f64]; C],
    x: &[f64],
    mut p0: usize,
) -> usize {
    let n_out = outs[0].len();
    let n_taps = taps[0].len();
    while p0 + P <= n_out {
        let mut acc = [[0.0f64; P]; C];
        let window = &x[p0..p0 + n_taps + P - 1];
        for t in 0..n_taps {
            let xs: &[f64; P] = window[t..t + P].try_into().unwrap();
            for c in 0..C {
                let kv = taps[c][t];
                for l in 0..P {
                    acc[c][l] += kv * xs[l];
                }
            }
        }
        for c in 0..C {
            for (o, a) in outs[c][p0..p0 + P].iter_mut().zip(&acc[c]) {
                *o += a;
            }
        }
        p0 += P;
    }
    p0
}

/// Geometry of a 2-D convolution over `[B, Cin, H, W]` input.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Input row feeding output row `oh` through kernel row `i`, if inside the input.
    #[inline]
    fn in_row(&self, oh: usize, i: usize) -> Option<usize> {
        let r = (oh * self.sh + i) as isize - self.ph as isize;
        (r >= 0 && (r as usize) < self.h).then_some(r as usize)
    }

    /// Range of output columns for kernel column `j` whose input column is in bounds.
    #[inline]
    fn col_range(&self, j: usize) -> (usize, usize) {
        let lo = if self.pw > j {
            (self.pw - j).div_ceil(self.sw)
        } else {
            0
        };
        // last valid: ow*sw + j - pw <= w - 1
        let hi = if self.w + self.pw > j {
            ((self.w - 1 + self.pw - j) / self.sw + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_col(&self, ow: usize, j: usize) -> usize {
        ow * self.sw + j - self.pw
    }
}

impl ConvGeom {
    /// Unit time stride and no time padding: every row is a plain correlation.
    fn dense_time(&self) -> bool {
        self.sw == 1 && self.pw == 0
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], k: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    if g.dense_time() {
        let ksz = g.kh * g.kw;
        for b in 0..g.batch {
            let block = &mut out[b * g.cout * out_plane..(b + 1) * g.cout * out_plane];
            for (co, plane) in block.chunks_exact_mut(out_plane).enumerate() {
                plane.fill(bias.map_or(0.0, |bb| bb[co]));
            }
            for ci in 0..g.cin {
                let x_plane = &x[(b * g.cin + ci) * in_plane..][..in_plane];
                for i in 0..g.kh {
                    let taps: Vec<&[f64]> = (0..g.cout)
                        .map(|co| &k[(co * g.cin + ci) * ksz + i * g.kw..][..g.kw])
                        .collect();
                    for oh in 0..g.oh {
                        let Some(ih) = g.in_row(oh, i) else { continue };
                        let mut rows: Vec<&mut [f64]> = block
                            .chunks_exact_mut(out_plane)
                            .map(|p| &mut p[oh * g.ow..(oh + 1) * g.ow])
                            .collect();
                        correlate_rows(&mut rows, &taps, &x_plane[ih * g.w..(ih + 1) * g.w]);
                    }
                }
            }
        }
        return;
    }
    for b in 0..g.batch {
        for co in 0..g.cout {
            let o_base = (b * g.cout + co) * out_plane;
            let plane = &mut out[o_base..o_base + out_plane];
            plane.fill(bias.map_or(0.0, |bb| bb[co]));
            for ci in 0..g.cin {
                let x_plane = &x[(b * g.cin + ci) * in_plane..][..in_plane];
                let k_base = (co * g.cin + ci) * g.kh * g.kw;
                for i in 0..g.kh {
                    for oh in 0..g.oh {
                        let Some(ih) = g.in_row(oh, i) else { continue };
                        let x_row = &x_plane[ih * g.w..(ih + 1) * g.w];
                        let o_row = &mut plane[oh * g.ow..(oh + 1) * g.ow];
                        for j in 0..g.kw {
                            let kv = k[k_base + i * g.kw + j];
                            let (lo, hi) = g.col_range(j);
                            if lo >= hi {
                                continue;
                            }
                            if g.sw == 1 {
                                let start = g.in_col(lo, j);
                                axpy(&mut o_row[lo..hi], kv, &x_row[start..start + hi - lo]);
                            } else {
                                for ow in lo..hi {
                                    o_row[ow] += kv * x_row[g.in_col(ow, j)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates dL/dkernel into `dk` given upstream `dy`.
pub fn conv2d_backward_kernel(g: &ConvGeom, x: &[f64], dy: &[f64], dk: &mut [f64]) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    if g.dense_time() {
        // dK[co,ci,i,j] += Σ_ow dY[b,co,oh,ow] X[b,ci,ih,ow+j]: a correlation with the
        // upstream rows as taps and the kernel columns as output positions.
        let ksz = g.kh * g.kw;
        for b in 0..g.batch {
            let dy_block = &dy[b * g.cout * out_plane..(b + 1) * g.cout * out_plane];
            for ci in 0..g.cin {
                let x_plane = &x[(b * g.cin + ci) * in_plane..][..in_plane];
                for i in 0..g.kh {
                    for oh in 0..g.oh {
                        let Some(ih) = g.in_row(oh, i) else { continue };
                        let taps: Vec<&[f64]> = dy_block
                            .chunks_exact(out_plane)
                            .map(|p| &p[oh * g.ow..(oh + 1) * g.ow])
                            .collect();
                        let mut rows: Vec<&mut [f64]> = dk
                            .chunks_exact_mut(g.cin * ksz)
                            .map(|r| &mut r[ci * ksz + i * g.kw..][..g.kw])
                            .collect();
                        correlate_rows(&mut rows, &taps, &x_plane[ih * g.w..(ih + 1) * g.w]);
                    }
                }
            }
        }
        return;
    }
    for b in 0..g.batch {
        for co in 0..g.cout {
            let dy_plane = &dy[(b * g.cout + co) * out_plane..][..out_plane];
            for ci in 0..g.cin {
                let x_plane = &x[(b * g.cin + ci) * in_plane..][..in_plane];
                let k_base = (co * g.cin + ci) * g.kh * g.kw;
                for i in 0..g.kh {
                    for oh in 0..g.oh {
                        let Some(ih) = g.in_row(oh, i) else { continue };
                        let x_row = &x_plane[ih * g.w..(ih + 1) * g.w];
                        let dy_row = &dy_plane[oh * g.ow..(oh + 1) * g.ow];
                        for j in 0..g.kw {
                            let (lo, hi) = g.col_range(j);
                            if lo >= hi {
                                continue;
                            }
                            let acc = if g.sw == 1 {
                                let start = g.in_col(lo, j);
                                dot(&dy_row[lo..hi], &x_row[start..start + hi - lo])
                            } else {
                                (lo..hi).map(|ow| dy_row[ow] * x_row[g.in_col(ow, j)]).sum()
                            };
                            dk[k_base + i * g.kw + j] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates dL/dinput into `dx` given upstream `dy`.
pub fn conv2d_backward_input(g: &ConvGeom, k: &[f64], dy: &[f64], dx: &mut [f64]) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for b in 0..g.batch {
        for co in 0..g.cout {
            let dy_plane = &dy[(b * g.cout + co) * out_plane..][..out_plane];
            for ci in 0..g.cin {
                let dx_plane = &mut dx[(b * g.cin + ci) * in_plane..][..in_plane];
                let k_base = (co * g.cin + ci) * g.kh * g.kw;
                for i in 0..g.kh {
                    for oh in 0..g.oh {
                        let Some(ih) = g.in_row(oh, i) else { continue };
                        let dy_row = &dy_plane[oh * g.ow..(oh + 1) * g.ow];
                        let dx_row = &mut dx_plane[ih * g.w..(ih + 1) * g.w];
                        for j in 0..g.kw {
                            let kv = k[k_base + i * g.kw + j];
                            let (lo, hi) = g.col_range(j);
                            if lo >= hi {
                                continue;
                            }
                            if g.sw == 1 {
                                let start = g.in_col(lo, j);
                                axpy(&mut dx_row[start..start + hi - lo], kv, &dy_row[lo..hi]);
                            } else {
                                for ow in lo..hi {
                                    dx_row[g.in_col(ow, j)] += kv * dy_row[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Half-open input range `[start, end)` covered by adaptive bin `i` of `out` over `w` samples.
#[inline]
pub fn adaptive_bin(i: usize, w: usize, out: usize) -> (usize, usize) {
    let start = i * w / out;
    let end = ((i + 1) * w).div_ceil(out);
    (start, end)
}

/// Numerically stable softmax of one row.
pub fn softmax_row(z: &[f64], out: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum_on_odd_lengths() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..19).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn correlate_rows_matches_nested_loops() {
        let x: Vec<f64> = (0..40).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        for (n_taps, rows) in [(3usize, 5usize), (12, 3), (1, 2), (30, 1)] {
            let taps_data: Vec<Vec<f64>> = (0..rows)
                .map(|c| (0..n_taps).map(|t| (c * 7 + t) as f64 * 0.25 - 1.0).collect())
                .collect();
            let n_out = x.len() - n_taps + 1;
            let mut out = vec![vec![0.5; n_out]; rows];
            let mut expect = out.clone();
            for c in 0..rows {
                for p in 0..n_out {
                    for t in 0..n_taps {
                        expect[c][p] += taps_data[c][t] * x[p + t];
                    }
                }
            }
            let taps: Vec<&[f64]> = taps_data.iter().map(|v| v.as_slice()).collect();
            let mut o: Vec<&mut [f64]> = out.iter_mut().map(|v| v.as_mut_slice()).collect();
            correlate_rows(&mut o, &taps, &x);
            for c in 0..rows {
                for p in 0..n_out {
                    assert!((out[c][p] - expect[c][p]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn adaptive_bins_overlap_on_uneven_split() {
        assert_eq!(adaptive_bin(0, 5, 2), (0, 3));
        assert_eq!(adaptive_bin(1, 5, 2), (2, 5));
        assert_eq!(adaptive_bin(3, 8, 4), (6, 8));
    }
}
