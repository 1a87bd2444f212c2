//! Convolution kernels shared by the tape's forward and backward passes.

use crate::Element;

pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(stride > 0, "stride must be positive");
    assert!(input + 2 * pad >= kernel, "kernel {kernel} larger than padded input {input}+2*{pad}");
    (input + 2 * pad - kernel) / stride + 1
}

pub fn conv_transpose2d_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> usize {
    assert!(output_pad < stride, "output padding must be smaller than stride");
    ((input - 1) * stride + kernel + output_pad)
        .checked_sub(2 * pad)
        .expect("transposed convolution output would be empty")
}

/// Geometry of one image-to-columns unfolding.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Patch {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Patch {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source column index for output column `ox` at tap `kx`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }

    /// Output columns `[lo, hi)` whose tap `k` lands inside a row of `limit` pixels.
    #[inline]
    fn valid(&self, k: usize, limit: usize, outs: usize) -> (usize, usize) {
        let s = self.stride;
        // smallest o with o*s + k >= pad, largest with o*s + k - pad < limit
        let lo = self.pad.saturating_sub(k).div_ceil(s);
        let hi = if limit + self.pad > k { ((limit + self.pad - k - 1) / s + 1).min(outs) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Unfolds one `C x H x W` image into a `(C*k*k) x (OH*OW)` matrix.
    pub fn im2col<T: Element>(&self, img: &[T], cols: &mut [T]) {
        let (h, w, k, s) = (self.height, self.width, self.kernel, self.stride);
        let (p, ow) = (self.positions(), self.out_w);
        debug_assert_eq!(img.len(), self.channels * h * w);
        debug_assert_eq!(cols.len(), self.rows() * p);
        for c in 0..self.channels {
            let plane = &img[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                    let (lo, hi) = self.valid(kx, w, ow);
                    for oy in 0..self.out_h {
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        let Some(iy) = self.src(oy, ky, h) else {
                            dst.fill(T::zero());
                            continue;
                        };
                        let src_row = &plane[iy * w..(iy + 1) * w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        let first = lo * s + kx - self.pad;
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                        } else {
                            for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = src_row[first + j * s];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Patch::im2col`]: scatters columns back, accumulating into `img`.
    pub fn col2im<T: Element>(&self, cols: &[T], img: &mut [T]) {
        let (h, w, k, s) = (self.height, self.width, self.kernel, self.stride);
        let (p, ow) = (self.positions(), self.out_w);
        for c in 0..self.channels {
            let plane = &mut img[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                    let (lo, hi) = self.valid(kx, w, ow);
                    for oy in 0..self.out_h {
                        let Some(iy) = self.src(oy, ky, h) else { continue };
                        let src = &row[oy * ow + lo..oy * ow + hi];
                        let dst_row = &mut plane[iy * w..(iy + 1) * w];
                        let first = lo * s + kx - self.pad;
                        if s == 1 {
                            for (d, &v) in dst_row[first..first + src.len()].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (j, &v) in src.iter().enumerate() {
                                dst_row[first + j * s] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Direct stride-1, unpadded convolution for layers with very few output
/// channels, where GEMM packing costs more than the arithmetic.
pub(crate) struct Direct {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl Direct {
    fn out_hw(&self) -> (usize, usize) {
        (self.h - self.k + 1, self.w - self.k + 1)
    }

    pub fn forward<T: Element>(&self, x: &[T], weight: &[T], out: &mut [T]) {
        direct_forward(self, x, weight, out);
    }

    /// Full correlation of `dy` with the flipped, transposed kernel.
    pub fn backward_input<T: Element>(&self, dy: &[T], weight: &[T], dx: &mut [T]) {
        let (oh, ow) = self.out_hw();
        let (k, kk) = (self.k, self.k * self.k);
        let patch = Patch {
            channels: self.cout,
            height: oh,
            width: ow,
            kernel: k,
            stride: 1,
            pad: k - 1,
            out_h: self.h,
            out_w: self.w,
        };
        let mut cols = vec![T::zero(); patch.rows() * patch.positions()];
        patch.im2col(dy, &mut cols);
        let mut flipped = vec![T::zero(); self.cin * self.cout * kk];
        for c in 0..self.cin {
            for o in 0..self.cout {
                let src = &weight[(o * self.cin + c) * kk..][..kk];
                let dst = &mut flipped[(c * self.cout + o) * kk..][..kk];
                for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                    *d = *s;
                }
            }
        }
        T::gemm(self.cin, self.h * self.w, patch.rows(), T::one(), &flipped, false, &cols, false, T::one(), dx);
    }

    pub fn backward_weight<T: Element>(&self, dy: &[T], x: &[T], dw: &mut [T]) {
        direct_backward_weight(self, dy, x, dw);
    }
}

/// Output columns computed per register block.
const BLOCK: usize = 16;
/// Largest kernel side the blocked weight gradient keeps in registers.
const MAX_OUT: usize = 8;

#[multiversion::multiversion(targets("x86_64+avx2+fma"))]
fn direct_forward<T: Element>(g: &Direct, x: &[T], weight: &[T], out: &mut [T]) {
    let (cin, kk, cout) = (g.cin, g.k * g.k, g.cout);
    // taps laid out [c][ky][kx][o]
    let mut taps = vec![T::zero(); cin * kk * cout];
    for o in 0..cout {
        for i in 0..cin * kk {
            taps[i * cout + o] = weight[o * cin * kk + i];
        }
    }
    match cout {
        1 => forward_rows::<T, 1>(g, x, &taps, out),
        2 => forward_rows::<T, 2>(g, x, &taps, out),
        3 => forward_rows::<T, 3>(g, x, &taps, out),
        4 => forward_rows::<T, 4>(g, x, &taps, out),
        _ => forward_rows::<T, 0>(g, x, &taps, out),
    }
}

/// Forward pass with `C` output channels held in registers; `C == 0`
/// falls back to one column at a time.
#[inline(always)]
fn forward_rows<T: Element, const C: usize>(g: &Direct, x: &[T], taps: &[T], out: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let (h, w, k, cin, cout) = (g.h, g.w, g.k, g.cin, g.cout);
    let blocked = if C > 0 { ow / BLOCK * BLOCK } else { 0 };
    for y in 0..oh {
        for x0 in (0..blocked).step_by(BLOCK) {
            let mut acc = [[T::zero(); BLOCK]; C];
            for c in 0..cin {
                for ky in 0..k {
                    let row = &x[c * h * w + (y + ky) * w + x0..];
                    for kx in 0..k {
                        let src: &[T; BLOCK] = row[kx..kx + BLOCK].try_into().unwrap();
                        let t: &[T; C] = taps[((c * k + ky) * k + kx) * C..][..C].try_into().unwrap();
                        for o in 0..C {
                            for l in 0..BLOCK {
                                acc[o][l] += t[o] * src[l];
                            }
                        }
                    }
                }
            }
            for (o, a) in acc.iter().enumerate() {
                for (d, &v) in out[(o * oh + y) * ow + x0..][..BLOCK].iter_mut().zip(a) {
                    *d += v;
                }
            }
        }
        for o in 0..cout {
            for xo in blocked..ow {
                let mut s = T::zero();
                for c in 0..cin {
                    for ky in 0..k {
                        let row = &x[c * h * w + (y + ky) * w + xo..];
                        for kx in 0..k {
                            s += taps[((c * k + ky) * k + kx) * cout + o] * row[kx];
                        }
                    }
                }
                out[(o * oh + y) * ow + xo] += s;
            }
        }
    }
}

#[multiversion::multiversion(targets("x86_64+avx2+fma"))]
fn direct_backward_weight<T: Element>(g: &Direct, dy: &[T], x: &[T], dw: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let (h, w, k) = (g.h, g.w, g.k);
    let full = ow / 8 * 8;
    for o in 0..g.cout {
        let g_plane = &dy[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..g.cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                // eight partial sums per kernel column
                let mut lanes = [[T::zero(); 8]; MAX_OUT];
                let mut tail = [T::zero(); MAX_OUT];
                let blocked = k <= MAX_OUT;
                for y in 0..oh {
                    let gr = &g_plane[y * ow..(y + 1) * ow];
                    let src = &plane[(y + ky) * w..];
                    if blocked {
                        for j in (0..full).step_by(8) {
                            let gv: &[T; 8] = gr[j..j + 8].try_into().unwrap();
                            for (kx, lane) in lanes.iter_mut().take(k).enumerate() {
                                let sv: &[T; 8] = src[j + kx..j + kx + 8].try_into().unwrap();
                                for l in 0..8 {
                                    lane[l] += gv[l] * sv[l];
                                }
                            }
                        }
                        for (kx, t) in tail.iter_mut().take(k).enumerate() {
                            for j in full..ow {
                                *t += gr[j] * src[j + kx];
                            }
                        }
                    } else {
                        for kx in 0..k {
                            let mut s = T::zero();
                            for j in 0..ow {
                                s += gr[j] * src[j + kx];
                            }
                            dw[((o * g.cin + c) * k + ky) * k + kx] += s;
                        }
                    }
                }
                if blocked {
                    for kx in 0..k {
                        let s = lanes[kx].iter().fold(T::zero(), |a, &b| a + b) + tail[kx];
                        dw[((o * g.cin + c) * k + ky) * k + kx] += s;
                    }
                }
            }
        }
    }
}
