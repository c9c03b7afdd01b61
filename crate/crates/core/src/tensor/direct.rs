//! Stride-1 convolution as row-wise multiply-adds over a zero-padded copy of
//! the input. For the narrow channel counts of the counting network this
//! beats unfolding plus GEMM, whose packing cost scales with the tiny
//! output-channel count.

use super::Element;

/// Runs a `*_body` method through a copy compiled for AVX2 + FMA when the
/// CPU has them, and through the portable build otherwise.
macro_rules! dispatch {
    ($self:ident . $body:ident ( $($arg:expr),* )) => {{
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                #[target_feature(enable = "avx2,fma")]
                unsafe fn wide<T: Element>(p: &Plan, a: &[T], b: &[T], c: &mut [T]) {
                    p.$body::<T, true>(a, b, c)
                }
                // SAFETY: both target features were detected at runtime.
                return unsafe { wide($self, $($arg),*) };
            }
        }
        $self.$body::<T, false>($($arg),*)
    }};
}

#[derive(Clone, Copy, Debug)]
pub(super) struct Plan {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub dilation: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Plan {
    fn hp(&self) -> usize {
        self.h + 2 * self.pad
    }

    fn wp(&self) -> usize {
        self.w + 2 * self.pad
    }

    fn padded_plane(&self) -> usize {
        self.hp() * self.wp()
    }

    fn weight_index(&self, co: usize, ci: usize, ki: usize, kj: usize) -> usize {
        ((co * self.cin + ci) * self.kh + ki) * self.kw + kj
    }

    /// Zero-padded copy of one `(cin, h, w)` image.
    pub fn pad_image<T: Element>(&self, x: &[T]) -> Vec<T> {
        let (wp, p) = (self.wp(), self.pad);
        let mut out = vec![T::zero(); self.cin * self.padded_plane()];
        for ci in 0..self.cin {
            let src = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            let dst = &mut out[ci * self.padded_plane()..(ci + 1) * self.padded_plane()];
            for (y, row) in src.chunks_exact(self.w).enumerate() {
                let at = (y + p) * wp + p;
                dst[at..at + self.w].copy_from_slice(row);
            }
        }
        out
    }

    /// `out` (cout, oh, ow) += conv(padded, weight).
    pub fn forward<T: Element>(&self, padded: &[T], weight: &[T], out: &mut [T]) {
        dispatch!(self.forward_body(padded, weight, out))
    }

    /// `dw` (cout, cin, kh, kw) += correlation of `grad_out` with `padded`.
    pub fn weight_grad<T: Element>(&self, padded: &[T], grad_out: &[T], dw: &mut [T]) {
        dispatch!(self.weight_grad_body(padded, grad_out, dw))
    }

    /// `dx` (cin, h, w) += transposed convolution of `grad_out`.
    pub fn input_grad<T: Element>(&self, weight: &[T], grad_out: &[T], dx: &mut [T]) {
        dispatch!(self.input_grad_body(weight, grad_out, dx))
    }

    #[inline(always)]
    fn forward_body<T: Element, const FUSED: bool>(&self, padded: &[T], weight: &[T], out: &mut [T]) {
        let (wp, d, ohw) = (self.wp(), self.dilation, self.oh * self.ow);
        for co in 0..self.cout {
            let oplane = &mut out[co * ohw..(co + 1) * ohw];
            for ci in 0..self.cin {
                let ipl = &padded[ci * self.padded_plane()..(ci + 1) * self.padded_plane()];
                for ki in 0..self.kh {
                    let taps = &weight[self.weight_index(co, ci, ki, 0)..][..self.kw];
                    for (oy, orow) in oplane.chunks_exact_mut(self.ow).enumerate() {
                        let base = (oy + ki * d) * wp;
                        if self.kw == 3 {
                            let s0 = &ipl[base..base + self.ow];
                            let s1 = &ipl[base + d..base + d + self.ow];
                            let s2 = &ipl[base + 2 * d..base + 2 * d + self.ow];
                            axpy3::<T, FUSED>(orow, [taps[0], taps[1], taps[2]], s0, s1, s2);
                        } else {
                            for (kj, &wv) in taps.iter().enumerate() {
                                let at = base + kj * d;
                                axpy::<T, FUSED>(orow, wv, &ipl[at..at + self.ow]);
                            }
                        }
                    }
                }
            }
        }
    }

    #[inline(always)]
    fn weight_grad_body<T: Element, const FUSED: bool>(&self, padded: &[T], grad_out: &[T], dw: &mut [T]) {
        let (wp, d, ohw, ow) = (self.wp(), self.dilation, self.oh * self.ow, self.ow);
        let body = ow - ow % LANES;
        for co in 0..self.cout {
            let gplane = &grad_out[co * ohw..(co + 1) * ohw];
            for ci in 0..self.cin {
                let ipl = &padded[ci * self.padded_plane()..(ci + 1) * self.padded_plane()];
                for ki in 0..self.kh {
                    for kj0 in (0..self.kw).step_by(3) {
                        let taps = (self.kw - kj0).min(3);
                        let mut acc = [[T::zero(); LANES]; 3];
                        let mut tail = [T::zero(); 3];
                        for (oy, grow) in gplane.chunks_exact(ow).enumerate() {
                            let row = (oy + ki * d) * wp;
                            for t in 0..taps {
                                let at = row + (kj0 + t) * d;
                                let src = &ipl[at..at + ow];
                                let a = &mut acc[t];
                                for (g, x) in grow[..body].chunks_exact(LANES).zip(src[..body].chunks_exact(LANES)) {
                                    for l in 0..LANES {
                                        a[l] = madd::<T, FUSED>(a[l], g[l], x[l]);
                                    }
                                }
                                for (&g, &x) in grow[body..].iter().zip(&src[body..]) {
                                    tail[t] = madd::<T, FUSED>(tail[t], g, x);
                                }
                            }
                        }
                        for t in 0..taps {
                            let sum = acc[t].iter().fold(tail[t], |s, &v| s + v);
                            let slot = &mut dw[self.weight_index(co, ci, ki, kj0 + t)];
                            *slot = *slot + sum;
                        }
                    }
                }
            }
        }
    }

    /// Transposed convolution written straight into `dx`: output row `oy`
    /// feeds input row `oy + ki*d - pad`, and a horizontally zero-padded copy
    /// of each upstream row lets all column taps run as one fused pass.
    #[inline(always)]
    fn input_grad_body<T: Element, const FUSED: bool>(&self, weight: &[T], grad_out: &[T], dx: &mut [T]) {
        let (d, p, ow, w) = (self.dilation, self.pad, self.ow, self.w);
        let reach = (self.kw - 1) * d;
        let gw = ow + 2 * reach;
        let mut gpad = vec![T::zero(); self.cout * self.oh * gw];
        for (row, src) in gpad.chunks_exact_mut(gw).zip(grad_out.chunks_exact(ow)) {
            row[reach..reach + ow].copy_from_slice(src);
        }
        // dx[y][x] += sum_kj w[kj] * g[oy][x + p - kj*d], g indexed from -reach
        for ci in 0..self.cin {
            let dplane = &mut dx[ci * self.h * w..(ci + 1) * self.h * w];
            for co in 0..self.cout {
                let gplane = &gpad[co * self.oh * gw..(co + 1) * self.oh * gw];
                for ki in 0..self.kh {
                    let taps = &weight[self.weight_index(co, ci, ki, 0)..][..self.kw];
                    for (oy, grow) in gplane.chunks_exact(gw).enumerate() {
                        let y = oy + ki * d;
                        if y < p || y - p >= self.h {
                            continue;
                        }
                        let drow = &mut dplane[(y - p) * w..(y - p + 1) * w];
                        let at = |kj: usize| reach + p - kj * d;
                        if self.kw == 3 {
                            let s0 = &grow[at(0)..at(0) + w];
                            let s1 = &grow[at(1)..at(1) + w];
                            let s2 = &grow[at(2)..at(2) + w];
                            axpy3::<T, FUSED>(drow, [taps[0], taps[1], taps[2]], s0, s1, s2);
                        } else {
                            for (kj, &wv) in taps.iter().enumerate() {
                                axpy::<T, FUSED>(drow, wv, &grow[at(kj)..at(kj) + w]);
                            }
                        }
                    }
                }
            }
        }
    }
}

const LANES: usize = 8;

/// `acc + a * b`, as one fused instruction when the caller was compiled
/// with FMA available.
#[inline(always)]
fn madd<T: Element, const FUSED: bool>(acc: T, a: T, b: T) -> T {
    if FUSED {
        a.mul_add(b, acc)
    } else {
        acc + a * b
    }
}

#[inline(always)]
fn axpy<T: Element, const FUSED: bool>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = madd::<T, FUSED>(*d, a, s);
    }
}

#[inline(always)]
fn axpy3<T: Element, const FUSED: bool>(dst: &mut [T], w: [T; 3], s0: &[T], s1: &[T], s2: &[T]) {
    let n = dst.len();
    let (s0, s1, s2) = (&s0[..n], &s1[..n], &s2[..n]);
    for i in 0..n {
        let v = madd::<T, FUSED>(dst[i], w[0], s0[i]);
        let v = madd::<T, FUSED>(v, w[1], s1[i]);
        dst[i] = madd::<T, FUSED>(v, w[2], s2[i]);
    }
}
