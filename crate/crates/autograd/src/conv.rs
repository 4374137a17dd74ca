//! Volumetric convolution geometry and the im2col / col2im kernels.
//!
//! Two-dimensional convolutions are run as volumes of depth one with a
//! depth-one kernel, so a single kernel pair covers both.

use crate::scalar::Scalar;

/// Kernel, stride and zero padding per spatial axis, ordered (depth, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        ConvGeom { kernel, stride, pad }
    }

    /// Square 2D geometry embedded in the volumetric layout.
    pub fn planar(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeom { kernel: [1, kernel, kernel], stride: [1, stride, stride], pad: [0, pad, pad] }
    }

    /// Output extent per axis, or `None` if the kernel does not fit.
    pub fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Unfold one sample `x[c, d, h, w]` into `cols[(c, kd, kh, kw), (od, oh, ow)]`.
pub fn im2col<T: Scalar>(x: &[T], channels: usize, dims: [usize; 3], g: &ConvGeom, out: [usize; 3], cols: &mut [T]) {
    let [id, ih, iw] = dims;
    let [od, oh, ow] = out;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let plane = od * oh * ow;
    debug_assert_eq!(cols.len(), channels * kd * kh * kw * plane);
    let mut row = 0usize;
    for c in 0..channels {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    let mut p = 0usize;
                    for zo in 0..od {
                        let z = (zo * sd + a) as isize - pd as isize;
                        for yo in 0..oh {
                            let y = (yo * sh + b) as isize - ph as isize;
                            let valid_zy = z >= 0 && (z as usize) < id && y >= 0 && (y as usize) < ih;
                            if !valid_zy {
                                dst[p..p + ow].iter_mut().for_each(|v| *v = T::zero());
                                p += ow;
                                continue;
                            }
                            let src = &xc[(z as usize * ih + y as usize) * iw..][..iw];
                            for xo in 0..ow {
                                let xi = (xo * sw + e) as isize - pw as isize;
                                dst[p] = if xi >= 0 && (xi as usize) < iw { src[xi as usize] } else { T::zero() };
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into `x`.
pub fn col2im<T: Scalar>(cols: &[T], channels: usize, dims: [usize; 3], g: &ConvGeom, out: [usize; 3], x: &mut [T]) {
    let [id, ih, iw] = dims;
    let [od, oh, ow] = out;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let plane = od * oh * ow;
    let mut row = 0usize;
    for c in 0..channels {
        let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * plane..(row + 1) * plane];
                    let mut p = 0usize;
                    for zo in 0..od {
                        let z = (zo * sd + a) as isize - pd as isize;
                        for yo in 0..oh {
                            let y = (yo * sh + b) as isize - ph as isize;
                            if !(z >= 0 && (z as usize) < id && y >= 0 && (y as usize) < ih) {
                                p += ow;
                                continue;
                            }
                            let dst = &mut xc[(z as usize * ih + y as usize) * iw..][..iw];
                            for xo in 0..ow {
                                let xi = (xo * sw + e) as isize - pw as isize;
                                if xi >= 0 && (xi as usize) < iw {
                                    dst[xi as usize] += src[p];
                                }
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
