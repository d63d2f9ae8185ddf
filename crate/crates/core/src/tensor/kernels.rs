//! Raw slice kernels behind the tape operations.

use super::Real;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_channels * self.height * self.width
    }
}

/// Unfolds one image `[C,H,W]` into columns `[C·kH·kW, H'·W']`.
fn im2col<T: Real>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let channel = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - g.padding as isize;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= g.height as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &channel[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if x < 0 || x >= g.width as isize {
                            T::zero()
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds column gradients back onto the image gradient (adds).
fn col2im<T: Real>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let channel = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - g.padding as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let base = y as usize * g.width;
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + kj) as isize - g.padding as isize;
                        if x >= 0 && x < g.width as isize {
                            channel[base + x as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.filters * plane];
    let mut cols = vec![T::zero(); patch * plane];
    for n in 0..g.batch {
        let image = &input[n * g.in_image()..(n + 1) * g.in_image()];
        im2col(g, image, &mut cols);
        let dst = &mut out[n * g.filters * plane..(n + 1) * g.filters * plane];
        if let Some(bias) = bias {
            for (f, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(bias[f]);
            }
        }
        T::gemm(
            g.filters,
            patch,
            plane,
            T::one(),
            kernel,
            (patch as isize, 1),
            &cols,
            (plane as isize, 1),
            T::one(),
            dst,
            (plane as isize, 1),
        );
    }
    out
}

/// Accumulates kernel, bias, and (optionally) input gradients.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_kernel: Option<&mut [T]>,
    mut grad_bias: Option<&mut [T]>,
) {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut cols = vec![T::zero(); patch * plane];
    for n in 0..g.batch {
        let dy = &grad_out[n * g.filters * plane..(n + 1) * g.filters * plane];
        if let Some(db) = grad_bias.as_deref_mut() {
            for (f, chunk) in dy.chunks(plane).enumerate() {
                db[f] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dk) = grad_kernel.as_deref_mut() {
            let image = &input[n * g.in_image()..(n + 1) * g.in_image()];
            im2col(g, image, &mut cols);
            // dK[F,P] += dY[F,HW] · cols[P,HW]^T
            T::gemm(
                g.filters,
                plane,
                patch,
                T::one(),
                dy,
                (plane as isize, 1),
                &cols,
                (1, plane as isize),
                T::one(),
                dk,
                (patch as isize, 1),
            );
        }
        if let Some(dx) = grad_input.as_deref_mut() {
            // dcols[P,HW] = K[F,P]^T · dY[F,HW]
            T::gemm(
                patch,
                g.filters,
                plane,
                T::one(),
                kernel,
                (1, patch as isize),
                dy,
                (plane as isize, 1),
                T::zero(),
                &mut cols,
                (plane as isize, 1),
            );
            let image_grad = &mut dx[n * g.in_image()..(n + 1) * g.in_image()];
            col2im(g, &cols, image_grad);
        }
    }
}

/// Max pooling over `[N·C]` planes; returns values and the flat argmax index
/// of each output cell (first occurrence in row-major order wins ties).
pub(crate) fn maxpool_forward<T: Real>(
    planes: usize,
    height: usize,
    width: usize,
    window: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    input: &[T],
) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    let mut argmax = Vec::with_capacity(out.capacity());
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best_idx = base + oy * stride * width + ox * stride;
                let mut best = input[best_idx];
                for i in 0..window {
                    for j in 0..window {
                        let idx = base + (oy * stride + i) * width + ox * stride + j;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}
