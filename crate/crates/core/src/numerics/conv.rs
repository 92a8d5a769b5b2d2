//! Direct stride-1 2-D convolution with zero padding.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.padding + 1 - self.kernel
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.padding + 1 - self.kernel
    }

    fn in_len(&self) -> usize {
        self.in_ch * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.out_ch * self.out_h() * self.out_w()
    }

    /// Calls `f(out_index, in_index, weight_index)` for every valid tap of one sample.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow, k, p) = (self.out_h(), self.out_w(), self.kernel, self.padding as isize);
        for o in 0..self.out_ch {
            for c in 0..self.in_ch {
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((o * self.in_ch + c) * k + ky) * k + kx;
                        for y in 0..oh {
                            let iy = y as isize + ky as isize - p;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for x in 0..ow {
                                let ix = x as isize + kx as isize - p;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                let oidx = (o * oh + y) * ow + x;
                                let iidx = (c * self.h + iy as usize) * self.w + ix as usize;
                                f(oidx, iidx, widx);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, x: &[f32], w: &[f32], bias: &[f32], batch: usize) -> Vec<f32> {
    let (il, ol) = (g.in_len(), g.out_len());
    let plane = g.out_h() * g.out_w();
    let mut out = vec![0.0f32; batch * ol];
    for n in 0..batch {
        let xs = &x[n * il..(n + 1) * il];
        let os = &mut out[n * ol..(n + 1) * ol];
        for (o, chunk) in os.chunks_mut(plane).enumerate() {
            chunk.fill(bias[o]);
        }
        g.for_each_tap(|oi, ii, wi| os[oi] += xs[ii] * w[wi]);
    }
    out
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    dy: &[f32],
    x: &[f32],
    w: &[f32],
    batch: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (il, ol) = (g.in_len(), g.out_len());
    let plane = g.out_h() * g.out_w();
    let mut dx = vec![0.0f32; batch * il];
    let mut dw = vec![0.0f32; w.len()];
    let mut db = vec![0.0f32; g.out_ch];
    for n in 0..batch {
        let xs = &x[n * il..(n + 1) * il];
        let dys = &dy[n * ol..(n + 1) * ol];
        let dxs = &mut dx[n * il..(n + 1) * il];
        for (o, chunk) in dys.chunks(plane).enumerate() {
            db[o] += chunk.iter().sum::<f32>();
        }
        g.for_each_tap(|oi, ii, wi| {
            let d = dys[oi];
            dw[wi] += d * xs[ii];
            dxs[ii] += d * w[wi];
        });
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_channel_valid_convolution() {
        let g = ConvGeom {
            in_ch: 1,
            out_ch: 1,
            h: 3,
            w: 3,
            kernel: 2,
            padding: 0,
        };
        let x: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let w = [1.0, 0.0, 0.0, -1.0];
        let y = conv_forward(&g, &x, &w, &[0.5], 1);
        // x[y][x] - x[y+1][x+1] = -4 everywhere, plus bias
        assert_eq!(y, vec![-3.5; 4]);
    }

    #[test]
    fn padding_keeps_spatial_size() {
        let g = ConvGeom {
            in_ch: 1,
            out_ch: 1,
            h: 2,
            w: 2,
            kernel: 3,
            padding: 1,
        };
        assert_eq!((g.out_h(), g.out_w()), (2, 2));
        let y = conv_forward(&g, &[1.0, 2.0, 3.0, 4.0], &[1.0; 9], &[0.0], 1);
        assert_eq!(y, vec![10.0; 4]);
    }
}
