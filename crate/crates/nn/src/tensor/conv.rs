use serde::{Deserialize, Serialize};

use super::{matmul, mismatch, Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    /// Rows strictly above the centre.
    Vertical,
    /// Columns strictly left of the centre, same row.
    HorizontalA,
    /// Columns left of the centre plus the centre itself.
    HorizontalB,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub mask: MaskKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// One live kernel tap: input offset and flat kernel index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Tap {
    pub dy: isize,
    pub dx: isize,
    pub k: usize,
}

impl MaskedConvSpec {
    pub fn new(kernel: usize, mask: MaskKind, in_channels: usize, out_channels: usize) -> Self {
        MaskedConvSpec { kernel_h: kernel, kernel_w: kernel, mask, in_channels, out_channels }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(1, MaskKind::None, in_channels, out_channels)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    /// Whether the kernel tap at `(ky, kx)` survives the mask.
    pub fn tap_live(&self, ky: usize, kx: usize) -> bool {
        let dy = ky as isize - (self.kernel_h / 2) as isize;
        let dx = kx as isize - (self.kernel_w / 2) as isize;
        match self.mask {
            MaskKind::None => true,
            MaskKind::Vertical => dy < 0,
            MaskKind::HorizontalA => dy == 0 && dx < 0,
            MaskKind::HorizontalB => dy == 0 && dx <= 0,
        }
    }

    /// Number of kernel taps the mask keeps.
    pub fn taps_live(&self) -> usize {
        self.taps().len()
    }

    pub(crate) fn taps(&self) -> Vec<Tap> {
        let mut out = Vec::new();
        for ky in 0..self.kernel_h {
            for kx in 0..self.kernel_w {
                if self.tap_live(ky, kx) {
                    out.push(Tap {
                        dy: ky as isize - (self.kernel_h / 2) as isize,
                        dx: kx as isize - (self.kernel_w / 2) as isize,
                        k: ky * self.kernel_w + kx,
                    });
                }
            }
        }
        out
    }

    fn is_identity_gather(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && matches!(self.mask, MaskKind::None | MaskKind::HorizontalB)
    }
}

/// Geometry of one convolution call.
#[derive(Debug, Clone)]
pub(crate) struct ConvGeom {
    pub spec: MaskedConvSpec,
    pub taps: Vec<Tap>,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn new(spec: MaskedConvSpec, input: &[usize], weights: &[usize], bias: &[usize]) -> Result<Self, TensorError> {
        if input.len() != 4 || input[1] != spec.in_channels {
            return Err(mismatch(format!("conv input {:?} for {} in-channels", input, spec.in_channels)));
        }
        if weights != spec.weight_shape() {
            return Err(mismatch(format!("conv weights {:?}, expected {:?}", weights, spec.weight_shape())));
        }
        if bias != [spec.out_channels] {
            return Err(mismatch(format!("conv bias {:?} for {} out-channels", bias, spec.out_channels)));
        }
        Ok(ConvGeom { spec, taps: spec.taps(), n: input[0], h: input[2], w: input[3] })
    }

    fn rows(&self) -> usize {
        self.taps.len() * self.spec.in_channels
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Gathers shifted input planes into `[n][taps·cin][h·w]`; `None` when
    /// the input can serve as its own column matrix.
    pub fn im2col<T: Real>(&self, x: &[T]) -> Option<Vec<T>> {
        if self.spec.is_identity_gather() {
            return None;
        }
        let (cin, h, w, hw) = (self.spec.in_channels, self.h, self.w, self.hw());
        let rows = self.rows();
        let mut col = vec![T::zero(); self.n * rows * hw];
        for b in 0..self.n {
            for (t, tap) in self.taps.iter().enumerate() {
                let (j0, j1) = col_range(tap.dx, w);
                for c in 0..cin {
                    let src = &x[(b * cin + c) * hw..][..hw];
                    let dst = &mut col[(b * rows + t * cin + c) * hw..][..hw];
                    for i in 0..h {
                        let si = i as isize + tap.dy;
                        if si < 0 || si >= h as isize || j0 >= j1 {
                            continue;
                        }
                        let srow = si as usize * w;
                        let s0 = (j0 as isize + tap.dx) as usize;
                        dst[i * w + j0..i * w + j1].copy_from_slice(&src[srow + s0..srow + s0 + (j1 - j0)]);
                    }
                }
            }
        }
        Some(col)
    }

    /// Scatter-adds a column-matrix gradient back onto the input gradient.
    pub fn col2im_add<T: Real>(&self, dcol: &[T], dx: &mut [T]) {
        let (cin, h, w, hw) = (self.spec.in_channels, self.h, self.w, self.hw());
        let rows = self.rows();
        for b in 0..self.n {
            for (t, tap) in self.taps.iter().enumerate() {
                let (j0, j1) = col_range(tap.dx, w);
                for c in 0..cin {
                    let src = &dcol[(b * rows + t * cin + c) * hw..][..hw];
                    let dst = &mut dx[(b * cin + c) * hw..][..hw];
                    for i in 0..h {
                        let si = i as isize + tap.dy;
                        if si < 0 || si >= h as isize || j0 >= j1 {
                            continue;
                        }
                        let drow = si as usize * w;
                        let d0 = (j0 as isize + tap.dx) as usize;
                        for j in j0..j1 {
                            dst[drow + d0 + j - j0] += src[i * w + j];
                        }
                    }
                }
            }
        }
    }

    /// Live weights packed as `[cout][taps·cin]`.
    pub fn pack<T: Real>(&self, weights: &[T]) -> Vec<T> {
        let (cin, cout) = (self.spec.in_channels, self.spec.out_channels);
        let kk = self.spec.kernel_h * self.spec.kernel_w;
        let rows = self.rows();
        let mut out = vec![T::zero(); cout * rows];
        for o in 0..cout {
            for (t, tap) in self.taps.iter().enumerate() {
                for c in 0..cin {
                    out[o * rows + t * cin + c] = weights[(o * cin + c) * kk + tap.k];
                }
            }
        }
        out
    }

    fn unpack_add<T: Real>(&self, packed: &[T], dw: &mut [T]) {
        let (cin, cout) = (self.spec.in_channels, self.spec.out_channels);
        let kk = self.spec.kernel_h * self.spec.kernel_w;
        let rows = self.rows();
        for o in 0..cout {
            for (t, tap) in self.taps.iter().enumerate() {
                for c in 0..cin {
                    dw[(o * cin + c) * kk + tap.k] += packed[o * rows + t * cin + c];
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, x: &[T], col: Option<&[T]>, weights: &[T], bias: &[T]) -> Vec<T> {
        let cout = self.spec.out_channels;
        let (rows, hw) = (self.rows(), self.hw());
        let wm = self.pack(weights);
        let cols = col.unwrap_or(x);
        let mut y = vec![T::zero(); self.n * cout * hw];
        for b in 0..self.n {
            let out = &mut y[b * cout * hw..][..cout * hw];
            for (o, &bv) in bias.iter().enumerate() {
                out[o * hw..(o + 1) * hw].fill(bv);
            }
            matmul(cout, rows, hw, &wm, false, &cols[b * rows * hw..][..rows * hw], false, out, true);
        }
        y
    }

    /// Accumulates weight and bias gradients; returns the input gradient if
    /// asked for.
    pub fn backward<T: Real>(
        &self,
        x: &[T],
        col: Option<&[T]>,
        weights: &[T],
        dy: &[T],
        dw: &mut [T],
        db: &mut [T],
        want_dx: bool,
    ) -> Option<Vec<T>> {
        let cout = self.spec.out_channels;
        let (rows, hw) = (self.rows(), self.hw());
        let cols = col.unwrap_or(x);
        let mut dwm = vec![T::zero(); cout * rows];
        for b in 0..self.n {
            let g = &dy[b * cout * hw..][..cout * hw];
            for o in 0..cout {
                db[o] += g[o * hw..(o + 1) * hw].iter().copied().sum();
            }
            matmul(cout, hw, rows, g, false, &cols[b * rows * hw..][..rows * hw], true, &mut dwm, true);
        }
        self.unpack_add(&dwm, dw);
        if !want_dx {
            return None;
        }
        let wm = self.pack(weights);
        let mut dcol = vec![T::zero(); self.n * rows * hw];
        for b in 0..self.n {
            matmul(rows, cout, hw, &wm, true, &dy[b * cout * hw..][..cout * hw], false, &mut dcol[b * rows * hw..][..rows * hw], false);
        }
        if col.is_none() {
            return Some(dcol);
        }
        let mut dx = vec![T::zero(); x.len()];
        self.col2im_add(&dcol, &mut dx);
        Some(dx)
    }
}

/// Output columns `j0..j1` whose source column `j + dx` is in range.
fn col_range(dx: isize, w: usize) -> (usize, usize) {
    let j0 = (-dx).max(0) as usize;
    let j1 = (w as isize - dx.max(0)).max(0) as usize;
    (j0.min(w), j1)
}

/// Same-padded masked 2-D convolution over an NCHW tensor.
pub fn conv2d_masked<T: Real>(
    input: &Tensor<T>,
    spec: &MaskedConvSpec,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let g = ConvGeom::new(*spec, input.shape(), weights.shape(), bias.shape())?;
    let col = g.im2col(input.data());
    let y = g.forward(input.data(), col.as_deref(), weights.data(), bias.data());
    Tensor::from_vec(&[g.n, spec.out_channels, g.h, g.w], y)
}
