use serde::{Deserialize, Serialize};

use super::gemm::{gemm, Layout};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Permutation, TensorShape, WeightTensor};

/// One `(C, H, W)` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    shape: TensorShape,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(shape: TensorShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(shape_err(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> TensorShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.shape.height * self.shape.width;
        &self.data[c * hw..(c + 1) * hw]
    }
}

/// Convolution with `G` independent channel groups plus a channel shuffle
/// on both sides.
///
/// Grouped input position `b` reads input channel `gather_in[b]`; grouped
/// output `a` is written to output channel `scatter_out[a]`. Weights use the
/// grouped layout `(G, c_out/G, c_in/G, k, k)`, which is stored as a
/// `(c_out, c_in/G, k, k)` tensor. `bias[a]` belongs to grouped output `a`.
/// A dense convolution is the `G = 1` case with identity shuffles.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedLayer {
    groups: usize,
    weights: WeightTensor,
    bias: Vec<f64>,
    gather_in: Permutation,
    scatter_out: Permutation,
    stride: usize,
    padding: usize,
}

/// Static description of a layer, without parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl GroupedLayer {
    pub fn new(
        groups: usize,
        weights: WeightTensor,
        bias: Vec<f64>,
        gather_in: Permutation,
        scatter_out: Permutation,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let c_out = weights.c_out();
        let c_in = weights.c_in() * groups;
        if groups == 0 || c_out % groups != 0 {
            return Err(Error::Divisibility { c_out, c_in, groups });
        }
        if bias.len() != c_out || scatter_out.len() != c_out || gather_in.len() != c_in {
            return Err(shape_err(format!(
                "bias {} / scatter {} / gather {} for a {c_in}->{c_out} layer",
                bias.len(),
                scatter_out.len(),
                gather_in.len()
            )));
        }
        if stride == 0 {
            return Err(shape_err("stride must be positive"));
        }
        Ok(Self { groups, weights, bias, gather_in, scatter_out, stride, padding })
    }

    pub fn dense(weights: WeightTensor, bias: Vec<f64>, stride: usize, padding: usize) -> Result<Self> {
        let gather = Permutation::identity(weights.c_in());
        let scatter = Permutation::identity(weights.c_out());
        Self::new(1, weights, bias, gather, scatter, stride, padding)
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn c_out(&self) -> usize {
        self.weights.c_out()
    }

    pub fn c_in(&self) -> usize {
        self.weights.c_in() * self.groups
    }

    pub fn k(&self) -> usize {
        self.weights.k()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry { c_in: self.c_in(), c_out: self.c_out(), k: self.k(), stride: self.stride, padding: self.padding }
    }

    pub fn weights(&self) -> &WeightTensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut WeightTensor {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (self.weights.as_mut_slice(), &mut self.bias)
    }

    pub fn gather_in(&self) -> &Permutation {
        &self.gather_in
    }

    pub fn scatter_out(&self) -> &Permutation {
        &self.scatter_out
    }

    pub fn set_shuffles(&mut self, gather_in: Permutation, scatter_out: Permutation) -> Result<()> {
        if gather_in.len() != self.c_in() || scatter_out.len() != self.c_out() {
            return Err(shape_err("shuffle sizes do not match the layer"));
        }
        self.gather_in = gather_in;
        self.scatter_out = scatter_out;
        Ok(())
    }

    pub fn is_dense(&self) -> bool {
        self.groups == 1 && self.gather_in.is_identity() && self.scatter_out.is_identity()
    }

    pub fn param_count(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.k();
        if h + 2 * self.padding < k || w + 2 * self.padding < k {
            return Err(shape_err(format!("{h}x{w} input smaller than kernel {k}")));
        }
        Ok(((h + 2 * self.padding - k) / self.stride + 1, (w + 2 * self.padding - k) / self.stride + 1))
    }

    /// Multiply-accumulates of one forward pass on an `h × w` input.
    pub fn flops(&self, h: usize, w: usize) -> Result<usize> {
        let (ho, wo) = self.output_hw(h, w)?;
        Ok(self.weights.as_slice().len() * ho * wo)
    }

    /// Equivalent dense `(c_out, c_in, k, k)` weights and bias, with zeros
    /// on every connection the grouping removed.
    pub fn to_dense(&self) -> (WeightTensor, Vec<f64>) {
        let (c_out, c_in) = (self.c_out(), self.c_in());
        let (bo, bi) = (c_out / self.groups, c_in / self.groups);
        let mut dense = WeightTensor::zeros(c_out, c_in, self.k());
        let mut bias = vec![0.0; c_out];
        for a in 0..c_out {
            let g = a / bo;
            let j = self.scatter_out.get(a);
            bias[j] = self.bias[a];
            for local in 0..bi {
                let i = self.gather_in.get(g * bi + local);
                dense.kernel_mut(j, i).copy_from_slice(self.weights.kernel(a, local));
            }
        }
        (dense, bias)
    }

    pub fn forward(&self, f: &FeatureMap) -> Result<FeatureMap> {
        let s = f.shape();
        let (out, ho, wo) = self.forward_batch(f.as_slice(), 1, s.channels, s.height, s.width, None)?;
        FeatureMap::new(TensorShape::new(self.c_out(), ho, wo)?, out)
    }

    /// Forward over a `(batch, c_in, h, w)` buffer. With a cache, the
    /// unfolded patches are kept for [`GroupedLayer::backward_batch`].
    pub fn forward_batch(
        &self,
        input: &[f64],
        batch: usize,
        channels: usize,
        h: usize,
        w: usize,
        cache: Option<&mut LayerCache>,
    ) -> Result<(Vec<f64>, usize, usize)> {
        if channels != self.c_in() || input.len() != batch * channels * h * w {
            return Err(shape_err(format!(
                "input ({batch}, {channels}, {h}, {w}) with {} values for a layer expecting {} channels",
                input.len(),
                self.c_in()
            )));
        }
        let (ho, wo) = self.output_hw(h, w)?;
        let k = self.k();
        let (bo, bi) = (self.c_out() / self.groups, self.c_in() / self.groups);
        let rows = bi * k * k;
        let ncols = batch * ho * wo;
        let hw_out = ho * wo;
        let mut out = vec![0.0; batch * self.c_out() * hw_out];
        let mut prod = vec![0.0; bo * ncols];

        let mut cols_store = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let mut cols = vec![0.0; rows * ncols];
            self.im2col(input, batch, h, w, ho, wo, g, &mut cols);
            let wg = &self.weights.as_slice()[g * bo * rows..(g + 1) * bo * rows];
            gemm(bo, rows, ncols, wg, Layout::Normal, &cols, Layout::Normal, 0.0, &mut prod);
            for o in 0..bo {
                let a = g * bo + o;
                let ch = self.scatter_out.get(a);
                let b = self.bias[a];
                for n in 0..batch {
                    let src = &prod[o * ncols + n * hw_out..o * ncols + (n + 1) * hw_out];
                    let dst = &mut out[(n * self.c_out() + ch) * hw_out..(n * self.c_out() + ch + 1) * hw_out];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s + b;
                    }
                }
            }
            cols_store.push(cols);
        }
        if let Some(cache) = cache {
            *cache = LayerCache { cols: cols_store, batch, h, w, ho, wo };
        }
        Ok((out, ho, wo))
    }

    #[allow(clippy::too_many_arguments)]
    fn im2col(&self, input: &[f64], batch: usize, h: usize, w: usize, ho: usize, wo: usize, g: usize, cols: &mut [f64]) {
        let k = self.k();
        let bi = self.c_in() / self.groups;
        let c_in = self.c_in();
        let ncols = batch * ho * wo;
        let pad = self.padding as isize;
        let stride = self.stride as isize;
        for ci in 0..bi {
            let ch = self.gather_in.get(g * bi + ci);
            for kh in 0..k {
                for kw in 0..k {
                    let row = (ci * k + kh) * k + kw;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for n in 0..batch {
                        let src = &input[(n * c_in + ch) * h * w..(n * c_in + ch + 1) * h * w];
                        let base = n * ho * wo;
                        for oh in 0..ho {
                            let ih = oh as isize * stride + kh as isize - pad;
                            let drow = &mut dst[base + oh * wo..base + (oh + 1) * wo];
                            if ih < 0 || ih >= h as isize {
                                drow.fill(0.0);
                                continue;
                            }
                            let srow = &src[ih as usize * w..(ih as usize + 1) * w];
                            for (ow, d) in drow.iter_mut().enumerate() {
                                let iw = ow as isize * stride + kw as isize - pad;
                                *d = if iw < 0 || iw >= w as isize { 0.0 } else { srow[iw as usize] };
                            }
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn col2im(&self, dcols: &[f64], batch: usize, h: usize, w: usize, ho: usize, wo: usize, g: usize, dx: &mut [f64]) {
        let k = self.k();
        let bi = self.c_in() / self.groups;
        let c_in = self.c_in();
        let ncols = batch * ho * wo;
        let pad = self.padding as isize;
        let stride = self.stride as isize;
        for ci in 0..bi {
            let ch = self.gather_in.get(g * bi + ci);
            for kh in 0..k {
                for kw in 0..k {
                    let row = (ci * k + kh) * k + kw;
                    let src = &dcols[row * ncols..(row + 1) * ncols];
                    for n in 0..batch {
                        let dst = &mut dx[(n * c_in + ch) * h * w..(n * c_in + ch + 1) * h * w];
                        let base = n * ho * wo;
                        for oh in 0..ho {
                            let ih = oh as isize * stride + kh as isize - pad;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let drow = &mut dst[ih as usize * w..(ih as usize + 1) * w];
                            let srow = &src[base + oh * wo..base + (oh + 1) * wo];
                            for (ow, s) in srow.iter().enumerate() {
                                let iw = ow as isize * stride + kw as isize - pad;
                                if iw >= 0 && iw < w as isize {
                                    drow[iw as usize] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Gradients of a loss with respect to weights, bias and (optionally)
    /// the input, given `d_out` shaped like the forward output.
    pub fn backward_batch(&self, cache: &LayerCache, d_out: &[f64], input_grad: bool) -> Result<LayerGrads> {
        let LayerCache { batch, h, w, ho, wo, .. } = *cache;
        let hw_out = ho * wo;
        if d_out.len() != batch * self.c_out() * hw_out || cache.cols.len() != self.groups {
            return Err(shape_err("gradient does not match the cached forward pass"));
        }
        let k = self.k();
        let (bo, bi) = (self.c_out() / self.groups, self.c_in() / self.groups);
        let rows = bi * k * k;
        let ncols = batch * hw_out;
        let mut d_weights = vec![0.0; self.weights.as_slice().len()];
        let mut d_bias = vec![0.0; self.c_out()];
        let mut d_input = input_grad.then(|| vec![0.0; batch * self.c_in() * h * w]);
        let mut dmat = vec![0.0; bo * ncols];
        let mut dcols = if input_grad { vec![0.0; rows * ncols] } else { Vec::new() };

        for g in 0..self.groups {
            for o in 0..bo {
                let a = g * bo + o;
                let ch = self.scatter_out.get(a);
                let mut bsum = 0.0;
                for n in 0..batch {
                    let src = &d_out[(n * self.c_out() + ch) * hw_out..(n * self.c_out() + ch + 1) * hw_out];
                    let dst = &mut dmat[o * ncols + n * hw_out..o * ncols + (n + 1) * hw_out];
                    dst.copy_from_slice(src);
                    bsum += src.iter().sum::<f64>();
                }
                d_bias[a] = bsum;
            }
            let cols = &cache.cols[g];
            let dwg = &mut d_weights[g * bo * rows..(g + 1) * bo * rows];
            gemm(bo, ncols, rows, &dmat, Layout::Normal, cols, Layout::Transposed, 0.0, dwg);
            if let Some(dx) = d_input.as_mut() {
                let wg = &self.weights.as_slice()[g * bo * rows..(g + 1) * bo * rows];
                gemm(rows, bo, ncols, wg, Layout::Transposed, &dmat, Layout::Normal, 0.0, &mut dcols);
                self.col2im(&dcols, batch, h, w, ho, wo, g, dx);
            }
        }
        Ok(LayerGrads { d_weights, d_bias, d_input })
    }
}

/// Unfolded input patches from a forward pass, one matrix per group.
#[derive(Debug, Clone, Default)]
pub struct LayerCache {
    cols: Vec<Vec<f64>>,
    batch: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub d_weights: Vec<f64>,
    pub d_bias: Vec<f64>,
    pub d_input: Option<Vec<f64>>,
}

/// Plain convolution of one feature map.
pub fn conv_forward(w: &WeightTensor, bias: &[f64], f: &FeatureMap, stride: usize, padding: usize) -> Result<FeatureMap> {
    GroupedLayer::dense(w.clone(), bias.to_vec(), stride, padding)?.forward(f)
}

/// Gather, grouped convolution, scatter.
pub fn groupconv_forward(layer: &GroupedLayer, f: &FeatureMap) -> Result<FeatureMap> {
    layer.forward(f)
}
