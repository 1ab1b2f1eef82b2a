use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layer::{ConvGeometry, GroupedLayer, LayerCache};
use crate::error::{shape_err, Result};
use crate::regularizer::LayerSpec;
use crate::tensor::{Permutation, TensorShape, WeightTensor};

/// Conv/ReLU stack, global average pool, linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroNet {
    input: TensorShape,
    convs: Vec<GroupedLayer>,
    fc_weight: Vec<f64>,
    fc_bias: Vec<f64>,
    n_classes: usize,
}

/// Parameter gradients, in the layout of the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub convs: Vec<(Vec<f64>, Vec<f64>)>,
    pub fc_weight: Vec<f64>,
    pub fc_bias: Vec<f64>,
}

impl Gradients {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in &self.convs {
            out.push(w);
            out.push(b);
        }
        out.push(&self.fc_weight);
        out.push(&self.fc_bias);
        out
    }
}

/// Output of one forward/backward pass over a batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: f64,
    pub correct: usize,
    pub grads: Gradients,
}

pub const ACCEPTANCE_ARCH: [ConvGeometry; 3] = [
    ConvGeometry { c_in: 3, c_out: 16, k: 3, stride: 1, padding: 1 },
    ConvGeometry { c_in: 16, c_out: 32, k: 3, stride: 2, padding: 1 },
    ConvGeometry { c_in: 32, c_out: 64, k: 3, stride: 2, padding: 1 },
];

fn he_normal(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn linear_init(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl MicroNet {
    pub fn new(input: TensorShape, arch: &[ConvGeometry], n_classes: usize, seed: u64) -> Result<Self> {
        let mut prev = input.channels;
        let mut convs = Vec::with_capacity(arch.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in arch {
            if g.c_in != prev {
                return Err(shape_err(format!("layer expects {} channels, previous produces {prev}", g.c_in)));
            }
            let w = he_normal(&mut rng, g.c_out * g.c_in * g.k * g.k, g.c_in * g.k * g.k);
            convs.push(GroupedLayer::dense(WeightTensor::new(g.c_out, g.c_in, g.k, w)?, vec![0.0; g.c_out], g.stride, g.padding)?);
            prev = g.c_out;
        }
        let fc_weight = linear_init(&mut rng, n_classes * prev, prev);
        let net = Self { input, convs, fc_weight, fc_bias: vec![0.0; n_classes], n_classes };
        net.spatial_shapes()?;
        Ok(net)
    }

    /// The fixed 3→16→32→64 network on 3×16×16 inputs with 10 classes.
    pub fn acceptance(seed: u64) -> Self {
        Self::new(TensorShape { channels: 3, height: 16, width: 16 }, &ACCEPTANCE_ARCH, 10, seed)
            .expect("static architecture is consistent")
    }

    pub fn from_parts(input: TensorShape, convs: Vec<GroupedLayer>, fc_weight: Vec<f64>, fc_bias: Vec<f64>) -> Result<Self> {
        let n_classes = fc_bias.len();
        let feat = convs.last().map_or(input.channels, GroupedLayer::c_out);
        if fc_weight.len() != n_classes * feat {
            return Err(shape_err(format!("classifier has {} weights, expected {}", fc_weight.len(), n_classes * feat)));
        }
        let mut prev = input.channels;
        for l in &convs {
            if l.c_in() != prev {
                return Err(shape_err(format!("layer expects {} channels, previous produces {prev}", l.c_in())));
            }
            prev = l.c_out();
        }
        let net = Self { input, convs, fc_weight, fc_bias, n_classes };
        net.spatial_shapes()?;
        Ok(net)
    }

    pub fn input_shape(&self) -> TensorShape {
        self.input
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn convs(&self) -> &[GroupedLayer] {
        &self.convs
    }

    pub fn convs_mut(&mut self) -> &mut [GroupedLayer] {
        &mut self.convs
    }

    pub fn fc_weight(&self) -> &[f64] {
        &self.fc_weight
    }

    pub fn fc_bias(&self) -> &[f64] {
        &self.fc_bias
    }

    pub fn feature_dim(&self) -> usize {
        self.convs.last().map_or(self.input.channels, GroupedLayer::c_out)
    }

    /// Input shape seen by each conv layer.
    pub fn spatial_shapes(&self) -> Result<Vec<TensorShape>> {
        let (mut h, mut w) = (self.input.height, self.input.width);
        let mut out = Vec::with_capacity(self.convs.len());
        for l in &self.convs {
            out.push(TensorShape::new(l.c_in(), h, w)?);
            (h, w) = l.output_hw(h, w)?;
        }
        Ok(out)
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let shapes = self.spatial_shapes().expect("validated at construction");
        self.convs
            .iter()
            .zip(shapes)
            .enumerate()
            .map(|(i, (l, s))| LayerSpec {
                name: format!("conv{i}"),
                c_in: l.c_in(),
                c_out: l.c_out(),
                k: l.k(),
                stride: l.stride(),
                in_shape: s,
                shortcut: false,
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(GroupedLayer::param_count).sum::<usize>() + self.fc_weight.len() + self.fc_bias.len()
    }

    /// Parameter buffers in the order used by [`Gradients::slices`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.convs {
            let (w, b) = l.params_mut();
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.fc_weight);
        out.push(&mut self.fc_bias);
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.convs {
            out.push(l.weights().as_slice());
            out.push(l.bias());
        }
        out.push(&self.fc_weight);
        out.push(&self.fc_bias);
        out
    }

    /// Redraws every parameter from `seed`, keeping groups and shuffles.
    pub fn reinitialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut self.convs {
            let fan_in = l.weights().c_in() * l.k() * l.k();
            let n = l.weights().as_slice().len();
            l.weights_mut().as_mut_slice().copy_from_slice(&he_normal(&mut rng, n, fan_in));
            l.bias_mut().fill(0.0);
        }
        let feat = self.feature_dim();
        self.fc_weight = linear_init(&mut rng, self.n_classes * feat, feat);
        self.fc_bias.fill(0.0);
    }

    fn check_batch(&self, images: &[f64], batch: usize) -> Result<()> {
        if images.len() != batch * self.input.numel() {
            return Err(shape_err(format!("{} values for a batch of {batch} {:?} images", images.len(), self.input)));
        }
        Ok(())
    }

    fn features(&self, images: &[f64], batch: usize, mut caches: Option<&mut Vec<(LayerCache, Vec<f64>)>>) -> Result<(Vec<f64>, usize)> {
        let mut x = images.to_vec();
        let (mut c, mut h, mut w) = (self.input.channels, self.input.height, self.input.width);
        for l in &self.convs {
            let mut cache = LayerCache::default();
            let (mut y, ho, wo) = l.forward_batch(&x, batch, c, h, w, caches.is_some().then_some(&mut cache))?;
            for v in &mut y {
                *v = v.max(0.0);
            }
            if let Some(cs) = caches.as_mut() {
                cs.push((cache, y.clone()));
            }
            x = y;
            (c, h, w) = (l.c_out(), ho, wo);
        }
        let hw = h * w;
        let feats = (0..batch * c).map(|idx| x[idx * hw..(idx + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        Ok((feats, hw))
    }

    fn logits_from(&self, feats: &[f64], batch: usize) -> Vec<f64> {
        let d = self.feature_dim();
        let mut logits = vec![0.0; batch * self.n_classes];
        for n in 0..batch {
            let f = &feats[n * d..(n + 1) * d];
            for k in 0..self.n_classes {
                let wrow = &self.fc_weight[k * d..(k + 1) * d];
                logits[n * self.n_classes + k] = self.fc_bias[k] + wrow.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        logits
    }

    /// Sign pattern of every ReLU input; identifies the linear piece the
    /// network is evaluated on.
    pub fn relu_pattern(&self, images: &[f64], batch: usize) -> Result<Vec<bool>> {
        self.check_batch(images, batch)?;
        let mut x = images.to_vec();
        let (mut c, mut h, mut w) = (self.input.channels, self.input.height, self.input.width);
        let mut pattern = Vec::new();
        for l in &self.convs {
            let (mut y, ho, wo) = l.forward_batch(&x, batch, c, h, w, None)?;
            pattern.extend(y.iter().map(|&v| v > 0.0));
            for v in &mut y {
                *v = v.max(0.0);
            }
            x = y;
            (c, h, w) = (l.c_out(), ho, wo);
        }
        Ok(pattern)
    }

    /// Class scores for a batch of images.
    pub fn logits(&self, images: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check_batch(images, batch)?;
        let (feats, _) = self.features(images, batch, None)?;
        Ok(self.logits_from(&feats, batch))
    }

    pub fn predict(&self, images: &[f64], batch: usize) -> Result<Vec<usize>> {
        let logits = self.logits(images, batch)?;
        Ok(logits.chunks(self.n_classes).map(argmax).collect())
    }

    /// Mean softmax cross-entropy over the batch and its exact gradient.
    pub fn loss_and_grad(&self, images: &[f64], labels: &[usize], batch: usize) -> Result<BatchResult> {
        self.check_batch(images, batch)?;
        if labels.len() != batch || labels.iter().any(|&l| l >= self.n_classes) {
            return Err(shape_err("labels do not match the batch"));
        }
        let mut caches = Vec::with_capacity(self.convs.len());
        let (feats, hw) = self.features(images, batch, Some(&mut caches))?;
        let logits = self.logits_from(&feats, batch);
        let nc = self.n_classes;
        let d = self.feature_dim();

        let mut loss = 0.0;
        let mut correct = 0;
        let mut dlogits = vec![0.0; batch * nc];
        for n in 0..batch {
            let row = &logits[n * nc..(n + 1) * nc];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            loss += z.ln() + m - row[labels[n]];
            if argmax(row) == labels[n] {
                correct += 1;
            }
            for k in 0..nc {
                let p = (row[k] - m).exp() / z;
                dlogits[n * nc + k] = (p - if k == labels[n] { 1.0 } else { 0.0 }) / batch as f64;
            }
        }
        loss /= batch as f64;

        let mut fc_weight = vec![0.0; nc * d];
        let mut fc_bias = vec![0.0; nc];
        let mut dfeat = vec![0.0; batch * d];
        for n in 0..batch {
            let f = &feats[n * d..(n + 1) * d];
            for k in 0..nc {
                let g = dlogits[n * nc + k];
                fc_bias[k] += g;
                for (dw, fv) in fc_weight[k * d..(k + 1) * d].iter_mut().zip(f) {
                    *dw += g * fv;
                }
                for (df, wv) in dfeat[n * d..(n + 1) * d].iter_mut().zip(&self.fc_weight[k * d..(k + 1) * d]) {
                    *df += g * wv;
                }
            }
        }

        // Through the average pool.
        let mut dact: Vec<f64> = dfeat.iter().flat_map(|&g| std::iter::repeat_n(g / hw as f64, hw)).collect();
        let mut conv_grads = vec![(Vec::new(), Vec::new()); self.convs.len()];
        for (idx, l) in self.convs.iter().enumerate().rev() {
            let (cache, act) = &caches[idx];
            for (g, &a) in dact.iter_mut().zip(act) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
            let grads = l.backward_batch(cache, &dact, idx > 0)?;
            conv_grads[idx] = (grads.d_weights, grads.d_bias);
            if let Some(dx) = grads.d_input {
                dact = dx;
            }
        }
        Ok(BatchResult { loss, correct, grads: Gradients { convs: conv_grads, fc_weight, fc_bias } })
    }

    /// Folds each layer's output shuffle into the next layer's input shuffle
    /// (and the last one into the classifier columns), so only one channel
    /// reindexing remains per layer boundary.
    pub fn fuse_shuffles(&self) -> Result<MicroNet> {
        let mut convs = self.convs.clone();
        for i in 0..convs.len() {
            let scatter = convs[i].scatter_out().clone();
            if scatter.is_identity() {
                continue;
            }
            let inv = scatter.inverse();
            if i + 1 < convs.len() {
                // Next layer reads channel gather[b], which grouped output
                // inv[gather[b]] produced.
                let gather = inv.compose(convs[i + 1].gather_in())?;
                let next_scatter = convs[i + 1].scatter_out().clone();
                convs[i + 1].set_shuffles(gather, next_scatter)?;
            }
            let gather = convs[i].gather_in().clone();
            convs[i].set_shuffles(gather, Permutation::identity(scatter.len()))?;
            if i + 1 == convs.len() {
                let d = scatter.len();
                let mut fc = vec![0.0; self.fc_weight.len()];
                for k in 0..self.n_classes {
                    for a in 0..d {
                        fc[k * d + a] = self.fc_weight[k * d + scatter.get(a)];
                    }
                }
                return MicroNet::from_parts(self.input, convs, fc, self.fc_bias.clone());
            }
        }
        MicroNet::from_parts(self.input, convs, self.fc_weight.clone(), self.fc_bias.clone())
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
