//! The reference fully-convolutional pixel classifier.
//!
//! conv3x3(1→h1) → ReLU → conv3x3(h1→h2) → ReLU → dropout
//! → conv3x3(h2→h3) → ReLU → dropout → conv1x1(h3→C) → softmax,
//! all stride 1 with zero "same" padding.
//!
//! Activations are channels-last. Every layer can be evaluated on a subset of
//! pixel positions: to get logits at a set `S` the last 3x3 layer needs
//! `S`, the one before it the 3x3 dilation of `S`, and so on. Training on
//! sparse point labels only pays for the receptive field of labeled pixels.
//!
//! Dropout keep decisions are a pure function of `(seed, layer, element)`, so
//! a sparse pass sees exactly the mask a dense pass would.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_model::{ImageSlice, Raster, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::seed::{self, mix64};

/// Dropout behavior of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Off,
    Stochastic(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerShape {
    fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    fn weight_len(&self) -> usize {
        self.fan_in() * self.out_channels
    }

    fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }
}

/// Channel widths of the three hidden layers, the class count and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub hidden: [usize; 3],
    pub classes: usize,
    pub dropout_rate: f64,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            hidden: [16, 32, 32],
            classes: NUM_CLASSES,
            dropout_rate: 0.5,
        }
    }
}

impl NetSpec {
    fn layers(&self) -> Vec<LayerShape> {
        let [a, b, c] = self.hidden;
        vec![
            LayerShape { kernel: 3, in_channels: 1, out_channels: a },
            LayerShape { kernel: 3, in_channels: a, out_channels: b },
            LayerShape { kernel: 3, in_channels: b, out_channels: c },
            LayerShape { kernel: 1, in_channels: c, out_channels: self.classes },
        ]
    }
}

/// Layers followed by dropout.
const DROPOUT_LAYERS: [usize; 2] = [1, 2];

/// Weights and biases of the reference net, stored flat.
///
/// Per layer the flat block is the `(k*k*cin) x cout` weight matrix in
/// row-major order (rows ordered `dy, dx, cin`) followed by `cout` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    layers: Vec<LayerShape>,
    offsets: Vec<usize>,
    values: Vec<f64>,
    dropout_rate: f64,
}

impl PredictorParams {
    /// He-normal kernels, zero biases.
    pub fn init(spec: &NetSpec, seed: u64) -> Result<Self> {
        if spec.classes < 2 || spec.hidden.contains(&0) {
            return Err(Error::invalid("net needs >= 2 classes and non-empty hidden layers"));
        }
        if !(0.0..1.0).contains(&spec.dropout_rate) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        let layers = spec.layers();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[seed::tag("init")]));
        let mut values = Vec::new();
        for l in &layers {
            let normal = Normal::new(0.0, (2.0 / l.fan_in() as f64).sqrt()).expect("positive std");
            values.extend((0..l.weight_len()).map(|_| normal.sample(&mut rng)));
            values.extend(std::iter::repeat_n(0.0, l.out_channels));
        }
        Self::from_parts(layers, values, spec.dropout_rate)
    }

    pub(crate) fn from_parts(layers: Vec<LayerShape>, values: Vec<f64>, dropout_rate: f64) -> Result<Self> {
        if layers.len() != 4 || layers[3].kernel != 1 || layers[..3].iter().any(|l| l.kernel != 3) {
            return Err(Error::invalid("expected three 3x3 layers followed by a 1x1 layer"));
        }
        if layers[0].in_channels != 1
            || layers.windows(2).any(|w| w[0].out_channels != w[1].in_channels)
        {
            return Err(Error::invalid("layer channel counts do not chain"));
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.param_len();
        }
        if values.len() != total {
            return Err(Error::invalid(format!(
                "expected {total} parameters, got {}",
                values.len()
            )));
        }
        Ok(PredictorParams {
            layers,
            offsets,
            values,
            dropout_rate,
        })
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.layers[3].out_channels
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn layer_weights(&self, l: usize) -> &[f64] {
        let o = self.offsets[l];
        &self.values[o..o + self.layers[l].weight_len()]
    }

    pub(crate) fn layer_bias(&self, l: usize) -> &[f64] {
        let o = self.offsets[l] + self.layers[l].weight_len();
        &self.values[o..o + self.layers[l].out_channels]
    }

    fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric("predictor weights contain NaN or Inf".into()))
        }
    }
}

/// Per-pixel class probabilities, pixel-major with classes innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || classes == 0 || data.len() != height * width * classes {
            return Err(Error::invalid("probability map shape mismatch"));
        }
        Ok(ProbMap {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.classes;
        &self.data[i..i + self.classes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.classes)
    }

    /// Most probable class per pixel; ties resolve to the lower class id.
    pub fn argmax(&self) -> Raster<u8> {
        let data = self
            .pixels()
            .map(|p| {
                let mut best = 0;
                for (c, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Raster::new(self.height, self.width, data).expect("shape checked at construction")
    }
}

/// Row-major `c = a · b (+ c)`, transposes expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gather `k x k` neighborhoods at `positions` into a `|P| x (k*k*cin)` matrix.
fn im2col(input: &[f64], h: usize, w: usize, cin: usize, k: usize, positions: &[u32], cols: &mut Vec<f64>) {
    let fan = k * k * cin;
    cols.clear();
    cols.resize(positions.len() * fan, 0.0);
    let half = (k / 2) as isize;
    for (row, &p) in cols.chunks_exact_mut(fan).zip(positions) {
        let (r, c) = ((p as usize / w) as isize, (p as usize % w) as isize);
        let mut o = 0;
        for dy in -half..=half {
            for dx in -half..=half {
                let (rr, cc) = (r + dy, c + dx);
                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                    let src = (rr as usize * w + cc as usize) * cin;
                    row[o..o + cin].copy_from_slice(&input[src..src + cin]);
                }
                o += cin;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the input.
fn col2im(gcols: &[f64], h: usize, w: usize, cin: usize, k: usize, positions: &[u32], ginput: &mut [f64]) {
    let fan = k * k * cin;
    let half = (k / 2) as isize;
    for (row, &p) in gcols.chunks_exact(fan).zip(positions) {
        let (r, c) = ((p as usize / w) as isize, (p as usize % w) as isize);
        let mut o = 0;
        for dy in -half..=half {
            for dx in -half..=half {
                let (rr, cc) = (r + dy, c + dx);
                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                    let dst = (rr as usize * w + cc as usize) * cin;
                    for (g, v) in ginput[dst..dst + cin].iter_mut().zip(&row[o..o + cin]) {
                        *g += v;
                    }
                }
                o += cin;
            }
        }
    }
}

/// Sorted 3x3 dilation of a sorted position set.
fn dilate(positions: &[u32], h: usize, w: usize) -> Vec<u32> {
    let mut mark = vec![false; h * w];
    for &p in positions {
        let (r, c) = (p as usize / w, p as usize % w);
        for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
            for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                mark[rr * w + cc] = true;
            }
        }
    }
    mark.iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i as u32)
        .collect()
}

/// Inverted-dropout multiplier for one activation element.
#[inline]
fn keep_scale(layer_key: u64, element: u64, threshold: u64, scale: f64) -> f64 {
    let z = mix64(layer_key.wrapping_add(element.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    if z >= threshold {
        scale
    } else {
        0.0
    }
}

struct LayerCache {
    positions: Vec<u32>,
    cols: Vec<f64>,
    pre: Vec<f64>,
    scale: Option<Vec<f64>>,
}

/// Everything a backward pass needs from a forward pass.
pub(crate) struct ForwardPass {
    height: usize,
    width: usize,
    caches: Vec<LayerCache>,
    /// Softmax output at the final positions, `|S| x C`.
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
}

fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (z, p) in logits.chunks_exact(classes).zip(out.chunks_exact_mut(classes)) {
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (pi, &zi) in p.iter_mut().zip(z) {
            *pi = (zi - max).exp();
            sum += *pi;
        }
        for pi in p.iter_mut() {
            *pi /= sum;
        }
    }
    out
}

impl PredictorParams {
    fn dropout_key(&self, mode: DropoutMode, layer: usize) -> Option<(u64, u64, f64)> {
        match mode {
            DropoutMode::Stochastic(s) if DROPOUT_LAYERS.contains(&layer) => {
                let p = self.dropout_rate;
                let threshold = (p * 18_446_744_073_709_551_616.0) as u64;
                Some((seed::derive(s, &[layer as u64]), threshold, 1.0 / (1.0 - p)))
            }
            _ => None,
        }
    }

    /// Evaluate layer `l` at `positions`, reading the dense activation `input`.
    fn layer_forward(
        &self,
        l: usize,
        input: &[f64],
        h: usize,
        w: usize,
        positions: Vec<u32>,
        mode: DropoutMode,
    ) -> LayerCache {
        let shape = self.layers[l];
        let mut cols = Vec::new();
        im2col(input, h, w, shape.in_channels, shape.kernel, &positions, &mut cols);
        let n = positions.len();
        let cout = shape.out_channels;
        let mut pre = vec![0.0; n * cout];
        for row in pre.chunks_exact_mut(cout) {
            row.copy_from_slice(self.layer_bias(l));
        }
        gemm(n, shape.fan_in(), cout, &cols, false, self.layer_weights(l), false, &mut pre, true);
        let scale = self.dropout_key(mode, l).map(|(key, threshold, s)| {
            let mut v = Vec::with_capacity(n * cout);
            for &p in &positions {
                let base = p as u64 * cout as u64;
                v.extend((0..cout as u64).map(|ch| keep_scale(key, base + ch, threshold, s)));
            }
            v
        });
        LayerCache {
            positions,
            cols,
            pre,
            scale,
        }
    }

    /// Post-activation values of a hidden layer scattered into a dense buffer.
    fn activate_dense(cache: &LayerCache, h: usize, w: usize, cout: usize) -> Vec<f64> {
        let mut dense = vec![0.0; h * w * cout];
        for (i, &p) in cache.positions.iter().enumerate() {
            let dst = &mut dense[p as usize * cout..(p as usize + 1) * cout];
            let src = &cache.pre[i * cout..(i + 1) * cout];
            match &cache.scale {
                Some(s) => {
                    for ((d, &z), &k) in dst.iter_mut().zip(src).zip(&s[i * cout..(i + 1) * cout]) {
                        *d = z.max(0.0) * k;
                    }
                }
                None => {
                    for (d, &z) in dst.iter_mut().zip(src) {
                        *d = z.max(0.0);
                    }
                }
            }
        }
        dense
    }

    /// Forward pass producing logits at `targets` (all pixels when `None`).
    pub(crate) fn forward_pass(
        &self,
        image: &ImageSlice,
        mode: DropoutMode,
        targets: Option<&[u32]>,
    ) -> Result<ForwardPass> {
        self.check_finite()?;
        let (h, w) = image.shape();
        let last: Vec<u32> = match targets {
            Some(t) => t.to_vec(),
            None => (0..(h * w) as u32).collect(),
        };
        let pos1 = if targets.is_some() { dilate(&last, h, w) } else { last.clone() };
        let pos0 = if targets.is_some() { dilate(&pos1, h, w) } else { last.clone() };
        let plan = [pos0, pos1, last.clone(), last];

        let mut caches: Vec<LayerCache> = Vec::with_capacity(4);
        let mut input: Vec<f64> = image.pixels.as_slice().to_vec();
        for (l, positions) in plan.into_iter().enumerate() {
            let cache = self.layer_forward(l, &input, h, w, positions, mode);
            if l < 3 {
                input = Self::activate_dense(&cache, h, w, self.layers[l].out_channels);
            }
            caches.push(cache);
        }
        let logits = caches[3].pre.clone();
        let probs = softmax_rows(&logits, self.num_classes());
        Ok(ForwardPass {
            height: h,
            width: w,
            caches,
            probs,
            logits,
        })
    }

    /// Gradient of the loss w.r.t. every parameter, given its gradient w.r.t.
    /// the logits at the pass's final positions.
    pub(crate) fn backward(&self, pass: &ForwardPass, dlogits: &[f64]) -> Vec<f64> {
        let (h, w) = (pass.height, pass.width);
        let mut grads = vec![0.0; self.values.len()];
        let mut g = dlogits.to_vec();
        for l in (0..4).rev() {
            let shape = self.layers[l];
            let cache = &pass.caches[l];
            let n = cache.positions.len();
            let cout = shape.out_channels;
            if l < 3 {
                // through dropout and ReLU
                for (i, gi) in g.iter_mut().enumerate() {
                    let mut d = if cache.pre[i] > 0.0 { *gi } else { 0.0 };
                    if let Some(s) = &cache.scale {
                        d *= s[i];
                    }
                    *gi = d;
                }
            }
            let o = self.offsets[l];
            let (gw, gb) = grads[o..o + shape.param_len()].split_at_mut(shape.weight_len());
            gemm(shape.fan_in(), n, cout, &cache.cols, true, &g, false, gw, false);
            for row in g.chunks_exact(cout) {
                for (b, v) in gb.iter_mut().zip(row) {
                    *b += v;
                }
            }
            if l == 0 {
                break;
            }
            let mut gcols = vec![0.0; n * shape.fan_in()];
            gemm(n, cout, shape.fan_in(), &g, false, self.layer_weights(l), true, &mut gcols, false);
            let cin = shape.in_channels;
            let mut ginput = vec![0.0; h * w * cin];
            col2im(&gcols, h, w, cin, shape.kernel, &cache.positions, &mut ginput);
            let prev = &pass.caches[l - 1].positions;
            g = Vec::with_capacity(prev.len() * cin);
            for &p in prev {
                g.extend_from_slice(&ginput[p as usize * cin..(p as usize + 1) * cin]);
            }
        }
        grads
    }

    /// Dense forward pass returning the full probability map.
    pub fn forward(&self, image: &ImageSlice, mode: DropoutMode) -> Result<ProbMap> {
        let pass = self.forward_pass(image, mode, None)?;
        ProbMap::new(image.height(), image.width(), self.num_classes(), pass.probs)
    }

    /// `n` MC-dropout samples. Layers before the first dropout are shared
    /// across samples; sample `i` equals `forward(Stochastic(derive(seed, i)))`.
    pub fn mc_forward(&self, image: &ImageSlice, n: usize, seed_base: u64) -> Result<Vec<ProbMap>> {
        self.check_finite()?;
        let (h, w) = image.shape();
        let all: Vec<u32> = (0..(h * w) as u32).collect();
        let c0 = self.layer_forward(0, image.pixels.as_slice(), h, w, all.clone(), DropoutMode::Off);
        let a0 = Self::activate_dense(&c0, h, w, self.layers[0].out_channels);
        drop(c0);
        let c1 = self.layer_forward(1, &a0, h, w, all.clone(), DropoutMode::Off);
        drop(a0);
        let cout1 = self.layers[1].out_channels;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let mode = DropoutMode::Stochastic(mc_sample_seed(seed_base, i));
            let mut c1s = LayerCache {
                positions: all.clone(),
                cols: Vec::new(),
                pre: c1.pre.clone(),
                scale: None,
            };
            if let Some((key, threshold, s)) = self.dropout_key(mode, 1) {
                c1s.scale = Some(
                    (0..(h * w * cout1) as u64)
                        .map(|e| keep_scale(key, e, threshold, s))
                        .collect(),
                );
            }
            let a1 = Self::activate_dense(&c1s, h, w, cout1);
            let c2 = self.layer_forward(2, &a1, h, w, all.clone(), mode);
            let a2 = Self::activate_dense(&c2, h, w, self.layers[2].out_channels);
            let c3 = self.layer_forward(3, &a2, h, w, all.clone(), mode);
            let probs = softmax_rows(&c3.pre, self.num_classes());
            samples.push(ProbMap::new(h, w, self.num_classes(), probs)?);
        }
        Ok(samples)
    }
}

/// Dropout seed of MC sample `i`.
pub fn mc_sample_seed(base: u64, i: usize) -> u64 {
    seed::derive(base, &[seed::tag("mc"), i as u64])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> ImageSlice {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        ImageSlice::new("img", "scan", 0, Raster::from_fn(h, w, |_, _| n.sample(&mut rng)))
    }

    fn small() -> NetSpec {
        NetSpec { hidden: [3, 4, 4], classes: 2, dropout_rate: 0.5 }
    }

    #[test]
    fn output_is_a_distribution_with_input_shape() {
        let p = PredictorParams::init(&NetSpec::default(), 1).unwrap();
        for (h, w) in [(1, 1), (5, 9), (16, 16)] {
            let out = p.forward(&image(h, w, 2), DropoutMode::Off).unwrap();
            assert_eq!((out.height(), out.width(), out.classes()), (h, w, 2));
            for px in out.pixels() {
                assert!(px.iter().all(|&v| v >= 0.0));
                assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_final_layer_gives_uniform_output() {
        let mut p = PredictorParams::init(&NetSpec::default(), 3).unwrap();
        let o = p.offsets[3];
        let len = p.layers[3].param_len();
        p.values[o..o + len].iter_mut().for_each(|v| *v = 0.0);
        let out = p.forward(&image(6, 6, 4), DropoutMode::Stochastic(5)).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn stochastic_mode_is_seeded() {
        let p = PredictorParams::init(&NetSpec::default(), 3).unwrap();
        let img = image(8, 8, 1);
        let a = p.forward(&img, DropoutMode::Stochastic(9)).unwrap();
        let b = p.forward(&img, DropoutMode::Stochastic(9)).unwrap();
        let c = p.forward(&img, DropoutMode::Stochastic(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_dropout_matches_off() {
        let p = PredictorParams::init(&NetSpec::default(), 3).unwrap().with_dropout(0.0);
        let img = image(8, 8, 1);
        assert_eq!(
            p.forward(&img, DropoutMode::Off).unwrap(),
            p.forward(&img, DropoutMode::Stochastic(4)).unwrap()
        );
    }

    #[test]
    fn non_finite_weights_are_rejected() {
        let mut p = PredictorParams::init(&small(), 0).unwrap();
        p.values_mut()[0] = f64::NAN;
        assert!(matches!(p.forward(&image(3, 3, 0), DropoutMode::Off), Err(Error::Numeric(_))));
    }

    #[test]
    fn sparse_pass_matches_dense_pass() {
        let p = PredictorParams::init(&NetSpec::default(), 11).unwrap();
        let img = image(12, 10, 5);
        let mode = DropoutMode::Stochastic(77);
        let dense = p.forward_pass(&img, mode, None).unwrap();
        let targets: Vec<u32> = vec![0, 13, 57, 119];
        let sparse = p.forward_pass(&img, mode, Some(&targets)).unwrap();
        for (i, &t) in targets.iter().enumerate() {
            for c in 0..2 {
                let d = dense.probs[t as usize * 2 + c];
                assert!((d - sparse.probs[i * 2 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mc_forward_matches_independent_stochastic_passes() {
        let p = PredictorParams::init(&NetSpec::default(), 2).unwrap();
        let img = image(7, 9, 3);
        let samples = p.mc_forward(&img, 3, 42).unwrap();
        for (i, s) in samples.iter().enumerate() {
            let direct = p.forward(&img, DropoutMode::Stochastic(mc_sample_seed(42, i))).unwrap();
            for (a, b) in s.as_slice().iter().zip(direct.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_keep_rate_matches_p() {
        let threshold = (0.3 * 18_446_744_073_709_551_616.0) as u64;
        let kept = (0..100_000u64).filter(|&e| keep_scale(123, e, threshold, 1.0) > 0.0).count();
        let rate = kept as f64 / 100_000.0;
        assert!((rate - 0.7).abs() < 0.01, "keep rate {rate}");
    }

    #[test]
    fn dilation_of_corner() {
        assert_eq!(dilate(&[0], 3, 3), vec![0, 1, 3, 4]);
        assert_eq!(dilate(&[4], 3, 3), (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn dropout_expectation_matches_off_mode() {
        // Large biases on the last hidden layer keep its ReLU in the linear
        // regime, so the log-odds are linear in both dropout masks and their
        // expectation over seeds must equal the deterministic log-odds.
        let mut p = PredictorParams::init(&NetSpec::default(), 4).unwrap();
        let o = p.offsets[2] + p.layers[2].weight_len();
        for b in &mut p.values[o..o + p.layers[2].out_channels] {
            *b = 50.0;
        }
        let o = p.offsets[3];
        for w in &mut p.values[o..o + p.layers[3].weight_len()] {
            *w *= 0.02;
        }
        let img = image(6, 6, 8);
        let log_odds = |m: &ProbMap, r: usize, c: usize| (m.pixel(r, c)[1] / m.pixel(r, c)[0]).ln();
        let off = p.forward(&img, DropoutMode::Off).unwrap();
        let n = 2000;
        let samples = p.mc_forward(&img, n, 77).unwrap();
        for &(r, c) in &[(0, 0), (2, 3), (5, 5), (3, 1)] {
            let xs: Vec<f64> = samples.iter().map(|s| log_odds(s, r, c)).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            let target = log_odds(&off, r, c);
            assert!(se > 0.0);
            assert!((mean - target).abs() < 3.0 * se, "({r},{c}): {mean} vs {target}, se {se}");
        }
    }
}
