use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{global_avg_pool, global_avg_pool_backward, relu, relu_backward, ConvSpec, DenseSpec, ImageShape};
use crate::error::{Error, Result};

/// Rows per chunk for inference-only passes.
const INFERENCE_CHUNK: usize = 512;

#[derive(Debug, Clone)]
pub(crate) struct ResidualSpec {
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub shortcut: Option<ConvSpec>,
}

#[derive(Debug, Clone)]
pub(crate) enum Layer {
    Dense(DenseSpec),
    Conv(ConvSpec),
    Relu,
    GlobalAvgPool(ImageShape),
    Residual(ResidualSpec),
}

#[derive(Debug, Clone, Copy)]
enum Init {
    HeUniform,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, used for the classifier head.
    FanInUniform,
    Zero,
}

/// Appends layers while tracking the running activation shape and the flat
/// parameter layout.
pub(crate) struct NetworkBuilder {
    input: ImageShape,
    current: ImageShape,
    layers: Vec<Layer>,
    inits: Vec<(usize, usize, usize, Init)>,
    num_params: usize,
}

impl NetworkBuilder {
    pub fn new(input: ImageShape) -> Self {
        Self { input, current: input, layers: Vec::new(), inits: Vec::new(), num_params: 0 }
    }

    fn alloc(&mut self, len: usize, fan_in: usize, init: Init) -> usize {
        let off = self.num_params;
        self.inits.push((off, len, fan_in, init));
        self.num_params += len;
        off
    }

    fn make_dense(&mut self, inputs: usize, outputs: usize, init: Init) -> DenseSpec {
        let weight = self.alloc(inputs * outputs, inputs, init);
        let bias = self.alloc(outputs, inputs, Init::Zero);
        DenseSpec { inputs, outputs, weight, bias }
    }

    fn make_conv(
        &mut self,
        input: ImageShape,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> ConvSpec {
        let padding = kernel / 2;
        let fan_in = kernel * kernel * input.channels;
        let weight = self.alloc(fan_in * out_channels, fan_in, init);
        let bias = self.alloc(out_channels, fan_in, Init::Zero);
        ConvSpec { input, out_channels, kernel, stride, padding, weight, bias }
    }

    pub fn dense(&mut self, outputs: usize) -> &mut Self {
        let spec = self.make_dense(self.current.len(), outputs, Init::HeUniform);
        self.current = ImageShape::new(1, 1, outputs);
        self.layers.push(Layer::Dense(spec));
        self
    }

    pub fn relu(&mut self) -> &mut Self {
        self.layers.push(Layer::Relu);
        self
    }

    pub fn conv(&mut self, out_channels: usize, kernel: usize, stride: usize) -> &mut Self {
        let spec = self.make_conv(self.current, out_channels, kernel, stride, Init::HeUniform);
        self.current = spec.output();
        self.layers.push(Layer::Conv(spec));
        self
    }

    /// Basic residual block `relu(x + conv(relu(conv(x))))`. The second conv
    /// starts at zero so the block is the identity at initialization.
    pub fn residual(&mut self, out_channels: usize, stride: usize) -> &mut Self {
        let input = self.current;
        let conv1 = self.make_conv(input, out_channels, 3, stride, Init::HeUniform);
        let conv2 = self.make_conv(conv1.output(), out_channels, 3, 1, Init::Zero);
        let shortcut = (stride != 1 || input.channels != out_channels)
            .then(|| self.make_conv(input, out_channels, 1, stride, Init::HeUniform));
        self.current = conv2.output();
        self.layers.push(Layer::Residual(ResidualSpec { conv1, conv2, shortcut }));
        self
    }

    pub fn global_avg_pool(&mut self) -> &mut Self {
        self.layers.push(Layer::GlobalAvgPool(self.current));
        self.current = ImageShape::new(1, 1, self.current.channels);
        self
    }

    /// Finishes with a dense classifier head of `classes` outputs and draws the
    /// initial parameters from `seed`.
    pub fn finish(mut self, classes: usize, seed: u64) -> Network {
        let embedding_dim = self.current.len();
        let head = self.make_dense(embedding_dim, classes, Init::FanInUniform);
        let mut params = vec![0.0f32; self.num_params];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &(off, len, fan_in, init) in &self.inits {
            let bound = match init {
                Init::HeUniform => (6.0 / fan_in as f32).sqrt(),
                Init::FanInUniform => 1.0 / (fan_in as f32).sqrt(),
                Init::Zero => continue,
            };
            for p in &mut params[off..off + len] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Network { input: self.input, layers: self.layers, head, embedding_dim, params }
    }
}

/// Cached intermediates of one training forward pass.
pub struct Tape {
    caches: Vec<Cache>,
    embedding: Array2<f32>,
}

impl Tape {
    pub fn embedding(&self) -> &Array2<f32> {
        &self.embedding
    }
}

enum Cache {
    Dense(Array2<f32>),
    Conv(Array2<f32>),
    Relu(Array2<f32>),
    Pool,
    Residual(Box<ResidualCache>),
}

struct ResidualCache {
    cols1: Array2<f32>,
    hidden: Array2<f32>,
    cols2: Array2<f32>,
    shortcut_cols: Option<Array2<f32>>,
    out: Array2<f32>,
}

/// Gradients from one backward pass: flat parameter gradients aligned with
/// [`Network::params`], and optionally the gradient w.r.t. the input batch.
pub struct Backward {
    pub params: Vec<f32>,
    pub input: Option<Array2<f32>>,
}

/// A feed-forward classifier: a body producing the penultimate embedding and a
/// dense head producing logits. All parameters live in one flat vector.
#[derive(Debug, Clone)]
pub struct Network {
    input: ImageShape,
    layers: Vec<Layer>,
    head: DenseSpec,
    embedding_dim: usize,
    params: Vec<f32>,
}

impl Network {
    pub fn input_shape(&self) -> ImageShape {
        self.input
    }

    pub fn num_classes(&self) -> usize {
        self.head.outputs
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f32>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::CountMismatch { expected: self.params.len(), actual: params.len() });
        }
        self.params = params;
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<f32>) -> Result<()> {
        if x.ncols() != self.input.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} features ({})", self.input.len(), self.input),
                actual: format!("{} features", x.ncols()),
            });
        }
        Ok(())
    }

    fn body(&self, x: Array2<f32>, mut caches: Option<&mut Vec<Cache>>) -> Array2<f32> {
        let p = &self.params;
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Dense(d) => {
                    let y = d.forward(p, &h);
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(Cache::Dense(h));
                    }
                    y
                }
                Layer::Conv(cs) => {
                    let (y, cols) = cs.forward(p, &h);
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(Cache::Conv(cols));
                    }
                    y
                }
                Layer::Relu => {
                    let y = relu(h);
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(Cache::Relu(y.clone()));
                    }
                    y
                }
                Layer::GlobalAvgPool(shape) => {
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(Cache::Pool);
                    }
                    global_avg_pool(*shape, &h)
                }
                Layer::Residual(r) => {
                    let (a, cols1) = r.conv1.forward(p, &h);
                    let hidden = relu(a);
                    let (b, cols2) = r.conv2.forward(p, &hidden);
                    let (sc, shortcut_cols) = match &r.shortcut {
                        Some(s) => {
                            let (y, cols) = s.forward(p, &h);
                            (y, Some(cols))
                        }
                        None => (h, None),
                    };
                    let out = relu(b + sc);
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(Cache::Residual(Box::new(ResidualCache {
                            cols1,
                            hidden,
                            cols2,
                            shortcut_cols,
                            out: out.clone(),
                        })));
                    }
                    out
                }
            };
        }
        h
    }

    fn chunked(&self, x: ArrayView2<f32>, cols: usize, f: impl Fn(Array2<f32>) -> Array2<f32>) -> Result<Array2<f32>> {
        self.check_input(&x)?;
        let mut out = Array2::<f32>::zeros((x.nrows(), cols));
        let mut start = 0;
        while start < x.nrows() {
            let end = (start + INFERENCE_CHUNK).min(x.nrows());
            let chunk = x.slice(s![start..end, ..]).to_owned();
            out.slice_mut(s![start..end, ..]).assign(&f(chunk));
            start = end;
        }
        Ok(out)
    }

    /// Penultimate-layer activations, one row per input row.
    pub fn embed(&self, x: ArrayView2<f32>) -> Result<Array2<f32>> {
        self.chunked(x, self.embedding_dim, |c| self.body(c, None))
    }

    pub fn logits(&self, x: ArrayView2<f32>) -> Result<Array2<f32>> {
        self.chunked(x, self.num_classes(), |c| {
            let e = self.body(c, None);
            self.head.forward(&self.params, &e)
        })
    }

    /// Logits from precomputed embeddings.
    pub fn head_logits(&self, embedding: &Array2<f32>) -> Array2<f32> {
        self.head.forward(&self.params, embedding)
    }

    /// Training forward pass keeping everything needed by [`Network::backward`].
    pub fn forward_tape(&self, x: ArrayView2<f32>) -> Result<(Array2<f32>, Tape)> {
        self.check_input(&x)?;
        let input = x.as_standard_layout().into_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        let embedding = self.body(input, Some(&mut caches));
        let logits = self.head.forward(&self.params, &embedding);
        Ok((logits, Tape { caches, embedding }))
    }

    pub fn backward(&self, tape: &Tape, dlogits: &Array2<f32>, want_input: bool) -> Backward {
        let p = &self.params;
        let mut grads = vec![0.0f32; p.len()];
        let mut d = self.head.backward(p, &tape.embedding, dlogits, &mut grads, true).expect("head input gradient");
        for (i, (layer, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            let need = want_input || i > 0;
            d = match (layer, cache) {
                (Layer::Dense(spec), Cache::Dense(x)) => match spec.backward(p, x, &d, &mut grads, need) {
                    Some(dx) => dx,
                    None => break,
                },
                (Layer::Conv(spec), Cache::Conv(cols)) => match spec.backward(p, cols, &d, &mut grads, need) {
                    Some(dx) => dx,
                    None => break,
                },
                (Layer::Relu, Cache::Relu(out)) => relu_backward(out, &d),
                (Layer::GlobalAvgPool(shape), Cache::Pool) => global_avg_pool_backward(*shape, &d),
                (Layer::Residual(r), Cache::Residual(c)) => {
                    let dsum = relu_backward(&c.out, &d);
                    let dhidden =
                        r.conv2.backward(p, &c.cols2, &dsum, &mut grads, true).expect("residual hidden gradient");
                    let da = relu_backward(&c.hidden, &dhidden);
                    let dx_main = r.conv1.backward(p, &c.cols1, &da, &mut grads, need);
                    let dx_short = match (&r.shortcut, &c.shortcut_cols) {
                        (Some(s), Some(cols)) => s.backward(p, cols, &dsum, &mut grads, need),
                        _ => need.then(|| dsum.clone()),
                    };
                    match (dx_main, dx_short) {
                        (Some(a), Some(b)) => a + b,
                        _ => break,
                    }
                }
                _ => unreachable!("tape does not match network layers"),
            };
        }
        Backward { params: grads, input: want_input.then_some(d) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::loss::cross_entropy;
    use ndarray::Array2;
    use rand::Rng;

    fn random_input(rows: usize, cols: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.0..1.0))
    }

    fn loss_of(net: &Network, x: &Array2<f32>, y: &[usize]) -> f64 {
        cross_entropy(&net.logits(x.view()).unwrap(), y).0
    }

    /// Central differences on a sample of parameters and input coordinates.
    fn check_gradients(mut net: Network, seed: u64) {
        let x = random_input(3, net.input_shape().len(), seed);
        let y = [0usize, 1, 2];
        // perturb zero-initialized blocks so every path carries gradient
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for p in net.params_mut() {
            *p += rng.random_range(-0.05..0.05);
        }
        let (logits, tape) = net.forward_tape(x.view()).unwrap();
        let (_, dl) = cross_entropy(&logits, &y);
        let back = net.backward(&tape, &dl, true);
        let h = 3e-3f32;
        let n = net.num_params();
        let picks: Vec<usize> = (0..24).map(|i| (i * 7919 + 13) % n).collect();
        for &i in &picks {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fd = (loss_of(&plus, &x, &y) - loss_of(&minus, &x, &y)) / (2.0 * h as f64);
            let an = back.params[i] as f64;
            assert!((fd - an).abs() < 2e-3 + 2e-2 * an.abs(), "param {i}: fd {fd} vs analytic {an}");
        }
        let dx = back.input.unwrap();
        for j in [0, x.ncols() / 2, x.ncols() - 1] {
            let mut xp = x.clone();
            xp[[1, j]] += h;
            let mut xm = x.clone();
            xm[[1, j]] -= h;
            let fd = (loss_of(&net, &xp, &y) - loss_of(&net, &xm, &y)) / (2.0 * h as f64);
            let an = dx[[1, j]] as f64;
            assert!((fd - an).abs() < 2e-3 + 2e-2 * an.abs(), "input {j}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn mlp_gradients() {
        let mut b = NetworkBuilder::new(ImageShape::new(1, 1, 5));
        b.dense(8).relu().dense(6).relu();
        check_gradients(b.finish(3, 1), 10);
    }

    #[test]
    fn conv_gradients() {
        let mut b = NetworkBuilder::new(ImageShape::new(5, 5, 2));
        b.conv(4, 3, 1).relu().conv(3, 3, 2).relu().conv(3, 1, 1).global_avg_pool();
        check_gradients(b.finish(3, 2), 20);
    }

    #[test]
    fn residual_gradients() {
        let mut b = NetworkBuilder::new(ImageShape::new(4, 4, 2));
        b.conv(3, 3, 1).relu().residual(3, 1).residual(4, 2).global_avg_pool();
        check_gradients(b.finish(3, 3), 30);
    }

    #[test]
    fn conv_output_shapes() {
        let mut b = NetworkBuilder::new(ImageShape::new(32, 32, 3));
        b.conv(8, 3, 1).conv(8, 3, 2).conv(8, 3, 2).global_avg_pool();
        let net = b.finish(10, 0);
        assert_eq!(net.embedding_dim(), 8);
        let out = net.logits(random_input(2, 32 * 32 * 3, 0).view()).unwrap();
        assert_eq!(out.dim(), (2, 10));
    }

    #[test]
    fn wrong_width_is_rejected() {
        let mut b = NetworkBuilder::new(ImageShape::new(1, 1, 4));
        b.dense(3).relu();
        let net = b.finish(2, 0);
        assert!(matches!(net.logits(Array2::zeros((1, 5)).view()), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn chunked_inference_matches_single_pass() {
        let mut b = NetworkBuilder::new(ImageShape::new(1, 1, 4));
        b.dense(6).relu();
        let net = b.finish(3, 9);
        let x = random_input(INFERENCE_CHUNK + 37, 4, 4);
        let full = net.logits(x.view()).unwrap();
        let (taped, _) = net.forward_tape(x.view()).unwrap();
        assert_eq!(full, taped);
    }
}
