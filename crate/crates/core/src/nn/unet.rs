//! Four-level encoder/decoder backbone with a per-pixel head.
//!
//! Contracting block `l`: two 3x3 convolutions (ReLU) of width
//! `base * 2^l`, then 2x2 max pooling. Expansive block: a stride-2 3x3
//! transposed convolution (ReLU) back to the skip's resolution and width,
//! channel concatenation with the skip, then a 3x3 convolution (ReLU). A
//! 1x1 convolution maps to `n_out` channels followed by softmax across
//! channels, or a sigmoid when `n_out == 1`. All convolutions zero-pad so
//! the output matches the input size; inputs whose sides are not multiples
//! of 16 are zero-padded bottom/right and the output is cropped back.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::maps::{HeadActivation, ScoreMaps};
use super::ops;
use super::real::{gemm, Mat, Real};
use crate::error::{Error, Result};
use crate::types::ImagePatch;

pub const DEPTH: usize = 4;

/// Initial bias of every ReLU layer. A small positive value keeps units
/// active early on, when proportion gradients are uniform over the image and
/// would otherwise switch whole channels off.
const RELU_BIAS_INIT: f64 = 0.1;
const ALIGN: usize = 1 << DEPTH;

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub n_out: usize,
    pub base_filters: usize,
    pub depth: usize,
    pub head_activation: HeadActivation,
}

impl BackboneConfig {
    /// Sigmoid head for a single output channel, softmax otherwise.
    pub fn new(in_channels: usize, n_out: usize, base_filters: usize) -> Self {
        let head_activation = if n_out == 1 {
            HeadActivation::Sigmoid
        } else {
            HeadActivation::SoftmaxOverClasses
        };
        Self {
            in_channels,
            n_out,
            base_filters,
            depth: DEPTH,
            head_activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::invalid("in_channels must be positive"));
        }
        if self.n_out == 0 {
            return Err(Error::invalid("n_out must be at least 1"));
        }
        if self.base_filters < 4 {
            return Err(Error::invalid(format!("base_filters {} < 4", self.base_filters)));
        }
        if self.depth != DEPTH {
            return Err(Error::invalid(format!("depth is fixed at {DEPTH}, got {}", self.depth)));
        }
        let expected = if self.n_out == 1 {
            HeadActivation::Sigmoid
        } else {
            HeadActivation::SoftmaxOverClasses
        };
        if self.head_activation != expected {
            return Err(Error::invalid(format!(
                "{:?} head is degenerate for n_out = {}",
                self.head_activation, self.n_out
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_filters << level
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Weight is `cout x k` with `k = cin*9` for 3x3 convolutions and `k = cin`
/// for the head. Transposed convolutions store `cout*9 x cin`.
#[derive(Clone, Copy, Debug)]
struct Layer {
    cin: usize,
    cout: usize,
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    down: Vec<(Layer, Layer)>,
    up: Vec<(Layer, Layer)>,
    head: Layer,
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl Layout {
    fn new(cfg: &BackboneConfig) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorSpec { name, shape, offset });
            offset
        };
        let mut layer = |name: &str, cin: usize, cout: usize, wshape: Vec<usize>| Layer {
            cin,
            cout,
            w: add(format!("{name}.weight"), wshape),
            b: add(format!("{name}.bias"), vec![cout]),
        };
        let mut down = Vec::new();
        let mut cin = cfg.in_channels;
        for l in 0..DEPTH {
            let w = cfg.width(l);
            let a = layer(&format!("down{l}.conv_a"), cin, w, vec![w, cin, 3, 3]);
            let b = layer(&format!("down{l}.conv_b"), w, w, vec![w, w, 3, 3]);
            down.push((a, b));
            cin = w;
        }
        let mut up = Vec::new();
        for u in 0..DEPTH {
            let d = DEPTH - 1 - u;
            let w = cfg.width(d);
            let t = layer(&format!("up{u}.tconv"), cin, w, vec![w, 3, 3, cin]);
            let c = layer(&format!("up{u}.conv"), 2 * w, w, vec![w, 2 * w, 3, 3]);
            up.push((t, c));
            cin = w;
        }
        let head = layer("head", cin, cfg.n_out, vec![cfg.n_out, cin]);
        Self {
            down,
            up,
            head,
            tensors,
            total,
        }
    }
}

/// A network input converted to the model's precision and padded to the
/// alignment the four pooling stages need.
#[derive(Clone, Debug)]
pub struct Input<T> {
    pub rows: usize,
    pub cols: usize,
    prows: usize,
    pcols: usize,
    data: Vec<T>,
}

impl<T: Real> Input<T> {
    pub fn from_patch(patch: &ImagePatch) -> Self {
        Self::from_planar(patch.pixels(), patch.channels(), patch.rows(), patch.cols())
    }

    pub fn from_planar(pixels: &[f32], channels: usize, rows: usize, cols: usize) -> Self {
        let prows = rows.div_ceil(ALIGN) * ALIGN;
        let pcols = cols.div_ceil(ALIGN) * ALIGN;
        let mut data = vec![T::zero(); channels * prows * pcols];
        for c in 0..channels {
            for m in 0..rows {
                let src = &pixels[(c * rows + m) * cols..(c * rows + m + 1) * cols];
                let dst = &mut data[(c * prows + m) * pcols..(c * prows + m) * pcols + cols];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = T::of(f64::from(s));
                }
            }
        }
        Self {
            rows,
            cols,
            prows,
            pcols,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.len() / (self.prows * self.pcols)
    }
}

struct DownCache<T> {
    a1: Vec<T>,
    a2: Vec<T>,
    pooled: Vec<T>,
    pool_idx: Vec<u32>,
}

struct UpCache<T> {
    cat: Vec<T>,
    out: Vec<T>,
}

struct SampleCache<T> {
    down: Vec<DownCache<T>>,
    up: Vec<UpCache<T>>,
}

/// Forward evaluation of a batch retaining what backpropagation needs.
pub struct ForwardGraph<T> {
    model_id: u64,
    model_version: u64,
    inputs: Vec<Input<T>>,
    caches: Vec<SampleCache<T>>,
    logits: Vec<Vec<T>>,
    pub maps: Vec<ScoreMaps<T>>,
}

impl<T: Real> ForwardGraph<T> {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Pre-activation head outputs for sample `i`, cropped to the input size.
    pub fn logits(&self, i: usize) -> &[T] {
        &self.logits[i]
    }
}

/// Gradient seed for [`ModelState::gradients`]: derivatives of the scalar
/// loss with respect to either the activated score maps or the head logits,
/// one `n_out x M x H` buffer per batch element.
pub enum OutputGrad<T> {
    Scores(Vec<Vec<T>>),
    Logits(Vec<Vec<T>>),
}

/// Parameter-shaped gradient collection.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub values: Vec<T>,
}

pub struct ModelState<T> {
    config: BackboneConfig,
    layout: Layout,
    params: Vec<T>,
    pub step: u64,
    seed: u64,
    id: u64,
    version: u64,
}

impl<T: Real> Clone for ModelState<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.clone(),
            step: self.step,
            seed: self.seed,
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }
}

impl<T: Real> std::fmt::Debug for ModelState<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelState")
            .field("config", &self.config)
            .field("precision", &T::NAME)
            .field("params", &self.params.len())
            .field("step", &self.step)
            .field("seed", &self.seed)
            .finish()
    }
}

struct Scratch<T> {
    cols: Vec<T>,
}

impl<T: Real> Scratch<T> {
    fn new() -> Self {
        Self { cols: Vec::new() }
    }

    fn cols(&mut self, len: usize) -> &mut [T] {
        if self.cols.len() < len {
            self.cols.resize(len, T::zero());
        }
        &mut self.cols[..len]
    }
}

impl<T: Real> ModelState<T> {
    /// Builds the backbone with Glorot uniform weights drawn from `seed`,
    /// ReLU-layer biases at `RELU_BIAS_INIT` and a zero head bias.
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in layout.tensors.iter().filter(|t| t.name.ends_with(".weight")) {
            let (fan_in, fan_out) = if spec.name == "head.weight" {
                (spec.shape[1], spec.shape[0])
            } else if spec.name.contains("tconv") {
                (spec.shape[3] * 9, spec.shape[0] * 9)
            } else {
                (spec.shape[1] * 9, spec.shape[0] * 9)
            };
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut params[spec.offset..spec.offset + spec.len()] {
                *p = T::of(rng.random_range(-bound..bound));
            }
        }
        for spec in layout.tensors.iter().filter(|t| t.name.ends_with(".bias") && t.name != "head.bias") {
            params[spec.offset..spec.offset + spec.len()].fill(T::of(RELU_BIAS_INIT));
        }
        Ok(Self {
            config,
            layout,
            params,
            step: 0,
            seed,
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        })
    }

    pub(crate) fn from_parts(config: BackboneConfig, params: Vec<T>, step: u64, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "{} parameters for a layout of {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
            step,
            seed,
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.layout.tensors
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Mutates the parameters. Any [`ForwardGraph`] taken before the call is
    /// detached from this state afterwards.
    pub fn update_params(&mut self, f: impl FnOnce(&mut [T])) {
        f(&mut self.params);
        self.version += 1;
    }

    pub fn forward(&self, batch: &[ImagePatch]) -> Result<Vec<ScoreMaps<T>>> {
        let inputs = batch.iter().map(Input::from_patch).collect::<Vec<_>>();
        Ok(self.forward_graph(inputs)?.maps)
    }

    pub fn forward_inputs(&self, inputs: &[Input<T>]) -> Result<Vec<ScoreMaps<T>>> {
        let mut scratch = Scratch::new();
        inputs
            .iter()
            .map(|x| {
                self.check_input(x)?;
                let (_, logits) = self.forward_sample(x, &mut scratch);
                self.activate(x, logits)
            })
            .collect()
    }

    pub fn forward_graph(&self, inputs: Vec<Input<T>>) -> Result<ForwardGraph<T>> {
        let mut scratch = Scratch::new();
        let mut caches = Vec::with_capacity(inputs.len());
        let mut logits = Vec::with_capacity(inputs.len());
        let mut maps = Vec::with_capacity(inputs.len());
        for x in &inputs {
            self.check_input(x)?;
            let (cache, z) = self.forward_sample(x, &mut scratch);
            caches.push(cache);
            let cropped = crop(&z, self.config.n_out, x.prows, x.pcols, x.rows, x.cols);
            maps.push(self.activate(x, z)?);
            logits.push(cropped);
        }
        Ok(ForwardGraph {
            model_id: self.id,
            model_version: self.version,
            inputs,
            caches,
            logits,
            maps,
        })
    }

    /// Exact gradient of a scalar loss with respect to every parameter,
    /// given the loss derivative at the network outputs.
    pub fn gradients(&self, graph: &ForwardGraph<T>, seed: &OutputGrad<T>) -> Result<Gradients<T>> {
        if graph.model_id != self.id || graph.model_version != self.version {
            return Err(Error::DetachedGraph);
        }
        let (bufs, on_scores) = match seed {
            OutputGrad::Scores(b) => (b, true),
            OutputGrad::Logits(b) => (b, false),
        };
        if bufs.len() != graph.len() {
            return Err(Error::Shape(format!(
                "{} output gradients for a batch of {}",
                bufs.len(),
                graph.len()
            )));
        }
        let n_out = self.config.n_out;
        let mut grads = vec![T::zero(); self.params.len()];
        let mut scratch = Scratch::new();
        for (i, dy) in bufs.iter().enumerate() {
            let x = &graph.inputs[i];
            let px = x.rows * x.cols;
            if dy.len() != n_out * px {
                return Err(Error::Shape(format!(
                    "output gradient {i} has {} values, expected {}",
                    dy.len(),
                    n_out * px
                )));
            }
            let dz = if on_scores {
                activation_backward(&graph.maps[i], &graph.logits[i], dy)
            } else {
                dy.clone()
            };
            let dz = pad(&dz, n_out, x.rows, x.cols, x.prows, x.pcols);
            self.backward_sample(x, &graph.caches[i], dz, &mut grads, &mut scratch);
        }
        Ok(Gradients { values: grads })
    }

    fn check_input(&self, x: &Input<T>) -> Result<()> {
        if x.channels() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "input has {} channels, model expects {}",
                x.channels(),
                self.config.in_channels
            )));
        }
        Ok(())
    }

    fn activate(&self, x: &Input<T>, padded_logits: Vec<T>) -> Result<ScoreMaps<T>> {
        let n_out = self.config.n_out;
        let z = crop(&padded_logits, n_out, x.prows, x.pcols, x.rows, x.cols);
        let values = match self.config.head_activation {
            HeadActivation::SoftmaxOverClasses => ops::softmax_channels(&z, n_out, x.rows * x.cols),
            HeadActivation::Sigmoid => z.iter().map(|&v| ops::sigmoid(v)).collect(),
        };
        ScoreMaps::new(n_out, x.rows, x.cols, self.config.head_activation, values)
    }

    fn w(&self, l: &Layer, len: usize) -> &[T] {
        &self.params[l.w..l.w + len]
    }

    fn b(&self, l: &Layer) -> &[T] {
        &self.params[l.b..l.b + l.cout]
    }

    fn conv3(&self, l: &Layer, x: &[T], rows: usize, cols: usize, scratch: &mut Scratch<T>) -> Vec<T> {
        let px = rows * cols;
        let k = l.cin * 9;
        let colbuf = scratch.cols(k * px);
        ops::im2col3(x, l.cin, rows, cols, 1, rows, cols, colbuf);
        let mut out = vec![T::zero(); l.cout * px];
        gemm(Mat::new(self.w(l, l.cout * k), l.cout, k), Mat::new(colbuf, k, px), T::zero(), &mut out);
        ops::add_bias_relu(&mut out, self.b(l), px);
        out
    }

    /// `x` is `cin x rows x cols`; output is `cout x 2rows x 2cols`.
    fn tconv(&self, l: &Layer, x: &[T], rows: usize, cols: usize, scratch: &mut Scratch<T>) -> Vec<T> {
        let px = rows * cols;
        let k = l.cout * 9;
        let colbuf = scratch.cols(k * px);
        gemm(Mat::new(self.w(l, k * l.cin), k, l.cin), Mat::new(x, l.cin, px), T::zero(), colbuf);
        let (br, bc) = (2 * rows, 2 * cols);
        let mut out = vec![T::zero(); l.cout * br * bc];
        ops::col2im3(colbuf, l.cout, br, bc, 2, rows, cols, &mut out);
        ops::add_bias_relu(&mut out, self.b(l), br * bc);
        out
    }

    fn forward_sample(&self, x: &Input<T>, scratch: &mut Scratch<T>) -> (SampleCache<T>, Vec<T>) {
        let lay = &self.layout;
        let (mut r, mut c) = (x.prows, x.pcols);
        let mut down: Vec<DownCache<T>> = Vec::with_capacity(DEPTH);
        for (l, (la, lb)) in lay.down.iter().enumerate() {
            let src = if l == 0 { &x.data } else { &down[l - 1].pooled };
            let a1 = self.conv3(la, src, r, c, scratch);
            let a2 = self.conv3(lb, &a1, r, c, scratch);
            let (pooled, pool_idx) = ops::max_pool2(&a2, lb.cout, r, c);
            down.push(DownCache { a1, a2, pooled, pool_idx });
            r /= 2;
            c /= 2;
        }
        let mut up: Vec<UpCache<T>> = Vec::with_capacity(DEPTH);
        for (u, (lt, lc)) in lay.up.iter().enumerate() {
            let d = DEPTH - 1 - u;
            let src = if u == 0 { &down[DEPTH - 1].pooled } else { &up[u - 1].out };
            let t = self.tconv(lt, src, r, c, scratch);
            r *= 2;
            c *= 2;
            let mut cat = t;
            cat.extend_from_slice(&down[d].a2);
            let out = self.conv3(lc, &cat, r, c, scratch);
            up.push(UpCache { cat, out });
        }
        let head = &lay.head;
        let px = r * c;
        let mut logits = vec![T::zero(); head.cout * px];
        gemm(
            Mat::new(self.w(head, head.cout * head.cin), head.cout, head.cin),
            Mat::new(&up[DEPTH - 1].out, head.cin, px),
            T::zero(),
            &mut logits,
        );
        ops::add_bias(&mut logits, self.b(head), px);
        (SampleCache { down, up }, logits)
    }

    /// Accumulates weight gradients of a 3x3 convolution and, when
    /// `want_input`, returns the gradient with respect to its input.
    #[allow(clippy::too_many_arguments)]
    fn conv3_backward(
        &self,
        l: &Layer,
        input: &[T],
        dout: &[T],
        rows: usize,
        cols: usize,
        grads: &mut [T],
        scratch: &mut Scratch<T>,
        want_input: bool,
    ) -> Option<Vec<T>> {
        let px = rows * cols;
        let k = l.cin * 9;
        let colbuf = scratch.cols(k * px);
        ops::im2col3(input, l.cin, rows, cols, 1, rows, cols, colbuf);
        gemm(
            Mat::new(dout, l.cout, px),
            Mat::new(colbuf, k, px).t(),
            T::one(),
            &mut grads[l.w..l.w + l.cout * k],
        );
        ops::bias_grad(dout, px, &mut grads[l.b..l.b + l.cout]);
        if !want_input {
            return None;
        }
        gemm(Mat::new(self.w(l, l.cout * k), l.cout, k).t(), Mat::new(dout, l.cout, px), T::zero(), colbuf);
        let mut dx = vec![T::zero(); l.cin * px];
        ops::col2im3(colbuf, l.cin, rows, cols, 1, rows, cols, &mut dx);
        Some(dx)
    }

    /// `input` is the small `cin x rows x cols` grid; `dout` the upsampled
    /// gradient. Returns the gradient with respect to `input`.
    #[allow(clippy::too_many_arguments)]
    fn tconv_backward(
        &self,
        l: &Layer,
        input: &[T],
        dout: &[T],
        rows: usize,
        cols: usize,
        grads: &mut [T],
        scratch: &mut Scratch<T>,
    ) -> Vec<T> {
        let px = rows * cols;
        let k = l.cout * 9;
        let (br, bc) = (2 * rows, 2 * cols);
        let colbuf = scratch.cols(k * px);
        ops::im2col3(dout, l.cout, br, bc, 2, rows, cols, colbuf);
        gemm(
            Mat::new(colbuf, k, px),
            Mat::new(input, l.cin, px).t(),
            T::one(),
            &mut grads[l.w..l.w + k * l.cin],
        );
        ops::bias_grad(dout, br * bc, &mut grads[l.b..l.b + l.cout]);
        let mut dx = vec![T::zero(); l.cin * px];
        gemm(Mat::new(self.w(l, k * l.cin), k, l.cin).t(), Mat::new(colbuf, k, px), T::zero(), &mut dx);
        dx
    }

    fn backward_sample(
        &self,
        x: &Input<T>,
        cache: &SampleCache<T>,
        dlogits: Vec<T>,
        grads: &mut [T],
        scratch: &mut Scratch<T>,
    ) {
        let lay = &self.layout;
        let (mut r, mut c) = (x.prows, x.pcols);
        let px = r * c;

        let head = &lay.head;
        let top = &cache.up[DEPTH - 1].out;
        gemm(
            Mat::new(&dlogits, head.cout, px),
            Mat::new(top, head.cin, px).t(),
            T::one(),
            &mut grads[head.w..head.w + head.cout * head.cin],
        );
        ops::bias_grad(&dlogits, px, &mut grads[head.b..head.b + head.cout]);
        let mut dx = vec![T::zero(); head.cin * px];
        gemm(
            Mat::new(self.w(head, head.cout * head.cin), head.cout, head.cin).t(),
            Mat::new(&dlogits, head.cout, px),
            T::zero(),
            &mut dx,
        );

        let mut dskip: Vec<Vec<T>> = vec![Vec::new(); DEPTH];
        for u in (0..DEPTH).rev() {
            let d = DEPTH - 1 - u;
            let (lt, lc) = &lay.up[u];
            let uc = &cache.up[u];
            ops::relu_mask(&mut dx, &uc.out);
            let dcat = self
                .conv3_backward(lc, &uc.cat, &dx, r, c, grads, scratch, true)
                .expect("input gradient requested");
            let split = lt.cout * r * c;
            let mut dt = dcat[..split].to_vec();
            dskip[d] = dcat[split..].to_vec();
            ops::relu_mask(&mut dt, &uc.cat[..split]);
            r /= 2;
            c /= 2;
            let src = if u == 0 { &cache.down[DEPTH - 1].pooled } else { &cache.up[u - 1].out };
            dx = self.tconv_backward(lt, src, &dt, r, c, grads, scratch);
        }

        for l in (0..DEPTH).rev() {
            let (la, lb) = &lay.down[l];
            let dc = &cache.down[l];
            r *= 2;
            c *= 2;
            let mut da2 = std::mem::take(&mut dskip[l]);
            ops::max_unpool2_add(&dx, &dc.pool_idx, &mut da2);
            ops::relu_mask(&mut da2, &dc.a2);
            let mut da1 = self
                .conv3_backward(lb, &dc.a1, &da2, r, c, grads, scratch, true)
                .expect("input gradient requested");
            ops::relu_mask(&mut da1, &dc.a1);
            let src = if l == 0 { &x.data } else { &cache.down[l - 1].pooled };
            if let Some(g) = self.conv3_backward(la, src, &da1, r, c, grads, scratch, l > 0) {
                dx = g;
            }
        }
    }
}

/// Pulls a score-map gradient back to the logits. The sigmoid derivative is
/// taken as `sigmoid(z) * sigmoid(-z)` and the softmax one as
/// `p_j * sum_k p_k (g_j - g_k)`, so neither cancels to zero once the head
/// saturates in single precision.
fn activation_backward<T: Real>(maps: &ScoreMaps<T>, logits: &[T], dy: &[T]) -> Vec<T> {
    let y = maps.values();
    let n = maps.n_out();
    let px = maps.rows() * maps.cols();
    match maps.activation() {
        HeadActivation::Sigmoid => logits
            .iter()
            .zip(dy)
            .map(|(&z, &g)| g * ops::sigmoid(z) * ops::sigmoid(-z))
            .collect(),
        HeadActivation::SoftmaxOverClasses => {
            let mut dz = vec![T::zero(); y.len()];
            for p in 0..px {
                for j in 0..n {
                    let gj = dy[j * px + p];
                    let spread: T = (0..n).map(|k| y[k * px + p] * (gj - dy[k * px + p])).sum();
                    dz[j * px + p] = y[j * px + p] * spread;
                }
            }
            dz
        }
    }
}

fn crop<T: Real>(buf: &[T], ch: usize, prows: usize, pcols: usize, rows: usize, cols: usize) -> Vec<T> {
    if prows == rows && pcols == cols {
        return buf.to_vec();
    }
    let mut out = Vec::with_capacity(ch * rows * cols);
    for c in 0..ch {
        for m in 0..rows {
            let s = (c * prows + m) * pcols;
            out.extend_from_slice(&buf[s..s + cols]);
        }
    }
    out
}

fn pad<T: Real>(buf: &[T], ch: usize, rows: usize, cols: usize, prows: usize, pcols: usize) -> Vec<T> {
    if prows == rows && pcols == cols {
        return buf.to_vec();
    }
    let mut out = vec![T::zero(); ch * prows * pcols];
    for c in 0..ch {
        for m in 0..rows {
            let d = (c * prows + m) * pcols;
            out[d..d + cols].copy_from_slice(&buf[(c * rows + m) * cols..(c * rows + m + 1) * cols]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(rows: usize, cols: usize, ch: usize, seed: u64) -> ImagePatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..rows * cols * ch).map(|_| rng.random::<f32>()).collect();
        ImagePatch::new("p", rows, cols, ch, px).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = BackboneConfig::new(3, 6, 4);
        let a = ModelState::<f32>::build(cfg.clone(), 0).unwrap();
        let b = ModelState::<f32>::build(cfg, 0).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.tensors().len(), 2 * (2 * DEPTH + 2 * DEPTH + 1));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ModelState::<f32>::build(BackboneConfig::new(3, 0, 16), 0).is_err());
        assert!(ModelState::<f32>::build(BackboneConfig::new(3, 2, 2), 0).is_err());
        let mut cfg = BackboneConfig::new(1, 1, 8);
        cfg.head_activation = HeadActivation::SoftmaxOverClasses;
        assert!(ModelState::<f32>::build(cfg, 0).is_err());
    }

    #[test]
    fn output_shape_matches_input_including_unaligned_sizes() {
        let m = ModelState::<f64>::build(BackboneConfig::new(3, 4, 4), 1).unwrap();
        for (r, c) in [(32, 32), (20, 24), (8, 8)] {
            let out = m.forward(&[patch(r, c, 3, 2)]).unwrap();
            assert_eq!((out[0].n_out(), out[0].rows(), out[0].cols()), (4, r, c));
        }
        assert!(m.forward(&[patch(16, 16, 1, 2)]).is_err());
    }

    #[test]
    fn detached_graph_is_rejected() {
        let mut m = ModelState::<f64>::build(BackboneConfig::new(1, 1, 4), 1).unwrap();
        let g = m.forward_graph(vec![Input::from_patch(&patch(16, 16, 1, 3))]).unwrap();
        let seed = OutputGrad::Scores(vec![vec![0.0; 256]]);
        assert!(m.gradients(&g, &seed).is_ok());
        m.update_params(|_| {});
        assert!(matches!(m.gradients(&g, &seed), Err(Error::DetachedGraph)));
        let other = m.clone();
        assert!(matches!(other.gradients(&g, &seed), Err(Error::DetachedGraph)));
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let m = ModelState::<f64>::build(BackboneConfig::new(3, 3, 4), 5).unwrap();
        let g = m.forward_graph(vec![Input::from_patch(&patch(16, 16, 3, 4))]).unwrap();
        let grads = m.gradients(&g, &OutputGrad::Scores(vec![vec![0.0; 3 * 256]])).unwrap();
        assert!(grads.values.iter().all(|&v| v == 0.0));
    }
}
