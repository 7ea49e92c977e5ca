//! Minimal float64 layers with hand-written backward passes.
//!
//! Every layer keeps its parameters in contiguous `ndarray` buffers so the
//! optimizer, checkpointing and finite-difference checks can walk them as
//! flat slices through [`Parameters`]. Gradients live in a value of the same
//! type as the layer (see [`Parameters::zeros_like`]).

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

/// Uniform access to every trainable tensor, in a fixed order.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, p| out.extend_from_slice(p));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |p| {
            p.copy_from_slice(&flat[offset..offset + p.len()]);
            offset += p.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |p| p.iter_mut().for_each(|x| *x = value));
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// `self += scale * other`, elementwise over matching layouts.
    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        let flat = other.to_flat();
        let mut offset = 0;
        self.visit_mut(&mut |p| {
            let n = p.len();
            for (x, g) in p.iter_mut().zip(&flat[offset..offset + n]) {
                *x += scale * g;
            }
            offset += n;
        });
    }

    fn named_tensors(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name.to_string(), p.to_vec())));
        out
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn he_normal<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), fan_in: usize) -> Array2<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

/// 2-D convolution over a single `(C, H, W)` feature map via im2col.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out_channels, in_channels * kernel * kernel)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: he_normal(rng, (out_channels, fan_in), fan_in),
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// Small-gain initialization used for prediction heads.
    pub fn new_head<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        std: f64,
    ) -> Self {
        Self {
            weight: Array2::from_shape_fn((out_channels, in_channels), |_| {
                std * rng.sample::<f64, _>(StandardNormal)
            }),
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            kernel: 1,
            stride: 1,
            padding: 0,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        if k == 1 && self.stride == 1 && self.padding == 0 {
            return x
                .to_shape((c, h * w))
                .expect("row-major reshape")
                .to_owned();
        }
        let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let cs = cols.as_slice_mut().expect("standard layout");
        let (pad, stride) = (self.padding as isize, self.stride as isize);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cs[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy as isize * stride - pad + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = ci * h * w + iy as usize * w;
                        for ox in 0..ow {
                            let ix = ox as isize * stride - pad + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = xs[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, shape: (usize, usize, usize)) -> Array3<f64> {
        let (c, h, w) = shape;
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        if k == 1 && self.stride == 1 && self.padding == 0 {
            return cols
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((c, h, w))
                .expect("contiguous");
        }
        let mut x = Array3::<f64>::zeros(shape);
        let xs = x.as_slice_mut().expect("standard layout");
        let cols = cols.as_standard_layout();
        let cs = cols.as_slice().expect("standard layout");
        let (pad, stride) = (self.padding as isize, self.stride as isize);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cs[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy as isize * stride - pad + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = ci * h * w + iy as usize * w;
                        for ox in 0..ow {
                            let ix = ox as isize * stride - pad + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                xs[dst_row + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the output map and the im2col buffer needed by `backward`.
    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.output_size(h, w);
        let cols = self.im2col(x);
        let mut out = self.weight.dot(&cols);
        out += &self.bias.view().insert_axis(Axis(1));
        let out = out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_channels, oh, ow))
            .expect("contiguous");
        (out, cols)
    }

    /// Accumulates parameter gradients into `grad` and returns d(loss)/d(input).
    pub fn backward(
        &self,
        cols: &Array2<f64>,
        grad_out: &Array3<f64>,
        input_shape: (usize, usize, usize),
        grad: &mut Conv2d,
    ) -> Array3<f64> {
        let (oc, oh, ow) = grad_out.dim();
        let g = grad_out.to_shape((oc, oh * ow)).expect("row-major reshape");
        grad.weight += &g.dot(&cols.t());
        grad.bias += &g.sum_axis(Axis(1));
        let dcols = self.weight.t().dot(&g);
        self.col2im(&dcols, input_shape)
    }

    /// Parameter gradients only; skips the input gradient.
    pub fn backward_params(&self, cols: &Array2<f64>, grad_out: &Array3<f64>, grad: &mut Conv2d) {
        let (oc, oh, ow) = grad_out.dim();
        let g = grad_out.to_shape((oc, oh * ow)).expect("row-major reshape");
        grad.weight += &g.dot(&cols.t());
        grad.bias += &g.sum_axis(Axis(1));
    }
}

impl Parameters for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(
            &join(prefix, "weight"),
            self.weight.as_slice().expect("standard layout"),
        );
        f(
            &join(prefix, "bias"),
            self.bias.as_slice().expect("standard layout"),
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.weight.as_slice_mut().expect("standard layout"));
        f(self.bias.as_slice_mut().expect("standard layout"));
    }
}

/// Fully connected layer over row-major batches `(N, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: he_normal(rng, (outputs, inputs), inputs),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn with_std<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize, std: f64) -> Self {
        Self {
            weight: Array2::from_shape_fn((outputs, inputs), |_| {
                std * rng.sample::<f64, _>(StandardNormal)
            }),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.dot(&self.weight.t());
        out += &self.bias;
        out
    }

    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        grad_out: ArrayView2<f64>,
        grad: &mut Linear,
    ) -> Array2<f64> {
        grad.weight += &grad_out.t().dot(&x);
        grad.bias += &grad_out.sum_axis(Axis(0));
        grad_out.dot(&self.weight)
    }

    /// Input gradient without touching any parameter gradient.
    pub fn backward_input(&self, grad_out: ArrayView2<f64>) -> Array2<f64> {
        grad_out.dot(&self.weight)
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(
            &join(prefix, "weight"),
            self.weight.as_slice().expect("standard layout"),
        );
        f(
            &join(prefix, "bias"),
            self.bias.as_slice().expect("standard layout"),
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.weight.as_slice_mut().expect("standard layout"));
        f(self.bias.as_slice_mut().expect("standard layout"));
    }
}

/// SiLU (`x * sigmoid(x)`). Smooth, so central finite differences stay
/// well-posed everywhere.
pub fn silu<D: ndarray::Dimension>(pre: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    pre.mapv(|x| x / (1.0 + (-x).exp()))
}

/// Multiplies `grad` by SiLU'(pre) in place.
pub fn silu_backward<D: ndarray::Dimension>(
    pre: &ndarray::Array<f64, D>,
    grad: &mut ndarray::Array<f64, D>,
) {
    ndarray::Zip::from(grad).and(pre).for_each(|g, &x| {
        let s = 1.0 / (1.0 + (-x).exp());
        *g *= s * (1.0 + x * (1.0 - s));
    });
}

/// Multi-layer perceptron with SiLU between layers and linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Values retained by [`Mlp::forward`]: `inputs[i]` feeds layer `i`,
/// `pre[i]` is layer `i`'s output before the activation.
pub struct MlpCache {
    pub inputs: Vec<Array2<f64>>,
    pub pre: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2);
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                if i + 1 == n {
                    Linear::with_std(rng, sizes[i], sizes[i + 1], (1.0 / sizes[i] as f64).sqrt())
                } else {
                    Linear::new(rng, sizes[i], sizes[i + 1])
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Linear::outputs).unwrap_or(0)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = vec![x.to_owned()];
        let mut pre = Vec::with_capacity(self.layers.len());
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(inputs[i].view());
            if i + 1 < n {
                inputs.push(silu(&z));
            }
            pre.push(z);
        }
        let out = pre.last().expect("at least one layer").clone();
        (out, MlpCache { inputs, pre })
    }

    /// Backpropagates `grad_out`. Parameter gradients are accumulated only
    /// when `grad` is given; the input gradient is always returned.
    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_out: ArrayView2<f64>,
        mut grad: Option<&mut Mlp>,
    ) -> Array2<f64> {
        let mut g = grad_out.to_owned();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                silu_backward(&cache.pre[i], &mut g);
            }
            let layer = &self.layers[i];
            g = match grad.as_deref_mut() {
                Some(grad) => layer.backward(cache.inputs[i].view(), g.view(), &mut grad.layers[i]),
                None => layer.backward_input(g.view()),
            };
        }
        g
    }
}

impl Parameters for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for layer in &mut self.layers {
            layer.visit_mut(f);
        }
    }
}

/// Gathers columns of a `(C, H, W)` map at flat cell indices into `(N, C)`.
pub fn gather_cells(map: &Array3<f64>, cells: &[usize]) -> Array2<f64> {
    let (c, h, w) = map.dim();
    let flat = map.to_shape((c, h * w)).expect("row-major reshape");
    let mut out = Array2::zeros((cells.len(), c));
    for (row, &cell) in cells.iter().enumerate() {
        out.slice_mut(s![row, ..]).assign(&flat.slice(s![.., cell]));
    }
    out
}

/// Adjoint of [`gather_cells`]: scatter-adds rows back into the map.
pub fn scatter_cells(grad_map: &mut Array3<f64>, cells: &[usize], grad_rows: ArrayView2<f64>) {
    let (c, h, w) = grad_map.dim();
    let mut flat = grad_map
        .view_mut()
        .into_shape_with_order((c, h * w))
        .expect("contiguous");
    for (row, &cell) in cells.iter().enumerate() {
        let mut col = flat.slice_mut(s![.., cell]);
        col += &grad_rows.slice(s![row, ..]);
    }
}
