//! Fixed-architecture networks with hand-written reverse passes. Batches are
//! row-major `n × width` matrices.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::real::{gemm, View};
use super::Real;

/// Affine layer `y = W x + b` with `W` stored row-major (`out × inp`) at
/// `offset` in the flat parameter vector, followed by `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dense {
    pub inp: usize,
    pub out: usize,
    pub offset: usize,
}

impl Dense {
    fn new(inp: usize, out: usize, offset: &mut usize) -> Self {
        let d = Self {
            inp,
            out,
            offset: *offset,
        };
        *offset += d.len();
        d
    }

    pub fn len(&self) -> usize {
        self.out * (self.inp + 1)
    }

    fn weights<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.offset..self.offset + self.out * self.inp]
    }

    fn bias<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        let b = self.offset + self.out * self.inp;
        &p[b..b + self.out]
    }

    /// Uniform fan-in initialisation, or zeros.
    fn init(&self, p: &mut [f64], rng: &mut impl Rng, zero: bool) {
        let bound = 1.0 / (self.inp as f64).sqrt();
        for x in &mut p[self.offset..self.offset + self.len()] {
            *x = if zero { 0.0 } else { rng.random_range(-bound..bound) };
        }
    }

    /// `y ← x Wᵀ + b` for `n` rows.
    pub fn forward<T: Real>(&self, p: &[T], x: &[T], n: usize, y: &mut [T]) {
        let b = self.bias(p);
        for row in y[..n * self.out].chunks_exact_mut(self.out) {
            row.copy_from_slice(b);
        }
        gemm(
            n,
            self.inp,
            self.out,
            T::one(),
            View::rows(x, self.inp),
            View::transposed(self.weights(p), self.inp),
            T::one(),
            y,
            self.out,
        );
    }

    /// Accumulates parameter gradients into `g` (same layout as `p`) and, if
    /// requested, writes (`accumulate = false`) or adds the input gradient.
    pub fn backward<T: Real>(&self, p: &[T], x: &[T], n: usize, dy: &[T], dx: Option<(&mut [T], bool)>, g: &mut [T]) {
        let (w_off, b_off) = (self.offset, self.offset + self.out * self.inp);
        gemm(
            self.out,
            n,
            self.inp,
            T::one(),
            View::transposed(dy, self.out),
            View::rows(x, self.inp),
            T::one(),
            &mut g[w_off..b_off],
            self.inp,
        );
        let gb = &mut g[b_off..b_off + self.out];
        for row in dy[..n * self.out].chunks_exact(self.out) {
            for (acc, &v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
        if let Some((dx, accumulate)) = dx {
            gemm(
                n,
                self.out,
                self.inp,
                T::one(),
                View::rows(dy, self.out),
                View::rows(self.weights(p), self.inp),
                if accumulate { T::one() } else { T::zero() },
                dx,
                self.inp,
            );
        }
    }
}

fn relu_inplace<T: Real>(v: &mut [T]) {
    for x in v {
        if !(*x > T::zero()) {
            *x = T::zero();
        }
    }
}

/// Zeroes gradient entries whose forward ReLU output was not positive.
fn relu_mask<T: Real>(d: &mut [T], out: &[T]) {
    for (g, &o) in d.iter_mut().zip(out) {
        if !(o > T::zero()) {
            *g = T::zero();
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Non-negative activation applied to the raw density output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DensityActivation {
    #[default]
    Softplus,
    Relu,
}

impl DensityActivation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            DensityActivation::Softplus => {
                if x > T::of(20.0) {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
            DensityActivation::Relu => x.max(T::zero()),
        }
    }

    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            DensityActivation::Softplus => sigmoid(x),
            DensityActivation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Radiance network: a ReLU trunk with one input skip, a density head, and a
/// view-conditioned colour branch.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RadianceNet {
    pub trunk: Vec<Dense>,
    /// Trunk layer whose input is `[encoded position, hidden]`.
    pub skip_into: Option<usize>,
    pub density: Dense,
    pub feature: Dense,
    pub view: Dense,
    pub rgb: Dense,
    pub pos_dim: usize,
    pub dir_dim: usize,
    pub width: usize,
    pub activation: DensityActivation,
    pub len: usize,
}

pub(crate) struct RadianceTape<T> {
    pub n: usize,
    pub enc_x: Vec<T>,
    /// Post-ReLU trunk outputs.
    pub trunk_out: Vec<Vec<T>>,
    pub skip_in: Vec<T>,
    pub raw_sigma: Vec<T>,
    pub view_in: Vec<T>,
    pub view_out: Vec<T>,
    pub sigma: Vec<T>,
    pub rgb: Vec<T>,
}

impl RadianceNet {
    pub fn new(
        pos_dim: usize,
        dir_dim: usize,
        width: usize,
        depth: usize,
        skip_after: Option<usize>,
        activation: DensityActivation,
    ) -> Self {
        let mut off = 0;
        let skip_into = skip_after.map(|s| s + 1).filter(|&s| s < depth);
        let trunk = (0..depth)
            .map(|i| {
                let inp = if i == 0 {
                    pos_dim
                } else if Some(i) == skip_into {
                    pos_dim + width
                } else {
                    width
                };
                Dense::new(inp, width, &mut off)
            })
            .collect();
        let density = Dense::new(width, 1, &mut off);
        let feature = Dense::new(width, width, &mut off);
        let view = Dense::new(width + dir_dim, width / 2, &mut off);
        let rgb = Dense::new(width / 2, 3, &mut off);
        Self {
            trunk,
            skip_into,
            density,
            feature,
            view,
            rgb,
            pos_dim,
            dir_dim,
            width,
            activation,
            len: off,
        }
    }

    pub fn init(&self, p: &mut [f64], rng: &mut impl Rng) {
        for l in self
            .trunk
            .iter()
            .chain([&self.density, &self.feature, &self.view, &self.rgb])
        {
            l.init(p, rng, false);
        }
    }

    /// Evaluates `n` points from their encoded positions and directions.
    pub fn forward<T: Real>(&self, p: &[T], enc_x: Vec<T>, enc_d: Vec<T>, n: usize) -> RadianceTape<T> {
        let w = self.width;
        let mut trunk_out: Vec<Vec<T>> = Vec::with_capacity(self.trunk.len());
        let mut skip_in = Vec::new();
        for (i, layer) in self.trunk.iter().enumerate() {
            let mut y = vec![T::zero(); n * w];
            if i == 0 {
                layer.forward(p, &enc_x, n, &mut y);
            } else if Some(i) == self.skip_into {
                skip_in = concat_rows(&enc_x, self.pos_dim, &trunk_out[i - 1], w, n);
                layer.forward(p, &skip_in, n, &mut y);
            } else {
                layer.forward(p, &trunk_out[i - 1], n, &mut y);
            }
            relu_inplace(&mut y);
            trunk_out.push(y);
        }
        let h = trunk_out.last().expect("non-empty trunk");
        let mut raw_sigma = vec![T::zero(); n];
        self.density.forward(p, h, n, &mut raw_sigma);
        let mut feat = vec![T::zero(); n * w];
        self.feature.forward(p, h, n, &mut feat);
        let view_in = concat_rows(&feat, w, &enc_d, self.dir_dim, n);
        let mut view_out = vec![T::zero(); n * (w / 2)];
        self.view.forward(p, &view_in, n, &mut view_out);
        relu_inplace(&mut view_out);
        let mut rgb = vec![T::zero(); n * 3];
        self.rgb.forward(p, &view_out, n, &mut rgb);
        for c in &mut rgb {
            *c = sigmoid(*c);
        }
        let sigma = raw_sigma.iter().map(|&r| self.activation.apply(r)).collect();
        RadianceTape {
            n,
            enc_x,
            trunk_out,
            skip_in,
            raw_sigma,
            view_in,
            view_out,
            sigma,
            rgb,
        }
    }

    /// Reverse pass. Returns the gradient of the encoded positions when
    /// `want_input` is set.
    pub fn backward<T: Real>(
        &self,
        p: &[T],
        tape: &RadianceTape<T>,
        d_sigma: &[T],
        d_rgb: &[T],
        g: &mut [T],
        want_input: bool,
    ) -> Option<Vec<T>> {
        let n = tape.n;
        let w = self.width;
        let hw = w / 2;
        let rgb_pre: Vec<T> = d_rgb
            .iter()
            .zip(&tape.rgb)
            .map(|(&d, &c)| d * c * (T::one() - c))
            .collect();
        let mut d_view_out = vec![T::zero(); n * hw];
        self.rgb
            .backward(p, &tape.view_out, n, &rgb_pre, Some((&mut d_view_out, false)), g);
        relu_mask(&mut d_view_out, &tape.view_out);
        let mut d_view_in = vec![T::zero(); n * (w + self.dir_dim)];
        self.view
            .backward(p, &tape.view_in, n, &d_view_out, Some((&mut d_view_in, false)), g);
        let d_feat = take_cols(&d_view_in, w + self.dir_dim, 0, w, n);

        let h = tape.trunk_out.last().expect("non-empty trunk");
        let mut dh = vec![T::zero(); n * w];
        self.feature.backward(p, h, n, &d_feat, Some((&mut dh, false)), g);
        let d_raw: Vec<T> = d_sigma
            .iter()
            .zip(&tape.raw_sigma)
            .map(|(&d, &r)| d * self.activation.derivative(r))
            .collect();
        self.density.backward(p, h, n, &d_raw, Some((&mut dh, true)), g);

        let mut d_enc_x = want_input.then(|| vec![T::zero(); n * self.pos_dim]);
        for i in (0..self.trunk.len()).rev() {
            relu_mask(&mut dh, &tape.trunk_out[i]);
            let layer = &self.trunk[i];
            if i == 0 {
                let dx = d_enc_x.as_deref_mut().map(|d| (d, true));
                layer.backward(p, &tape.enc_x, n, &dh, dx, g);
            } else if Some(i) == self.skip_into {
                let mut d_in = vec![T::zero(); n * layer.inp];
                layer.backward(p, &tape.skip_in, n, &dh, Some((&mut d_in, false)), g);
                if let Some(de) = d_enc_x.as_mut() {
                    add_cols(de, &d_in, layer.inp, 0, self.pos_dim, n);
                }
                dh = take_cols(&d_in, layer.inp, self.pos_dim, w, n);
            } else {
                let mut d_in = vec![T::zero(); n * w];
                layer.backward(p, &tape.trunk_out[i - 1], n, &dh, Some((&mut d_in, false)), g);
                dh = d_in;
            }
        }
        d_enc_x
    }
}

/// Displacement network: ReLU hidden layers, linear output, last layer
/// zero-initialised so the initial warp is the identity.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct WarpNet {
    pub layers: Vec<Dense>,
    pub input_dim: usize,
    pub len: usize,
}

pub(crate) struct WarpTape<T> {
    pub n: usize,
    /// Inputs of each layer; entry 0 is the network input.
    pub inputs: Vec<Vec<T>>,
    pub output: Vec<T>,
}

impl WarpNet {
    pub fn new(input_dim: usize, width: usize, depth: usize) -> Self {
        let mut off = 0;
        let layers = (0..depth)
            .map(|i| {
                let inp = if i == 0 { input_dim } else { width };
                let out = if i + 1 == depth { 3 } else { width };
                Dense::new(inp, out, &mut off)
            })
            .collect();
        Self {
            layers,
            input_dim,
            len: off,
        }
    }

    pub fn init(&self, p: &mut [f64], rng: &mut impl Rng) {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            l.init(p, rng, i == last);
        }
    }

    pub fn forward<T: Real>(&self, p: &[T], input: Vec<T>, n: usize) -> WarpTape<T> {
        let mut inputs = vec![input];
        let last = self.layers.len() - 1;
        let mut output = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let mut y = vec![T::zero(); n * l.out];
            l.forward(p, &inputs[i], n, &mut y);
            if i == last {
                output = y;
            } else {
                relu_inplace(&mut y);
                inputs.push(y);
            }
        }
        WarpTape { n, inputs, output }
    }

    /// Reverse pass; returns the gradient of the network input.
    pub fn backward<T: Real>(&self, p: &[T], tape: &WarpTape<T>, d_out: &[T], g: &mut [T]) -> Vec<T> {
        let n = tape.n;
        let mut d = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let mut dx = vec![T::zero(); n * l.inp];
            l.backward(p, &tape.inputs[i], n, &d, Some((&mut dx, false)), g);
            if i > 0 {
                relu_mask(&mut dx, &tape.inputs[i]);
            }
            d = dx;
        }
        d
    }
}

fn concat_rows<T: Real>(a: &[T], wa: usize, b: &[T], wb: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * (wa + wb));
    for r in 0..n {
        out.extend_from_slice(&a[r * wa..(r + 1) * wa]);
        out.extend_from_slice(&b[r * wb..(r + 1) * wb]);
    }
    out
}

fn take_cols<T: Real>(m: &[T], width: usize, start: usize, count: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * count);
    for r in 0..n {
        out.extend_from_slice(&m[r * width + start..r * width + start + count]);
    }
    out
}

fn add_cols<T: Real>(dst: &mut [T], m: &[T], width: usize, start: usize, count: usize, n: usize) {
    for r in 0..n {
        for c in 0..count {
            dst[r * count + c] += m[r * width + start + c];
        }
    }
}
