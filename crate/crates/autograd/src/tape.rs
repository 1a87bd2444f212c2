use crate::conv::{conv2d_output_size, conv_transpose2d_output_size, Direct, Patch};
use crate::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, patch: Patch, cols: Vec<T> },
    DirectConv { x: Var, w: Var, b: Option<Var>, geom: Direct },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, patch: Patch },
    ReflectPad { x: Var, pad: usize },
    InstanceNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, xhat: Vec<T>, inv_std: Vec<T> },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Softplus(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    PowScalar(Var, T),
    Mean(Var),
    MeanSpatial(Var),
    Blur { x: Var, kernel: Vec<T> },
    AvgPool2(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Output of [`Tape::backward`]: one optional gradient per recorded value.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// require a gradient or does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: operand shapes differ");
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel<T: Element>(size: usize, sigma: f64) -> Vec<T> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| T::from_f64(v / total)).collect()
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg_opt(&self, v: Option<Var>) -> bool {
        v.is_some_and(|v| self.rg(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Records an input. Gradients are only tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Zero-padded 2-D convolution. `w` is `[Cout, Cin, k, k]`, `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert!(ws.len() == 4 && ws[2] == ws[3], "conv2d: weight must be [Cout, Cin, k, k]");
        assert_eq!(ws[1], cin, "conv2d: input has {cin} channels, weight expects {}", ws[1]);
        let (cout, k) = (ws[0], ws[2]);
        if let Some(b) = b {
            assert_eq!(self.value(b).shape(), [cout], "conv2d: bias shape");
        }
        let oh = conv2d_output_size(h, k, stride, pad);
        let ow = conv2d_output_size(wd, k, stride, pad);
        let requires_grad = self.rg(x) || self.rg(w) || self.rg_opt(b);
        let mut out = vec![T::zero(); n * cout * oh * ow];
        let xv = self.value(x).data();
        let wv = self.value(w).data();

        if cout < 8 && stride == 1 && pad == 0 {
            let geom = Direct { cin, cout, h, w: wd, k };
            for i in 0..n {
                geom.forward(
                    &xv[i * cin * h * wd..(i + 1) * cin * h * wd],
                    wv,
                    &mut out[i * cout * oh * ow..(i + 1) * cout * oh * ow],
                );
            }
            self.add_bias(&mut out, b, cout, oh * ow);
            let value = Tensor::from_vec(&[n, cout, oh, ow], out);
            return self.push(value, Op::DirectConv { x, w, b, geom }, requires_grad);
        }

        let patch = Patch { channels: cin, height: h, width: wd, kernel: k, stride, pad, out_h: oh, out_w: ow };
        let (rows, p) = (patch.rows(), patch.positions());
        let mut cols = vec![T::zero(); n * rows * p];
        for i in 0..n {
            let img = &xv[i * cin * h * wd..(i + 1) * cin * h * wd];
            let c = &mut cols[i * rows * p..(i + 1) * rows * p];
            patch.im2col(img, c);
            T::gemm(
                cout,
                p,
                rows,
                T::one(),
                wv,
                false,
                c,
                false,
                T::zero(),
                &mut out[i * cout * p..(i + 1) * cout * p],
            );
        }
        self.add_bias(&mut out, b, cout, p);
        // Columns are only needed to form the weight gradient.
        if !self.rg(w) {
            cols = Vec::new();
        }
        let value = Tensor::from_vec(&[n, cout, oh, ow], out);
        self.push(value, Op::Conv2d { x, w, b, patch, cols }, requires_grad)
    }

    fn add_bias(&self, out: &mut [T], b: Option<Var>, cout: usize, plane: usize) {
        let Some(b) = b else { return };
        let bias = self.value(b).data();
        for (idx, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = bias[idx % cout];
            for v in chunk {
                *v += bv;
            }
        }
    }

    /// Transposed convolution. `w` is `[Cin, Cout, k, k]`, `b` is `[Cout]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert!(ws.len() == 4 && ws[2] == ws[3], "conv_transpose2d: weight must be [Cin, Cout, k, k]");
        assert_eq!(ws[0], cin, "conv_transpose2d: input has {cin} channels, weight expects {}", ws[0]);
        let (cout, k) = (ws[1], ws[2]);
        let oh = conv_transpose2d_output_size(h, k, stride, pad, output_pad);
        let ow = conv_transpose2d_output_size(wd, k, stride, pad, output_pad);
        // Geometry of the adjoint convolution: output space unfolded onto input positions.
        let patch = Patch { channels: cout, height: oh, width: ow, kernel: k, stride, pad, out_h: h, out_w: wd };
        assert_eq!(conv2d_output_size(oh, k, stride, pad), h);
        let (rows, p) = (patch.rows(), patch.positions());
        let mut out = vec![T::zero(); n * cout * oh * ow];
        let mut cols = vec![T::zero(); rows * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            let xi = &xv[i * cin * p..(i + 1) * cin * p];
            T::gemm(rows, p, cin, T::one(), wv, true, xi, false, T::zero(), &mut cols);
            patch.col2im(&cols, &mut out[i * cout * oh * ow..(i + 1) * cout * oh * ow]);
        }
        self.add_bias(&mut out, b, cout, oh * ow);
        let requires_grad = self.rg(x) || self.rg(w) || self.rg_opt(b);
        let value = Tensor::from_vec(&[n, cout, oh, ow], out);
        self.push(value, Op::ConvTranspose2d { x, w, b, patch }, requires_grad)
    }

    /// Reflection padding on both spatial axes (edge pixel not repeated).
    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(pad < h && pad < w, "reflection pad {pad} too large for {h}x{w}");
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                let sy = reflect(y as isize - pad as isize, h);
                for xx in 0..ow {
                    let sx = reflect(xx as isize - pad as isize, w);
                    d[y * ow + xx] = s[sy * w + sx];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c, oh, ow], out), Op::ReflectPad { x, pad }, rg)
    }

    /// Per-sample, per-channel normalization with optional affine `[C]` scale and shift.
    pub fn instance_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let m = h * w;
        for g in [gamma, beta].into_iter().flatten() {
            assert_eq!(self.value(g).shape(), [c], "instance_norm: affine parameter shape");
        }
        let src = self.value(x).data();
        let mut xhat = vec![T::zero(); n * c * m];
        let mut inv_std = vec![T::zero(); n * c];
        for plane in 0..n * c {
            let s = &src[plane * m..(plane + 1) * m];
            let mean = lane_sum(m, |i| s[i].as_f64()) / m as f64;
            let var = lane_sum(m, |i| (s[i].as_f64() - mean).powi(2)) / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[plane] = T::from_f64(is);
            for (d, &v) in xhat[plane * m..(plane + 1) * m].iter_mut().zip(s) {
                *d = T::from_f64((v.as_f64() - mean) * is);
            }
        }
        let mut out = xhat.clone();
        if gamma.is_some() || beta.is_some() {
            let gv = gamma.map(|g| self.value(g).data());
            let bv = beta.map(|b| self.value(b).data());
            for plane in 0..n * c {
                let ch = plane % c;
                let scale = gv.map_or(T::one(), |g| g[ch]);
                let shift = bv.map_or(T::zero(), |b| b[ch]);
                for v in &mut out[plane * m..(plane + 1) * m] {
                    *v = *v * scale + shift;
                }
            }
        }
        let rg = self.rg(x) || self.rg_opt(gamma) || self.rg_opt(beta);
        let value = Tensor::from_vec(&[n, c, h, w], out);
        self.push(value, Op::InstanceNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        self.unary(x, move |v| if v > T::zero() { v } else { v * s }, Op::LeakyRelu(x, s))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, T::tanh, Op::Tanh(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()) + (-v.abs()).exp().ln_1p(), Op::Softplus(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, T::abs, Op::Abs(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(x, move |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(x, move |v| v + c, Op::AddScalar(x))
    }

    /// `x^p`; the derivative is taken as zero where `x == 0`.
    pub fn pow_scalar(&mut self, x: Var, p: f64) -> Var {
        let p = T::from_f64(p);
        self.unary(x, move |v| v.powf(p), Op::PowScalar(x, p))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        same_shape(self.value(a), self.value(b), what);
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(av.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum_f64() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(T::from_f64(m)), Op::Mean(x), rg)
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let m = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(m)
            .map(|p| T::from_f64(p.iter().map(|v| v.as_f64()).sum::<f64>() / m as f64))
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c], data), Op::MeanSpatial(x), rg)
    }

    /// Separable 2-D filter of the given 1-D taps, no padding ("valid").
    pub fn blur_valid(&mut self, x: Var, kernel: &[T]) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let k = kernel.len();
        assert!(h >= k && w >= k, "blur window {k} larger than {h}x{w}");
        let (oh, ow) = (h - k + 1, w - k + 1);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut tmp = vec![T::zero(); h * ow];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            for y in 0..h {
                for ox in 0..ow {
                    let row = &s[y * w + ox..y * w + ox + k];
                    tmp[y * ow + ox] = row.iter().zip(kernel).fold(T::zero(), |a, (&v, &g)| a + v * g);
                }
            }
            let d = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for (i, &g) in kernel.iter().enumerate() {
                        acc += tmp[(oy + i) * ow + ox] * g;
                    }
                    d[oy * ow + ox] = acc;
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::from_vec(&[n, c, oh, ow], out);
        self.push(value, Op::Blur { x, kernel: kernel.to_vec() }, rg)
    }

    /// 2x2 average pooling with stride 2; a trailing odd row or column is dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (h / 2, w / 2);
        assert!(oh > 0 && ow > 0, "avg_pool2 on {h}x{w}");
        let src = self.value(x).data();
        let quarter = T::from_f64(0.25);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    out[(plane * oh + y) * ow + xx] = (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]) * quarter;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c, oh, ow], out), Op::AvgPool2(x), rg)
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(root) {
            grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.rg(v) {
            return None;
        }
        let shape = self.value(v).shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut())
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, patch, cols } => {
                let (n, cin, h, wd) = self.value(*x).dims4();
                let cout = self.value(*w).shape()[0];
                let (rows, p) = (patch.rows(), patch.positions());
                let wv = self.value(*w).data();
                if let Some(dw) = self.slot(grads, *w) {
                    for s in 0..n {
                        let dy = &gd[s * cout * p..(s + 1) * cout * p];
                        let c = &cols[s * rows * p..(s + 1) * rows * p];
                        T::gemm(cout, rows, p, T::one(), dy, false, c, true, T::one(), dw);
                    }
                }
                if let Some(b) = b {
                    self.bias_grad(grads, *b, gd, cout, p);
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dcols = vec![T::zero(); rows * p];
                    let img = cin * h * wd;
                    for s in 0..n {
                        let dy = &gd[s * cout * p..(s + 1) * cout * p];
                        T::gemm(rows, p, cout, T::one(), wv, true, dy, false, T::zero(), &mut dcols);
                        patch.col2im(&dcols, &mut dx[s * img..(s + 1) * img]);
                    }
                }
            }
            Op::DirectConv { x, w, b, geom } => {
                let n = self.value(*x).shape()[0];
                let img = geom.cin * geom.h * geom.w;
                let (oh, ow) = (geom.h - geom.k + 1, geom.w - geom.k + 1);
                let out = geom.cout * oh * ow;
                if let Some(dw) = self.slot(grads, *w) {
                    let xv = self.value(*x).data();
                    for s in 0..n {
                        geom.backward_weight(&gd[s * out..(s + 1) * out], &xv[s * img..(s + 1) * img], dw);
                    }
                }
                if let Some(b) = b {
                    self.bias_grad(grads, *b, gd, geom.cout, oh * ow);
                }
                let wv = self.value(*w).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for s in 0..n {
                        geom.backward_input(&gd[s * out..(s + 1) * out], wv, &mut dx[s * img..(s + 1) * img]);
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, patch } => {
                let (n, cin, _, _) = self.value(*x).dims4();
                let cout = patch.channels;
                let (rows, p) = (patch.rows(), patch.positions());
                let out = cout * patch.height * patch.width;
                let mut dcols = vec![T::zero(); rows * p];
                let need_w = self.rg(*w);
                let need_x = self.rg(*x);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                for s in 0..n {
                    if !(need_w || need_x) {
                        break;
                    }
                    patch.im2col(&gd[s * out..(s + 1) * out], &mut dcols);
                    if let Some(dw) = self.slot(grads, *w) {
                        T::gemm(
                            cin,
                            rows,
                            p,
                            T::one(),
                            &xv[s * cin * p..(s + 1) * cin * p],
                            false,
                            &dcols,
                            true,
                            T::one(),
                            dw,
                        );
                    }
                    if let Some(dx) = self.slot(grads, *x) {
                        T::gemm(
                            cin,
                            p,
                            rows,
                            T::one(),
                            wv,
                            false,
                            &dcols,
                            false,
                            T::one(),
                            &mut dx[s * cin * p..(s + 1) * cin * p],
                        );
                    }
                }
                if let Some(b) = b {
                    self.bias_grad(grads, *b, gd, cout, patch.height * patch.width);
                }
            }
            Op::ReflectPad { x, pad } => {
                let (_, _, h, w) = self.value(*x).dims4();
                let (_, _, oh, ow) = g.dims4();
                if let Some(dx) = self.slot(grads, *x) {
                    for (plane, gp) in gd.chunks(oh * ow).enumerate() {
                        let d = &mut dx[plane * h * w..(plane + 1) * h * w];
                        for y in 0..oh {
                            let sy = reflect(y as isize - *pad as isize, h);
                            for xx in 0..ow {
                                let sx = reflect(xx as isize - *pad as isize, w);
                                d[sy * w + sx] += gp[y * ow + xx];
                            }
                        }
                    }
                }
            }
            Op::InstanceNorm { x, gamma, beta, xhat, inv_std } => {
                let (_, c, h, w) = self.value(*x).dims4();
                let m = h * w;
                if let Some(gamma) = gamma {
                    if let Some(dg) = self.slot(grads, *gamma) {
                        for (plane, gp) in gd.chunks(m).enumerate() {
                            let xh = &xhat[plane * m..(plane + 1) * m];
                            let s = lane_sum(m, |i| gp[i].as_f64() * xh[i].as_f64());
                            dg[plane % c] += T::from_f64(s);
                        }
                    }
                }
                if let Some(beta) = beta {
                    if let Some(db) = self.slot(grads, *beta) {
                        for (plane, gp) in gd.chunks(m).enumerate() {
                            db[plane % c] += T::from_f64(lane_sum(m, |i| gp[i].as_f64()));
                        }
                    }
                }
                let gvals = gamma.map(|g| self.value(g).data().to_vec());
                if let Some(dx) = self.slot(grads, *x) {
                    for (plane, gp) in gd.chunks(m).enumerate() {
                        let scale = gvals.as_ref().map_or(1.0, |g| g[plane % c].as_f64());
                        let xh = &xhat[plane * m..(plane + 1) * m];
                        let s1 = lane_sum(m, |i| gp[i].as_f64() * scale) / m as f64;
                        let s2 = lane_sum(m, |i| gp[i].as_f64() * scale * xh[i].as_f64()) / m as f64;
                        let is = inv_std[plane].as_f64();
                        let d = &mut dx[plane * m..(plane + 1) * m];
                        for ((o, gv), xv) in d.iter_mut().zip(gp).zip(xh) {
                            let xv = xv.as_f64();
                            *o += T::from_f64(is * (gv.as_f64() * scale - s1 - xv * s2));
                        }
                    }
                }
            }
            Op::Relu(x) => self.pointwise(grads, *x, gd, |v, _| if v > T::zero() { T::one() } else { T::zero() }),
            Op::LeakyRelu(x, s) => {
                let s = *s;
                self.pointwise(grads, *x, gd, move |v, _| if v > T::zero() { T::one() } else { s })
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(gd).zip(y) {
                        *d += gv * (T::one() - yv * yv);
                    }
                }
            }
            Op::Softplus(x) => self.pointwise(grads, *x, gd, |v, _| T::one() / (T::one() + (-v).exp())),
            Op::Abs(x) => self.pointwise(grads, *x, gd, |v, _| {
                if v > T::zero() {
                    T::one()
                } else if v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }),
            Op::Scale(x, c) => {
                let c = *c;
                self.pointwise(grads, *x, gd, move |_, _| c)
            }
            Op::AddScalar(x) => self.pointwise(grads, *x, gd, |_, _| T::one()),
            Op::PowScalar(x, p) => {
                let p = *p;
                self.pointwise(
                    grads,
                    *x,
                    gd,
                    move |v, _| if v == T::zero() { T::zero() } else { p * v.powf(p - T::one()) },
                )
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        for (o, &gv) in d.iter_mut().zip(gd) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, *a) {
                    for (o, &gv) in d.iter_mut().zip(gd) {
                        *o += gv;
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for (o, &gv) in d.iter_mut().zip(gd) {
                        *o -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(d) = self.slot(grads, *a) {
                    for ((o, &gv), &y) in d.iter_mut().zip(gd).zip(bv) {
                        *o += gv * y;
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for ((o, &gv), &x) in d.iter_mut().zip(gd).zip(av) {
                        *o += gv * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(d) = self.slot(grads, *a) {
                    for ((o, &gv), &y) in d.iter_mut().zip(gd).zip(bv) {
                        *o += gv / y;
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for (((o, &gv), &x), &y) in d.iter_mut().zip(gd).zip(av).zip(bv) {
                        *o -= gv * x / (y * y);
                    }
                }
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let gv = gd[0] / T::from_f64(len as f64);
                if let Some(d) = self.slot(grads, *x) {
                    for o in d {
                        *o += gv;
                    }
                }
            }
            Op::MeanSpatial(x) => {
                let (_, _, h, w) = self.value(*x).dims4();
                let m = T::from_f64((h * w) as f64);
                if let Some(d) = self.slot(grads, *x) {
                    for (plane, chunk) in d.chunks_mut(h * w).enumerate() {
                        let gv = gd[plane] / m;
                        for o in chunk {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Blur { x, kernel } => {
                let (_, _, h, w) = self.value(*x).dims4();
                let k = kernel.len();
                let (oh, ow) = (h - k + 1, w - k + 1);
                if let Some(dx) = self.slot(grads, *x) {
                    let mut tmp = vec![T::zero(); h * ow];
                    for (plane, gp) in gd.chunks(oh * ow).enumerate() {
                        tmp.fill(T::zero());
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gp[oy * ow + ox];
                                for (i, &kv) in kernel.iter().enumerate() {
                                    tmp[(oy + i) * ow + ox] += kv * gv;
                                }
                            }
                        }
                        let d = &mut dx[plane * h * w..(plane + 1) * h * w];
                        for y in 0..h {
                            for ox in 0..ow {
                                let tv = tmp[y * ow + ox];
                                for (j, &kv) in kernel.iter().enumerate() {
                                    d[y * w + ox + j] += kv * tv;
                                }
                            }
                        }
                    }
                }
            }
            Op::AvgPool2(x) => {
                let (_, _, h, w) = self.value(*x).dims4();
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                if let Some(dx) = self.slot(grads, *x) {
                    for (plane, gp) in gd.chunks(oh * ow).enumerate() {
                        let d = &mut dx[plane * h * w..(plane + 1) * h * w];
                        for y in 0..oh {
                            for xx in 0..ow {
                                let gv = gp[y * ow + xx] * quarter;
                                let i = 2 * y * w + 2 * xx;
                                d[i] += gv;
                                d[i + 1] += gv;
                                d[i + w] += gv;
                                d[i + w + 1] += gv;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates `g * f(x, y)` into `x`'s gradient.
    fn pointwise(&self, grads: &mut [Option<Tensor<T>>], x: Var, gd: &[T], f: impl Fn(T, T) -> T) {
        let xv = self.value(x).data();
        if let Some(d) = self.slot(grads, x) {
            for ((o, &gv), &v) in d.iter_mut().zip(gd).zip(xv) {
                *o += gv * f(v, gv);
            }
        }
    }

    fn bias_grad(&self, grads: &mut [Option<Tensor<T>>], b: Var, gd: &[T], cout: usize, plane: usize) {
        if let Some(db) = self.slot(grads, b) {
            for (idx, chunk) in gd.chunks(plane).enumerate() {
                db[idx % cout] += chunk.iter().copied().sum::<T>();
            }
        }
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// Sum of `f(0..n)` in eight interleaved partial sums so the loop vectorizes.
#[inline(always)]
fn lane_sum(n: usize, f: impl Fn(usize) -> f64) -> f64 {
    let mut lanes = [0.0f64; 8];
    let full = n / 8 * 8;
    for j in (0..full).step_by(8) {
        for (l, acc) in lanes.iter_mut().enumerate() {
            *acc += f(j + l);
        }
    }
    let tail: f64 = (full..n).map(&f).sum();
    lanes.iter().sum::<f64>() + tail
}
