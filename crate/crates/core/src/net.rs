//! The memory-residual network
//!
//! ```text
//! z_out = Î Z + N(Z; Θ),   Z = (z_n, z_{n-1}, ..., z_{n-n_mem}) ∈ R^{d(n_mem+1)}
//! ```
//!
//! `Î` copies the first (newest) block of the stack and `N` is a fully
//! connected network with tanh hidden layers and an affine output layer.
//! With `n_mem = 0` this is the plain residual flow-map network.
//!
//! `N` sees each state component shifted and scaled, and its output is
//! multiplied per component by a fixed factor ([`Scaling`]). The factors
//! are fitted to the data once and are not trained; the default is the
//! identity.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::seed;
use crate::textio::{join_floats, parse_floats, parse_header, parse_value};

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    d: usize,
    n_mem: usize,
    /// `weights[l]` is `out x in`.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    scaling: Scaling,
}

/// Fixed per-component normalization around the trainable layers:
/// `N(Z) = output_scale * MLP((Z - shift) / scale)`, with `shift` and
/// `scale` repeated for every lag of the stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaling {
    pub shift: Array1<f64>,
    pub scale: Array1<f64>,
    pub output_scale: Array1<f64>,
}

impl Scaling {
    pub fn identity(d: usize) -> Self {
        Self {
            shift: Array1::zeros(d),
            scale: Array1::ones(d),
            output_scale: Array1::ones(d),
        }
    }

    /// Mean and standard deviation of the newest state in each window, and
    /// the standard deviation of the one-step increments. Constant
    /// components keep a unit scale.
    pub fn fit(inputs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<Self> {
        let d = targets.ncols();
        check_dim("batch rows", inputs.nrows(), targets.nrows())?;
        if inputs.ncols() < d || inputs.ncols() % d != 0 {
            return Err(Error::Dimension {
                context: "stacked input width".into(),
                expected: d,
                actual: inputs.ncols(),
            });
        }
        if targets.nrows() == 0 {
            return Err(Error::InvalidArgument("cannot fit a scaling to zero rows".into()));
        }
        let newest = inputs.slice(s![.., ..d]);
        let increments = &targets - &newest;
        let spread = |m: ArrayView2<f64>| {
            m.std_axis(Axis(0), 0.0).mapv(|v| if v > 0.0 && v.is_finite() { v } else { 1.0 })
        };
        Ok(Self {
            shift: newest.mean_axis(Axis(0)).unwrap(),
            scale: spread(newest),
            output_scale: spread(increments.view()),
        })
    }

    fn validate(&self, d: usize) -> Result<()> {
        check_dim("scaling shift", d, self.shift.len())?;
        check_dim("scaling scale", d, self.scale.len())?;
        check_dim("scaling output scale", d, self.output_scale.len())?;
        let finite = |a: &Array1<f64>| a.iter().all(|v| v.is_finite());
        let positive = |a: &Array1<f64>| a.iter().all(|&v| v > 0.0);
        if !finite(&self.shift) || !finite(&self.scale) || !finite(&self.output_scale) {
            return Err(Error::InvalidArgument("scaling must be finite".into()));
        }
        if !positive(&self.scale) || !positive(&self.output_scale) {
            return Err(Error::InvalidArgument("scaling factors must be positive".into()));
        }
        Ok(())
    }
}

/// Gradients shaped like the [`NetworkParams`] they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl GradientSet {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            weights: params.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: params.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|w| *w *= factor);
        self.biases.iter_mut().for_each(|b| *b *= factor);
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    /// All entries, layer by layer, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

/// Random parameters: weights `N(0, 1/fan_in)`, biases zero.
pub fn init_params(d: usize, n_mem: usize, hidden: &[usize], seed: u64) -> Result<NetworkParams> {
    if d == 0 {
        return Err(Error::InvalidArgument("output dimension must be positive".into()));
    }
    if hidden.is_empty() || hidden.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "hidden layer widths must be non-empty and positive, got {hidden:?}"
        )));
    }
    let mut rng = seed::rng(seed);
    let mut widths = vec![d * (n_mem + 1)];
    widths.extend_from_slice(hidden);
    widths.push(d);
    let mut weights = Vec::with_capacity(widths.len() - 1);
    let mut biases = Vec::with_capacity(widths.len() - 1);
    for pair in widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let scale = 1.0 / (fan_in as f64).sqrt();
        weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        }));
        biases.push(Array1::zeros(fan_out));
    }
    NetworkParams::from_layers(d, n_mem, weights, biases)
}

/// Cached activations of one batched forward pass.
struct Tape {
    /// `activations[0]` is the input, `activations[l + 1]` the output of
    /// hidden layer `l` (after tanh).
    activations: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl NetworkParams {
    /// Assembles parameters from explicit layers, checking that the shapes
    /// chain from `d (n_mem + 1)` inputs to `d` outputs.
    pub fn from_layers(
        d: usize,
        n_mem: usize,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        if weights.len() < 2 || weights.len() != biases.len() {
            return Err(Error::InvalidArgument(format!(
                "need at least one hidden layer and matching biases, got {} weights and {} biases",
                weights.len(),
                biases.len()
            )));
        }
        let mut width = d * (n_mem + 1);
        for (w, b) in weights.iter().zip(&biases) {
            check_dim("layer input width", width, w.ncols())?;
            check_dim("layer bias length", w.nrows(), b.len())?;
            width = w.nrows();
        }
        check_dim("output width", d, width)?;
        let params = Self {
            d,
            n_mem,
            weights,
            biases,
            scaling: Scaling::identity(d),
        };
        if params.values().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("network parameters must be finite".into()));
        }
        Ok(params)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_mem(&self) -> usize {
        self.n_mem
    }

    /// Stacked input width `d (n_mem + 1)`.
    pub fn input_dim(&self) -> usize {
        self.d * (self.n_mem + 1)
    }

    pub fn scaling(&self) -> &Scaling {
        &self.scaling
    }

    pub fn set_scaling(&mut self, scaling: Scaling) -> Result<()> {
        scaling.validate(self.d)?;
        self.scaling = scaling;
        Ok(())
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.weights[..self.weights.len() - 1].iter().map(|w| w.nrows()).collect()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    /// Total number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Sets the final affine layer to zero, turning the network into the
    /// bare skip connection.
    pub fn zero_output_layer(&mut self) {
        self.weights.last_mut().unwrap().fill(0.0);
        self.biases.last_mut().unwrap().fill(0.0);
    }

    /// One-step prediction `Î z_stack + N(z_stack)`.
    pub fn forward(&self, z_stack: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_dim("network input", self.input_dim(), z_stack.len())?;
        let batch = z_stack.insert_axis(Axis(0));
        Ok(self.run(batch).output.index_axis_move(Axis(0), 0))
    }

    /// Row-wise [`forward`](Self::forward) over a `B x D` batch.
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("network input", self.input_dim(), inputs.ncols())?;
        Ok(self.run(inputs).output)
    }

    fn run(&self, inputs: ArrayView2<f64>) -> Tape {
        let last = self.weights.len() - 1;
        let mut activations = Vec::with_capacity(self.weights.len());
        let mut normalized = inputs.to_owned();
        for mut block in normalized.exact_chunks_mut((inputs.nrows(), self.d)) {
            block -= &self.scaling.shift;
            block /= &self.scaling.scale;
        }
        activations.push(normalized);
        for l in 0..last {
            let mut z = activations[l].dot(&self.weights[l].t());
            z += &self.biases[l];
            z.mapv_inplace(f64::tanh);
            activations.push(z);
        }
        let mut output = activations[last].dot(&self.weights[last].t());
        output += &self.biases[last];
        output *= &self.scaling.output_scale;
        output += &inputs.slice(s![.., ..self.d]);
        Tape { activations, output }
    }

    /// Reverse pass: given `G = dL/d(output)` for each row, returns the
    /// parameter gradient summed over rows and `dL/d(input)` per row.
    fn pullback(&self, tape: &Tape, output_grad: ArrayView2<f64>) -> (GradientSet, Array2<f64>) {
        let layers = self.weights.len();
        let mut gw = Vec::with_capacity(layers);
        let mut gb = Vec::with_capacity(layers);
        let mut delta = &output_grad * &self.scaling.output_scale;
        for l in (0..layers).rev() {
            gw.push(delta.t().dot(&tape.activations[l]));
            gb.push(delta.sum_axis(Axis(0)));
            let mut upstream = delta.dot(&self.weights[l]);
            if l > 0 {
                Zip::from(&mut upstream)
                    .and(&tape.activations[l])
                    .for_each(|g, &a| *g *= 1.0 - a * a);
            }
            delta = upstream;
        }
        gw.reverse();
        gb.reverse();
        let mut input_grad = delta;
        for mut block in input_grad.exact_chunks_mut((output_grad.nrows(), self.d)) {
            block /= &self.scaling.scale;
        }
        // Î passes the output gradient straight to the newest block.
        input_grad.slice_mut(s![.., ..self.d]).zip_mut_with(&output_grad, |g, &o| *g += o);
        (GradientSet { weights: gw, biases: gb }, input_grad)
    }

    /// Gradients of `output(z_stack) · output_grad` with respect to every
    /// parameter and to the input.
    pub fn backward(
        &self,
        z_stack: ArrayView1<f64>,
        output_grad: ArrayView1<f64>,
    ) -> Result<(GradientSet, Array1<f64>)> {
        check_dim("network input", self.input_dim(), z_stack.len())?;
        check_dim("output gradient", self.d, output_grad.len())?;
        let tape = self.run(z_stack.insert_axis(Axis(0)));
        let (grads, input_grad) = self.pullback(&tape, output_grad.insert_axis(Axis(0)));
        Ok((grads, input_grad.index_axis_move(Axis(0), 0)))
    }

    /// Sum of squared errors over a batch and its parameter gradient.
    pub fn squared_error_gradient(
        &self,
        inputs: ArrayView2<f64>,
        targets: ArrayView2<f64>,
    ) -> Result<(f64, GradientSet)> {
        check_dim("network input", self.input_dim(), inputs.ncols())?;
        check_dim("target width", self.d, targets.ncols())?;
        check_dim("batch rows", inputs.nrows(), targets.nrows())?;
        let tape = self.run(inputs);
        let residual = &tape.output - &targets;
        let sse = residual.iter().map(|r| r * r).sum();
        let (grads, _) = self.pullback(&tape, (residual * 2.0).view());
        Ok((sse, grads))
    }

    /// Writes the checkpoint format:
    ///
    /// ```text
    /// d=<d> n_mem=<n_mem> layers=<w1,...,wL,d>
    /// SHIFT <d values>
    /// SCALE <d values>
    /// OUTPUT_SCALE <d values>
    /// W
    /// <row 0>
    /// ...
    /// B <bias values>
    /// ```
    ///
    /// with one `W` block and `B` line per layer.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn to_checkpoint_string(&self) -> String {
        let layers: Vec<String> = self.weights.iter().map(|w| w.nrows().to_string()).collect();
        let mut out = String::new();
        writeln!(out, "d={} n_mem={} layers={}", self.d, self.n_mem, layers.join(",")).unwrap();
        writeln!(out, "SHIFT {}", join_floats(self.scaling.shift.iter())).unwrap();
        writeln!(out, "SCALE {}", join_floats(self.scaling.scale.iter())).unwrap();
        writeln!(out, "OUTPUT_SCALE {}", join_floats(self.scaling.output_scale.iter())).unwrap();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push_str("W\n");
            for row in w.rows() {
                writeln!(out, "{}", join_floats(row.iter())).unwrap();
            }
            writeln!(out, "B {}", join_floats(b.iter())).unwrap();
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (lineno, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty checkpoint"))?;
        let fields = parse_header(header, &["d", "n_mem", "layers"], path, lineno)?;
        let d: usize = parse_value(fields[0], "d", path, lineno)?;
        let n_mem: usize = parse_value(fields[1], "n_mem", path, lineno)?;
        let widths = fields[2]
            .split(',')
            .map(|w| parse_value::<usize>(w, "layers", path, lineno))
            .collect::<Result<Vec<_>>>()?;
        let mut scaling_row = |key: &str| -> Result<Array1<f64>> {
            let (lineno, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, 0, format!("missing {key} line")))?;
            let rest = line
                .strip_prefix(key)
                .filter(|r| r.is_empty() || r.starts_with(' '))
                .ok_or_else(|| Error::parse(path, lineno, format!("expected `{key} ...`, found `{line}`")))?;
            let values = parse_floats(rest, path, lineno)?;
            if values.len() != d {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("{key} has {} values, expected {d}", values.len()),
                ));
            }
            Ok(Array1::from(values))
        };
        let scaling = Scaling {
            shift: scaling_row("SHIFT")?,
            scale: scaling_row("SCALE")?,
            output_scale: scaling_row("OUTPUT_SCALE")?,
        };
        let mut fan_in = d * (n_mem + 1);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for &fan_out in &widths {
            let (lineno, marker) = lines.next().ok_or_else(|| Error::parse(path, 0, "missing W block"))?;
            if marker.trim() != "W" {
                return Err(Error::parse(path, lineno, format!("expected `W`, found `{marker}`")));
            }
            let mut flat = Vec::with_capacity(fan_out * fan_in);
            for _ in 0..fan_out {
                let (lineno, line) = lines.next().ok_or_else(|| Error::parse(path, 0, "W block ends early"))?;
                let row = parse_floats(line, path, lineno)?;
                if row.len() != fan_in {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("weight row has {} values, expected {fan_in}", row.len()),
                    ));
                }
                flat.extend(row);
            }
            let (lineno, line) = lines.next().ok_or_else(|| Error::parse(path, 0, "missing B line"))?;
            let rest = line
                .strip_prefix('B')
                .ok_or_else(|| Error::parse(path, lineno, format!("expected `B ...`, found `{line}`")))?;
            let bias = parse_floats(rest, path, lineno)?;
            if bias.len() != fan_out {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("bias has {} values, expected {fan_out}", bias.len()),
                ));
            }
            weights.push(Array2::from_shape_vec((fan_out, fan_in), flat).unwrap());
            biases.push(Array1::from(bias));
            fan_in = fan_out;
        }
        if let Some((lineno, _)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::parse(path, lineno, "trailing content after last layer"));
        }
        let mut params =
            Self::from_layers(d, n_mem, weights, biases).map_err(|e| Error::parse(path, 1, e.to_string()))?;
        params
            .set_scaling(scaling)
            .map_err(|e| Error::parse(path, 2, e.to_string()))?;
        Ok(params)
    }
}
